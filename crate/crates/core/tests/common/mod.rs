#![allow(dead_code)]

use qudit_control::objectives::Objective;
use qudit_control::*;
use rand::Rng;

pub fn random_waveform(n_steps: usize, dt: f64, rng: &mut RngStream) -> ControlWaveform {
    let v: Vec<f64> = (0..3 * n_steps)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    ControlWaveform::from_vector(dt, &v).unwrap()
}

/// Central differences of the objective in every phase.
pub fn finite_difference_gradient(objective: &Objective, w: &ControlWaveform, h: f64) -> Vec<f64> {
    let x = w.to_vector();
    (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = objective
                .fidelity(&ControlWaveform::from_vector(w.dt(), &xp).unwrap())
                .unwrap();
            let fm = objective
                .fidelity(&ControlWaveform::from_vector(w.dt(), &xm).unwrap())
                .unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise relative error, with components smaller than
/// `1e−3 · max|g|` measured against that floor.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-3 * scale.max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}
