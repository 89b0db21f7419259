//! Multi-start gradient ascent on the (robust) fidelity.
//!
//! Each seed starts from uniformly random phases and climbs with exact
//! finite-step gradients. Two ascent rules share one driver: plain gradient
//! ascent and limited-memory BFGS. Both accept a step only when it satisfies
//! the Armijo condition on the averaged fidelity, so the accepted fidelity
//! sequence is non-decreasing.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, Result};
use crate::objectives::{Objective, ObjectiveValue, PerturbationEnsemble, TargetMap};
use crate::propagation::ControlWaveform;
use crate::spin_model::{PhysicalParams, StepPhases};
use crate::targets::RngStream;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// Largest single-phase change (rad) of the first trial step.
const INITIAL_STEP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AscentMethod {
    GradientAscent,
    Lbfgs { memory: usize },
}

impl Default for AscentMethod {
    fn default() -> Self {
        AscentMethod::Lbfgs { memory: 50 }
    }
}

/// Settings for one design task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    /// Control time `T` (s).
    pub total_time: f64,
    /// Phase step duration `δt` (s).
    pub dt: f64,
    pub target_fidelity: f64,
    pub max_iterations: usize,
    /// Stop when every gradient component is below this.
    pub gradient_tolerance: f64,
    pub n_seeds: usize,
    pub rng_seed: u64,
    pub ensemble: PerturbationEnsemble,
    pub params: PhysicalParams,
    pub method: AscentMethod,
    /// Run seeds in order and stop at the first one reaching `target_fidelity`.
    pub stop_after_success: bool,
    /// Refuse tasks with fewer phases than constrained parameters.
    pub enforce_parameter_count: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            total_time: 600e-6,
            dt: 4e-6,
            target_fidelity: 0.999,
            max_iterations: 2000,
            gradient_tolerance: 1e-7,
            n_seeds: 10,
            rng_seed: 0,
            ensemble: PerturbationEnsemble::nominal(),
            params: PhysicalParams::default(),
            method: AscentMethod::default(),
            stop_after_success: false,
            enforce_parameter_count: true,
        }
    }
}

impl DesignConfig {
    /// `N = T / δt`, required to be integral.
    pub fn n_steps(&self) -> Result<usize> {
        steps_for(self.total_time, self.dt).ok_or_else(|| {
            ControlError::invalid(format!(
                "control time {} s is not an integer multiple of step {} s",
                self.total_time, self.dt
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite() && self.total_time > 0.0) {
            return Err(ControlError::invalid(
                "control time and step must be positive",
            ));
        }
        self.n_steps()?;
        if !(self.target_fidelity > 0.0 && self.target_fidelity <= 1.0) {
            return Err(ControlError::invalid(format!(
                "target fidelity must lie in (0, 1], got {}",
                self.target_fidelity
            )));
        }
        if self.n_seeds == 0 {
            return Err(ControlError::invalid("at least one seed is required"));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(ControlError::invalid(
                "gradient tolerance must be non-negative",
            ));
        }
        if let AscentMethod::Lbfgs { memory: 0 } = self.method {
            return Err(ControlError::invalid("L-BFGS memory must be positive"));
        }
        self.ensemble.validate()?;
        self.params.validate()
    }
}

/// `T/δt` when it is an integer (to 1e−9 relative).
pub fn steps_for(total_time: f64, dt: f64) -> Option<usize> {
    if !(dt > 0.0 && total_time > 0.0) {
        return None;
    }
    let ratio = total_time / dt;
    let n = ratio.round();
    ((ratio - n).abs() <= 1e-9 * ratio.max(1.0) && n >= 1.0).then_some(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TargetReached,
    GradientSmall,
    MaxIterations,
    /// No step along the ascent direction passed the line search.
    Stalled,
    NumericalFailure,
}

/// Outcome of one ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub fidelity: f64,
    pub iterations: usize,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Fidelity of every accepted iterate, starting point included.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizationReport {
    pub best_waveform: ControlWaveform,
    pub best_fidelity: f64,
    pub best_seed: u64,
    pub per_seed: Vec<SeedRecord>,
    pub wall_time: f64,
}

/// Checks that the waveform has enough phases for the task.
pub fn check_parameter_count(target: &TargetMap, n_phases: usize) -> Result<()> {
    let required = target.required_phases();
    if n_phases < required {
        return Err(ControlError::UnderParameterized {
            task: target.kind().name(),
            required,
            available: n_phases,
        });
    }
    Ok(())
}

/// `3N` phases drawn uniformly from `[0, 2π)`, deterministic in `seed`.
pub fn random_initial_waveform(config: &DesignConfig, seed: u64) -> Result<ControlWaveform> {
    let n = config.n_steps()?;
    let mut rng = RngStream::new(seed, 0);
    let tau = std::f64::consts::TAU;
    let v: Vec<f64> = (0..3 * n).map(|_| rng.random::<f64>() * tau).collect();
    Ok(ControlWaveform::from_vector(config.dt, &v)?.with_label(format!("seed-{seed}")))
}

struct Point {
    x: Vec<f64>,
    value: ObjectiveValue,
}

fn evaluate(objective: &Objective, dt: f64, x: &[f64]) -> Result<ObjectiveValue> {
    let w = ControlWaveform::from_vector(dt, x)?;
    let v = objective.evaluate(&w)?;
    if !v.fidelity.is_finite() || v.gradient.iter().any(|g| !g.is_finite()) {
        return Err(ControlError::Numerical("non-finite objective value".into()));
    }
    Ok(v)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: returns `H · g` for the stored curvature pairs.
fn lbfgs_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|x| *x *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

/// Climbs from `start` until the target fidelity, a small gradient, or the
/// iteration budget is reached.
pub fn ascend(
    start: &ControlWaveform,
    target: &TargetMap,
    config: &DesignConfig,
) -> Result<(ControlWaveform, SeedRecord)> {
    config.validate()?;
    let objective = Objective::new(target, &config.params, &config.ensemble)?;
    Ok(ascend_with(&objective, start, config))
}

pub(crate) fn ascend_with(
    objective: &Objective,
    start: &ControlWaveform,
    config: &DesignConfig,
) -> (ControlWaveform, SeedRecord) {
    let dt = start.dt();
    let mut record = SeedRecord {
        seed: 0,
        fidelity: 0.0,
        iterations: 0,
        termination: Termination::MaxIterations,
        message: None,
        trace: Vec::new(),
    };
    let x0 = start.to_vector();
    let value = match evaluate(objective, dt, &x0) {
        Ok(v) => v,
        Err(e) => {
            record.termination = Termination::NumericalFailure;
            record.message = Some(e.to_string());
            return (start.clone(), record);
        }
    };
    let mut current = Point { x: x0, value };
    record.trace.push(current.value.fidelity);

    let memory = match config.method {
        AscentMethod::Lbfgs { memory } => memory,
        AscentMethod::GradientAscent => 0,
    };
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut last_step = None::<f64>;

    let termination = loop {
        let g = &current.value.gradient;
        if current.value.fidelity >= config.target_fidelity {
            break Termination::TargetReached;
        }
        if inf_norm(g) < config.gradient_tolerance {
            break Termination::GradientSmall;
        }
        if record.iterations >= config.max_iterations {
            break Termination::MaxIterations;
        }

        let gmax = inf_norm(g);
        let (mut direction, mut alpha) = if pairs.is_empty() {
            let alpha = match (config.method, last_step) {
                (AscentMethod::GradientAscent, Some(a)) => 2.0 * a,
                _ => INITIAL_STEP / gmax,
            };
            (g.clone(), alpha)
        } else {
            (lbfgs_direction(g, &pairs), 1.0)
        };
        let mut slope = dot(g, &direction);
        if !(slope > 0.0) {
            pairs.clear();
            direction = g.clone();
            alpha = INITIAL_STEP / gmax;
            slope = dot(g, &direction);
        }

        let mut accepted = None;
        let mut failure = None;
        let mut restarted = false;
        let mut tries = 0;
        while tries < MAX_BACKTRACKS {
            tries += 1;
            let x: Vec<f64> = current
                .x
                .iter()
                .zip(&direction)
                .map(|(xi, di)| xi + alpha * di)
                .collect();
            match evaluate(objective, dt, &x) {
                Ok(v)
                    if v.fidelity >= current.value.fidelity + ARMIJO_C1 * alpha * slope
                        && v.fidelity > current.value.fidelity =>
                {
                    accepted = Some(Point { x, value: v });
                    break;
                }
                Ok(_) => alpha *= 0.5,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
            if tries == MAX_BACKTRACKS && !restarted && !pairs.is_empty() {
                // quasi-Newton direction failed; retry along the gradient
                pairs.clear();
                restarted = true;
                tries = 0;
                direction = g.clone();
                alpha = INITIAL_STEP / gmax;
                slope = dot(g, &direction);
            }
        }
        if let Some(e) = failure {
            record.message = Some(e.to_string());
            break Termination::NumericalFailure;
        }
        let Some(next) = accepted else {
            break Termination::Stalled;
        };

        if memory > 0 {
            // curvature pair for the minimization of 1 − F
            let s: Vec<f64> = next.x.iter().zip(&current.x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = current
                .value
                .gradient
                .iter()
                .zip(&next.value.gradient)
                .map(|(a, b)| a - b)
                .collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                if pairs.len() == memory {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }
        }
        last_step = Some(alpha);
        current = next;
        record.iterations += 1;
        record.trace.push(current.value.fidelity);
    };

    record.termination = termination;
    record.fidelity = current.value.fidelity;
    let label = start.label.clone();
    let waveform = ControlWaveform::from_vector(dt, &current.x)
        .unwrap_or_else(|_| start.clone())
        .with_label(label);
    (waveform, record)
}

/// Runs independent ascents from `n_seeds` random starts and keeps the best.
pub fn design(target: &TargetMap, config: &DesignConfig) -> Result<OptimizationReport> {
    let started = Instant::now();
    config.validate()?;
    target.validate()?;
    let n = config.n_steps()?;
    if config.enforce_parameter_count {
        check_parameter_count(target, 3 * n)?;
    }
    let objective = Objective::new(target, &config.params, &config.ensemble)?;
    let run_seed = |i: usize| -> Result<(ControlWaveform, SeedRecord)> {
        let seed = config.rng_seed.wrapping_add(i as u64);
        let start = random_initial_waveform(config, seed)?;
        let (w, mut rec) = ascend_with(&objective, &start, config);
        rec.seed = seed;
        Ok((w, rec))
    };

    let results: Vec<(ControlWaveform, SeedRecord)> = if config.stop_after_success {
        let mut out = Vec::new();
        for i in 0..config.n_seeds {
            let r = run_seed(i)?;
            let done = r.1.fidelity >= config.target_fidelity;
            out.push(r);
            if done {
                break;
            }
        }
        out
    } else {
        (0..config.n_seeds)
            .into_par_iter()
            .map(run_seed)
            .collect::<Result<Vec<_>>>()?
    };

    if results
        .iter()
        .all(|(_, r)| r.termination == Termination::NumericalFailure)
    {
        return Err(ControlError::DesignFailed {
            reasons: results
                .iter()
                .map(|(_, r)| format!("seed {}: {}", r.seed, r.message.clone().unwrap_or_default()))
                .collect(),
        });
    }

    let best = results
        .iter()
        .filter(|(_, r)| r.termination != Termination::NumericalFailure)
        .fold(
            None::<&(ControlWaveform, SeedRecord)>,
            |acc, item| match acc {
                Some(b) if b.1.fidelity > item.1.fidelity => Some(b),
                Some(b) if b.1.fidelity == item.1.fidelity && b.1.seed < item.1.seed => Some(b),
                _ => Some(item),
            },
        )
        .expect("at least one seed succeeded");
    Ok(OptimizationReport {
        best_waveform: best.0.clone(),
        best_fidelity: best.1.fidelity,
        best_seed: best.1.seed,
        per_seed: results.iter().map(|(_, r)| r.clone()).collect(),
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Waveform whose propagator inverts that of `w` when the drift vanishes:
/// steps reversed and every phase advanced by π, which negates each drive.
pub fn inverse_waveform(w: &ControlWaveform) -> ControlWaveform {
    let pi = std::f64::consts::PI;
    let phases: Vec<StepPhases> = w
        .phases()
        .iter()
        .rev()
        .map(|p| StepPhases::new(p.phi_x + pi, p.phi_y + pi, p.phi_uw + pi))
        .collect();
    ControlWaveform::new(w.dt(), phases)
        .expect("reversal preserves validity")
        .with_label(format!("{}-inverse", w.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{fidelity, Subspace};
    use crate::propagation::{propagate, FieldTrajectory};
    use crate::spin_model::ManifoldStructure;
    use crate::targets::{basis_state, sample_haar_unitary, sample_random_state};

    fn toy_config() -> DesignConfig {
        DesignConfig {
            total_time: 200e-6,
            dt: 4e-6,
            params: PhysicalParams::with_manifold(ManifoldStructure::new(3).unwrap()),
            ..Default::default()
        }
    }

    #[test]
    fn initial_waveform_is_deterministic() {
        let cfg = DesignConfig::default();
        let a = random_initial_waveform(&cfg, 17).unwrap();
        let b = random_initial_waveform(&cfg, 17).unwrap();
        let c = random_initial_waveform(&cfg, 18).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n_phases(), 450);
        assert!(a
            .to_vector()
            .iter()
            .all(|&p| (0.0..std::f64::consts::TAU).contains(&p)));
    }

    #[test]
    fn steps_must_be_integral() {
        assert_eq!(steps_for(600e-6, 4e-6), Some(150));
        assert_eq!(steps_for(600e-6, 16e-6), None);
        assert_eq!(steps_for(592e-6, 16e-6), Some(37));
        let cfg = DesignConfig {
            total_time: 601e-6,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn already_at_target_returns_immediately() {
        let cfg = toy_config();
        let start = random_initial_waveform(&cfg, 1).unwrap();
        let u = propagate(&start, &cfg.params, &FieldTrajectory::nominal())
            .unwrap()
            .total;
        let target = TargetMap::full(u).unwrap();
        let (w, rec) = ascend(&start, &target, &cfg).unwrap();
        assert_eq!(rec.termination, Termination::TargetReached);
        assert_eq!(rec.iterations, 0);
        assert_eq!(w, start);
    }

    #[test]
    fn parameter_gate() {
        let mut rng = RngStream::new(0, 0);
        let full = TargetMap::full(sample_haar_unitary(16, &mut rng)).unwrap();
        let cfg = DesignConfig {
            total_time: 40e-6,
            ..Default::default()
        };
        match design(&full, &cfg) {
            Err(ControlError::UnderParameterized {
                required,
                available,
                ..
            }) => {
                assert_eq!(required, 255);
                assert_eq!(available, 30);
            }
            other => panic!("expected parameter-count error, got {other:?}"),
        }
    }

    #[test]
    fn state_map_design_on_toy_manifold() {
        let cfg = DesignConfig {
            total_time: 60e-6,
            n_seeds: 2,
            ..toy_config()
        };
        let mut rng = RngStream::new(3, 0);
        let target = TargetMap::state(basis_state(8, 0), sample_random_state(8, &mut rng)).unwrap();
        let report = design(&target, &cfg).unwrap();
        assert!(report.best_fidelity >= 0.999, "{report:?}");
        let u = propagate(
            &report.best_waveform,
            &cfg.params,
            &FieldTrajectory::nominal(),
        )
        .unwrap()
        .total;
        assert!((fidelity(&target, &u).unwrap() - report.best_fidelity).abs() < 1e-12);
        let max = report
            .per_seed
            .iter()
            .map(|r| r.fidelity)
            .fold(f64::MIN, f64::max);
        assert_eq!(max, report.best_fidelity);
    }

    #[test]
    fn accepted_fidelities_never_decrease() {
        let base = DesignConfig {
            max_iterations: 40,
            ..toy_config()
        };
        for run in 0..20u64 {
            let mut rng = RngStream::new(100 + run, 0);
            let method = if run % 2 == 0 {
                AscentMethod::GradientAscent
            } else {
                AscentMethod::default()
            };
            let cfg = DesignConfig {
                method,
                ..base.clone()
            };
            let target = match run % 3 {
                0 => TargetMap::full(sample_haar_unitary(8, &mut rng)).unwrap(),
                1 => TargetMap::subspace(
                    8,
                    sample_haar_unitary(2, &mut rng),
                    Subspace::Basis(vec![1, 6]),
                    Subspace::Basis(vec![0, 3]),
                )
                .unwrap(),
                _ => TargetMap::state(basis_state(8, 0), sample_random_state(8, &mut rng)).unwrap(),
            };
            let start = random_initial_waveform(&cfg, run).unwrap();
            let (_, rec) = ascend(&start, &target, &cfg).unwrap();
            assert_eq!(rec.trace.len(), rec.iterations + 1);
            for pair in rec.trace.windows(2) {
                assert!(pair[1] >= pair[0], "run {run}: {pair:?}");
            }
        }
    }

    #[test]
    fn inverse_waveform_undoes_propagator() {
        let cfg = toy_config();
        let w = random_initial_waveform(&cfg, 4).unwrap();
        let u = propagate(&w, &cfg.params, &FieldTrajectory::nominal())
            .unwrap()
            .total;
        let v = propagate(
            &inverse_waveform(&w),
            &cfg.params,
            &FieldTrajectory::nominal(),
        )
        .unwrap()
        .total;
        let prod = v * u;
        assert!(crate::linalg::max_abs_diff(&prod, &crate::CMatrix::identity(8, 8)) < 1e-10);
    }

    #[test]
    fn seeds_are_deterministic() {
        let cfg = DesignConfig {
            total_time: 40e-6,
            n_seeds: 3,
            max_iterations: 15,
            ..toy_config()
        };
        let mut rng = RngStream::new(8, 0);
        let target = TargetMap::state(basis_state(8, 0), sample_random_state(8, &mut rng)).unwrap();
        let a = design(&target, &cfg).unwrap();
        let b = design(&target, &cfg).unwrap();
        assert_eq!(a.per_seed, b.per_seed);
        assert_eq!(a.best_waveform, b.best_waveform);
    }
}
