//! Simulated randomized benchmarking of designed maps and the decay fit.
//!
//! A sequence of length `l` prepares a random state `|ψ₀⟩` from the fiducial
//! state with a designed state map, applies `l` maps drawn from the map set,
//! and maps the ideal output `|ψ_l⟩` back to the fiducial state. The fiducial
//! population is fit to
//!
//! ```text
//! F(l) = 1/d + (d−1)/d · (1 − d/(d−1) ε₀) · (1 − d/(d−1) ε_B)^l
//! ```
//!
//! Maps whose target is not a full unitary can only follow a state lying in
//! their input subspace, so sequences are built by choosing each map
//! uniformly among those that accept the current ideal state.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, Result};
use crate::grape::{design, inverse_waveform, DesignConfig};
use crate::linalg::{c, CVector, NeumaierSum};
use crate::objectives::{fidelity, PerturbationEnsemble, TargetMap};
use crate::propagation::{ControlWaveform, FieldTrajectory, Propagator};
use crate::spin_model::PhysicalParams;
use crate::targets::{basis_state, sample_random_state, RngStream};

/// Tolerance for "state lies in the input subspace".
const ACCEPT_TOL: f64 = 1e-9;
/// Stream ids below this are used for sequence construction.
const SIMULATION_STREAM_BASE: u64 = 1 << 32;
const EPSILON_S_STREAM: u64 = 1 << 40;
/// Fit convergence: relative parameter step and relative cost decrease.
const STEP_TOL: f64 = 1e-13;
const COST_TOL: f64 = 1e-15;

/// A target together with the waveform designed for it.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignedMap {
    pub target: TargetMap,
    pub waveform: ControlWaveform,
}

/// Gaussian fractional errors on `(Ω_x, Ω_y, Ω_μw)`, drawn once per run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RabiScaleErrors {
    pub mean: [f64; 3],
    pub std_dev: [f64; 3],
}

impl RabiScaleErrors {
    pub fn is_deterministic(&self) -> bool {
        self.std_dev.iter().all(|&s| s == 0.0)
    }
}

/// Imperfections applied when a sequence is run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModel {
    /// One member is drawn per sequence run and applied to every waveform in it.
    pub field_ensemble: PerturbationEnsemble,
    pub rabi_scale_errors: RabiScaleErrors,
    /// `ε₀`: survival becomes `(1 − ε₀)·s + ε₀/d`.
    pub spam_error: f64,
    /// Binomial readout noise with this many atoms, if set.
    pub atom_number: Option<u64>,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self::none()
    }
}

/// One draw from an [`ErrorModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRealization {
    pub field: FieldTrajectory,
    pub rabi_errors: [f64; 3],
}

impl ErrorModel {
    pub fn none() -> Self {
        ErrorModel {
            field_ensemble: PerturbationEnsemble::nominal(),
            rabi_scale_errors: RabiScaleErrors::default(),
            spam_error: 0.0,
            atom_number: None,
        }
    }

    /// Static offsets drawn from `offsets` with equal weights.
    pub fn static_offsets(offsets: &[f64]) -> Result<Self> {
        use crate::objectives::EnsembleMember;
        let w = 1.0 / offsets.len().max(1) as f64;
        let members = offsets
            .iter()
            .map(|&o| EnsembleMember {
                weight: w,
                trajectory: FieldTrajectory::constant(o),
            })
            .collect();
        Ok(ErrorModel {
            field_ensemble: PerturbationEnsemble::new(members)?,
            ..Self::none()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.field_ensemble.validate()?;
        if !(0.0..1.0).contains(&self.spam_error) {
            return Err(ControlError::invalid(format!(
                "spam error must lie in [0, 1), got {}",
                self.spam_error
            )));
        }
        let r = &self.rabi_scale_errors;
        if r.mean.iter().any(|&m| !(m >= -1.0 && m.is_finite()))
            || r.std_dev.iter().any(|&s| !(s >= 0.0 && s.is_finite()))
        {
            return Err(ControlError::invalid(
                "fractional Rabi errors must be >= -1 with non-negative spread",
            ));
        }
        if self.atom_number == Some(0) {
            return Err(ControlError::invalid("atom number must be positive"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ErrorRealization {
        let idx = self.field_ensemble.sample_index(rng);
        let field = self.field_ensemble.members()[idx].trajectory;
        let r = &self.rabi_scale_errors;
        let rabi_errors = std::array::from_fn(|j| {
            let z: f64 = if r.std_dev[j] > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            (r.mean[j] + r.std_dev[j] * z).max(-1.0)
        });
        ErrorRealization { field, rabi_errors }
    }
}

/// One benchmarking sequence.
#[derive(Debug, Clone)]
pub struct BenchmarkSequence {
    pub id: usize,
    pub length: usize,
    pub initial_state: CVector,
    /// Ideal output `|ψ_l⟩ = W_l ··· W_1 |ψ₀⟩`.
    pub final_state: CVector,
    pub prep: ControlWaveform,
    pub steps: Vec<Arc<DesignedMap>>,
    pub map_indices: Vec<usize>,
    pub readout: ControlWaveform,
    pub fiducial: usize,
}

impl BenchmarkSequence {
    pub fn waveforms(&self) -> impl Iterator<Item = &ControlWaveform> {
        std::iter::once(&self.prep)
            .chain(self.steps.iter().map(|m| &m.waveform))
            .chain(std::iter::once(&self.readout))
    }

    /// Fiducial population of the ideal composition (1 by construction).
    pub fn ideal_survival(&self) -> f64 {
        let mut psi = self.initial_state.clone();
        for m in &self.steps {
            psi = m.target.apply_ideal(&psi);
        }
        psi.dotc(&self.final_state).norm_sqr()
    }
}

/// Settings for sequence construction and the benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub lengths: Vec<usize>,
    pub n_per_length: usize,
    /// Configuration for preparation and readout state-map designs.
    pub prep_design: DesignConfig,
    /// Designs below this fidelity abort sequence construction.
    pub min_prep_fidelity: f64,
    /// Basis index of the fiducial state.
    pub fiducial: usize,
    pub params: PhysicalParams,
    pub rng_seed: u64,
    /// Realizations per map for `ε_S` when Rabi errors are random.
    pub epsilon_s_samples: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            lengths: vec![1, 2, 3, 4, 6, 8],
            n_per_length: 10,
            prep_design: DesignConfig {
                total_time: 100e-6,
                stop_after_success: true,
                ..DesignConfig::default()
            },
            min_prep_fidelity: 0.99,
            fiducial: 0,
            params: PhysicalParams::default(),
            rng_seed: 0,
            epsilon_s_samples: 16,
        }
    }
}

fn design_state_map(
    from: &CVector,
    to: &CVector,
    config: &BenchmarkConfig,
    seed: u64,
    what: &str,
) -> Result<ControlWaveform> {
    let target = TargetMap::state(from.clone(), to.clone())?;
    let dc = DesignConfig {
        rng_seed: seed,
        params: config.params,
        ..config.prep_design.clone()
    };
    let report = design(&target, &dc)
        .map_err(|e| ControlError::SequenceConstruction(format!("{what} design failed: {e}")))?;
    if report.best_fidelity < config.min_prep_fidelity {
        let coeffs: Vec<String> = to
            .iter()
            .chain(from.iter())
            .take(4)
            .map(|z| format!("{:.4}{:+.4}i", z.re, z.im))
            .collect();
        return Err(ControlError::SequenceConstruction(format!(
            "{what} design reached only {:.6} (state starts {})",
            report.best_fidelity,
            coeffs.join(", ")
        )));
    }
    Ok(report.best_waveform)
}

fn normalized(v: CVector) -> CVector {
    let n = v.norm();
    v / c(n, 0.0)
}

/// Draws `n_per_length` sequences for every length and designs their
/// preparation and readout maps.
pub fn build_sequences(
    map_set: &[Arc<DesignedMap>],
    lengths: &[usize],
    n_per_length: usize,
    config: &BenchmarkConfig,
    rng: &mut RngStream,
) -> Result<Vec<BenchmarkSequence>> {
    if map_set.is_empty() {
        return Err(ControlError::invalid("map set is empty"));
    }
    let d = config.params.dim();
    if let Some(m) = map_set.iter().find(|m| m.target.dim() != d) {
        return Err(ControlError::invalid(format!(
            "map of dimension {} in a {d}-dimensional benchmark",
            m.target.dim()
        )));
    }
    if config.fiducial >= d {
        return Err(ControlError::invalid("fiducial index out of range"));
    }
    let fid = basis_state(d, config.fiducial);

    struct Draft {
        id: usize,
        length: usize,
        psi0: CVector,
        psi_l: CVector,
        indices: Vec<usize>,
        seed: u64,
    }

    let mut drafts = Vec::new();
    for &l in lengths {
        for _ in 0..n_per_length {
            let id = drafts.len();
            let first = rng.random_range(0..map_set.len());
            let psi0 = map_set[first].target.sample_input_state(rng);
            let mut psi = psi0.clone();
            let mut indices = Vec::with_capacity(l);
            for k in 0..l {
                let idx = if k == 0 {
                    first
                } else {
                    let candidates: Vec<usize> = (0..map_set.len())
                        .filter(|&i| map_set[i].target.accepts(&psi, ACCEPT_TOL))
                        .collect();
                    if candidates.is_empty() {
                        return Err(ControlError::SequenceConstruction(format!(
                            "no map accepts the state reached after {k} steps of sequence {id}"
                        )));
                    }
                    candidates[rng.random_range(0..candidates.len())]
                };
                psi = normalized(map_set[idx].target.apply_ideal(&psi));
                indices.push(idx);
            }
            drafts.push(Draft {
                id,
                length: l,
                psi0,
                psi_l: psi,
                indices,
                seed: rng.next_u64(),
            });
        }
    }

    let drift_free = config.params.rf_detuning == 0.0 && config.params.uw_detuning == 0.0;
    drafts
        .into_par_iter()
        .map(|dr| {
            let prep = design_state_map(&fid, &dr.psi0, config, dr.seed, "preparation")?;
            let readout = if dr.length == 0 && drift_free {
                inverse_waveform(&prep)
            } else {
                design_state_map(&dr.psi_l, &fid, config, dr.seed ^ 0x5bd1e995, "readout")?
            };
            Ok(BenchmarkSequence {
                id: dr.id,
                length: dr.length,
                initial_state: dr.psi0,
                final_state: dr.psi_l,
                prep,
                steps: dr
                    .indices
                    .iter()
                    .map(|&i| Arc::clone(&map_set[i]))
                    .collect(),
                map_indices: dr.indices,
                readout,
                fiducial: config.fiducial,
            })
        })
        .collect()
}

/// Applies the SPAM admixture and optional binomial readout noise.
fn readout_survival<R: Rng + ?Sized>(
    population: f64,
    model: &ErrorModel,
    d: usize,
    rng: &mut R,
) -> f64 {
    let s = (1.0 - model.spam_error) * population.clamp(0.0, 1.0) + model.spam_error / d as f64;
    match model.atom_number {
        Some(n) => {
            let k = Binomial::new(n, s.clamp(0.0, 1.0))
                .expect("probability in [0, 1]")
                .sample(rng);
            k as f64 / n as f64
        }
        None => s,
    }
}

/// Fiducial population after `unitaries` act in order on the fiducial state.
pub fn survival_from_unitaries(fiducial: usize, unitaries: &[crate::CMatrix]) -> f64 {
    let d = unitaries.first().map_or(1, |u| u.nrows());
    let mut psi = basis_state(d, fiducial);
    for u in unitaries {
        psi = u * psi;
    }
    psi[fiducial].norm_sqr()
}

/// Runs one sequence under one error realization drawn from `model`.
pub fn simulate_sequence(
    seq: &BenchmarkSequence,
    model: &ErrorModel,
    params: &PhysicalParams,
    rng: &mut RngStream,
) -> Result<f64> {
    model.validate()?;
    let real = model.sample(rng);
    let propagator = Propagator::new(&params.with_rabi_errors(real.rabi_errors))?;
    let d = params.dim();
    let mut psi = basis_state(d, seq.fiducial);
    for w in seq.waveforms() {
        psi = propagator.apply(w, &real.field, &psi)?;
    }
    Ok(readout_survival(
        psi[seq.fiducial].norm_sqr(),
        model,
        d,
        rng,
    ))
}

/// Mean survival at one sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub length: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Least-squares estimate of `(ε₀, ε_B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub epsilon_0: f64,
    pub epsilon_b: f64,
    pub covariance: [[f64; 2]; 2],
    pub residual_norm: f64,
    pub iterations: usize,
}

impl DecayFit {
    pub fn std_errors(&self) -> [f64; 2] {
        [self.covariance[0][0].sqrt(), self.covariance[1][1].sqrt()]
    }

    /// Benchmark fidelity `F_B = 1 − ε_B`.
    pub fn benchmark_fidelity(&self) -> f64 {
        1.0 - self.epsilon_b
    }
}

/// Decay model `F(l)` with the base clamped at zero.
pub fn decay_model(d: usize, epsilon_0: f64, epsilon_b: f64, length: f64) -> f64 {
    let df = d as f64;
    let k = df / (df - 1.0);
    let base = (1.0 - k * epsilon_b).max(0.0);
    1.0 / df + (df - 1.0) / df * (1.0 - k * epsilon_0) * base.powf(length)
}

fn model_and_jacobian(d: usize, theta: [f64; 2], l: f64) -> (f64, [f64; 2]) {
    let df = d as f64;
    let k = df / (df - 1.0);
    let base = (1.0 - k * theta[1]).max(0.0);
    let amp = 1.0 - k * theta[0];
    let value = 1.0 / df + (df - 1.0) / df * amp * base.powf(l);
    let d_e0 = -base.powf(l);
    let d_eb = if base > 0.0 && l > 0.0 {
        -amp * l * base.powf(l - 1.0)
    } else {
        0.0
    };
    (value, [d_e0, d_eb])
}

/// Weighted Levenberg–Marquardt fit of the decay model to `(l, mean, σ)` data.
/// Points with `σ = 0` make the fit unweighted.
pub fn fit_decay(data: &[DecayPoint], d: usize) -> Result<DecayFit> {
    if d < 2 {
        return Err(ControlError::invalid("dimension must be at least 2"));
    }
    let mut distinct: Vec<usize> = data.iter().map(|p| p.length).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(ControlError::invalid(format!(
            "decay fit needs at least 3 distinct lengths, got {}",
            distinct.len()
        )));
    }
    if data
        .iter()
        .any(|p| !p.mean.is_finite() || !(p.std_error >= 0.0))
    {
        return Err(ControlError::invalid(
            "decay data must be finite with non-negative errors",
        ));
    }
    let weighted = data.iter().all(|p| p.std_error > 0.0);
    let weights: Vec<f64> = data
        .iter()
        .map(|p| {
            if weighted {
                1.0 / (p.std_error * p.std_error)
            } else {
                1.0
            }
        })
        .collect();
    let df = d as f64;
    let upper = (df - 1.0) / df;
    let project = |t: [f64; 2]| [t[0].clamp(0.0, upper), t[1].clamp(0.0, upper)];

    let cost = |t: [f64; 2]| -> f64 {
        data.iter()
            .zip(&weights)
            .map(|(p, w)| w * (p.mean - decay_model(d, t[0], t[1], p.length as f64)).powi(2))
            .collect::<NeumaierSum>()
            .value()
    };

    // log-linear starting point
    let floor = 1.0 / df;
    let pts: Vec<(f64, f64)> = data
        .iter()
        .filter(|p| p.mean > floor + 1e-9)
        .map(|p| (p.length as f64, (p.mean - floor).ln()))
        .collect();
    let mut theta = [0.01, 0.01];
    if pts.len() >= 2 {
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / n, sy / n);
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
            let intercept = my - slope * mx;
            let base = slope.exp();
            let amp = intercept.exp() / upper;
            theta = project([
                (1.0 - amp) / (df / (df - 1.0)),
                (1.0 - base) / (df / (df - 1.0)),
            ]);
        }
    }

    let mut lambda = 1e-3;
    let mut current = cost(theta);
    let mut iterations = 0;
    let max_iter = 500;
    let normal = |t: [f64; 2]| {
        let mut a = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for (p, w) in data.iter().zip(&weights) {
            let (v, j) = model_and_jacobian(d, t, p.length as f64);
            let r = p.mean - v;
            for i in 0..2 {
                g[i] += w * j[i] * r;
                for k in 0..2 {
                    a[i][k] += w * j[i] * j[k];
                }
            }
        }
        (a, g)
    };
    let converged = loop {
        if iterations >= max_iter {
            break false;
        }
        iterations += 1;
        let (a, g) = normal(theta);
        if current == 0.0 || g.iter().all(|&x| x.abs() < 1e-300) {
            break true;
        }
        // parameters pinned at a bound by an outward gradient stay fixed
        let free: [bool; 2] = std::array::from_fn(|i| {
            !((theta[i] <= 0.0 && g[i] < 0.0) || (theta[i] >= upper && g[i] > 0.0))
        });
        if !free[0] && !free[1] {
            break true;
        }
        let mut improved = false;
        while lambda < 1e20 {
            let m = [
                [a[0][0] * (1.0 + lambda), a[0][1]],
                [a[1][0], a[1][1] * (1.0 + lambda)],
            ];
            // J is d(model)/dθ, residual = y − model, so the step solves m δ = Jᵀ W r
            let delta = match free {
                [true, true] => {
                    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                    [
                        (m[1][1] * g[0] - m[0][1] * g[1]) / det,
                        (m[0][0] * g[1] - m[1][0] * g[0]) / det,
                    ]
                }
                [true, false] => [g[0] / m[0][0], 0.0],
                _ => [0.0, g[1] / m[1][1]],
            };
            if delta.iter().all(|x| x.is_finite()) {
                let trial = project([theta[0] + delta[0], theta[1] + delta[1]]);
                let c_trial = cost(trial);
                if c_trial < current {
                    let step =
                        ((trial[0] - theta[0]).powi(2) + (trial[1] - theta[1]).powi(2)).sqrt();
                    let scale = (theta[0].powi(2) + theta[1].powi(2)).sqrt();
                    theta = trial;
                    let rel = (current - c_trial) / current;
                    current = c_trial;
                    lambda = (lambda / 10.0).max(1e-15);
                    improved = true;
                    if step <= STEP_TOL * (scale + STEP_TOL) || rel < COST_TOL {
                        return finish(data, d, theta, &weights, weighted, current, iterations);
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent step left: stationary to working precision
            break true;
        }
    };
    if !converged {
        return Err(ControlError::FitFailed {
            iterations,
            residual_norm: current.sqrt(),
        });
    }
    finish(data, d, theta, &weights, weighted, current, iterations)
}

fn finish(
    data: &[DecayPoint],
    d: usize,
    theta: [f64; 2],
    weights: &[f64],
    weighted: bool,
    cost: f64,
    iterations: usize,
) -> Result<DecayFit> {
    let mut a = [[0.0; 2]; 2];
    for (p, w) in data.iter().zip(weights) {
        let (_, j) = model_and_jacobian(d, theta, p.length as f64);
        for i in 0..2 {
            for k in 0..2 {
                a[i][k] += w * j[i] * j[k];
            }
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = if weighted {
        1.0
    } else {
        cost / (data.len().saturating_sub(2).max(1)) as f64
    };
    let covariance = if det.abs() > 0.0 && det.is_finite() {
        [
            [a[1][1] / det * scale, -a[0][1] / det * scale],
            [-a[1][0] / det * scale, a[0][0] / det * scale],
        ]
    } else {
        [[f64::INFINITY, 0.0], [0.0, f64::INFINITY]]
    };
    Ok(DecayFit {
        epsilon_0: theta[0],
        epsilon_b: theta[1],
        covariance,
        residual_norm: cost.sqrt(),
        iterations,
    })
}

/// One simulated survival value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    #[serde(rename = "l")]
    pub length: usize,
    pub sequence_id: usize,
    pub survival: f64,
}

/// Everything produced by [`run_benchmark`].
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkOutcome {
    pub samples: Vec<SurvivalSample>,
    pub points: Vec<DecayPoint>,
    pub fit: DecayFit,
    /// `ε_S = 1 − ⟨F_S⟩` of the map set under the same error model.
    pub epsilon_s: f64,
    /// `ε_S / ε_B`.
    pub epsilon_ratio: f64,
}

/// Groups samples by length into mean and standard error of the mean.
pub fn aggregate(samples: &[SurvivalSample]) -> Vec<DecayPoint> {
    let mut lengths: Vec<usize> = samples.iter().map(|s| s.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    lengths
        .into_iter()
        .map(|l| {
            let v: Vec<f64> = samples
                .iter()
                .filter(|s| s.length == l)
                .map(|s| s.survival)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().copied().collect::<NeumaierSum>().value() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            DecayPoint {
                length: l,
                mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect()
}

/// Average standard error `1 − ⟨F_S⟩` of the map set under `model`.
pub fn standard_error(
    map_set: &[Arc<DesignedMap>],
    model: &ErrorModel,
    params: &PhysicalParams,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    model.validate()?;
    let members = model.field_ensemble.members();
    let per_map: Vec<Result<f64>> = map_set
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut acc = NeumaierSum::default();
            if model.rabi_scale_errors.is_deterministic() {
                let p = params.with_rabi_errors(model.rabi_scale_errors.mean.map(|x| x.max(-1.0)));
                let prop = Propagator::new(&p)?;
                for member in members {
                    let u = prop.total(&m.waveform, &member.trajectory)?;
                    acc.add(member.weight * fidelity(&m.target, &u)?);
                }
                Ok(acc.value())
            } else {
                let mut rng = RngStream::new(seed, EPSILON_S_STREAM + i as u64);
                let n = samples.max(1);
                for _ in 0..n {
                    let real = model.sample(&mut rng);
                    let prop = Propagator::new(&params.with_rabi_errors(real.rabi_errors))?;
                    let u = prop.total(&m.waveform, &real.field)?;
                    acc.add(fidelity(&m.target, &u)?);
                }
                Ok(acc.value() / n as f64)
            }
        })
        .collect();
    let mut total = NeumaierSum::default();
    for f in per_map {
        total.add(f?);
    }
    Ok(1.0 - total.value() / map_set.len() as f64)
}

/// Builds sequences, simulates them, fits the decay, and compares with `ε_S`.
pub fn run_benchmark(
    map_set: &[Arc<DesignedMap>],
    model: &ErrorModel,
    config: &BenchmarkConfig,
) -> Result<BenchmarkOutcome> {
    model.validate()?;
    let mut rng = RngStream::new(config.rng_seed, 0);
    let sequences = build_sequences(
        map_set,
        &config.lengths,
        config.n_per_length,
        config,
        &mut rng,
    )?;
    run_sequences(&sequences, map_set, model, config)
}

/// Simulation and analysis half of [`run_benchmark`] for prebuilt sequences.
pub fn run_sequences(
    sequences: &[BenchmarkSequence],
    map_set: &[Arc<DesignedMap>],
    model: &ErrorModel,
    config: &BenchmarkConfig,
) -> Result<BenchmarkOutcome> {
    let samples: Vec<SurvivalSample> = sequences
        .par_iter()
        .map(|seq| {
            let mut rng = RngStream::new(config.rng_seed, SIMULATION_STREAM_BASE + seq.id as u64);
            simulate_sequence(seq, model, &config.params, &mut rng).map(|survival| SurvivalSample {
                length: seq.length,
                sequence_id: seq.id,
                survival,
            })
        })
        .collect::<Result<_>>()?;
    let points = aggregate(&samples);
    let fit = fit_decay(&points, config.params.dim())?;
    let epsilon_s = standard_error(
        map_set,
        model,
        &config.params,
        config.epsilon_s_samples,
        config.rng_seed,
    )?;
    Ok(BenchmarkOutcome {
        samples,
        points,
        epsilon_ratio: epsilon_s / fit.epsilon_b,
        fit,
        epsilon_s,
    })
}

/// A pool of `k` random states and state maps between every ordered pair,
/// so that state-map sequences can chain.
pub fn state_map_pool<R: Rng + ?Sized>(
    dim: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<TargetMap>> {
    if k < 2 {
        return Err(ControlError::invalid(
            "a state pool needs at least two states",
        ));
    }
    let states: Vec<CVector> = (0..k).map(|_| sample_random_state(dim, rng)).collect();
    let mut out = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push(TargetMap::state(states[i].clone(), states[j].clone())?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CMatrix;
    use crate::objectives::Subspace;
    use crate::targets::sample_haar_unitary;

    fn points_from_model(d: usize, e0: f64, eb: f64, lengths: &[usize]) -> Vec<DecayPoint> {
        lengths
            .iter()
            .map(|&l| DecayPoint {
                length: l,
                mean: decay_model(d, e0, eb, l as f64),
                std_error: 0.0,
            })
            .collect()
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let pts = points_from_model(16, 0.02, 0.01, &[1, 2, 4, 8, 16]);
        let fit = fit_decay(&pts, 16).unwrap();
        assert!((fit.epsilon_0 - 0.02).abs() < 1e-10, "{fit:?}");
        assert!((fit.epsilon_b - 0.01).abs() < 1e-10, "{fit:?}");
    }

    #[test]
    fn rising_data_pins_benchmark_error_at_zero() {
        let pts: Vec<DecayPoint> = [1usize, 2, 4, 8, 16]
            .iter()
            .map(|&l| DecayPoint {
                length: l,
                mean: 0.98 + 1e-5 * l as f64,
                std_error: 1e-4,
            })
            .collect();
        let fit = fit_decay(&pts, 16).unwrap();
        assert_eq!(fit.epsilon_b, 0.0);
        assert!(fit.epsilon_0 > 0.0 && fit.epsilon_0 < 0.03, "{fit:?}");
    }

    #[test]
    fn flat_decay_gives_zero_benchmark_error() {
        let pts = points_from_model(16, 0.05, 0.0, &[1, 2, 3, 4, 6, 8]);
        for p in &pts {
            assert!((p.mean - 0.95).abs() < 1e-15);
        }
        let fit = fit_decay(&pts, 16).unwrap();
        assert!(fit.epsilon_b.abs() < 1e-10);
        assert!((fit.epsilon_0 - 0.05).abs() < 1e-10);
    }

    #[test]
    fn fit_rejects_too_few_lengths() {
        let pts = points_from_model(16, 0.02, 0.01, &[1, 2, 2]);
        assert!(fit_decay(&pts, 16).is_err());
    }

    #[test]
    fn model_is_clamped_below_floor() {
        // base 1 − k ε_B < 0 is clamped, so the model never oscillates below 1/d
        let v = decay_model(16, 0.0, 0.99, 3.0);
        assert!((v - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn spam_only_survival() {
        let model = ErrorModel {
            spam_error: 0.1,
            ..ErrorModel::none()
        };
        let mut rng = RngStream::new(0, 0);
        let s = readout_survival(1.0, &model, 16, &mut rng);
        assert!((s - 0.90625).abs() < 1e-15);
    }

    #[test]
    fn exact_composition_survives() {
        let d = 16;
        let mut rng = RngStream::new(2, 0);
        for l in 0..6 {
            let ws: Vec<CMatrix> = (0..l).map(|_| sample_haar_unitary(d, &mut rng)).collect();
            let prep = sample_haar_unitary(d, &mut rng);
            let mut total = prep.clone();
            for w in &ws {
                total = w * total;
            }
            // readout undoes the ideal composition exactly
            let mut chain = vec![prep];
            chain.extend(ws);
            chain.push(total.adjoint());
            assert!((survival_from_unitaries(0, &chain) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn error_model_validation() {
        assert!(ErrorModel {
            spam_error: 1.0,
            ..ErrorModel::none()
        }
        .validate()
        .is_err());
        let mut m = ErrorModel::none();
        m.rabi_scale_errors.mean = [-1.5, 0.0, 0.0];
        assert!(m.validate().is_err());
        assert!(ErrorModel::static_offsets(&[1.0, -1.0])
            .unwrap()
            .validate()
            .is_ok());
    }

    #[test]
    fn chained_state_pool_sequences() {
        let mut rng = RngStream::new(4, 0);
        let pool = state_map_pool(16, 3, &mut rng).unwrap();
        assert_eq!(pool.len(), 6);
        let psi = pool[0].sample_input_state(&mut rng);
        let next = pool[0].apply_ideal(&psi);
        let accepting: Vec<usize> = (0..6).filter(|&i| pool[i].accepts(&next, 1e-9)).collect();
        assert_eq!(accepting.len(), 2);
    }

    #[test]
    fn subspace_accepts_only_inside_states() {
        let mut rng = RngStream::new(5, 0);
        let t = TargetMap::subspace(
            16,
            sample_haar_unitary(2, &mut rng),
            Subspace::Basis(vec![3, 9]),
            Subspace::Basis(vec![0, 1]),
        )
        .unwrap();
        let inside = t.sample_input_state(&mut rng);
        assert!(t.accepts(&inside, 1e-9));
        assert!(!t.accepts(&basis_state(16, 0), 1e-9));
        let out = t.apply_ideal(&inside);
        assert!((out.norm() - 1.0).abs() < 1e-12);
        assert!(out.iter().skip(2).all(|z| z.norm() < 1e-15));
    }
}
