//! Piecewise-constant propagation and exact step-propagator derivatives.
//!
//! Each step propagator is `U = exp(−i H δt)`, evaluated through the
//! eigendecomposition `H = V Λ V†`. The same eigenpairs give the exact
//! derivative of `U` along any Hermitian direction `D` (Daleckii–Krein):
//!
//! ```text
//! ∂U = V ((V† D V) ∘ Γ) V†,
//! Γ_ab = (e^{−iλ_a δt} − e^{−iλ_b δt}) / (λ_a − λ_b),   Γ_aa = −i δt e^{−iλ_a δt}
//! ```
//!
//! `Γ` is evaluated as `−i δt e^{−i(λ_a+λ_b)δt/2} sinc((λ_a−λ_b)δt/2)`, which is
//! the same quantity without the cancellation of the difference quotient.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, Result};
use crate::linalg::{c, max_norm, product, wrap_phase, CMatrix, CVector, Op};
use crate::spin_model::{ControlOperators, HermitianMatrix, PhysicalParams, StepPhases};

/// Below this `|Δλ|·δt` a pair is treated as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-9;

const EIGEN_MAX_ITER: usize = 10_000;

/// Largest phase mismatch around a coupling cycle for the real-gauge path.
const GAUGE_TOLERANCE: f64 = 1e-14;

/// Eigendecomposition of one step Hamiltonian together with its step duration.
#[derive(Debug, Clone)]
pub struct StepSpectrum {
    vectors: CMatrix,
    eigenvalues: Vec<f64>,
    dt: f64,
}

impl StepSpectrum {
    pub fn new(h: &CMatrix, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ControlError::invalid(format!(
                "step duration must be positive, got {dt}"
            )));
        }
        if !h.is_square() {
            return Err(ControlError::invalid("Hamiltonian must be square"));
        }
        let norm = max_norm(h);
        if !norm.is_finite() {
            return Err(ControlError::Eigendecomposition { norm });
        }
        if let Some(gauge) = real_gauge(h) {
            let real = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| {
                (gauge[i].conj() * h[(i, j)] * gauge[j]).re
            });
            let eig = SymmetricEigen::try_new(real, f64::EPSILON, EIGEN_MAX_ITER)
                .ok_or(ControlError::Eigendecomposition { norm })?;
            let vectors = CMatrix::from_fn(h.nrows(), h.ncols(), |i, j| {
                gauge[i] * eig.eigenvectors[(i, j)]
            });
            return Ok(StepSpectrum {
                vectors,
                eigenvalues: eig.eigenvalues.iter().copied().collect(),
                dt,
            });
        }
        let eig = SymmetricEigen::try_new(h.clone(), f64::EPSILON, EIGEN_MAX_ITER)
            .ok_or(ControlError::Eigendecomposition { norm })?;
        Ok(StepSpectrum {
            vectors: eig.eigenvectors,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            dt,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &CMatrix {
        &self.vectors
    }

    fn phase_factors(&self) -> Vec<Complex64> {
        self.eigenvalues
            .iter()
            .map(|&l| Complex64::from_polar(1.0, -l * self.dt))
            .collect()
    }

    /// `exp(−i H δt)`.
    pub fn unitary(&self) -> CMatrix {
        let e = self.phase_factors();
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= e[j];
        }
        product(&scaled, Op::Plain, &self.vectors, Op::Adjoint)
    }

    /// `exp(−i H δt) ψ` without forming the matrix.
    pub fn apply(&self, psi: &CVector) -> CVector {
        let mut coeffs = self.vectors.ad_mul(psi);
        for (x, e) in coeffs.iter_mut().zip(self.phase_factors()) {
            *x *= e;
        }
        &self.vectors * coeffs
    }

    /// The divided-difference kernel `Γ`.
    pub fn gamma(&self) -> CMatrix {
        let n = self.dim();
        let dt = self.dt;
        let mut g = CMatrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let (la, lb) = (self.eigenvalues[a], self.eigenvalues[b]);
                let half = 0.5 * (la - lb) * dt;
                let sinc = if (la - lb).abs() * dt < DEGENERACY_THRESHOLD {
                    1.0
                } else {
                    half.sin() / half
                };
                let v = Complex64::from_polar(1.0, -0.5 * (la + lb) * dt) * c(0.0, -dt * sinc);
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }

    /// `∂U` along the Hermitian direction `dh`.
    pub fn derivative(&self, dh: &CMatrix) -> CMatrix {
        self.derivative_with_gamma(dh, &self.gamma())
    }

    pub(crate) fn derivative_with_gamma(&self, dh: &CMatrix, gamma: &CMatrix) -> CMatrix {
        let v = &self.vectors;
        let rotated = product(
            &product(v, Op::Adjoint, dh, Op::Plain),
            Op::Plain,
            v,
            Op::Plain,
        );
        let weighted = rotated.component_mul(gamma);
        product(
            &product(v, Op::Plain, &weighted, Op::Plain),
            Op::Plain,
            v,
            Op::Adjoint,
        )
    }
}

/// Diagonal phases `g` with `g_i* H_ij g_j` real for all `i, j`.
///
/// Exists whenever the coupling graph of `H` is a forest (or its cycles carry
/// no net phase), which holds for the hyperfine drive: two rf ladders joined by
/// a single microwave link. Returns `None` otherwise.
fn real_gauge(h: &CMatrix) -> Option<Vec<Complex64>> {
    let n = h.nrows();
    let mut gauge: Vec<Option<Complex64>> = vec![None; n];
    let mut stack = Vec::new();
    for root in 0..n {
        if gauge[root].is_some() {
            continue;
        }
        gauge[root] = Some(c(1.0, 0.0));
        stack.push(root);
        while let Some(u) = stack.pop() {
            let gu = gauge[u]?;
            for v in 0..n {
                let huv = h[(u, v)];
                let r = huv.norm();
                if v == u || r == 0.0 {
                    continue;
                }
                let want = gu * huv.conj() / r;
                match gauge[v] {
                    None => {
                        gauge[v] = Some(want);
                        stack.push(v);
                    }
                    Some(gv) if (gv - want).norm() > GAUGE_TOLERANCE => return None,
                    Some(_) => {}
                }
            }
        }
    }
    gauge.into_iter().collect()
}

/// `exp(−i h δt)` via eigendecomposition.
pub fn step_propagator(h: &HermitianMatrix, dt: f64) -> Result<CMatrix> {
    Ok(StepSpectrum::new(h.matrix(), dt)?.unitary())
}

/// Step propagator and its exact derivatives along each `∂H/∂φ_j`.
pub fn step_propagator_with_derivatives(
    h: &HermitianMatrix,
    dh: &[HermitianMatrix],
    dt: f64,
) -> Result<(CMatrix, Vec<CMatrix>)> {
    let spectrum = StepSpectrum::new(h.matrix(), dt)?;
    let gamma = spectrum.gamma();
    let mut derivs = Vec::with_capacity(dh.len());
    for d in dh {
        if d.dim() != h.dim() {
            return Err(ControlError::invalid(format!(
                "derivative direction has dimension {}, Hamiltonian has {}",
                d.dim(),
                h.dim()
            )));
        }
        derivs.push(spectrum.derivative_with_gamma(d.matrix(), &gamma));
    }
    Ok((spectrum.unitary(), derivs))
}

/// Three phase channels sampled on `N` steps of duration `δt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlWaveform {
    dt: f64,
    phases: Vec<StepPhases>,
    #[serde(default)]
    pub label: String,
}

impl ControlWaveform {
    pub fn new(dt: f64, phases: Vec<StepPhases>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ControlError::invalid(format!(
                "step duration must be positive, got {dt}"
            )));
        }
        if phases.is_empty() {
            return Err(ControlError::invalid("waveform needs at least one step"));
        }
        if let Some(k) = phases.iter().position(|p| !p.is_finite()) {
            return Err(ControlError::invalid(format!(
                "phase at step {k} is not finite"
            )));
        }
        Ok(ControlWaveform {
            dt,
            phases,
            label: String::new(),
        })
    }

    /// Builds a waveform from the flat optimization vector
    /// `[φx(0..N), φy(0..N), φμw(0..N)]`.
    pub fn from_vector(dt: f64, v: &[f64]) -> Result<Self> {
        if v.is_empty() || !v.len().is_multiple_of(3) {
            return Err(ControlError::invalid(format!(
                "phase vector length {} is not a positive multiple of 3",
                v.len()
            )));
        }
        let n = v.len() / 3;
        let phases = (0..n)
            .map(|k| StepPhases::new(v[k], v[n + k], v[2 * n + k]))
            .collect();
        Self::new(dt, phases)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let n = self.n_steps();
        let mut v = vec![0.0; 3 * n];
        for (k, p) in self.phases.iter().enumerate() {
            v[k] = p.phi_x;
            v[n + k] = p.phi_y;
            v[2 * n + k] = p.phi_uw;
        }
        v
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.phases.len()
    }

    pub fn n_phases(&self) -> usize {
        3 * self.phases.len()
    }

    pub fn total_time(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    pub fn phases(&self) -> &[StepPhases] {
        &self.phases
    }

    /// Copy with every phase wrapped into `[0, 2π)`.
    pub fn wrapped(&self) -> Self {
        ControlWaveform {
            dt: self.dt,
            phases: self
                .phases
                .iter()
                .map(|p| {
                    StepPhases::new(
                        wrap_phase(p.phi_x),
                        wrap_phase(p.phi_y),
                        wrap_phase(p.phi_uw),
                    )
                })
                .collect(),
            label: self.label.clone(),
        }
    }

    /// `self` followed by `other` (same step duration required).
    pub fn concat(&self, other: &ControlWaveform) -> Result<Self> {
        if self.dt != other.dt {
            return Err(ControlError::invalid(
                "cannot concatenate waveforms with different δt",
            ));
        }
        let mut phases = self.phases.clone();
        phases.extend_from_slice(&other.phases);
        Self::new(self.dt, phases)
    }
}

/// Bias-field offset history `δΩ(t)` over one waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldTrajectory {
    Static { offset: f64 },
    LinearRamp { offset_start: f64, offset_end: f64 },
}

impl Default for FieldTrajectory {
    fn default() -> Self {
        FieldTrajectory::Static { offset: 0.0 }
    }
}

impl FieldTrajectory {
    pub fn nominal() -> Self {
        Self::default()
    }

    pub fn constant(offset: f64) -> Self {
        FieldTrajectory::Static { offset }
    }

    pub fn ramp(offset_start: f64, offset_end: f64) -> Self {
        FieldTrajectory::LinearRamp {
            offset_start,
            offset_end,
        }
    }

    pub fn offset_start(&self) -> f64 {
        match *self {
            FieldTrajectory::Static { offset } => offset,
            FieldTrajectory::LinearRamp { offset_start, .. } => offset_start,
        }
    }

    pub fn offset_end(&self) -> f64 {
        match *self {
            FieldTrajectory::Static { offset } => offset,
            FieldTrajectory::LinearRamp { offset_end, .. } => offset_end,
        }
    }

    /// Offset at the midpoint of step `k` out of `n`.
    pub fn offset_at_step(&self, k: usize, n: usize) -> f64 {
        match *self {
            FieldTrajectory::Static { offset } => offset,
            FieldTrajectory::LinearRamp {
                offset_start,
                offset_end,
            } => offset_start + (offset_end - offset_start) * (k as f64 + 0.5) / n as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offset_start().is_finite() && self.offset_end().is_finite() {
            Ok(())
        } else {
            Err(ControlError::invalid("field offsets must be finite"))
        }
    }
}

/// Step unitaries and their cumulative products for one waveform.
#[derive(Debug, Clone)]
pub struct PropagationRecord {
    pub step_unitaries: Vec<CMatrix>,
    /// `forward_partials[k] = U_k ··· U_0`.
    pub forward_partials: Vec<CMatrix>,
    pub total: CMatrix,
    pub(crate) spectra: Vec<StepSpectrum>,
}

impl PropagationRecord {
    pub fn spectra(&self) -> &[StepSpectrum] {
        &self.spectra
    }
}

/// Propagates waveforms at fixed physical parameters.
#[derive(Debug, Clone)]
pub struct Propagator {
    ops: ControlOperators,
}

impl Propagator {
    pub fn new(params: &PhysicalParams) -> Result<Self> {
        Ok(Propagator {
            ops: ControlOperators::new(params)?,
        })
    }

    pub fn operators(&self) -> &ControlOperators {
        &self.ops
    }

    pub fn dim(&self) -> usize {
        self.ops.dim()
    }

    /// Eigendecompositions of all step Hamiltonians under `field`.
    pub fn spectra(
        &self,
        waveform: &ControlWaveform,
        field: &FieldTrajectory,
    ) -> Result<Vec<StepSpectrum>> {
        field.validate()?;
        let n = waveform.n_steps();
        let d = self.dim();
        let mut h = CMatrix::zeros(d, d);
        waveform
            .phases()
            .iter()
            .enumerate()
            .map(|(k, p)| {
                self.ops
                    .hamiltonian_into(p, field.offset_at_step(k, n), &mut h);
                StepSpectrum::new(&h, waveform.dt())
            })
            .collect()
    }

    pub fn record(
        &self,
        waveform: &ControlWaveform,
        field: &FieldTrajectory,
    ) -> Result<PropagationRecord> {
        let spectra = self.spectra(waveform, field)?;
        let step_unitaries: Vec<CMatrix> = spectra.iter().map(StepSpectrum::unitary).collect();
        let mut forward_partials: Vec<CMatrix> = Vec::with_capacity(step_unitaries.len());
        for u in &step_unitaries {
            let next = match forward_partials.last() {
                Some(prev) => product(u, Op::Plain, prev, Op::Plain),
                None => u.clone(),
            };
            forward_partials.push(next);
        }
        let total = forward_partials
            .last()
            .cloned()
            .expect("waveform has at least one step");
        Ok(PropagationRecord {
            step_unitaries,
            forward_partials,
            total,
            spectra,
        })
    }

    /// Applies `U(T)` to a state vector.
    pub fn apply(
        &self,
        waveform: &ControlWaveform,
        field: &FieldTrajectory,
        psi: &CVector,
    ) -> Result<CVector> {
        let d = self.dim();
        if psi.len() != d {
            return Err(ControlError::invalid(format!(
                "state has dimension {}, expected {d}",
                psi.len()
            )));
        }
        let n = waveform.n_steps();
        let mut h = CMatrix::zeros(d, d);
        let mut out = psi.clone();
        for (k, p) in waveform.phases().iter().enumerate() {
            self.ops
                .hamiltonian_into(p, field.offset_at_step(k, n), &mut h);
            out = StepSpectrum::new(&h, waveform.dt())?.apply(&out);
        }
        Ok(out)
    }

    /// Total propagator `U(T)` only.
    pub fn total(&self, waveform: &ControlWaveform, field: &FieldTrajectory) -> Result<CMatrix> {
        let d = self.dim();
        let n = waveform.n_steps();
        let mut h = CMatrix::zeros(d, d);
        let mut total = CMatrix::identity(d, d);
        for (k, p) in waveform.phases().iter().enumerate() {
            self.ops
                .hamiltonian_into(p, field.offset_at_step(k, n), &mut h);
            let u = StepSpectrum::new(&h, waveform.dt())?.unitary();
            total = product(&u, Op::Plain, &total, Op::Plain);
        }
        Ok(total)
    }
}

/// Propagates `waveform` under `params` with field history `field`.
pub fn propagate(
    waveform: &ControlWaveform,
    params: &PhysicalParams,
    field: &FieldTrajectory,
) -> Result<PropagationRecord> {
    Propagator::new(params)?.record(waveform, field)
}
