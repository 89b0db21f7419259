//! Fidelity functionals, their exact phase gradients, and ensemble averages.
//!
//! Every target kind reduces to an overlap operator `Q` and a normalization
//! `p` such that `F = |Tr(Q U)|² / p²`:
//!
//! * full unitary `W`: `Q = W†`, `p = d`;
//! * subspace map `W_if` between isometries `V_i`, `V_f`: `Q = V_i W† V_f†`;
//! * state map `|ψ_i⟩ → |ψ_f⟩`: `Q = |ψ_i⟩⟨ψ_f|`, `p = 1`.
//!
//! Gradients use cached forward products and a backward sweep. With
//! `M_k = (U_{k−1}···U_0) Q (U_{N−1}···U_{k+1})` the derivative of the overlap
//! is `Tr(M_k ∂U_k)`, which in the eigenbasis of step `k` becomes
//! `Tr(Z_k ∂H/∂φ)` with `Z_k = V ((V† M_k V) ∘ Γ) V†`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, Result};
use crate::linalg::{gemm, trace_of_product, unitarity_defect, CMatrix, CVector, NeumaierSum, Op};
use crate::propagation::{ControlWaveform, FieldTrajectory, Propagator};
use crate::spin_model::PhysicalParams;

const UNITARY_TOLERANCE: f64 = 1e-12;

/// A subspace of the full space: either spanned by basis states or by the
/// orthonormal columns of an isometry.
#[derive(Debug, Clone, PartialEq)]
pub enum Subspace {
    Basis(Vec<usize>),
    Span(CMatrix),
}

impl Subspace {
    pub fn dim(&self) -> usize {
        match self {
            Subspace::Basis(idx) => idx.len(),
            Subspace::Span(v) => v.ncols(),
        }
    }

    /// `d × p` isometry whose columns span the subspace.
    pub fn isometry(&self, d: usize) -> CMatrix {
        match self {
            Subspace::Basis(idx) => {
                let mut v = CMatrix::zeros(d, idx.len());
                for (j, &i) in idx.iter().enumerate() {
                    v[(i, j)] = Complex64::new(1.0, 0.0);
                }
                v
            }
            Subspace::Span(v) => v.clone(),
        }
    }

    fn validate(&self, d: usize, name: &str) -> Result<()> {
        match self {
            Subspace::Basis(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
                    return Err(ControlError::invalid(format!(
                        "{name} index {bad} out of range for dimension {d}"
                    )));
                }
                let mut sorted = idx.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != idx.len() {
                    return Err(ControlError::invalid(format!("{name} indices repeat")));
                }
            }
            Subspace::Span(v) => {
                if v.nrows() != d {
                    return Err(ControlError::invalid(format!(
                        "{name} isometry has {} rows, expected {d}",
                        v.nrows()
                    )));
                }
                let g = v.ad_mul(v);
                let defect =
                    crate::linalg::max_abs_diff(&g, &CMatrix::identity(v.ncols(), v.ncols()));
                if defect > 1e-10 {
                    return Err(ControlError::invalid(format!(
                        "{name} columns are not orthonormal (defect {defect:.2e})"
                    )));
                }
            }
        }
        if self.dim() == 0 {
            return Err(ControlError::invalid(format!("{name} subspace is empty")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    FullUnitary,
    SubspaceMap,
    StateMap,
}

impl TargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::FullUnitary => "full_unitary",
            TargetKind::SubspaceMap => "subspace_map",
            TargetKind::StateMap => "state_map",
        }
    }
}

/// The transformation a waveform should implement.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetMap {
    FullUnitary(CMatrix),
    SubspaceMap {
        /// `p × p` unitary expressed in the bases of `input` and `output`.
        w: CMatrix,
        input: Subspace,
        output: Subspace,
        dim: usize,
    },
    StateMap {
        initial: CVector,
        target: CVector,
    },
}

impl TargetMap {
    pub fn full(w: CMatrix) -> Result<Self> {
        let t = TargetMap::FullUnitary(w);
        t.validate()?;
        Ok(t)
    }

    pub fn subspace(dim: usize, w: CMatrix, input: Subspace, output: Subspace) -> Result<Self> {
        let t = TargetMap::SubspaceMap {
            w,
            input,
            output,
            dim,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn state(initial: CVector, target: CVector) -> Result<Self> {
        let t = TargetMap::StateMap { initial, target };
        t.validate()?;
        Ok(t)
    }

    pub fn kind(&self) -> TargetKind {
        match self {
            TargetMap::FullUnitary(_) => TargetKind::FullUnitary,
            TargetMap::SubspaceMap { .. } => TargetKind::SubspaceMap,
            TargetMap::StateMap { .. } => TargetKind::StateMap,
        }
    }

    /// Hilbert-space dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            TargetMap::FullUnitary(w) => w.nrows(),
            TargetMap::SubspaceMap { dim, .. } => *dim,
            TargetMap::StateMap { initial, .. } => initial.len(),
        }
    }

    /// Constrained dimension `p`.
    pub fn p(&self) -> usize {
        match self {
            TargetMap::FullUnitary(w) => w.nrows(),
            TargetMap::SubspaceMap { w, .. } => w.nrows(),
            TargetMap::StateMap { .. } => 1,
        }
    }

    /// Minimum number of independent phases able to fix the constrained part of `U`.
    pub fn required_phases(&self) -> usize {
        let (d, p) = (self.dim(), self.p());
        match self.kind() {
            TargetKind::FullUnitary => d * d - 1,
            TargetKind::SubspaceMap => p * p - 1,
            TargetKind::StateMap => 2 * d - 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TargetMap::FullUnitary(w) => {
                if !w.is_square() || w.nrows() == 0 {
                    return Err(ControlError::invalid(
                        "target unitary must be square and nonempty",
                    ));
                }
                let defect = unitarity_defect(w);
                if defect > UNITARY_TOLERANCE {
                    return Err(ControlError::invalid(format!(
                        "target is not unitary (defect {defect:.2e})"
                    )));
                }
            }
            TargetMap::SubspaceMap {
                w,
                input,
                output,
                dim,
            } => {
                input.validate(*dim, "input")?;
                output.validate(*dim, "output")?;
                let p = w.nrows();
                if !w.is_square() || input.dim() != p || output.dim() != p {
                    return Err(ControlError::invalid(format!(
                        "subspace target needs a p×p unitary and two p-dimensional subspaces \
                         (got {}x{}, {}, {})",
                        w.nrows(),
                        w.ncols(),
                        input.dim(),
                        output.dim()
                    )));
                }
                let defect = unitarity_defect(w);
                if defect > UNITARY_TOLERANCE {
                    return Err(ControlError::invalid(format!(
                        "subspace map is not unitary (defect {defect:.2e})"
                    )));
                }
            }
            TargetMap::StateMap { initial, target } => {
                if initial.len() != target.len() || initial.is_empty() {
                    return Err(ControlError::invalid(
                        "state map vectors must share a nonzero dimension",
                    ));
                }
                for (name, v) in [("initial", initial), ("target", target)] {
                    let n = v.norm();
                    if (n - 1.0).abs() > UNITARY_TOLERANCE {
                        return Err(ControlError::invalid(format!(
                            "{name} state is not normalized (norm {n})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Overlap operator `Q` with `F = |Tr(Q U)|² / p²`.
    pub fn overlap_operator(&self) -> CMatrix {
        match self {
            TargetMap::FullUnitary(w) => w.adjoint(),
            TargetMap::SubspaceMap {
                w,
                input,
                output,
                dim,
            } => {
                let vi = input.isometry(*dim);
                let vf = output.isometry(*dim);
                vi * w.adjoint() * vf.adjoint()
            }
            TargetMap::StateMap { initial, target } => initial * target.adjoint(),
        }
    }

    /// The ideal operator `W_if = V_f W V_i†` (zero outside the input subspace).
    pub fn ideal_operator(&self) -> CMatrix {
        self.overlap_operator().adjoint()
    }

    /// Whether `psi` lies in the input subspace (to `tol` in norm).
    pub fn accepts(&self, psi: &CVector, tol: f64) -> bool {
        match self {
            TargetMap::FullUnitary(_) => true,
            _ => {
                let w = self.ideal_operator();
                ((&w * psi).norm() - psi.norm()).abs() < tol
            }
        }
    }

    /// Applies the ideal map to a state in its input subspace.
    pub fn apply_ideal(&self, psi: &CVector) -> CVector {
        self.ideal_operator() * psi
    }

    /// A random state inside the input subspace.
    pub fn sample_input_state<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> CVector {
        let d = self.dim();
        match self {
            TargetMap::FullUnitary(_) => crate::targets::sample_random_state(d, rng),
            TargetMap::SubspaceMap { input, .. } => {
                let v = input.isometry(d);
                let coeffs = crate::targets::sample_random_state(v.ncols(), rng);
                v * coeffs
            }
            TargetMap::StateMap { initial, .. } => initial.clone(),
        }
    }
}

/// `|Tr(W†U)|² / d²`.
pub fn fidelity_full(w: &CMatrix, u: &CMatrix) -> Result<f64> {
    if w.shape() != u.shape() || !w.is_square() {
        return Err(ControlError::invalid(format!(
            "dimension mismatch: target {:?}, propagator {:?}",
            w.shape(),
            u.shape()
        )));
    }
    let d = w.nrows() as f64;
    let tr = trace_of_product(&w.adjoint(), u);
    Ok(clamp_fidelity(tr.norm_sqr() / (d * d)))
}

/// `|Tr(W_if† P_f U P_i)|² / p²` for subspace and state targets.
pub fn fidelity_subspace(target: &TargetMap, u: &CMatrix) -> Result<f64> {
    if target.kind() == TargetKind::FullUnitary {
        return Err(ControlError::invalid(
            "fidelity_subspace needs a subspace or state target",
        ));
    }
    target.validate()?;
    fidelity(target, u)
}

/// Fidelity for any target kind.
pub fn fidelity(target: &TargetMap, u: &CMatrix) -> Result<f64> {
    let d = target.dim();
    if u.nrows() != d || u.ncols() != d {
        return Err(ControlError::invalid(format!(
            "dimension mismatch: target {d}, propagator {:?}",
            u.shape()
        )));
    }
    let p = target.p() as f64;
    let tr = trace_of_product(&target.overlap_operator(), u);
    Ok(clamp_fidelity(tr.norm_sqr() / (p * p)))
}

/// Phase-sensitive Hilbert–Schmidt distance `‖W − U‖_F`, diagnostic only.
pub fn hilbert_schmidt_distance(w: &CMatrix, u: &CMatrix) -> f64 {
    (w - u).norm()
}

fn clamp_fidelity(f: f64) -> f64 {
    f.clamp(0.0, 1.0)
}

/// One weighted field history in a robustness ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMember {
    pub weight: f64,
    pub trajectory: FieldTrajectory,
}

/// Discrete distribution `P(Λ)` over field histories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationEnsemble {
    members: Vec<EnsembleMember>,
}

impl Default for PerturbationEnsemble {
    fn default() -> Self {
        Self::nominal()
    }
}

impl PerturbationEnsemble {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let e = PerturbationEnsemble { members };
        e.validate()?;
        Ok(e)
    }

    /// Single member at zero offset.
    pub fn nominal() -> Self {
        PerturbationEnsemble {
            members: vec![EnsembleMember {
                weight: 1.0,
                trajectory: FieldTrajectory::nominal(),
            }],
        }
    }

    /// Static offsets `±r`, equal weights.
    pub fn two_point(radius: f64) -> Self {
        let m = |o| EnsembleMember {
            weight: 0.5,
            trajectory: FieldTrajectory::constant(o),
        };
        PerturbationEnsemble {
            members: vec![m(radius), m(-radius)],
        }
    }

    /// Static offsets `±r` plus the ramps `−r → +r` and `+r → −r`, weights 1/4.
    pub fn four_point(radius: f64) -> Self {
        let m = |trajectory| EnsembleMember {
            weight: 0.25,
            trajectory,
        };
        PerturbationEnsemble {
            members: vec![
                m(FieldTrajectory::constant(radius)),
                m(FieldTrajectory::constant(-radius)),
                m(FieldTrajectory::ramp(-radius, radius)),
                m(FieldTrajectory::ramp(radius, -radius)),
            ],
        }
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(ControlError::invalid(
                "ensemble must have at least one member",
            ));
        }
        for m in &self.members {
            if !(m.weight > 0.0 && m.weight.is_finite()) {
                return Err(ControlError::invalid(format!(
                    "ensemble weights must be positive, got {}",
                    m.weight
                )));
            }
            m.trajectory.validate()?;
        }
        let total = self
            .members
            .iter()
            .map(|m| m.weight)
            .collect::<NeumaierSum>()
            .value();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ControlError::invalid(format!(
                "ensemble weights must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Draws a member index according to the weights.
    pub fn sample_index<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, m) in self.members.iter().enumerate() {
            acc += m.weight;
            if u < acc {
                return i;
            }
        }
        self.members.len() - 1
    }
}

/// Fidelity and its gradient with respect to all `3N` phases
/// (all `φx`, then all `φy`, then all `φμw`, each in time order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub fidelity: f64,
    pub gradient: Vec<f64>,
}

/// Robust fidelity objective bound to a target, parameter set and ensemble.
#[derive(Debug, Clone)]
pub struct Objective {
    propagator: Propagator,
    overlap: CMatrix,
    p: f64,
    ensemble: PerturbationEnsemble,
}

impl Objective {
    pub fn new(
        target: &TargetMap,
        params: &PhysicalParams,
        ensemble: &PerturbationEnsemble,
    ) -> Result<Self> {
        target.validate()?;
        ensemble.validate()?;
        if target.dim() != params.dim() {
            return Err(ControlError::invalid(format!(
                "target dimension {} does not match manifold dimension {}",
                target.dim(),
                params.dim()
            )));
        }
        Ok(Objective {
            propagator: Propagator::new(params)?,
            overlap: target.overlap_operator(),
            p: target.p() as f64,
            ensemble: ensemble.clone(),
        })
    }

    pub fn ensemble(&self) -> &PerturbationEnsemble {
        &self.ensemble
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    /// Fidelity under a single field history.
    pub fn fidelity_at(&self, waveform: &ControlWaveform, field: &FieldTrajectory) -> Result<f64> {
        let u = self.propagator.total(waveform, field)?;
        let tr = trace_of_product(&self.overlap, &u);
        Ok(clamp_fidelity(tr.norm_sqr() / (self.p * self.p)))
    }

    /// Ensemble-averaged fidelity without gradient.
    pub fn fidelity(&self, waveform: &ControlWaveform) -> Result<f64> {
        let values: Vec<Result<f64>> = self
            .ensemble
            .members
            .par_iter()
            .map(|m| {
                self.fidelity_at(waveform, &m.trajectory)
                    .map(|f| m.weight * f)
            })
            .collect();
        let mut sum = NeumaierSum::default();
        for v in values {
            sum.add(v?);
        }
        Ok(clamp_fidelity(sum.value()))
    }

    /// Fidelity and gradient under a single field history.
    pub fn evaluate_at(
        &self,
        waveform: &ControlWaveform,
        field: &FieldTrajectory,
    ) -> Result<ObjectiveValue> {
        let n = waveform.n_steps();
        let d = self.propagator.dim();
        let spectra = self.propagator.spectra(waveform, field)?;
        let steps: Vec<CMatrix> = spectra.iter().map(|s| s.unitary()).collect();

        // before[k] = U_{k-1} ··· U_0
        let mut before = Vec::with_capacity(n);
        let mut acc = CMatrix::identity(d, d);
        let mut scratch = CMatrix::zeros(d, d);
        for u in &steps {
            before.push(acc.clone());
            gemm(u, Op::Plain, &acc, Op::Plain, &mut scratch);
            std::mem::swap(&mut acc, &mut scratch);
        }
        let overlap = trace_of_product(&self.overlap, &acc);
        let scale = 2.0 / (self.p * self.p);

        let mut gradient = vec![0.0; 3 * n];
        let channels = self.propagator.operators().channels();
        // r = Q · U_{N-1} ··· U_{k+1}
        let mut r = self.overlap.clone();
        let (mut m, mut rotated) = (CMatrix::zeros(d, d), CMatrix::zeros(d, d));
        for k in (0..n).rev() {
            let spectrum = &spectra[k];
            let v = spectrum.eigenvectors();
            gemm(&before[k], Op::Plain, &r, Op::Plain, &mut m);
            gemm(v, Op::Adjoint, &m, Op::Plain, &mut scratch);
            gemm(&scratch, Op::Plain, v, Op::Plain, &mut rotated);
            rotated.component_mul_assign(&spectrum.gamma());
            gemm(v, Op::Plain, &rotated, Op::Plain, &mut scratch);
            let z = &mut m;
            gemm(&scratch, Op::Plain, v, Op::Adjoint, z);
            let phases = waveform.phases()[k].as_array();
            for (j, ch) in channels.iter().enumerate() {
                let dg = ch.derivative_trace(z, phases[j]);
                gradient[j * n + k] = scale * (overlap.conj() * dg).re;
            }
            gemm(&r, Op::Plain, &steps[k], Op::Plain, &mut scratch);
            std::mem::swap(&mut r, &mut scratch);
        }
        Ok(ObjectiveValue {
            fidelity: clamp_fidelity(overlap.norm_sqr() / (self.p * self.p)),
            gradient,
        })
    }

    /// Ensemble-averaged fidelity and gradient.
    pub fn evaluate(&self, waveform: &ControlWaveform) -> Result<ObjectiveValue> {
        let members: Vec<Result<ObjectiveValue>> = self
            .ensemble
            .members
            .par_iter()
            .map(|m| self.evaluate_at(waveform, &m.trajectory))
            .collect();
        let n = waveform.n_phases();
        let mut fid = NeumaierSum::default();
        let mut grad = vec![NeumaierSum::default(); n];
        for (m, value) in self.ensemble.members.iter().zip(members) {
            let value = value?;
            fid.add(m.weight * value.fidelity);
            for (g, x) in grad.iter_mut().zip(&value.gradient) {
                g.add(m.weight * x);
            }
        }
        Ok(ObjectiveValue {
            fidelity: clamp_fidelity(fid.value()),
            gradient: grad.iter().map(NeumaierSum::value).collect(),
        })
    }
}

/// Ensemble-averaged fidelity of `waveform` for `target` and its phase gradient.
pub fn objective_with_gradient(
    waveform: &ControlWaveform,
    target: &TargetMap,
    params: &PhysicalParams,
    ensemble: &PerturbationEnsemble,
) -> Result<ObjectiveValue> {
    Objective::new(target, params, ensemble)?.evaluate(waveform)
}
