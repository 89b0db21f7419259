//! Hyperfine basis, spin matrices and the rotating-frame control Hamiltonian.
//!
//! The ground manifold of an alkali atom with nuclear spin `I` splits into
//! `F⁺ = I + 1/2` and `F⁻ = I − 1/2`. Basis order is the `F⁺` block with
//! descending `m`, followed by the `F⁻` block with descending `m`, so index 0
//! is `|F⁺, F⁺⟩` and index `2F⁺ + 1` is `|F⁻, F⁻⟩`.
//!
//! All rates are angular frequencies (rad/s) and `ħ = 1`. With `a_j = Ω_j / 2`
//! the step Hamiltonian is
//!
//! ```text
//! H = a_x [cos φx F⁺x + sin φx F⁺y] + a_y [cos φy F⁺y − sin φy F⁺x] − Δrf F⁺z
//!   − a_x [cos φx F⁻x − sin φx F⁻y] − a_y [cos φy F⁻y + sin φy F⁻x] + Δrf F⁻z
//!   + a_μw [cos φμw σx + sin φμw σy] − Δμw σz / 2
//!   + δΩ (F⁺z ⊕ −F⁻z)
//! ```
//!
//! The `F⁻` manifold has `g_F ≈ −g_F⁺`, so its rotating frame turns the other
//! way: the rf phases enter conjugated and the drive and detuning terms change
//! sign. The two rf quadratures therefore steer the two hyperfine spins
//! independently. `σ` acts on the stretched pair `{|F⁺,F⁺⟩, |F⁻,F⁻⟩}` with
//! `σz = |F⁺,F⁺⟩⟨F⁺,F⁺| − |F⁻,F⁻⟩⟨F⁻,F⁻|`. The drift `H₀` vanishes at zero
//! detuning.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, Result};
use crate::linalg::{c, hermiticity_defect, max_norm, CMatrix};

/// `2π · f`.
pub fn angular(hz: f64) -> f64 {
    TAU * hz
}

/// Label of a hyperfine basis state, stored as doubled quantum numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisLabel {
    pub f_doubled: i32,
    pub m_doubled: i32,
}

impl BasisLabel {
    pub fn f(&self) -> f64 {
        self.f_doubled as f64 / 2.0
    }

    pub fn m(&self) -> f64 {
        self.m_doubled as f64 / 2.0
    }
}

impl std::fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let half = |n: i32| {
            if n % 2 == 0 {
                format!("{}", n / 2)
            } else {
                format!("{}/2", n)
            }
        };
        write!(f, "|{}, {}>", half(self.f_doubled), half(self.m_doubled))
    }
}

/// The two hyperfine manifolds of a spin-1/2 electron coupled to nuclear spin `I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldStructure {
    /// `2I`; cesium-133 has `2I = 7`.
    pub nuclear_spin_doubled: u32,
}

impl ManifoldStructure {
    pub fn new(nuclear_spin_doubled: u32) -> Result<Self> {
        if nuclear_spin_doubled == 0 {
            return Err(ControlError::invalid(
                "nuclear spin must be at least 1/2 for two hyperfine manifolds",
            ));
        }
        Ok(ManifoldStructure {
            nuclear_spin_doubled,
        })
    }

    /// Cesium-133, `I = 7/2`, `d = 16`.
    pub fn cesium() -> Self {
        ManifoldStructure {
            nuclear_spin_doubled: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.nuclear_spin_doubled).map(|_| ())
    }

    pub fn f_plus_doubled(&self) -> u32 {
        self.nuclear_spin_doubled + 1
    }

    pub fn f_minus_doubled(&self) -> u32 {
        self.nuclear_spin_doubled - 1
    }

    pub fn f_plus(&self) -> f64 {
        self.f_plus_doubled() as f64 / 2.0
    }

    pub fn f_minus(&self) -> f64 {
        self.f_minus_doubled() as f64 / 2.0
    }

    /// Dimension of the `F⁺` block, `2F⁺ + 1`.
    pub fn upper_dim(&self) -> usize {
        self.f_plus_doubled() as usize + 1
    }

    /// Dimension of the `F⁻` block, `2F⁻ + 1`.
    pub fn lower_dim(&self) -> usize {
        self.f_minus_doubled() as usize + 1
    }

    /// `d = 4I + 2`.
    pub fn dim(&self) -> usize {
        self.upper_dim() + self.lower_dim()
    }

    /// Index of `|F⁺, m = F⁺⟩`, the fiducial state.
    pub fn upper_stretched(&self) -> usize {
        0
    }

    /// Index of `|F⁻, m = F⁻⟩`.
    pub fn lower_stretched(&self) -> usize {
        self.upper_dim()
    }

    /// Indices of the `F⁺` block.
    pub fn upper_indices(&self) -> Vec<usize> {
        (0..self.upper_dim()).collect()
    }

    pub fn basis(&self) -> Vec<BasisLabel> {
        let block = |f2: u32| {
            let f2 = f2 as i32;
            (0..=f2).map(move |k| BasisLabel {
                f_doubled: f2,
                m_doubled: f2 - 2 * k,
            })
        };
        block(self.f_plus_doubled())
            .chain(block(self.f_minus_doubled()))
            .collect()
    }
}

impl Default for ManifoldStructure {
    fn default() -> Self {
        Self::cesium()
    }
}

/// Rotating-frame rates defining the control Hamiltonian. All in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// Larmor frequency `Ω₀` in the bias field. Sets the scale only; it does
    /// not enter the rotating-frame matrix.
    pub larmor: f64,
    pub rf_rabi_x: f64,
    pub rf_rabi_y: f64,
    pub uw_rabi: f64,
    pub rf_detuning: f64,
    pub uw_detuning: f64,
    pub manifold: ManifoldStructure,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            larmor: angular(1.0e6),
            rf_rabi_x: angular(25.0e3),
            rf_rabi_y: angular(25.0e3),
            uw_rabi: angular(27.5e3),
            rf_detuning: 0.0,
            uw_detuning: 0.0,
            manifold: ManifoldStructure::cesium(),
        }
    }
}

impl PhysicalParams {
    /// Nominal rates on a different manifold.
    pub fn with_manifold(manifold: ManifoldStructure) -> Self {
        PhysicalParams {
            manifold,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.manifold.validate()?;
        let rates = [
            ("larmor", self.larmor),
            ("rf_rabi_x", self.rf_rabi_x),
            ("rf_rabi_y", self.rf_rabi_y),
            ("uw_rabi", self.uw_rabi),
            ("rf_detuning", self.rf_detuning),
            ("uw_detuning", self.uw_detuning),
        ];
        for (name, v) in rates {
            if !v.is_finite() {
                return Err(ControlError::invalid(format!("{name} must be finite")));
            }
        }
        for (name, v) in &rates[1..4] {
            if *v < 0.0 {
                return Err(ControlError::invalid(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Copy with the three drive amplitudes multiplied by `1 + error`.
    pub fn with_rabi_errors(&self, errors: [f64; 3]) -> Self {
        PhysicalParams {
            rf_rabi_x: self.rf_rabi_x * (1.0 + errors[0]),
            rf_rabi_y: self.rf_rabi_y * (1.0 + errors[1]),
            uw_rabi: self.uw_rabi * (1.0 + errors[2]),
            ..*self
        }
    }
}

/// Control phases of a single piecewise-constant step, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepPhases {
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_uw: f64,
}

impl StepPhases {
    pub fn new(phi_x: f64, phi_y: f64, phi_uw: f64) -> Self {
        StepPhases {
            phi_x,
            phi_y,
            phi_uw,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.phi_x, self.phi_y, self.phi_uw]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        StepPhases::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|p| p.is_finite())
    }
}

/// A complex matrix checked to be Hermitian.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(ControlError::invalid(format!(
                "Hermitian matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = max_norm(&m);
        let defect = hermiticity_defect(&m);
        if defect > Self::TOLERANCE * scale.max(f64::MIN_POSITIVE) && defect > 0.0 {
            return Err(ControlError::invalid(format!(
                "matrix is not Hermitian (defect {defect:.3e}, scale {scale:.3e})"
            )));
        }
        Ok(HermitianMatrix(m))
    }

    pub(crate) fn new_unchecked(m: CMatrix) -> Self {
        HermitianMatrix(m)
    }

    pub fn zeros(dim: usize) -> Self {
        HermitianMatrix(CMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    /// Real trace.
    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }
}

impl AsRef<CMatrix> for HermitianMatrix {
    fn as_ref(&self) -> &CMatrix {
        &self.0
    }
}

/// Spin matrices `(F_x, F_y, F_z)` in the descending-`m` basis.
#[derive(Debug, Clone)]
pub struct SpinOperators {
    pub x: HermitianMatrix,
    pub y: HermitianMatrix,
    pub z: HermitianMatrix,
}

/// Spin-`f` matrices with `ħ = 1`. Basis order is `m = f, f − 1, …, −f`;
/// the raising operator has `⟨m+1|F₊|m⟩ = √(f(f+1) − m(m+1))`.
pub fn angular_momentum_ops(f: f64) -> Result<SpinOperators> {
    let f2 = 2.0 * f;
    if !f.is_finite() || f < 0.0 || (f2 - f2.round()).abs() > 1e-12 {
        return Err(ControlError::invalid(format!(
            "spin quantum number must be a non-negative half-integer, got {f}"
        )));
    }
    let n = f2.round() as usize + 1;
    let m_of = |k: usize| f - k as f64;
    let mut x = CMatrix::zeros(n, n);
    let mut y = CMatrix::zeros(n, n);
    let mut z = CMatrix::zeros(n, n);
    for k in 0..n {
        z[(k, k)] = c(m_of(k), 0.0);
    }
    // ⟨k−1| F₊ |k⟩ (index k−1 carries m + 1)
    for k in 1..n {
        let m = m_of(k);
        let amp = (f * (f + 1.0) - m * (m + 1.0)).sqrt();
        x[(k - 1, k)] = c(amp / 2.0, 0.0);
        x[(k, k - 1)] = c(amp / 2.0, 0.0);
        y[(k - 1, k)] = c(0.0, -amp / 2.0);
        y[(k, k - 1)] = c(0.0, amp / 2.0);
    }
    Ok(SpinOperators {
        x: HermitianMatrix::new_unchecked(x),
        y: HermitianMatrix::new_unchecked(y),
        z: HermitianMatrix::new_unchecked(z),
    })
}

/// Sparse operator as a list of `(row, col, value)` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseOp {
    entries: Vec<(usize, usize, Complex64)>,
}

impl SparseOp {
    fn from_block(m: &CMatrix, offset: usize, scale: f64) -> Self {
        let mut op = SparseOp::default();
        op.add_block(m, offset, scale);
        op
    }

    fn add_block(&mut self, m: &CMatrix, offset: usize, scale: f64) {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != Complex64::new(0.0, 0.0) {
                    self.push(i + offset, j + offset, v * scale);
                }
            }
        }
    }

    fn push(&mut self, r: usize, col: usize, v: Complex64) {
        if let Some(e) = self
            .entries
            .iter_mut()
            .find(|(rr, cc, _)| *rr == r && *cc == col)
        {
            e.2 += v;
        } else {
            self.entries.push((r, col, v));
        }
    }

    fn combine(&self, other: &SparseOp, a: f64, b: f64) -> SparseOp {
        let mut out = SparseOp::default();
        for &(r, col, v) in &self.entries {
            out.push(r, col, v * a);
        }
        for &(r, col, v) in &other.entries {
            out.push(r, col, v * b);
        }
        out.entries.retain(|e| e.2 != Complex64::new(0.0, 0.0));
        out
    }

    /// `m += s · A`.
    pub fn add_scaled_to(&self, m: &mut CMatrix, s: f64) {
        for &(r, col, v) in &self.entries {
            m[(r, col)] += v * s;
        }
    }

    /// `Tr(Z · A)`.
    pub fn trace_with(&self, z: &CMatrix) -> Complex64 {
        self.entries
            .iter()
            .map(|&(r, col, v)| z[(col, r)] * v)
            .sum()
    }

    pub fn to_dense(&self, dim: usize) -> CMatrix {
        let mut m = CMatrix::zeros(dim, dim);
        self.add_scaled_to(&mut m, 1.0);
        m
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// One phase-modulated drive: contributes `cos φ · C + sin φ · S`.
#[derive(Debug, Clone)]
pub struct ControlChannel {
    pub cos_op: SparseOp,
    pub sin_op: SparseOp,
}

impl ControlChannel {
    pub fn add_to(&self, m: &mut CMatrix, phi: f64) {
        let (s, co) = phi.sin_cos();
        self.cos_op.add_scaled_to(m, co);
        self.sin_op.add_scaled_to(m, s);
    }

    /// `∂H/∂φ = −sin φ · C + cos φ · S`.
    pub fn derivative(&self, dim: usize, phi: f64) -> CMatrix {
        let (s, co) = phi.sin_cos();
        let mut m = CMatrix::zeros(dim, dim);
        self.cos_op.add_scaled_to(&mut m, -s);
        self.sin_op.add_scaled_to(&mut m, co);
        m
    }

    /// `Tr(Z · ∂H/∂φ)`.
    pub fn derivative_trace(&self, z: &CMatrix, phi: f64) -> Complex64 {
        let (s, co) = phi.sin_cos();
        self.cos_op.trace_with(z) * (-s) + self.sin_op.trace_with(z) * co
    }
}

/// Precomputed operator set for fast Hamiltonian assembly at fixed parameters.
#[derive(Debug, Clone)]
pub struct ControlOperators {
    dim: usize,
    /// Channels in gradient order: rf x, rf y, microwave.
    channels: [ControlChannel; 3],
    drift: SparseOp,
    field: SparseOp,
}

impl ControlOperators {
    pub fn new(params: &PhysicalParams) -> Result<Self> {
        params.validate()?;
        let mf = &params.manifold;
        let d = mf.dim();
        let up = angular_momentum_ops(mf.f_plus())?;
        let lo = angular_momentum_ops(mf.f_minus())?;
        let off = mf.upper_dim();
        let embed = |m: &HermitianMatrix, lower: bool, s: f64| {
            SparseOp::from_block(m.matrix(), if lower { off } else { 0 }, s)
        };
        let (xp, yp, zp) = (
            embed(&up.x, false, 1.0),
            embed(&up.y, false, 1.0),
            embed(&up.z, false, 1.0),
        );
        let (xm, ym, zm) = (
            embed(&lo.x, true, 1.0),
            embed(&lo.y, true, 1.0),
            embed(&lo.z, true, 1.0),
        );
        let (a, b) = (mf.upper_stretched(), mf.lower_stretched());
        let mut sx = SparseOp::default();
        sx.push(a, b, c(1.0, 0.0));
        sx.push(b, a, c(1.0, 0.0));
        let mut sy = SparseOp::default();
        sy.push(a, b, c(0.0, -1.0));
        sy.push(b, a, c(0.0, 1.0));
        let mut sz = SparseOp::default();
        sz.push(a, a, c(1.0, 0.0));
        sz.push(b, b, c(-1.0, 0.0));

        let ax = params.rf_rabi_x / 2.0;
        let ay = params.rf_rabi_y / 2.0;
        let au = params.uw_rabi / 2.0;
        let rf_x = ControlChannel {
            cos_op: xp.combine(&xm, ax, -ax),
            sin_op: yp.combine(&ym, ax, ax),
        };
        let rf_y = ControlChannel {
            cos_op: yp.combine(&ym, ay, -ay),
            sin_op: xp.combine(&xm, -ay, -ay),
        };
        let uw = ControlChannel {
            cos_op: sx.combine(&SparseOp::default(), au, 0.0),
            sin_op: sy.combine(&SparseOp::default(), au, 0.0),
        };
        let field = zp.combine(&zm, 1.0, -1.0);
        let drift = field.combine(&sz, -params.rf_detuning, -params.uw_detuning / 2.0);
        Ok(ControlOperators {
            dim: d,
            channels: [rf_x, rf_y, uw],
            drift,
            field,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> &[ControlChannel; 3] {
        &self.channels
    }

    /// Writes the step Hamiltonian into `out` (overwritten).
    pub fn hamiltonian_into(&self, phases: &StepPhases, field_offset: f64, out: &mut CMatrix) {
        out.fill(Complex64::new(0.0, 0.0));
        self.drift.add_scaled_to(out, 1.0);
        if field_offset != 0.0 {
            self.field.add_scaled_to(out, field_offset);
        }
        for (ch, phi) in self.channels.iter().zip(phases.as_array()) {
            ch.add_to(out, phi);
        }
    }

    pub fn hamiltonian(&self, phases: &StepPhases, field_offset: f64) -> HermitianMatrix {
        let mut h = CMatrix::zeros(self.dim, self.dim);
        self.hamiltonian_into(phases, field_offset, &mut h);
        HermitianMatrix::new_unchecked(h)
    }

    /// `[∂H/∂φx, ∂H/∂φy, ∂H/∂φμw]` at the given phases.
    pub fn phase_derivatives(&self, phases: &StepPhases) -> [HermitianMatrix; 3] {
        let p = phases.as_array();
        std::array::from_fn(|j| {
            HermitianMatrix::new_unchecked(self.channels[j].derivative(self.dim, p[j]))
        })
    }

    pub fn field_generator(&self) -> HermitianMatrix {
        HermitianMatrix::new_unchecked(self.field.to_dense(self.dim))
    }
}

/// Rotating-frame Hamiltonian of one step with the given field offset `δΩ`.
pub fn build_step_hamiltonian(
    params: &PhysicalParams,
    phases: &StepPhases,
    field_offset: f64,
) -> Result<HermitianMatrix> {
    if !phases.is_finite() || !field_offset.is_finite() {
        return Err(ControlError::invalid(
            "phases and field offset must be finite",
        ));
    }
    Ok(ControlOperators::new(params)?.hamiltonian(phases, field_offset))
}

/// Linear-Zeeman response `G = F⁺z ⊕ (−F⁻z)`, the operator multiplied by `δΩ(t)`.
pub fn perturbation_generator(manifold: &ManifoldStructure) -> Result<HermitianMatrix> {
    manifold.validate()?;
    let d = manifold.dim();
    let mut g = CMatrix::zeros(d, d);
    for (k, label) in manifold.basis().iter().enumerate() {
        let sign = if k < manifold.upper_dim() { 1.0 } else { -1.0 };
        g[(k, k)] = c(sign * label.m(), 0.0);
    }
    Ok(HermitianMatrix::new_unchecked(g))
}
