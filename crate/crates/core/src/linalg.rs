//! Dense complex matrix helpers shared by the propagation and objective code.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Largest entry modulus.
pub fn max_norm(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// `‖A − B‖_max`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).norm()))
}

/// `‖U†U − 1‖_max`.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    let n = u.ncols();
    let g = u.ad_mul(u);
    max_abs_diff(&g, &CMatrix::identity(n, n))
}

/// `‖H − H†‖_max`.
pub fn hermiticity_defect(h: &CMatrix) -> f64 {
    max_abs_diff(h, &h.adjoint())
}

/// How an operand enters [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Plain,
    Adjoint,
}

impl Op {
    /// Operand shape and strides; adjoints read a conjugated copy transposed.
    fn operand<'a>(
        self,
        m: &'a CMatrix,
        scratch: &'a mut Option<CMatrix>,
    ) -> (usize, usize, isize, isize, &'a CMatrix) {
        let (r, k) = (m.nrows(), m.ncols());
        match self {
            Op::Plain => (r, k, 1, r as isize, m),
            Op::Adjoint => {
                let conj = scratch.insert(m.map(|z| z.conj()));
                (k, r, r as isize, 1, conj)
            }
        }
    }
}

/// `out = op(A) · op(B)`; `out` must already have the product shape.
pub fn gemm(a: &CMatrix, op_a: Op, b: &CMatrix, op_b: Op, out: &mut CMatrix) {
    let (mut sa, mut sb) = (None, None);
    let (m, k, rsa, csa, a) = op_a.operand(a, &mut sa);
    let (k2, n, rsb, csb, b) = op_b.operand(b, &mut sb);
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(
        (out.nrows(), out.ncols()),
        (m, n),
        "output has the wrong shape"
    );
    // SAFETY: Complex64 is repr(C) {re, im}, so each matrix is a column-major
    // array of [f64; 2] addressed by the strides above; `out` is borrowed
    // mutably and cannot alias the inputs.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            rsa,
            csa,
            b.as_ptr() as *const [f64; 2],
            rsb,
            csb,
            [0.0, 0.0],
            out.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
}

/// `op(A) · op(B)` as a new matrix.
pub fn product(a: &CMatrix, op_a: Op, b: &CMatrix, op_b: Op) -> CMatrix {
    let m = if op_a == Op::Plain {
        a.nrows()
    } else {
        a.ncols()
    };
    let n = if op_b == Op::Plain {
        b.ncols()
    } else {
        b.nrows()
    };
    let mut out = CMatrix::zeros(m, n);
    gemm(a, op_a, b, op_b, &mut out);
    out
}

/// Trace of the product `A·B` without forming it.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Compensated (Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<T: IntoIterator<Item = f64>>(iter: T) -> Self {
        let mut s = NeumaierSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Wraps a phase into `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = phi.rem_euclid(two_pi);
    if w >= two_pi {
        0.0
    } else {
        w
    }
}

/// Element-wise mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().copied().collect::<NeumaierSum>().value() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
