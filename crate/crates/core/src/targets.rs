//! Random target maps: Haar unitaries, random states, random subspace maps.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, Result};
use crate::linalg::{c, CMatrix, CVector};
use crate::objectives::{Subspace, TargetMap};

/// Default number of maps drawn per task class.
pub const DEFAULT_MAPS_PER_CLASS: usize = 12;

/// Reproducible random stream: ChaCha8 keyed by a 64-bit seed, with a 64-bit
/// stream id selecting an independent keystream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Serializable identity of an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: &'static str,
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn descriptor(&self) -> RngDescriptor {
        RngDescriptor {
            algorithm: Self::ALGORITHM,
            seed: self.seed,
            stream: self.stream,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> num_complex::Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Haar-random `U(dim)`: QR of a complex Ginibre matrix with the diagonal of
/// `R` rotated to the positive reals.
pub fn sample_haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    assert!(dim >= 1, "dimension must be positive");
    let z = CMatrix::from_fn(dim, dim, |_, _| complex_gaussian(rng));
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        let rjj = r[(j, j)];
        let n = rjj.norm();
        let phase = if n > 0.0 { rjj / n } else { c(1.0, 0.0) };
        for i in 0..dim {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Haar-random pure state (normalized complex Gaussian vector).
pub fn sample_random_state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CVector {
    assert!(dim >= 1, "dimension must be positive");
    loop {
        let v = CVector::from_fn(dim, |_, _| complex_gaussian(rng));
        let n = v.norm();
        if n > 1e-150 {
            return v / c(n, 0.0);
        }
    }
}

/// How random subspaces are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMode {
    /// Uniform `p`-subsets of the `|F, m⟩` basis.
    #[default]
    BasisAligned,
    /// Haar-random `p`-dimensional subspaces.
    Haar,
}

fn sample_subspace<R: Rng + ?Sized>(
    dim: usize,
    p: usize,
    mode: SubspaceMode,
    rng: &mut R,
) -> Subspace {
    match mode {
        SubspaceMode::BasisAligned => {
            let mut idx = rand::seq::index::sample(rng, dim, p).into_vec();
            idx.sort_unstable();
            Subspace::Basis(idx)
        }
        SubspaceMode::Haar => {
            let u = sample_haar_unitary(dim, rng);
            Subspace::Span(u.columns(0, p).into_owned())
        }
    }
}

/// Random map `W_if` between two random `p`-dimensional subspaces.
pub fn sample_subspace_target<R: Rng + ?Sized>(
    dim: usize,
    p: usize,
    mode: SubspaceMode,
    rng: &mut R,
) -> Result<TargetMap> {
    if p == 0 || p > dim {
        return Err(ControlError::invalid(format!(
            "subspace dimension must satisfy 1 <= p <= {dim}, got {p}"
        )));
    }
    let input = sample_subspace(dim, p, mode, rng);
    let output = sample_subspace(dim, p, mode, rng);
    let w = sample_haar_unitary(p, rng);
    TargetMap::subspace(dim, w, input, output)
}

/// Full-space Haar target.
pub fn sample_full_target<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> TargetMap {
    TargetMap::FullUnitary(sample_haar_unitary(dim, rng))
}

/// State map from `initial` to a Haar-random state.
pub fn sample_state_target<R: Rng + ?Sized>(initial: CVector, rng: &mut R) -> Result<TargetMap> {
    let target = sample_random_state(initial.len(), rng);
    TargetMap::state(initial, target)
}

/// Haar unitary on the indexed block (e.g. the `F⁺` manifold), as a subspace target.
pub fn sample_block_target<R: Rng + ?Sized>(
    dim: usize,
    block: &[usize],
    rng: &mut R,
) -> Result<TargetMap> {
    let w = sample_haar_unitary(block.len(), rng);
    TargetMap::subspace(
        dim,
        w,
        Subspace::Basis(block.to_vec()),
        Subspace::Basis(block.to_vec()),
    )
}

/// Basis vector `|k⟩`.
pub fn basis_state(dim: usize, k: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    v[k] = c(1.0, 0.0);
    v
}
