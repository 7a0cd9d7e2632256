//! Dense full-Hilbert-space references.
//!
//! Everything here is brute force on purpose: states are raw amplitude
//! vectors, evolution is one Hermitian eigendecomposition and a pair of
//! matrix-vector products, and comparisons are Frobenius norms.  There is no
//! second exponential algorithm to disagree with the tensor kernel; the
//! value of the module is that none of the cluster-expansion machinery
//! (virtual levels, arm inverses, truncation sweeps) appears anywhere in it.
//!
//! The size cap is 14 sites at physical dimension 2.  A 2^14 eigensystem is
//! already a stretch on one core, so the validation experiments stay at
//! n ≤ 12 and the two sizes above that exist for headroom, not habit.

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::model::{embed_pair, ModelError, TwoSiteHamiltonian};
use crate::mps::{FiniteMps, MpsError};
use crate::tensor::{contract, hermitian_eigensystem, DenseTensor, KernelError};

/// Largest site count the dense oracle accepts.
pub const MAX_ORACLE_SITES: usize = 14;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("dense oracle handles 2..={MAX_ORACLE_SITES} sites, got {0}")]
    SiteCount(usize),
    #[error("amplitude vector has length {got}, expected {expected}")]
    AmplitudeLength { expected: usize, got: usize },
    #[error("basis index {index} out of range for dimension {dim}")]
    BasisIndex { index: usize, dim: usize },
    #[error("site {site} out of range for {n_sites} sites")]
    SiteIndex { site: usize, n_sites: usize },
    #[error("operator shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("state has zero norm")]
    ZeroNorm,
    #[error("physical dimension mismatch: {a} vs {b}")]
    PhysDim { a: usize, b: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mps(#[from] MpsError),
}

pub type OracleResult<T> = Result<T, OracleError>;

/// A state as a full amplitude vector over the dⁿ-dimensional basis, site 1
/// slowest, basis index 0 = |↑⟩.
#[derive(Debug, Clone)]
pub struct DenseState {
    n_sites: usize,
    phys_dim: usize,
    amplitudes: Vec<C64>,
}

impl DenseState {
    pub fn new(n_sites: usize, phys_dim: usize, amplitudes: Vec<C64>) -> OracleResult<Self> {
        if n_sites == 0 || n_sites > MAX_ORACLE_SITES || phys_dim < 2 {
            return Err(OracleError::SiteCount(n_sites));
        }
        let expected = phys_dim.pow(n_sites as u32);
        if amplitudes.len() != expected {
            return Err(OracleError::AmplitudeLength {
                expected,
                got: amplitudes.len(),
            });
        }
        Ok(Self {
            n_sites,
            phys_dim,
            amplitudes,
        })
    }

    /// The computational basis state with the given flattened index.
    pub fn basis_state(n_sites: usize, phys_dim: usize, index: usize) -> OracleResult<Self> {
        let dn = phys_dim.pow(n_sites as u32);
        if index >= dn {
            return Err(OracleError::BasisIndex { index, dim: dn });
        }
        let mut amplitudes = vec![C64::ZERO; dn];
        amplitudes[index] = C64::ONE;
        Self::new(n_sites, phys_dim, amplitudes)
    }

    /// `|↑↓↑↓…⟩` for an even number of spin-1/2 sites.
    pub fn neel(n_sites: usize) -> OracleResult<Self> {
        if !n_sites.is_multiple_of(2) || n_sites == 0 {
            return Err(OracleError::SiteCount(n_sites));
        }
        let index = (0..n_sites)
            .filter(|site| site % 2 == 1)
            .map(|site| 1usize << (n_sites - 1 - site))
            .sum();
        Self::basis_state(n_sites, 2, index)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn phys_dim(&self) -> usize {
        self.phys_dim
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn normalize(&mut self) -> OracleResult<()> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(OracleError::ZeroNorm);
        }
        for z in &mut self.amplitudes {
            *z /= n;
        }
        Ok(())
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &Self) -> OracleResult<C64> {
        if self.amplitudes.len() != other.amplitudes.len() {
            return Err(OracleError::AmplitudeLength {
                expected: self.amplitudes.len(),
                got: other.amplitudes.len(),
            });
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// `1/2 + ⟨Sᶻ_site⟩` of the normalized state (spin-1/2 only).
    pub fn occupation(&self, site: usize) -> OracleResult<f64> {
        if self.phys_dim != 2 {
            return Err(OracleError::PhysDim {
                a: self.phys_dim,
                b: 2,
            });
        }
        if site >= self.n_sites {
            return Err(OracleError::SiteIndex {
                site,
                n_sites: self.n_sites,
            });
        }
        let total: f64 = self.amplitudes.iter().map(|z| z.norm_sqr()).sum();
        if total == 0.0 {
            return Err(OracleError::ZeroNorm);
        }
        let shift = self.n_sites - 1 - site;
        let up: f64 = self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx >> shift & 1 == 0)
            .map(|(_, z)| z.norm_sqr())
            .sum();
        Ok(up / total)
    }
}

/// A diagonalized chain Hamiltonian, reusable across time steps: evolving is
/// two dense matrix-vector products per call instead of a fresh
/// eigendecomposition.
#[derive(Debug, Clone)]
pub struct DensePropagator {
    n_sites: usize,
    phys_dim: usize,
    eigenvalues: Vec<f64>,
    q: DenseTensor,
    q_adjoint: DenseTensor,
}

impl DensePropagator {
    pub fn new(h: &TwoSiteHamiltonian, n_sites: usize) -> OracleResult<Self> {
        if !(2..=MAX_ORACLE_SITES).contains(&n_sites) {
            return Err(OracleError::SiteCount(n_sites));
        }
        let d = h.phys_dim;
        let dn = d.pow(n_sites as u32);
        let mut matrix = DenseTensor::zeros(&[dn, dn]);
        for i in 0..n_sites - 1 {
            matrix = matrix.add(&embed_pair(h, n_sites, i, i + 1))?;
        }
        let (eigenvalues, q) = hermitian_eigensystem(&matrix)?;
        let q_adjoint = q.adjoint()?;
        Ok(Self {
            n_sites,
            phys_dim: d,
            eigenvalues,
            q,
            q_adjoint,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// `exp(t·H)` as a dense matrix.
    pub fn exponential(&self, t: C64) -> OracleResult<DenseTensor> {
        let n = self.eigenvalues.len();
        let mut scaled = self.q.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let w = (t * lambda).exp();
            for i in 0..n {
                let v = scaled.get(&[i, j]) * w;
                scaled.set(&[i, j], v);
            }
        }
        Ok(contract(&scaled, &self.q_adjoint, &[(1, 0)])?)
    }

    /// `exp(t·H)·state`.
    pub fn step(&self, state: &DenseState, t: C64) -> OracleResult<DenseState> {
        if state.n_sites != self.n_sites || state.phys_dim != self.phys_dim {
            return Err(OracleError::PhysDim {
                a: state.phys_dim,
                b: self.phys_dim,
            });
        }
        let dn = state.amplitudes.len();
        let v = DenseTensor::from_vec(&[dn, 1], state.amplitudes.clone())?;
        let mut w = contract(&self.q_adjoint, &v, &[(1, 0)])?;
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let phase = (t * lambda).exp();
            let x = w.get(&[j, 0]) * phase;
            w.set(&[j, 0], x);
        }
        let out = contract(&self.q, &w, &[(1, 0)])?;
        DenseState::new(self.n_sites, self.phys_dim, out.data().to_vec())
    }
}

/// `exp(t·Hₙ)·state` for the nearest-neighbour chain built from `h`.
///
/// One-shot form of `DensePropagator`; diagonalizes on every call.
pub fn dense_evolve(state: &DenseState, h: &TwoSiteHamiltonian, t: C64) -> OracleResult<DenseState> {
    let prop = DensePropagator::new(h, state.n_sites)?;
    prop.step(state, t)
}

/// Relative Frobenius distance `‖a − b‖ / max(‖a‖, ‖b‖)`; two zero
/// operators are at distance 0.
pub fn operator_distance(a: &DenseTensor, b: &DenseTensor) -> OracleResult<f64> {
    if a.shape() != b.shape() {
        return Err(OracleError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(a.sub(b)?.frobenius_norm() / scale)
}

/// Contracts an MPS into a dense amplitude vector.
pub fn mps_to_dense(state: &FiniteMps) -> OracleResult<DenseState> {
    let n = state.n_sites();
    if n > MAX_ORACLE_SITES {
        return Err(OracleError::SiteCount(n));
    }
    let d = state.phys_dim();
    let mut acc = DenseTensor::identity(1);
    for i in 0..n {
        let a = state.site_tensor(i);
        let rows = acc.shape()[0];
        let r = a.shape()[2];
        acc = contract(&acc, a, &[(1, 0)])?.reshape(&[rows * d, r])?;
    }
    let flat = acc.reshape(&[d.pow(n as u32)])?;
    DenseState::new(n, d, flat.data().to_vec())
}
