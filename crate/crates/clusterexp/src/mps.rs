//! Finite open-boundary matrix product states and their evolution under the
//! cluster-expansion MPO.
//!
//! A state on `n` sites is stored as one 3-leg tensor per site,
//!
//! ```text
//!        phys
//!          |
//!   left --A-- right
//! ```
//!
//! with both boundary bonds of dimension 1.  `ortho_center` names the one
//! site that carries the norm: every tensor strictly left of it is a left
//! isometry (`Σ A†A = 1` over left and physical legs), every tensor strictly
//! right a right isometry.  Constructors and `truncate` re-establish this
//! form; `apply_mpo` deliberately does not, since the exact product is
//! returned with its padded bonds intact and the very next truncation sweeps
//! the chain anyway.  Observables contract full transfer environments and so
//! never rely on the center being where the field claims.
//!
//! Evolution keeps the stored state at unit norm and carries the physical
//! amplitude separately: for real time the recorded norm drifting from 1
//! measures the operator's unitarity defect, for imaginary time it is the
//! partition-function weight absorbed by the per-step renormalization.

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::model::{spin_half_operators, TwoSiteHamiltonian};
use crate::mpo::{ClusterMpo, MpoError};
use crate::tensor::{contract, svd_truncated, thin_qr, DenseTensor, KernelError};

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("state needs an even site count of at least 2, got {0}")]
    SiteCount(usize),
    #[error("amplitude vector of length {got} is not {d}^n for any n ≥ 1")]
    AmplitudeLength { got: usize, d: usize },
    #[error("site {site} out of range for {n_sites} sites")]
    SiteIndex { site: usize, n_sites: usize },
    #[error("cut {cut} out of range: need 1 ≤ cut < {n_sites}")]
    Cut { cut: usize, n_sites: usize },
    #[error("physical dimension mismatch: state {state}, operator {operator}")]
    PhysDim { state: usize, operator: usize },
    #[error("chi_max must be at least 1")]
    BondCap,
    #[error("schedule cadences must be at least 1")]
    Cadence,
    #[error("state has zero norm")]
    ZeroNorm,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Mpo(#[from] MpoError),
}

pub type MpsResult<T> = Result<T, MpsError>;

/// Finite MPS with open boundaries.
#[derive(Debug, Clone)]
pub struct FiniteMps {
    /// One `(left_bond, phys, right_bond)` tensor per site.
    site_tensors: Vec<DenseTensor>,
    n_sites: usize,
    /// Site carrying the norm; see the module doc for when it is meaningful.
    ortho_center: usize,
    /// Bond cap applied by the most recent truncation.
    chi_max: usize,
}

/// Recording and truncation cadence for `evolve`.
#[derive(Debug, Clone)]
pub struct Schedule {
    /// Record observables every this many steps.
    pub record_every: usize,
    /// Truncate every this many steps; between truncations bonds grow by a
    /// factor of the MPO bond dimension per step.
    pub trunc_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            record_every: 1,
            trunc_every: 1,
        }
    }
}

/// Observables recorded at one evolution step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    /// `step · |t|` of the applied operator.
    pub time: f64,
    /// `1/2 + ⟨Sᶻᵢ⟩` for every site.
    pub occupations: Vec<f64>,
    /// Von Neumann entropy at the mid-chain cut `n/2`.
    pub entropy: f64,
    /// Physical amplitude relative to the initial state (the stored state
    /// itself is kept at unit norm).
    pub norm: f64,
    /// Truncation error of this step's sweep, 0 on non-truncating steps.
    pub trunc_error: f64,
}

impl FiniteMps {
    /// The Néel product state `|↑↓↑↓…⟩`.
    pub fn neel_state(n_sites: usize) -> MpsResult<Self> {
        if n_sites < 2 || !n_sites.is_multiple_of(2) {
            return Err(MpsError::SiteCount(n_sites));
        }
        let site_tensors = (0..n_sites)
            .map(|i| {
                let mut a = DenseTensor::zeros(&[1, 2, 1]);
                a.set(&[0, i % 2, 0], C64::ONE);
                a
            })
            .collect();
        Ok(Self {
            site_tensors,
            n_sites,
            ortho_center: 0,
            chi_max: usize::MAX,
        })
    }

    /// A reproducible random product state, normalized per site.
    pub fn random_product_state(n_sites: usize, phys_dim: usize, seed: u64) -> MpsResult<Self> {
        use rand::{Rng, SeedableRng};
        if n_sites < 2 || !n_sites.is_multiple_of(2) {
            return Err(MpsError::SiteCount(n_sites));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let site_tensors = (0..n_sites)
            .map(|_| {
                let mut v: Vec<C64> = (0..phys_dim)
                    .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                    .collect();
                let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                for z in &mut v {
                    *z /= norm;
                }
                DenseTensor::from_vec(&[1, phys_dim, 1], v).expect("length matches")
            })
            .collect();
        Ok(Self {
            site_tensors,
            n_sites,
            ortho_center: 0,
            chi_max: usize::MAX,
        })
    }

    /// Exact MPS of a dense amplitude vector (successive SVDs, no
    /// truncation).  The amplitudes are taken as-is, including their norm.
    pub fn from_dense(phys_dim: usize, amplitudes: &[C64]) -> MpsResult<Self> {
        let d = phys_dim;
        let mut n = 0usize;
        let mut len = 1usize;
        while len < amplitudes.len() {
            len *= d;
            n += 1;
        }
        if d < 2 || n == 0 || len != amplitudes.len() {
            return Err(MpsError::AmplitudeLength {
                got: amplitudes.len(),
                d,
            });
        }
        let mut rest = DenseTensor::from_vec(&[1, amplitudes.len()], amplitudes.to_vec())?;
        let mut site_tensors = Vec::with_capacity(n);
        for _ in 0..n - 1 {
            let l = rest.shape()[0];
            let cols = rest.shape()[1] / d;
            let m = rest.reshape(&[l * d, cols])?;
            let f = svd_truncated(&m, 0.0)?;
            let r = f.rank();
            site_tensors.push(f.left.reshape(&[l, d, r])?);
            let mut carry = f.right;
            for (row, s) in f.values.iter().enumerate() {
                for c in 0..cols {
                    let v = carry.get(&[row, c]) * s;
                    carry.set(&[row, c], v);
                }
            }
            rest = carry;
        }
        let l = rest.shape()[0];
        site_tensors.push(rest.reshape(&[l, d, 1])?);
        Ok(Self {
            site_tensors,
            n_sites: n,
            ortho_center: n - 1,
            chi_max: usize::MAX,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn phys_dim(&self) -> usize {
        self.site_tensors[0].shape()[1]
    }

    pub fn ortho_center(&self) -> usize {
        self.ortho_center
    }

    pub fn chi_max(&self) -> usize {
        self.chi_max
    }

    pub fn site_tensor(&self, site: usize) -> &DenseTensor {
        &self.site_tensors[site]
    }

    /// Dimensions of the `n − 1` internal bonds.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.site_tensors[..self.n_sites - 1]
            .iter()
            .map(|a| a.shape()[2])
            .collect()
    }

    pub fn max_bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// `√⟨ψ|ψ⟩` by transfer contraction; independent of canonical form.
    pub fn norm(&self) -> f64 {
        let mut env = DenseTensor::identity(1);
        for a in &self.site_tensors {
            env = advance_env(&env, a, a).expect("bond dimensions are consistent");
        }
        env.as_scalar().expect("closed network").re.max(0.0).sqrt()
    }

    /// `⟨self|other⟩`.
    pub fn overlap(&self, other: &Self) -> MpsResult<C64> {
        if self.n_sites != other.n_sites || self.phys_dim() != other.phys_dim() {
            return Err(MpsError::PhysDim {
                state: self.phys_dim(),
                operator: other.phys_dim(),
            });
        }
        let mut env = DenseTensor::identity(1);
        for (a, b) in self.site_tensors.iter().zip(&other.site_tensors) {
            env = advance_env(&env, a, b)?;
        }
        Ok(env.as_scalar()?)
    }

    /// QR-moves the center one site right: `A_i → Q`, `R` absorbed into
    /// `A_{i+1}`.
    fn move_center_right(&mut self, i: usize) -> MpsResult<()> {
        let a = &self.site_tensors[i];
        let (l, d, r) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (q, carry) = thin_qr(&a.reshape(&[l * d, r])?)?;
        let k = q.shape()[1];
        self.site_tensors[i] = q.reshape(&[l, d, k])?;
        self.site_tensors[i + 1] = contract(&carry, &self.site_tensors[i + 1], &[(1, 0)])?;
        Ok(())
    }

    /// Mirror move: `A_i → Q†` right isometry, `R†` absorbed into `A_{i−1}`.
    fn move_center_left(&mut self, i: usize) -> MpsResult<()> {
        let a = &self.site_tensors[i];
        let (l, d, r) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let m = a.reshape(&[l, d * r])?;
        let (q, rr) = thin_qr(&m.adjoint()?)?;
        let k = q.shape()[1];
        self.site_tensors[i] = q.adjoint()?.reshape(&[k, d, r])?;
        let carry = rr.adjoint()?; // l × k
        let left = &self.site_tensors[i - 1];
        self.site_tensors[i - 1] = contract(left, &carry, &[(2, 0)])?;
        Ok(())
    }

    /// Re-establishes canonical form with the center at `center`, from any
    /// gauge: one full left-to-right QR pass, then QR back to the target.
    pub fn canonicalize(&mut self, center: usize) -> MpsResult<()> {
        if center >= self.n_sites {
            return Err(MpsError::SiteIndex {
                site: center,
                n_sites: self.n_sites,
            });
        }
        for i in 0..self.n_sites - 1 {
            self.move_center_right(i)?;
        }
        for i in (center + 1..self.n_sites).rev() {
            self.move_center_left(i)?;
        }
        self.ortho_center = center;
        Ok(())
    }

    /// Exact MPO·MPS product.  Outer MPO legs are closed on the level-0
    /// identity sector; each internal bond becomes `(mpo bond) × (state
    /// bond)` with the operator index slowest.  No truncation and no
    /// re-canonicalization happen here.
    pub fn apply_mpo(&self, mpo: &ClusterMpo) -> MpsResult<Self> {
        let d = self.phys_dim();
        if d != mpo.phys_dim() {
            return Err(MpsError::PhysDim {
                state: d,
                operator: mpo.phys_dim(),
            });
        }
        let n = self.n_sites;
        let big = mpo.bond_dim();
        let mut site_tensors = Vec::with_capacity(n);
        for (i, a) in self.site_tensors.iter().enumerate() {
            let (l, r) = (a.shape()[0], a.shape()[2]);
            let b = if i == 0 {
                // w: (out, in, D_r); product legs (l, r, out, D_r)
                let w = mpo.tensor.take_index(0, 0)?;
                contract(a, &w, &[(1, 1)])?
                    .permute(&[0, 2, 3, 1])?
                    .reshape(&[l, d, big * r])?
            } else if i == n - 1 {
                // w: (D_l, out, in); product legs (l, r, D_l, out)
                let w = mpo.tensor.take_index(3, 0)?;
                contract(a, &w, &[(1, 2)])?
                    .permute(&[2, 0, 3, 1])?
                    .reshape(&[big * l, d, r])?
            } else {
                // product legs (l, r, D_l, out, D_r)
                contract(a, &mpo.tensor, &[(1, 2)])?
                    .permute(&[2, 0, 3, 4, 1])?
                    .reshape(&[big * l, d, big * r])?
            };
            site_tensors.push(b);
        }
        Ok(Self {
            site_tensors,
            n_sites: n,
            ortho_center: 0,
            chi_max: self.chi_max,
        })
    }

    /// Truncates every bond to `chi_max`, dropping relative singular values
    /// below `svd_tol`, and re-normalizes.  Returns the truncated state and
    /// the root-sum-square of discarded Schmidt weights over all bonds.
    pub fn truncate(self, chi_max: usize, svd_tol: f64) -> MpsResult<(Self, f64)> {
        let (state, err, _) = self.truncate_tracked(chi_max, svd_tol)?;
        Ok((state, err))
    }

    /// `truncate` that also reports the norm the state had just before the
    /// final renormalization; `evolve` accumulates these into the physical
    /// amplitude.
    pub(crate) fn truncate_tracked(
        mut self,
        chi_max: usize,
        svd_tol: f64,
    ) -> MpsResult<(Self, f64, f64)> {
        if chi_max == 0 {
            return Err(MpsError::BondCap);
        }
        let n = self.n_sites;
        let d = self.phys_dim();
        // pass 1: right-canonicalize so pass 2 sees true Schmidt spectra
        for i in (1..n).rev() {
            self.move_center_left(i)?;
        }
        // pass 2: truncating SVD sweep, left to right
        let mut discarded_sq = 0.0;
        for i in 0..n - 1 {
            let a = &self.site_tensors[i];
            let (l, r) = (a.shape()[0], a.shape()[2]);
            let f = svd_truncated(&a.reshape(&[l * d, r])?, 0.0)?;
            let total: f64 = f.values.iter().map(|s| s * s).sum();
            if total == 0.0 {
                return Err(MpsError::ZeroNorm);
            }
            let above = f.values.iter().take_while(|&&s| s > svd_tol * f.values[0]).count();
            let keep = above.min(chi_max).max(1);
            discarded_sq += f.values[keep..].iter().map(|s| s * s).sum::<f64>() / total;
            let u = f.left.slice_block(&[0, 0], &[l * d, keep])?;
            self.site_tensors[i] = u.reshape(&[l, d, keep])?;
            let mut carry = f.right.slice_block(&[0, 0], &[keep, r])?;
            for (row, s) in f.values[..keep].iter().enumerate() {
                for c in 0..r {
                    let v = carry.get(&[row, c]) * s;
                    carry.set(&[row, c], v);
                }
            }
            self.site_tensors[i + 1] = contract(&carry, &self.site_tensors[i + 1], &[(1, 0)])?;
        }
        let w = self.site_tensors[n - 1].frobenius_norm();
        if w == 0.0 || !w.is_finite() {
            return Err(MpsError::ZeroNorm);
        }
        let last = self.site_tensors[n - 1].scaled(C64::new(1.0 / w, 0.0));
        self.site_tensors[n - 1] = last;
        self.ortho_center = n - 1;
        self.chi_max = chi_max;
        Ok((self, discarded_sq.sqrt(), w))
    }

    /// `1/2 + ⟨Sᶻ_site⟩` of the normalized state (spin-1/2 only).
    pub fn site_occupation(&self, site: usize) -> MpsResult<f64> {
        if site >= self.n_sites {
            return Err(MpsError::SiteIndex {
                site,
                n_sites: self.n_sites,
            });
        }
        if self.phys_dim() != 2 {
            return Err(MpsError::PhysDim {
                state: self.phys_dim(),
                operator: 2,
            });
        }
        let (_, _, sz) = spin_half_operators();
        let mut num = DenseTensor::identity(1);
        let mut den = DenseTensor::identity(1);
        for (i, a) in self.site_tensors.iter().enumerate() {
            num = if i == site {
                advance_env_op(&num, a, &sz)?
            } else {
                advance_env(&num, a, a)?
            };
            den = advance_env(&den, a, a)?;
        }
        let num = num.as_scalar()?.re;
        let den = den.as_scalar()?.re;
        if den <= 0.0 {
            return Err(MpsError::ZeroNorm);
        }
        Ok(0.5 + num / den)
    }

    /// Occupations of all sites.
    pub fn occupations(&self) -> MpsResult<Vec<f64>> {
        (0..self.n_sites).map(|i| self.site_occupation(i)).collect()
    }

    /// Von Neumann entropy `−Σ λ² ln λ²` of the Schmidt values at `cut`
    /// (sites `0..cut` against the rest); natural logarithm.
    pub fn entanglement_entropy(&self, cut: usize) -> MpsResult<f64> {
        if cut == 0 || cut >= self.n_sites {
            return Err(MpsError::Cut {
                cut,
                n_sites: self.n_sites,
            });
        }
        let mut c = self.clone();
        c.canonicalize(cut - 1)?;
        let a = &c.site_tensors[cut - 1];
        let (l, d, r) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let f = svd_truncated(&a.reshape(&[l * d, r])?, 0.0)?;
        let total: f64 = f.values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return Err(MpsError::ZeroNorm);
        }
        Ok(f.values
            .iter()
            .map(|s| {
                let w = s * s / total;
                if w > 0.0 {
                    -w * w.ln()
                } else {
                    0.0
                }
            })
            .sum())
    }

    /// `⟨Σᵢ h_{i,i+1}⟩ / ⟨ψ|ψ⟩`, the energy density summed over bonds.
    pub fn energy(&self, h: &TwoSiteHamiltonian) -> MpsResult<f64> {
        let d = self.phys_dim();
        if d != h.phys_dim {
            return Err(MpsError::PhysDim {
                state: d,
                operator: h.phys_dim,
            });
        }
        let n = self.n_sites;
        // left environments up to each bond, right environments past it
        let mut lefts = Vec::with_capacity(n);
        lefts.push(DenseTensor::identity(1));
        for a in &self.site_tensors[..n - 1] {
            let next = advance_env(lefts.last().expect("seeded"), a, a)?;
            lefts.push(next);
        }
        let mut rights = vec![DenseTensor::identity(1); n];
        for i in (1..n).rev() {
            let a = &self.site_tensors[i];
            rights[i - 1] = retreat_env(&rights[i], a, a)?;
        }
        let h4 = h.term.reshape(&[d, d, d, d])?; // (out₁, out₂, in₁, in₂)
        let mut num = 0.0;
        for i in 0..n - 1 {
            let theta = contract(&self.site_tensors[i], &self.site_tensors[i + 1], &[(2, 0)])?;
            // theta: (l, p₁, p₂, r)
            let htheta = contract(&h4, &theta, &[(2, 1), (3, 2)])?; // (o₁, o₂, l, r)
            let x = contract(&lefts[i], &htheta, &[(1, 2)])?; // (l̄, o₁, o₂, r)
            let y = contract(&theta.conj(), &x, &[(0, 0), (1, 1), (2, 2)])?; // (r̄, r)
            num += contract(&y, &rights[i + 1], &[(0, 0), (1, 1)])?.as_scalar()?.re;
        }
        let mut den_env = DenseTensor::identity(1);
        for a in &self.site_tensors {
            den_env = advance_env(&den_env, a, a)?;
        }
        let den = den_env.as_scalar()?.re;
        if den <= 0.0 {
            return Err(MpsError::ZeroNorm);
        }
        Ok(num / den)
    }
}

/// `env' = Σ b† env a` over one site: env legs `(top, bottom)` with top the
/// conjugated row.
fn advance_env(env: &DenseTensor, bra: &DenseTensor, ket: &DenseTensor) -> MpsResult<DenseTensor> {
    let t = contract(env, ket, &[(1, 0)])?; // (top, p, r)
    Ok(contract(&bra.conj(), &t, &[(0, 0), (1, 1)])?) // (r̄, r)
}

/// `advance_env` with a single-site operator inserted on the physical leg.
fn advance_env_op(
    env: &DenseTensor,
    site: &DenseTensor,
    op: &DenseTensor,
) -> MpsResult<DenseTensor> {
    let t = contract(env, site, &[(1, 0)])?; // (top, p_in, r)
    let t = contract(op, &t, &[(1, 1)])?; // (p_out, top, r)
    Ok(contract(&site.conj(), &t, &[(0, 1), (1, 0)])?) // (r̄, r)
}

/// Right-moving mirror of `advance_env`: `env' = Σ a env b†` with env legs
/// `(top, bottom)` indexed by the bond left of the absorbed site.
fn retreat_env(env: &DenseTensor, bra: &DenseTensor, ket: &DenseTensor) -> MpsResult<DenseTensor> {
    let t = contract(ket, env, &[(2, 1)])?; // (l, p, top)
    Ok(contract(&bra.conj(), &t, &[(1, 1), (2, 2)])?) // (l̄, l)
}

/// Repeated `apply_mpo` + truncation with per-step observable records.
///
/// The stored state stays normalized; `StepRecord::norm` carries the
/// accumulated physical amplitude instead (see the module doc).  Recording
/// and truncation cadences come from `schedule`.
pub fn evolve(
    state: FiniteMps,
    mpo: &ClusterMpo,
    n_steps: usize,
    chi_max: usize,
    svd_tol: f64,
    schedule: &Schedule,
) -> MpsResult<(FiniteMps, Vec<StepRecord>)> {
    if schedule.record_every == 0 || schedule.trunc_every == 0 {
        return Err(MpsError::Cadence);
    }
    if chi_max == 0 {
        return Err(MpsError::BondCap);
    }
    let dt = mpo.t.norm();
    let mid = state.n_sites() / 2;
    let mut state = state;
    let mut records = Vec::new();
    let mut amplitude = 1.0f64;
    for step in 1..=n_steps {
        state = state.apply_mpo(mpo)?;
        let mut step_err = 0.0;
        if step % schedule.trunc_every == 0 {
            let (s, err, w) = state.truncate_tracked(chi_max, svd_tol)?;
            state = s;
            step_err = err;
            amplitude *= w;
        }
        if step % schedule.record_every == 0 {
            records.push(StepRecord {
                step,
                time: step as f64 * dt,
                occupations: state.occupations()?,
                entropy: state.entanglement_entropy(mid)?,
                norm: amplitude * state.norm(),
                trunc_error: step_err,
            });
        }
    }
    Ok((state, records))
}
