//! The cluster-expansion MPO: one site-independent four-leg tensor whose
//! open-chain contraction reproduces `exp(t·Hₙ)` exactly on every cluster
//! of `n ≤ p` sites.
//!
//! The virtual legs are graded by cluster half-width.  Level 0 is the
//! one-dimensional identity sector; level `k` carries the Schmidt vectors of
//! the connected `2k`-site residual across its central bond.  The tensor is
//! populated block by block:
//!
//! ```text
//!            ┌──────┬──────┬──────┐
//!            │  1   │ O₀₁  │      │        O₀₁·O₁₀          = R₂
//!   O   =    │ O₁₀  │ O₁₁  │ O₁₂  │        O₀₁·O₁₁·O₁₀      = R₃ core
//!            │      │ O₂₁  │ O₂₂  │        O₀₁·O₁₂·O₂₁·O₁₀  = R₄ core
//!            └──────┴──────┴──────┘        …
//! ```
//!
//! where `Rₙ` is the connected n-site residual: `exp(t·Hₙ)` minus every
//! product of smaller encoded clusters the chain already contains.  Blocks
//! exist only for `|level_L − level_R| ≤ 1`; contracting `n` copies with the
//! boundary legs closed on level 0 sums exactly the non-overlapping cluster
//! covers of the chain.
//!
//! The schedule alternates: an even cluster `n = 2k` SVD-splits its residual
//! across the central bond, creating level `k` and the blocks `O_{k−1,k}`,
//! `O_{k,k−1}`; an odd cluster `n = 2k+1` strips `k` sites from each side
//! with pseudo-inverses of the arm elements and writes the remaining
//! single-site core into `O_{k,k}`, at no cost in bond dimension.  Stripping
//! assumes each residual lies in the range of the outer-arm isometries; the
//! part that does not (the leakage) is measured after every solve and
//! reported instead of silently dropped.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{cluster_hamiltonian, ModelError, TwoSiteHamiltonian};
use crate::tensor::{
    apply_pseudo_inverse, contract, matrix_exponential, svd_truncated, DenseTensor, KernelError,
    PinvSide, SvdFactors,
};

/// Leakage above this fraction of `‖exp(t·Hₙ)‖_F` aborts the build.
pub(crate) const LEAKAGE_FAIL: f64 = 1e-8;
/// Leakage above this fraction is recorded as a warning; below it is
/// indistinguishable from roundoff.
pub(crate) const LEAKAGE_WARN: f64 = 1e-11;
/// Residuals below this floor are treated as absent in slope fits.
pub(crate) const NOISE_FLOOR: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum MpoError {
    #[error("max cluster size {0} outside supported range 2..=9")]
    MaxCluster(usize),
    #[error("chain length {0} outside supported range {1}..=12")]
    ChainLength(usize, usize),
    #[error("cluster {n}: leakage {leakage:.3e} exceeds {LEAKAGE_FAIL:.0e} of the operator scale")]
    Leakage { n: usize, leakage: f64 },
    #[error("all errors at or below the noise floor (max {max_error:.3e}); dt range too small")]
    NoiseFloor { max_error: f64 },
    #[error("operator file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("loaded operator fails two-site exactness: relative error {0:.3e}")]
    CorruptOperator(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type MpoResult<T> = Result<T, MpoError>;

/// A virtual index graded by cluster level; level 0 is always the
/// one-dimensional identity sector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradedIndex {
    level_dims: Vec<usize>,
}

impl GradedIndex {
    pub fn new(level_dims: Vec<usize>) -> Self {
        assert!(
            level_dims.first() == Some(&1),
            "level 0 must have dimension 1"
        );
        Self { level_dims }
    }

    /// The grading with only the identity sector.
    pub fn identity_only() -> Self {
        Self {
            level_dims: vec![1],
        }
    }

    pub fn level_dims(&self) -> &[usize] {
        &self.level_dims
    }

    pub fn n_levels(&self) -> usize {
        self.level_dims.len()
    }

    /// Dimension of a level; absent levels have dimension 0.
    pub fn dim(&self, level: usize) -> usize {
        self.level_dims.get(level).copied().unwrap_or(0)
    }

    /// Offset of a level inside the flattened index.
    pub fn offset(&self, level: usize) -> usize {
        self.level_dims[..level.min(self.level_dims.len())]
            .iter()
            .sum()
    }

    pub fn total(&self) -> usize {
        self.level_dims.iter().sum()
    }

    pub fn push_level(&mut self, dim: usize) {
        self.level_dims.push(dim);
    }
}

/// Per-cluster bookkeeping from a build.
#[derive(Debug, Clone)]
pub struct ClusterRecord {
    pub n_sites: usize,
    /// `‖exp(t·Hₙ) − chain‖_F / ‖exp(t·Hₙ)‖_F` before this cluster is solved.
    pub residual_before: f64,
    /// Same ratio after the solve: the part of the residual outside the
    /// reach of the arm isometries plus roundoff.
    pub leakage: f64,
    /// `(level, dimension)` when this step created a virtual level.
    pub new_level: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub records: Vec<ClusterRecord>,
    pub level_dims: Vec<usize>,
    pub warnings: Vec<String>,
}

impl BuildReport {
    pub fn total_dim(&self) -> usize {
        self.level_dims.iter().sum()
    }
}

/// The uniform cluster-expansion MPO.
#[derive(Debug, Clone)]
pub struct ClusterMpo {
    /// Four legs: `(left_virtual, phys_out, phys_in, right_virtual)`.
    pub tensor: DenseTensor,
    /// Grading shared by both virtual legs.
    pub virtual_index: GradedIndex,
    /// Complex time: `−i·dt` for real-time evolution, `−τ` for imaginary.
    pub t: C64,
    /// Largest cluster size encoded exactly.
    pub p: usize,
    pub h: TwoSiteHamiltonian,
    /// Central-bond SVD factors of each even split, in level order; the odd
    /// solves and diagnostics re-apply them as pseudo-inverses.  Not
    /// serialized: a loaded operator can be contracted and applied but not
    /// extended.
    pub(crate) svd_factor_cache: Vec<SvdFactors>,
}

impl ClusterMpo {
    fn identity(h: &TwoSiteHamiltonian, t: C64, p: usize) -> Self {
        let d = h.phys_dim;
        let mut tensor = DenseTensor::zeros(&[1, d, d, 1]);
        for s in 0..d {
            tensor.set(&[0, s, s, 0], C64::ONE);
        }
        Self {
            tensor,
            virtual_index: GradedIndex::identity_only(),
            t,
            p,
            h: h.clone(),
            svd_factor_cache: Vec::new(),
        }
    }

    pub fn phys_dim(&self) -> usize {
        self.h.phys_dim
    }

    pub fn bond_dim(&self) -> usize {
        self.virtual_index.total()
    }

    /// The `(level_l, level_r)` block as a `(dim_l, d, d, dim_r)` tensor.
    pub fn block(&self, level_l: usize, level_r: usize) -> DenseTensor {
        let d = self.phys_dim();
        let g = &self.virtual_index;
        self.tensor
            .slice_block(
                &[g.offset(level_l), 0, 0, g.offset(level_r)],
                &[g.dim(level_l), d, d, g.dim(level_r)],
            )
            .expect("level bounds checked by GradedIndex")
    }

    /// Arm element `O_{k−1,k}` as a `(r_{k−1}·d²) × r_k` matrix together
    /// with factors that let `apply_pseudo_inverse` strip it from the left.
    fn left_arm_factors(&self, k: usize) -> MpoResult<SvdFactors> {
        let f = &self.svd_factor_cache[k - 1];
        let r = f.values.len();
        Ok(SvdFactors::from_parts(
            f.left.clone(),
            f.values.iter().map(|s| s.sqrt()).collect(),
            DenseTensor::identity(r),
        )?)
    }

    /// Mirror of `left_arm_factors` for `O_{k,k−1}`, stripped from the right.
    fn right_arm_factors(&self, k: usize) -> MpoResult<SvdFactors> {
        let f = &self.svd_factor_cache[k - 1];
        let r = f.values.len();
        Ok(SvdFactors::from_parts(
            DenseTensor::identity(r),
            f.values.iter().map(|s| s.sqrt()).collect(),
            f.right.clone(),
        )?)
    }

    /// Enlarges both virtual legs by a new level of dimension `dim`.
    fn push_level(&mut self, dim: usize) -> MpoResult<()> {
        let d = self.phys_dim();
        let old = self.virtual_index.total();
        let mut grown = DenseTensor::zeros(&[old + dim, d, d, old + dim]);
        grown.assign_block(&[0, 0, 0, 0], &self.tensor)?;
        self.tensor = grown;
        self.virtual_index.push_level(dim);
        Ok(())
    }

    fn write_block(&mut self, level_l: usize, level_r: usize, block: &DenseTensor) -> MpoResult<()> {
        let g = &self.virtual_index;
        let offsets = [g.offset(level_l), 0, 0, g.offset(level_r)];
        Ok(self.tensor.assign_block(&offsets, block)?)
    }

    /// `exp(t·Hₙ)` for this operator's `h` and `t`.
    fn dense_exponential(&self, n: usize) -> MpoResult<DenseTensor> {
        let hn = cluster_hamiltonian(&self.h, n)?;
        Ok(matrix_exponential(&hn.matrix, self.t)?)
    }
}

/// Converts a `dⁿ×dⁿ` cluster operator into `n` site-fused legs of extent
/// `d²`, ordered `(s₁, …, sₙ)` with `sⱼ = out_j·d + in_j`.
pub(crate) fn matrix_to_site_fused(m: &DenseTensor, d: usize, n: usize) -> DenseTensor {
    let legs = vec![d; 2 * n];
    let t = m.reshape(&legs).expect("dⁿ×dⁿ operator");
    let mut axes = Vec::with_capacity(2 * n);
    for j in 0..n {
        axes.push(j);
        axes.push(n + j);
    }
    t.permute(&axes)
        .expect("interleave")
        .reshape(&vec![d * d; n])
        .expect("pair fuse")
}

/// Inverse of `matrix_to_site_fused`.
pub(crate) fn site_fused_to_matrix(t: &DenseTensor, d: usize, n: usize) -> DenseTensor {
    let legs = vec![d; 2 * n];
    let x = t.reshape(&legs).expect("site-fused tensor");
    let mut axes = Vec::with_capacity(2 * n);
    for j in 0..n {
        axes.push(2 * j);
    }
    for j in 0..n {
        axes.push(2 * j + 1);
    }
    let dn = d.pow(n as u32);
    x.permute(&axes)
        .expect("deinterleave")
        .reshape(&[dn, dn])
        .expect("operator shape")
}

/// Contracts `n` copies of the MPO tensor on an open chain, closing both
/// outer virtual legs on the level-0 unit vector.
///
/// Assembled as two half chains joined at the middle, so the largest
/// intermediate is the `dⁿ×dⁿ` result itself rather than a boundary-open
/// `dⁿ·D` object.
pub fn contract_open_chain(mpo: &ClusterMpo, n: usize) -> MpoResult<DenseTensor> {
    if !(1..=12).contains(&n) {
        return Err(MpoError::ChainLength(n, 1));
    }
    let d = mpo.phys_dim();
    let dd = mpo.bond_dim();
    // (vL, o, i, vR) with the physical pair fused: (vL, s, vR)
    let w = mpo.tensor.reshape(&[dd, d * d, dd])?;

    let m = n / 2;
    // left half: [s₁ … s_m, vR]
    let mut left = w.take_index(0, 0)?; // [s, vR]
    for _ in 1..m.max(1) {
        let legs = left.rank();
        left = contract(&left, &w, &[(legs - 1, 0)])?;
    }
    // right half: [vL, s_{m+1} … s_n]
    let mut right = w.take_index(2, 0)?; // [vL, s]
    for _ in 1..(n - m.max(1)) {
        right = contract(&w, &right, &[(2, 0)])?;
    }
    let fused = if n == 1 {
        left.take_index(1, 0)? // close vR on level 0
    } else {
        let legs = left.rank();
        contract(&left, &right, &[(legs - 1, 0)])?
    };
    Ok(site_fused_to_matrix(&fused, d, n))
}

/// `exp(t·Hₙ) − contract_open_chain(mpo, n)`: the part of the cluster
/// exponential the operator does not yet contain.
pub fn encoded_residual(mpo: &ClusterMpo, n: usize) -> MpoResult<DenseTensor> {
    if !(2..=12).contains(&n) {
        return Err(MpoError::ChainLength(n, 2));
    }
    let exp = mpo.dense_exponential(n)?;
    Ok(exp.sub(&contract_open_chain(mpo, n)?)?)
}

impl ClusterMpo {
    /// Strips `count` sites from the left of a site-fused tensor whose legs
    /// are `[s₁, …, s_n]` (first call) by arm pseudo-inverses, outside-in.
    /// Returns a tensor `[r_count, s_{count+1}, …]`.
    fn strip_arm_left(&self, fused: &DenseTensor, count: usize) -> MpoResult<DenseTensor> {
        let d2 = self.phys_dim() * self.phys_dim();
        // start with a dummy level-0 leg so every step sees [r, s, rest…]
        let mut shape = vec![1usize];
        shape.extend_from_slice(fused.shape());
        let mut w = fused.reshape(&shape)?;
        for j in 1..=count {
            let r_prev = w.shape()[0];
            let rest: usize = w.shape()[2..].iter().product();
            let m = w.reshape(&[r_prev * d2, rest])?;
            let stripped = apply_pseudo_inverse(&self.left_arm_factors(j)?, PinvSide::Left, &m)?;
            let rj = stripped.shape()[0];
            let mut next_shape = vec![rj];
            next_shape.extend_from_slice(&w.shape()[2..]);
            w = stripped.reshape(&next_shape)?;
        }
        Ok(w)
    }

    /// Mirror of `strip_arm_left`: strips `count` sites from the right,
    /// returning `[…, s_{n-count}, r_count]`.
    fn strip_arm_right(&self, fused: &DenseTensor, count: usize) -> MpoResult<DenseTensor> {
        let d2 = self.phys_dim() * self.phys_dim();
        let mut shape = fused.shape().to_vec();
        shape.push(1);
        let mut w = fused.reshape(&shape)?;
        for j in 1..=count {
            let rank = w.rank();
            let r_prev = w.shape()[rank - 1];
            let rest: usize = w.shape()[..rank - 2].iter().product();
            let m = w.reshape(&[rest, d2 * r_prev])?;
            let stripped = apply_pseudo_inverse(&self.right_arm_factors(j)?, PinvSide::Right, &m)?;
            let rj = stripped.shape()[1];
            let mut next_shape = w.shape()[..rank - 2].to_vec();
            next_shape.push(rj);
            w = stripped.reshape(&next_shape)?;
        }
        Ok(w)
    }

    /// Encodes the even cluster `n = 2k`: SVD-splits the stripped residual
    /// at the central bond, appending virtual level `k` and the blocks
    /// `O_{k−1,k}` and `O_{k,k−1}`.
    fn split_even_cluster(&mut self, n: usize, rel_tol: f64, report: &mut BuildReport) -> MpoResult<()> {
        debug_assert!(n.is_multiple_of(2));
        let k = n / 2;
        let d = self.phys_dim();
        let d2 = d * d;
        let exp = self.dense_exponential(n)?;
        let exp_norm = exp.frobenius_norm();
        let residual = exp.sub(&contract_open_chain(self, n)?)?;
        let residual_before = residual.frobenius_norm() / exp_norm;

        // A residual at rounding scale is already encoded; factoring it would
        // promote noise into a full-rank level (e.g. t = 0 or h = 0).
        if residual_before <= NOISE_FLOOR {
            let rl = self.virtual_index.dim(k - 1);
            self.push_level(0)?;
            self.svd_factor_cache.push(SvdFactors::from_parts(
                DenseTensor::zeros(&[rl * d2, 0]),
                Vec::new(),
                DenseTensor::zeros(&[0, d2 * rl]),
            )?);
            return self.finish_cluster(n, exp, exp_norm, residual_before, Some((k, 0)), report);
        }

        let fused = matrix_to_site_fused(&residual, d, n);
        let w = self.strip_arm_left(&fused, k - 1)?;
        let w = self.strip_arm_right(&w, k - 1)?;
        // [r_{k-1}, s_k, s_{k+1}, r_{k-1}] split across the central bond
        let (rl, rr) = (w.shape()[0], w.shape()[w.rank() - 1]);
        let central = w.reshape(&[rl * d2, d2 * rr])?;
        let factors = svd_truncated(&central, rel_tol)?;
        let rk = factors.rank();

        let mut up = factors.left.clone(); // (r_{k-1}·d²) × r_k
        for (col, s) in factors.values.iter().enumerate() {
            let root = s.sqrt();
            for row in 0..rl * d2 {
                let v = up.get(&[row, col]) * root;
                up.set(&[row, col], v);
            }
        }
        let mut down = factors.right.clone(); // r_k × (d²·r_{k-1})
        for (row, s) in factors.values.iter().enumerate() {
            let root = s.sqrt();
            for col in 0..d2 * rr {
                let v = down.get(&[row, col]) * root;
                down.set(&[row, col], v);
            }
        }

        self.push_level(rk)?;
        self.write_block(k - 1, k, &up.reshape(&[rl, d, d, rk])?)?;
        self.write_block(k, k - 1, &down.reshape(&[rk, d, d, rr])?)?;
        self.svd_factor_cache.push(factors);

        self.finish_cluster(n, exp, exp_norm, residual_before, Some((k, rk)), report)
    }

    /// Encodes the odd cluster `n = 2k+1` by stripping `k` sites from each
    /// side and adding the single-site core into block `(k,k)`.
    fn solve_odd_cluster(&mut self, n: usize, report: &mut BuildReport) -> MpoResult<()> {
        debug_assert!(n % 2 == 1);
        let k = (n - 1) / 2;
        let d = self.phys_dim();
        let exp = self.dense_exponential(n)?;
        let exp_norm = exp.frobenius_norm();
        let residual = exp.sub(&contract_open_chain(self, n)?)?;
        let residual_before = residual.frobenius_norm() / exp_norm;

        if residual_before <= NOISE_FLOOR {
            return self.finish_cluster(n, exp, exp_norm, residual_before, None, report);
        }

        let fused = matrix_to_site_fused(&residual, d, n);
        let w = self.strip_arm_left(&fused, k)?;
        let core = self.strip_arm_right(&w, k)?; // [r_k, s, r_k]
        let rk = core.shape()[0];
        let grown = self
            .block(k, k)
            .add(&core.reshape(&[rk, d, d, rk])?)?;
        self.write_block(k, k, &grown)?;

        self.finish_cluster(n, exp, exp_norm, residual_before, None, report)
    }

    /// Measures leakage after a solve, records it, and applies the policy:
    /// warn above the numerical floor, fail above `LEAKAGE_FAIL`.
    fn finish_cluster(
        &mut self,
        n: usize,
        exp: DenseTensor,
        exp_norm: f64,
        residual_before: f64,
        new_level: Option<(usize, usize)>,
        report: &mut BuildReport,
    ) -> MpoResult<()> {
        let after = exp.sub(&contract_open_chain(self, n)?)?;
        let leakage = after.frobenius_norm() / exp_norm;
        report.records.push(ClusterRecord {
            n_sites: n,
            residual_before,
            leakage,
            new_level,
        });
        if leakage > LEAKAGE_FAIL {
            return Err(MpoError::Leakage { n, leakage });
        }
        if leakage > LEAKAGE_WARN {
            report.warnings.push(format!(
                "cluster {n}: residual leaks {leakage:.3e} outside the arm isometries"
            ));
        }
        Ok(())
    }
}

/// Builds the cluster-expansion MPO for clusters up to `p` sites.
///
/// `t` is the full complex prefactor of the exponent: pass `−i·dt` for real
/// time and `−τ` for imaginary time.
pub fn build(
    h: &TwoSiteHamiltonian,
    t: C64,
    p: usize,
    rel_tol: f64,
) -> MpoResult<(ClusterMpo, BuildReport)> {
    if !(2..=9).contains(&p) {
        return Err(MpoError::MaxCluster(p));
    }
    let mut mpo = ClusterMpo::identity(h, t, p);
    let mut report = BuildReport::default();
    for n in 2..=p {
        if n % 2 == 0 {
            mpo.split_even_cluster(n, rel_tol, &mut report)?;
        } else {
            mpo.solve_odd_cluster(n, &mut report)?;
        }
    }
    report.level_dims = mpo.virtual_index.level_dims().to_vec();
    Ok((mpo, report))
}

/// Least-squares slope of `log ‖chain − exact‖_F` against `log dt` for
/// real-time builds over `dt_list`, at chain length `n_sites > p`.
///
/// Points at or below the noise floor are dropped; if fewer than two
/// survive the spread is unmeasurable and `NoiseFloor` is returned.
pub fn error_order_estimate(
    h: &TwoSiteHamiltonian,
    p: usize,
    n_sites: usize,
    dt_list: &[f64],
) -> MpoResult<f64> {
    if n_sites <= p || n_sites > 10 {
        return Err(MpoError::ChainLength(n_sites, p + 1));
    }
    // one diagonalization of H_n serves every dt
    let hn = cluster_hamiltonian(h, n_sites)?;
    let (vals, q) = crate::tensor::hermitian_eigensystem(&hn.matrix)?;
    let qh = q.adjoint()?;
    let errors: Vec<(f64, f64)> = dt_list
        .par_iter()
        .map(|&dt| -> MpoResult<(f64, f64)> {
            let t = C64::new(0.0, -dt);
            let (mpo, _) = build(h, t, p, 1e-12)?;
            let chain = contract_open_chain(&mpo, n_sites)?;
            let mut phases = q.clone();
            for (j, &lambda) in vals.iter().enumerate() {
                let w = (t * lambda).exp();
                for i in 0..vals.len() {
                    let v = phases.get(&[i, j]) * w;
                    phases.set(&[i, j], v);
                }
            }
            let exact = contract(&phases, &qh, &[(1, 0)])?;
            Ok((dt, chain.sub(&exact)?.frobenius_norm()))
        })
        .collect::<MpoResult<_>>()?;
    slope_above_noise(&errors)
}

/// Log-log least-squares slope of `(x, error)` points, dropping errors at
/// or below the noise floor; fewer than two surviving points means the
/// spread is unmeasurable and `NoiseFloor` is returned.
pub fn slope_above_noise(errors: &[(f64, f64)]) -> MpoResult<f64> {
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .filter(|&&(_, e)| e > NOISE_FLOOR)
        .map(|&(x, e)| (x.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        let max_error = errors.iter().map(|&(_, e)| e).fold(0.0, f64::max);
        return Err(MpoError::NoiseFloor { max_error });
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Relative deviation between the s-th `t`-derivative of the chain
/// contraction at `t = 0` and `Hₙˢ`, the same derivative of the exact
/// exponential.  Central finite differences with step `1e-3`, Richardson
/// extrapolated once.
pub fn taylor_match_deviation(
    h: &TwoSiteHamiltonian,
    p: usize,
    n_sites: usize,
    order: usize,
) -> MpoResult<f64> {
    assert!((1..=4).contains(&order), "stencils tabulated for s ≤ 4");
    let chain_at = |tau: f64| -> MpoResult<DenseTensor> {
        let (mpo, _) = build(h, C64::new(tau, 0.0), p, 1e-12)?;
        contract_open_chain(&mpo, n_sites)
    };
    let dn = h.phys_dim.pow(n_sites as u32);
    let stencil = |step: f64| -> MpoResult<DenseTensor> {
        // central stencils of O(step²) accuracy
        let combo: &[(f64, f64)] = match order {
            1 => &[(1.0, 0.5), (-1.0, -0.5)],
            2 => &[(1.0, 1.0), (0.0, -2.0), (-1.0, 1.0)],
            3 => &[(2.0, 0.5), (1.0, -1.0), (-1.0, 1.0), (-2.0, -0.5)],
            _ => &[(2.0, 1.0), (1.0, -4.0), (0.0, 6.0), (-1.0, -4.0), (-2.0, 1.0)],
        };
        let mut acc = DenseTensor::zeros(&[dn, dn]);
        for &(mult, coeff) in combo {
            let term = chain_at(mult * step)?;
            acc = acc.add(&term.scaled(C64::new(coeff / step.powi(order as i32), 0.0)))?;
        }
        Ok(acc)
    };
    let coarse = stencil(1e-3)?;
    let fine = stencil(5e-4)?;
    // Richardson: error O(step²), so D = (4·D(step/2) − D(step)) / 3
    let extrap = fine
        .scaled(C64::new(4.0 / 3.0, 0.0))
        .sub(&coarse.scaled(C64::new(1.0 / 3.0, 0.0)))?;
    let hn = cluster_hamiltonian(h, n_sites)?.matrix;
    let mut power = DenseTensor::identity(dn);
    for _ in 0..order {
        power = contract(&power, &hn, &[(1, 0)])?;
    }
    Ok(extrap.sub(&power)?.frobenius_norm() / power.frobenius_norm())
}

impl ClusterMpo {
    /// Writes the operator to a binary file: header `(d, p, t, level_dims)`
    /// then the tensor entries in canonical layout, all little-endian.
    pub fn save(&self, path: &Path) -> MpoResult<()> {
        let mut f = std::fs::File::create(path)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend((self.phys_dim() as u32).to_le_bytes());
        buf.extend((self.p as u32).to_le_bytes());
        buf.extend(self.t.re.to_le_bytes());
        buf.extend(self.t.im.to_le_bytes());
        let dims = self.virtual_index.level_dims();
        buf.extend((dims.len() as u32).to_le_bytes());
        for &dim in dims {
            buf.extend((dim as u32).to_le_bytes());
        }
        for z in self.tensor.data() {
            buf.extend(z.re.to_le_bytes());
            buf.extend(z.im.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads an operator written by `save`.  The caller supplies the model;
    /// two-site cluster exactness is re-verified so a corrupted or
    /// mismatched file fails here rather than in an evolution.
    pub fn load(path: &Path, h: &TwoSiteHamiltonian) -> MpoResult<Self> {
        let bad = |reason: &str| MpoError::BadFile {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> MpoResult<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated header"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let read_u32 =
            |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let read_f64 = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
        let d = read_u32(take(4)?);
        let p = read_u32(take(4)?);
        let t = C64::new(read_f64(take(8)?), read_f64(take(8)?));
        let n_levels = read_u32(take(4)?);
        if d != h.phys_dim {
            return Err(bad(&format!(
                "physical dimension {d} does not match the supplied model ({})",
                h.phys_dim
            )));
        }
        if n_levels == 0 || n_levels > 64 {
            return Err(bad("implausible level count"));
        }
        let mut level_dims = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            level_dims.push(read_u32(take(4)?));
        }
        if level_dims[0] != 1 {
            return Err(bad("level 0 must have dimension 1"));
        }
        let total: usize = level_dims.iter().sum();
        let want = total * d * d * total;
        let mut data = Vec::with_capacity(want);
        for _ in 0..want {
            let re = read_f64(take(8)?);
            let im = read_f64(take(8)?);
            data.push(C64::new(re, im));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor entries"));
        }
        let tensor = DenseTensor::from_vec(&[total, d, d, total], data)?;
        let mpo = ClusterMpo {
            tensor,
            virtual_index: GradedIndex::new(level_dims),
            t,
            p,
            h: h.clone(),
            svd_factor_cache: Vec::new(),
        };
        let exp = mpo.dense_exponential(2)?;
        let dist = contract_open_chain(&mpo, 2)?.sub(&exp)?.frobenius_norm()
            / exp.frobenius_norm();
        if dist > 1e-10 {
            return Err(MpoError::CorruptOperator(dist));
        }
        Ok(mpo)
    }
}
