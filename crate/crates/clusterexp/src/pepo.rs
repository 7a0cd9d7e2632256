//! Cluster-expansion PEPO on the square lattice.
//!
//! The 1D construction generalises: one uniform six-leg tensor
//!
//! ```text
//!                up
//!                 │
//!         left ──[W]── right        legs (left, up, out, in, right, down)
//!               ┌─┘│
//!             phys down
//! ```
//!
//! whose four virtual legs carry the same graded index, so that contracting
//! a copy on every site of an open patch (boundary legs closed on the
//! identity sector) approximates `exp(t·Σ h)` over the patch's bonds.
//!
//! The identity sector plus a single level-1 sector already encode every
//! single-bond cluster: one shared SVD of `exp(t·h) − 1` provides the arm
//! factors, the left/top site of a bond holding the `U√S` half and the
//! right/bottom site the `√S·V` half, which makes horizontal and vertical
//! bonds automatically consistent.  Larger clusters are solved outside-in
//! exactly as in one dimension: strip the single-site arms with
//! pseudo-inverses and deposit what remains in a new block.  The encoded
//! set is
//!
//!   - two-site clusters (both orientations),
//!   - three-site paths and corners (one centre block per geometry),
//!   - four-site paths, straight and bent, factored through one shared
//!     level-2 slice at the central bond,
//!   - four-site T-trees and the five-site cross (star-shaped trees whose
//!     arms are all level 1),
//!   - optionally the 2×2 plaquette loop.
//!
//! Bent four-site paths are special: their four sites span a full
//! plaquette, so the lattice induces a fourth bond that is not part of the
//! cluster.  Their weight is the Möbius one: the contraction that
//! subtracts already-encoded content keeps the extra bond in the identity
//! sector.  With the bent paths encoded, the first thing a 2×2 patch
//! misses is the genuine loop term at `O(t⁴)`.
//!
//! Because the virtual sectors are shared between cluster types (every arm
//! rides the same level-1 leg), sector assignments exist that pair blocks
//! from different clusters.  The solves run smallest-first and each one
//! subtracts everything already encoded, so those cross terms are absorbed
//! into the next weight up and every cluster region is left exact.  The
//! loop weight installed by the plaquette solve is therefore the residual
//! one, not the bare four-bond inclusion-exclusion.
//!
//! The plaquette weight is not a tree and cannot be reached by arm
//! stripping.  It is factored by two sequential SVDs: one cut between the
//! columns routes a `κ`-dimensional sector over the top bond, then each
//! column splits between its two sites, sending `μ`-dimensional sectors
//! down the vertical bonds.  The bottom bond stays identity; the four ring
//! blocks can only appear together, so no partial ring contaminates other
//! patches.  The cut placement is a gauge choice; patch contractions do
//! not depend on it.
//!
//! Every solve measures its leakage against `‖exp(t·H_cluster)‖_F` with
//! the same thresholds as the 1D build.  The shared-factor solve of the
//! four-site paths assumes the weight is the same for every geometry,
//! which holds for swap-symmetric interactions; a model violating that
//! shows up as leakage and aborts the build instead of passing silently.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{embed_pair, ModelError, TwoSiteHamiltonian};
use crate::mpo::{
    matrix_to_site_fused, site_fused_to_matrix, slope_above_noise, GradedIndex, MpoError,
    LEAKAGE_FAIL, LEAKAGE_WARN, NOISE_FLOOR,
};
use crate::tensor::{
    apply_pseudo_inverse, contract, matrix_exponential, svd_truncated, DenseTensor, KernelError,
    PinvSide, SvdFactors,
};

#[derive(Debug, Error)]
pub enum PepoError {
    #[error("physical dimension {0} outside supported range 2..=3")]
    PhysDim(usize),
    #[error("patch {rows}×{cols} outside the supported 1..=3 × 1..=3 range")]
    PatchSize { rows: usize, cols: usize },
    #[error(
        "cluster {label}: leakage {leakage:.3e} exceeds {LEAKAGE_FAIL:.0e} of the operator scale"
    )]
    Leakage { label: String, leakage: f64 },
    #[error("all errors at or below the noise floor (max {max_error:.3e}); patch is encoded exactly")]
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

pub type PepoResult<T> = Result<T, PepoError>;

/// Sector indices on the graded virtual legs.  `path` is the level-2 slice
/// shared by all four-site paths; the three `ring_*` slices carry the
/// plaquette factorisation (top bond, left vertical, right vertical).
const SEC_ID: usize = 0;
const SEC_L1: usize = 1;
const SEC_PATH: usize = 2;
const SEC_RING_TOP: usize = 3;
const SEC_RING_LEFT: usize = 4;
const SEC_RING_RIGHT: usize = 5;
const N_SECTORS: usize = 6;
const SECTOR_LABELS: [&str; N_SECTORS] =
    ["id", "level1", "path", "ring_top", "ring_left", "ring_right"];
/// Cluster level of each sector, in sector order.
const SECTOR_LEVELS: [usize; N_SECTORS] = [0, 1, 2, 2, 2, 2];

/// An unordered lattice bond between two `(row, col)` sites.
type LatticeBond = ((isize, isize), (isize, isize));

/// The four virtual directions of a site tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Dir {
    Left,
    Up,
    Right,
    Down,
}

const DIRS: [Dir; 4] = [Dir::Left, Dir::Up, Dir::Right, Dir::Down];

impl Dir {
    fn offset(self) -> (isize, isize) {
        match self {
            Dir::Left => (0, -1),
            Dir::Up => (-1, 0),
            Dir::Right => (0, 1),
            Dir::Down => (1, 0),
        }
    }

    /// Slot of this direction in a block signature `(l, u, r, d)`.
    fn sig_slot(self) -> usize {
        match self {
            Dir::Left => 0,
            Dir::Up => 1,
            Dir::Right => 2,
            Dir::Down => 3,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Dir::Left => "l",
            Dir::Up => "u",
            Dir::Right => "r",
            Dir::Down => "d",
        }
    }
}

/// An arm displaced `dir` from its cluster is the left/top site of its
/// bond exactly when `dir` is `Left` or `Up`; that side carries the `U√S`
/// half of the two-site split, the other side `√S·V`.
fn arm_is_u_side(dir: Dir) -> bool {
    matches!(dir, Dir::Left | Dir::Up)
}

/// Cluster classes the build attempts, in solve order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterClass {
    TwoSite,
    ThreeSite,
    FourSiteTree,
    FourSitePath,
    FiveSiteCross,
    Plaquette,
}

/// An open rectangular patch, at most 3×3; boundary legs close on the
/// identity sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub rows: usize,
    pub cols: usize,
}

impl PatchSpec {
    pub fn new(rows: usize, cols: usize) -> PepoResult<Self> {
        if !(1..=3).contains(&rows) || !(1..=3).contains(&cols) {
            return Err(PepoError::PatchSize { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn n_sites(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major site coordinates.
    fn sites(&self) -> Vec<(isize, isize)> {
        let mut v = Vec::with_capacity(self.n_sites());
        for r in 0..self.rows {
            for c in 0..self.cols {
                v.push((r as isize, c as isize));
            }
        }
        v
    }
}

/// Per-cluster bookkeeping from a PEPO build.
#[derive(Debug, Clone)]
pub struct PepoClusterRecord {
    /// Geometry tag, e.g. `corner(r,d)` or `path4(l,r,r)`.
    pub label: String,
    pub n_sites: usize,
    /// `‖exp − encoded‖_F / ‖exp‖_F` over the cluster's bonds before the
    /// solve.
    pub residual_before: f64,
    /// The same ratio after the solve.
    pub leakage: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PepoBuildReport {
    pub records: Vec<PepoClusterRecord>,
    /// `(sector label, dimension)` in sector order.
    pub sector_dims: Vec<(String, usize)>,
    pub warnings: Vec<String>,
}

impl PepoBuildReport {
    pub fn total_dim(&self) -> usize {
        self.sector_dims.iter().map(|(_, d)| d).sum()
    }
}

/// The uniform cluster-expansion PEPO.
///
/// Blocks are stored sparsely by sector signature `(left, up, right,
/// down)`; `tensor()` assembles the dense six-leg form.  Signatures absent
/// from the map are identically zero.
#[derive(Debug, Clone)]
pub struct ClusterPepo {
    sector_dims: [usize; N_SECTORS],
    blocks: BTreeMap<[usize; 4], DenseTensor>,
    pub t: C64,
    pub h: TwoSiteHamiltonian,
    /// Cluster classes the build attempted, in solve order.
    pub encoded: Vec<ClusterClass>,
}

impl ClusterPepo {
    fn identity(h: &TwoSiteHamiltonian, t: C64) -> Self {
        let d = h.phys_dim;
        let mut id = DenseTensor::zeros(&[1, 1, d, d, 1, 1]);
        for s in 0..d {
            id.set(&[0, 0, s, s, 0, 0], C64::ONE);
        }
        let mut sector_dims = [0usize; N_SECTORS];
        sector_dims[SEC_ID] = 1;
        let mut blocks = BTreeMap::new();
        blocks.insert([SEC_ID; 4], id);
        Self {
            sector_dims,
            blocks,
            t,
            h: h.clone(),
            encoded: Vec::new(),
        }
    }

    pub fn phys_dim(&self) -> usize {
        self.h.phys_dim
    }

    pub fn bond_dim(&self) -> usize {
        self.sector_dims.iter().sum()
    }

    /// The grading seen as cluster levels: the four level-2 slices are
    /// reported as one level.
    pub fn virtual_index(&self) -> GradedIndex {
        let mut level_dims = vec![0usize; 3];
        for (sec, &dim) in self.sector_dims.iter().enumerate() {
            level_dims[SECTOR_LEVELS[sec]] += dim;
        }
        GradedIndex::new(level_dims)
    }

    pub fn sector_dims(&self) -> Vec<(String, usize)> {
        SECTOR_LABELS
            .iter()
            .zip(self.sector_dims.iter())
            .map(|(l, &d)| (l.to_string(), d))
            .collect()
    }

    fn sector_offsets(&self) -> [usize; N_SECTORS] {
        let mut offs = [0usize; N_SECTORS];
        let mut acc = 0;
        for (off, &dim) in offs.iter_mut().zip(self.sector_dims.iter()) {
            *off = acc;
            acc += dim;
        }
        offs
    }

    /// Assembles the dense six-leg tensor `(left, up, out, in, right,
    /// down)` with sectors concatenated in fixed order on every virtual
    /// leg.
    pub fn tensor(&self) -> DenseTensor {
        let d = self.phys_dim();
        let total = self.bond_dim();
        let offs = self.sector_offsets();
        let mut dense = DenseTensor::zeros(&[total, total, d, d, total, total]);
        for (sig, block) in &self.blocks {
            let offsets = [offs[sig[0]], offs[sig[1]], 0, 0, offs[sig[2]], offs[sig[3]]];
            dense
                .assign_block(&offsets, block)
                .expect("block dims match sector dims by construction");
        }
        dense
    }

    /// Writes `content` into the block at `sig`; dimension-0 content is
    /// dropped so zero-rank sectors keep no blocks.
    fn put_block(&mut self, sig: [usize; 4], content: DenseTensor) {
        if content.shape().iter().product::<usize>() == 0 {
            return;
        }
        self.blocks.insert(sig, content);
    }

    /// Places `content` with legs `(w₁, …, w_k, s_fused)` into the block
    /// whose virtual leg `dirs[i]` carries `wᵢ` in sector `secs[i]`; the
    /// remaining virtual legs sit in the identity sector.
    fn place_block(&mut self, dirs: &[Dir], secs: &[usize], content: &DenseTensor) {
        let d = self.phys_dim();
        let k = dirs.len();
        debug_assert_eq!(secs.len(), k);
        debug_assert_eq!(content.rank(), k + 1);
        debug_assert_eq!(content.shape()[k], d * d);
        let mut sig = [SEC_ID; 4];
        let mut virt = [1usize; 4];
        for (i, &dir) in dirs.iter().enumerate() {
            sig[dir.sig_slot()] = secs[i];
            virt[dir.sig_slot()] = content.shape()[i];
        }
        if virt.iter().product::<usize>() == 0 {
            return;
        }
        let mut block = DenseTensor::zeros(&[virt[0], virt[1], d, d, virt[2], virt[3]]);
        let shape = content.shape().to_vec();
        let mut idx = vec![0usize; k + 1];
        loop {
            let mut bidx = [0usize; 6];
            for (i, &dir) in dirs.iter().enumerate() {
                let slot = dir.sig_slot();
                bidx[if slot < 2 { slot } else { slot + 2 }] = idx[i];
            }
            bidx[2] = idx[k] / d;
            bidx[3] = idx[k] % d;
            block.set(&bidx, content.get(&idx));
            let mut axis = k + 1;
            loop {
                if axis == 0 {
                    self.put_block(sig, block);
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

/// A cluster geometry: sites in solve order plus the interaction bonds as
/// ordered site-index pairs `(first, second)`, the left/top factor first.
#[derive(Debug, Clone)]
struct ClusterShape {
    label: String,
    sites: Vec<(isize, isize)>,
    bonds: Vec<(usize, usize)>,
}

impl ClusterShape {
    fn new(label: String, sites: Vec<(isize, isize)>) -> Self {
        let mut bonds = Vec::new();
        for i in 0..sites.len() {
            for j in 0..sites.len() {
                let (ri, ci) = sites[i];
                let (rj, cj) = sites[j];
                if (rj == ri && cj == ci + 1) || (cj == ci && rj == ri + 1) {
                    bonds.push((i, j));
                }
            }
        }
        Self { label, sites, bonds }
    }

    /// Same sites, interactions restricted to the bonds along the given
    /// site sequence.  Used by the bent paths, whose support spans a full
    /// plaquette: the induced fourth bond is dropped from both the
    /// Hamiltonian and the subtraction contraction, which makes the
    /// residual the Möbius weight of the path's bond set.
    fn along_sequence(mut self) -> Self {
        let chain: Vec<(usize, usize)> = (0..self.sites.len() - 1)
            .map(|i| (i, i + 1))
            .collect();
        self.bonds
            .retain(|&(a, b)| chain.contains(&(a, b)) || chain.contains(&(b, a)));
        self
    }

    fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// `Σ h` over the shape's bonds, on the fused space in site order.
    fn hamiltonian(&self, h: &TwoSiteHamiltonian) -> PepoResult<DenseTensor> {
        let n = self.n_sites();
        let dn = h.phys_dim.pow(n as u32);
        let mut acc = DenseTensor::zeros(&[dn, dn]);
        for &(a, b) in &self.bonds {
            acc = acc.add(&embed_pair(h, n, a, b))?;
        }
        Ok(acc)
    }

    /// Bonds induced by the site set but not part of the cluster.
    fn cut_bonds(&self) -> Vec<LatticeBond> {
        let mut cut = Vec::new();
        for i in 0..self.sites.len() {
            for j in 0..self.sites.len() {
                let (ri, ci) = self.sites[i];
                let (rj, cj) = self.sites[j];
                if ((rj == ri && cj == ci + 1) || (cj == ci && rj == ri + 1))
                    && !self.bonds.contains(&(i, j))
                {
                    cut.push((self.sites[i], self.sites[j]));
                }
            }
        }
        cut
    }
}

/// Builder state: the growing operator plus the two-site factors shared by
/// every arm strip.
struct PepoBuilder {
    pepo: ClusterPepo,
    rel_tol: f64,
    /// Two-site split `exp(t·h) − 1 = U·S·V`.
    level1: Option<SvdFactors>,
    report: PepoBuildReport,
}

impl PepoBuilder {
    fn new(h: &TwoSiteHamiltonian, t: C64) -> Self {
        Self {
            pepo: ClusterPepo::identity(h, t),
            rel_tol: 0.0,
            level1: None,
            report: PepoBuildReport::default(),
        }
    }

    /// Pseudo-inverse factors that strip a single-site arm displaced `dir`
    /// from its cluster.  The `U√S` side strips as `U·√S·1`, the `√S·V`
    /// side as `Vᵀ·√S·1`; both are valid singular decompositions, so the
    /// Moore-Penrose inverse is exact.
    fn arm_factors(&self, dir: Dir) -> PepoResult<SvdFactors> {
        let f = self.level1.as_ref().expect("two-site cluster solved first");
        let sqrt_s: Vec<f64> = f.values.iter().map(|s| s.sqrt()).collect();
        let r = f.values.len();
        let left = if arm_is_u_side(dir) {
            f.left.clone()
        } else {
            f.right.permute(&[1, 0])?
        };
        Ok(SvdFactors::from_parts(
            left,
            sqrt_s,
            DenseTensor::identity(r),
        )?)
    }

    /// Replaces the fused physical leg `leg` of `w` by the virtual index of
    /// the arm sitting there, applying the arm's pseudo-inverse.
    fn strip_leg(&self, w: &DenseTensor, leg: usize, dir: Dir) -> PepoResult<DenseTensor> {
        let fac = self.arm_factors(dir)?;
        let rank = w.rank();
        let mut axes: Vec<usize> = Vec::with_capacity(rank);
        axes.push(leg);
        axes.extend((0..rank).filter(|&a| a != leg));
        let fronted = w.permute(&axes)?;
        let d2 = fronted.shape()[0];
        let rest: usize = fronted.shape()[1..].iter().product();
        let mut rest_shape = fronted.shape()[1..].to_vec();
        let stripped =
            apply_pseudo_inverse(&fac, PinvSide::Left, &fronted.reshape(&[d2, rest])?)?;
        rest_shape.insert(0, stripped.shape()[0]);
        let stripped = stripped.reshape(&rest_shape)?;
        let mut inverse = vec![0usize; rank];
        for (new_pos, &old_pos) in axes.iter().enumerate() {
            inverse[old_pos] = new_pos;
        }
        Ok(stripped.permute(&inverse)?)
    }

    /// `exp(t·H_shape) − (already-encoded content)` in site-fused form plus
    /// the relative residual.
    fn residual(&self, shape: &ClusterShape) -> PepoResult<(DenseTensor, f64)> {
        let d = self.pepo.phys_dim();
        let n = shape.n_sites();
        let exp = matrix_exponential(&shape.hamiltonian(&self.pepo.h)?, self.pepo.t)?;
        let encoded = contract_sites(&self.pepo, &shape.sites, &shape.cut_bonds())?;
        let diff = exp.sub(&encoded)?;
        let ratio = diff.frobenius_norm() / exp.frobenius_norm();
        Ok((matrix_to_site_fused(&diff, d, n), ratio))
    }

    /// Re-contracts the shape and records the `(before, after)` residual
    /// pair; leakage above the hard threshold aborts the build.
    fn record(&mut self, shape: &ClusterShape, residual_before: f64) -> PepoResult<()> {
        let exp = matrix_exponential(&shape.hamiltonian(&self.pepo.h)?, self.pepo.t)?;
        let encoded = contract_sites(&self.pepo, &shape.sites, &shape.cut_bonds())?;
        let leakage = exp.sub(&encoded)?.frobenius_norm() / exp.frobenius_norm();
        if leakage > LEAKAGE_FAIL {
            return Err(PepoError::Leakage {
                label: shape.label.clone(),
                leakage,
            });
        }
        if leakage > LEAKAGE_WARN {
            self.report.warnings.push(format!(
                "cluster {}: leakage {leakage:.3e} above {LEAKAGE_WARN:.0e}",
                shape.label
            ));
        }
        self.report.records.push(PepoClusterRecord {
            label: shape.label.clone(),
            n_sites: shape.n_sites(),
            residual_before,
            leakage,
        });
        Ok(())
    }

    fn record_skipped(&mut self, shape: &ClusterShape, ratio: f64) {
        self.report.records.push(PepoClusterRecord {
            label: shape.label.clone(),
            n_sites: shape.n_sites(),
            residual_before: ratio,
            leakage: ratio,
        });
    }

    /// Scales the columns of `left` and the rows of `right` by `√S`.
    fn absorb_sqrt(f: &SvdFactors) -> (DenseTensor, DenseTensor) {
        let (m, r) = (f.left.shape()[0], f.rank());
        let n = f.right.shape()[1];
        let mut u_half = f.left.clone();
        let mut v_half = f.right.clone();
        for k in 0..r {
            let s = f.values[k].sqrt();
            for i in 0..m {
                let v = u_half.get(&[i, k]) * s;
                u_half.set(&[i, k], v);
            }
            for j in 0..n {
                let v = v_half.get(&[k, j]) * s;
                v_half.set(&[k, j], v);
            }
        }
        (u_half, v_half)
    }

    /// Two-site clusters: one SVD of `exp(t·h) − 1` at the bond, `U√S` on
    /// the left/top site and `√S·V` on the right/bottom one.
    fn solve_two_site(&mut self) -> PepoResult<()> {
        let d = self.pepo.phys_dim();
        let shape_h = ClusterShape::new("bond(h)".into(), vec![(0, 0), (0, 1)]);
        let shape_v = ClusterShape::new("bond(v)".into(), vec![(0, 0), (1, 0)]);
        let (w, ratio) = self.residual(&shape_h)?;
        if ratio <= NOISE_FLOOR {
            self.level1 = Some(SvdFactors::from_parts(
                DenseTensor::zeros(&[d * d, 0]),
                Vec::new(),
                DenseTensor::zeros(&[0, d * d]),
            )?);
            self.record_skipped(&shape_h, ratio);
            self.record_skipped(&shape_v, ratio);
            return Ok(());
        }
        let f = svd_truncated(&w.reshape(&[d * d, d * d])?, self.rel_tol)?;
        self.pepo.sector_dims[SEC_L1] = f.rank();
        let (u_half, v_half) = Self::absorb_sqrt(&f);
        let u_content = u_half.permute(&[1, 0])?;
        self.pepo.place_block(&[Dir::Right], &[SEC_L1], &u_content);
        self.pepo.place_block(&[Dir::Down], &[SEC_L1], &u_content);
        self.pepo.place_block(&[Dir::Left], &[SEC_L1], &v_half);
        self.pepo.place_block(&[Dir::Up], &[SEC_L1], &v_half);
        self.level1 = Some(f);
        self.record(&shape_h, ratio)?;
        self.record(&shape_v, ratio)
    }

    /// Star-shaped cluster: a centre with single-site arms along
    /// `arm_dirs`.  Strips every arm and deposits the core in the block
    /// whose legs point along the arms.
    fn solve_star(&mut self, arm_dirs: &[Dir]) -> PepoResult<()> {
        let k = arm_dirs.len();
        let mut sites: Vec<(isize, isize)> = arm_dirs.iter().map(|d| d.offset()).collect();
        sites.push((0, 0));
        let tag = match k {
            2 => {
                let (a, b) = (arm_dirs[0].offset(), arm_dirs[1].offset());
                if a.0 == b.0 || a.1 == b.1 {
                    "path3"
                } else {
                    "corner"
                }
            }
            3 => "tee",
            _ => "cross",
        };
        let label = format!(
            "{tag}({})",
            arm_dirs
                .iter()
                .map(|d| d.label())
                .collect::<Vec<_>>()
                .join(",")
        );
        let shape = ClusterShape::new(label, sites);
        let (mut w, ratio) = self.residual(&shape)?;
        if ratio <= NOISE_FLOOR {
            self.record_skipped(&shape, ratio);
            return Ok(());
        }
        for (leg, &dir) in arm_dirs.iter().enumerate() {
            w = self.strip_leg(&w, leg, dir)?;
        }
        // w legs: (α₁, …, α_k, s_centre)
        self.pepo.place_block(arm_dirs, &vec![SEC_L1; k], &w);
        self.record(&shape, ratio)
    }

    /// All four-site paths at once.  The straight horizontal path's weight
    /// is split by one SVD at the central bond; every geometry reuses
    /// those halves with its own arm strips.  Geometries that share a
    /// block signature share the strip that produced it, so the shared
    /// factors keep every placement consistent.
    fn solve_four_site_paths(&mut self) -> PepoResult<()> {
        let d = self.pepo.phys_dim();
        let d2 = d * d;
        // catalogue: middle bond right- or downward, arms on either end
        let mut shapes: Vec<ClusterShape> = Vec::new();
        for &(mid, b, c) in &[
            (Dir::Right, (0isize, 0isize), (0isize, 1isize)),
            (Dir::Down, (0, 0), (1, 0)),
        ] {
            let back = match mid {
                Dir::Right => Dir::Left,
                _ => Dir::Up,
            };
            for &da in DIRS.iter().filter(|&&x| x != mid) {
                for &dd in DIRS.iter().filter(|&&x| x != back) {
                    let a = (b.0 + da.offset().0, b.1 + da.offset().1);
                    let e = (c.0 + dd.offset().0, c.1 + dd.offset().1);
                    let label =
                        format!("path4({},{},{})", da.label(), mid.label(), dd.label());
                    shapes
                        .push(ClusterShape::new(label, vec![a, b, c, e]).along_sequence());
                }
            }
        }
        let reference = ClusterShape::new(
            "path4(l,r,r)".into(),
            vec![(0, -1), (0, 0), (0, 1), (0, 2)],
        );
        let (w, ratio) = self.residual(&reference)?;
        if ratio <= NOISE_FLOOR {
            for shape in &shapes {
                let (_, r) = self.residual(shape)?;
                self.record_skipped(shape, r);
            }
            return Ok(());
        }
        let f = svd_truncated(&w.reshape(&[d2 * d2, d2 * d2])?, self.rel_tol)?;
        let p2 = f.rank();
        self.pepo.sector_dims[SEC_PATH] = p2;
        let (l_half, r_half) = Self::absorb_sqrt(&f);
        let l_half = l_half.reshape(&[d2, d2, p2])?;
        let r_half = r_half.reshape(&[p2, d2, d2])?;
        for &(mid, back) in &[(Dir::Right, Dir::Left), (Dir::Down, Dir::Up)] {
            // first middle site: strip the a-arm from L[s_a, s_b, p],
            // content (α, p, s_b) on (arm dir, middle dir)
            for &da in DIRS.iter().filter(|&&x| x != mid) {
                let b = self.strip_leg(&l_half, 0, da)?;
                self.pepo.place_block(
                    &[da, mid],
                    &[SEC_L1, SEC_PATH],
                    &b.permute(&[0, 2, 1])?,
                );
            }
            // second middle site: strip the d-arm from R[p, s_c, s_d]
            for &dd in DIRS.iter().filter(|&&x| x != back) {
                let c = self.strip_leg(&r_half, 2, dd)?;
                self.pepo.place_block(
                    &[back, dd],
                    &[SEC_PATH, SEC_L1],
                    &c.permute(&[0, 2, 1])?,
                );
            }
        }
        for shape in &shapes {
            let before = self.moebius_ratio(shape)?;
            self.record(shape, before)?;
        }
        Ok(())
    }

    /// `‖W‖_F / ‖exp‖_F` where `W` is the inclusion-exclusion weight of the
    /// shape's bond set: the part of the exponential not attributable to
    /// any sub-cluster.  Equals the pre-solve residual, recomputed here
    /// because the shape's own blocks are already in place.
    fn moebius_ratio(&self, shape: &ClusterShape) -> PepoResult<f64> {
        let n = shape.n_sites();
        let d = self.pepo.phys_dim();
        let dn = d.pow(n as u32);
        let nb = shape.bonds.len();
        let mut acc = DenseTensor::zeros(&[dn, dn]);
        let mut exp_norm = 1.0;
        for mask in 0..(1u32 << nb) {
            let mut hpart = DenseTensor::zeros(&[dn, dn]);
            for (i, &(a, b)) in shape.bonds.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    hpart = hpart.add(&embed_pair(&self.pepo.h, n, a, b))?;
                }
            }
            let term = matrix_exponential(&hpart, self.pepo.t)?;
            if mask == (1 << nb) - 1 {
                exp_norm = term.frobenius_norm();
            }
            let sign = if (nb - mask.count_ones() as usize).is_multiple_of(2) {
                C64::ONE
            } else {
                -C64::ONE
            };
            acc = acc.add(&term.scaled(sign))?;
        }
        Ok(acc.frobenius_norm() / exp_norm)
    }

    /// The 2×2 plaquette ring, factored by two sequential SVDs: the column
    /// cut routes `κ` over the top bond, then each column splits between
    /// its sites, routing `μ`/`ν` down the vertical bonds.
    fn solve_plaquette(&mut self) -> PepoResult<()> {
        let d = self.pepo.phys_dim();
        let d2 = d * d;
        // site order (TL, BL, TR, BR): the column cut is a plain reshape
        let shape =
            ClusterShape::new("plaquette".into(), vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let (w, ratio) = self.residual(&shape)?;
        if ratio <= NOISE_FLOOR {
            self.record_skipped(&shape, ratio);
            return Ok(());
        }
        let f = svd_truncated(&w.reshape(&[d2 * d2, d2 * d2])?, self.rel_tol)?;
        let kappa = f.rank();
        let (a_half, b_half) = Self::absorb_sqrt(&f);
        // left column: A[s_TL, s_BL, κ] → (s_TL, κ) × s_BL
        let a = a_half
            .reshape(&[d2, d2, kappa])?
            .permute(&[0, 2, 1])?
            .reshape(&[d2 * kappa, d2])?;
        let fa = svd_truncated(&a, self.rel_tol)?;
        let mu = fa.rank();
        let (tl, bl) = Self::absorb_sqrt(&fa);
        // right column: B[κ, s_TR, s_BR] → (κ, s_TR) × s_BR
        let b = b_half.reshape(&[kappa * d2, d2])?;
        let fb = svd_truncated(&b, self.rel_tol)?;
        let nu = fb.rank();
        let (tr, br) = Self::absorb_sqrt(&fb);
        self.pepo.sector_dims[SEC_RING_TOP] = kappa;
        self.pepo.sector_dims[SEC_RING_LEFT] = mu;
        self.pepo.sector_dims[SEC_RING_RIGHT] = nu;
        let tl = tl.reshape(&[d2, kappa, mu])?.permute(&[1, 2, 0])?;
        self.pepo
            .place_block(&[Dir::Right, Dir::Down], &[SEC_RING_TOP, SEC_RING_LEFT], &tl);
        self.pepo.place_block(&[Dir::Up], &[SEC_RING_LEFT], &bl);
        let tr = tr.reshape(&[kappa, d2, nu])?.permute(&[0, 2, 1])?;
        self.pepo
            .place_block(&[Dir::Left, Dir::Down], &[SEC_RING_TOP, SEC_RING_RIGHT], &tr);
        self.pepo.place_block(&[Dir::Up], &[SEC_RING_RIGHT], &br);
        self.record(&shape, ratio)
    }
}

/// Builds the cluster-expansion PEPO.
///
/// `t` is the full complex prefactor of the exponent, as in the 1D build:
/// `−i·dt` for real time, `−τ` for imaginary.  With `include_plaquette`
/// the 2×2 loop is encoded exactly; without it the loop term is the
/// leading error of any patch containing a plaquette.
pub fn build_pepo(
    h: &TwoSiteHamiltonian,
    t: C64,
    rel_tol: f64,
    include_plaquette: bool,
) -> PepoResult<(ClusterPepo, PepoBuildReport)> {
    if !(2..=3).contains(&h.phys_dim) {
        return Err(PepoError::PhysDim(h.phys_dim));
    }
    let mut builder = PepoBuilder::new(h, t);
    builder.rel_tol = rel_tol;
    builder.pepo.encoded.push(ClusterClass::TwoSite);
    builder.solve_two_site()?;
    builder.pepo.encoded.push(ClusterClass::ThreeSite);
    for (i, &a) in DIRS.iter().enumerate() {
        for &b in &DIRS[i + 1..] {
            builder.solve_star(&[a, b])?;
        }
    }
    builder.pepo.encoded.push(ClusterClass::FourSiteTree);
    for skip in (0..4).rev() {
        let arms: Vec<Dir> = (0..4).filter(|&i| i != skip).map(|i| DIRS[i]).collect();
        builder.solve_star(&arms)?;
    }
    builder.pepo.encoded.push(ClusterClass::FourSitePath);
    builder.solve_four_site_paths()?;
    builder.pepo.encoded.push(ClusterClass::FiveSiteCross);
    builder.solve_star(&DIRS)?;
    if include_plaquette {
        builder.pepo.encoded.push(ClusterClass::Plaquette);
        builder.solve_plaquette()?;
    }
    builder.report.sector_dims = builder.pepo.sector_dims();
    let PepoBuilder { pepo, report, .. } = builder;
    Ok((pepo, report))
}

/// Contracts one PEPO tensor per listed site, connecting every induced
/// lattice bond except the `cut` ones and closing all remaining virtual
/// legs on the identity sector.  Returns the operator over the fused
/// physical space in the order the sites were given.
///
/// Blocks grouped by the sectors of their (left, up) legs, the two a
/// row-major sweep enters through.
type BlocksByEntrySectors<'a> = BTreeMap<(usize, usize), Vec<(&'a [usize; 4], &'a DenseTensor)>>;

/// Sites are absorbed row-major.  The set of bonds dangling from the
/// processed region is fixed by the geometry, so a partial contraction is
/// classified by the sector carried on each dangling bond; partials that
/// agree on that sector assignment are summed before the sweep continues,
/// which keeps the state count bounded by the assignments the blocks can
/// realise instead of the number of block-choice paths.
pub(crate) fn contract_sites(
    pepo: &ClusterPepo,
    sites: &[(isize, isize)],
    cut: &[LatticeBond],
) -> PepoResult<DenseTensor> {
    let d = pepo.phys_dim();
    let d2 = d * d;
    let n = sites.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| sites[i]);
    let index_of: BTreeMap<(isize, isize), usize> =
        sites.iter().copied().zip(0..n).collect();
    if index_of.len() != n {
        return Err(KernelError::ShapeMismatch("duplicate site in patch".into()).into());
    }
    let is_cut = |a: (isize, isize), b: (isize, isize)| {
        cut.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
    };

    // live bonds and neighbour indices per site, slots (l, u, r, d)
    let mut live = vec![[false; 4]; n];
    let mut neighbour = vec![[usize::MAX; 4]; n];
    for (i, &(r, c)) in sites.iter().enumerate() {
        for dir in DIRS {
            let (dr, dc) = dir.offset();
            if let Some(&j) = index_of.get(&(r + dr, c + dc)) {
                if !is_cut((r, c), (r + dr, c + dc)) {
                    live[i][dir.sig_slot()] = true;
                    neighbour[i][dir.sig_slot()] = j;
                }
            }
        }
    }
    let mut by_req: BlocksByEntrySectors = BTreeMap::new();
    for (sig, block) in pepo.blocks.iter() {
        by_req.entry((sig[0], sig[1])).or_default().push((sig, block));
    }

    // a state maps the dangling bonds, in list order, to their sectors; its
    // partial tensor carries the fused physical legs of the processed sites
    // followed by one leg per dangling bond in the same order
    let mut pending: Vec<(usize, Dir)> = Vec::new();
    let mut states: BTreeMap<Vec<usize>, DenseTensor> = BTreeMap::new();
    states.insert(Vec::new(), DenseTensor::from_vec(&[], vec![C64::ONE])?);
    for (step, &site) in order.iter().enumerate() {
        let lv = live[site];
        let pos_left = pending
            .iter()
            .position(|&(t, e)| t == site && e == Dir::Left);
        let pos_up = pending.iter().position(|&(t, e)| t == site && e == Dir::Up);
        debug_assert_eq!(lv[Dir::Left.sig_slot()], pos_left.is_some());
        debug_assert_eq!(lv[Dir::Up.sig_slot()], pos_up.is_some());
        let survivors: Vec<usize> = (0..pending.len())
            .filter(|&k| Some(k) != pos_left && Some(k) != pos_up)
            .collect();
        let ns = survivors.len();
        let mut next: BTreeMap<Vec<usize>, DenseTensor> = BTreeMap::new();
        for (sectors, partial) in states.iter() {
            let req = (
                pos_left.map_or(SEC_ID, |k| sectors[k]),
                pos_up.map_or(SEC_ID, |k| sectors[k]),
            );
            let Some(candidates) = by_req.get(&req) else {
                continue;
            };
            for &(sig, block) in candidates {
                if (!lv[2] && sig[2] != SEC_ID) || (!lv[3] && sig[3] != SEC_ID) {
                    continue;
                }
                // squeeze to live legs only: [l?, u?, s, r?, d?]
                let mut b = block.reshape(&[
                    block.shape()[0],
                    block.shape()[1],
                    block.shape()[2] * block.shape()[3],
                    block.shape()[4],
                    block.shape()[5],
                ])?;
                if !lv[3] {
                    b = b.take_index(4, 0)?;
                }
                if !lv[2] {
                    b = b.take_index(3, 0)?;
                }
                if pos_up.is_none() {
                    b = b.take_index(1, 0)?;
                }
                if pos_left.is_none() {
                    b = b.take_index(0, 0)?;
                }
                let keep_l = pos_left.is_some() as usize;
                let mut pairs: Vec<(usize, usize)> = Vec::new();
                if let Some(k) = pos_left {
                    pairs.push((step + k, 0));
                }
                if let Some(k) = pos_up {
                    pairs.push((step + k, keep_l));
                }
                let merged = contract(partial, &b, &pairs)?;
                // merged legs: phys 0..step, surviving pendings, then the
                // block's kept legs (s, r?, d?); bring s next to the phys
                let mut axes: Vec<usize> = (0..step).collect();
                axes.push(step + ns);
                axes.extend(step..step + ns);
                if lv[2] {
                    axes.push(step + ns + 1);
                }
                if lv[3] {
                    axes.push(step + ns + 1 + lv[2] as usize);
                }
                let rearranged = merged.permute(&axes)?;
                let mut key: Vec<usize> =
                    survivors.iter().map(|&k| sectors[k]).collect();
                if lv[2] {
                    key.push(sig[2]);
                }
                if lv[3] {
                    key.push(sig[3]);
                }
                match next.entry(key) {
                    Entry::Occupied(mut e) => {
                        let sum = e.get().add(&rearranged)?;
                        e.insert(sum);
                    }
                    Entry::Vacant(e) => {
                        e.insert(rearranged);
                    }
                }
            }
        }
        pending = survivors.iter().map(|&k| pending[k]).collect();
        if lv[2] {
            pending.push((neighbour[site][2], Dir::Left));
        }
        if lv[3] {
            pending.push((neighbour[site][3], Dir::Up));
        }
        states = next;
    }
    // every bond is closed by now, so only the empty assignment can remain
    let acc = states
        .remove(&Vec::new())
        .unwrap_or(DenseTensor::zeros(&vec![d2; n]));
    debug_assert!(states.is_empty());
    // legs currently follow processing order; restore the caller's
    let mut perm = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        perm[i] = p;
    }
    let fused = acc.permute(&perm)?;
    Ok(site_fused_to_matrix(&fused, d, n))
}

/// Contracts the PEPO over an open rectangular patch, row-major site
/// order, boundary legs closed on the identity sector.
pub fn contract_patch(pepo: &ClusterPepo, patch: &PatchSpec) -> PepoResult<DenseTensor> {
    contract_sites(pepo, &patch.sites(), &[])
}

/// `Σ h` over the patch's bonds in row-major site order.
pub fn patch_hamiltonian(
    h: &TwoSiteHamiltonian,
    patch: &PatchSpec,
) -> PepoResult<DenseTensor> {
    ClusterShape::new("patch".into(), patch.sites()).hamiltonian(h)
}

/// Least-squares slope of `log ‖patch − exp‖_F` against `log dt` for
/// real-time builds over `dt_list`.
///
/// Points at or below the noise floor are dropped; a patch the operator
/// encodes exactly leaves nothing to fit and `NoiseFloor` is returned to
/// report the exactness.
pub fn patch_error_order(
    h: &TwoSiteHamiltonian,
    patch: &PatchSpec,
    dt_list: &[f64],
    rel_tol: f64,
    include_plaquette: bool,
) -> PepoResult<f64> {
    let hp = patch_hamiltonian(h, patch)?;
    let errors: Vec<(f64, f64)> = dt_list
        .par_iter()
        .map(|&dt| {
            let t = C64::new(0.0, -dt);
            let (pepo, _) = build_pepo(h, t, rel_tol, include_plaquette)?;
            let exact = matrix_exponential(&hp, t)?;
            let err = contract_patch(&pepo, patch)?.sub(&exact)?.frobenius_norm();
            Ok((dt, err))
        })
        .collect::<PepoResult<_>>()?;
    slope_above_noise(&errors).map_err(|e| match e {
        MpoError::NoiseFloor { max_error } => PepoError::NoiseFloor { max_error },
        other => PepoError::BadFile {
            path: String::new(),
            reason: other.to_string(),
        },
    })
}

impl ClusterPepo {
    /// Writes the operator to a binary file: header `(d, flags, t,
    /// sector_dims)` then the dense six-leg tensor entries in canonical
    /// layout, all little-endian.
    pub fn save(&self, path: &Path) -> PepoResult<()> {
        let mut f = std::fs::File::create(path)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend((self.phys_dim() as u32).to_le_bytes());
        let flags = self.encoded.contains(&ClusterClass::Plaquette) as u32;
        buf.extend(flags.to_le_bytes());
        buf.extend(self.t.re.to_le_bytes());
        buf.extend(self.t.im.to_le_bytes());
        buf.extend((N_SECTORS as u32).to_le_bytes());
        for &dim in &self.sector_dims {
            buf.extend((dim as u32).to_le_bytes());
        }
        for z in self.tensor().data() {
            buf.extend(z.re.to_le_bytes());
            buf.extend(z.im.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads an operator written by `save`.  The caller supplies the
    /// model; two-site exactness is re-verified so a corrupted or
    /// mismatched file fails here rather than inside a contraction.
    pub fn load(path: &Path, h: &TwoSiteHamiltonian) -> PepoResult<Self> {
        let bad = |reason: &str| PepoError::BadFile {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> PepoResult<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated header"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let read_f64 = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
        let d = read_u32(take(4)?);
        let flags = read_u32(take(4)?);
        let t = C64::new(read_f64(take(8)?), read_f64(take(8)?));
        let n_sectors = read_u32(take(4)?);
        if d != h.phys_dim {
            return Err(bad(&format!(
                "physical dimension {d} does not match the supplied model ({})",
                h.phys_dim
            )));
        }
        if n_sectors != N_SECTORS {
            return Err(bad("unexpected sector count"));
        }
        let mut sector_dims = [0usize; N_SECTORS];
        for dim in sector_dims.iter_mut() {
            *dim = read_u32(take(4)?);
        }
        if sector_dims[SEC_ID] != 1 {
            return Err(bad("identity sector must have dimension 1"));
        }
        let total: usize = sector_dims.iter().sum();
        let want = total * total * d * d * total * total;
        let mut data = Vec::with_capacity(want);
        for _ in 0..want {
            let re = read_f64(take(8)?);
            let im = read_f64(take(8)?);
            data.push(C64::new(re, im));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor entries"));
        }
        let dense = DenseTensor::from_vec(&[total, total, d, d, total, total], data)?;
        let mut encoded = vec![
            ClusterClass::TwoSite,
            ClusterClass::ThreeSite,
            ClusterClass::FourSiteTree,
            ClusterClass::FourSitePath,
            ClusterClass::FiveSiteCross,
        ];
        if flags & 1 != 0 {
            encoded.push(ClusterClass::Plaquette);
        }
        let mut pepo = ClusterPepo {
            sector_dims,
            blocks: BTreeMap::new(),
            t,
            h: h.clone(),
            encoded,
        };
        // re-sparsify: slice every sector combination, keep the non-zero
        let offs = pepo.sector_offsets();
        for sl in 0..N_SECTORS {
            for su in 0..N_SECTORS {
                for sr in 0..N_SECTORS {
                    for sd in 0..N_SECTORS {
                        let dims = [
                            sector_dims[sl],
                            sector_dims[su],
                            sector_dims[sr],
                            sector_dims[sd],
                        ];
                        if dims.contains(&0) {
                            continue;
                        }
                        let block = dense.slice_block(
                            &[offs[sl], offs[su], 0, 0, offs[sr], offs[sd]],
                            &[dims[0], dims[1], d, d, dims[2], dims[3]],
                        )?;
                        if block.frobenius_norm() > 0.0 {
                            pepo.blocks.insert([sl, su, sr, sd], block);
                        }
                    }
                }
            }
        }
        let patch = PatchSpec::new(1, 2)?;
        let exact = matrix_exponential(&patch_hamiltonian(h, &patch)?, t)?;
        let dist = contract_patch(&pepo, &patch)?.sub(&exact)?.frobenius_norm()
            / exact.frobenius_norm();
        if dist > 1e-10 {
            return Err(PepoError::CorruptOperator(dist));
        }
        Ok(pepo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{total_sz, xxz_term};
    use crate::mpo::{build, contract_open_chain};
    use tempfile::tempdir;

    fn rel_dist(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    fn xxz_pepo(t: C64, plaquette: bool) -> (ClusterPepo, PepoBuildReport) {
        build_pepo(&xxz_term(0.5), t, 1e-12, plaquette).unwrap()
    }

    #[test]
    fn zero_time_build_is_the_identity_pepo() {
        let (pepo, report) = xxz_pepo(C64::ZERO, true);
        assert_eq!(pepo.bond_dim(), 1);
        assert_eq!(report.total_dim(), 1);
        let patch = PatchSpec::new(2, 2).unwrap();
        let op = contract_patch(&pepo, &patch).unwrap();
        assert!(rel_dist(&op, &DenseTensor::identity(16)) < 1e-14);
    }

    #[test]
    fn all_identity_block_is_the_physical_identity() {
        let (pepo, _) = xxz_pepo(C64::new(0.0, -0.4), true);
        let block = &pepo.blocks[&[SEC_ID; 4]];
        let d = pepo.phys_dim();
        for s_out in 0..d {
            for s_in in 0..d {
                let want = if s_out == s_in { C64::ONE } else { C64::ZERO };
                assert_eq!(block.get(&[0, 0, s_out, s_in, 0, 0]), want);
            }
        }
    }

    #[test]
    fn single_site_patch_is_the_identity() {
        let (pepo, _) = xxz_pepo(C64::new(0.0, -0.7), true);
        let patch = PatchSpec::new(1, 1).unwrap();
        let op = contract_patch(&pepo, &patch).unwrap();
        assert!(rel_dist(&op, &DenseTensor::identity(2)) < 1e-14);
    }

    #[test]
    fn single_bond_patches_reproduce_the_exponential() {
        let h = xxz_term(0.5);
        let t = C64::new(0.0, -0.3);
        let (pepo, _) = build_pepo(&h, t, 1e-12, false).unwrap();
        let exact = matrix_exponential(&h.term, t).unwrap();
        for (rows, cols) in [(1, 2), (2, 1)] {
            let patch = PatchSpec::new(rows, cols).unwrap();
            let op = contract_patch(&pepo, &patch).unwrap();
            assert!(
                rel_dist(&op, &exact) < 1e-10,
                "{rows}×{cols} differs by {:.3e}",
                rel_dist(&op, &exact)
            );
        }
    }

    #[test]
    fn line_patches_match_the_1d_operator() {
        let h = xxz_term(0.5);
        let t = C64::new(0.0, -0.4);
        let (pepo, _) = build_pepo(&h, t, 1e-12, false).unwrap();
        let (mpo, _) = build(&h, t, 3, 1e-12).unwrap();
        let chain = contract_open_chain(&mpo, 3).unwrap();
        for (rows, cols) in [(1, 3), (3, 1)] {
            let patch = PatchSpec::new(rows, cols).unwrap();
            let op = contract_patch(&pepo, &patch).unwrap();
            assert!(
                rel_dist(&op, &chain) < 1e-10,
                "{rows}×{cols} differs from the chain by {:.3e}",
                rel_dist(&op, &chain)
            );
        }
    }

    #[test]
    fn plaquette_patch_is_exact_with_the_loop_encoded() {
        let h = xxz_term(0.5);
        for t in [C64::new(0.0, -0.5), C64::new(-0.35, 0.0)] {
            let (pepo, _) = build_pepo(&h, t, 1e-12, true).unwrap();
            let patch = PatchSpec::new(2, 2).unwrap();
            let exact =
                matrix_exponential(&patch_hamiltonian(&h, &patch).unwrap(), t).unwrap();
            let op = contract_patch(&pepo, &patch).unwrap();
            assert!(
                rel_dist(&op, &exact) < 1e-10,
                "t = {t}: {:.3e}",
                rel_dist(&op, &exact)
            );
        }
    }

    #[test]
    fn the_loop_blocks_add_exactly_the_missing_weight() {
        let h = xxz_term(0.5);
        let t = C64::new(0.0, -0.4);
        let (bare, _) = build_pepo(&h, t, 1e-12, false).unwrap();
        let (full, _) = build_pepo(&h, t, 1e-12, true).unwrap();
        let patch = PatchSpec::new(2, 2).unwrap();
        let exact = matrix_exponential(&patch_hamiltonian(&h, &patch).unwrap(), t).unwrap();
        let open = contract_patch(&bare, &patch).unwrap();
        let missing = exact.sub(&open).unwrap();
        assert!(
            missing.frobenius_norm() > 1e-6,
            "loop term unexpectedly small: {:.3e}",
            missing.frobenius_norm()
        );
        let added = contract_patch(&full, &patch).unwrap().sub(&open).unwrap();
        assert!(
            added.sub(&missing).unwrap().frobenius_norm()
                < 1e-8 * missing.frobenius_norm(),
            "ring blocks added {:.6e}, patch misses {:.6e}",
            added.frobenius_norm(),
            missing.frobenius_norm()
        );
        // ring sectors need the full square, so loop-free patches are blind
        // to them and the two builds agree there identically
        let line = PatchSpec::new(1, 3).unwrap();
        assert!(
            rel_dist(
                &contract_patch(&full, &line).unwrap(),
                &contract_patch(&bare, &line).unwrap()
            ) < 1e-14
        );
    }

    #[test]
    fn every_solve_leaves_leakage_at_rounding_scale() {
        let (_, report) = xxz_pepo(C64::new(0.0, -0.5), true);
        assert_eq!(report.records.len(), 32);
        for rec in &report.records {
            assert!(
                rec.leakage < 1e-10,
                "cluster {} leaks {:.3e}",
                rec.label,
                rec.leakage
            );
        }
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn reported_sector_dims_match_the_operator() {
        let (pepo, report) = xxz_pepo(C64::new(0.0, -0.5), true);
        assert_eq!(report.sector_dims, pepo.sector_dims());
        assert_eq!(report.total_dim(), pepo.bond_dim());
        let levels = pepo.virtual_index();
        assert_eq!(levels.dim(0), 1);
        assert_eq!(levels.dim(1), 4);
        assert_eq!(levels.total(), pepo.bond_dim());
    }

    #[test]
    fn patch_reflection_invariance_both_axes() {
        let h = xxz_term(0.5);
        let t = C64::new(0.0, -0.45);
        let (pepo, _) = build_pepo(&h, t, 1e-12, true).unwrap();
        let patch = PatchSpec::new(2, 3).unwrap();
        let op = contract_patch(&pepo, &patch).unwrap();
        let fused = matrix_to_site_fused(&op, 2, 6);
        // site (r,c) at row-major index r·3+c
        let horizontal: Vec<usize> = (0..6).map(|i| (i / 3) * 3 + (2 - i % 3)).collect();
        let vertical: Vec<usize> = (0..6).map(|i| (1 - i / 3) * 3 + i % 3).collect();
        for axes in [horizontal, vertical] {
            let mirrored = site_fused_to_matrix(&fused.permute(&axes).unwrap(), 2, 6);
            assert!(rel_dist(&mirrored, &op) < 1e-10);
        }
    }

    #[test]
    fn imaginary_time_patch_is_hermitian() {
        let h = xxz_term(0.5);
        let (pepo, _) = build_pepo(&h, C64::new(-0.35, 0.0), 1e-12, true).unwrap();
        let patch = PatchSpec::new(2, 2).unwrap();
        let op = contract_patch(&pepo, &patch).unwrap();
        assert!(rel_dist(&op.adjoint().unwrap(), &op) < 1e-10);
    }

    #[test]
    fn patch_commutes_with_total_magnetisation() {
        let h = xxz_term(0.5);
        let (pepo, _) = build_pepo(&h, C64::new(0.0, -0.5), 1e-12, true).unwrap();
        let patch = PatchSpec::new(2, 2).unwrap();
        let op = contract_patch(&pepo, &patch).unwrap();
        let sz = total_sz(4);
        let lhs = contract(&op, &sz, &[(1, 0)]).unwrap();
        let rhs = contract(&sz, &op, &[(1, 0)]).unwrap();
        assert!(lhs.sub(&rhs).unwrap().frobenius_norm() / op.frobenius_norm() < 1e-10);
    }

    #[test]
    fn plaquette_free_patch_error_scales_at_fourth_order() {
        let h = xxz_term(0.5);
        let patch = PatchSpec::new(2, 2).unwrap();
        let slope =
            patch_error_order(&h, &patch, &[0.05, 0.08, 0.12, 0.2, 0.3], 1e-12, false)
                .unwrap();
        assert!(
            (slope - 4.0).abs() < 0.2,
            "2×2 slope without the loop: {slope:.3}"
        );
    }

    #[test]
    fn encoded_plaquette_reports_exactness() {
        let h = xxz_term(0.5);
        let patch = PatchSpec::new(2, 2).unwrap();
        let res = patch_error_order(&h, &patch, &[0.05, 0.1, 0.2], 1e-12, true);
        match res {
            Err(PepoError::NoiseFloor { max_error }) => assert!(max_error <= 1e-10),
            other => panic!("expected the exactness report, got {other:?}"),
        }
    }

    #[test]
    fn two_by_three_patch_scales_at_fourth_order() {
        let h = xxz_term(0.5);
        let patch = PatchSpec::new(2, 3).unwrap();
        let slope =
            patch_error_order(&h, &patch, &[0.05, 0.08, 0.12, 0.2, 0.3], 1e-12, true)
                .unwrap();
        assert!(slope >= 4.0 - 0.2, "2×3 slope with the loop: {slope:.3}");
    }

    #[test]
    fn three_by_three_patch_stays_within_the_expected_order() {
        let h = xxz_term(0.5);
        let t = C64::new(0.0, -0.1);
        let (pepo, _) = build_pepo(&h, t, 1e-12, true).unwrap();
        let patch = PatchSpec::new(3, 3).unwrap();
        let exact = matrix_exponential(&patch_hamiltonian(&h, &patch).unwrap(), t).unwrap();
        let dist = rel_dist(&contract_patch(&pepo, &patch).unwrap(), &exact);
        assert!(dist > 0.0 && dist < 1e-3, "3×3 relative error {dist:.3e}");
    }

    #[test]
    fn save_load_roundtrip_preserves_patches() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("op.pepo");
        let h = xxz_term(0.5);
        let t = C64::new(0.0, -0.25);
        let (pepo, _) = build_pepo(&h, t, 1e-12, false).unwrap();
        pepo.save(&path).unwrap();
        let loaded = ClusterPepo::load(&path, &h).unwrap();
        assert_eq!(loaded.bond_dim(), pepo.bond_dim());
        assert_eq!(loaded.encoded, pepo.encoded);
        let patch = PatchSpec::new(2, 2).unwrap();
        let a = contract_patch(&pepo, &patch).unwrap();
        let b = contract_patch(&loaded, &patch).unwrap();
        assert!(rel_dist(&a, &b) < 1e-12);
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("op.pepo");
        let h = xxz_term(0.5);
        let (pepo, _) = build_pepo(&h, C64::new(0.0, -0.25), 1e-12, false).unwrap();
        pepo.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // header is 52 bytes; the first tensor entry is the identity
        // block's 1.0, so a mantissa nudge leaves a finite defect every
        // patch validation sees
        bytes[52 + 6] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        match ClusterPepo::load(&path, &h) {
            Err(PepoError::CorruptOperator(_)) => {}
            other => panic!("expected corruption detection, got {other:?}"),
        }
        // truncation is caught by the header parser
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(
            ClusterPepo::load(&path, &h),
            Err(PepoError::BadFile { .. })
        ));
    }

    #[test]
    fn loading_against_the_wrong_model_fails() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("op.pepo");
        let (pepo, _) = build_pepo(&xxz_term(0.5), C64::new(0.0, -0.25), 1e-12, false).unwrap();
        pepo.save(&path).unwrap();
        assert!(matches!(
            ClusterPepo::load(&path, &xxz_term(1.5)),
            Err(PepoError::CorruptOperator(_))
        ));
    }

    #[test]
    fn oversized_patches_and_models_are_rejected() {
        assert!(matches!(
            PatchSpec::new(4, 1),
            Err(PepoError::PatchSize { .. })
        ));
        assert!(matches!(
            PatchSpec::new(1, 0),
            Err(PepoError::PatchSize { .. })
        ));
        let d = 4;
        let flat = TwoSiteHamiltonian::new(d, DenseTensor::zeros(&[d * d, d * d])).unwrap();
        assert!(matches!(
            build_pepo(&flat, C64::new(0.0, -0.1), 1e-12, false),
            Err(PepoError::PhysDim(4))
        ));
    }
}
