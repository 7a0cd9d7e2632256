//! Nearest-neighbour spin Hamiltonians: the local two-site term `h`, the
//! spin-1/2 operator algebra, and dense cluster Hamiltonians
//! `H_n = Σᵢ hᵢ,ᵢ₊₁` on small open chains.
//!
//! Everything downstream fixes one leg convention for operators on `n`
//! sites: `(site1_out, …, siteN_out, site1_in, …, siteN_in)`, fused
//! row-major into a `dⁿ×dⁿ` matrix with site 1 slowest.  Basis index 0 is
//! spin up (`Sᶻ = +1/2`).

use std::path::Path;

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::tensor::{kron, DenseTensor, KernelError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("two-site term must be d²×d² with d ≥ 2, got shape {0:?}")]
    BadTermShape(Vec<usize>),
    #[error("two-site term is not hermitian: deviation {dev:.3e} exceeds {tol:.3e}")]
    NotHermitian { dev: f64, tol: f64 },
    #[error("cluster size {0} outside the dense-size guard 2..=12")]
    ClusterSize(usize),
    #[error("model file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Spin-1/2 operators `(Sˣ, Sʸ, Sᶻ)` with `S = σ/2`.
pub fn spin_half_operators() -> (DenseTensor, DenseTensor, DenseTensor) {
    let half = C64::new(0.5, 0.0);
    let ihalf = C64::new(0.0, 0.5);
    let sx = DenseTensor::from_vec(&[2, 2], vec![C64::ZERO, half, half, C64::ZERO]).unwrap();
    let sy = DenseTensor::from_vec(&[2, 2], vec![C64::ZERO, -ihalf, ihalf, C64::ZERO]).unwrap();
    let sz = DenseTensor::from_vec(&[2, 2], vec![half, C64::ZERO, C64::ZERO, -half]).unwrap();
    (sx, sy, sz)
}

/// The local interaction `h` acting on an ordered pair of neighbouring
/// sites, stored as a `d²×d²` matrix.
#[derive(Debug, Clone)]
pub struct TwoSiteHamiltonian {
    pub phys_dim: usize,
    pub term: DenseTensor,
}

impl TwoSiteHamiltonian {
    /// Validates the shape and Hermiticity (to `1e-12·‖term‖_F`).
    pub fn new(phys_dim: usize, term: DenseTensor) -> ModelResult<Self> {
        let d2 = phys_dim * phys_dim;
        if phys_dim < 2 || term.shape() != [d2, d2] {
            return Err(ModelError::BadTermShape(term.shape().to_vec()));
        }
        let dev = term.sub(&term.adjoint()?)?.frobenius_norm();
        let tol = 1e-12 * term.frobenius_norm();
        if dev > tol {
            return Err(ModelError::NotHermitian { dev, tol });
        }
        Ok(Self { phys_dim, term })
    }
}

/// `SˣSˣ + SʸSʸ + Δ·SᶻSᶻ` on a pair of spin-1/2 sites.
pub fn xxz_term(delta: f64) -> TwoSiteHamiltonian {
    let (sx, sy, sz) = spin_half_operators();
    let term = kron(&sx, &sx)
        .and_then(|xx| kron(&sy, &sy)?.add(&xx))
        .and_then(|xy| kron(&sz, &sz)?.scaled(C64::new(delta, 0.0)).add(&xy))
        .expect("2x2 kron shapes line up");
    TwoSiteHamiltonian::new(2, term).expect("hermitian by construction")
}

/// `−SˣSˣ + SʸSʸ − SᶻSᶻ`: the Heisenberg antiferromagnet after a sublattice
/// rotation, real-valued in the standard basis.
pub fn heisenberg_rotated_term() -> TwoSiteHamiltonian {
    let (sx, sy, sz) = spin_half_operators();
    let term = kron(&sy, &sy)
        .and_then(|yy| yy.sub(&kron(&sx, &sx)?))
        .and_then(|t| t.sub(&kron(&sz, &sz)?))
        .expect("2x2 kron shapes line up");
    TwoSiteHamiltonian::new(2, term).expect("hermitian by construction")
}

/// `H_n = Σᵢ hᵢ,ᵢ₊₁` on an open chain, dense.
#[derive(Debug, Clone)]
pub struct ClusterHamiltonian {
    pub n_sites: usize,
    pub matrix: DenseTensor,
}

/// Embeds `h` on the ordered site pair `(a, b)` of an `n_sites` cluster.
///
/// Only matrix elements that touch sites `a` and `b` are visited, so this
/// stays cheap even at the `n = 12` dense-size guard.
pub(crate) fn embed_pair(h: &TwoSiteHamiltonian, n_sites: usize, a: usize, b: usize) -> DenseTensor {
    let d = h.phys_dim;
    assert!(a < n_sites && b < n_sites && a != b);
    let dn = d.pow(n_sites as u32);
    let mut out = DenseTensor::zeros(&[dn, dn]);
    // site digit i has weight d^(n-1-i): site 1 runs slowest
    let weight = |site: usize| d.pow((n_sites - 1 - site) as u32);
    let (wa, wb) = (weight(a), weight(b));
    for row in 0..dn {
        let ra = row / wa % d;
        let rb = row / wb % d;
        let base = row - ra * wa - rb * wb;
        for ia in 0..d {
            for ib in 0..d {
                let v = h.term.get(&[ra * d + rb, ia * d + ib]);
                if v != C64::ZERO {
                    let col = base + ia * wa + ib * wb;
                    let cur = out.get(&[row, col]);
                    out.set(&[row, col], cur + v);
                }
            }
        }
    }
    out
}

/// Embeds a single-site operator at site `i` of an `n_sites` cluster.
pub(crate) fn embed_site(op: &DenseTensor, d: usize, n_sites: usize, i: usize) -> DenseTensor {
    assert!(i < n_sites && op.shape() == [d, d]);
    let dn = d.pow(n_sites as u32);
    let w = d.pow((n_sites - 1 - i) as u32);
    let mut out = DenseTensor::zeros(&[dn, dn]);
    for row in 0..dn {
        let ri = row / w % d;
        let base = row - ri * w;
        for ci in 0..d {
            let v = op.get(&[ri, ci]);
            if v != C64::ZERO {
                let col = base + ci * w;
                let cur = out.get(&[row, col]);
                out.set(&[row, col], cur + v);
            }
        }
    }
    out
}

/// Total `Sᶻ` on an `n_sites` spin-1/2 chain, dense.
pub fn total_sz(n_sites: usize) -> DenseTensor {
    let (_, _, sz) = spin_half_operators();
    let dn = 2usize.pow(n_sites as u32);
    let mut acc = DenseTensor::zeros(&[dn, dn]);
    for i in 0..n_sites {
        acc = acc.add(&embed_site(&sz, 2, n_sites, i)).unwrap();
    }
    acc
}

/// Builds `Σᵢ hᵢ,ᵢ₊₁` on `n` open-chain sites as a dense matrix.
pub fn cluster_hamiltonian(h: &TwoSiteHamiltonian, n: usize) -> ModelResult<ClusterHamiltonian> {
    if !(2..=12).contains(&n) {
        return Err(ModelError::ClusterSize(n));
    }
    let dn = h.phys_dim.pow(n as u32);
    let mut acc = DenseTensor::zeros(&[dn, dn]);
    for i in 0..n - 1 {
        acc = acc.add(&embed_pair(h, n, i, i + 1))?;
    }
    Ok(ClusterHamiltonian {
        n_sites: n,
        matrix: acc,
    })
}

/// Reads a custom two-site term from a plain-text file: first line `d`,
/// then `d⁴` whitespace-separated complex entries as `re im` pairs,
/// row-major over the `d²×d²` matrix.
pub fn load_custom_model(path: &Path) -> ModelResult<TwoSiteHamiltonian> {
    let text = std::fs::read_to_string(path)?;
    let err = |reason: String| ModelError::Parse {
        path: path.display().to_string(),
        reason,
    };
    let mut lines = text.lines();
    let d: usize = lines
        .next()
        .ok_or_else(|| err("empty file".into()))?
        .trim()
        .parse()
        .map_err(|e| err(format!("first line must be the physical dimension: {e}")))?;
    if d < 2 {
        return Err(err(format!("physical dimension {d} < 2")));
    }
    let numbers: Vec<f64> = lines
        .flat_map(|l| l.split_whitespace())
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| err(format!("bad entry {tok:?}: {e}")))
        })
        .collect::<ModelResult<_>>()?;
    let want = 2 * d.pow(4) as usize;
    if numbers.len() != want {
        return Err(err(format!(
            "expected {} numbers ({} complex entries), found {}",
            want,
            d.pow(4),
            numbers.len()
        )));
    }
    let data: Vec<C64> = numbers.chunks(2).map(|p| C64::new(p[0], p[1])).collect();
    let term = DenseTensor::from_vec(&[d * d, d * d], data)?;
    TwoSiteHamiltonian::new(d, term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{hermitian_eigensystem, matmul, DenseTensor};
    use std::io::Write;

    fn commutator(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
        matmul(a, b).unwrap().sub(&matmul(b, a).unwrap()).unwrap()
    }

    #[test]
    fn xxz_matrix_entries() {
        // (Δ/4, flip block [[−Δ/4, 1/2], [1/2, −Δ/4]], Δ/4) worked out by hand
        let h = xxz_term(0.5);
        let m = &h.term;
        assert_eq!(m.get(&[0, 0]), C64::new(0.125, 0.0));
        assert_eq!(m.get(&[3, 3]), C64::new(0.125, 0.0));
        assert_eq!(m.get(&[1, 1]), C64::new(-0.125, 0.0));
        assert_eq!(m.get(&[2, 2]), C64::new(-0.125, 0.0));
        assert_eq!(m.get(&[1, 2]), C64::new(0.5, 0.0));
        assert_eq!(m.get(&[2, 1]), C64::new(0.5, 0.0));
        assert_eq!(m.get(&[0, 3]), C64::ZERO);
        assert_eq!(m.get(&[0, 1]), C64::ZERO);
    }

    #[test]
    fn xx_model_eigenvalues() {
        let h = xxz_term(0.0);
        let (vals, _) = hermitian_eigensystem(&h.term).unwrap();
        let expect = [-0.5, 0.0, 0.0, 0.5];
        for (v, e) in vals.iter().zip(expect) {
            assert!((v - e).abs() < 1e-14, "eigenvalue {v} vs {e}");
        }
    }

    #[test]
    fn xxz_commutes_with_total_sz() {
        for delta in [0.0, 0.5, 1.0, -0.7] {
            let h = xxz_term(delta);
            let c = commutator(&h.term, &total_sz(2));
            assert!(c.frobenius_norm() <= 1e-14);
        }
    }

    #[test]
    fn rotated_heisenberg_is_real() {
        let h = heisenberg_rotated_term();
        for z in h.term.data() {
            assert_eq!(z.im, 0.0);
        }
    }

    #[test]
    fn rotated_heisenberg_spectrum() {
        let h = heisenberg_rotated_term();
        let (vals, _) = hermitian_eigensystem(&h.term).unwrap();
        let expect = [-0.75, 0.25, 0.25, 0.25];
        for (v, e) in vals.iter().zip(expect) {
            assert!((v - e).abs() < 1e-14, "eigenvalue {v} vs {e}");
        }
    }

    #[test]
    fn cluster_n2_is_the_term_itself() {
        let h = xxz_term(0.5);
        let c = cluster_hamiltonian(&h, 2).unwrap();
        assert_eq!(c.matrix, h.term);
    }

    #[test]
    fn cluster_n3_is_traceless() {
        let c = cluster_hamiltonian(&xxz_term(0.5), 3).unwrap();
        let trace: C64 = (0..8).map(|i| c.matrix.get(&[i, i])).sum();
        assert!(trace.norm() < 1e-14);
    }

    #[test]
    fn cluster_n4_matches_kron_embedding() {
        let h = xxz_term(0.3);
        let c = cluster_hamiltonian(&h, 4).unwrap();
        // independent embedding: 1^(i) ⊗ h ⊗ 1^(n-i-2) via plain kron products
        let mut oracle = DenseTensor::zeros(&[16, 16]);
        for i in 0..3 {
            let mut t = if i == 0 {
                h.term.clone()
            } else {
                kron(&DenseTensor::identity(1 << i), &h.term).unwrap()
            };
            let tail = 4 - i - 2;
            if tail > 0 {
                t = kron(&t, &DenseTensor::identity(1 << tail)).unwrap();
            }
            oracle = oracle.add(&t).unwrap();
        }
        assert_eq!(c.matrix, oracle);
    }

    #[test]
    fn cluster_commutes_with_total_sz() {
        let c = cluster_hamiltonian(&xxz_term(0.5), 5).unwrap();
        let comm = commutator(&c.matrix, &total_sz(5));
        assert!(comm.frobenius_norm() <= 1e-12 * c.matrix.frobenius_norm());
    }

    #[test]
    fn cluster_reflection_invariance() {
        let c = cluster_hamiltonian(&xxz_term(0.5), 4).unwrap();
        // reindex sites 4..1 on both output and input legs
        let t = c.matrix.reshape(&[2, 2, 2, 2, 2, 2, 2, 2]).unwrap();
        let r = t
            .permute(&[3, 2, 1, 0, 7, 6, 5, 4])
            .unwrap()
            .reshape(&[16, 16])
            .unwrap();
        assert_eq!(c.matrix, r);
    }

    #[test]
    fn cluster_size_guard() {
        let h = xxz_term(0.5);
        assert!(matches!(
            cluster_hamiltonian(&h, 1),
            Err(ModelError::ClusterSize(1))
        ));
        assert!(matches!(
            cluster_hamiltonian(&h, 13),
            Err(ModelError::ClusterSize(13))
        ));
    }

    #[test]
    fn custom_model_roundtrip() {
        let h = xxz_term(0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("xxz.dat");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "2").unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let z = h.term.get(&[i, j]);
                write!(f, "{:.17e} {:.17e} ", z.re, z.im).unwrap();
            }
            writeln!(f).unwrap();
        }
        drop(f);
        let loaded = load_custom_model(&path).unwrap();
        assert_eq!(loaded.phys_dim, 2);
        let dev = loaded.term.sub(&h.term).unwrap().frobenius_norm();
        assert!(dev < 1e-15);
    }

    #[test]
    fn custom_model_rejects_wrong_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.dat");
        std::fs::write(&path, "2\n1.0 0.0 2.0\n").unwrap();
        assert!(matches!(
            load_custom_model(&path),
            Err(ModelError::Parse { .. })
        ));
    }

    #[test]
    fn custom_model_rejects_non_hermitian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nonherm.dat");
        let mut body = String::from("2\n");
        // e_{01} alone is not hermitian
        for i in 0..16 {
            body.push_str(if i == 1 { "1.0 0.0 " } else { "0.0 0.0 " });
        }
        std::fs::write(&path, body).unwrap();
        assert!(matches!(
            load_custom_model(&path),
            Err(ModelError::NotHermitian { .. })
        ));
    }
}
