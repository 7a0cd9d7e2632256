//! Dense complex tensors and the numerical primitives the cluster builders
//! are expressed in: reshape/permute/contract, truncated SVD, Hermitian
//! eigendecomposition, matrix exponential, and pseudo-inverse application.
//!
//! Entries live in a flat row-major buffer over the declared leg order, and
//! every permute materializes a fresh buffer.  That costs some copies but
//! keeps the layout story trivial: each contraction below is one transpose
//! pair plus one matrix product, and nothing downstream has to reason about
//! strides.  At the bond dimensions the construction produces this is never
//! the bottleneck; the LAPACK factorizations are.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, JobSvd, SVDDCInto, QR, UPLO};
use num_complex::Complex64 as C64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entries in input")]
    NonFinite,
    #[error("rel_tol must lie in [0, 1): got {0}")]
    InvalidTolerance(f64),
    #[error("expected hermitian matrix: deviation {dev:.3e} exceeds tolerance {tol:.3e}")]
    NotHermitian { dev: f64, tol: f64 },
    #[error("lapack backend: {0}")]
    Backend(String),
}

pub type KernelResult<T> = Result<T, KernelError>;

/// Row-major strides for a shape; the last leg runs fastest.
fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Dense complex tensor with an explicit shape vector.
///
/// Rank 0 is a scalar (one entry); legs of extent 0 are legal and give an
/// empty tensor, which the graded-index machinery relies on when a cluster
/// level comes out empty.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![C64::ZERO; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<C64>) -> KernelResult<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "shape {:?} wants {} entries, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// The `d×d` identity matrix.
    pub fn identity(d: usize) -> Self {
        let mut t = Self::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = C64::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn get(&self, index: &[usize]) -> C64 {
        debug_assert_eq!(index.len(), self.rank());
        let strides = row_major_strides(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn set(&mut self, index: &[usize], value: C64) {
        debug_assert_eq!(index.len(), self.rank());
        let strides = row_major_strides(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off] = value;
    }

    /// Extracts the single entry of a rank-0 (or one-element) tensor.
    pub fn as_scalar(&self) -> KernelResult<C64> {
        if self.data.len() != 1 {
            return Err(KernelError::ShapeMismatch(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Content-preserving shape change; entry count must match.
    pub fn reshape(&self, shape: &[usize]) -> KernelResult<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorders legs so that output leg `k` is input leg `axes[k]`,
    /// materializing the permuted buffer.
    pub fn permute(&self, axes: &[usize]) -> KernelResult<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(KernelError::ShapeMismatch(format!(
                "{:?} is not a permutation of 0..{}",
                axes, r
            )));
        }
        let in_strides = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let len = self.data.len();
        let mut out = Vec::with_capacity(len);
        let mut counters = vec![0usize; r];
        let mut src = 0usize;
        for _ in 0..len {
            out.push(self.data[src]);
            for ax in (0..r).rev() {
                counters[ax] += 1;
                src += gather[ax];
                if counters[ax] < out_shape[ax] {
                    break;
                }
                counters[ax] = 0;
                src -= gather[ax] * out_shape[ax];
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Entrywise complex conjugate.
    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Conjugate transpose of a matrix.
    pub fn adjoint(&self) -> KernelResult<Self> {
        if self.rank() != 2 {
            return Err(KernelError::ShapeMismatch(format!(
                "adjoint wants a matrix, got shape {:?}",
                self.shape
            )));
        }
        self.conj().permute(&[1, 0])
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> KernelResult<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> KernelResult<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> KernelResult<Self> {
        if self.shape != other.shape {
            return Err(KernelError::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Fixes one leg to a single index and removes it.
    pub fn take_index(&self, axis: usize, index: usize) -> KernelResult<Self> {
        if axis >= self.rank() || index >= self.shape[axis] {
            return Err(KernelError::ShapeMismatch(format!(
                "take_index({axis}, {index}) on shape {:?}",
                self.shape
            )));
        }
        let mut axes: Vec<usize> = vec![axis];
        axes.extend((0..self.rank()).filter(|&a| a != axis));
        let moved = self.permute(&axes)?;
        let block: usize = moved.shape[1..].iter().product();
        let data = moved.data[index * block..(index + 1) * block].to_vec();
        Ok(Self {
            shape: moved.shape[1..].to_vec(),
            data,
        })
    }

    /// Copies `block` into `self` at the given per-leg offsets.
    pub fn assign_block(&mut self, offsets: &[usize], block: &Self) -> KernelResult<()> {
        let r = self.rank();
        if offsets.len() != r || block.rank() != r {
            return Err(KernelError::ShapeMismatch(format!(
                "assign_block offsets {:?} / block {:?} into {:?}",
                offsets, block.shape, self.shape
            )));
        }
        for ax in 0..r {
            if offsets[ax] + block.shape[ax] > self.shape[ax] {
                return Err(KernelError::ShapeMismatch(format!(
                    "block {:?} at {:?} exceeds {:?}",
                    block.shape, offsets, self.shape
                )));
            }
        }
        if block.data.is_empty() {
            return Ok(());
        }
        let strides = row_major_strides(&self.shape);
        let base: usize = offsets.iter().zip(&strides).map(|(o, s)| o * s).sum();
        let mut counters = vec![0usize; r];
        let mut dst = base;
        for &value in &block.data {
            self.data[dst] = value;
            for ax in (0..r).rev() {
                counters[ax] += 1;
                dst += strides[ax];
                if counters[ax] < block.shape[ax] {
                    break;
                }
                counters[ax] = 0;
                dst -= strides[ax] * block.shape[ax];
            }
        }
        Ok(())
    }

    /// Extracts the block of the given extents starting at `offsets`.
    pub fn slice_block(&self, offsets: &[usize], extents: &[usize]) -> KernelResult<Self> {
        let r = self.rank();
        if offsets.len() != r || extents.len() != r {
            return Err(KernelError::ShapeMismatch(format!(
                "slice_block offsets {:?} / extents {:?} of {:?}",
                offsets, extents, self.shape
            )));
        }
        for ax in 0..r {
            if offsets[ax] + extents[ax] > self.shape[ax] {
                return Err(KernelError::ShapeMismatch(format!(
                    "slice {:?}+{:?} exceeds {:?}",
                    offsets, extents, self.shape
                )));
            }
        }
        let len: usize = extents.iter().product();
        let mut out = Vec::with_capacity(len);
        if len > 0 {
            let strides = row_major_strides(&self.shape);
            let base: usize = offsets.iter().zip(&strides).map(|(o, s)| o * s).sum();
            let mut counters = vec![0usize; r];
            let mut src = base;
            for _ in 0..len {
                out.push(self.data[src]);
                for ax in (0..r).rev() {
                    counters[ax] += 1;
                    src += strides[ax];
                    if counters[ax] < extents[ax] {
                        break;
                    }
                    counters[ax] = 0;
                    src -= strides[ax] * extents[ax];
                }
            }
        }
        Ok(Self {
            shape: extents.to_vec(),
            data: out,
        })
    }
}

/// Re-packs an ndarray matrix into a row-major tensor.  LAPACK-backed ops
/// hand back Fortran-layout arrays; flattening those without this copy
/// silently transposes them.
fn tensor_from_array2(arr: Array2<C64>) -> DenseTensor {
    let shape = vec![arr.nrows(), arr.ncols()];
    let data = if arr.is_standard_layout() {
        arr.into_raw_vec_and_offset().0
    } else {
        arr.iter().copied().collect()
    };
    DenseTensor { shape, data }
}

/// Matrix product of two contiguous row-major buffers.
fn matmul_raw(a: &[C64], m: usize, k: usize, b: &[C64], n: usize) -> Vec<C64> {
    let av = ArrayView2::from_shape((m, k), a).expect("lhs buffer is contiguous");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs buffer is contiguous");
    let c = av.dot(&bv);
    debug_assert!(c.is_standard_layout());
    let (data, offset) = c.into_raw_vec_and_offset();
    debug_assert!(matches!(offset, None | Some(0)));
    data
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> KernelResult<DenseTensor> {
    contract(a, b, &[(1, 0)])
}

/// Contracts `a` with `b` over the given `(leg-of-a, leg-of-b)` pairs.
///
/// Result legs are `a`'s unpaired legs in declared order, followed by `b`'s.
/// Zero pairs gives the outer product.  Internally both operands are
/// permuted so the contraction is a single matrix product.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
) -> KernelResult<DenseTensor> {
    let (ra, rb) = (a.rank(), b.rank());
    let mut used_a = vec![false; ra];
    let mut used_b = vec![false; rb];
    for &(la, lb) in pairs {
        if la >= ra || lb >= rb {
            return Err(KernelError::ShapeMismatch(format!(
                "pair ({la},{lb}) out of range for ranks ({ra},{rb})"
            )));
        }
        if used_a[la] || used_b[lb] {
            return Err(KernelError::ShapeMismatch(format!(
                "leg repeated in pairs {:?}",
                pairs
            )));
        }
        if a.shape[la] != b.shape[lb] {
            return Err(KernelError::ShapeMismatch(format!(
                "extent {} vs {} on pair ({la},{lb})",
                a.shape[la], b.shape[lb]
            )));
        }
        used_a[la] = true;
        used_b[lb] = true;
    }
    let free_a: Vec<usize> = (0..ra).filter(|&i| !used_a[i]).collect();
    let free_b: Vec<usize> = (0..rb).filter(|&i| !used_b[i]).collect();

    let mut axes_a = free_a.clone();
    axes_a.extend(pairs.iter().map(|p| p.0));
    let mut axes_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    axes_b.extend(free_b.iter().copied());
    let pa = a.permute(&axes_a)?;
    let pb = b.permute(&axes_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = pairs.iter().map(|&(i, _)| a.shape[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();
    let data = matmul_raw(&pa.data, m, k, &pb.data, n);

    let mut shape: Vec<usize> = free_a.iter().map(|&i| a.shape[i]).collect();
    shape.extend(free_b.iter().map(|&i| b.shape[i]));
    Ok(DenseTensor { shape, data })
}

/// Kronecker product of two matrices, with the row (column) index of `a`
/// running slower than that of `b`.
pub fn kron(a: &DenseTensor, b: &DenseTensor) -> KernelResult<DenseTensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(KernelError::ShapeMismatch(format!(
            "kron wants matrices, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let outer = contract(a, b, &[])?;
    outer.permute(&[0, 2, 1, 3])?.reshape(&[
        a.shape[0] * b.shape[0],
        a.shape[1] * b.shape[1],
    ])
}

/// Truncated singular value decomposition of a matrix.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `m×r` isometry; columns are left singular vectors.
    pub left: DenseTensor,
    /// Retained singular values, positive and descending.
    pub values: Vec<f64>,
    /// `r×n` isometry; rows are right singular vectors.
    pub right: DenseTensor,
}

impl SvdFactors {
    /// Assembles factors directly; used by the builders to wrap cached arm
    /// elements so that pseudo-inverse application strips them.
    pub fn from_parts(left: DenseTensor, values: Vec<f64>, right: DenseTensor) -> KernelResult<Self> {
        let r = values.len();
        if left.rank() != 2 || right.rank() != 2 || left.shape()[1] != r || right.shape()[0] != r {
            return Err(KernelError::ShapeMismatch(format!(
                "factor shapes {:?} / {} values / {:?}",
                left.shape(),
                r,
                right.shape()
            )));
        }
        if values.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(KernelError::ShapeMismatch(
                "singular values must be positive and finite".into(),
            ));
        }
        Ok(Self {
            left,
            values,
            right,
        })
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// `U·S·V` as a dense matrix.
    pub fn reconstruct(&self) -> KernelResult<DenseTensor> {
        let mut scaled = self.right.clone();
        let n = self.right.shape()[1];
        for (i, &s) in self.values.iter().enumerate() {
            for j in 0..n {
                let v = scaled.get(&[i, j]) * s;
                scaled.set(&[i, j], v);
            }
        }
        matmul(&self.left, &scaled)
    }
}

/// SVD with relative truncation: retains exactly the singular values
/// `σₖ > rel_tol·σ₁` (nothing when `σ₁ = 0`).
pub fn svd_truncated(a: &DenseTensor, rel_tol: f64) -> KernelResult<SvdFactors> {
    if a.rank() != 2 {
        return Err(KernelError::ShapeMismatch(format!(
            "svd wants a matrix, got shape {:?}",
            a.shape()
        )));
    }
    if !(0.0..1.0).contains(&rel_tol) {
        return Err(KernelError::InvalidTolerance(rel_tol));
    }
    if a.data.iter().any(|z| !z.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    if m == 0 || n == 0 {
        return Ok(SvdFactors {
            left: DenseTensor::zeros(&[m, 0]),
            values: Vec::new(),
            right: DenseTensor::zeros(&[0, n]),
        });
    }
    let arr = Array2::from_shape_vec((m, n), a.data.clone()).expect("row-major buffer");
    let (u, s, vt) = arr
        .svddc_into(JobSvd::Some)
        .map_err(|e| KernelError::Backend(e.to_string()))?;
    let u = u.ok_or_else(|| KernelError::Backend("missing U".into()))?;
    let vt = vt.ok_or_else(|| KernelError::Backend("missing V".into()))?;
    let smax = s[0];
    let r = if smax == 0.0 {
        0
    } else {
        s.iter().take_while(|&&x| x > rel_tol * smax).count()
    };
    let left = tensor_from_array2(u.slice(s![.., ..r]).to_owned());
    let right = tensor_from_array2(vt.slice(s![..r, ..]).to_owned());
    debug_assert_eq!(left.shape, &[m, r]);
    debug_assert_eq!(right.shape, &[r, n]);
    Ok(SvdFactors {
        left,
        values: s.iter().take(r).copied().collect(),
        right,
    })
}

/// Thin QR factorization `a = Q·R` with `Q` an `m×min(m,n)` isometry.
///
/// Unlike `svd_truncated` this never reorders or drops directions, which
/// makes it the right tool for canonicalization sweeps where the bond basis
/// must stay exactly equivalent.
pub fn thin_qr(a: &DenseTensor) -> KernelResult<(DenseTensor, DenseTensor)> {
    if a.rank() != 2 {
        return Err(KernelError::ShapeMismatch(format!(
            "qr wants a matrix, got {:?}",
            a.shape
        )));
    }
    if a.data.iter().any(|z| !z.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let k = m.min(n);
    if k == 0 {
        return Ok((DenseTensor::zeros(&[m, k]), DenseTensor::zeros(&[k, n])));
    }
    let arr = Array2::from_shape_vec((m, n), a.data.clone()).expect("row-major buffer");
    let (q, r) = arr.qr().map_err(|e| KernelError::Backend(e.to_string()))?;
    let q = tensor_from_array2(q);
    let r = tensor_from_array2(r);
    debug_assert_eq!(q.shape, &[m, k]);
    debug_assert_eq!(r.shape, &[k, n]);
    Ok((q, r))
}

/// Eigenvalues and eigenvector matrix (columns) of a Hermitian matrix.
///
/// Hermiticity is enforced to `1e-10·‖a‖_F`; everything downstream that
/// exponentiates goes through here, so a non-Hermitian cluster Hamiltonian
/// fails loudly instead of silently losing unitarity.
pub fn hermitian_eigensystem(a: &DenseTensor) -> KernelResult<(Vec<f64>, DenseTensor)> {
    if a.rank() != 2 || a.shape[0] != a.shape[1] {
        return Err(KernelError::ShapeMismatch(format!(
            "eigensystem wants a square matrix, got {:?}",
            a.shape
        )));
    }
    let n = a.shape[0];
    if n == 0 {
        return Ok((Vec::new(), DenseTensor::zeros(&[0, 0])));
    }
    if a.data.iter().any(|z| !z.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    let norm = a.frobenius_norm();
    let dev = a.sub(&a.adjoint()?)?.frobenius_norm();
    let tol = 1e-10 * norm;
    if dev > tol {
        return Err(KernelError::NotHermitian { dev, tol });
    }
    let arr = Array2::from_shape_vec((n, n), a.data.clone()).expect("row-major buffer");
    let (vals, vecs) = arr
        .eigh(UPLO::Lower)
        .map_err(|e| KernelError::Backend(e.to_string()))?;
    // The LAPACK wrapper hands complex eigenvectors back conjugated (real
    // inputs are unaffected).  Rather than hard-code that quirk, test the
    // eigen-equation and keep whichever orientation satisfies it.
    let q = tensor_from_array2(vecs);
    debug_assert_eq!(q.shape, &[n, n]);
    let residual = |cand: &DenseTensor| -> KernelResult<f64> {
        let mut aq = matmul(a, cand)?;
        for j in 0..n {
            for i in 0..n {
                let v = aq.get(&[i, j]) - cand.get(&[i, j]) * vals[j];
                aq.set(&[i, j], v);
            }
        }
        Ok(aq.frobenius_norm())
    };
    let direct = residual(&q)?;
    let eig_tol = 1e-9 * (norm + 1.0);
    if direct <= eig_tol {
        return Ok((vals.to_vec(), q));
    }
    let qc = q.conj();
    let conjugated = residual(&qc)?;
    if conjugated <= eig_tol {
        return Ok((vals.to_vec(), qc));
    }
    Err(KernelError::Backend(format!(
        "eigenvector residual {:.3e} (conjugated {:.3e}) exceeds {:.3e}",
        direct, conjugated, eig_tol
    )))
}

/// `exp(scale·a)` for Hermitian `a`, via `Q·exp(scale·Λ)·Q†`.
pub fn matrix_exponential(a: &DenseTensor, scale: C64) -> KernelResult<DenseTensor> {
    let (vals, q) = hermitian_eigensystem(a)?;
    let n = vals.len();
    let mut scaled = q.clone();
    for (j, &lambda) in vals.iter().enumerate() {
        let w = (scale * lambda).exp();
        for i in 0..n {
            let v = scaled.get(&[i, j]) * w;
            scaled.set(&[i, j], v);
        }
    }
    matmul(&scaled, &q.adjoint()?)
}

/// Which side of the target the pseudo-inverse multiplies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinvSide {
    Left,
    Right,
}

/// Applies the Moore-Penrose pseudo-inverse encoded by `factors` to a
/// matrix-shaped target: `V†·S⁻¹·U†·target` on the left, or
/// `target·V†·S⁻¹·U†` on the right.  Only retained singular values are
/// inverted; rank deficiency was already handled by the truncation.
pub fn apply_pseudo_inverse(
    factors: &SvdFactors,
    side: PinvSide,
    target: &DenseTensor,
) -> KernelResult<DenseTensor> {
    if target.rank() != 2 {
        return Err(KernelError::ShapeMismatch(format!(
            "pseudo-inverse target must be a matrix, got {:?}",
            target.shape()
        )));
    }
    let r = factors.rank();
    match side {
        PinvSide::Left => {
            let mut y = matmul(&factors.left.adjoint()?, target)?;
            let cols = y.shape()[1];
            for i in 0..r {
                let inv = 1.0 / factors.values[i];
                for j in 0..cols {
                    let v = y.get(&[i, j]) * inv;
                    y.set(&[i, j], v);
                }
            }
            matmul(&factors.right.adjoint()?, &y)
        }
        PinvSide::Right => {
            let mut y = matmul(target, &factors.right.adjoint()?)?;
            let rows = y.shape()[0];
            for j in 0..r {
                let inv = 1.0 / factors.values[j];
                for i in 0..rows {
                    let v = y.get(&[i, j]) * inv;
                    y.set(&[i, j], v);
                }
            }
            matmul(&y, &factors.left.adjoint()?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        DenseTensor::from_vec(shape, data).unwrap()
    }

    /// Index-loop reference for `contract`, quadratic and obviously correct.
    fn contract_reference(
        a: &DenseTensor,
        b: &DenseTensor,
        pairs: &[(usize, usize)],
    ) -> DenseTensor {
        let free_a: Vec<usize> = (0..a.rank())
            .filter(|i| !pairs.iter().any(|p| p.0 == *i))
            .collect();
        let free_b: Vec<usize> = (0..b.rank())
            .filter(|i| !pairs.iter().any(|p| p.1 == *i))
            .collect();
        let mut shape: Vec<usize> = free_a.iter().map(|&i| a.shape()[i]).collect();
        shape.extend(free_b.iter().map(|&i| b.shape()[i]));
        let mut out = DenseTensor::zeros(&shape);
        let sum_extents: Vec<usize> = pairs.iter().map(|&(i, _)| a.shape()[i]).collect();
        let total_free: usize = shape.iter().product();
        let total_sum: usize = sum_extents.iter().product();
        for flat in 0..total_free {
            let mut rem = flat;
            let mut free_idx = vec![0usize; shape.len()];
            for ax in (0..shape.len()).rev() {
                free_idx[ax] = rem % shape[ax];
                rem /= shape[ax];
            }
            let mut acc = C64::ZERO;
            for sflat in 0..total_sum {
                let mut srem = sflat;
                let mut sum_idx = vec![0usize; pairs.len()];
                for ax in (0..pairs.len()).rev() {
                    sum_idx[ax] = srem % sum_extents[ax];
                    srem /= sum_extents[ax];
                }
                let mut ia = vec![0usize; a.rank()];
                let mut ib = vec![0usize; b.rank()];
                for (k, &leg) in free_a.iter().enumerate() {
                    ia[leg] = free_idx[k];
                }
                for (k, &leg) in free_b.iter().enumerate() {
                    ib[leg] = free_idx[free_a.len() + k];
                }
                for (k, &(la, lb)) in pairs.iter().enumerate() {
                    ia[la] = sum_idx[k];
                    ib[lb] = sum_idx[k];
                }
                acc += a.get(&ia) * b.get(&ib);
            }
            let mut idx = vec![0usize; shape.len()];
            let mut rem2 = flat;
            for ax in (0..shape.len()).rev() {
                idx[ax] = rem2 % shape[ax];
                rem2 /= shape[ax];
            }
            out.set(&idx, acc);
        }
        out
    }

    fn assert_close(a: &DenseTensor, b: &DenseTensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let dev = a.sub(b).unwrap().frobenius_norm();
        let scale = b.frobenius_norm().max(1.0);
        assert!(
            dev <= tol * scale,
            "deviation {dev:.3e} exceeds {:.3e}",
            tol * scale
        );
    }

    #[test]
    fn identity_contraction_returns_vector() {
        let id = DenseTensor::identity(2);
        let v = DenseTensor::from_vec(&[2], vec![C64::new(0.3, -1.0), C64::new(2.0, 0.5)]).unwrap();
        let out = contract(&id, &v, &[(1, 0)]).unwrap();
        assert_close(&out, &v, 1e-15);
    }

    #[test]
    fn matrix_product_matches_triple_loop() {
        let a = random_tensor(&[2, 3], 11);
        let b = random_tensor(&[3, 4], 12);
        let fast = contract(&a, &b, &[(1, 0)]).unwrap();
        let mut slow = DenseTensor::zeros(&[2, 4]);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = C64::ZERO;
                for k in 0..3 {
                    acc += a.get(&[i, k]) * b.get(&[k, j]);
                }
                slow.set(&[i, j], acc);
            }
        }
        assert_close(&fast, &slow, 1e-14);
    }

    #[test]
    fn zero_pairs_is_outer_product() {
        let a = random_tensor(&[2, 3], 21);
        let b = random_tensor(&[4], 22);
        let out = contract(&a, &b, &[]).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert_eq!(out.len(), a.len() * b.len());
        assert_close(&out, &contract_reference(&a, &b, &[]), 1e-14);
    }

    #[test]
    fn multi_pair_contraction_matches_reference() {
        let a = random_tensor(&[2, 3, 4, 2], 31);
        let b = random_tensor(&[4, 5, 2], 32);
        let pairs = [(2, 0), (3, 2)];
        let fast = contract(&a, &b, &pairs).unwrap();
        let slow = contract_reference(&a, &b, &pairs);
        assert_close(&fast, &slow, 1e-13);
    }

    #[test]
    fn contract_rejects_extent_mismatch() {
        let a = random_tensor(&[2, 3], 41);
        let b = random_tensor(&[4, 2], 42);
        assert!(contract(&a, &b, &[(1, 0)]).is_err());
    }

    #[test]
    fn contraction_is_associative_on_matrix_chains() {
        let a = random_tensor(&[3, 4], 51);
        let b = random_tensor(&[4, 5], 52);
        let c = random_tensor(&[5, 2], 53);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert_close(&left, &right, 1e-12);
    }

    #[test]
    fn permute_roundtrip_is_exact() {
        let a = random_tensor(&[2, 3, 4], 61);
        let p = a.permute(&[2, 0, 1]).unwrap();
        // inverse of (2,0,1) is (1,2,0)
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn take_index_slices_one_leg() {
        let a = random_tensor(&[2, 3, 4], 71);
        let s = a.take_index(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 4]);
        for i in 0..2 {
            for k in 0..4 {
                assert_eq!(s.get(&[i, k]), a.get(&[i, 2, k]));
            }
        }
    }

    #[test]
    fn block_assign_and_slice_roundtrip() {
        let mut big = DenseTensor::zeros(&[4, 5, 3]);
        let block = random_tensor(&[2, 2, 3], 81);
        big.assign_block(&[1, 3, 0], &block).unwrap();
        let back = big.slice_block(&[1, 3, 0], &[2, 2, 3]).unwrap();
        assert_eq!(back, block);
        assert_eq!(big.get(&[0, 0, 0]), C64::ZERO);
    }

    #[test]
    fn kron_of_paulis() {
        // σz ⊗ σx has the off-diagonal ±1 checkerboard
        let sz = DenseTensor::from_vec(
            &[2, 2],
            vec![C64::ONE, C64::ZERO, C64::ZERO, -C64::ONE],
        )
        .unwrap();
        let sx =
            DenseTensor::from_vec(&[2, 2], vec![C64::ZERO, C64::ONE, C64::ONE, C64::ZERO]).unwrap();
        let k = kron(&sz, &sx).unwrap();
        assert_eq!(k.shape(), &[4, 4]);
        assert_eq!(k.get(&[0, 1]), C64::ONE);
        assert_eq!(k.get(&[1, 0]), C64::ONE);
        assert_eq!(k.get(&[2, 3]), -C64::ONE);
        assert_eq!(k.get(&[3, 2]), -C64::ONE);
        assert_eq!(k.get(&[0, 0]), C64::ZERO);
    }

    #[test]
    fn svd_zero_matrix_keeps_nothing() {
        let z = DenseTensor::zeros(&[3, 3]);
        let f = svd_truncated(&z, 1e-12).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(f.left.shape(), &[3, 0]);
        assert_eq!(f.right.shape(), &[0, 3]);
    }

    #[test]
    fn svd_threshold_drops_tiny_value() {
        let mut a = DenseTensor::zeros(&[3, 3]);
        a.set(&[0, 0], C64::new(3.0, 0.0));
        a.set(&[1, 1], C64::new(2.0, 0.0));
        a.set(&[2, 2], C64::new(1e-15, 0.0));
        let f = svd_truncated(&a, 1e-12).unwrap();
        assert_eq!(f.rank(), 2);
        assert!((f.values[0] - 3.0).abs() < 1e-14);
        assert!((f.values[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let a = random_tensor(&[4, 4], 91);
        let f = svd_truncated(&a, 1e-12).unwrap();
        assert_close(&f.reconstruct().unwrap(), &a, 1e-12);
    }

    #[test]
    fn svd_left_isometry_is_orthonormal() {
        let a = random_tensor(&[6, 3], 92);
        let f = svd_truncated(&a, 1e-12).unwrap();
        let gram = matmul(&f.left.adjoint().unwrap(), &f.left).unwrap();
        assert_close(&gram, &DenseTensor::identity(f.rank()), 1e-12 * 6.0);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = DenseTensor::zeros(&[2, 2]);
        a.set(&[0, 0], C64::new(f64::NAN, 0.0));
        assert!(matches!(
            svd_truncated(&a, 1e-12),
            Err(KernelError::NonFinite)
        ));
    }

    #[test]
    fn svd_rejects_bad_tolerance() {
        let a = random_tensor(&[2, 2], 93);
        assert!(matches!(
            svd_truncated(&a, 1.0),
            Err(KernelError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DenseTensor::zeros(&[3, 3]);
        let e = matrix_exponential(&z, C64::new(0.7, -2.0)).unwrap();
        assert_close(&e, &DenseTensor::identity(3), 1e-14);
    }

    #[test]
    fn exp_of_diagonal() {
        let mut a = DenseTensor::zeros(&[2, 2]);
        a.set(&[0, 0], C64::ONE);
        a.set(&[1, 1], -C64::ONE);
        let t = 0.37;
        let e = matrix_exponential(&a, C64::new(t, 0.0)).unwrap();
        assert!((e.get(&[0, 0]).re - t.exp()).abs() < 1e-13);
        assert!((e.get(&[1, 1]).re - (-t).exp()).abs() < 1e-13);
        assert!(e.get(&[0, 1]).norm() < 1e-14);
    }

    #[test]
    fn qr_isometry_and_reconstruction() {
        for (m, n) in [(5usize, 2usize), (2, 5), (3, 3), (1, 4)] {
            let a = DenseTensor::from_vec(
                &[m, n],
                (0..m * n)
                    .map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
                    .collect(),
            )
            .unwrap();
            let (q, r) = thin_qr(&a).unwrap();
            let k = m.min(n);
            assert_eq!(q.shape(), &[m, k]);
            assert_eq!(r.shape(), &[k, n]);
            let gram = matmul(&q.adjoint().unwrap(), &q).unwrap();
            assert_close(&gram, &DenseTensor::identity(k), 1e-12);
            assert_close(&matmul(&q, &r).unwrap(), &a, 1e-12);
        }
    }

    #[test]
    fn exp_of_unsorted_diagonal() {
        // Eigenvalue sorting permutes the eigenbasis non-trivially here, so
        // any transpose slip in the eigenvector matrix scrambles the result.
        let d = [3.0, 1.0, 2.0, -1.0];
        let mut a = DenseTensor::zeros(&[4, 4]);
        for (i, &x) in d.iter().enumerate() {
            a.set(&[i, i], C64::new(x, 0.0));
        }
        let e = matrix_exponential(&a, C64::new(0.5, 0.0)).unwrap();
        for (i, &x) in d.iter().enumerate() {
            assert!((e.get(&[i, i]).re - (0.5 * x).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_of_complex_hermitian_pauli_y() {
        // exp(i·theta·sigma_y) = [[cos, sin], [-sin, cos]].
        let mut sy = DenseTensor::zeros(&[2, 2]);
        sy.set(&[0, 1], C64::new(0.0, -1.0));
        sy.set(&[1, 0], C64::new(0.0, 1.0));
        let theta = 0.7;
        let e = matrix_exponential(&sy, C64::new(0.0, theta)).unwrap();
        assert!((e.get(&[0, 0]) - C64::new(theta.cos(), 0.0)).norm() < 1e-13);
        assert!((e.get(&[0, 1]) - C64::new(theta.sin(), 0.0)).norm() < 1e-13);
        assert!((e.get(&[1, 0]) - C64::new(-theta.sin(), 0.0)).norm() < 1e-13);
        assert!((e.get(&[1, 1]) - C64::new(theta.cos(), 0.0)).norm() < 1e-13);
    }

    #[test]
    fn exp_semigroup_on_xxz_term() {
        let h = crate::model::xxz_term(0.5).term;
        let half = matrix_exponential(&h, C64::new(0.3, 0.0)).unwrap();
        let full = matrix_exponential(&h, C64::new(0.6, 0.0)).unwrap();
        assert_close(&matmul(&half, &half).unwrap(), &full, 1e-10);
    }

    #[test]
    fn exp_semigroup_for_complex_scales() {
        let h = crate::model::xxz_term(1.0).term;
        let s1 = C64::new(0.2, -0.9);
        let s2 = C64::new(-0.4, 0.35);
        let a = matrix_exponential(&h, s1).unwrap();
        let b = matrix_exponential(&h, s2).unwrap();
        let ab = matrix_exponential(&h, s1 + s2).unwrap();
        assert_close(&matmul(&a, &b).unwrap(), &ab, 1e-10);
    }

    #[test]
    fn exp_imaginary_scale_is_unitary() {
        let h = crate::model::xxz_term(0.5).term;
        let u = matrix_exponential(&h, C64::new(0.0, -1.3)).unwrap();
        let gram = matmul(&u.adjoint().unwrap(), &u).unwrap();
        assert_close(&gram, &DenseTensor::identity(4), 1e-10);
    }

    #[test]
    fn exp_rejects_non_hermitian() {
        let mut a = DenseTensor::zeros(&[2, 2]);
        a.set(&[0, 1], C64::ONE);
        assert!(matches!(
            matrix_exponential(&a, C64::ONE),
            Err(KernelError::NotHermitian { .. })
        ));
    }

    #[test]
    fn pinv_of_identity_applied_to_identity() {
        let id = DenseTensor::identity(2);
        let f = svd_truncated(&id, 1e-12).unwrap();
        let out = apply_pseudo_inverse(&f, PinvSide::Left, &id).unwrap();
        assert_close(&out, &id, 1e-13);
    }

    #[test]
    fn pinv_times_full_rank_matrix_is_identity() {
        let a = random_tensor(&[4, 4], 101);
        let f = svd_truncated(&a, 1e-12).unwrap();
        assert_eq!(f.rank(), 4);
        let out = apply_pseudo_inverse(&f, PinvSide::Left, &a).unwrap();
        assert_close(&out, &DenseTensor::identity(4), 1e-12);
        let out_r = apply_pseudo_inverse(&f, PinvSide::Right, &a).unwrap();
        assert_close(&out_r, &DenseTensor::identity(4), 1e-12);
    }

    #[test]
    fn pinv_recovers_targets_in_range() {
        // rank-2 4×4 matrix built from two outer products
        let u = random_tensor(&[4, 2], 111);
        let v = random_tensor(&[2, 4], 112);
        let a = matmul(&u, &v).unwrap();
        let f = svd_truncated(&a, 1e-10).unwrap();
        assert_eq!(f.rank(), 2);
        // b = A·x lies in range(A)
        let x = random_tensor(&[4, 1], 113);
        let b = matmul(&a, &x).unwrap();
        let y = apply_pseudo_inverse(&f, PinvSide::Left, &b).unwrap();
        let back = matmul(&a, &y).unwrap();
        assert_close(&back, &b, 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_reshape_roundtrip(seed in 0u64..1000) {
            let a = random_tensor(&[2, 3, 4], seed);
            let r = a.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
            prop_assert_eq!(a, r);
        }

        #[test]
        fn prop_permute_preserves_multiset(seed in 0u64..1000) {
            let a = random_tensor(&[2, 3, 2], seed);
            let p = a.permute(&[1, 0, 2]).unwrap();
            let mut na: Vec<u64> = a.data().iter().map(|z| z.norm_sqr().to_bits()).collect();
            let mut np: Vec<u64> = p.data().iter().map(|z| z.norm_sqr().to_bits()).collect();
            na.sort_unstable();
            np.sort_unstable();
            prop_assert_eq!(na, np);
        }

        #[test]
        fn prop_contract_matches_reference(seed in 0u64..500) {
            let a = random_tensor(&[2, 3, 2], seed);
            let b = random_tensor(&[2, 2, 3], seed.wrapping_add(7919));
            let pairs = [(0, 1), (1, 2)];
            let fast = contract(&a, &b, &pairs).unwrap();
            let slow = contract_reference(&a, &b, &pairs);
            let dev = fast.sub(&slow).unwrap().frobenius_norm();
            prop_assert!(dev <= 1e-12 * slow.frobenius_norm().max(1.0));
        }

        #[test]
        fn prop_svd_reconstructs(rows in 1usize..6, cols in 1usize..6, seed in 0u64..500) {
            let a = random_tensor(&[rows, cols], seed);
            let f = svd_truncated(&a, 0.0).unwrap();
            let dev = f.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
            prop_assert!(dev <= 1e-12 * a.frobenius_norm().max(1e-300));
        }
    }
}
