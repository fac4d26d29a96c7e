//! Thin singular value decomposition with a deterministic sign convention.
//!
//! Factors are sorted by descending singular value. For every component the
//! entry of largest magnitude in the left vector is made positive (the first
//! such entry wins on exact ties) and the right vector is flipped alongside,
//! so `u_i σ_i v_iᵀ` is unchanged.

use nalgebra::DVector;

use crate::error::{ensure, Error, Result};
use crate::Matrix;

/// A sorted set of distinct, zero-based singular direction indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct DirectionSet(Vec<usize>);

impl DirectionSet {
    /// Fails on duplicate indices.
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        let before = v.len();
        v.dedup();
        ensure!(v.len() == before, "direction set contains duplicate indices");
        Ok(Self(v))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// `0..count`
    pub fn leading(count: usize) -> Self {
        Self((0..count).collect())
    }

    /// Builds a set from one-based direction numbers as used in plan files.
    pub fn from_one_based(numbers: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut zero_based = Vec::new();
        for n in numbers {
            ensure!(n >= 1, "one-based direction number must be >= 1, got {n}");
            zero_based.push(n - 1);
        }
        Self::new(zero_based)
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    /// Elements of `self` that are not in `other`.
    pub fn difference(&self, other: &DirectionSet) -> DirectionSet {
        Self(self.iter().filter(|&i| !other.contains(i)).collect())
    }

    pub fn intersection_len(&self, other: &DirectionSet) -> usize {
        self.iter().filter(|&i| other.contains(i)).count()
    }

    pub(crate) fn check_within(&self, k: usize) -> Result<()> {
        if let Some(&max) = self.0.last() {
            ensure!(
                max < k,
                "direction index {} out of range for K = {k}",
                max + 1
            );
        }
        Ok(())
    }
}

/// Thin SVD `W = U·diag(σ)·Vᵀ` of an `m × n` matrix with `K = min(m, n)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    u: Matrix,
    sigma: Vec<f64>,
    vt: Matrix,
}

impl SvdFactors {
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.vt.ncols()
    }

    /// Number of components, `min(m, n)`.
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// `m × K`, orthonormal columns.
    pub fn u(&self) -> &Matrix {
        &self.u
    }

    /// Descending, non-negative.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `K × n`, orthonormal rows.
    pub fn vt(&self) -> &Matrix {
        &self.vt
    }

    /// Left singular vector `u_i` (zero-based).
    pub fn left(&self, i: usize) -> DVector<f64> {
        self.u.column(i).into_owned()
    }

    /// Right singular vector `v_i` (zero-based).
    pub fn right(&self, i: usize) -> DVector<f64> {
        self.vt.row(i).transpose()
    }
}

/// Per-direction magnitudes `d_i = |u_iᵀ ΔW v_i|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionVector(Vec<f64>);

impl ProjectionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn iteration_budget(k: usize) -> usize {
    (100 * k).max(1000)
}

/// Decomposes `w` into sorted, sign-normalized thin SVD factors.
pub fn decompose(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    ensure!(m >= 1 && n >= 1, "cannot decompose an empty {m}x{n} matrix");
    ensure!(
        w.iter().all(|v| v.is_finite()),
        "matrix contains non-finite entries"
    );
    let k = m.min(n);

    let svd = w
        .clone()
        .try_svd_unordered(true, true, f64::EPSILON, iteration_budget(k))
        .ok_or_else(|| Error::Numeric(format!("SVD of {m}x{n} matrix did not converge")))?;
    let raw_u = svd.u.expect("u requested");
    let raw_vt = svd.v_t.expect("v_t requested");
    let raw_sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw_sigma[b].total_cmp(&raw_sigma[a]).then(a.cmp(&b)));

    let mut u = Matrix::zeros(m, k);
    let mut vt = Matrix::zeros(k, n);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let flip = if leading_entry_negative(raw_u.column(src).iter()) {
            -1.0
        } else {
            1.0
        };
        u.set_column(dst, &(raw_u.column(src) * flip));
        vt.set_row(dst, &(raw_vt.row(src) * flip));
        sigma.push(raw_sigma[src].abs());
    }

    Ok(SvdFactors { u, sigma, vt })
}

/// True when the first entry of maximal magnitude is negative.
fn leading_entry_negative<'a>(values: impl Iterator<Item = &'a f64>) -> bool {
    let mut best = 0.0f64;
    let mut negative = false;
    for &v in values {
        if v.abs() > best {
            best = v.abs();
            negative = v < 0.0;
        }
    }
    negative
}

/// Sums `u_i σ_i v_iᵀ` over `indices`, or over every component when `None`.
pub fn reconstruct(f: &SvdFactors, indices: Option<&DirectionSet>) -> Result<Matrix> {
    let all;
    let indices = match indices {
        Some(set) => {
            set.check_within(f.k())?;
            set
        }
        None => {
            all = DirectionSet::leading(f.k());
            &all
        }
    };
    let (us, vts) = scaled_components(f, indices, |s| s);
    Ok(us * vts)
}

/// Returns `(U[:, I]·g(Σ[I]), Vᵀ[I, :])` so that their product is a partial reconstruction.
pub(crate) fn scaled_components(
    f: &SvdFactors,
    indices: &DirectionSet,
    scale: impl Fn(f64) -> f64,
) -> (Matrix, Matrix) {
    let r = indices.len();
    let mut us = Matrix::zeros(f.rows(), r);
    let mut vts = Matrix::zeros(r, f.cols());
    for (j, i) in indices.iter().enumerate() {
        us.set_column(j, &(f.u.column(i) * scale(f.sigma[i])));
        vts.set_row(j, &f.vt.row(i));
    }
    (us, vts)
}

/// Projects a residual onto the singular directions of `f`: `d_i = |u_iᵀ ΔW v_i|`.
pub fn project_residual(f: &SvdFactors, delta_w: &Matrix) -> Result<ProjectionVector> {
    ensure!(
        delta_w.shape() == (f.rows(), f.cols()),
        "residual shape {:?} does not match factors {}x{}",
        delta_w.shape(),
        f.rows(),
        f.cols()
    );
    let dw_v = delta_w * f.vt.transpose();
    let d = (0..f.k())
        .map(|i| f.u.column(i).dot(&dw_v.column(i)).abs())
        .collect();
    Ok(ProjectionVector(d))
}
