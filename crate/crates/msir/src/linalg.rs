//! Dense symmetric linear-algebra kernels.
//!
//! Covariance estimation, SPD inverse square root, the generalized symmetric
//! eigenproblem `M v = λ Σ v`, and the projection-based subspace distance.
//! Symmetric eigendecompositions are delegated to nalgebra; everything here is
//! pure and reentrant.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Default relative eigenvalue floor used when inverting near-singular
/// covariance matrices (relative to the mean eigenvalue).
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-8;

/// A symmetric positive semi-definite matrix.
///
/// Construction symmetrizes the input and rejects matrices whose asymmetry
/// exceeds 1e-10 relative to the largest entry. Strict positive definiteness
/// is not required here; it is enforced where needed by eigenvalue flooring.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: Array2<f64>,
}

impl SpdMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let scale = m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        let mut max_asym = 0.0_f64;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                max_asym = max_asym.max((m[[i, j]] - m[[j, i]]).abs());
            }
        }
        if scale > 0.0 && max_asym > 1e-10 * scale.max(1.0) {
            return Err(Error::NotSymmetric { max_asym });
        }
        let mut sym = m;
        for i in 0..sym.nrows() {
            for j in (i + 1)..sym.ncols() {
                let v = 0.5 * (sym[[i, j]] + sym[[j, i]]);
                sym[[i, j]] = v;
                sym[[j, i]] = v;
            }
        }
        Ok(Self { entries: sym })
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.entries.diag().sum()
    }

    /// Inverse square root with the default eigenvalue floor.
    pub fn inv_sqrt_default(&self) -> Result<SpdMatrix> {
        inv_sqrt(self, DEFAULT_EIGEN_FLOOR)
    }
}

/// Eigenpairs of a generalized symmetric eigenproblem.
///
/// Eigenvalues are sorted descending; column `j` of `vectors` satisfies
/// `vᵀ Σ v = 1` and is Σ-orthogonal to the other columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub eigenvalues: Array1<f64>,
    pub vectors: Array2<f64>,
}

pub(crate) fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub(crate) fn symmetric_eigen_desc(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let p = a.nrows();
    let eig = SymmetricEigen::new(to_na(a));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalues are finite")
    });
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Array2::zeros((p, p));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..p {
            vectors[[r, dst]] = eig.eigenvectors[(r, src)];
        }
    }
    (values, vectors)
}

/// Flip each column so its largest-magnitude entry is positive.
///
/// Fixes the sign ambiguity of eigenvectors so fits are reproducible across
/// runs and platforms. The first occurrence wins on magnitude ties.
pub(crate) fn fix_column_signs(m: &mut Array2<f64>) {
    for mut col in m.axis_iter_mut(Axis(1)) {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// Sample covariance with divisor `n` (maximum-likelihood convention).
///
/// The marginal covariance of the estimator is defined with the 1/n divisor,
/// so that is what all downstream kernels use.
pub fn sample_covariance(x: ArrayView2<'_, f64>) -> Result<SpdMatrix> {
    let (n, p) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(Error::TooFewRows { need: 2, got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "predictor matrix".into(),
        });
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let mut cov = Array2::zeros((p, p));
    for row in x.rows() {
        for i in 0..p {
            let di = row[i] - mean[i];
            for j in i..p {
                cov[[i, j]] += di * (row[j] - mean[j]);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..p {
        for j in i..p {
            let v = cov[[i, j]] * inv_n;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    SpdMatrix::new(cov)
}

/// SPD inverse square root by spectral decomposition.
///
/// Eigenvalues are clamped below at `floor * trace(S)/p` before taking
/// λ^{-1/2}, which keeps near-singular covariance estimates usable (small
/// slices and permutation re-fits routinely produce them).
pub fn inv_sqrt(s: &SpdMatrix, floor: f64) -> Result<SpdMatrix> {
    let p = s.dim();
    let tr = s.trace();
    if tr <= 0.0 || s.as_array().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let clamp = floor * tr / p as f64;
    let (values, vectors) = symmetric_eigen_desc(s.as_array().view());
    let inv_roots: Vec<f64> = values.iter().map(|&l| l.max(clamp).powf(-0.5)).collect();
    let mut out = Array2::zeros((p, p));
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0;
            for (k, &ir) in inv_roots.iter().enumerate() {
                acc += vectors[[i, k]] * ir * vectors[[j, k]];
            }
            out[[i, j]] = acc;
            out[[j, i]] = acc;
        }
    }
    SpdMatrix::new(out)
}

/// Solve `M v = λ Σ v` for symmetric PSD `M`.
///
/// Computed as the symmetric eigendecomposition of W = Σ^{-1/2} M Σ^{-1/2}
/// followed by the back-map v = Σ^{-1/2} u, so the eigenvalues equal those of
/// W and the vectors come out Σ-orthonormal. Column signs are fixed
/// deterministically.
pub fn generalized_eigen(m: ArrayView2<'_, f64>, s: &SpdMatrix) -> Result<EigenPairs> {
    generalized_eigen_floored(m, s, DEFAULT_EIGEN_FLOOR)
}

pub fn generalized_eigen_floored(
    m: ArrayView2<'_, f64>,
    s: &SpdMatrix,
    floor: f64,
) -> Result<EigenPairs> {
    let p = s.dim();
    if m.nrows() != p || m.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: m.nrows(),
        });
    }
    let scale = m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let mut max_asym = 0.0_f64;
    for i in 0..p {
        for j in (i + 1)..p {
            max_asym = max_asym.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    if scale > 0.0 && max_asym > 1e-8 * scale.max(1.0) {
        return Err(Error::NotSymmetric { max_asym });
    }

    let root = inv_sqrt(s, floor)?;
    let r = root.as_array();
    // W = Σ^{-1/2} M Σ^{-1/2}, symmetrized against roundoff.
    let w = r.dot(&m.dot(r));
    let w = 0.5 * (&w + &w.t());
    let (values, u) = symmetric_eigen_desc(w.view());
    let mut vectors = r.dot(&u);
    fix_column_signs(&mut vectors);
    Ok(EigenPairs {
        eigenvalues: values,
        vectors,
    })
}

/// Distance between the column spans of two bases.
#[derive(Debug, Clone, Copy)]
pub struct SubspaceDistance {
    /// Spectral norm of the difference of the orthogonal projections; equals
    /// the sine of the maximal principal angle, in [0, 1].
    pub delta: f64,
    /// arcsin(delta) in degrees.
    pub angle_deg: f64,
}

/// Orthogonal projection onto the column span of `b`.
fn projection_matrix(b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (p, d) = (b.nrows(), b.ncols());
    if d == 0 || d > p {
        return Err(Error::RankDeficient);
    }
    let qr = to_na(b).qr();
    let q = qr.q();
    let r = qr.r();
    let r_max = (0..d).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    if r_max == 0.0 || (0..d).any(|i| r[(i, i)].abs() < 1e-10 * r_max) {
        return Err(Error::RankDeficient);
    }
    let q = from_na(&q);
    Ok(q.dot(&q.t()))
}

/// Spectral-norm distance Δ between two subspaces of the same ambient space.
///
/// Δ = ‖P₁ − P₂‖₂ = sin α where α is the maximal principal angle. Invariant
/// under change of basis of either argument.
pub fn subspace_distance(b1: ArrayView2<'_, f64>, b2: ArrayView2<'_, f64>) -> Result<SubspaceDistance> {
    if b1.nrows() != b2.nrows() {
        return Err(Error::DimensionMismatch {
            expected: b1.nrows(),
            got: b2.nrows(),
        });
    }
    let diff = projection_matrix(b1)? - projection_matrix(b2)?;
    // The difference of projections is symmetric, so the spectral norm is the
    // largest absolute eigenvalue.
    let (values, _) = symmetric_eigen_desc(diff.view());
    let delta = values.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).min(1.0);
    Ok(SubspaceDistance {
        delta,
        angle_deg: delta.asin().to_degrees(),
    })
}
