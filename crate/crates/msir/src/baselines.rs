//! Moment-based baseline estimators: SIR, SAVE, and PHD.
//!
//! All three share the generalized-eigen backend and return the same fit
//! struct as the mixture estimator, with empty `slice_mixtures`. SIR is coded
//! directly from slice means so it can serve as an independent cross-check of
//! the mixture pipeline restricted to one component per slice.

use ndarray::{Array1, Array2, Axis};

use crate::dataset::{Dataset, Response};
use crate::error::{Error, Result};
use crate::estimator::{directions_from_kernel, MsirFit};
use crate::linalg::{sample_covariance, symmetric_eigen_desc, SpdMatrix};
use crate::slicing::{default_num_slices, slice_response, SliceSpec, SlicedResponse, Treatment};

fn resolve_slices(spec: SliceSpec, n: usize, p: usize) -> usize {
    match spec {
        SliceSpec::Auto => default_num_slices(n, p),
        SliceSpec::Fixed(h) => h,
    }
}

fn trivial_slices(n: usize) -> SlicedResponse {
    SlicedResponse {
        labels: vec![1; n],
        counts: vec![n],
        proportions: vec![1.0],
        h: 1,
        cutpoints: None,
        levels: None,
    }
}

/// Sliced inverse regression: the kernel is the between-slice-mean scatter
/// Var(E(X | Ỹ)).
pub fn fit_sir(data: &Dataset, slices: SliceSpec, treatment: Treatment) -> Result<MsirFit> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(Error::TooFewObservations { n, p });
    }
    let h = resolve_slices(slices, n, p);
    let sliced = slice_response(&data.response, h, treatment)?;

    let mut slice_means: Vec<Array1<f64>> = Vec::with_capacity(sliced.h);
    for label in 1..=sliced.h {
        let rows = sliced.slice_indices(label);
        let xh = data.predictors.select(Axis(0), &rows);
        slice_means.push(xh.mean_axis(Axis(0)).expect("slice non-empty"));
    }
    let mut grand = Array1::zeros(p);
    for (m, &tau) in slice_means.iter().zip(sliced.proportions.iter()) {
        grand.scaled_add(tau, m);
    }
    let mut kernel = Array2::zeros((p, p));
    for (m, &tau) in slice_means.iter().zip(sliced.proportions.iter()) {
        for i in 0..p {
            let di = m[i] - grand[i];
            for j in i..p {
                kernel[[i, j]] += tau * di * (m[j] - grand[j]);
            }
        }
    }
    for i in 0..p {
        for j in (i + 1)..p {
            kernel[[j, i]] = kernel[[i, j]];
        }
    }

    let sigma = sample_covariance(data.predictors.view())?;
    let d_max = p.min(sliced.h.saturating_sub(1));
    let (eigenvalues, raw_dirs, basis) = directions_from_kernel(&kernel, &sigma, d_max)?;
    let weights = sliced.proportions.clone();
    Ok(MsirFit {
        kernel,
        sigma,
        weights,
        grand_mean: grand,
        eigenvalues,
        raw_dirs,
        basis,
        slice_mixtures: Vec::new(),
        sliced,
        component_labels: Vec::new(),
        d_max,
        n,
        p,
    })
}

/// Standardize the predictors: rows of (X - x̄) Σ^{-1/2}.
fn standardize(data: &Dataset) -> Result<(Array2<f64>, Array1<f64>, SpdMatrix, SpdMatrix)> {
    let sigma = sample_covariance(data.predictors.view())?;
    let whitener = sigma.inv_sqrt_default()?;
    let mean = data.predictors.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &data.predictors - &mean.view().insert_axis(Axis(0));
    let z = centered.dot(whitener.as_array());
    Ok((z, mean, sigma, whitener))
}

/// SAVE kernel from per-slice covariances of the standardized predictors:
/// Σ_h τ_h (I − Var(X̃ | h))².
fn save_kernel(slice_covs: &[Array2<f64>], proportions: &[f64]) -> Array2<f64> {
    let p = slice_covs[0].nrows();
    let eye = Array2::<f64>::eye(p);
    let mut kernel = Array2::zeros((p, p));
    for (v, &tau) in slice_covs.iter().zip(proportions.iter()) {
        let diff = &eye - v;
        kernel.scaled_add(tau, &diff.dot(&diff));
    }
    0.5 * (&kernel + &kernel.t())
}

/// Sliced average variance estimation.
pub fn fit_save(data: &Dataset, slices: SliceSpec, treatment: Treatment) -> Result<MsirFit> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(Error::TooFewObservations { n, p });
    }
    let h = resolve_slices(slices, n, p);
    let sliced = slice_response(&data.response, h, treatment)?;
    let (z, mean, sigma, whitener) = standardize(data)?;

    let mut slice_covs = Vec::with_capacity(sliced.h);
    for label in 1..=sliced.h {
        let rows = sliced.slice_indices(label);
        if rows.len() < 2 {
            return Err(Error::TooFewRows {
                need: 2,
                got: rows.len(),
            });
        }
        let zh = z.select(Axis(0), &rows);
        slice_covs.push(sample_covariance(zh.view())?.as_array().clone());
    }
    let kernel_std = save_kernel(&slice_covs, &sliced.proportions);

    // ordinary symmetric eigen in standardized coordinates, mapped back
    let (values, u) = symmetric_eigen_desc(kernel_std.view());
    let mut raw_dirs = whitener.as_array().dot(&u);
    crate::linalg::fix_column_signs(&mut raw_dirs);
    let mut basis = raw_dirs.clone();
    for mut col in basis.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    let eigenvalues = values.mapv(|v| v.max(0.0));
    Ok(MsirFit {
        kernel: kernel_std,
        sigma,
        weights: sliced.proportions.clone(),
        grand_mean: mean,
        eigenvalues,
        raw_dirs,
        basis,
        slice_mixtures: Vec::new(),
        sliced,
        component_labels: Vec::new(),
        d_max: p,
        n,
        p,
    })
}

/// Which response weighting PHD uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhdVariant {
    /// Weight by y - ȳ.
    #[default]
    Response,
    /// Weight by the OLS residual of y on the standardized predictors.
    Residual,
}

/// Principal Hessian directions.
///
/// Kernel Σ_yzz = n⁻¹ Σ w_i x̃_i x̃_iᵀ on standardized predictors, with
/// w_i = y_i − ȳ (or the OLS residual). Directions are ordered by absolute
/// eigenvalue and `eigenvalues` stores those absolute values.
pub fn fit_phd(data: &Dataset, variant: PhdVariant) -> Result<MsirFit> {
    let (n, p) = (data.n(), data.p());
    if n < p + 2 {
        return Err(Error::TooFewRows { need: p + 2, got: n });
    }
    let y = match &data.response {
        Response::Numeric(y) => y.clone(),
        Response::Categorical(_) => {
            return Err(Error::InvalidOptions(
                "PHD needs a numeric response".into(),
            ))
        }
    };
    let (z, mean, sigma, whitener) = standardize(data)?;
    let y_bar = y.mean().expect("n >= 2");
    let mut w = y.mapv(|v| v - y_bar);
    if variant == PhdVariant::Residual {
        // standardized predictors have identity covariance, so the OLS slope
        // is Zᵀw / n
        let slope = z.t().dot(&w) / n as f64;
        w = &w - &z.dot(&slope);
    }

    let mut kernel = Array2::zeros((p, p));
    for (row, &wi) in z.rows().into_iter().zip(w.iter()) {
        for i in 0..p {
            let vi = wi * row[i];
            for j in i..p {
                kernel[[i, j]] += vi * row[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..p {
        for j in i..p {
            let v = kernel[[i, j]] * inv_n;
            kernel[[i, j]] = v;
            kernel[[j, i]] = v;
        }
    }

    let (values, u) = symmetric_eigen_desc(kernel.view());
    // reorder by |eigenvalue| descending
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite eigenvalues")
    });
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| values[i].abs()));
    let mut u_sorted = Array2::zeros((p, p));
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.column_mut(dst).assign(&u.column(src));
    }
    let mut raw_dirs = whitener.as_array().dot(&u_sorted);
    crate::linalg::fix_column_signs(&mut raw_dirs);
    let mut basis = raw_dirs.clone();
    for mut col in basis.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    Ok(MsirFit {
        kernel,
        sigma,
        weights: vec![1.0],
        grand_mean: mean,
        eigenvalues,
        raw_dirs,
        basis,
        slice_mixtures: Vec::new(),
        sliced: trivial_slices(n),
        component_labels: Vec::new(),
        d_max: p,
        n,
        p,
    })
}
