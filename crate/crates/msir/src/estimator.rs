//! The model-based SIR estimator.
//!
//! Pipeline: slice the response, fit a BIC-selected Gaussian mixture inside
//! each slice, assemble the weighted between-component-mean kernel, and solve
//! the generalized eigenproblem against the marginal covariance. Directions
//! are scaled to unit norm; projections use the raw Σ-orthonormal directions'
//! normalized versions. With one component per slice this reduces exactly to
//! SIR.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{select_model, GmmOptions, SliceMixture};
use crate::linalg::{generalized_eigen, sample_covariance, SpdMatrix};
use crate::rng::derive_seed;
use crate::slicing::{default_num_slices, slice_response, SliceSpec, SlicedResponse, Treatment};

/// Options controlling a MSIR fit.
#[derive(Debug, Clone)]
pub struct MsirOptions {
    pub slices: SliceSpec,
    pub treatment: Treatment,
    pub gmm: GmmOptions,
    pub seed: u64,
}

impl Default for MsirOptions {
    fn default() -> Self {
        Self {
            slices: SliceSpec::Auto,
            treatment: Treatment::Auto,
            gmm: GmmOptions::default(),
            seed: 0,
        }
    }
}

/// A fitted dimension-reduction estimate.
///
/// The moment baselines (SIR, SAVE, PHD) reuse this struct with empty
/// `slice_mixtures`.
#[derive(Debug, Clone)]
pub struct MsirFit {
    /// Weighted between-component-mean scatter M.
    pub kernel: Array2<f64>,
    /// Marginal covariance of the predictors (divisor n).
    pub sigma: SpdMatrix,
    /// Component weights ω_hk = τ_h π_hk, slice-major.
    pub weights: Vec<f64>,
    /// ω-weighted mean of the component means.
    pub grand_mean: Array1<f64>,
    /// Leading eigenvalues, descending, truncated to `d_max` and clamped at 0.
    pub eigenvalues: Array1<f64>,
    /// Σ-orthonormal eigenvectors, one column per retained direction.
    pub raw_dirs: Array2<f64>,
    /// Unit-norm directions (raw_dirs columns rescaled).
    pub basis: Array2<f64>,
    pub slice_mixtures: Vec<SliceMixture>,
    pub sliced: SlicedResponse,
    /// Per-observation global mixture-component index (1..=K, slice-major),
    /// assigned by maximum responsibility. Empty for moment baselines.
    pub component_labels: Vec<usize>,
    /// Number of retained directions.
    pub d_max: usize,
    pub n: usize,
    pub p: usize,
}

impl MsirFit {
    /// Total number of mixture components K across slices.
    pub fn total_components(&self) -> usize {
        if self.slice_mixtures.is_empty() {
            self.sliced.h
        } else {
            self.slice_mixtures.iter().map(|m| m.k()).sum()
        }
    }

    /// Eigenvalues padded with zeros out to the ambient dimension p.
    pub fn eigenvalues_padded(&self) -> Vec<f64> {
        let mut v = self.eigenvalues.to_vec();
        v.resize(self.p, 0.0);
        v
    }

    /// Largest deviation between each eigenvalue and the ω-weighted variance
    /// of the projected component means along its direction. Near zero by
    /// construction; exposed as a numerical self-check.
    pub fn eigenvalue_identity_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        let means = self.component_means();
        for j in 0..self.d_max {
            let v = self.raw_dirs.column(j);
            let mut var = 0.0;
            for (w, mean) in self.weights.iter().zip(means.iter()) {
                let z = v.dot(&(mean - &self.grand_mean));
                var += w * z * z;
            }
            worst = worst.max((var - self.eigenvalues[j]).abs());
        }
        worst
    }

    /// All component means in slice-major order (slice means for baselines
    /// would be empty here; only meaningful for mixture fits).
    pub fn component_means(&self) -> Vec<Array1<f64>> {
        self.slice_mixtures
            .iter()
            .flat_map(|m| m.components.iter().map(|c| c.mean.clone()))
            .collect()
    }
}

/// Assemble the kernel matrix from per-slice mixtures.
///
/// Returns (M, ω, μ) where ω are the slice-by-component weights τ_h π_hk and
/// μ = Σ ω_hk μ_hk is the weighted grand mean.
pub fn kernel_matrix(
    mixtures: &[SliceMixture],
    proportions: &[f64],
) -> Result<(Array2<f64>, Vec<f64>, Array1<f64>)> {
    if mixtures.is_empty() || mixtures.len() != proportions.len() {
        return Err(Error::DimensionMismatch {
            expected: proportions.len(),
            got: mixtures.len(),
        });
    }
    let p = mixtures[0].dim();
    let mut weights = Vec::new();
    let mut means: Vec<&Array1<f64>> = Vec::new();
    for (mix, &tau) in mixtures.iter().zip(proportions.iter()) {
        if mix.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: mix.dim(),
            });
        }
        for c in &mix.components {
            weights.push(tau * c.weight);
            means.push(&c.mean);
        }
    }
    let mut grand = Array1::zeros(p);
    for (&w, m) in weights.iter().zip(means.iter()) {
        grand.scaled_add(w, *m);
    }
    let mut kernel = Array2::zeros((p, p));
    for (&w, m) in weights.iter().zip(means.iter()) {
        for i in 0..p {
            let di = m[i] - grand[i];
            for j in i..p {
                kernel[[i, j]] += w * di * (m[j] - grand[j]);
            }
        }
    }
    for i in 0..p {
        for j in (i + 1)..p {
            kernel[[j, i]] = kernel[[i, j]];
        }
    }
    Ok((kernel, weights, grand))
}

/// Shared tail of every estimator: generalized eigendecomposition of the
/// kernel against the covariance, truncation, clamping, unit-norm scaling.
pub(crate) fn directions_from_kernel(
    kernel: &Array2<f64>,
    sigma: &SpdMatrix,
    d_max: usize,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let pairs = generalized_eigen(kernel.view(), sigma)?;
    let p = kernel.nrows();
    let d_max = d_max.min(p);
    let mut eigenvalues = Array1::zeros(d_max);
    for j in 0..d_max {
        let l = pairs.eigenvalues[j];
        if l < -1e-8 {
            log::warn!("clamping negative eigenvalue {l:.3e} to 0");
        }
        eigenvalues[j] = l.max(0.0);
    }
    let raw = pairs.vectors.slice(ndarray::s![.., ..d_max]).to_owned();
    let mut basis = raw.clone();
    for mut col in basis.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    Ok((eigenvalues, raw, basis))
}

/// Fit MSIR on a dataset.
pub fn fit_msir(data: &Dataset, opts: &MsirOptions) -> Result<MsirFit> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(Error::TooFewObservations { n, p });
    }
    let h = match opts.slices {
        SliceSpec::Auto => default_num_slices(n, p),
        SliceSpec::Fixed(h) => h,
    };
    let sliced = slice_response(&data.response, h, opts.treatment)?;
    for (idx, &count) in sliced.counts.iter().enumerate() {
        if count < 5 * p {
            log::warn!(
                "slice {} has {count} observations (< 5p = {}); full-covariance mixtures disabled there",
                idx + 1,
                5 * p
            );
        }
    }

    let slice_rows: Vec<Vec<usize>> = (1..=sliced.h).map(|l| sliced.slice_indices(l)).collect();
    let mixtures: Vec<SliceMixture> = slice_rows
        .par_iter()
        .enumerate()
        .map(|(hi, rows)| {
            let xh = data.predictors.select(Axis(0), rows);
            select_model(xh.view(), &opts.gmm, derive_seed(opts.seed, hi as u64))
        })
        .collect::<Result<_>>()?;

    let (kernel, weights, grand_mean) = kernel_matrix(&mixtures, &sliced.proportions)?;
    let sigma = sample_covariance(data.predictors.view())?;

    let total_k: usize = mixtures.iter().map(|m| m.k()).sum();
    let d_max = p.min(total_k.saturating_sub(1));
    let (eigenvalues, raw_dirs, basis) = directions_from_kernel(&kernel, &sigma, d_max)?;

    // global component index per observation, by maximum responsibility
    let mut component_labels = vec![0usize; n];
    let mut offset = 0usize;
    for (rows, mix) in slice_rows.iter().zip(mixtures.iter()) {
        let local = mix.map_labels();
        for (&row, &lab) in rows.iter().zip(local.iter()) {
            component_labels[row] = offset + lab + 1;
        }
        offset += mix.k();
    }

    Ok(MsirFit {
        kernel,
        sigma,
        weights,
        grand_mean,
        eigenvalues,
        raw_dirs,
        basis,
        slice_mixtures: mixtures,
        sliced,
        component_labels,
        d_max,
        n,
        p,
    })
}

/// Project rows of `x` onto the first `d` estimated directions after
/// centering by the training grand mean.
pub fn project(fit: &MsirFit, x: ArrayView2<'_, f64>, d: usize) -> Result<Array2<f64>> {
    if d < 1 || d > fit.d_max {
        return Err(Error::DimensionOutOfRange { d, max: fit.d_max });
    }
    if x.ncols() != fit.p {
        return Err(Error::DimensionMismatch {
            expected: fit.p,
            got: x.ncols(),
        });
    }
    let centered = &x - &fit.grand_mean.view().insert_axis(Axis(0));
    Ok(centered.dot(&fit.basis.slice(ndarray::s![.., ..d])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Response;
    use crate::gmm::{CovParam, GaussianComponent};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn mix_from_components(comps: Vec<GaussianComponent>) -> SliceMixture {
        SliceMixture {
            components: comps,
            param: CovParam::VVV,
            loglik: 0.0,
            bic: 0.0,
            n_obs: 10,
            responsibilities: Array2::zeros((0, 0)),
            loglik_trace: vec![],
            floored: false,
        }
    }

    fn comp(weight: f64, mean: Vec<f64>) -> GaussianComponent {
        let p = mean.len();
        GaussianComponent {
            weight,
            mean: Array1::from_vec(mean),
            cov: Array2::eye(p),
        }
    }

    #[test]
    fn kernel_is_zero_when_all_means_equal() {
        let m1 = mix_from_components(vec![comp(0.5, vec![1.0, 2.0]), comp(0.5, vec![1.0, 2.0])]);
        let m2 = mix_from_components(vec![comp(1.0, vec![1.0, 2.0])]);
        let (kernel, weights, grand) = kernel_matrix(&[m1, m2], &[0.5, 0.5]).unwrap();
        assert!(kernel.iter().all(|&v| v.abs() < 1e-15));
        assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grand[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn kernel_two_slices_opposite_means() {
        // one component per slice, means ±m, equal weights: M = m mᵀ
        let m = vec![2.0, -1.0];
        let m1 = mix_from_components(vec![comp(1.0, m.clone())]);
        let m2 = mix_from_components(vec![comp(1.0, m.iter().map(|v| -v).collect())]);
        let (kernel, _, grand) = kernel_matrix(&[m1, m2], &[0.5, 0.5]).unwrap();
        for g in grand.iter() {
            assert_abs_diff_eq!(*g, 0.0, epsilon = 1e-15);
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(kernel[[i, j]], m[i] * m[j], epsilon = 1e-14);
            }
        }
    }

    fn motivating_data(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::seeded_rng(seed);
        let x = Array2::from_shape_fn((n, 4), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + x[[i, 1]] * x[[i, 1]]);
        Dataset::new(x, Response::Numeric(y)).unwrap()
    }

    #[test]
    fn fit_requires_more_rows_than_columns() {
        let x = Array2::zeros((3, 4));
        let y = Response::Numeric(Array1::zeros(3));
        let data = Dataset::new(x, y).unwrap();
        assert!(matches!(
            fit_msir(&data, &MsirOptions::default()),
            Err(Error::TooFewObservations { .. })
        ));
    }

    #[test]
    fn eigenvalue_identity_holds_on_a_real_fit() {
        let data = motivating_data(300, 42);
        let fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        assert!(fit.d_max >= 2);
        assert!(
            fit.eigenvalue_identity_residual() < 1e-8,
            "residual {}",
            fit.eigenvalue_identity_residual()
        );
        // raw directions are Σ-orthonormal
        let s = fit.sigma.as_array();
        for j in 0..fit.d_max {
            for l in 0..fit.d_max {
                let q = fit
                    .raw_dirs
                    .column(j)
                    .dot(&s.dot(&fit.raw_dirs.column(l).to_owned()));
                let want = if j == l { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(q, want, epsilon = 1e-8);
            }
        }
        // basis columns have unit norm
        for j in 0..fit.d_max {
            let norm = fit.basis.column(j).dot(&fit.basis.column(j)).sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
        // grand mean from weighted component means matches the sample mean
        let sample_mean = data.predictors.mean_axis(Axis(0)).unwrap();
        for (a, b) in fit.grand_mean.iter().zip(sample_mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn projection_centers_and_projects() {
        let data = motivating_data(250, 7);
        let fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        let z = project(&fit, data.predictors.view(), fit.d_max).unwrap();
        assert_eq!(z.nrows(), 250);
        assert_eq!(z.ncols(), fit.d_max);
        // projecting the grand mean itself gives the zero vector
        let gm = fit
            .grand_mean
            .clone()
            .insert_axis(Axis(0));
        let z0 = project(&fit, gm.view(), fit.d_max).unwrap();
        for v in z0.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-10);
        }
        // span of projected training data equals span of raw directions
        let d = crate::linalg::subspace_distance(fit.basis.view(), fit.raw_dirs.view()).unwrap();
        assert_abs_diff_eq!(d.delta, 0.0, epsilon = 1e-8);
        // out-of-range d
        assert!(matches!(
            project(&fit, data.predictors.view(), fit.d_max + 1),
            Err(Error::DimensionOutOfRange { .. })
        ));
        let wrong = Array2::zeros((3, fit.p + 1));
        assert!(matches!(
            project(&fit, wrong.view(), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unit_basis_column_projects_matching_predictor() {
        let data = motivating_data(200, 3);
        let mut fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        // overwrite the first basis column with e1: Z column 1 must equal
        // centered X1
        fit.basis.column_mut(0).fill(0.0);
        fit.basis[[0, 0]] = 1.0;
        let z = project(&fit, data.predictors.view(), 1).unwrap();
        for i in 0..data.n() {
            let want = data.predictors[[i, 0]] - fit.grand_mean[0];
            assert_abs_diff_eq!(z[[i, 0]], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn motivating_example_recovers_both_directions() {
        let data = motivating_data(400, 11);
        let fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        let truth = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
        let est = fit.basis.slice(ndarray::s![.., ..2]);
        let dist = crate::linalg::subspace_distance(est, truth.view()).unwrap();
        assert!(
            dist.angle_deg < 25.0,
            "angle {} too large for one motivating sample",
            dist.angle_deg
        );
    }

    #[test]
    fn rescaling_a_predictor_leaves_projections_unchanged_at_k1() {
        // response with two strong, well-separated inverse-mean directions so
        // the retained eigenvectors are numerically stable
        let mut rng = crate::rng::seeded_rng(5);
        let x = Array2::from_shape_fn((300, 4), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let y = Array1::from_shape_fn(300, |i| {
            2.0 * x[[i, 0]] + (1.0 + x[[i, 1]]) * (1.0 + x[[i, 1]])
        });
        let data = Dataset::new(x, Response::Numeric(y)).unwrap();
        let opts = MsirOptions {
            gmm: GmmOptions {
                max_components: 1,
                ..GmmOptions::default()
            },
            ..MsirOptions::default()
        };
        let fit = fit_msir(&data, &opts).unwrap();
        // eigengap guards the comparison below
        assert!(fit.eigenvalues[1] > 2.0 * fit.eigenvalues[2]);

        let mut scaled = data.predictors.clone();
        scaled.column_mut(2).mapv_inplace(|v| v * 37.0);
        let data2 = Dataset::new(scaled, data.response.clone()).unwrap();
        let fit2 = fit_msir(&data2, &opts).unwrap();

        // the Σ-orthonormal directions transform exactly contravariantly, so
        // projections through them are invariant (up to column sign)
        let center = |ds: &Dataset, f: &MsirFit| {
            (&ds.predictors - &f.grand_mean.view().insert_axis(Axis(0)))
                .dot(&f.raw_dirs.slice(ndarray::s![.., ..2]))
        };
        let zr = center(&data, &fit);
        let zr2 = center(&data2, &fit2);
        for (a, b) in zr.iter().zip(zr2.iter()) {
            assert_abs_diff_eq!(a.abs(), b.abs(), epsilon = 1e-8);
        }

        // unit-norm basis projections change only by a positive per-column
        // scale (the norm of the rescaled eigenvector)
        let z = project(&fit, data.predictors.view(), 2).unwrap();
        let z2 = project(&fit2, data2.predictors.view(), 2).unwrap();
        for j in 0..2 {
            let num: f64 = z2.column(j).dot(&z2.column(j));
            let den: f64 = z.column(j).dot(&z.column(j));
            let scale = (num / den).sqrt();
            assert!(scale > 0.0);
            for (a, b) in z.column(j).iter().zip(z2.column(j).iter()) {
                assert_abs_diff_eq!(a.abs() * scale, b.abs(), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn component_labels_are_global_indices() {
        let data = motivating_data(300, 13);
        let fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        let k = fit.total_components();
        assert_eq!(fit.component_labels.len(), 300);
        assert!(fit.component_labels.iter().all(|&l| l >= 1 && l <= k));
        // every observation's component must belong to its own slice
        let mut offsets = vec![0usize];
        for m in &fit.slice_mixtures {
            offsets.push(offsets.last().unwrap() + m.k());
        }
        for i in 0..300 {
            let slice = fit.sliced.labels[i];
            let comp = fit.component_labels[i];
            assert!(comp > offsets[slice - 1] && comp <= offsets[slice]);
        }
    }

    #[test]
    fn discrete_response_slices_by_level() {
        let mut rng = crate::rng::seeded_rng(21);
        let n = 150;
        let x = Array2::from_shape_fn((n, 3), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let y = Array1::from_shape_fn(n, |i| (i % 3) as f64);
        let data = Dataset::new(x, Response::Numeric(y)).unwrap();
        let fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        assert_eq!(fit.sliced.h, 3);
        assert_eq!(
            fit.sliced.levels.as_ref().unwrap(),
            &vec!["0".to_string(), "1".into(), "2".into()]
        );
    }

    #[test]
    fn kernel_matrix_rejects_mismatched_inputs() {
        let m1 = mix_from_components(vec![comp(1.0, vec![0.0, 0.0])]);
        assert!(kernel_matrix(&[m1], &[0.5, 0.5]).is_err());
        let a = mix_from_components(vec![comp(1.0, vec![0.0, 0.0])]);
        let b = mix_from_components(vec![comp(1.0, vec![0.0, 0.0, 0.0])]);
        assert!(kernel_matrix(&[a, b], &[0.5, 0.5]).is_err());
        assert!(kernel_matrix(&[], &[]).is_err());
    }

    #[test]
    fn weights_are_probabilities() {
        let data = motivating_data(350, 17);
        let fit = fit_msir(&data, &MsirOptions::default()).unwrap();
        assert!(fit.weights.iter().all(|&w| w >= 0.0));
        assert_abs_diff_eq!(fit.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        let k = fit.total_components();
        assert_eq!(fit.weights.len(), k);
        assert_eq!(fit.d_max, 4.min(k - 1));
        // λ ≥ 0 after clamping
        assert!(fit.eigenvalues.iter().all(|&l| l >= 0.0));
    }
}
