//! Structural-dimension inference: the sequential permutation test on the
//! tail-eigenvalue statistic and the BIC-type spectral criterion.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{fit_msir, MsirFit, MsirOptions};
use crate::linalg::generalized_eigen;
use crate::rng::{derive_seed, seeded_rng};

/// Penalty used by the BIC-type criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Penalty {
    /// C(n,p,d) = C_n d(2p-d+1)/2 with C_n = (0.5 log n + 0.1 n^{1/3})/(2 n/H).
    ZhuMiaoPeng,
    /// C(n,p,d) = -(p-d) log n; counts the p-d spectrum parameters.
    #[default]
    ZhuZhu,
}

impl std::str::FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zhuzhu" => Ok(Penalty::ZhuZhu),
            "zmp" | "zhumiaopeng" => Ok(Penalty::ZhuMiaoPeng),
            other => Err(Error::InvalidOptions(format!("unknown penalty {other:?}"))),
        }
    }
}

/// Result of dimension inference. Fields for a method are `None` when that
/// method was not run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionReport {
    /// Tail statistic n Σ_{j>d} λ̂_j for d = 0..p-1.
    pub lambda_stats: Vec<f64>,
    /// Permutation p-values for the tested prefix of d values.
    pub p_values: Option<Vec<f64>>,
    /// BIC-type criterion G(d) for d = 0..p-1.
    pub g: Option<Vec<f64>>,
    /// θ̂_i = λ̂_i + 1 for i = 1..p.
    pub theta: Vec<f64>,
    /// Number of θ̂_i > 1.
    pub tau: usize,
    pub penalty: Penalty,
    pub alpha: f64,
    pub n_perms: usize,
    /// Dimension selected by the permutation test, if run.
    pub d_perm: Option<usize>,
    /// Dimension selected by the BIC-type criterion, if run.
    pub d_bic: Option<usize>,
}

impl DimensionReport {
    /// Merge the permutation fields of `perm` with the BIC fields of `bic`.
    pub fn merged(perm: DimensionReport, bic: DimensionReport) -> DimensionReport {
        DimensionReport {
            p_values: perm.p_values,
            d_perm: perm.d_perm,
            n_perms: perm.n_perms,
            alpha: perm.alpha,
            ..bic
        }
    }
}

/// Tail statistic Λ̂_d = n Σ_{j=d+1}^{p} λ̂_j; eigenvalues beyond the fit's
/// retained directions count as zero.
pub fn lambda_stat(fit: &MsirFit, d: usize) -> Result<f64> {
    if d >= fit.p {
        return Err(Error::DimensionOutOfRange { d, max: fit.p - 1 });
    }
    let padded = fit.eigenvalues_padded();
    Ok(lambda_stats_from_eigenvalues(&padded, fit.n)[d])
}

/// Λ̂_d for every d = 0..p-1 from a full-length eigenvalue vector.
pub fn lambda_stats_from_eigenvalues(lambdas: &[f64], n: usize) -> Vec<f64> {
    let p = lambdas.len();
    let mut out = vec![0.0; p];
    let mut tail = 0.0;
    for d in (0..p).rev() {
        tail += lambdas[d];
        out[d] = n as f64 * tail;
        // out[d] = n * sum_{j=d+1..p} after shifting: position d holds the
        // tail starting at index d, i.e. sum over j >= d+1 in 1-based terms.
    }
    out
}

/// Options for the sequential permutation test.
#[derive(Debug, Clone)]
pub struct PermutationOptions {
    /// Fit options reused for the base fit and every re-fit.
    pub fit: MsirOptions,
    /// Number of permutation replicates R per tested dimension.
    pub n_perms: usize,
    pub alpha: f64,
    /// Keep testing past the first accepted dimension (full p-value table).
    pub exhaustive: bool,
    /// Stop counting a dimension's replicates once acceptance is certain.
    /// The selected dimension is unchanged; recorded p-values at accepted
    /// dimensions become lower bounds.
    pub decision_only: bool,
    /// Largest dimension to test (None: p-1).
    pub max_d: Option<usize>,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        Self {
            fit: MsirOptions::default(),
            n_perms: 199,
            alpha: 0.05,
            exhaustive: false,
            decision_only: false,
            max_d: None,
        }
    }
}

const REPLICATE_TAG: u64 = 0x9000_0000_0000_0000;

/// Sequential permutation test for the structural dimension.
///
/// For each d starting at 0: project onto the estimated directions, permute
/// the trailing block of predictors' rows, re-run the full estimation pipeline
/// on the joined data and recompute the tail statistic. The p-value uses the
/// add-one estimator (1 + #exceedances)/(R + 1). Testing stops at the first
/// p-value above `alpha`; if every tested d is rejected the dimension is p.
pub fn permutation_test(data: &Dataset, opts: &PermutationOptions) -> Result<DimensionReport> {
    if opts.n_perms < 19 {
        return Err(Error::InvalidOptions(
            "permutation test needs at least 19 replicates".into(),
        ));
    }
    let base = fit_msir(data, &opts.fit)?;
    let p = base.p;
    let n = base.n;
    let lambdas = base.eigenvalues_padded();
    let lambda_stats = lambda_stats_from_eigenvalues(&lambdas, n);
    let theta: Vec<f64> = lambdas.iter().map(|l| l + 1.0).collect();
    let tau = theta.iter().filter(|&&t| t > 1.0).count();

    // all p eigenvectors of the base decomposition, for the partition step
    let pairs = generalized_eigen(base.kernel.view(), &base.sigma)?;
    let z_all = data.predictors.dot(&pairs.vectors);

    let max_d = opts.max_d.unwrap_or(p - 1).min(p - 1);
    let r = opts.n_perms;
    let mut p_values = Vec::new();
    let mut d_hat = None;
    for (d, &observed) in lambda_stats.iter().enumerate().take(max_d + 1) {
        let exceed = count_exceedances(data, opts, &z_all, d, observed, r)?;
        let p_value = (1.0 + exceed as f64) / (r as f64 + 1.0);
        p_values.push(p_value);
        if p_value > opts.alpha {
            if d_hat.is_none() {
                d_hat = Some(d);
            }
            if !opts.exhaustive {
                break;
            }
        }
    }
    Ok(DimensionReport {
        lambda_stats,
        p_values: Some(p_values),
        g: None,
        theta,
        tau,
        penalty: Penalty::default(),
        alpha: opts.alpha,
        n_perms: r,
        d_perm: Some(d_hat.unwrap_or(p)),
        d_bic: None,
    })
}

/// Count replicates with Λ* >= Λ̂_d. Replicates run in parallel in fixed
/// chunks so early stopping stays deterministic.
fn count_exceedances(
    data: &Dataset,
    opts: &PermutationOptions,
    z_all: &Array2<f64>,
    d: usize,
    observed: f64,
    r: usize,
) -> Result<usize> {
    let chunk = 16usize;
    let mut exceed = 0usize;
    let mut done = 0usize;
    while done < r {
        let hi = (done + chunk).min(r);
        let counts: usize = (done..hi)
            .into_par_iter()
            .map(|rep| {
                let stat = permuted_stat(data, opts, z_all, d, rep as u64);
                usize::from(stat >= observed)
            })
            .sum();
        exceed += counts;
        done = hi;
        if opts.decision_only && (1.0 + exceed as f64) / (r as f64 + 1.0) > opts.alpha {
            break;
        }
    }
    Ok(exceed)
}

/// One permutation replicate: permute the rows of the trailing p-d projected
/// predictors, re-fit, return Λ*_d. A failed re-fit counts as +∞, which is
/// conservative.
fn permuted_stat(
    data: &Dataset,
    opts: &PermutationOptions,
    z_all: &Array2<f64>,
    d: usize,
    rep: u64,
) -> f64 {
    let n = z_all.nrows();
    let seed = derive_seed(opts.fit.seed, REPLICATE_TAG | (rep << 8) | d as u64);
    let mut rng = seeded_rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut z_perm = z_all.clone();
    for (i, &src) in perm.iter().enumerate() {
        for j in d..z_all.ncols() {
            z_perm[[i, j]] = z_all[[src, j]];
        }
    }
    let rebuilt = match Dataset::new(z_perm, data.response.clone()) {
        Ok(ds) => ds,
        Err(e) => {
            log::warn!("permutation replicate failed to assemble: {e}");
            return f64::INFINITY;
        }
    };
    let mut fit_opts = opts.fit.clone();
    fit_opts.seed = seed;
    match fit_msir(&rebuilt, &fit_opts) {
        Ok(fit) => {
            let lambdas = fit.eigenvalues_padded();
            lambda_stats_from_eigenvalues(&lambdas, n)[d]
        }
        Err(e) => {
            log::warn!("permutation re-fit failed (counted as exceedance): {e}");
            f64::INFINITY
        }
    }
}

/// BIC-type criterion from a fitted estimate.
pub fn bic_dimension(fit: &MsirFit, penalty: Penalty) -> DimensionReport {
    bic_dimension_from_eigenvalues(&fit.eigenvalues_padded(), fit.n, fit.sliced.h, penalty)
}

/// BIC-type criterion from an eigenvalue vector of length p.
///
/// G(d) = log L_d − C(n, p, d) with
/// log L_d = (n/2) Σ_{i=1+min(τ,d)}^{p} (log θ̂_i + 1 − θ̂_i), θ̂_i = λ̂_i + 1,
/// and τ the number of θ̂_i above 1. The eigenvalues come straight from the
/// generalized decomposition, i.e. the spectrum of the standardized-predictor
/// kernel Σ̂^{-1/2} M̂ Σ̂^{-1/2}.
pub fn bic_dimension_from_eigenvalues(
    lambdas: &[f64],
    n: usize,
    h: usize,
    penalty: Penalty,
) -> DimensionReport {
    let p = lambdas.len();
    let theta: Vec<f64> = lambdas.iter().map(|l| l + 1.0).collect();
    let tau = theta.iter().filter(|&&t| t > 1.0).count();
    let nf = n as f64;
    let log_n = nf.ln();

    let log_l = |d: usize| -> f64 {
        let start = 1 + tau.min(d); // 1-based index of the first tail term
        (nf / 2.0)
            * theta[(start - 1)..]
                .iter()
                .map(|&t| t.ln() + 1.0 - t)
                .sum::<f64>()
    };
    let c = |d: usize| -> f64 {
        match penalty {
            Penalty::ZhuZhu => -((p - d) as f64) * log_n,
            Penalty::ZhuMiaoPeng => {
                let c_n = (0.5 * log_n + 0.1 * nf.powf(1.0 / 3.0)) / (2.0 * nf / h as f64);
                c_n * (d as f64) * (2.0 * p as f64 - d as f64 + 1.0) / 2.0
            }
        }
    };

    let g: Vec<f64> = (0..p).map(|d| log_l(d) - c(d)).collect();
    let d_hat = g
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite G"))
        .map(|(d, _)| d)
        .unwrap_or(0);

    DimensionReport {
        lambda_stats: lambda_stats_from_eigenvalues(lambdas, n),
        p_values: None,
        g: Some(g),
        theta,
        tau,
        penalty,
        alpha: 0.05,
        n_perms: 0,
        d_perm: None,
        d_bic: Some(d_hat),
    }
}

/// Sequential chi-square test on the tail statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub dof: Vec<usize>,
    pub d_hat: usize,
}

/// Classic asymptotic chi-square test with (p-d)(H-d-1) degrees of freedom.
///
/// The reference distribution is justified for the slice-means estimator, so
/// this is only accepted for fits without mixture components (SIR).
pub fn sir_chi_square_test(fit: &MsirFit, alpha: f64) -> Result<ChiSquareTest> {
    if !fit.slice_mixtures.is_empty() && fit.slice_mixtures.iter().any(|m| m.k() > 1) {
        return Err(Error::InvalidOptions(
            "chi-square dimension test applies to slice-mean (SIR) fits only".into(),
        ));
    }
    let p = fit.p;
    let h = fit.sliced.h;
    let lambdas = fit.eigenvalues_padded();
    let stats = lambda_stats_from_eigenvalues(&lambdas, fit.n);
    let mut statistics = Vec::new();
    let mut p_values = Vec::new();
    let mut dof = Vec::new();
    let mut d_hat = None;
    for (d, &stat) in stats.iter().enumerate() {
        if h < d + 2 {
            break; // degrees of freedom would be non-positive
        }
        let df = (p - d) * (h - d - 1);
        let dist = ChiSquared::new(df as f64).expect("df >= 1");
        let pv = 1.0 - dist.cdf(stat);
        statistics.push(stat);
        p_values.push(pv);
        dof.push(df);
        if pv > alpha && d_hat.is_none() {
            d_hat = Some(d);
            break;
        }
    }
    Ok(ChiSquareTest {
        statistics,
        p_values,
        dof,
        d_hat: d_hat.unwrap_or(p),
    })
}
