//! Gaussian finite mixtures fitted by EM under parsimonious covariance
//! parameterizations, with BIC model selection over (K, parameterization).
//!
//! The covariance codes follow the model-based clustering convention: three
//! letters for volume/shape/orientation, E = equal across components,
//! V = varying, I = identity (axis-aligned). `FULL1` is the unconstrained
//! single Gaussian used when K = 1.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{derive_seed, seeded_rng};

/// Covariance parameterization code.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum CovParam {
    /// Spherical, equal volume: sigma^2 I shared by all components.
    EII,
    /// Spherical, varying volume: sigma_k^2 I.
    VII,
    /// Diagonal, equal volume and shape: one shared diagonal matrix.
    EEI,
    /// Diagonal, varying volume, equal shape: lambda_k * diag(b).
    VEI,
    /// Diagonal, varying volume and shape: diag(b_k).
    VVI,
    /// Full covariance shared by all components.
    EEE,
    /// Full covariance per component.
    VVV,
    /// Unconstrained single Gaussian; only valid with K = 1.
    FULL1,
}

impl CovParam {
    pub const ALL_MULTI: [CovParam; 7] = [
        CovParam::EII,
        CovParam::VII,
        CovParam::EEI,
        CovParam::VEI,
        CovParam::VVI,
        CovParam::EEE,
        CovParam::VVV,
    ];

    /// Free covariance parameters for `k` components in `p` dimensions.
    pub fn cov_params(self, p: usize, k: usize) -> usize {
        match self {
            CovParam::EII => 1,
            CovParam::VII => k,
            CovParam::EEI => p,
            CovParam::VEI => k + p - 1,
            CovParam::VVI => k * p,
            CovParam::EEE => p * (p + 1) / 2,
            CovParam::VVV => k * p * (p + 1) / 2,
            CovParam::FULL1 => p * (p + 1) / 2,
        }
    }

    /// Total free parameters: weights + means + covariance.
    pub fn n_params(self, p: usize, k: usize) -> usize {
        (k - 1) + k * p + self.cov_params(p, k)
    }

    pub fn is_full(self) -> bool {
        matches!(self, CovParam::EEE | CovParam::VVV | CovParam::FULL1)
    }

    /// Complexity rank used for tie-breaking (simpler first).
    pub fn rank(self) -> usize {
        match self {
            CovParam::EII => 0,
            CovParam::VII => 1,
            CovParam::EEI => 2,
            CovParam::VEI => 3,
            CovParam::VVI => 4,
            CovParam::EEE => 5,
            CovParam::VVV => 6,
            CovParam::FULL1 => 7,
        }
    }

    /// Representative structure at K = 1, where many codes coincide.
    fn k1_class(self) -> CovParam {
        match self {
            CovParam::EII | CovParam::VII => CovParam::EII,
            CovParam::EEI | CovParam::VEI | CovParam::VVI => CovParam::EEI,
            CovParam::EEE | CovParam::VVV | CovParam::FULL1 => CovParam::FULL1,
        }
    }
}

impl fmt::Display for CovParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CovParam::EII => "EII",
            CovParam::VII => "VII",
            CovParam::EEI => "EEI",
            CovParam::VEI => "VEI",
            CovParam::VVI => "VVI",
            CovParam::EEE => "EEE",
            CovParam::VVV => "VVV",
            CovParam::FULL1 => "FULL1",
        };
        f.write_str(s)
    }
}

impl FromStr for CovParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EII" => Ok(CovParam::EII),
            "VII" => Ok(CovParam::VII),
            "EEI" => Ok(CovParam::EEI),
            "VEI" => Ok(CovParam::VEI),
            "VVI" => Ok(CovParam::VVI),
            "EEE" => Ok(CovParam::EEE),
            "VVV" => Ok(CovParam::VVV),
            "FULL1" | "XXX" => Ok(CovParam::FULL1),
            other => Err(Error::InvalidOptions(format!(
                "unknown covariance code {other:?}"
            ))),
        }
    }
}

/// One Gaussian component of a fitted mixture.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// A Gaussian mixture fitted to the observations of one slice.
#[derive(Debug, Clone)]
pub struct SliceMixture {
    pub components: Vec<GaussianComponent>,
    pub param: CovParam,
    pub loglik: f64,
    pub bic: f64,
    pub n_obs: usize,
    /// Posterior component probabilities, one row per observation.
    pub responsibilities: Array2<f64>,
    /// Log-likelihood after each EM iteration (diagnostic).
    pub loglik_trace: Vec<f64>,
    /// True when some covariance eigenvalue sits at the variance floor. Such
    /// solutions are spurious likelihood spikes (a component collapsed onto
    /// a few points) and model selection skips them when it can.
    pub floored: bool,
}

impl SliceMixture {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Hard component assignment per observation (0-based, within slice).
    pub fn map_labels(&self) -> Vec<usize> {
        self.responsibilities
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (k, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn log_density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        mixture_log_density(&self.components, x)
    }

    /// Mixture density at `x`; computed in the log domain to avoid underflow.
    pub fn density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }
}

/// log of sum_k w_k phi(x; mu_k, Sigma_k) over arbitrary components.
pub fn mixture_log_density(components: &[GaussianComponent], x: ArrayView1<'_, f64>) -> Result<f64> {
    if components.is_empty() {
        return Err(Error::InvalidMixture {
            reason: "empty mixture".into(),
        });
    }
    let p = components[0].mean.len();
    if x.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: x.len(),
        });
    }
    let mut terms = Vec::with_capacity(components.len());
    for c in components {
        let chol = Cholesky::new(linalg::to_na(c.cov.view())).ok_or_else(|| Error::InvalidMixture {
            reason: "component covariance is not positive definite".into(),
        })?;
        let logdet = 2.0 * (0..p).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
        let d = DVector::from_iterator(p, x.iter().zip(c.mean.iter()).map(|(a, b)| a - b));
        let sol = chol.solve(&d);
        let maha = d.dot(&sol);
        let log_phi = -0.5 * (p as f64 * LN_2PI + logdet + maha);
        let log_w = if c.weight > 0.0 {
            c.weight.ln()
        } else {
            f64::NEG_INFINITY
        };
        terms.push(log_w + log_phi);
    }
    Ok(log_sum_exp(&terms))
}

/// Project mixture components onto a subspace: means are centered then mapped
/// through the basis, covariances become BᵀΣB.
pub fn project_components(
    components: &[GaussianComponent],
    basis: ArrayView2<'_, f64>,
    center: ArrayView1<'_, f64>,
) -> Vec<GaussianComponent> {
    components
        .iter()
        .map(|c| GaussianComponent {
            weight: c.weight,
            mean: basis.t().dot(&(&c.mean - &center)),
            cov: basis.t().dot(&c.cov).dot(&basis),
        })
        .collect()
}

/// BIC on the larger-is-better scale: 2 loglik - n_params log(n).
pub fn bic_score(loglik: f64, n_params: usize, n: usize) -> f64 {
    2.0 * loglik - n_params as f64 * (n as f64).ln()
}

/// EM and model-selection settings.
#[derive(Debug, Clone)]
pub struct GmmOptions {
    /// Largest K tried by [`select_model`]; candidates are further capped by
    /// feasibility (parameter count must stay below the slice size).
    pub max_components: usize,
    /// Parameterizations searched for K >= 2. At K = 1 these collapse to the
    /// distinct structures {EII, EEI, FULL1}.
    pub params: Vec<CovParam>,
    /// Relative log-likelihood change declaring convergence.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of k-means++ seedings per fit. Each runs a short EM burn-in;
    /// the best log-likelihood is kept and run to convergence.
    pub restarts: usize,
    /// Variance floor as a fraction of the mean diagonal of the slice
    /// covariance, applied to covariance eigenvalues.
    pub variance_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_components: 5,
            params: CovParam::ALL_MULTI.to_vec(),
            tol: 1e-5,
            max_iter: 500,
            restarts: 5,
            variance_floor: 1e-6,
        }
    }
}

const LN_2PI: f64 = 1.8378770664093453;
const RESTART_BURN_ITERS: usize = 15;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Internal covariance representation; keeps the E-step cheap for the
/// diagonal and spherical codes.
#[derive(Debug, Clone)]
enum CovRepr {
    Spherical(f64),
    Diagonal(Array1<f64>),
    Full(Array2<f64>),
}

impl CovRepr {
    fn to_full(&self, p: usize) -> Array2<f64> {
        match self {
            CovRepr::Spherical(s2) => Array2::eye(p) * *s2,
            CovRepr::Diagonal(d) => Array2::from_diag(d),
            CovRepr::Full(m) => m.clone(),
        }
    }

    fn min_eigenvalue(&self) -> f64 {
        match self {
            CovRepr::Spherical(s2) => *s2,
            CovRepr::Diagonal(d) => d.iter().cloned().fold(f64::INFINITY, f64::min),
            CovRepr::Full(m) => {
                let (values, _) = linalg::symmetric_eigen_desc(m.view());
                values[values.len() - 1]
            }
        }
    }
}

fn state_is_floored(state: &EmState, floor: f64) -> bool {
    state
        .covs
        .iter()
        .any(|c| c.min_eigenvalue() <= floor * (1.0 + 1e-9))
}

enum PrepCov {
    Spherical { inv: f64, logdet: f64 },
    Diagonal { inv: Array1<f64>, logdet: f64 },
    Full { chol: Cholesky<f64, Dyn>, logdet: f64 },
}

fn prepare(repr: &CovRepr, p: usize) -> Result<PrepCov> {
    Ok(match repr {
        CovRepr::Spherical(s2) => PrepCov::Spherical {
            inv: 1.0 / s2,
            logdet: p as f64 * s2.ln(),
        },
        CovRepr::Diagonal(d) => PrepCov::Diagonal {
            inv: d.mapv(|v| 1.0 / v),
            logdet: d.iter().map(|v| v.ln()).sum(),
        },
        CovRepr::Full(m) => {
            let chol = Cholesky::new(linalg::to_na(m.view())).ok_or_else(|| Error::InvalidMixture {
                reason: "covariance lost positive definiteness".into(),
            })?;
            let logdet = 2.0 * (0..p).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
            PrepCov::Full { chol, logdet }
        }
    })
}

fn log_phi(x: ArrayView1<'_, f64>, mean: &Array1<f64>, prep: &PrepCov, p: usize) -> f64 {
    match prep {
        PrepCov::Spherical { inv, logdet } => {
            let maha: f64 = x
                .iter()
                .zip(mean.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * inv;
            -0.5 * (p as f64 * LN_2PI + logdet + maha)
        }
        PrepCov::Diagonal { inv, logdet } => {
            let mut maha = 0.0;
            for j in 0..p {
                let d = x[j] - mean[j];
                maha += d * d * inv[j];
            }
            -0.5 * (p as f64 * LN_2PI + logdet + maha)
        }
        PrepCov::Full { chol, logdet } => {
            let d = DVector::from_iterator(p, x.iter().zip(mean.iter()).map(|(a, b)| a - b));
            let maha = d.dot(&chol.solve(&d));
            -0.5 * (p as f64 * LN_2PI + logdet + maha)
        }
    }
}

struct EmState {
    weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    covs: Vec<CovRepr>,
}

/// Clamp the eigenvalues of a full covariance at `floor`, preserving
/// eigenvectors. No-op when the smallest eigenvalue is already above it.
fn floor_full(m: &mut Array2<f64>, floor: f64) {
    let p = m.nrows();
    let sym = 0.5 * (&*m + &m.t());
    let (values, vectors) = linalg::symmetric_eigen_desc(sym.view());
    if values.iter().all(|&l| l >= floor) {
        *m = sym;
        return;
    }
    let mut out = Array2::zeros((p, p));
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0;
            for k in 0..p {
                acc += vectors[[i, k]] * values[k].max(floor) * vectors[[j, k]];
            }
            out[[i, j]] = acc;
            out[[j, i]] = acc;
        }
    }
    *m = out;
}

fn e_step(
    x: ArrayView2<'_, f64>,
    state: &EmState,
    resp: &mut Array2<f64>,
    scratch: &mut Vec<f64>,
) -> Result<f64> {
    let (n, p) = (x.nrows(), x.ncols());
    let k = state.weights.len();
    let preps: Vec<PrepCov> = state
        .covs
        .iter()
        .map(|c| prepare(c, p))
        .collect::<Result<_>>()?;
    let log_w: Vec<f64> = state
        .weights
        .iter()
        .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect();
    let mut ll = 0.0;
    for i in 0..n {
        let row = x.row(i);
        scratch.clear();
        for c in 0..k {
            scratch.push(log_w[c] + log_phi(row, &state.means[c], &preps[c], p));
        }
        let lse = log_sum_exp(scratch);
        ll += lse;
        for c in 0..k {
            resp[[i, c]] = (scratch[c] - lse).exp();
        }
    }
    Ok(ll)
}

fn m_step(
    x: ArrayView2<'_, f64>,
    resp: &Array2<f64>,
    param: CovParam,
    floor: f64,
    old: &EmState,
) -> EmState {
    let (n, p) = (x.nrows(), x.ncols());
    let k = resp.ncols();
    let nf = n as f64;

    let mut nk = vec![0.0f64; k];
    for i in 0..n {
        for c in 0..k {
            nk[c] += resp[[i, c]];
        }
    }

    let mut means: Vec<Array1<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        if nk[c] < 1e-12 {
            means.push(old.means[c].clone());
            continue;
        }
        let mut m = Array1::zeros(p);
        for i in 0..n {
            let r = resp[[i, c]];
            if r > 0.0 {
                m.scaled_add(r, &x.row(i));
            }
        }
        means.push(m / nk[c]);
    }
    let weights: Vec<f64> = nk.iter().map(|&v| v / nf).collect();

    let covs: Vec<CovRepr> = if param.is_full() {
        // full scatter per component
        let mut scatters: Vec<Array2<f64>> = vec![Array2::zeros((p, p)); k];
        for i in 0..n {
            let row = x.row(i);
            for c in 0..k {
                let r = resp[[i, c]];
                if r == 0.0 {
                    continue;
                }
                let m = &means[c];
                for a in 0..p {
                    let da = row[a] - m[a];
                    for b in a..p {
                        scatters[c][[a, b]] += r * da * (row[b] - m[b]);
                    }
                }
            }
        }
        for s in scatters.iter_mut() {
            for a in 0..p {
                for b in (a + 1)..p {
                    s[[b, a]] = s[[a, b]];
                }
            }
        }
        match param {
            CovParam::EEE => {
                let mut pooled = Array2::zeros((p, p));
                for s in &scatters {
                    pooled += s;
                }
                let mut cov = pooled / nf;
                floor_full(&mut cov, floor);
                vec![CovRepr::Full(cov); k]
            }
            _ => (0..k)
                .map(|c| {
                    if nk[c] < 1e-12 {
                        return old.covs[c].clone();
                    }
                    let mut cov = &scatters[c] / nk[c];
                    floor_full(&mut cov, floor);
                    CovRepr::Full(cov)
                })
                .collect(),
        }
    } else {
        // diagonal scatter per component
        let mut diag: Vec<Array1<f64>> = vec![Array1::zeros(p); k];
        for i in 0..n {
            let row = x.row(i);
            for c in 0..k {
                let r = resp[[i, c]];
                if r == 0.0 {
                    continue;
                }
                let m = &means[c];
                for j in 0..p {
                    let d = row[j] - m[j];
                    diag[c][j] += r * d * d;
                }
            }
        }
        match param {
            CovParam::EII => {
                let total: f64 = diag.iter().map(|d| d.sum()).sum();
                let s2 = (total / (nf * p as f64)).max(floor);
                vec![CovRepr::Spherical(s2); k]
            }
            CovParam::VII => (0..k)
                .map(|c| {
                    if nk[c] < 1e-12 {
                        return old.covs[c].clone();
                    }
                    CovRepr::Spherical((diag[c].sum() / (nk[c] * p as f64)).max(floor))
                })
                .collect(),
            CovParam::EEI => {
                let mut pooled = Array1::zeros(p);
                for d in &diag {
                    pooled += d;
                }
                let b = (pooled / nf).mapv(|v: f64| v.max(floor));
                vec![CovRepr::Diagonal(b); k]
            }
            CovParam::VVI => (0..k)
                .map(|c| {
                    if nk[c] < 1e-12 {
                        return old.covs[c].clone();
                    }
                    CovRepr::Diagonal((&diag[c] / nk[c]).mapv(|v: f64| v.max(floor)))
                })
                .collect(),
            CovParam::VEI => vei_covs(&diag, &nk, p, floor),
            _ => unreachable!("full codes handled above"),
        }
    };

    EmState {
        weights,
        means,
        covs,
    }
}

/// VEI M-step: volumes lambda_k and one shared diagonal shape with unit
/// determinant, found by alternating closed-form updates.
fn vei_covs(diag: &[Array1<f64>], nk: &[f64], p: usize, floor: f64) -> Vec<CovRepr> {
    let k = diag.len();
    let mut shape = Array1::<f64>::ones(p);
    let mut volumes = vec![1.0f64; k];
    for _ in 0..20 {
        let mut max_change = 0.0f64;
        for c in 0..k {
            if nk[c] < 1e-12 {
                continue;
            }
            let s: f64 = (0..p).map(|j| diag[c][j] / shape[j]).sum();
            let new = (s / (p as f64 * nk[c])).max(1e-300);
            max_change = max_change.max((new - volumes[c]).abs() / new);
            volumes[c] = new;
        }
        let mut pooled = Array1::<f64>::zeros(p);
        for c in 0..k {
            if nk[c] < 1e-12 {
                continue;
            }
            pooled += &(&diag[c] / volumes[c]);
        }
        let pool_max = pooled.iter().cloned().fold(0.0_f64, f64::max);
        let pooled = pooled.mapv(|v| v.max(1e-12 * pool_max + 1e-300));
        let log_gm = pooled.mapv(f64::ln).mean().expect("p >= 1");
        let new_shape = pooled.mapv(|v| (v.ln() - log_gm).exp());
        for j in 0..p {
            max_change = max_change.max((new_shape[j] - shape[j]).abs() / new_shape[j].max(1e-300));
        }
        shape = new_shape;
        if max_change < 1e-8 {
            break;
        }
    }
    (0..k)
        .map(|c| CovRepr::Diagonal((&shape * volumes[c]).mapv(|v: f64| v.max(floor))))
        .collect()
}

/// k-means++ seeding followed by hard assignment to the chosen centers.
fn kmeanspp_assign(x: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.gen_range(0..n));
    let mut min_d2 = vec![0.0f64; n];
    for (i, md) in min_d2.iter_mut().enumerate() {
        *md = sq_dist(x.row(i), x.row(centers[0]));
    }
    while centers.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(next);
        for (i, md) in min_d2.iter_mut().enumerate() {
            let d = sq_dist(x.row(i), x.row(next));
            if d < *md {
                *md = d;
            }
        }
    }
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &ci) in centers.iter().enumerate() {
                let d = sq_dist(x.row(i), x.row(ci));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn initial_state(
    x: ArrayView2<'_, f64>,
    k: usize,
    param: CovParam,
    floor: f64,
    seed: u64,
) -> EmState {
    let n = x.nrows();
    let mut rng = seeded_rng(seed);
    let assign = kmeanspp_assign(x, k, &mut rng);
    let mut resp = Array2::zeros((n, k));
    for (i, &c) in assign.iter().enumerate() {
        resp[[i, c]] = 1.0;
    }
    let fallback = EmState {
        weights: vec![1.0 / k as f64; k],
        means: vec![x.mean_axis(Axis(0)).expect("n >= 1"); k],
        covs: vec![CovRepr::Spherical(1.0); k],
    };
    m_step(x, &resp, param, floor, &fallback)
}

struct EmRun {
    state: EmState,
    resp: Array2<f64>,
    loglik: f64,
    trace: Vec<f64>,
}

fn run_em(
    x: ArrayView2<'_, f64>,
    mut state: EmState,
    param: CovParam,
    floor: f64,
    tol: f64,
    max_iter: usize,
) -> Result<EmRun> {
    let (n, _p) = (x.nrows(), x.ncols());
    let k = state.weights.len();
    let mut resp = Array2::zeros((n, k));
    let mut scratch = Vec::with_capacity(k);
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    for _ in 0..=max_iter {
        ll = e_step(x, &state, &mut resp, &mut scratch)?;
        trace.push(ll);
        if prev_ll.is_finite() && (ll - prev_ll).abs() / ll.abs().max(1.0) < tol {
            break;
        }
        prev_ll = ll;
        state = m_step(x, &resp, param, floor, &state);
    }
    Ok(EmRun {
        state,
        resp,
        loglik: ll,
        trace,
    })
}

/// Variance floor for a slice: a small fraction of the mean diagonal of the
/// slice covariance, with an absolute fallback for constant slices.
fn slice_floor(x: ArrayView2<'_, f64>, rel: f64) -> f64 {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("n >= 1");
    let mut total = 0.0;
    for row in x.rows() {
        for j in 0..x.ncols() {
            let d = row[j] - mean[j];
            total += d * d;
        }
    }
    let mean_diag = total / (n * x.ncols() as f64);
    if mean_diag > 0.0 {
        rel * mean_diag
    } else {
        rel
    }
}

fn finalize(run: EmRun, param: CovParam, p: usize, n: usize, floor: f64) -> SliceMixture {
    let k = run.state.weights.len();
    let floored = state_is_floored(&run.state, floor);
    let components = (0..k)
        .map(|c| GaussianComponent {
            weight: run.state.weights[c],
            mean: run.state.means[c].clone(),
            cov: run.state.covs[c].to_full(p),
        })
        .collect();
    let bic = bic_score(run.loglik, param.n_params(p, k), n);
    SliceMixture {
        components,
        param,
        loglik: run.loglik,
        bic,
        n_obs: n,
        responsibilities: run.resp,
        loglik_trace: run.trace,
        floored,
    }
}

/// Fit a K-component Gaussian mixture with the given covariance structure.
///
/// Deterministic given `(xh, k, param, seed)`. K = 1 is solved in closed form.
/// A slice whose rows are all identical yields a point-mass-regularized K = 1
/// fit with a warning.
pub fn em_fit(
    xh: ArrayView2<'_, f64>,
    k: usize,
    param: CovParam,
    opts: &GmmOptions,
    seed: u64,
) -> Result<SliceMixture> {
    let (n, p) = (xh.nrows(), xh.ncols());
    if k < 1 {
        return Err(Error::InvalidMixture {
            reason: "K must be >= 1".into(),
        });
    }
    if k > n {
        return Err(Error::InvalidMixture {
            reason: format!("K = {k} exceeds the {n} observations in the slice"),
        });
    }
    if param == CovParam::FULL1 && k != 1 {
        return Err(Error::InvalidMixture {
            reason: "FULL1 is only valid with K = 1".into(),
        });
    }
    if param.is_full() && n <= p {
        return Err(Error::InvalidMixture {
            reason: format!("full covariance {param} needs n > p (n = {n}, p = {p})"),
        });
    }
    if xh.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "slice predictors".into(),
        });
    }

    let floor = slice_floor(xh, opts.variance_floor);

    // degenerate slice: every row identical
    let mean = xh.mean_axis(Axis(0)).expect("n >= 1");
    let degenerate = xh
        .rows()
        .into_iter()
        .all(|r| r.iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-300));
    if degenerate {
        log::warn!("slice of {n} identical rows; returning point-mass-regularized single Gaussian");
        let state = EmState {
            weights: vec![1.0],
            means: vec![mean],
            covs: vec![CovRepr::Spherical(floor)],
        };
        let mut resp = Array2::zeros((n, 1));
        resp.fill(1.0);
        let mut scratch = Vec::new();
        let mut resp_out = resp.clone();
        let ll = e_step(xh, &state, &mut resp_out, &mut scratch)?;
        return Ok(finalize(
            EmRun {
                state,
                resp,
                loglik: ll,
                trace: vec![ll],
            },
            CovParam::FULL1,
            p,
            n,
            floor,
        ));
    }

    if k == 1 {
        let resp = Array2::ones((n, 1));
        let fallback = EmState {
            weights: vec![1.0],
            means: vec![Array1::zeros(p)],
            covs: vec![CovRepr::Spherical(1.0)],
        };
        let state = m_step(xh, &resp, param, floor, &fallback);
        let mut resp_out = Array2::zeros((n, 1));
        let mut scratch = Vec::new();
        let ll = e_step(xh, &state, &mut resp_out, &mut scratch)?;
        return Ok(finalize(
            EmRun {
                state,
                resp,
                loglik: ll,
                trace: vec![ll],
            },
            param,
            p,
            n,
            floor,
        ));
    }

    // Several short burn-in runs from distinct seedings; the best
    // log-likelihood among them continues to convergence. Burn-ins that hit
    // the variance floor (collapsed components) lose to any clean run.
    let restarts = opts.restarts.max(1);
    let mut best: Option<(EmRun, bool)> = None;
    for r in 0..restarts {
        let init = initial_state(xh, k, param, floor, derive_seed(seed, r as u64));
        let burn = run_em(xh, init, param, floor, opts.tol, RESTART_BURN_ITERS)?;
        let floored = state_is_floored(&burn.state, floor);
        let better = match &best {
            None => true,
            Some((b, b_floored)) => match (floored, *b_floored) {
                (false, true) => true,
                (true, false) => false,
                _ => burn.loglik > b.loglik,
            },
        };
        if better {
            best = Some((burn, floored));
        }
    }
    let (burn, _) = best.expect("restarts >= 1");
    let mut trace = burn.trace.clone();
    let mut run = run_em(xh, burn.state, param, floor, opts.tol, opts.max_iter)?;
    trace.extend_from_slice(&run.trace);
    run.trace = trace;
    Ok(finalize(run, param, p, n, floor))
}

/// Feasible (K, parameterization) candidates for a slice of `n` points in `p`
/// dimensions. A candidate is infeasible when its parameter count reaches the
/// slice size; full codes additionally need n > p and are dropped entirely for
/// slices smaller than 5p, where they are unestimable in practice.
fn candidates(opts: &GmmOptions, n: usize, p: usize) -> Vec<(usize, CovParam)> {
    let small_slice = n < 5 * p;
    let mut out = Vec::new();
    for k in 1..=opts.max_components.max(1) {
        if k > n {
            break;
        }
        if k == 1 {
            let mut k1: Vec<CovParam> = opts.params.iter().map(|p| p.k1_class()).collect();
            k1.sort_by_key(|p| p.rank());
            k1.dedup();
            for param in k1 {
                if param.is_full() && (n <= p || small_slice) {
                    continue;
                }
                if param.n_params(p, 1) < n {
                    out.push((1, param));
                }
            }
        } else {
            for &param in &opts.params {
                if param == CovParam::FULL1 {
                    continue;
                }
                if param.is_full() && (n <= p || small_slice) {
                    continue;
                }
                if param.n_params(p, k) < n {
                    out.push((k, param));
                }
            }
        }
    }
    out
}

/// Fit every feasible (K, parameterization) candidate and return the highest
/// BIC. Ties break toward smaller K, then the simpler parameterization.
/// Candidate fits are independent and evaluated in parallel; the reduction is
/// deterministic.
pub fn select_model(xh: ArrayView2<'_, f64>, opts: &GmmOptions, seed: u64) -> Result<SliceMixture> {
    let (n, p) = (xh.nrows(), xh.ncols());
    let cands = candidates(opts, n, p);
    if cands.is_empty() {
        return Err(Error::NoFeasibleModel { n_obs: n, p });
    }
    let fits: Vec<(usize, SliceMixture)> = cands
        .par_iter()
        .enumerate()
        .filter_map(|(idx, &(k, param))| {
            match em_fit(xh, k, param, opts, derive_seed(seed, idx as u64)) {
                Ok(fit) => Some((idx, fit)),
                Err(e) => {
                    log::warn!("candidate K={k} {param} failed: {e}");
                    None
                }
            }
        })
        .collect();
    if fits.is_empty() {
        return Err(Error::NoFeasibleModel { n_obs: n, p });
    }
    // floored fits are spurious likelihood spikes; use them only when nothing
    // else converged (e.g. a slice with a genuinely constant direction)
    let any_clean = fits.iter().any(|(_, f)| !f.floored);
    if !any_clean {
        log::warn!("every candidate hit the variance floor; keeping the best of them");
    }
    fits.into_iter()
        .filter(|(_, f)| !any_clean || !f.floored)
        .min_by(|(ia, a), (ib, b)| {
            b.bic
                .partial_cmp(&a.bic)
                .expect("finite BIC")
                .then(a.k().cmp(&b.k()))
                .then(a.param.rank().cmp(&b.param.rank()))
                .then(ia.cmp(ib))
        })
        .map(|(_, fit)| fit)
        .ok_or(Error::NoFeasibleModel { n_obs: n, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_blob(n: usize, center: &[f64], sd: f64, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        let p = center.len();
        Array2::from_shape_fn((n, p), |(_, j)| {
            center[j] + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    }

    fn stack(a: Array2<f64>, b: Array2<f64>) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap()
    }

    #[test]
    fn k1_is_sample_mean_and_ml_covariance() {
        let x = gaussian_blob(40, &[1.0, -2.0, 0.5], 1.3, 1);
        let fit = em_fit(x.view(), 1, CovParam::EEE, &GmmOptions::default(), 0).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let cov = crate::linalg::sample_covariance(x.view()).unwrap();
        for (a, b) in fit.components[0].mean.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in fit.components[0].cov.iter().zip(cov.as_array().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        // spherical K=1: scalar multiple of identity equal to mean variance
        let fit = em_fit(x.view(), 1, CovParam::EII, &GmmOptions::default(), 0).unwrap();
        let expect = cov.trace() / 3.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { expect } else { 0.0 };
                assert_abs_diff_eq!(fit.components[0].cov[[i, j]], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn two_spherical_clusters_are_recovered() {
        let x = stack(
            gaussian_blob(100, &[0.0, 0.0], 1.0, 2),
            gaussian_blob(100, &[10.0, 10.0], 1.0, 3),
        );
        let fit = em_fit(x.view(), 2, CovParam::VII, &GmmOptions::default(), 7).unwrap();
        let mut centers: Vec<Vec<f64>> = fit.components.iter().map(|c| c.mean.to_vec()).collect();
        centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((centers[0][0]).abs() < 0.5 && (centers[0][1]).abs() < 0.5);
        assert!((centers[1][0] - 10.0).abs() < 0.5 && (centers[1][1] - 10.0).abs() < 0.5);
    }

    #[test]
    fn loglik_is_monotone_nondecreasing() {
        let x = stack(
            gaussian_blob(60, &[0.0, 0.0], 1.0, 4),
            gaussian_blob(60, &[4.0, -1.0], 0.7, 5),
        );
        for param in CovParam::ALL_MULTI {
            let fit = em_fit(x.view(), 3, param, &GmmOptions::default(), 11).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "{param}: loglik decreased {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn bic_score_arithmetic() {
        assert_eq!(bic_score(0.0, 0, 10), 0.0);
        assert_abs_diff_eq!(
            bic_score(-50.0, 4, 100),
            -118.42068074395237,
            epsilon = 1e-12
        );
        // extra parameter with no loglik gain strictly lowers the score
        assert!(bic_score(-50.0, 5, 100) < bic_score(-50.0, 4, 100));
    }

    #[test]
    fn responsibilities_and_weights_normalize() {
        let x = stack(
            gaussian_blob(50, &[0.0, 0.0], 1.0, 6),
            gaussian_blob(50, &[5.0, 5.0], 1.0, 7),
        );
        let fit = em_fit(x.view(), 2, CovParam::VVV, &GmmOptions::default(), 3).unwrap();
        let wsum: f64 = fit.components.iter().map(|c| c.weight).sum();
        assert_abs_diff_eq!(wsum, 1.0, epsilon = 1e-12);
        for row in fit.responsibilities.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn structure_constraints_are_exact() {
        let x = stack(
            gaussian_blob(70, &[0.0, 0.0, 0.0], 1.0, 8),
            gaussian_blob(70, &[3.0, -2.0, 1.0], 1.4, 9),
        );
        // spherical codes: exact scalar multiples of identity
        for param in [CovParam::EII, CovParam::VII] {
            let fit = em_fit(x.view(), 2, param, &GmmOptions::default(), 5).unwrap();
            for c in &fit.components {
                for i in 0..3 {
                    for j in 0..3 {
                        if i == j {
                            assert_eq!(c.cov[[i, j]], c.cov[[0, 0]]);
                        } else {
                            assert_eq!(c.cov[[i, j]], 0.0);
                        }
                    }
                }
            }
        }
        // diagonal codes: off-diagonals exactly zero
        for param in [CovParam::EEI, CovParam::VEI, CovParam::VVI] {
            let fit = em_fit(x.view(), 2, param, &GmmOptions::default(), 5).unwrap();
            for c in &fit.components {
                for i in 0..3 {
                    for j in 0..3 {
                        if i != j {
                            assert_eq!(c.cov[[i, j]], 0.0);
                        }
                    }
                }
            }
        }
        // VEI: shared shape, varying volume => covariances proportional
        let fit = em_fit(x.view(), 2, CovParam::VEI, &GmmOptions::default(), 5).unwrap();
        let r0 = fit.components[0].cov[[0, 0]] / fit.components[1].cov[[0, 0]];
        for j in 1..3 {
            let rj = fit.components[0].cov[[j, j]] / fit.components[1].cov[[j, j]];
            assert_abs_diff_eq!(r0, rj, epsilon = 1e-6 * r0.abs());
        }
        // EEE: identical covariance across components
        let fit = em_fit(x.view(), 2, CovParam::EEE, &GmmOptions::default(), 5).unwrap();
        for (a, b) in fit.components[0].cov.iter().zip(fit.components[1].cov.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vei_mstep_satisfies_its_fixed_point() {
        // at the solution: lambda_k = (sum_j d_kj / b_j) / (p n_k) and the
        // shape b is proportional to sum_k d_k / lambda_k with product 1
        let diag = [
            arr1(&[4.0, 1.0, 0.5]),
            arr1(&[2.0, 3.0, 0.25]),
        ];
        let nk = [10.0, 20.0];
        let covs = vei_covs(&diag, &nk, 3, 0.0);
        let (b, volumes): (Array1<f64>, Vec<f64>) = match (&covs[0], &covs[1]) {
            (CovRepr::Diagonal(a), CovRepr::Diagonal(c)) => {
                // shared shape: covariances proportional; recover shape by
                // normalizing the first to unit geometric mean
                let log_gm = a.mapv(f64::ln).mean().unwrap();
                let shape = a.mapv(|v| (v.ln() - log_gm).exp());
                let v0 = (a[0] / shape[0] + a[1] / shape[1] + a[2] / shape[2]) / 3.0;
                let v1 = (c[0] / shape[0] + c[1] / shape[1] + c[2] / shape[2]) / 3.0;
                (shape, vec![v0, v1])
            }
            _ => panic!("VEI must produce diagonal covariances"),
        };
        // geometric mean of the shape is 1
        let gm: f64 = b.mapv(f64::ln).mean().unwrap();
        assert_abs_diff_eq!(gm, 0.0, epsilon = 1e-10);
        // stationarity of the volumes
        for (k, &v) in volumes.iter().enumerate() {
            let want: f64 =
                (0..3).map(|j| diag[k][j] / b[j]).sum::<f64>() / (3.0 * nk[k]);
            assert_abs_diff_eq!(v, want, epsilon = 1e-8 * want);
        }
        // stationarity of the shape: b proportional to sum_k d_k / lambda_k
        let mut pooled = Array1::<f64>::zeros(3);
        for (k, &v) in volumes.iter().enumerate() {
            pooled += &(&diag[k] / v);
        }
        let log_gm = pooled.mapv(f64::ln).mean().unwrap();
        let b_expected = pooled.mapv(|x| (x.ln() - log_gm).exp());
        for (got, want) in b.iter().zip(b_expected.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn nested_structures_order_logliks() {
        // richer covariance families cannot fit worse at the optimum; EM from
        // a shared seeding preserves the ordering on well-separated data
        let x = stack(
            gaussian_blob(90, &[0.0, 0.0, 0.0], 0.6, 30),
            gaussian_blob(90, &[6.0, -4.0, 2.0], 1.1, 31),
        );
        let ll = |param: CovParam| {
            em_fit(x.view(), 2, param, &GmmOptions::default(), 99)
                .unwrap()
                .loglik
        };
        let slack = 1e-6;
        assert!(ll(CovParam::EII) <= ll(CovParam::VII) + slack);
        assert!(ll(CovParam::EEI) <= ll(CovParam::VEI) + slack);
        assert!(ll(CovParam::VEI) <= ll(CovParam::VVI) + slack);
        assert!(ll(CovParam::VVI) <= ll(CovParam::VVV) + slack);
        assert!(ll(CovParam::EEE) <= ll(CovParam::VVV) + slack);
    }

    #[test]
    fn unimodal_data_selects_one_component() {
        let x = gaussian_blob(52, &[0.0, 0.0, 0.0, 0.0], 1.0, 10);
        let fit = select_model(x.view(), &GmmOptions::default(), 1).unwrap();
        assert_eq!(fit.k(), 1);
    }

    #[test]
    fn trimodal_data_selects_three_components() {
        let x = stack(
            stack(
                gaussian_blob(60, &[0.0, 0.0], 0.5, 11),
                gaussian_blob(60, &[8.0, 0.0], 0.5, 12),
            ),
            gaussian_blob(60, &[4.0, 7.0], 0.5, 13),
        );
        let fit = select_model(x.view(), &GmmOptions::default(), 2).unwrap();
        assert_eq!(fit.k(), 3);
    }

    #[test]
    fn k_range_one_reduces_to_single_gaussian() {
        let x = stack(
            gaussian_blob(40, &[0.0, 0.0], 1.0, 14),
            gaussian_blob(40, &[9.0, 9.0], 1.0, 15),
        );
        let opts = GmmOptions {
            max_components: 1,
            ..GmmOptions::default()
        };
        let fit = select_model(x.view(), &opts, 3).unwrap();
        assert_eq!(fit.k(), 1);
        let mean = x.mean_axis(Axis(0)).unwrap();
        for (a, b) in fit.components[0].mean.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn selection_is_invariant_to_observation_order() {
        let x = stack(
            gaussian_blob(80, &[0.0, 0.0], 1.0, 16),
            gaussian_blob(80, &[6.0, 6.0], 1.0, 17),
        );
        let fit = select_model(x.view(), &GmmOptions::default(), 9).unwrap();
        let mut rev = x.clone();
        for (i, row) in x.rows().into_iter().enumerate() {
            rev.row_mut(x.nrows() - 1 - i).assign(&row);
        }
        let fit_rev = select_model(rev.view(), &GmmOptions::default(), 9).unwrap();
        assert_eq!(fit.k(), fit_rev.k());
        assert_eq!(fit.param, fit_rev.param);
    }

    #[test]
    fn density_matches_analytic_values() {
        let comp = GaussianComponent {
            weight: 1.0,
            mean: arr1(&[0.0]),
            cov: ndarray::arr2(&[[1.0]]),
        };
        let m = SliceMixture {
            components: vec![comp.clone()],
            param: CovParam::FULL1,
            loglik: 0.0,
            bic: 0.0,
            n_obs: 1,
            responsibilities: Array2::ones((1, 1)),
            loglik_trace: vec![],
            floored: false,
        };
        assert_abs_diff_eq!(
            m.density(arr1(&[0.0]).view()).unwrap(),
            0.3989422804014327,
            epsilon = 1e-12
        );

        // two equal-weight identical components = one component
        let mut half = comp.clone();
        half.weight = 0.5;
        let two = SliceMixture {
            components: vec![half.clone(), half],
            ..m.clone()
        };
        assert_abs_diff_eq!(
            two.density(arr1(&[0.7]).view()).unwrap(),
            m.density(arr1(&[0.7]).view()).unwrap(),
            epsilon = 1e-14
        );

        // 2-d component vs the direct formula with an explicit 2x2 inverse
        let mean = arr1(&[0.4, -1.2]);
        let cov = ndarray::arr2(&[[2.0, 0.6], [0.6, 1.0]]);
        let comp2 = GaussianComponent {
            weight: 1.0,
            mean: mean.clone(),
            cov: cov.clone(),
        };
        let x = arr1(&[1.0, 0.3]);
        let det = cov[[0, 0]] * cov[[1, 1]] - cov[[0, 1]] * cov[[1, 0]];
        let inv = ndarray::arr2(&[
            [cov[[1, 1]] / det, -cov[[0, 1]] / det],
            [-cov[[1, 0]] / det, cov[[0, 0]] / det],
        ]);
        let d = &x - &mean;
        let maha = d.dot(&inv.dot(&d));
        let expect = (-0.5 * maha).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
        let got = mixture_log_density(&[comp2], x.view()).unwrap().exp();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn density_rejects_dimension_mismatch() {
        let comp = GaussianComponent {
            weight: 1.0,
            mean: arr1(&[0.0, 0.0]),
            cov: Array2::eye(2),
        };
        assert!(matches!(
            mixture_log_density(&[comp], arr1(&[1.0]).view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn em_rejects_invalid_configurations() {
        let x = gaussian_blob(10, &[0.0, 0.0], 1.0, 20);
        assert!(em_fit(x.view(), 11, CovParam::EII, &GmmOptions::default(), 0).is_err());
        assert!(em_fit(x.view(), 2, CovParam::FULL1, &GmmOptions::default(), 0).is_err());
        let narrow = gaussian_blob(3, &[0.0, 0.0, 0.0, 0.0], 1.0, 21);
        assert!(em_fit(narrow.view(), 1, CovParam::VVV, &GmmOptions::default(), 0).is_err());
    }

    #[test]
    fn degenerate_slice_returns_point_mass() {
        let x = Array2::from_elem((12, 3), 2.5);
        let fit = em_fit(x.view(), 3, CovParam::VVV, &GmmOptions::default(), 0).unwrap();
        assert_eq!(fit.k(), 1);
        assert_abs_diff_eq!(fit.components[0].mean[0], 2.5, epsilon = 1e-12);
        assert!(fit.components[0].cov[[0, 0]] > 0.0);
    }

    #[test]
    fn no_feasible_model_is_an_error() {
        let x = gaussian_blob(4, &[0.0; 8], 1.0, 22);
        assert!(matches!(
            select_model(x.view(), &GmmOptions::default(), 0),
            Err(Error::NoFeasibleModel { .. })
        ));
    }

    #[test]
    fn projected_components_transform_mean_and_cov() {
        let comp = GaussianComponent {
            weight: 1.0,
            mean: arr1(&[1.0, 2.0, 3.0]),
            cov: Array2::eye(3) * 2.0,
        };
        let basis = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let center = arr1(&[1.0, 1.0, 1.0]);
        let proj = project_components(&[comp], basis.view(), center.view());
        assert_eq!(proj[0].mean.to_vec(), vec![0.0, 1.0]);
        assert_eq!(proj[0].cov, Array2::<f64>::eye(2) * 2.0);
    }
}
