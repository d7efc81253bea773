//! JSON persistence for fitted estimates.
//!
//! A fit document is self-contained for projection and BIC-type dimension
//! inference; the permutation test needs the raw data again and says so.
//! Matrices are stored row-major as nested arrays with explicit dimensions,
//! and serde_json round-trips every f64 exactly, so loaded documents project
//! bit-identically.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dimension::{bic_dimension_from_eigenvalues, DimensionReport, Penalty};
use crate::error::{Error, Result};
use crate::estimator::MsirFit;
use crate::gmm::CovParam;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_array(a: ArrayView2<'_, f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        if self.data.len() != self.rows || self.data.iter().any(|r| r.len() != self.cols) {
            return Err(Error::FitDocument(format!(
                "matrix data does not match declared {}x{} shape",
                self.rows, self.cols
            )));
        }
        let mut a = Array2::zeros((self.rows, self.cols));
        for (i, row) in self.data.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                a[[i, j]] = v;
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDigest {
    pub n: usize,
    pub p: usize,
    pub predictors: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptionsDigest {
    pub slices: String,
    pub discrete: bool,
    pub max_components: usize,
    pub models: Vec<String>,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentJson {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: MatrixJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureJson {
    pub param: String,
    pub k: usize,
    pub loglik: f64,
    pub bic: f64,
    pub n_obs: usize,
    pub components: Vec<ComponentJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitPayload {
    pub n: usize,
    pub p: usize,
    pub h: usize,
    pub d_max: usize,
    pub kernel: MatrixJson,
    pub sigma: MatrixJson,
    pub grand_mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub raw_dirs: MatrixJson,
    pub basis: MatrixJson,
    pub weights: Vec<f64>,
    pub slice_counts: Vec<usize>,
    pub slice_proportions: Vec<f64>,
    pub slice_labels: Vec<usize>,
    pub cutpoints: Option<Vec<f64>>,
    pub levels: Option<Vec<String>>,
    pub component_labels: Vec<usize>,
    pub mixtures: Vec<MixtureJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub dataset: DatasetDigest,
    pub options: FitOptionsDigest,
    pub fit: FitPayload,
    pub dimension: Option<DimensionReport>,
}

impl FitDocument {
    pub fn from_fit(fit: &MsirFit, dataset: DatasetDigest, options: FitOptionsDigest) -> Self {
        let mixtures = fit
            .slice_mixtures
            .iter()
            .map(|m| MixtureJson {
                param: m.param.to_string(),
                k: m.k(),
                loglik: m.loglik,
                bic: m.bic,
                n_obs: m.n_obs,
                components: m
                    .components
                    .iter()
                    .map(|c| ComponentJson {
                        weight: c.weight,
                        mean: c.mean.to_vec(),
                        cov: MatrixJson::from_array(c.cov.view()),
                    })
                    .collect(),
            })
            .collect();
        FitDocument {
            schema_version: SCHEMA_VERSION,
            dataset,
            options,
            fit: FitPayload {
                n: fit.n,
                p: fit.p,
                h: fit.sliced.h,
                d_max: fit.d_max,
                kernel: MatrixJson::from_array(fit.kernel.view()),
                sigma: MatrixJson::from_array(fit.sigma.as_array().view()),
                grand_mean: fit.grand_mean.to_vec(),
                eigenvalues: fit.eigenvalues.to_vec(),
                raw_dirs: MatrixJson::from_array(fit.raw_dirs.view()),
                basis: MatrixJson::from_array(fit.basis.view()),
                weights: fit.weights.clone(),
                slice_counts: fit.sliced.counts.clone(),
                slice_proportions: fit.sliced.proportions.clone(),
                slice_labels: fit.sliced.labels.clone(),
                cutpoints: fit.sliced.cutpoints.clone(),
                levels: fit.sliced.levels.clone(),
                component_labels: fit.component_labels.clone(),
                mixtures,
            },
            dimension: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: FitDocument = serde_json::from_str(&text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::FitDocument(format!(
                "unsupported schema version {} (expected {})",
                doc.schema_version, SCHEMA_VERSION
            )));
        }
        Ok(doc)
    }

    /// Project new predictor rows onto the stored directions.
    pub fn project(&self, x: ArrayView2<'_, f64>, d: usize) -> Result<Array2<f64>> {
        if d < 1 || d > self.fit.d_max {
            return Err(Error::DimensionOutOfRange {
                d,
                max: self.fit.d_max,
            });
        }
        if x.ncols() != self.fit.p {
            return Err(Error::DimensionMismatch {
                expected: self.fit.p,
                got: x.ncols(),
            });
        }
        let basis = self.fit.basis.to_array()?;
        let grand_mean = Array1::from_vec(self.fit.grand_mean.clone());
        let centered = &x - &grand_mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&basis.slice(ndarray::s![.., ..d])))
    }

    /// BIC-type dimension criterion from the stored eigenvalues.
    pub fn bic_dimension(&self, penalty: Penalty) -> DimensionReport {
        let mut lambdas = self.fit.eigenvalues.clone();
        lambdas.resize(self.fit.p, 0.0);
        bic_dimension_from_eigenvalues(&lambdas, self.fit.n, self.fit.h, penalty)
    }

    /// Per-slice covariance codes, e.g. for a summary line.
    pub fn mixture_params(&self) -> Result<Vec<CovParam>> {
        self.fit
            .mixtures
            .iter()
            .map(|m| m.param.parse::<CovParam>())
            .collect()
    }
}
