//! MAP classification on the reduced subspace.
//!
//! The response is the class label, so slices are the classes and the fitted
//! within-slice mixtures double as class-conditional densities. Classification
//! projects a point onto the estimated directions and evaluates the projected
//! mixtures: f̂(z | class h) = Σ_k π̂_hk φ(z; Bᵀμ̂_hk, BᵀΣ̂_hk B), combined
//! with the class priors by Bayes' rule. A plain LDA baseline is included for
//! comparison.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::dataset::{Dataset, Response};
use crate::error::{Error, Result};
use crate::estimator::{fit_msir, MsirOptions};
use crate::gmm::{mixture_log_density, project_components, GaussianComponent, GmmOptions, SliceMixture};
use crate::slicing::Treatment;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn response_labels(response: &Response) -> Vec<String> {
    match response {
        Response::Numeric(v) => v.iter().map(|x| format!("{x}")).collect(),
        Response::Categorical(v) => v.clone(),
    }
}

/// Classifier over the mixture-based reduced subspace.
#[derive(Debug, Clone)]
pub struct ReducedClassifier {
    /// Class labels in slice order (ascending / lexicographic).
    pub classes: Vec<String>,
    /// Class priors (training frequencies).
    pub priors: Vec<f64>,
    /// Class-conditional mixtures fitted in the original predictor space.
    pub class_mixtures: Vec<SliceMixture>,
    /// First `d` estimated directions (p × d).
    pub basis: Array2<f64>,
    pub d: usize,
    pub grand_mean: Array1<f64>,
    /// Mixtures projected onto the subspace, cached for prediction.
    projected: Vec<Vec<GaussianComponent>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub gmm: GmmOptions,
    pub seed: u64,
}

/// Fit the reduction on labeled data and keep the first `d` directions.
pub fn train(data: &Dataset, d: usize, opts: &TrainOptions) -> Result<ReducedClassifier> {
    if data.response.distinct_count() < 2 {
        return Err(Error::InvalidOptions(
            "classification needs at least 2 classes".into(),
        ));
    }
    let fit = fit_msir(
        data,
        &MsirOptions {
            treatment: Treatment::Discrete,
            gmm: opts.gmm.clone(),
            seed: opts.seed,
            ..MsirOptions::default()
        },
    )?;
    if d < 1 || d > fit.d_max {
        return Err(Error::DimensionOutOfRange { d, max: fit.d_max });
    }
    let classes = fit
        .sliced
        .levels
        .clone()
        .expect("discrete slicing always records levels");
    let basis = fit.basis.slice(ndarray::s![.., ..d]).to_owned();
    ReducedClassifier::from_parts(
        classes,
        fit.sliced.proportions.clone(),
        fit.slice_mixtures,
        basis,
        fit.grand_mean,
    )
}

impl ReducedClassifier {
    /// Assemble a classifier from already-fitted parts; validates shapes and
    /// builds the projected mixtures.
    pub fn from_parts(
        classes: Vec<String>,
        priors: Vec<f64>,
        class_mixtures: Vec<SliceMixture>,
        basis: Array2<f64>,
        grand_mean: Array1<f64>,
    ) -> Result<Self> {
        if classes.len() != priors.len() || classes.len() != class_mixtures.len() {
            return Err(Error::DimensionMismatch {
                expected: classes.len(),
                got: class_mixtures.len(),
            });
        }
        let d = basis.ncols();
        let projected = class_mixtures
            .iter()
            .map(|m| project_components(&m.components, basis.view(), grand_mean.view()))
            .collect();
        Ok(Self {
            classes,
            priors,
            class_mixtures,
            basis,
            d,
            grand_mean,
            projected,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Posterior class probabilities for one point in the original p-space.
    pub fn posterior(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "classification input".into(),
            });
        }
        if x.len() != self.grand_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grand_mean.len(),
                got: x.len(),
            });
        }
        let z = self.basis.t().dot(&(&x - &self.grand_mean));
        let mut log_post = Vec::with_capacity(self.n_classes());
        for (comps, &prior) in self.projected.iter().zip(self.priors.iter()) {
            let lp = if prior > 0.0 {
                prior.ln() + mixture_log_density(comps, z.view())?
            } else {
                f64::NEG_INFINITY
            };
            log_post.push(lp);
        }
        let lse = log_sum_exp(&log_post);
        Ok(log_post.iter().map(|&lp| (lp - lse).exp()).collect())
    }

    /// MAP class index; ties go to the first (lexicographically smallest)
    /// label.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        let post = self.posterior(x)?;
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (i, &p) in post.iter().enumerate() {
            if p > best_p {
                best_p = p;
                best = i;
            }
        }
        Ok(best)
    }

    pub fn predict_labels(&self, x: ArrayView2<'_, f64>) -> Result<Vec<String>> {
        x.rows()
            .into_iter()
            .map(|row| Ok(self.classes[self.predict(row)?].clone()))
            .collect()
    }

    /// Fraction of rows whose MAP class differs from the recorded label.
    pub fn error_rate(&self, data: &Dataset) -> Result<f64> {
        let truth = response_labels(&data.response);
        let predicted = self.predict_labels(data.predictors.view())?;
        let wrong = truth
            .iter()
            .zip(predicted.iter())
            .filter(|(t, p)| t != p)
            .count();
        Ok(wrong as f64 / truth.len() as f64)
    }
}

/// Linear discriminant analysis baseline: shared (pooled, divisor n)
/// covariance, class means, frequency priors.
#[derive(Debug, Clone)]
pub struct LdaClassifier {
    pub classes: Vec<String>,
    pub priors: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub pooled_cov: Array2<f64>,
}

pub fn train_lda(data: &Dataset) -> Result<LdaClassifier> {
    let labels = response_labels(&data.response);
    let mut classes: Vec<String> = labels.clone();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidOptions(
            "LDA needs at least 2 classes".into(),
        ));
    }
    let n = data.n();
    let p = data.p();
    let mut priors = Vec::with_capacity(classes.len());
    let mut means = Vec::with_capacity(classes.len());
    let mut pooled = Array2::zeros((p, p));
    for class in &classes {
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| *l == class)
            .map(|(i, _)| i)
            .collect();
        if rows.len() < 2 {
            return Err(Error::TooFewRows {
                need: 2,
                got: rows.len(),
            });
        }
        let xc = data.predictors.select(Axis(0), &rows);
        let mean = xc.mean_axis(Axis(0)).expect("non-empty class");
        for row in xc.rows() {
            for i in 0..p {
                let di = row[i] - mean[i];
                for j in i..p {
                    pooled[[i, j]] += di * (row[j] - mean[j]);
                }
            }
        }
        priors.push(rows.len() as f64 / n as f64);
        means.push(mean);
    }
    for i in 0..p {
        for j in i..p {
            let v = pooled[[i, j]] / n as f64;
            pooled[[i, j]] = v;
            pooled[[j, i]] = v;
        }
    }
    Ok(LdaClassifier {
        classes,
        priors,
        means,
        pooled_cov: pooled,
    })
}

impl LdaClassifier {
    pub fn posterior(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        let comps: Vec<GaussianComponent> = self
            .means
            .iter()
            .map(|m| GaussianComponent {
                weight: 1.0,
                mean: m.clone(),
                cov: self.pooled_cov.clone(),
            })
            .collect();
        let mut log_post = Vec::with_capacity(self.classes.len());
        for (c, &prior) in comps.iter().zip(self.priors.iter()) {
            let lp = prior.ln() + mixture_log_density(std::slice::from_ref(c), x)?;
            log_post.push(lp);
        }
        let lse = log_sum_exp(&log_post);
        Ok(log_post.iter().map(|&lp| (lp - lse).exp()).collect())
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        let post = self.posterior(x)?;
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (i, &p) in post.iter().enumerate() {
            if p > best_p {
                best_p = p;
                best = i;
            }
        }
        Ok(best)
    }

    pub fn error_rate(&self, data: &Dataset) -> Result<f64> {
        let truth = response_labels(&data.response);
        let mut wrong = 0usize;
        for (row, label) in data.predictors.rows().into_iter().zip(truth.iter()) {
            if &self.classes[self.predict(row)?] != label {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / truth.len() as f64)
    }
}
