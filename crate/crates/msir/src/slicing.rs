//! Response slicing: split a response vector into H non-overlapping slices
//! with approximately equal counts.
//!
//! Continuous responses are split on order statistics; tied values always
//! share a slice, with the boundary extending rightward past the tie, so
//! slice membership is a function of the response value alone. Discrete and
//! categorical responses get one slice per distinct value.

use serde::{Deserialize, Serialize};

use crate::dataset::Response;
use crate::error::{Error, Result};

/// Requested slice count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceSpec {
    /// Use [`default_num_slices`] for the data at hand.
    #[default]
    Auto,
    Fixed(usize),
}

/// How to interpret a numeric response when slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Treatment {
    /// Discrete when the distinct-value count is at most max(10, H) and the
    /// response actually repeats values; continuous otherwise.
    #[default]
    Auto,
    Continuous,
    Discrete,
}

/// Slice assignment for one response vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicedResponse {
    /// Per-observation slice label in 1..=h.
    pub labels: Vec<usize>,
    /// Observations per slice; sums to n, every entry >= 1.
    pub counts: Vec<usize>,
    /// counts / n.
    pub proportions: Vec<f64>,
    /// Number of slices actually used (may differ from the request for
    /// discrete responses).
    pub h: usize,
    /// Interval boundaries between consecutive slices (continuous case only),
    /// length h - 1.
    pub cutpoints: Option<Vec<f64>>,
    /// Distinct response value per slice (discrete/categorical case only).
    pub levels: Option<Vec<String>>,
}

impl SlicedResponse {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Row indices belonging to slice `label` (1-based).
    pub fn slice_indices(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Default slice count H = max(3, floor(log2(n / sqrt(p)))).
///
/// More data or fewer predictors allow more slices; the floor of 3 keeps the
/// kernel rank at least 2 even for tiny samples.
pub fn default_num_slices(n: usize, p: usize) -> usize {
    let ratio = n as f64 / (p as f64).sqrt();
    let h = ratio.log2().floor();
    if h.is_finite() && h >= 3.0 {
        h as usize
    } else {
        3
    }
}

/// Slice a response into `h` groups under the given treatment.
///
/// For discrete/categorical responses `h` is overridden by the number of
/// distinct values. For continuous responses the number of distinct values
/// must be at least `h`.
pub fn slice_response(y: &Response, h: usize, treatment: Treatment) -> Result<SlicedResponse> {
    if h < 1 {
        return Err(Error::InvalidOptions("slice count must be >= 1".into()));
    }
    match y {
        Response::Categorical(labels) => slice_categorical(labels),
        Response::Numeric(values) => {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "response".into(),
                });
            }
            let n = values.len();
            let distinct = count_distinct(values.as_slice().expect("contiguous"));
            let discrete = match treatment {
                Treatment::Discrete => true,
                Treatment::Continuous => false,
                Treatment::Auto => distinct <= 10.max(h) && distinct < n,
            };
            if discrete {
                slice_numeric_discrete(values.as_slice().expect("contiguous"))
            } else {
                slice_numeric_continuous(values.as_slice().expect("contiguous"), h, distinct)
            }
        }
    }
}

fn count_distinct(values: &[f64]) -> usize {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    sorted.dedup();
    sorted.len()
}

fn finish(labels: Vec<usize>, counts: Vec<usize>, cutpoints: Option<Vec<f64>>, levels: Option<Vec<String>>) -> SlicedResponse {
    let n = labels.len();
    let proportions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    SlicedResponse {
        h: counts.len(),
        labels,
        counts,
        proportions,
        cutpoints,
        levels,
    }
}

fn slice_categorical(labels: &[String]) -> Result<SlicedResponse> {
    let mut levels: Vec<String> = labels.to_vec();
    levels.sort();
    levels.dedup();
    let mut counts = vec![0usize; levels.len()];
    let assigned: Vec<usize> = labels
        .iter()
        .map(|l| {
            let k = levels.binary_search(l).expect("level present");
            counts[k] += 1;
            k + 1
        })
        .collect();
    Ok(finish(assigned, counts, None, Some(levels)))
}

fn slice_numeric_discrete(values: &[f64]) -> Result<SlicedResponse> {
    let mut levels: Vec<f64> = values.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    levels.dedup();
    let mut counts = vec![0usize; levels.len()];
    let assigned: Vec<usize> = values
        .iter()
        .map(|v| {
            let k = levels
                .binary_search_by(|probe| probe.partial_cmp(v).expect("finite"))
                .expect("level present");
            counts[k] += 1;
            k + 1
        })
        .collect();
    let level_names = levels.iter().map(|v| format!("{v}")).collect();
    Ok(finish(assigned, counts, None, Some(level_names)))
}

/// Balanced split of the order statistics into `h` contiguous groups.
///
/// Boundaries can only fall between runs of distinct values. Each slice aims
/// for ceil(remaining / remaining_slices) observations and the boundary moves
/// rightward past ties, except when that would leave too few runs for the
/// remaining slices, in which case it is pulled back to the last feasible run.
fn slice_numeric_continuous(values: &[f64], h: usize, distinct: usize) -> Result<SlicedResponse> {
    let n = values.len();
    if distinct < h {
        return Err(Error::TooManySlices { h, distinct });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));

    // Cumulative end position of each run of equal values.
    let mut run_ends: Vec<usize> = Vec::with_capacity(distinct);
    for i in 1..n {
        if values[order[i]] != values[order[i - 1]] {
            run_ends.push(i);
        }
    }
    run_ends.push(n);
    let m = run_ends.len();
    debug_assert_eq!(m, distinct);

    let mut boundaries: Vec<usize> = Vec::with_capacity(h - 1);
    let mut pos = 0usize; // observations consumed
    let mut next_run = 0usize; // first unconsumed run index
    for slice_i in 0..h.saturating_sub(1) {
        let remaining_slices = h - slice_i;
        let target = (n - pos).div_ceil(remaining_slices);
        let want = pos + target;
        // smallest run end >= want, but leave one run for each later slice
        let cap = m - h + slice_i;
        let mut j = next_run;
        while j < cap && run_ends[j] < want {
            j += 1;
        }
        boundaries.push(run_ends[j]);
        pos = run_ends[j];
        next_run = j + 1;
    }

    let mut labels = vec![0usize; n];
    let mut counts = vec![0usize; h];
    let mut slice = 0usize;
    for (rank, &obs) in order.iter().enumerate() {
        while slice < h - 1 && rank >= boundaries[slice] {
            slice += 1;
        }
        labels[obs] = slice + 1;
        counts[slice] += 1;
    }
    debug_assert!(counts.iter().all(|&c| c >= 1));

    let cutpoints = boundaries
        .iter()
        .map(|&b| 0.5 * (values[order[b - 1]] + values[order[b]]))
        .collect();
    Ok(finish(labels, counts, Some(cutpoints), None))
}
