//! LETOR / SVMLight ranking data: parsing, query grouping, feature
//! normalization and a versioned binary cache.

mod cache;
mod letor;

pub use cache::{cache_read, cache_write, read_dataset, write_dataset, CACHE_MAGIC, CACHE_VERSION};
pub use letor::{parse_letor, parse_letor_str, write_letor};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Highest relevance grade.
pub const MAX_LABEL: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub qid: u64,
    pub label: u8,
    pub features: Vec<f64>,
    /// Position within the source file.
    pub doc_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryGroup {
    pub qid: u64,
    pub docs: Vec<Document>,
}

impl QueryGroup {
    pub fn n(&self) -> usize {
        self.docs.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.docs.iter().map(|d| d.label).collect()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.docs.iter().map(|d| d.label as f64).collect()
    }

    /// `[n, k]` feature matrix.
    pub fn feature_matrix<F: Real>(&self) -> Tensor<F> {
        let k = self.docs.first().map_or(0, |d| d.features.len());
        let data = self
            .docs
            .iter()
            .flat_map(|d| d.features.iter().map(|&x| F::of(x)))
            .collect();
        Tensor::new(vec![self.docs.len(), k], data).expect("documents share k")
    }

    pub fn has_relevant(&self) -> bool {
        self.docs.iter().any(|d| d.label > 0)
    }
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub groups: Vec<QueryGroup>,
    pub k: usize,
    /// Statistics the features were normalized with, if any.
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    /// Builds a dataset, checking the grouping and dimensionality invariants.
    pub fn new(groups: Vec<QueryGroup>, k: usize) -> Result<Self> {
        for g in &groups {
            if g.docs.is_empty() {
                return Err(Error::Validation(format!("query {} has no documents", g.qid)));
            }
            for d in &g.docs {
                if d.qid != g.qid {
                    return Err(Error::Validation(format!(
                        "document {} has qid {} inside group {}",
                        d.doc_index, d.qid, g.qid
                    )));
                }
                if d.features.len() != k {
                    return Err(Error::Validation(format!(
                        "document {} has {} features, expected {k}",
                        d.doc_index,
                        d.features.len()
                    )));
                }
                if d.label > MAX_LABEL {
                    return Err(Error::Validation(format!(
                        "document {} has label {} outside 0..={MAX_LABEL}",
                        d.doc_index, d.label
                    )));
                }
            }
        }
        Ok(Self {
            groups,
            k,
            norm_stats: None,
        })
    }

    /// Number of queries.
    #[allow(non_snake_case)]
    pub fn L(&self) -> usize {
        self.groups.len()
    }

    pub fn num_docs(&self) -> usize {
        self.groups.iter().map(QueryGroup::n).sum()
    }

    /// Population mean and standard deviation of every feature. Constant
    /// columns get their exact value as mean and a standard deviation of 1.
    pub fn feature_stats(&self) -> NormStats {
        let n = self.num_docs().max(1) as f64;
        let docs = || self.groups.iter().flat_map(|g| g.docs.iter());
        let mut mean = vec![0.0; self.k];
        let mut std = vec![1.0; self.k];
        for j in 0..self.k {
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for d in docs() {
                let x = d.features[j];
                lo = lo.min(x);
                hi = hi.max(x);
                sum += x;
            }
            if !(lo < hi) {
                mean[j] = if lo.is_finite() { lo } else { 0.0 };
                continue;
            }
            mean[j] = sum / n;
            let var = docs().map(|d| (d.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                std[j] = var.sqrt();
            }
        }
        NormStats { mean, std }
    }

    /// Z-scores every feature with `stats`, or with statistics fitted on this
    /// dataset when `stats` is `None`. The result records the statistics used.
    pub fn normalize(&self, stats: Option<&NormStats>) -> Result<Dataset> {
        let stats = match stats {
            Some(s) => {
                if s.mean.len() != self.k || s.std.len() != self.k {
                    return Err(Error::Validation(format!(
                        "normalization stats have {} entries, dataset has k = {}",
                        s.mean.len(),
                        self.k
                    )));
                }
                if s.std.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Validation("normalization std must be positive".into()));
                }
                s.clone()
            }
            None => self.feature_stats(),
        };
        let mut out = self.clone();
        for g in &mut out.groups {
            for d in &mut g.docs {
                for (j, x) in d.features.iter_mut().enumerate() {
                    *x = (*x - stats.mean[j]) / stats.std[j];
                }
            }
        }
        out.norm_stats = Some(stats);
        Ok(out)
    }

    /// Counts, label histogram and list-length percentiles.
    pub fn summary(&self) -> DatasetSummary {
        let mut hist = [0usize; MAX_LABEL as usize + 1];
        for g in &self.groups {
            for d in &g.docs {
                hist[d.label as usize] += 1;
            }
        }
        let mut lens: Vec<usize> = self.groups.iter().map(QueryGroup::n).collect();
        lens.sort_unstable();
        let pct = |p: f64| {
            if lens.is_empty() {
                0
            } else {
                let idx = ((p / 100.0) * (lens.len() - 1) as f64).round() as usize;
                lens[idx]
            }
        };
        DatasetSummary {
            queries: self.L(),
            documents: self.num_docs(),
            k: self.k,
            label_histogram: hist,
            length_percentiles: [(50, pct(50.0)), (90, pct(90.0)), (99, pct(99.0)), (100, pct(100.0))],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub queries: usize,
    pub documents: usize,
    pub k: usize,
    pub label_histogram: [usize; MAX_LABEL as usize + 1],
    /// `(percentile, list length)` pairs.
    pub length_percentiles: [(u32, usize); 4],
}

#[cfg(test)]
mod tests;
