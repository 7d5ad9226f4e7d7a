//! Ranking quality metrics and ranking-sequence diversity.
//!
//! All per-query metrics take raw scores and graded labels. The ranking is
//! scores descending with ties broken by list position ascending, which is
//! the same convention the sampler uses.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Dataset, QueryGroup, MAX_LABEL};
use crate::error::{Error, Result};

/// Ranking cutoff.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cutoff {
    At(usize),
    /// The whole list.
    All,
}

impl Cutoff {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Cutoff::At(k) => k,
            Cutoff::All => n,
        }
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::At(k) => write!(f, "{k}"),
            Cutoff::All => f.write_str("all"),
        }
    }
}

impl FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Cutoff::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Cutoff::At(k)),
            _ => Err(Error::Validation(format!("cutoff must be a positive integer or \"all\", got {s:?}"))),
        }
    }
}

pub const DEFAULT_CUTOFFS: [Cutoff; 6] = [
    Cutoff::At(1),
    Cutoff::At(3),
    Cutoff::At(5),
    Cutoff::At(10),
    Cutoff::At(20),
    Cutoff::All,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Ndcg,
    Err,
    Map,
    Mrr,
    Precision,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Ndcg, Metric::Err, Metric::Map, Metric::Mrr, Metric::Precision];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ndcg => "ndcg",
            Metric::Err => "err",
            Metric::Map => "map",
            Metric::Mrr => "mrr",
            Metric::Precision => "precision",
        }
    }

    /// Value for one query; `None` only for NDCG on an all-zero list.
    pub fn compute(self, scores: &[f64], labels: &[u8], k: usize) -> Result<Option<f64>> {
        Ok(match self {
            Metric::Ndcg => ndcg_at_k(scores, labels, k)?,
            Metric::Err => Some(err_at_k(scores, labels, k)?),
            Metric::Map => Some(map_at_k(scores, labels, k)?),
            Metric::Mrr => Some(mrr_at_k(scores, labels, k)?),
            Metric::Precision => Some(precision_at_k(scores, labels, k)?),
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Indices sorted by score descending, ties by index ascending.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check(scores: &[f64], labels: &[u8], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Contract("metric cutoff K must be at least 1".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|&&l| l > MAX_LABEL) {
        return Err(Error::Validation(format!("label {l} outside 0..={MAX_LABEL}")));
    }
    Ok(())
}

fn gain(label: u8) -> f64 {
    (1u32 << label) as f64 - 1.0
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

fn dcg(labels_in_order: impl Iterator<Item = u8>) -> f64 {
    labels_in_order.enumerate().map(|(r, l)| gain(l) * discount(r)).sum()
}

/// NDCG@K with gain `2^l - 1`; `None` when the list has no relevant document.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<Option<f64>> {
    check(scores, labels, k)?;
    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return Ok(None);
    }
    let actual = dcg(ranking(scores).into_iter().take(k).map(|i| labels[i]));
    Ok(Some(actual / idcg))
}

/// Expected reciprocal rank with stopping probability `(2^l - 1) / 2^4`.
pub fn err_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    check(scores, labels, k)?;
    let max_gain = (1u32 << MAX_LABEL) as f64;
    let mut keep_going = 1.0;
    let mut total = 0.0;
    for (r, i) in ranking(scores).into_iter().take(k).enumerate() {
        let stop = gain(labels[i]) / max_gain;
        total += keep_going * stop / (r + 1) as f64;
        keep_going *= 1.0 - stop;
    }
    Ok(total)
}

/// Mean precision at the relevant positions within the top K (0 if none).
pub fn map_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    check(scores, labels, k)?;
    let (mut hits, mut sum) = (0usize, 0.0);
    for (r, i) in ranking(scores).into_iter().take(k).enumerate() {
        if labels[i] > 0 {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

pub fn mrr_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    check(scores, labels, k)?;
    Ok(ranking(scores)
        .into_iter()
        .take(k)
        .position(|i| labels[i] > 0)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64))
}

pub fn precision_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    check(scores, labels, k)?;
    let hits = ranking(scores).into_iter().take(k).filter(|&i| labels[i] > 0).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsdResult {
    pub k: usize,
    pub m: usize,
    /// Distinct top-K prefixes.
    pub n: usize,
    pub rsd: f64,
}

/// Ranking-sequence diversity: distinct length-K prefixes over `M` runs,
/// divided by `M`.
pub fn rsd(runs: &[Vec<usize>], k: usize) -> Result<RsdResult> {
    if runs.is_empty() {
        return Err(Error::Contract("diversity needs at least one run".into()));
    }
    if k < 1 {
        return Err(Error::Contract("diversity cutoff K must be at least 1".into()));
    }
    let mut reference = runs[0].clone();
    reference.sort_unstable();
    for run in &runs[1..] {
        let mut ids = run.clone();
        ids.sort_unstable();
        if ids != reference {
            return Err(Error::Contract("runs rank different document sets".into()));
        }
    }
    let distinct: HashSet<&[usize]> = runs.iter().map(|r| &r[..k.min(r.len())]).collect();
    Ok(RsdResult {
        k,
        m: runs.len(),
        n: distinct.len(),
        rsd: distinct.len() as f64 / runs.len() as f64,
    })
}

/// Metric values of one query, indexed `[metric][cutoff]` in the order of
/// [`Metric::ALL`] and the report's cutoffs.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMetrics {
    pub qid: u64,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cutoffs: Vec<Cutoff>,
    pub per_query: Vec<QueryMetrics>,
    /// Queries with no relevant document, left out of every mean.
    pub excluded: usize,
}

impl MetricsReport {
    pub fn n_queries(&self) -> usize {
        self.per_query.len()
    }

    /// Mean over the included queries; `NaN` when there are none.
    pub fn mean(&self, metric: Metric, cutoff: Cutoff) -> f64 {
        let m = Metric::ALL.iter().position(|&x| x == metric).expect("metric listed");
        let Some(c) = self.cutoffs.iter().position(|&x| x == cutoff) else {
            return f64::NAN;
        };
        let n = self.per_query.len();
        self.per_query.iter().map(|q| q.values[m][c]).sum::<f64>() / n as f64
    }

    /// `metric,k,value,n_queries` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value,n_queries\n");
        for metric in Metric::ALL {
            for &c in &self.cutoffs {
                out.push_str(&format!("{metric},{c},{:.6},{}\n", self.mean(metric, c), self.n_queries()));
            }
        }
        out
    }

    /// Human-readable table, values scaled by 100.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "metric");
        for c in &self.cutoffs {
            out.push_str(&format!("{:>9}", format!("@{c}")));
        }
        out.push('\n');
        for metric in Metric::ALL {
            out.push_str(&format!("{:<10}", metric.name()));
            for &c in &self.cutoffs {
                out.push_str(&format!("{:>9.2}", 100.0 * self.mean(metric, c)));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "queries: {} (excluded without relevant documents: {})\n",
            self.n_queries(),
            self.excluded
        ));
        out
    }
}

/// Per-query metric values, or `None` for a list without relevant documents.
pub fn query_metrics(scores: &[f64], group: &QueryGroup, cutoffs: &[Cutoff]) -> Result<Option<QueryMetrics>> {
    if !group.has_relevant() {
        return Ok(None);
    }
    let labels = group.labels();
    let values = Metric::ALL
        .iter()
        .map(|m| {
            cutoffs
                .iter()
                .map(|c| Ok(m.compute(scores, &labels, c.resolve(labels.len()))?.expect("list has a relevant document")))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Some(QueryMetrics { qid: group.qid, values }))
}

/// Scores every query with `ranker` (in parallel) and aggregates the metrics.
/// `ranker` receives the query's position in the dataset and the group.
pub fn evaluate_dataset<R>(ds: &Dataset, ranker: R, cutoffs: &[Cutoff]) -> Result<MetricsReport>
where
    R: Fn(usize, &QueryGroup) -> Result<Vec<f64>> + Sync,
{
    if cutoffs.is_empty() {
        return Err(Error::Contract("at least one cutoff is required".into()));
    }
    let results: Vec<Option<QueryMetrics>> = ds
        .groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let scores = ranker(i, g).map_err(|e| e.in_query(g.qid))?;
            if scores.len() != g.n() {
                return Err(Error::shape("ranker output", &[scores.len()], &[g.n()]).in_query(g.qid));
            }
            if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
                return Err(Error::NonFinite(format!("ranker produced score {s}")).in_query(g.qid));
            }
            query_metrics(&scores, g, cutoffs).map_err(|e| e.in_query(g.qid))
        })
        .collect::<Result<_>>()?;
    let excluded = results.iter().filter(|r| r.is_none()).count();
    Ok(MetricsReport {
        cutoffs: cutoffs.to_vec(),
        per_query: results.into_iter().flatten().collect(),
        excluded,
    })
}

#[cfg(test)]
mod tests;
