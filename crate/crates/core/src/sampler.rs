//! Reverse sampling: start from Gaussian labels and denoise them step by
//! step, optionally visiting only an evenly spaced subset of timesteps.

use rayon::prelude::*;

use crate::autodiff::{Graph, Real, Tensor};
use crate::data::{Dataset, QueryGroup};
use crate::error::{Error, Result};
use crate::metrics::{self, evaluate_dataset, Cutoff, MetricsReport};
use crate::model::DenoiseModel;
use crate::rng::{query_stream, standard_normal, StreamRng};
use crate::schedule::ScheduleTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Denoising iterations actually executed.
    pub reverse_steps: usize,
    pub seed: u64,
    /// Drop the posterior noise, so runs differ only through the start draw.
    pub zero_variance: bool,
}

impl SamplerConfig {
    pub fn new(reverse_steps: usize, seed: u64) -> Self {
        Self {
            reverse_steps,
            seed,
            zero_variance: false,
        }
    }
}

/// `steps` evenly spaced timesteps from `T` down to 1:
/// `round(T - i (T - 1) / (steps - 1))` for `i = 0..steps`.
pub fn stride_schedule(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Contract(format!(
            "reverse steps must lie in 1..={timesteps}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![timesteps]);
    }
    let span = (timesteps - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| (timesteps as f64 - i as f64 * span).round() as usize)
        .collect())
}

/// Output of one reverse run.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    /// Final `ŷ₀` per document.
    pub scores: Vec<f64>,
    /// Document positions by descending score, ties by position.
    pub order: Vec<usize>,
    /// The Gaussian start draw `Y_T`.
    pub start: Vec<f64>,
}

/// Runs the reverse chain for one feature matrix with the given generator.
pub fn sample<F: Real>(
    model: &DenoiseModel<F>,
    table: &ScheduleTable,
    features: &Tensor<F>,
    cfg: &SamplerConfig,
    rng: &mut StreamRng,
) -> Result<Ranked> {
    if table.spec() != model.schedule {
        return Err(Error::Incompatible(format!(
            "model was trained with schedule {:?}, sampler was given {:?}",
            model.schedule,
            table.spec()
        )));
    }
    let visited = stride_schedule(table.timesteps(), cfg.reverse_steps)?;
    let ascending: Vec<usize> = visited.iter().rev().copied().collect();
    let effective = table.subsequence(&ascending)?;

    let n = features.rows();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(features.clone());
    let h = model.encode(&mut g, &p, x, None, None)?;
    let mark = g.len();

    let start = standard_normal(rng, n);
    let mut y = start.clone();
    for (pos, &t) in visited.iter().enumerate() {
        let y0_node = model.denoise(&mut g, &p, h, &y, t, None)?;
        let y0 = g.value(y0_node).to_f64_vec();
        g.truncate(mark);
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("denoiser output at t={t}")));
        }
        let j = visited.len() - pos;
        if j == 1 {
            let order = metrics::ranking(&y0);
            return Ok(Ranked { scores: y0, order, start });
        }
        let (mean, var) = effective.posterior(&y, &y0, j)?;
        y = if cfg.zero_variance {
            mean
        } else {
            let sd = var.sqrt();
            let eps = standard_normal(rng, n);
            mean.iter().zip(eps).map(|(m, e)| m + sd * e).collect()
        };
    }
    unreachable!("the visited schedule is never empty")
}

/// Ranks the query at position `query` of its dataset.
pub fn rank_query<F: Real>(
    model: &DenoiseModel<F>,
    table: &ScheduleTable,
    group: &QueryGroup,
    query: usize,
    cfg: &SamplerConfig,
) -> Result<Ranked> {
    let x = group.feature_matrix::<F>();
    sample(model, table, &x, cfg, &mut query_stream(cfg.seed, query, 0))
}

/// `m` independent runs, run `r` drawing from its own stream; run 0 equals
/// [`rank_query`].
pub fn rank_query_repeated<F: Real>(
    model: &DenoiseModel<F>,
    table: &ScheduleTable,
    group: &QueryGroup,
    query: usize,
    cfg: &SamplerConfig,
    m: usize,
) -> Result<Vec<Ranked>> {
    if m == 0 {
        return Err(Error::Contract("at least one repetition is required".into()));
    }
    let x = group.feature_matrix::<F>();
    (0..m)
        .map(|run| sample(model, table, &x, cfg, &mut query_stream(cfg.seed, query, run)))
        .collect()
}

/// Metrics of the sampler's rankings over a dataset.
pub fn evaluate_model<F: Real>(
    model: &DenoiseModel<F>,
    table: &ScheduleTable,
    ds: &Dataset,
    cfg: &SamplerConfig,
    cutoffs: &[Cutoff],
) -> Result<MetricsReport> {
    evaluate_dataset(ds, |i, g| Ok(rank_query(model, table, g, i, cfg)?.scores), cutoffs)
}

/// Deterministic reference scorer: the row sums of the model's feature
/// projection. Used as the no-diversity baseline.
pub fn projection_scores<F: Real>(model: &DenoiseModel<F>, features: &Tensor<F>) -> Result<Vec<f64>> {
    let w = model.param("encoder.proj.weight").expect("projection is always present");
    let b = model.param("encoder.proj.bias").expect("projection is always present");
    let mut g = Graph::new();
    let (wv, bv, x) = (g.constant(w.clone()), g.constant(b.clone()), g.constant(features.clone()));
    let xw = g.matmul(x, wv)?;
    let proj = g.add(xw, bv)?;
    let s = g.sum_axis(proj, 1)?;
    Ok(g.value(s).to_f64_vec())
}

/// Diversity and quality over `M` repeated inferences per query.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    pub m: usize,
    pub ks: Vec<usize>,
    /// Mean RSD@(K, M) over queries, per K.
    pub rsd: Vec<f64>,
    /// NDCG@K averaged over runs and queries, per K.
    pub ndcg_mean: Vec<f64>,
    /// NDCG@K of run 0 alone, per K.
    pub ndcg_single: Vec<f64>,
    /// Per-run NDCG@K means, `[run][k]`.
    pub ndcg_runs: Vec<Vec<f64>>,
    pub n_queries: usize,
}

impl DiversityReport {
    /// `k,m,rsd,ndcg_mean,ndcg_single,n_queries` rows; RSD is left empty when
    /// `M = 1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m,rsd,ndcg_mean,ndcg_single,n_queries\n");
        for (i, k) in self.ks.iter().enumerate() {
            let rsd = if self.m > 1 { format!("{:.6}", self.rsd[i]) } else { String::new() };
            out.push_str(&format!(
                "{k},{},{rsd},{:.6},{:.6},{}\n",
                self.m, self.ndcg_mean[i], self.ndcg_single[i], self.n_queries
            ));
        }
        out
    }
}

/// Runs every query `m` times with any per-query ranker and aggregates RSD
/// and NDCG. `runs(i, group)` must return `m` score vectors.
pub fn diversity_with<R>(ds: &Dataset, ks: &[usize], m: usize, runs: R) -> Result<DiversityReport>
where
    R: Fn(usize, &QueryGroup) -> Result<Vec<Vec<f64>>> + Sync,
{
    if m == 0 || ks.is_empty() || ks.contains(&0) {
        return Err(Error::Contract("diversity needs M >= 1 and positive cutoffs".into()));
    }
    // per query: (distinct prefixes per k, ndcg per run per k); None for
    // queries without relevant documents
    type PerQuery = Option<(Vec<usize>, Vec<Vec<f64>>)>;
    let per_query: Vec<PerQuery> = ds
        .groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            if !g.has_relevant() {
                return Ok(None);
            }
            let scores = runs(i, g).map_err(|e| e.in_query(g.qid))?;
            if scores.len() != m {
                return Err(Error::Contract(format!("expected {m} runs, got {}", scores.len())).in_query(g.qid));
            }
            let orders: Vec<Vec<usize>> = scores.iter().map(|s| metrics::ranking(s)).collect();
            let rsd = ks
                .iter()
                .map(|&k| metrics::rsd(&orders, k).map(|r| r.n))
                .collect::<Result<Vec<_>>>()?;
            let labels = g.labels();
            let ndcg = scores
                .iter()
                .map(|s| {
                    ks.iter()
                        .map(|&k| Ok(metrics::ndcg_at_k(s, &labels, k)?.expect("list has a relevant document")))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((rsd, ndcg)))
        })
        .collect::<Result<_>>()?;
    let included: Vec<&(Vec<usize>, Vec<Vec<f64>>)> = per_query.iter().flatten().collect();
    let nq = included.len() as f64;
    // mean of N/M over queries, summed as integers to keep 1/M exact
    let rsd = (0..ks.len())
        .map(|j| included.iter().map(|q| q.0[j]).sum::<usize>() as f64 / (m as f64 * nq))
        .collect();
    let ndcg_runs: Vec<Vec<f64>> = (0..m)
        .map(|r| (0..ks.len()).map(|j| included.iter().map(|q| q.1[r][j]).sum::<f64>() / nq).collect())
        .collect();
    let ndcg_mean = (0..ks.len())
        .map(|j| ndcg_runs.iter().map(|r| r[j]).sum::<f64>() / m as f64)
        .collect();
    Ok(DiversityReport {
        m,
        ks: ks.to_vec(),
        rsd,
        ndcg_mean,
        ndcg_single: ndcg_runs[0].clone(),
        ndcg_runs,
        n_queries: included.len(),
    })
}

/// [`diversity_with`] using the diffusion sampler.
pub fn diversity<F: Real>(
    model: &DenoiseModel<F>,
    table: &ScheduleTable,
    ds: &Dataset,
    cfg: &SamplerConfig,
    ks: &[usize],
    m: usize,
) -> Result<DiversityReport> {
    diversity_with(ds, ks, m, |i, g| {
        Ok(rank_query_repeated(model, table, g, i, cfg, m)?
            .into_iter()
            .map(|r| r.scores)
            .collect())
    })
}
