//! Training loop: noise the labels of each query at a random timestep,
//! predict the clean labels, and update the parameters with AdamW.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor};
use crate::data::{Dataset, QueryGroup};
use crate::error::{Error, Result};
use crate::losses::{loss, LossKind};
use crate::metrics::{Cutoff, Metric};
use crate::model::DenoiseModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{seeded, standard_normal, StreamRng};
use crate::sampler::{evaluate_model, SamplerConfig};
use crate::schedule::ScheduleTable;

/// Checkpoint written whenever validation improves.
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Queries per update.
    pub batch_size: usize,
    pub loss: LossKind,
    pub eval_every: usize,
    pub seed: u64,
    /// Longer training lists are cut to a random subset of this size.
    pub max_list_len: usize,
    pub adamw: AdamWConfig,
    /// Reverse steps used for validation; `None` runs the full chain.
    pub eval_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            loss: LossKind::Mse,
            eval_every: 10,
            seed: 0,
            max_list_len: 512,
            adamw: AdamWConfig::default(),
            eval_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.max_list_len == 0 {
            return Err(Error::Validation(
                "epochs, batch_size, eval_every and max_list_len must be positive".into(),
            ));
        }
        if !(self.adamw.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.adamw.lr)));
        }
        self.adamw.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Uniform draw from `{1, ..., T}`.
pub fn sample_timestep(rng: &mut impl Rng, timesteps: usize) -> usize {
    rng.random_range(1..=timesteps)
}

/// Timestep and noise for one list.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Parameters, optimizer moments and the training generator.
#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub model: DenoiseModel<F>,
    pub optimizer: AdamW<F>,
    pub rng: StreamRng,
    pub epoch: usize,
}

impl<F: Real> TrainState<F> {
    pub fn new(model: DenoiseModel<F>, adamw: AdamWConfig, seed: u64) -> Self {
        let optimizer = AdamW::new(adamw, model.params().iter().map(|p| p.shape()));
        Self {
            model,
            optimizer,
            rng: seeded(seed),
            epoch: 0,
        }
    }
}

/// Keeps at most `cap` documents, chosen at random, in their original order.
fn cap_list(group: &QueryGroup, cap: usize, rng: &mut StreamRng) -> Option<QueryGroup> {
    if group.n() <= cap {
        return None;
    }
    let mut keep: Vec<usize> = rand::seq::index::sample(rng, group.n(), cap).into_vec();
    keep.sort_unstable();
    Some(QueryGroup {
        qid: group.qid,
        docs: keep.into_iter().map(|i| group.docs[i].clone()).collect(),
    })
}

type ListGradients<F> = (f64, Vec<Option<Tensor<F>>>);

/// Loss value and gradients of one list; `None` if the loss skipped it.
fn query_gradients<F: Real>(
    model: &DenoiseModel<F>,
    group: &QueryGroup,
    draw: &Draw,
    table: &ScheduleTable,
    kind: LossKind,
    mut dropout: Option<&mut StreamRng>,
) -> Result<Option<ListGradients<F>>> {
    let labels = group.labels_f64();
    let y_t = table.q_sample(&labels, draw.t, &draw.eps)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.constant(group.feature_matrix());
    let h = model.encode(&mut g, &p, x, None, dropout.as_deref_mut())?;
    let y0 = model.denoise(&mut g, &p, h, &y_t, draw.t, dropout)?;
    let Some(l) = loss(&mut g, kind, y0, &labels, None)? else {
        return Ok(None);
    };
    let value = g.value(l).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value} at t={}", draw.t)).in_query(group.qid));
    }
    let mut grads = g.backward(l)?;
    Ok(Some((value, model.collect_grads(&p, &mut grads))))
}

/// One AdamW update on `batch` with the given per-list draws. Returns the
/// mean loss over the lists that contributed.
pub fn train_step_with<F: Real>(
    state: &mut TrainState<F>,
    batch: &[QueryGroup],
    draws: &[Draw],
    table: &ScheduleTable,
    kind: LossKind,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::Contract(format!(
            "train step needs a non-empty batch with one draw per list, got {} lists and {} draws",
            batch.len(),
            draws.len()
        )));
    }
    let use_dropout = state.model.config.dropout > 0.0;
    let mut sum: Vec<Option<Tensor<F>>> = vec![None; state.model.params().len()];
    let (mut total, mut count) = (0.0, 0usize);
    for (group, draw) in batch.iter().zip(draws) {
        let rng = use_dropout.then_some(&mut state.rng);
        let Some((value, grads)) = query_gradients(&state.model, group, draw, table, kind, rng)? else {
            continue;
        };
        total += value;
        count += 1;
        for (acc, gr) in sum.iter_mut().zip(grads) {
            match (acc.as_mut(), gr) {
                (Some(a), Some(gr)) => a.data_mut().iter_mut().zip(gr.data()).for_each(|(a, &b)| *a = *a + b),
                (None, Some(gr)) => *acc = Some(gr),
                _ => {}
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    let inv = F::of(1.0 / count as f64);
    for t in sum.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    if let Some((i, _)) = sum.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
        return Err(Error::NonFinite(format!(
            "gradient of {} (batch starting with query {})",
            state.model.names()[i],
            batch[0].qid
        )));
    }
    state.optimizer.step(state.model.params_mut(), &sum)?;
    Ok(total / count as f64)
}

/// Draws a timestep and noise for every list, then updates.
pub fn train_step<F: Real>(
    state: &mut TrainState<F>,
    batch: &[QueryGroup],
    table: &ScheduleTable,
    kind: LossKind,
) -> Result<f64> {
    let draws: Vec<Draw> = batch
        .iter()
        .map(|g| {
            let t = sample_timestep(&mut state.rng, table.timesteps());
            Draw {
                t,
                eps: standard_normal(&mut state.rng, g.n()),
            }
        })
        .collect();
    train_step_with(state, batch, &draws, table, kind)
}

/// Mean loss over `batch` at fixed draws, without dropout or updates.
pub fn batch_loss<F: Real>(
    model: &DenoiseModel<F>,
    batch: &[QueryGroup],
    draws: &[Draw],
    table: &ScheduleTable,
    kind: LossKind,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (group, draw) in batch.iter().zip(draws) {
        let labels = group.labels_f64();
        let y_t = table.q_sample(&labels, draw.t, &draw.eps)?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let x = g.constant(group.feature_matrix());
        let h = model.encode(&mut g, &p, x, None, None)?;
        let y0 = model.denoise(&mut g, &p, h, &y_t, draw.t, None)?;
        if let Some(l) = loss(&mut g, kind, y0, &labels, None)? {
            total += g.value(l).data()[0].as_f64();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub valid_ndcg10: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult<F> {
    pub log: Vec<EpochLog>,
    /// Parameters with the best validation NDCG@10.
    pub best: DenoiseModel<F>,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    /// Where `best` was written, when an output directory was given.
    pub best_path: Option<PathBuf>,
}

/// Trains for `cfg.epochs` epochs, validating every `eval_every` epochs and
/// after the last one. `on_epoch` sees every log line as it is produced.
pub fn fit<F: Real>(
    model: DenoiseModel<F>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult<F>> {
    cfg.validate()?;
    if train.k != model.config.k || valid.k != model.config.k {
        return Err(Error::Incompatible(format!(
            "model expects k = {}, training data has {}, validation data has {}",
            model.config.k, train.k, valid.k
        )));
    }
    if train.groups.is_empty() {
        return Err(Error::Validation("training set has no queries".into()));
    }
    let table = ScheduleTable::build(model.schedule)?;
    let sampler = SamplerConfig::new(cfg.eval_steps.unwrap_or(table.timesteps()), cfg.seed);
    let best_path = out_dir.map(|d| d.join(BEST_CHECKPOINT));
    let mut state = TrainState::new(model, cfg.adamw, cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DenoiseModel<F>)> = None;

    let mut order: Vec<usize> = (0..train.groups.len()).collect();
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        order.shuffle(&mut state.rng);
        let (mut weighted, mut lists) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<QueryGroup> = chunk
                .iter()
                .map(|&i| {
                    let g = &train.groups[i];
                    cap_list(g, cfg.max_list_len, &mut state.rng).unwrap_or_else(|| g.clone())
                })
                .collect();
            let mean = train_step(&mut state, &batch, &table, cfg.loss)?;
            weighted += mean * batch.len() as f64;
            lists += batch.len();
        }
        let mut entry = EpochLog {
            epoch,
            loss: weighted / lists as f64,
            valid_ndcg10: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let report = evaluate_model(&state.model, &table, valid, &sampler, &[Cutoff::At(10)])?;
            let ndcg = report.mean(Metric::Ndcg, Cutoff::At(10));
            if !ndcg.is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation NDCG@10 is {ndcg} at epoch {epoch} ({} usable queries)",
                    report.n_queries()
                )));
            }
            entry.valid_ndcg10 = Some(ndcg);
            if best.as_ref().is_none_or(|(b, _, _)| ndcg > *b) {
                if let Some(path) = &best_path {
                    state.model.save(path)?;
                }
                best = Some((ndcg, epoch, state.model.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (best_ndcg10, best_epoch, best) = best.expect("the last epoch always validates");
    Ok(FitResult {
        log,
        best,
        best_epoch,
        best_ndcg10,
        best_path,
    })
}

#[cfg(test)]
mod tests;
