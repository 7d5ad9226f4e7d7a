use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use denoiserank::autodiff::gradcheck::{op_gradient_suite, CheckOutcome, GRAD_TOLERANCE};
use denoiserank::autodiff::Real;
use denoiserank::data::{cache_read, cache_write, parse_letor, write_letor, Dataset, DatasetSummary};
use denoiserank::losses::{loss_gradient_check, LossKind};
use denoiserank::metrics::MetricsReport;
use denoiserank::model::{model_gradient_check, read_checkpoint_header, DenoiseModel, ModelConfig};
use denoiserank::sampler::{self, DiversityReport, SamplerConfig};
use denoiserank::schedule::{invariant_violations, ScheduleKind, ScheduleSpec, ScheduleTable};
use denoiserank::trainer::{self, EpochLog};
use denoiserank::{synth, Error};

use crate::config::{Precision, RunConfig, Scorer, SynthKind};
use crate::error::CliError;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SCORES_TSV: &str = "scores.tsv";
pub const DIVERSITY_CSV: &str = "diversity.csv";

pub fn cache_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.data_dir().join(format!("{split}.cache"))
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset, CliError> {
    let path = cache_path(cfg, split);
    if !path.exists() {
        return Err(CliError::Data(Error::Incompatible(format!(
            "{split} cache {} not found; run `prepare` first",
            path.display()
        ))));
    }
    cache_read(&path).map_err(CliError::data)
}

/// Writes the resolved configuration next to a command's outputs.
fn write_snapshot(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{command}.config"));
    fs::write(&path, cfg.snapshot())?;
    Ok(path)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub split: &'static str,
    pub path: PathBuf,
    pub summary: DatasetSummary,
    pub sha256: String,
}

fn print_summary(p: &PreparedSplit) {
    let s = &p.summary;
    println!(
        "{:<5} L={} docs={} k={} labels={:?} length p50/p90/p99/max={}/{}/{}/{} sha256={}",
        p.split,
        s.queries,
        s.documents,
        s.k,
        s.label_histogram,
        s.length_percentiles[0].1,
        s.length_percentiles[1].1,
        s.length_percentiles[2].1,
        s.length_percentiles[3].1,
        p.sha256
    );
}

/// Parses the LETOR files, normalizes every split with training statistics
/// and writes the caches.
pub fn prepare(cfg: &RunConfig) -> Result<Vec<PreparedSplit>, CliError> {
    let train_file = cfg
        .input_file("train")
        .ok_or_else(|| CliError::Config("prepare needs train_file".into()))?;
    let train = parse_letor(&train_file, None).map_err(CliError::data)?;
    let stats = train.feature_stats();
    fs::create_dir_all(cfg.data_dir())?;
    let mut out = Vec::new();
    for split in SPLITS {
        let raw = match split {
            "train" => train.clone(),
            _ => match cfg.input_file(split) {
                Some(f) => parse_letor(&f, Some(train.k)).map_err(CliError::data)?,
                None => continue,
            },
        };
        let ds = raw.normalize(Some(&stats)).map_err(CliError::data)?;
        let path = cache_path(cfg, split);
        cache_write(&ds, &path)?;
        let prepared = PreparedSplit {
            split,
            sha256: sha256_file(&path)?,
            summary: ds.summary(),
            path,
        };
        print_summary(&prepared);
        out.push(prepared);
    }
    Ok(out)
}

/// Writes synthetic LETOR files `<data_dir>/{train,valid,test}.txt`.
pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (q, n, k) = (cfg.usize("synth_queries")?, cfg.usize("synth_docs")?, cfg.usize("synth_k")?);
    if q == 0 || n == 0 || k == 0 {
        return Err(CliError::Config("synth_queries, synth_docs and synth_k must be positive".into()));
    }
    let offset = cfg.f64("synth_offset")?;
    let seed = cfg.seed()?;
    fs::create_dir_all(cfg.data_dir())?;
    let mut paths = Vec::new();
    for (i, split) in SPLITS.iter().enumerate() {
        let split_seed = seed.wrapping_add(i as u64);
        let ds = match cfg.synth_kind()? {
            SynthKind::Linear => synth::linear_buckets(q, n, k, split_seed),
            SynthKind::Context => synth::context_ranks(q, n, k, offset, split_seed),
        };
        let path = cfg.data_dir().join(format!("{split}.txt"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_letor(&ds, &mut w)?;
        w.flush()?;
        println!("wrote {} ({} queries x {} docs, k={})", path.display(), q, n, k);
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
}

fn fit_with<F: Real>(
    model: DenoiseModel<F>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &RunConfig,
) -> Result<TrainOutcome, CliError> {
    let out_dir = cfg.out_dir();
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    let mut write_err = None;
    let start = Instant::now();
    let result = trainer::fit(model, train, valid, &cfg.train()?, Some(&out_dir), |e| {
        let line = serde_json::to_string(e).expect("log entries serialize");
        if let Err(err) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(err);
        }
        match e.valid_ndcg10 {
            Some(v) => println!("epoch {:>4} loss {:.6} valid ndcg@10 {:.4} [{:.1}s]", e.epoch, e.loss, v, start.elapsed().as_secs_f64()),
            None => println!("epoch {:>4} loss {:.6} [{:.1}s]", e.epoch, e.loss, start.elapsed().as_secs_f64()),
        }
    });
    log_file.flush()?;
    if let Some(err) = write_err {
        return Err(err.into());
    }
    let result = result?;
    let checkpoint = result.best_path.expect("an output directory was given");
    println!(
        "best epoch {} valid ndcg@10 {:.4}; checkpoint {}; {:.1}s",
        result.best_epoch,
        result.best_ndcg10,
        checkpoint.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(TrainOutcome {
        checkpoint,
        log: result.log,
        best_epoch: result.best_epoch,
        best_ndcg10: result.best_ndcg10,
    })
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let train = load_split(cfg, "train")?;
    let valid = load_split(cfg, "valid")?;
    if valid.k != train.k {
        return Err(CliError::Data(Error::Incompatible(format!(
            "train has k={}, valid has k={}",
            train.k, valid.k
        ))));
    }
    let config = ModelConfig {
        k: train.k,
        ..cfg.model()?
    };
    let schedule = cfg.schedule()?;
    let seed = cfg.seed()?;
    write_snapshot(cfg, "train")?;
    match cfg.precision()? {
        Precision::F32 => fit_with(DenoiseModel::<f32>::new(config, schedule, seed)?, &train, &valid, cfg),
        Precision::F64 => fit_with(DenoiseModel::<f64>::new(config, schedule, seed)?, &train, &valid, cfg),
    }
}

/// A checkpoint loaded at whatever precision it was saved in.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    F32(DenoiseModel<f32>),
    F64(DenoiseModel<f64>),
}

macro_rules! with_model {
    ($loaded:expr, $m:ident => $body:expr) => {
        match $loaded {
            LoadedModel::F32($m) => $body,
            LoadedModel::F64($m) => $body,
        }
    };
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Data(Error::Incompatible(format!(
                "checkpoint {} not found",
                path.display()
            ))));
        }
        let header = read_checkpoint_header(path).map_err(CliError::data)?;
        match header.precision.as_str() {
            "f32" => Ok(LoadedModel::F32(DenoiseModel::load(path).map_err(CliError::data)?)),
            "f64" => Ok(LoadedModel::F64(DenoiseModel::load(path).map_err(CliError::data)?)),
            p => Err(CliError::Data(Error::Incompatible(format!("unsupported checkpoint precision {p:?}")))),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        with_model!(self, m => &m.config)
    }

    pub fn schedule(&self) -> ScheduleSpec {
        with_model!(self, m => m.schedule)
    }
}

fn load_for_test(cfg: &RunConfig) -> Result<(LoadedModel, Dataset, ScheduleTable, SamplerConfig), CliError> {
    let model = LoadedModel::load(&cfg.checkpoint())?;
    let test = load_split(cfg, "test")?;
    if test.k != model.config().k {
        return Err(CliError::Data(Error::Incompatible(format!(
            "checkpoint expects k={}, test data has k={}",
            model.config().k,
            test.k
        ))));
    }
    let table = ScheduleTable::build(model.schedule())?;
    let sampler = cfg.sampler(table.timesteps())?;
    if sampler.reverse_steps > table.timesteps() {
        return Err(CliError::Config(format!(
            "reverse_steps = {} exceeds the checkpoint's T = {}",
            sampler.reverse_steps,
            table.timesteps()
        )));
    }
    Ok((model, test, table, sampler))
}

#[derive(Clone, Debug)]
pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub csv_path: PathBuf,
    pub per_query: Duration,
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvaluateOutcome, CliError> {
    let (model, test, table, sampler) = load_for_test(cfg)?;
    let cutoffs = cfg.cutoffs()?;
    write_snapshot(cfg, "evaluate")?;
    // warm start: one untimed query
    if let Some(first) = test.groups.first() {
        with_model!(&model, m => sampler::rank_query(m, &table, first, 0, &sampler))?;
    }
    let start = Instant::now();
    let report = with_model!(&model, m => sampler::evaluate_model(m, &table, &test, &sampler, &cutoffs))?;
    let per_query = start.elapsed() / test.L().max(1) as u32;
    let csv_path = cfg.out_dir().join(METRICS_CSV);
    fs::write(&csv_path, report.to_csv())?;
    print!("{}", report.to_table());
    println!(
        "queries {} (excluded {}), reverse steps {}, inference {:.3} ms/query",
        report.n_queries(),
        report.excluded,
        sampler.reverse_steps,
        per_query.as_secs_f64() * 1e3
    );
    Ok(EvaluateOutcome {
        report,
        csv_path,
        per_query,
    })
}

/// Writes `qid, doc_index, score, rank` for every test document.
pub fn infer(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let (model, test, table, sampler) = load_for_test(cfg)?;
    write_snapshot(cfg, "infer")?;
    let start = Instant::now();
    let mut out = String::from("qid\tdoc_index\tscore\trank\n");
    for (i, g) in test.groups.iter().enumerate() {
        let ranked = with_model!(&model, m => sampler::rank_query(m, &table, g, i, &sampler)).map_err(|e| e.in_query(g.qid))?;
        let mut rank = vec![0usize; g.n()];
        for (pos, &d) in ranked.order.iter().enumerate() {
            rank[d] = pos + 1;
        }
        for (j, d) in g.docs.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{:.6}\t{}\n", g.qid, d.doc_index, ranked.scores[j], rank[j]));
        }
    }
    let path = cfg.out_dir().join(SCORES_TSV);
    fs::write(&path, out)?;
    println!(
        "scored {} queries in {:.2}s; wrote {}",
        test.L(),
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(path)
}

pub fn diversity(cfg: &RunConfig) -> Result<DiversityReport, CliError> {
    let (model, test, table, sampler) = load_for_test(cfg)?;
    let (ks, m) = (cfg.rsd_ks()?, cfg.rsd_m()?);
    write_snapshot(cfg, "diversity")?;
    let report = match cfg.scorer()? {
        Scorer::Diffusion => with_model!(&model, md => sampler::diversity(md, &table, &test, &sampler, &ks, m))?,
        Scorer::Projection => with_model!(&model, md => sampler::diversity_with(&test, &ks, m, |_, g| {
            let s = sampler::projection_scores(md, &g.feature_matrix())?;
            Ok(vec![s; m])
        }))?,
    };
    let path = cfg.out_dir().join(DIVERSITY_CSV);
    fs::write(&path, report.to_csv())?;
    println!("{:>4} {:>4} {:>8} {:>10} {:>10}", "K", "M", "RSD", "NDCG mean", "NDCG run0");
    for (i, k) in report.ks.iter().enumerate() {
        let rsd = if m > 1 { format!("{:.4}", report.rsd[i]) } else { "--".to_string() };
        println!(
            "{k:>4} {m:>4} {rsd:>8} {:>10.2} {:>10.2}",
            report.ndcg_mean[i] * 100.0,
            report.ndcg_single[i] * 100.0
        );
    }
    println!("queries {}", report.n_queries);
    Ok(report)
}

/// Runs every finite-difference suite and the schedule invariants.
pub fn gradcheck_outcomes(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>, CliError> {
    let mut out = op_gradient_suite(trials, seed)?;
    for kind in LossKind::all() {
        out.push(CheckOutcome {
            name: format!("loss:{kind}"),
            trials,
            max_rel_error: loss_gradient_check(kind, 5, trials, seed)?,
        });
    }
    out.push(CheckOutcome {
        name: "model".into(),
        trials,
        max_rel_error: model_gradient_check(trials, seed)?,
    });
    Ok(out)
}

/// `(schedule, T, violations)` for every kind and standard length.
pub fn schedule_checks() -> Result<Vec<(ScheduleKind, usize, Vec<String>)>, CliError> {
    let mut out = Vec::new();
    for kind in ScheduleKind::ALL {
        for t in [200, 600, 1000] {
            let table = ScheduleTable::build(ScheduleSpec::new(kind, t))?;
            out.push((kind, t, invariant_violations(&table)));
        }
    }
    Ok(out)
}

/// Formats outcomes and counts failures.
pub fn gradcheck_report(outcomes: &[CheckOutcome]) -> (String, usize) {
    let mut text = format!("{:<22} {:>6} {:>12}  tolerance {GRAD_TOLERANCE:e}\n", "check", "trials", "max rel err");
    let mut failed = 0;
    for o in outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed());
        text.push_str(&format!("{:<22} {:>6} {:>12.3e}  {status}\n", o.name, o.trials, o.max_rel_error));
    }
    (text, failed)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let outcomes = gradcheck_outcomes(cfg.usize("gradcheck_trials")?, cfg.seed()?)?;
    let (text, mut failed) = gradcheck_report(&outcomes);
    print!("{text}");
    for (kind, t, violations) in schedule_checks()? {
        if violations.is_empty() {
            println!("schedule:{kind} T={t:<4} PASS");
        } else {
            failed += 1;
            println!("schedule:{kind} T={t:<4} FAIL {}", violations.join("; "));
        }
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut outcomes = vec![CheckOutcome {
            name: "matmul".into(),
            trials: 3,
            max_rel_error: 1e-9,
        }];
        assert_eq!(gradcheck_report(&outcomes).1, 0);
        outcomes.push(CheckOutcome {
            name: "broken".into(),
            trials: 3,
            max_rel_error: 0.3,
        });
        let (text, failed) = gradcheck_report(&outcomes);
        assert_eq!(failed, 1);
        assert!(text.lines().any(|l| l.starts_with("broken") && l.ends_with("FAIL")), "{text}");
    }

    #[test]
    fn perturbed_analytic_gradient_fails_the_comparison() {
        use denoiserank::autodiff::gradcheck::{analytic_gradients, max_relative_error, numeric_gradients};
        use denoiserank::autodiff::{Graph, Tensor, Var};
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        };
        let x = [Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()];
        let mut a = analytic_gradients(&x, &f).unwrap();
        let n = numeric_gradients(&x, &f).unwrap();
        assert!(max_relative_error(&a, &n) < GRAD_TOLERANCE);
        a[0].data_mut()[1] *= 1.01;
        assert!(max_relative_error(&a, &n) > GRAD_TOLERANCE);
    }

    #[test]
    fn schedules_pass_their_invariants() {
        assert!(schedule_checks().unwrap().iter().all(|(_, _, v)| v.is_empty()));
    }
}
