//! Flat `key = value` run configuration with presets and overrides.
//!
//! Values are layered: built-in defaults, then a preset, then a config file,
//! then `--set` overrides. Every key is checked against the schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use denoiserank::losses::LossKind;
use denoiserank::metrics::Cutoff;
use denoiserank::model::ModelConfig;
use denoiserank::optim::AdamWConfig;
use denoiserank::sampler::SamplerConfig;
use denoiserank::schedule::{ScheduleKind, ScheduleSpec};
use denoiserank::trainer::TrainConfig;

use crate::error::CliError;

/// `(key, default, description)` for every accepted key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("train_file", "", "LETOR training file read by prepare"),
    ("valid_file", "", "LETOR validation file read by prepare"),
    ("test_file", "", "LETOR test file read by prepare"),
    ("data_dir", "data", "directory holding the prepared caches"),
    ("out_dir", "runs/default", "directory for checkpoints, logs and reports"),
    ("checkpoint", "", "checkpoint to load; empty means <out_dir>/best.ckpt"),
    ("schedule", "trunclinear", "noise schedule: linear, trunclinear, cosine, sqrt"),
    ("timesteps", "1000", "number of diffusion steps T"),
    ("d_model", "64", "encoder width"),
    ("heads", "4", "attention heads"),
    ("blocks", "3", "transformer blocks"),
    ("denoise_layers", "2", "layers in the denoising network, input and output included"),
    ("dropout", "0.1", "dropout probability"),
    ("attention", "true", "use self-attention in the encoder"),
    ("loss", "listnet", "mse, rmse, ranknet, ndcgloss2pp, approxndcg, listnet"),
    ("mu", "10", "ndcgloss2pp mixing weight"),
    ("sigma", "1", "ndcgloss2pp score scale"),
    ("temperature", "1", "approxndcg rank temperature"),
    ("lr", "0.001", "learning rate"),
    ("beta1", "0.9", "AdamW first moment decay"),
    ("beta2", "0.999", "AdamW second moment decay"),
    ("adam_eps", "1e-8", "AdamW epsilon"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("epochs", "200", "training epochs"),
    ("batch_size", "128", "queries per update"),
    ("eval_every", "10", "epochs between validations"),
    ("max_list_len", "512", "training lists are cut to this many documents"),
    ("eval_steps", "0", "reverse steps during validation; 0 means T"),
    ("precision", "f32", "training precision: f32 or f64"),
    ("seed", "0", "seed for initialization, training and sampling"),
    ("reverse_steps", "0", "reverse steps at inference; 0 means T"),
    ("zero_variance", "false", "drop posterior noise while sampling"),
    ("cutoffs", "1,3,5,10,20,all", "metric cutoffs"),
    ("rsd_ks", "1,5,10,20", "cutoffs for the diversity study"),
    ("rsd_m", "10", "repeated inferences per query in the diversity study"),
    ("scorer", "diffusion", "diversity scorer: diffusion or projection"),
    ("threads", "0", "worker threads; 0 means one per core"),
    ("gradcheck_trials", "20", "random instances per gradient check"),
    ("synth_kind", "linear", "synthetic labels: linear or context"),
    ("synth_queries", "50", "synthetic queries per split"),
    ("synth_docs", "20", "synthetic documents per query"),
    ("synth_k", "10", "synthetic feature dimension"),
    ("synth_offset", "3", "per-list feature offset scale for context data"),
];

pub const PRESETS: [&str; 3] = ["web30k", "yahoo", "istella"];

/// Keys a preset sets.
pub fn preset(name: &str) -> Result<&'static [(&'static str, &'static str)], CliError> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "web30k" => &[
            ("schedule", "trunclinear"),
            ("timesteps", "1000"),
            ("denoise_layers", "2"),
            ("attention", "true"),
            ("loss", "listnet"),
            ("lr", "0.001"),
        ],
        "yahoo" => &[
            ("schedule", "trunclinear"),
            ("timesteps", "1000"),
            ("denoise_layers", "4"),
            ("attention", "true"),
            ("loss", "mse"),
            ("lr", "0.0001"),
        ],
        "istella" => &[
            ("schedule", "trunclinear"),
            ("timesteps", "600"),
            ("denoise_layers", "8"),
            ("attention", "true"),
            ("loss", "mse"),
            ("lr", "0.0001"),
        ],
        _ => {
            return Err(CliError::Config(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    Diffusion,
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Linear,
    Context,
}

/// Resolved key-value map.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_line(line: &str) -> Option<Result<(&str, &str), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => Err(format!("expected `key = value`, got {line:?}")),
    })
}

impl RunConfig {
    /// Defaults, then `preset`, then `file`, then `overrides` (`key=value`).
    pub fn resolve(preset_name: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(p) = preset_name {
            for (k, v) in preset(p)? {
                cfg.set(k, v)?;
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.merge_text(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            match parse_line(line) {
                None => {}
                Some(Err(e)) => return Err(format!("line {}: {e}", i + 1)),
                Some(Ok((k, v))) => self.set(k, v).map_err(|e| format!("line {}: {e}", i + 1))?,
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is in the schema")
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| CliError::Config(format!("{key} = {:?}: {e}", self.get(key))))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("{key} entry {s:?}: {e}")))
            })
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key).to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            v => Err(CliError::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Parses every typed view once so errors surface before any work.
    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.model()?;
        let schedule = self.schedule()?;
        model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        denoiserank::schedule::ScheduleTable::build(schedule).map_err(|e| CliError::Config(e.to_string()))?;
        self.train()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.precision()?;
        self.cutoffs()?;
        self.rsd_ks()?;
        self.scorer()?;
        self.synth_kind()?;
        self.flag("zero_variance")?;
        for key in ["rsd_m", "threads", "gradcheck_trials", "synth_queries", "synth_docs", "synth_k", "reverse_steps"] {
            self.parsed::<usize>(key)?;
        }
        self.parsed::<f64>("synth_offset")?;
        let steps = self.reverse_steps()?;
        if steps > schedule.timesteps {
            return Err(CliError::Config(format!(
                "reverse_steps = {steps} exceeds timesteps = {}",
                schedule.timesteps
            )));
        }
        if self.rsd_m()? == 0 {
            return Err(CliError::Config("rsd_m must be at least 1".into()));
        }
        Ok(())
    }

    /// Model settings with `k = 1`; the real feature count comes from the data.
    pub fn model(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            k: 1,
            d_model: self.parsed("d_model")?,
            heads: self.parsed("heads")?,
            blocks: self.parsed("blocks")?,
            denoise_layers: self.parsed("denoise_layers")?,
            dropout: self.parsed("dropout")?,
            use_attention: self.flag("attention")?,
        })
    }

    pub fn schedule(&self) -> Result<ScheduleSpec, CliError> {
        let kind: ScheduleKind = self.parsed("schedule")?;
        Ok(ScheduleSpec::new(kind, self.parsed("timesteps")?))
    }

    pub fn loss(&self) -> Result<LossKind, CliError> {
        let kind: LossKind = self.parsed("loss")?;
        let kind = match kind {
            LossKind::NdcgLoss2pp { .. } => LossKind::NdcgLoss2pp {
                mu: self.parsed("mu")?,
                sigma: self.parsed("sigma")?,
            },
            LossKind::ApproxNdcg { .. } => LossKind::ApproxNdcg {
                temperature: self.parsed("temperature")?,
            },
            k => k,
        };
        kind.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let eval_steps: usize = self.parsed("eval_steps")?;
        Ok(TrainConfig {
            epochs: self.parsed("epochs")?,
            batch_size: self.parsed("batch_size")?,
            loss: self.loss()?,
            eval_every: self.parsed("eval_every")?,
            seed: self.seed()?,
            max_list_len: self.parsed("max_list_len")?,
            adamw: AdamWConfig {
                lr: self.parsed("lr")?,
                beta1: self.parsed("beta1")?,
                beta2: self.parsed("beta2")?,
                eps: self.parsed("adam_eps")?,
                weight_decay: self.parsed("weight_decay")?,
            },
            eval_steps: (eval_steps > 0).then_some(eval_steps),
        })
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parsed("seed")
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        match self.get("precision") {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            v => Err(CliError::Config(format!("precision = {v:?}; expected f32 or f64"))),
        }
    }

    /// Reverse steps at inference; 0 resolves to `T`.
    pub fn reverse_steps(&self) -> Result<usize, CliError> {
        let steps: usize = self.parsed("reverse_steps")?;
        Ok(if steps == 0 { self.schedule()?.timesteps } else { steps })
    }

    /// Sampler settings for a model trained with `timesteps` steps.
    pub fn sampler(&self, timesteps: usize) -> Result<SamplerConfig, CliError> {
        let steps: usize = self.parsed("reverse_steps")?;
        Ok(SamplerConfig {
            reverse_steps: if steps == 0 { timesteps } else { steps },
            seed: self.seed()?,
            zero_variance: self.flag("zero_variance")?,
        })
    }

    pub fn cutoffs(&self) -> Result<Vec<Cutoff>, CliError> {
        let c: Vec<Cutoff> = self.list("cutoffs")?;
        if c.is_empty() {
            return Err(CliError::Config("cutoffs is empty".into()));
        }
        Ok(c)
    }

    pub fn rsd_ks(&self) -> Result<Vec<usize>, CliError> {
        let ks: Vec<usize> = self.list("rsd_ks")?;
        if ks.contains(&0) {
            return Err(CliError::Config("rsd_ks entries must be positive".into()));
        }
        Ok(ks)
    }

    pub fn rsd_m(&self) -> Result<usize, CliError> {
        self.parsed("rsd_m")
    }

    pub fn scorer(&self) -> Result<Scorer, CliError> {
        match self.get("scorer") {
            "diffusion" => Ok(Scorer::Diffusion),
            "projection" => Ok(Scorer::Projection),
            v => Err(CliError::Config(format!("scorer = {v:?}; expected diffusion or projection"))),
        }
    }

    pub fn synth_kind(&self) -> Result<SynthKind, CliError> {
        match self.get("synth_kind") {
            "linear" => Ok(SynthKind::Linear),
            "context" => Ok(SynthKind::Context),
            v => Err(CliError::Config(format!("synth_kind = {v:?}; expected linear or context"))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parsed(key)
    }

    pub fn threads(&self) -> Result<usize, CliError> {
        self.parsed("threads")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data_dir"))
    }

    pub fn input_file(&self, split: &str) -> Option<PathBuf> {
        self.path(&format!("{split}_file"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("checkpoint")
            .unwrap_or_else(|| self.out_dir().join(denoiserank::trainer::BEST_CHECKPOINT))
    }

    /// Every key, one `key = value` line each, in key order. Feeding this back
    /// through `--config` reproduces the run.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_recommended_configurations() {
        let web = RunConfig::resolve(Some("web30k"), None, &[]).unwrap();
        assert_eq!(web.schedule().unwrap(), ScheduleSpec::new(ScheduleKind::TruncatedLinear, 1000));
        assert_eq!(web.model().unwrap().denoise_layers, 2);
        assert_eq!(web.loss().unwrap(), LossKind::ListNet);
        assert!(web.model().unwrap().use_attention);

        let yahoo = RunConfig::resolve(Some("yahoo"), None, &[]).unwrap();
        assert_eq!(yahoo.schedule().unwrap().timesteps, 1000);
        assert_eq!(yahoo.model().unwrap().denoise_layers, 4);
        assert_eq!(yahoo.loss().unwrap(), LossKind::Mse);

        let istella = RunConfig::resolve(Some("istella"), None, &[]).unwrap();
        assert_eq!(istella.schedule().unwrap(), ScheduleSpec::new(ScheduleKind::TruncatedLinear, 600));
        assert_eq!(istella.model().unwrap().denoise_layers, 8);
        assert_eq!(istella.loss().unwrap(), LossKind::Mse);

        assert!(matches!(RunConfig::resolve(Some("msmarco"), None, &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\ntimesteps = 200  # trailing\n\nloss = mse\n").unwrap();
        let cfg = RunConfig::resolve(Some("istella"), Some(&file), &["loss=ranknet".into()]).unwrap();
        assert_eq!(cfg.schedule().unwrap().timesteps, 200);
        assert_eq!(cfg.loss().unwrap(), LossKind::RankNet);
        assert_eq!(cfg.model().unwrap().denoise_layers, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = RunConfig::resolve(None, None, &["learning_rate=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::resolve(None, None, &["epochs=0".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["lr=0".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["heads=3".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["attention=maybe".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["cutoffs=1,x".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["timesteps=50".into(), "reverse_steps=51".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["epochs".into()]).is_err());

        let mut cfg = RunConfig::default();
        let err = cfg.merge_text("epochs = 3\nbogus = 1\n").unwrap_err();
        assert!(err.starts_with("line 2"), "{err}");
        assert!(cfg.merge_text("just words").unwrap_err().starts_with("line 1"));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::resolve(Some("yahoo"), None, &["seed=7".into(), "cutoffs=1,10,all".into()]).unwrap();
        let mut again = RunConfig::default();
        again.merge_text(&cfg.snapshot()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn zero_steps_resolve_to_t() {
        let cfg = RunConfig::resolve(None, None, &["timesteps=300".into()]).unwrap();
        assert_eq!(cfg.reverse_steps().unwrap(), 300);
        assert_eq!(cfg.sampler(300).unwrap().reverse_steps, 300);
        assert_eq!(cfg.train().unwrap().eval_steps, None);
        let cfg = RunConfig::resolve(None, None, &["reverse_steps=4".into()]).unwrap();
        assert_eq!(cfg.sampler(1000).unwrap().reverse_steps, 4);
    }
}
