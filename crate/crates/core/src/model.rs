//! The denoising network: a transformer encoder over the documents of one
//! query, followed by a timestep-conditioned feedforward stack that predicts
//! clean relevance labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Real, Tensor, Var};
use crate::data::MAX_LABEL;
use crate::error::{Error, Result};
use crate::rng::{seeded, StreamRng};
use crate::schedule::ScheduleSpec;

/// Number of relevance grades the output layer distributes weight over.
pub const NUM_GRADES: usize = MAX_LABEL as usize + 1;
/// Feedforward hidden width as a multiple of `d_model`.
pub const FF_MULT: usize = 4;
/// Additive attention bias for padded keys.
pub const MASK_BIAS: f64 = -1e9;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub denoise_layers: usize,
    pub dropout: f64,
    pub use_attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.k == 0 {
            return fail("feature dimension k must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.denoise_layers < 2 {
            return fail(format!("denoise_layers must be at least 2, got {}", self.denoise_layers));
        }
        if !(0.0..=0.8).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 0.8], got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    attn: Option<Attention>,
    norm: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    proj: Linear,
    blocks: Vec<Block>,
    final_norm: Norm,
    temb: Linear,
    /// Hidden denoise layers, input layer first.
    denoise: Vec<Linear>,
    out: Linear,
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: Init) -> Linear {
        Linear {
            w: self.tensor(format!("{name}.weight"), vec![fan_in, fan_out], Init::Glorot),
            b: self.tensor(format!("{name}.bias"), vec![1, fan_out], bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.tensor(format!("{name}.gamma"), vec![1, d], Init::Ones),
            beta: self.tensor(format!("{name}.beta"), vec![1, d], Init::Zeros),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let proj = b.linear("encoder.proj", cfg.k, d, Init::Zeros);
    let blocks = (0..cfg.blocks)
        .map(|i| {
            let p = format!("encoder.block{i}");
            let attn = cfg.use_attention.then(|| Attention {
                norm: b.norm(&format!("{p}.attn_norm"), d),
                q: b.linear(&format!("{p}.attn.q"), d, d, Init::Zeros),
                k: b.linear(&format!("{p}.attn.k"), d, d, Init::Zeros),
                v: b.linear(&format!("{p}.attn.v"), d, d, Init::Zeros),
                o: b.linear(&format!("{p}.attn.o"), d, d, Init::Zeros),
            });
            Block {
                attn,
                norm: b.norm(&format!("{p}.ff_norm"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, FF_MULT * d, Init::Zeros),
                ff2: b.linear(&format!("{p}.ff2"), FF_MULT * d, d, Init::Zeros),
            }
        })
        .collect();
    let final_norm = b.norm("encoder.final_norm", d);
    // bias of one keeps the initial conditioning close to the identity
    let temb = b.linear("denoise.temb", d, d, Init::Ones);
    let denoise = (0..cfg.denoise_layers - 1)
        .map(|i| {
            let fan_in = if i == 0 { d + 1 } else { d };
            b.linear(&format!("denoise.layer{i}"), fan_in, d, Init::Zeros)
        })
        .collect();
    let out = b.linear("denoise.out", d, NUM_GRADES, Init::Zeros);
    (
        Layout {
            proj,
            blocks,
            final_norm,
            temb,
            denoise,
            out,
        },
        b.specs,
    )
}

/// Sinusoidal encoding of a timestep: sines then cosines over geometrically
/// spaced frequencies, zero-padded when `d` is odd.
pub fn sinusoidal(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Graph nodes for every parameter, in registry order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Dropout randomness; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut StreamRng>;

/// Model parameters together with the configuration and noise schedule they
/// were built for.
#[derive(Clone, Debug)]
pub struct DenoiseModel<F> {
    pub config: ModelConfig,
    pub schedule: ScheduleSpec,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
    layout: Layout,
}

impl<F: Real> DenoiseModel<F> {
    /// Glorot-uniform weights from `seed`; biases zero, norm gains one.
    pub fn new(config: ModelConfig, schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = seeded(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<F> = match init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Glorot => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| F::of(rng.random_range(-limit..limit))).collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            schedule,
            names,
            params,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `g`; trainable nodes receive gradients.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients of the bound parameters, in registry order.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    fn linear(&self, g: &mut Graph<F>, p: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.at(l.w))?;
        g.add(y, p.at(l.b))
    }

    fn norm(&self, g: &mut Graph<F>, p: &Bound, n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, p.at(n.gamma), p.at(n.beta))
    }

    fn dropout(&self, g: &mut Graph<F>, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        match rng {
            Some(r) => g.dropout(x, self.config.dropout, true, &mut **r),
            None => Ok(x),
        }
    }

    fn attention(&self, g: &mut Graph<F>, p: &Bound, a: &Attention, x: Var, bias: Option<Var>) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(g, p, a.q, x)?;
        let k = self.linear(g, p, a.k, x)?;
        let v = self.linear(g, p, a.v, x)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let mut scores = g.scale(raw, 1.0 / (dh as f64).sqrt());
            if let Some(b) = bias {
                scores = g.add(scores, b)?;
            }
            let w = g.softmax(scores)?;
            outs.push(g.matmul(w, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { g.concat(&outs)? };
        self.linear(g, p, a.o, joined)
    }

    /// Context features `H` (`[n, d_model]`) for an `[n, k]` feature node.
    /// `mask[i] == false` marks a padded row, which no document attends to.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        features: Var,
        mask: Option<&[bool]>,
        mut rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.config.k || shape[0] == 0 {
            return Err(Error::shape("encode", &shape, &[shape.first().copied().unwrap_or(0), self.config.k]));
        }
        let n = shape[0];
        let bias = match mask {
            Some(m) if m.len() != n => return Err(Error::shape("encode mask", &[m.len()], &[n])),
            Some(m) if m.iter().any(|&valid| !valid) => {
                let row: Vec<F> = m.iter().map(|&valid| F::of(if valid { 0.0 } else { MASK_BIAS })).collect();
                Some(g.constant(Tensor::new(vec![1, n], row)?))
            }
            _ => None,
        };
        let mut x = self.linear(g, p, self.layout.proj, features)?;
        for block in &self.layout.blocks {
            if let Some(a) = &block.attn {
                let normed = self.norm(g, p, a.norm, x)?;
                let att = self.attention(g, p, a, normed, bias)?;
                let att = self.dropout(g, att, &mut rng)?;
                x = g.add(x, att)?;
            }
            let normed = self.norm(g, p, block.norm, x)?;
            let hidden = self.linear(g, p, block.ff1, normed)?;
            let hidden = g.softplus(hidden);
            let ff = self.linear(g, p, block.ff2, hidden)?;
            let ff = self.dropout(g, ff, &mut rng)?;
            x = g.add(x, ff)?;
        }
        self.norm(g, p, self.layout.final_norm, x)
    }

    /// Learned projection of the sinusoidal encoding of `t`, shape `[1, d_model]`.
    pub fn timestep_embedding(&self, g: &mut Graph<F>, p: &Bound, t: usize) -> Result<Var> {
        self.check_t(t)?;
        let enc = sinusoidal(t, self.config.d_model);
        let e = g.constant(Tensor::<f64>::from_f64(&[1, enc.len()], &enc)?.cast());
        self.linear(g, p, self.layout.temb, e)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.timesteps {
            return Err(Error::Index(format!("timestep {t} outside 1..={}", self.schedule.timesteps)));
        }
        Ok(())
    }

    /// Predicted clean labels `ŷ₀` (`[n, 1]`, each in `[0, 4]`) from context
    /// features `h`, noisy labels `y_t` and timestep `t`.
    pub fn denoise(&self, g: &mut Graph<F>, p: &Bound, h: Var, y_t: &[f64], t: usize, mut rng: DropoutRng<'_>) -> Result<Var> {
        let n = g.shape(h)[0];
        if y_t.len() != n {
            return Err(Error::shape("denoise", &[y_t.len()], &[n]));
        }
        let temb = self.timestep_embedding(g, p, t)?;
        let y = g.constant(Tensor::<f64>::column(y_t).cast());
        let mut x = g.concat(&[h, y])?;
        for &layer in &self.layout.denoise {
            let z = self.linear(g, p, layer, x)?;
            let z = g.softplus(z);
            let z = self.dropout(g, z, &mut rng)?;
            x = g.mul(z, temb)?;
        }
        let logits = self.linear(g, p, self.layout.out, x)?;
        let logits = g.softplus(logits);
        let logits = self.dropout(g, logits, &mut rng)?;
        let w = g.softmax(logits)?;
        let grades: Vec<f64> = (0..NUM_GRADES).map(|v| v as f64).collect();
        let grades = g.constant(Tensor::<f64>::column(&grades).cast());
        g.matmul(w, grades)
    }

    /// Inference-mode forward pass on plain data: `ŷ₀` for every document.
    pub fn predict(&self, features: &Tensor<F>, y_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let h = self.encode(&mut g, &p, x, None, None)?;
        let y0 = self.denoise(&mut g, &p, h, y_t, t, None)?;
        Ok(g.value(y0).to_f64_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            schedule: self.schedule,
            precision: F::NAME.to_string(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.params) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Loads a checkpoint, requiring the given configuration and schedule.
    pub fn load_expecting(path: impl AsRef<Path>, config: &ModelConfig, schedule: &ScheduleSpec) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != config {
            return Err(Error::Incompatible(format!(
                "checkpoint was built for {:?}, expected {config:?}",
                model.config
            )));
        }
        if &model.schedule != schedule {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with schedule {:?}, expected {schedule:?}",
                model.schedule
            )));
        }
        Ok(model)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        if header.precision != F::NAME {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} parameters, requested {}",
                header.precision,
                F::NAME
            )));
        }
        header.config.validate().map_err(|e| Error::Incompatible(e.to_string()))?;
        let (layout, specs) = layout(&header.config);
        let count = read_u32(r)? as usize;
        if count != specs.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {count} parameter tensors, configuration needs {}",
                specs.len()
            )));
        }
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for (name, shape, _) in specs {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(Error::Corrupt(format!("parameter name of {len} bytes")));
            }
            let mut buf = vec![0u8; len];
            read_exact(r, &mut buf)?;
            let stored = String::from_utf8(buf).map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(Error::Corrupt(format!("parameter {stored} has {ndim} dimensions")));
            }
            let dims = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if stored != name || dims != shape {
                return Err(Error::Incompatible(format!(
                    "checkpoint tensor {stored} {dims:?} does not match expected {name} {shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| read_u64(r).map(|b| F::of(f64::from_bits(b)))).collect::<Result<Vec<F>>>()?;
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config: header.config,
            schedule: header.schedule,
            names,
            params,
            layout,
        })
    }
}

/// Metadata stored at the front of every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub schedule: ScheduleSpec,
    pub precision: String,
}

/// Reads only the header, e.g. to pick the precision before loading.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    read_header(&mut BufReader::new(File::open(path)?))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Corrupt("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_header(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Incompatible("not a model checkpoint (bad magic bytes)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Corrupt(format!("checkpoint header of {len} bytes")));
    }
    let mut json = vec![0u8; len];
    read_exact(r, &mut json)?;
    serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))
}

/// Worst finite-difference relative error of the whole network (encoder,
/// timestep embedding and denoise stack, all parameters plus the input
/// features) over `trials` random toy instances, in 64-bit.
pub fn model_gradient_check(trials: usize, seed: u64) -> Result<f64> {
    use crate::autodiff::gradcheck::{analytic_gradients, max_relative_error, numeric_gradients};
    use crate::schedule::ScheduleKind;

    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let n = rng.random_range(1..=4);
        let config = ModelConfig {
            k: 5,
            d_model: 16,
            heads: 2,
            blocks: 2,
            denoise_layers: 3,
            dropout: 0.0,
            use_attention: trial % 4 != 3,
        };
        let schedule = ScheduleSpec::new(ScheduleKind::Linear, 50);
        let model = DenoiseModel::<f64>::new(config, schedule, rng.random())?;
        let t = rng.random_range(1..=50);
        let y_t: Vec<f64> = crate::rng::standard_normal(&mut rng, n);
        let probe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = crate::autodiff::gradcheck::random_tensor(&mut rng, &[n, 5], -2.0, 2.0);

        let mut inputs = model.params().to_vec();
        inputs.push(features);
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let (params, x) = v.split_at(v.len() - 1);
            let bound = Bound { vars: params.to_vec() };
            let h = model.encode(g, &bound, x[0], None, None)?;
            let y0 = model.denoise(g, &bound, h, &y_t, t, None)?;
            let w = g.constant(Tensor::column(&probe));
            let prod = g.mul(y0, w)?;
            Ok(g.sum(prod))
        };
        let a = analytic_gradients(&inputs, &f)?;
        let num = numeric_gradients(&inputs, &f)?;
        worst = worst.max(max_relative_error(&a, &num));
    }
    Ok(worst)
}
