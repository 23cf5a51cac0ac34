//! Optimizer, learning-rate schedules, checkpoints and the pre-training loop.
//!
//! Every step draws its randomness from a generator keyed by `(seed, step)`,
//! so a checkpoint only has to hold parameters, Adam moments and the step
//! counter for a resumed run to replay an uninterrupted one bit for bit.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{validate_config, OptimConfig, RunConfig, ScheduleKind};
use crate::data::{fit_image_to_area, generate_pair, plan_native_batch, resize_bilinear, tokenize};
use crate::nnprim::{check_finite, zeros_like, Mat, ParamTree};
use crate::objective::{pretrain_with_prefix, LossReport, MultimodalBatch, PretrainModel, Sample};
use crate::masks::sample_prefix_len;
use crate::patchify::patchify;
use crate::{Error, Result};

/// Learning rate for update `t` (1-based; `t = 0` is the untrained state).
///
/// Linear warmup from 0 to `peak_lr`, then the configured decay over the
/// remaining steps. `HalfCosineCooldown` continues past `total_steps` with a
/// linear cooldown lasting a fifth of the base stage.
pub fn lr_at_step(t: u64, optim: &OptimConfig) -> Result<f64> {
    let last = schedule_len(optim);
    if t > last {
        return Err(Error::invalid(format!("step {t} outside schedule of {last} steps")));
    }
    let (peak, w, total) = (optim.peak_lr, optim.warmup_steps, optim.total_steps);
    if t < w {
        return Ok(peak * t as f64 / w as f64);
    }
    if t > total {
        return cooldown_lr(total, t, optim);
    }
    let tau = if total == w { 1.0 } else { (t - w) as f64 / (total - w) as f64 };
    let pi = std::f64::consts::PI;
    Ok(match optim.schedule {
        ScheduleKind::Cosine => optim.min_lr + 0.5 * (peak - optim.min_lr) * (1.0 + (pi * tau).cos()),
        ScheduleKind::HalfCosine | ScheduleKind::HalfCosineCooldown => peak * 0.5 * (1.0 + (pi * tau / 2.0).cos()),
    })
}

/// Number of updates the schedule defines.
pub fn schedule_len(optim: &OptimConfig) -> u64 {
    match optim.schedule {
        ScheduleKind::HalfCosineCooldown => optim.total_steps + OptimConfig::cooldown_steps(optim.total_steps),
        _ => optim.total_steps,
    }
}

/// Learning rate at step `t` of a linear cooldown branched from step
/// `from`: starts at `lr_at_step(from)` and reaches `final_cooldown_lr`
/// after `from / 5` further steps.
pub fn cooldown_lr(from: u64, t: u64, optim: &OptimConfig) -> Result<f64> {
    let len = OptimConfig::cooldown_steps(from);
    if t < from || t > from + len || len == 0 {
        return Err(Error::invalid(format!("step {t} outside cooldown [{from}, {}]", from + len)));
    }
    let start = base_lr(from, optim)?;
    let frac = (t - from) as f64 / len as f64;
    Ok((1.0 - frac) * start + frac * optim.final_cooldown_lr)
}

/// Rate of the base stage at `t`, ignoring any scheduled cooldown.
fn base_lr(t: u64, optim: &OptimConfig) -> Result<f64> {
    if t > optim.total_steps {
        return Err(Error::invalid(format!("cannot branch at step {t} past the base stage")));
    }
    lr_at_step(t, optim)
}

/// Adam moment estimates for a parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<P> {
    pub m: P,
    pub v: P,
    /// Updates applied so far.
    pub step: u64,
}

impl<P: ParamTree + Clone> OptimizerState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
        }
    }
}

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightDecay {
    /// `θ ← θ - wd·θ`, independent of the learning rate.
    Decoupled(f64),
    /// `θ ← θ - lr·wd·θ`, the common AdamW form.
    Coupled(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: WeightDecay,
}

impl From<&OptimConfig> for AdamHparams {
    fn from(o: &OptimConfig) -> Self {
        Self {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.adam_eps,
            decay: WeightDecay::Decoupled(o.weight_decay),
        }
    }
}

/// One fully decoupled AdamW update with the hyperparameters of `optim`.
pub fn adamw_update<P: ParamTree + Clone>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<P>,
    lr: f64,
    optim: &OptimConfig,
) -> Result<()> {
    adam_step(params, grads, state, lr, &AdamHparams::from(optim))
}

/// Bias-corrected Adam step with the given decay rule. Leaves everything
/// untouched if any gradient is non-finite.
pub fn adam_step<P: ParamTree + Clone>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<P>,
    lr: f64,
    hp: &AdamHparams,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} must be ≥ 0")));
    }
    let g = grads.named();
    let mut p = params.named_mut();
    if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.1.dim() != b.1.dim()) {
        return Err(Error::shape("gradient tree does not match parameters"));
    }
    for (name, t) in &g {
        check_finite(&format!("gradient of {name}"), t)?;
    }
    let t = state.step + 1;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let mut m = state.m.named_mut();
    let mut v = state.v.named_mut();
    for (k, (_, grad)) in g.iter().enumerate() {
        let theta = &mut p[k].1;
        let (mk, vk) = (&mut m[k].1, &mut v[k].1);
        ndarray::Zip::from(&mut **theta)
            .and(&mut **mk)
            .and(&mut **vk)
            .and(*grad)
            .for_each(|th, m, v, &g| {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + hp.eps);
                let decay = match hp.decay {
                    WeightDecay::Decoupled(wd) => wd * *th,
                    WeightDecay::Coupled(wd) => lr * wd * *th,
                };
                *th -= step + decay;
            });
    }
    state.step = t;
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &impl ParamTree) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut impl ParamTree, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm {max_norm} must be positive")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.named_mut() {
            t.mapv_inplace(|v| v * scale);
        }
    }
    Ok(norm)
}

/// Generator for one named stream of a run; streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = u64::MAX;
const POOL_STREAM: u64 = u64::MAX - 1;

/// Model, optimizer state and progress; everything a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: PretrainModel,
    pub optimizer: OptimizerState<PretrainModel>,
    /// Step at which a cooldown branch started, if this run is one.
    pub cooldown_from: Option<u64>,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Self {
        let model = PretrainModel::init(&cfg.model, &mut stream_rng(cfg.seed, INIT_STREAM));
        Self {
            optimizer: OptimizerState::new(&model),
            model,
            cooldown_from: None,
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Final step of this run's schedule.
    pub fn last_step(&self, optim: &OptimConfig) -> u64 {
        match self.cooldown_from {
            Some(from) => from + OptimConfig::cooldown_steps(from),
            None => schedule_len(optim),
        }
    }

    pub fn lr(&self, t: u64, optim: &OptimConfig) -> Result<f64> {
        match self.cooldown_from {
            Some(from) => cooldown_lr(from, t, optim),
            None => lr_at_step(t, optim),
        }
    }
}

const MAGIC: &[u8; 8] = b"AIM2CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

/// Raw contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub step: u64,
    pub arrays: Vec<ArrayRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config_hash: u64) -> Self {
        let mut arrays = Vec::new();
        for (prefix, tree) in [
            ("model", &state.model),
            ("adam.m", &state.optimizer.m),
            ("adam.v", &state.optimizer.v),
        ] {
            for (name, t) in tree.named() {
                arrays.push(ArrayRecord {
                    name: format!("{prefix}.{name}"),
                    dims: t.shape().to_vec(),
                    data: ArrayData::F64(t.iter().copied().collect()),
                });
            }
        }
        if let Some(from) = state.cooldown_from {
            arrays.push(ArrayRecord {
                name: "train.cooldown_from".into(),
                dims: vec![1],
                data: ArrayData::U64(vec![from]),
            });
        }
        Self {
            version: CHECKPOINT_VERSION,
            config_hash,
            step: state.step(),
            arrays,
        }
    }

    fn find(&self, name: &str) -> Option<&ArrayRecord> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Rebuilds the state for the model described by `cfg`.
    pub fn into_state(&self, cfg: &RunConfig) -> Result<TrainState> {
        let mut state = TrainState::init(cfg);
        state.optimizer.step = self.step;
        let expected = 3 * state.model.named().len();
        for (prefix, tree) in [
            ("model", &mut state.model),
            ("adam.m", &mut state.optimizer.m),
            ("adam.v", &mut state.optimizer.v),
        ] {
            for (name, t) in tree.named_mut() {
                let full = format!("{prefix}.{name}");
                let rec = self
                    .find(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array `{full}`")))?;
                load_into(rec, t)?;
            }
        }
        state.cooldown_from = match self.find("train.cooldown_from") {
            Some(ArrayRecord { data: ArrayData::U64(v), .. }) if v.len() == 1 => Some(v[0]),
            Some(_) => return Err(Error::Checkpoint("malformed `train.cooldown_from`".into())),
            None => None,
        };
        let extra = self.arrays.len() - expected - usize::from(state.cooldown_from.is_some());
        if extra != 0 {
            return Err(Error::Checkpoint(format!("{extra} unexpected arrays")));
        }
        Ok(state)
    }
}

fn load_into(rec: &ArrayRecord, t: &mut Mat) -> Result<()> {
    if rec.dims != t.shape() {
        return Err(Error::Checkpoint(format!(
            "`{}` has shape {:?}, model expects {:?}",
            rec.name,
            rec.dims,
            t.shape()
        )));
    }
    match &rec.data {
        ArrayData::F64(v) => {
            for (dst, src) in t.iter_mut().zip(v) {
                *dst = *src;
            }
            Ok(())
        }
        ArrayData::U64(_) => Err(Error::Checkpoint(format!("`{}` is not a real array", rec.name))),
    }
}

/// Writes `ckpt` atomically (temporary file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for a in &ckpt.arrays {
        buf.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        let tag = match a.data {
            ArrayData::F64(_) => DTYPE_F64,
            ArrayData::U64(_) => DTYPE_U64,
        };
        buf.push(tag);
        buf.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &a.data {
            ArrayData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let config_hash = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let tag = r.u8()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
        let data = match tag {
            DTYPE_F64 => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
            DTYPE_U64 => ArrayData::U64(words.map(u64::from_le_bytes).collect()),
            t => return Err(Error::Checkpoint(format!("`{name}` has unknown dtype tag {t}"))),
        };
        arrays.push(ArrayRecord { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(Checkpoint {
        version,
        config_hash,
        step,
        arrays,
    })
}

/// How a run starts and when it stops.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint. With `high_res_adapt` the checkpoint
    /// may come from the base run; only its parameters are kept.
    pub resume: Option<PathBuf>,
    /// Train at the high resolution with weight decay forced to zero.
    pub high_res_adapt: bool,
    /// Treat the resumed checkpoint as a branch point and run the linear
    /// cooldown from it.
    pub cooldown_branch: bool,
    /// Stop (and checkpoint) after this step instead of the schedule's end.
    pub stop_after: Option<u64>,
    /// Write the patches of the first batch as PNM images here.
    pub dump_patches: Option<PathBuf>,
}

/// Losses after one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    pub grad_norm: f64,
}

impl StepMetrics {
    /// `step<TAB>lr<TAB>pixel<TAB>text<TAB>total`, printed losslessly.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.step, self.lr, self.report.pixel_loss, self.report.text_loss, self.report.total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// One entry per update performed by this call.
    pub history: Vec<StepMetrics>,
    /// Hash of the configuration actually trained (after adaptation overrides).
    pub config_hash: u64,
    pub metrics_path: PathBuf,
    pub last_checkpoint: Option<PathBuf>,
}

/// Configuration after applying the adaptation overrides of `opts`.
pub fn effective_config(cfg: &RunConfig, opts: &TrainOptions) -> RunConfig {
    let mut cfg = cfg.clone();
    if opts.high_res_adapt {
        cfg.data.image_size = cfg.data.high_res_size(cfg.model.patch_size);
        cfg.data.high_res_image_size = Some(cfg.data.image_size);
        cfg.optim.weight_decay = 0.0;
        cfg.checkpoint_dir = cfg.checkpoint_dir.join("high_res");
    }
    cfg
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Source of training pairs, already tokenized and patchified where the
/// resolution is fixed.
enum DataSource {
    Pool(Vec<Sample>),
    Stream,
}

fn to_sample(cfg: &RunConfig, seed: u64, area: Option<usize>) -> Result<Sample> {
    let pair = generate_pair(seed, &cfg.data.sources)?;
    let p = cfg.model.patch_size;
    let patches = match area {
        Some(a) => fit_image_to_area(&pair.image, a, p)?,
        None => {
            let s = cfg.data.image_size;
            let img = if pair.image.dim().0 == s && pair.image.dim().1 == s {
                pair.image
            } else {
                resize_bilinear(&pair.image, s, s)
            };
            patchify(&channels(img, cfg.model.channels), p)?
        }
    };
    Ok(Sample {
        patches,
        tokens: tokenize(&pair.caption, cfg.model.max_text_len),
    })
}

/// Adapts the 3-channel renderer output to the model's channel count.
fn channels(img: Array3<f64>, c: usize) -> Array3<f64> {
    if img.dim().2 == c {
        return img;
    }
    let (h, w, src) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| img[[y, x, ch.min(src - 1)]])
}

fn build_batch(cfg: &RunConfig, source: &DataSource, rng: &mut ChaCha8Rng) -> Result<MultimodalBatch> {
    if let Some(native) = &cfg.data.native {
        let plan = plan_native_batch(native.budget, rng, (native.n_min, native.n_max))?;
        let samples = (0..plan.batch_size)
            .map(|_| to_sample(cfg, rng.random(), Some(plan.area)))
            .collect::<Result<_>>()?;
        return Ok(MultimodalBatch { samples });
    }
    let b = cfg.data.batch_size;
    let samples = match source {
        DataSource::Pool(pool) if b <= pool.len() => {
            sample(rng, pool.len(), b).into_iter().map(|i| pool[i].clone()).collect()
        }
        DataSource::Pool(pool) => (0..b).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect(),
        DataSource::Stream => (0..b)
            .map(|_| to_sample(cfg, rng.random(), None))
            .collect::<Result<_>>()?,
    };
    Ok(MultimodalBatch { samples })
}

/// Deterministic fixed pool of `n` pairs for `cfg.seed`.
pub fn training_pool(cfg: &RunConfig, n: usize) -> Result<Vec<Sample>> {
    let mut rng = stream_rng(cfg.seed, POOL_STREAM);
    (0..n).map(|_| to_sample(cfg, rng.random(), None)).collect()
}

/// Runs the pre-training loop: batch, prefix sample, forward/backward,
/// clip, schedule, AdamW; logs and checkpoints along the way.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = effective_config(cfg, opts);
    validate_config(&cfg)?;
    let hash = cfg.hash();
    let dir = cfg.checkpoint_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut state = match &opts.resume {
        None => TrainState::init(&cfg),
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config_hash == hash {
                ckpt.into_state(&cfg)?
            } else if opts.high_res_adapt {
                let base = ckpt.into_state(&cfg)?;
                let mut fresh = TrainState::init(&cfg);
                fresh.model = base.model;
                fresh
            } else {
                return Err(Error::Checkpoint(format!(
                    "{} was written by config {:016x}, current config is {hash:016x}",
                    path.display(),
                    ckpt.config_hash
                )));
            }
        }
    };
    if opts.cooldown_branch {
        if state.cooldown_from.is_none() {
            let from = state.step();
            if opts.resume.is_none() || OptimConfig::cooldown_steps(from) == 0 {
                return Err(Error::invalid("cooldown branch needs a checkpoint at step ≥ 5"));
            }
            base_lr(from, &cfg.optim)?;
            state.cooldown_from = Some(from);
        }
    } else if state.cooldown_from.is_some() {
        return Err(Error::invalid("checkpoint belongs to a cooldown branch; pass the branch flag"));
    }
    let dir = match state.cooldown_from {
        Some(from) => dir.join(format!("cooldown-{from:08}")),
        None => dir,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let source = match cfg.data.train_pairs {
        Some(n) if cfg.data.native.is_none() => DataSource::Pool(training_pool(&cfg, n)?),
        _ => DataSource::Stream,
    };
    let metrics_path = dir.join("metrics.tsv");
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?,
    );

    let end = opts
        .stop_after
        .map_or(state.last_step(&cfg.optim), |s| s.min(state.last_step(&cfg.optim)));
    let mut history = Vec::new();
    let mut last_checkpoint = opts.resume.clone();
    while state.step() < end {
        let t = state.step() + 1;
        let mut rng = stream_rng(cfg.seed, t);
        let batch = build_batch(&cfg, &source, &mut rng)?;
        if let (Some(out), 1) = (&opts.dump_patches, history.len() + 1) {
            dump_batch(&batch, cfg.model.patch_size, out)?;
        }
        let prefix = sample_prefix_len(batch.num_patches()?, &mut rng)?;
        let nonfinite = |last: &Option<PathBuf>| Error::NonFiniteLoss {
            step: t,
            last_checkpoint: last.clone(),
        };
        let (report, grads) = match pretrain_with_prefix(&batch, &state.model, cfg.model.alpha, prefix, true) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(nonfinite(&last_checkpoint)),
            Err(e) => return Err(e),
        };
        let mut grads = grads.expect("gradients requested");
        let grad_norm = clip_gradients(&mut grads, cfg.optim.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(nonfinite(&last_checkpoint));
        }
        let lr = state.lr(t, &cfg.optim)?;
        adamw_update(&mut state.model, &grads, &mut state.optimizer, lr, &cfg.optim)?;

        let metrics = StepMetrics {
            step: t,
            lr,
            report,
            grad_norm,
        };
        if t % cfg.log_every == 0 || t == end {
            writeln!(log, "{}", metrics.log_line()).map_err(|e| Error::io(&metrics_path, e))?;
        }
        history.push(metrics);
        let periodic = cfg.checkpoint_every.is_some_and(|k| t % k == 0);
        if periodic || t == end {
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let path = checkpoint_path(&dir, t);
            save_checkpoint(&Checkpoint::from_state(&state, hash), &path)?;
            last_checkpoint = Some(path);
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        state,
        history,
        config_hash: hash,
        metrics_path,
        last_checkpoint,
    })
}

fn dump_batch(batch: &MultimodalBatch, p: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in batch.samples.iter().enumerate() {
        crate::patchify::write_patch_grid(&s.patches, p, &dir.join(format!("sample-{i:03}.pnm")))?;
    }
    Ok(())
}
