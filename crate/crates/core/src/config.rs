//! Typed run configuration, presets and the TOML configuration file.
//!
//! The file format is versioned by a top-level `schema_version`. Unknown keys
//! are rejected. A `[model]` table may name a `preset` and override any of its
//! fields.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MixtureSource, TOKENIZER_VOCAB};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Pre-training batch size of the paper-scale recipe. Inert at desk scale.
pub const PAPER_BATCH_SIZE: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub l_enc: usize,
    pub d_dec: usize,
    pub l_dec: usize,
    pub heads_enc: usize,
    pub heads_dec: usize,
    pub ffn_hidden_enc: usize,
    pub ffn_hidden_dec: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Largest patch count the decoder's position table supports.
    pub max_patches: usize,
    /// Weight of the pixel loss in `text + alpha * pixel`.
    pub alpha: f64,
    /// Biases on attention projections, the image projection and both heads.
    pub bias: bool,
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn decoder_positions(&self) -> usize {
        self.max_patches + self.max_text_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelPreset {
    Aimv2L,
    Aimv2H,
    Aimv2_1B,
    Aimv2_3B,
    DeskTiny,
    DeskSmall,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 6] = [
        ModelPreset::Aimv2L,
        ModelPreset::Aimv2H,
        ModelPreset::Aimv2_1B,
        ModelPreset::Aimv2_3B,
        ModelPreset::DeskTiny,
        ModelPreset::DeskSmall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Aimv2L => "aimv2_l",
            ModelPreset::Aimv2H => "aimv2_h",
            ModelPreset::Aimv2_1B => "aimv2_1b",
            ModelPreset::Aimv2_3B => "aimv2_3b",
            ModelPreset::DeskTiny => "desk_tiny",
            ModelPreset::DeskSmall => "desk_small",
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// SwiGLU hidden width: 8d/3 rounded up to a multiple of 256.
fn swiglu_hidden(d: usize) -> usize {
    (8 * d).div_ceil(3 * 256) * 256
}

fn paper_model(d_enc: usize) -> ModelConfig {
    let d_dec = 1024;
    ModelConfig {
        d_enc,
        l_enc: 24,
        d_dec,
        l_dec: 12,
        heads_enc: d_enc / 64,
        heads_dec: d_dec / 64,
        ffn_hidden_enc: swiglu_hidden(d_enc),
        ffn_hidden_dec: swiglu_hidden(d_dec),
        patch_size: 14,
        channels: 3,
        vocab_size: 32_000,
        max_text_len: 77,
        max_patches: 4096,
        alpha: 0.4,
        bias: true,
    }
}

pub fn preset_model(preset: ModelPreset) -> ModelConfig {
    match preset {
        ModelPreset::Aimv2L => paper_model(1024),
        ModelPreset::Aimv2H => paper_model(1536),
        ModelPreset::Aimv2_1B => paper_model(2048),
        ModelPreset::Aimv2_3B => paper_model(3072),
        ModelPreset::DeskTiny => ModelConfig {
            d_enc: 32,
            l_enc: 2,
            d_dec: 32,
            l_dec: 2,
            heads_enc: 2,
            heads_dec: 2,
            ffn_hidden_enc: 64,
            ffn_hidden_dec: 64,
            patch_size: 4,
            channels: 3,
            vocab_size: TOKENIZER_VOCAB,
            max_text_len: 77,
            max_patches: 64,
            alpha: 0.4,
            bias: true,
        },
        ModelPreset::DeskSmall => ModelConfig {
            d_enc: 64,
            l_enc: 4,
            d_dec: 64,
            l_dec: 2,
            heads_enc: 4,
            heads_dec: 4,
            ffn_hidden_enc: 128,
            ffn_hidden_dec: 128,
            patch_size: 4,
            channels: 3,
            vocab_size: TOKENIZER_VOCAB,
            max_text_len: 77,
            max_patches: 256,
            alpha: 0.4,
            bias: true,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    HalfCosine,
    HalfCosineCooldown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    #[serde(default = "defaults::min_lr")]
    pub min_lr: f64,
    #[serde(default = "defaults::final_cooldown_lr")]
    pub final_cooldown_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "defaults::schedule")]
    pub schedule: ScheduleKind,
}

impl OptimConfig {
    /// Pre-training optimizer recipe for a paper-scale preset.
    pub fn paper(preset: ModelPreset) -> Self {
        let peak_lr = match preset {
            ModelPreset::Aimv2L => 1e-3,
            ModelPreset::Aimv2H | ModelPreset::Aimv2_1B => 8e-4,
            ModelPreset::Aimv2_3B => 4e-4,
            ModelPreset::DeskTiny | ModelPreset::DeskSmall => 3e-3,
        };
        Self {
            peak_lr,
            warmup_steps: 12_500,
            total_steps: 1_500_000,
            ..Self::desk(peak_lr, 0, 1)
        }
    }

    pub fn desk(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            min_lr: defaults::min_lr(),
            final_cooldown_lr: defaults::final_cooldown_lr(),
            weight_decay: defaults::weight_decay(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            grad_clip: defaults::grad_clip(),
            warmup_steps,
            total_steps,
            schedule: ScheduleKind::Cosine,
        }
    }

    /// Length of the linear cooldown appended to a half-cosine stage of
    /// `base_steps` steps: 20% of that stage.
    pub fn cooldown_steps(base_steps: u64) -> u64 {
        base_steps / 5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeResConfig {
    /// Patches per mini-batch, `C = A * B`; must be a power of two.
    pub budget: usize,
    pub n_min: u32,
    pub n_max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Fixed pool of pairs to cycle over; absent means a fresh stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_res_image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native: Option<NativeResConfig>,
    #[serde(default = "defaults::sources")]
    pub sources: Vec<MixtureSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: defaults::image_size(),
            batch_size: defaults::batch_size(),
            train_pairs: None,
            high_res_image_size: None,
            native: None,
            sources: defaults::sources(),
        }
    }
}

impl DataConfig {
    /// Resolution used in high-resolution adaptation: the configured value,
    /// else 1.5x the base size rounded down to a multiple of `patch`.
    pub fn high_res_size(&self, patch: usize) -> usize {
        self.high_res_image_size
            .unwrap_or_else(|| (self.image_size * 3 / 2) / patch * patch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "defaults::probe_steps")]
    pub steps: u64,
    #[serde(default = "defaults::probe_batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::probe_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "defaults::probe_wd_grid")]
    pub wd_grid: Vec<f64>,
    #[serde(default = "defaults::min_lr")]
    pub min_lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::probe_beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::probe_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "defaults::probe_images")]
    pub train_images: usize,
    #[serde(default = "defaults::probe_images")]
    pub eval_images: usize,
    /// Shape names used as class labels.
    #[serde(default = "defaults::probe_classes")]
    pub classes: Vec<String>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        toml::from_str("").expect("probe defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub log_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Desk-scale run with memorization-friendly defaults.
    pub fn desk(preset: ModelPreset, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            checkpoint_dir: PathBuf::from("runs").join(preset.name()),
            log_every: 10,
            checkpoint_every: None,
            model: preset_model(preset),
            optim: OptimConfig::desk(3e-3, 10, 200),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable 64-bit digest of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

mod defaults {
    use crate::data::MixtureSource;

    pub fn min_lr() -> f64 {
        1e-5
    }
    pub fn final_cooldown_lr() -> f64 {
        1e-6
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.95
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn schedule() -> super::ScheduleKind {
        super::ScheduleKind::Cosine
    }
    pub fn image_size() -> usize {
        16
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn sources() -> Vec<MixtureSource> {
        vec![MixtureSource::synthetic("synthetic", 1.0)]
    }
    pub fn log_every() -> u64 {
        10
    }
    pub fn probe_steps() -> u64 {
        500
    }
    pub fn probe_batch() -> usize {
        16
    }
    pub fn probe_lr_grid() -> Vec<f64> {
        vec![1e-4, 1e-3, 5e-3]
    }
    pub fn probe_wd_grid() -> Vec<f64> {
        vec![0.05, 0.1]
    }
    pub fn probe_beta2() -> f64 {
        0.999
    }
    pub fn probe_clip() -> f64 {
        3.0
    }
    pub fn probe_images() -> usize {
        64
    }
    pub fn probe_classes() -> Vec<String> {
        vec!["square".into(), "circle".into()]
    }
}

/// Model table as written in a file: an optional preset plus overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    preset: Option<String>,
    d_enc: Option<usize>,
    l_enc: Option<usize>,
    d_dec: Option<usize>,
    l_dec: Option<usize>,
    heads_enc: Option<usize>,
    heads_dec: Option<usize>,
    ffn_hidden_enc: Option<usize>,
    ffn_hidden_dec: Option<usize>,
    patch_size: Option<usize>,
    channels: Option<usize>,
    vocab_size: Option<usize>,
    max_text_len: Option<usize>,
    max_patches: Option<usize>,
    alpha: Option<f64>,
    bias: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    schema_version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_checkpoint_dir")]
    checkpoint_dir: PathBuf,
    #[serde(default = "defaults::log_every")]
    log_every: u64,
    checkpoint_every: Option<u64>,
    #[serde(default)]
    model: ModelSection,
    optim: OptimConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    probe: ProbeConfig,
}

fn default_checkpoint_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ModelSection {
    fn resolve(self) -> Result<ModelConfig> {
        let base = match &self.preset {
            Some(name) => Some(preset_model(name.parse()?)),
            None => None,
        };
        let mut missing = Vec::new();
        macro_rules! field {
            ($name:ident) => {
                match (self.$name, base.as_ref()) {
                    (Some(v), _) => v,
                    (None, Some(b)) => b.$name,
                    (None, None) => {
                        missing.push(concat!("model.", stringify!($name), " is required without a preset"));
                        Default::default()
                    }
                }
            };
        }
        let cfg = ModelConfig {
            d_enc: field!(d_enc),
            l_enc: field!(l_enc),
            d_dec: field!(d_dec),
            l_dec: field!(l_dec),
            heads_enc: field!(heads_enc),
            heads_dec: field!(heads_dec),
            ffn_hidden_enc: field!(ffn_hidden_enc),
            ffn_hidden_dec: field!(ffn_hidden_dec),
            patch_size: field!(patch_size),
            channels: field!(channels),
            vocab_size: field!(vocab_size),
            max_text_len: self.max_text_len.or(base.as_ref().map(|b| b.max_text_len)).unwrap_or(77),
            max_patches: field!(max_patches),
            alpha: self.alpha.or(base.as_ref().map(|b| b.alpha)).unwrap_or(0.4),
            bias: self.bias.or(base.as_ref().map(|b| b.bias)).unwrap_or(true),
        };
        if missing.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigInvalid(missing.into_iter().map(String::from).collect()))
        }
    }
}

/// Parses a configuration from TOML text; `origin` only labels errors.
pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let file: RunConfigFile = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::ConfigParse {
            path: origin.to_path_buf(),
            line,
            message: e.message().to_string(),
        }
    })?;
    let cfg = RunConfig {
        schema_version: file.schema_version,
        seed: file.seed,
        checkpoint_dir: file.checkpoint_dir,
        log_every: file.log_every,
        checkpoint_every: file.checkpoint_every,
        model: file.model.resolve()?,
        optim: file.optim,
        data: file.data,
        probe: file.probe,
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Checks every invariant and reports all violations at once.
pub fn validate_config(cfg: &RunConfig) -> Result<()> {
    let mut errs = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            errs.push(msg);
        }
    };

    check(
        cfg.schema_version == SCHEMA_VERSION,
        format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", cfg.schema_version),
    );
    check(cfg.log_every > 0, "log_every must be positive".into());
    check(cfg.checkpoint_every != Some(0), "checkpoint_every must be positive".into());

    let m = &cfg.model;
    for (name, v) in [
        ("d_enc", m.d_enc),
        ("l_enc", m.l_enc),
        ("d_dec", m.d_dec),
        ("l_dec", m.l_dec),
        ("heads_enc", m.heads_enc),
        ("heads_dec", m.heads_dec),
        ("ffn_hidden_enc", m.ffn_hidden_enc),
        ("ffn_hidden_dec", m.ffn_hidden_dec),
        ("patch_size", m.patch_size),
        ("channels", m.channels),
        ("max_patches", m.max_patches),
    ] {
        check(v > 0, format!("{name} must be positive"));
    }
    if m.heads_enc > 0 {
        check(
            m.d_enc % m.heads_enc == 0,
            format!("d_enc not divisible by heads_enc ({} % {})", m.d_enc, m.heads_enc),
        );
    }
    if m.heads_dec > 0 {
        check(
            m.d_dec % m.heads_dec == 0,
            format!("d_dec not divisible by heads_dec ({} % {})", m.d_dec, m.heads_dec),
        );
    }
    check(m.d_enc % 4 == 0, format!("d_enc {} must be divisible by 4 for 2-D positions", m.d_enc));
    check(m.max_text_len >= 1, "max_text_len must be ≥ 1".into());
    check(m.alpha >= 0.0 && m.alpha.is_finite(), "alpha must be ≥ 0".into());
    check(
        m.vocab_size >= TOKENIZER_VOCAB,
        format!("vocab_size must be ≥ {TOKENIZER_VOCAB} for the byte tokenizer"),
    );

    let o = &cfg.optim;
    check(o.peak_lr > 0.0, "peak_lr must be positive".into());
    check(o.min_lr >= 0.0, "min_lr must be ≥ 0".into());
    check(o.min_lr <= o.peak_lr, "min_lr must not exceed peak_lr".into());
    check(o.final_cooldown_lr >= 0.0, "final_cooldown_lr must be ≥ 0".into());
    check(o.weight_decay >= 0.0, "weight_decay must be ≥ 0".into());
    check(o.beta1 > 0.0 && o.beta1 < 1.0, "beta1 must lie in (0, 1)".into());
    check(o.beta2 > 0.0 && o.beta2 < 1.0, "beta2 must lie in (0, 1)".into());
    check(o.adam_eps > 0.0, "adam_eps must be positive".into());
    check(o.grad_clip > 0.0, "grad_clip must be positive".into());
    check(o.total_steps > 0, "total_steps must be positive".into());
    check(
        o.warmup_steps < o.total_steps,
        format!("warmup_steps {} must be < total_steps {}", o.warmup_steps, o.total_steps),
    );
    if o.schedule == ScheduleKind::HalfCosineCooldown {
        check(
            o.total_steps % 5 == 0,
            "total_steps must be divisible by 5 so the cooldown is exactly 20% of it".into(),
        );
    }

    let d = &cfg.data;
    check(d.batch_size > 0, "batch_size must be positive".into());
    check(d.train_pairs != Some(0), "train_pairs must be positive".into());
    if m.patch_size > 0 {
        for (name, size) in [("image_size", d.image_size), ("high_res_image_size", d.high_res_size(m.patch_size))] {
            check(
                size > 0 && size % m.patch_size == 0,
                format!("{name} {size} must be a positive multiple of patch_size {}", m.patch_size),
            );
            let patches = (size / m.patch_size).pow(2);
            check(
                (2..=m.max_patches).contains(&patches),
                format!("{name} {size} gives {patches} patches, outside 2..={}", m.max_patches),
            );
        }
    }
    if let Err(e) = crate::data::validate_sources(&d.sources) {
        check(false, e.to_string());
    }
    if let Some(n) = &d.native {
        if let Err(e) = crate::data::validate_budget(n.budget, (n.n_min, n.n_max)) {
            check(false, e.to_string());
        }
        if n.n_max < usize::BITS && (1usize << n.n_max) > m.max_patches {
            check(false, format!("2^{} patches exceed max_patches {}", n.n_max, m.max_patches));
        }
    }

    let p = &cfg.probe;
    check(p.steps > 0, "probe.steps must be positive".into());
    check(p.batch_size > 0, "probe.batch_size must be positive".into());
    check(!p.lr_grid.is_empty() && p.lr_grid.iter().all(|&l| l > 0.0), "probe.lr_grid must hold positive rates".into());
    check(!p.wd_grid.is_empty() && p.wd_grid.iter().all(|&w| w >= 0.0), "probe.wd_grid must hold rates ≥ 0".into());
    check(p.classes.len() >= 2, "probe.classes needs at least two classes".into());
    for c in &p.classes {
        check(crate::data::Shape::from_name(c).is_some(), format!("probe class `{c}` is not a known shape"));
    }
    check(p.train_images > 0 && p.eval_images > 0, "probe image counts must be positive".into());

    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(errs))
    }
}
