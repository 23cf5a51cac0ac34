//! Pixel regression and caption losses, and the full pre-training pass:
//! sample a prefix, encode under the prefix mask, decode causally, score
//! shifted targets.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::data::{EOT_ID, PAD_ID};
use crate::decoder::{decoder_backward, decoder_forward_cached, DecoderParams};
use crate::encoder::{encoder_backward, encoder_forward_cached, EncoderParams};
use crate::masks::{build_prefix_mask, make_targets, sample_prefix_len, TargetPack};
use crate::nnprim::params_join as join;
use crate::nnprim::{cross_entropy_rows, grad_check, zeros_like, GradCheckOptions, GradCheckReport, Mat, ParamTree};
use crate::patchify::{patchify, PatchSequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub pixel_loss: f64,
    pub text_loss: f64,
    /// `text_loss + alpha * pixel_loss`.
    pub total: f64,
    pub active_pixel_targets: usize,
    pub active_text_targets: usize,
    pub prefix_len: usize,
}

fn check_mask(rows: usize, mask: &[bool]) -> Result<usize> {
    if mask.len() != rows {
        return Err(Error::shape(format!("{} mask entries for {rows} rows", mask.len())));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::invalid("loss has zero active targets"));
    }
    Ok(active)
}

/// Sum over active rows of the per-row mean squared error.
fn pixel_sse(preds: &Mat, targets: &Mat, mask: &[bool]) -> f64 {
    let d = preds.ncols() as f64;
    preds
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, t), _)| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d)
        .sum()
}

/// Gradient of `scale * pixel_sse`; inactive rows are exactly zero.
fn pixel_sse_grad(preds: &Mat, targets: &Mat, mask: &[bool], scale: f64) -> Mat {
    let d = preds.ncols() as f64;
    let mut g = Array2::zeros(preds.dim());
    for (i, &m) in mask.iter().enumerate() {
        if m && scale != 0.0 {
            let mut row = g.row_mut(i);
            for j in 0..preds.ncols() {
                row[j] = scale * 2.0 * (preds[[i, j]] - targets[[i, j]]) / d;
            }
        }
    }
    g
}

/// Mean over active positions of the per-patch MSE against normalized targets.
pub fn pixel_loss(preds: &Mat, targets: &Mat, mask: &[bool]) -> Result<f64> {
    if preds.dim() != targets.dim() {
        return Err(Error::shape(format!("preds {:?} vs targets {:?}", preds.dim(), targets.dim())));
    }
    let active = check_mask(preds.nrows(), mask)?;
    Ok(pixel_sse(preds, targets, mask) / active as f64)
}

/// Mean over active positions of `-log softmax(logits)[target]`.
pub fn text_loss(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let active = check_mask(logits.nrows(), mask)?;
    let (sum, _, _) = cross_entropy_rows(logits, targets, mask)?;
    Ok(sum / active as f64)
}

pub fn total_loss(pixel: f64, text: f64, alpha: f64) -> f64 {
    text + alpha * pixel
}

/// One image/caption pair; `tokens` is the decoder input (typically the
/// tokenizer output, ending with end-of-text).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: PatchSequence,
    pub tokens: Vec<usize>,
}

/// Pairs sharing a patch count, so one prefix length serves the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub samples: Vec<Sample>,
}

impl MultimodalBatch {
    pub fn num_patches(&self) -> Result<usize> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?
            .patches
            .len();
        if self.samples.iter().any(|s| s.patches.len() != first) {
            return Err(Error::shape("batch mixes patch counts"));
        }
        Ok(first)
    }
}

/// Encoder and decoder trained jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl PretrainModel {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            encoder: EncoderParams::init(cfg, rng),
            decoder: DecoderParams::init(cfg, rng),
        }
    }
}

impl ParamTree for PretrainModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.encoder.visit(&join(prefix, "encoder"), out);
        self.decoder.visit(&join(prefix, "decoder"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        self.encoder.visit_mut(&join(prefix, "encoder"), out);
        self.decoder.visit_mut(&join(prefix, "decoder"), out);
    }
}

/// Samples `M`, then scores the batch. Loss only, no gradients.
pub fn pretrain_forward(
    batch: &MultimodalBatch,
    model: &PretrainModel,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<LossReport> {
    let prefix = sample_prefix_len(batch.num_patches()?, rng)?;
    pretrain_with_prefix(batch, model, alpha, prefix, false).map(|(r, _)| r)
}

/// Samples `M`, scores the batch and backpropagates into a fresh gradient tree.
pub fn pretrain_forward_backward(
    batch: &MultimodalBatch,
    model: &PretrainModel,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(LossReport, PretrainModel)> {
    let prefix = sample_prefix_len(batch.num_patches()?, rng)?;
    let (report, grads) = pretrain_with_prefix(batch, model, alpha, prefix, true)?;
    Ok((report, grads.expect("gradients requested")))
}

struct SampleResult {
    pixel_sse: f64,
    text_ce: f64,
    grads: Option<PretrainModel>,
}

/// Pre-training loss for a fixed prefix length.
///
/// Both losses average over the active targets of the whole batch. Samples
/// run in parallel; gradients are reduced in sample order so results do not
/// depend on thread scheduling.
pub fn pretrain_with_prefix(
    batch: &MultimodalBatch,
    model: &PretrainModel,
    alpha: f64,
    prefix: usize,
    want_grads: bool,
) -> Result<(LossReport, Option<PretrainModel>)> {
    batch.num_patches()?;
    let packs: Vec<TargetPack> = batch
        .samples
        .iter()
        .map(|s| make_targets(&s.patches, &s.tokens, prefix, PAD_ID, EOT_ID))
        .collect::<Result<_>>()?;
    let n_pix: usize = packs.iter().map(TargetPack::active_pixels).sum();
    let n_txt: usize = packs.iter().map(TargetPack::active_tokens).sum();
    let pix_scale = if n_pix > 0 { alpha / n_pix as f64 } else { 0.0 };
    let txt_scale = if n_txt > 0 { 1.0 / n_txt as f64 } else { 0.0 };
    let mask = build_prefix_mask(batch.num_patches()?, prefix)?;

    let results: Vec<SampleResult> = batch
        .samples
        .par_iter()
        .zip(packs.par_iter())
        .map(|(sample, pack)| -> Result<SampleResult> {
            let (feats, enc_cache) = encoder_forward_cached(&sample.patches, &mask, &model.encoder)?;
            let (pix, logits, dec_cache) = decoder_forward_cached(&feats, &sample.tokens, &model.decoder)?;
            let sse = pixel_sse(&pix, &pack.pixel_targets, &pack.pixel_loss_mask);
            let (ce, _, ce_grad) = cross_entropy_rows(&logits, &pack.text_targets, &pack.text_loss_mask)?;
            let grads = if want_grads {
                let mut g = zeros_like(model);
                let d_pix = pixel_sse_grad(&pix, &pack.pixel_targets, &pack.pixel_loss_mask, pix_scale);
                let d_logits = ce_grad * txt_scale;
                let d_feats = decoder_backward(&model.decoder, &dec_cache, &d_pix, &d_logits, &mut g.decoder)?;
                encoder_backward(&model.encoder, &enc_cache, &d_feats, &mut g.encoder)?;
                Some(g)
            } else {
                None
            };
            Ok(SampleResult {
                pixel_sse: sse,
                text_ce: ce,
                grads,
            })
        })
        .collect::<Result<_>>()?;

    let mut pixel_sum = 0.0;
    let mut text_sum = 0.0;
    let mut grads: Option<PretrainModel> = None;
    for r in results {
        pixel_sum += r.pixel_sse;
        text_sum += r.text_ce;
        if let Some(g) = r.grads {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
                        *a += b;
                    }
                }
            }
        }
    }
    let pixel_loss = if n_pix > 0 { pixel_sum / n_pix as f64 } else { 0.0 };
    let text_loss = if n_txt > 0 { text_sum / n_txt as f64 } else { 0.0 };
    let report = LossReport {
        pixel_loss,
        text_loss,
        total: total_loss(pixel_loss, text_loss, alpha),
        active_pixel_targets: n_pix,
        active_text_targets: n_txt,
        prefix_len: prefix,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("pre-training loss".into()));
    }
    Ok((report, grads))
}

/// Finite-difference settings for the whole model.
///
/// At a loss near `ln V` the central difference carries roughly 1e-10 of
/// roundoff, so gradients smaller than the 1e-4 floor are compared on an
/// absolute scale (`tol * 1e-4`). 128 random entries per tensor plus each
/// tensor's largest-gradient entry keep five seeds well under a minute.
pub fn full_model_check_options(tol: f64, seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        tol,
        max_entries: Some(128),
        floor: 1e-4,
        seed,
    }
}

/// Builds a small random model and batch (four patches, three tokens per
/// caption) from `cfg` and checks the analytic gradient of the full
/// objective against central differences at a fixed prefix length.
pub fn pretrain_grad_check(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PretrainModel::init(cfg, &mut rng);
    let p = cfg.patch_size;
    let samples = (0..2)
        .map(|_| {
            let img = Array3::from_shape_simple_fn((2 * p, 2 * p, cfg.channels), || rng.random::<f64>());
            let tokens = (0..2)
                .map(|_| rng.random_range(0..cfg.vocab_size.min(256)))
                .chain([EOT_ID.min(cfg.vocab_size - 1)])
                .collect();
            Ok(Sample {
                patches: patchify(&img, p)?,
                tokens,
            })
        })
        .collect::<Result<_>>()?;
    let batch = MultimodalBatch { samples };
    let prefix = sample_prefix_len(4, &mut rng)?;
    let (_, grads) = pretrain_with_prefix(&batch, &model, cfg.alpha, prefix, true)?;
    let grads = grads.expect("gradients requested");
    grad_check(
        |m: &PretrainModel| pretrain_with_prefix(&batch, m, cfg.alpha, prefix, false).map(|(r, _)| r.total),
        &model,
        &grads,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset_model, ModelPreset};
    use crate::nnprim::normal_mat;

    #[test]
    fn pixel_loss_arithmetic_and_masking() {
        let t = normal_mat(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mask = [false, true, false];
        assert_eq!(pixel_loss(&t, &t, &mask).unwrap(), 0.0);
        let mut p = t.clone();
        p[[1, 0]] += 1.0;
        assert!((pixel_loss(&p, &t, &mask).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let base = pixel_loss(&p, &t, &mask).unwrap();
        p.row_mut(0).fill(1e6);
        p.row_mut(2).fill(-3.0);
        assert_eq!(pixel_loss(&p, &t, &mask).unwrap(), base);
        assert!(pixel_loss(&p, &t, &[false; 3]).is_err());
    }

    #[test]
    fn text_loss_uniform_and_margins() {
        let uniform = Array2::zeros((4, 10));
        let l = text_loss(&uniform, &[1, 2, 3, 4], &[true; 4]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
        let margin = |m: f64| {
            let mut logits = Array2::zeros((1, 10));
            logits[[0, 3]] = m;
            text_loss(&logits, &[3], &[true]).unwrap()
        };
        assert!(margin(10.0) < margin(5.0));
        assert!(margin(5.0) < 10f64.ln());
        assert!(margin(10.0) < 1e-3);
    }

    #[test]
    fn text_loss_ignores_padding_rows() {
        let mut logits = normal_mat(3, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mask = [true, false, true];
        let base = text_loss(&logits, &[0, 0, 4], &mask).unwrap();
        logits.row_mut(1).fill(50.0);
        assert_eq!(text_loss(&logits, &[0, 3, 4], &mask).unwrap(), base);
        assert!(text_loss(&logits, &[0, 0, 0], &[false; 3]).is_err());
    }

    #[test]
    fn total_loss_combinations() {
        assert!((total_loss(0.5, 2.0, 0.4) - 2.2).abs() < 1e-15);
        assert_eq!(total_loss(123.0, 2.0, 0.0), 2.0);
        assert_eq!(total_loss(1.5, 1.5, 1.0), 3.0);
    }

    fn tiny_batch(seed: u64) -> (PretrainModel, MultimodalBatch) {
        let cfg = preset_model(ModelPreset::DeskTiny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PretrainModel::init(&cfg, &mut rng);
        let samples = (0..2)
            .map(|i| {
                let img = ndarray::Array3::from_shape_simple_fn((8, 8, 3), || rng.random::<f64>());
                Sample {
                    patches: crate::patchify::patchify(&img, 4).unwrap(),
                    tokens: vec![97 + i, 98, EOT_ID],
                }
            })
            .collect();
        (model, MultimodalBatch { samples })
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, batch) = tiny_batch(0);
        let run = || pretrain_forward(&batch, &model, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn alpha_zero_zeroes_pixel_head_gradients() {
        let (model, batch) = tiny_batch(1);
        let (_, g) = pretrain_with_prefix(&batch, &model, 0.0, 2, true).unwrap();
        let g = g.unwrap();
        assert!(g.decoder.pixel_head.weight.iter().all(|&v| v == 0.0));
        assert!(g.decoder.pixel_head.bias.as_ref().unwrap().iter().all(|&v| v == 0.0));
        assert!(g.decoder.text_head.weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_is_linear_in_alpha() {
        let (model, batch) = tiny_batch(2);
        let a = pretrain_with_prefix(&batch, &model, 0.0, 1, false).unwrap().0;
        let b = pretrain_with_prefix(&batch, &model, 1.0, 1, false).unwrap().0;
        assert_eq!(a.pixel_loss, b.pixel_loss);
        assert_eq!(b.total - a.total, b.pixel_loss);
        assert_eq!(a.active_pixel_targets, 2 * 3);
        assert_eq!(a.active_text_targets, 2 * 2);
    }

    #[test]
    fn mixed_patch_counts_rejected() {
        let (model, mut batch) = tiny_batch(3);
        let img = ndarray::Array3::zeros((4, 8, 3));
        batch.samples[1].patches = crate::patchify::patchify(&img, 4).unwrap();
        assert!(pretrain_with_prefix(&batch, &model, 0.4, 1, false).is_err());
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let cfg = preset_model(ModelPreset::DeskTiny);
        for seed in 0..3 {
            let report = pretrain_grad_check(&cfg, seed, &full_model_check_options(1e-5, seed)).unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst());
        }
    }
}
