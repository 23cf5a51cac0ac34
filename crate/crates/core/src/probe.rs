//! Attentive probing of a frozen encoder: one learnable query attends over
//! the patch features, a linear classifier reads the pooled vector.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{OptimConfig, ProbeConfig, RunConfig, ScheduleKind};
use crate::data::{generate_labeled, Shape};
use crate::encoder::{encoder_forward, EncoderParams};
use crate::masks::AttentionMask;
use crate::nnprim::params_join as join;
use crate::nnprim::{
    cross_entropy_rows, masked_mha_backward, masked_mha_forward, normal_mat, param_checksum, zeros_like, Linear,
    Mat, ParamTree,
};
use crate::patchify::{patchify, PatchSequence};
use crate::trainer::{adam_step, clip_gradients, lr_at_step, stream_rng, AdamHparams, OptimizerState, WeightDecay};
use crate::{Error, Result};

/// Per-dimension standardization of encoder features, estimated once from
/// the training set and then frozen (not a trainable parameter).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Array1<f64>,
    pub inv_std: Array1<f64>,
}

impl FeatureNorm {
    pub fn fit(features: &[Mat]) -> Result<Self> {
        let width = features.first().map(|f| f.ncols()).ok_or_else(|| Error::invalid("empty dataset"))?;
        let rows: usize = features.iter().map(|f| f.nrows()).sum();
        let mut mean = Array1::zeros(width);
        for f in features {
            mean += &f.sum_axis(Axis(0));
        }
        mean /= rows as f64;
        let mut var = Array1::<f64>::zeros(width);
        for f in features {
            for r in f.rows() {
                var.zip_mut_with(&(&r - &mean), |v, d| *v += d * d);
            }
        }
        let inv_std = var.mapv(|v| 1.0 / (v / rows as f64 + 1e-6).sqrt());
        Ok(Self { mean, inv_std })
    }

    pub fn apply(&self, features: &Mat) -> Result<Mat> {
        if features.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "features of width {}, normalizer expects {}",
                features.ncols(),
                self.mean.len()
            )));
        }
        Ok((features - &self.mean) * &self.inv_std)
    }
}

/// Pooling query, key/value projections and classifier. Keys carry no bias
/// (softmax would cancel it); there is no output projection, since the
/// classifier that follows is already linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub query: Mat,
    pub wk: Linear,
    pub wv: Linear,
    pub classifier: Linear,
    pub heads: usize,
    /// Applied to features before pooling; `None` passes them through.
    pub norm: Option<FeatureNorm>,
}

impl ProbeParams {
    pub fn init(width: usize, heads: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: normal_mat(1, width, 1.0 / (width as f64).sqrt(), rng),
            wk: Linear::init(width, width, false, rng),
            wv: Linear::init(width, width, true, rng),
            classifier: Linear::init(width, num_classes, true, rng),
            heads,
            norm: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.d_out()
    }
}

impl ParamTree for ProbeParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "query"), &self.query));
        self.wk.visit(&join(prefix, "wk"), out);
        self.wv.visit(&join(prefix, "wv"), out);
        self.classifier.visit(&join(prefix, "classifier"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "query"), &mut self.query));
        self.wk.visit_mut(&join(prefix, "wk"), out);
        self.wv.visit_mut(&join(prefix, "wv"), out);
        self.classifier.visit_mut(&join(prefix, "classifier"), out);
    }
}

struct PoolCache {
    x: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    pooled: Mat,
}

fn pool_forward(features: &Mat, p: &ProbeParams) -> Result<PoolCache> {
    if features.nrows() == 0 {
        return Err(Error::invalid("attentive pooling needs at least one feature"));
    }
    let x = match &p.norm {
        Some(n) => n.apply(features)?,
        None => features.clone(),
    };
    let k = p.wk.forward(&x)?;
    let v = p.wv.forward(&x)?;
    let mask = AttentionMask::all_allow(1, x.nrows());
    let (pooled, probs) = masked_mha_forward(&p.query, &k, &v, &mask, p.heads)?;
    Ok(PoolCache { x, k, v, probs, pooled })
}

/// Cross-attention from the learnable query over every feature row.
pub fn attentive_pool(features: &Mat, probe: &ProbeParams) -> Result<Array1<f64>> {
    Ok(pool_forward(features, probe)?.pooled.row(0).to_owned())
}

/// Class logits `[1, K]` for one image's features.
pub fn probe_logits(features: &Mat, probe: &ProbeParams) -> Result<Mat> {
    let cache = pool_forward(features, probe)?;
    probe.classifier.forward(&cache.pooled)
}

/// Mean cross-entropy over `batch`; accumulates its gradient into `grads`.
fn batch_loss(features: &[Mat], labels: &[usize], batch: &[usize], p: &ProbeParams, grads: Option<&mut ProbeParams>) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for &i in batch {
        let cache = pool_forward(&features[i], p)?;
        let logits = p.classifier.forward(&cache.pooled)?;
        let (loss, _, dlogits) = cross_entropy_rows(&logits, &[labels[i]], &[true])?;
        total += loss * scale;
        if let Some(g) = grads.as_deref_mut() {
            let dpooled = p.classifier.backward(&cache.pooled, &(dlogits * scale), &mut g.classifier);
            let (dq, dk, dv) = masked_mha_backward(&p.query, &cache.k, &cache.v, &cache.probs, &dpooled);
            g.query += &dq;
            p.wk.backward(&cache.x, &dk, &mut g.wk);
            p.wv.backward(&cache.x, &dv, &mut g.wv);
        }
    }
    Ok(total)
}

/// Images with class labels indexing `classes`.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Vec<PatchSequence>,
    pub labels: Vec<usize>,
    pub classes: Vec<Shape>,
}

/// `count` single-shape scenes labeled by shape, fully determined by `seed`.
pub fn labeled_dataset(classes: &[Shape], count: usize, image_size: usize, patch: usize, seed: u64) -> Result<LabeledImages> {
    let cell = if image_size % 8 == 0 { 8 } else { image_size };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (img, label) = generate_labeled(rng.random(), classes, image_size, cell)?;
        images.push(patchify(&img, patch)?);
        labels.push(label);
    }
    Ok(LabeledImages {
        images,
        labels,
        classes: classes.to_vec(),
    })
}

/// Runs the encoder bidirectionally (prefix covering every patch).
pub fn encode_frozen(encoder: &EncoderParams, images: &[PatchSequence]) -> Result<Vec<Mat>> {
    images
        .par_iter()
        .map(|seq| encoder_forward(seq, &AttentionMask::all_allow(seq.len(), seq.len()), encoder))
        .collect()
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(l) => Err(Error::invalid(format!("class index {l} out of range for {num_classes} classes"))),
        None => Ok(()),
    }
}

pub fn predict(features: &[Mat], probe: &ProbeParams) -> Result<Vec<usize>> {
    features
        .iter()
        .map(|x| probe_logits(x, probe).map(|l| argmax(l.row(0))))
        .collect()
}

fn features_accuracy(features: &[Mat], labels: &[usize], probe: &ProbeParams) -> Result<f64> {
    check_labels(labels, probe.num_classes())?;
    accuracy(&predict(features, probe)?, labels)
}

/// Top-1 accuracy of `probe` on `data`, encoding bidirectionally.
pub fn evaluate_probe(encoder: &EncoderParams, probe: &ProbeParams, data: &LabeledImages) -> Result<f64> {
    check_labels(&data.labels, probe.num_classes())?;
    let features = encode_frozen(encoder, &data.images)?;
    features_accuracy(&features, &data.labels, probe)
}

/// Per-image average of the feature rows.
pub fn mean_pool(features: &Mat) -> Array1<f64> {
    features.mean_axis(ndarray::Axis(0)).expect("non-empty features")
}

/// Training accuracy of a least-squares linear classifier (one-hot
/// targets, bias column) fitted directly to `pooled` vectors. Used to
/// confirm a task is linearly separable before expecting a probe to solve it.
pub fn least_squares_accuracy(pooled: &[Array1<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_labels(labels, num_classes)?;
    if pooled.len() != labels.len() {
        return Err(Error::shape("one pooled vector per label expected"));
    }
    let d = pooled[0].len();
    let x = DMatrix::from_fn(pooled.len(), d + 1, |i, j| if j < d { pooled[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(pooled.len(), num_classes, |i, c| f64::from(u8::from(labels[i] == c)));
    let w = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
    let scores = x * w;
    let preds: Vec<usize> = (0..pooled.len())
        .map(|i| {
            let row: Vec<f64> = scores.row(i).iter().copied().collect();
            argmax(ndarray::ArrayView1::from(&row[..]))
        })
        .collect();
    accuracy(&preds, labels)
}

/// Hyperparameters of one probe fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
}

impl ProbeHparams {
    pub fn from_config(cfg: &ProbeConfig, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            min_lr: cfg.min_lr.min(lr),
            warmup_steps: cfg.warmup_steps,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            grad_clip: cfg.grad_clip,
        }
    }

    fn schedule(&self) -> OptimConfig {
        OptimConfig {
            min_lr: self.min_lr,
            schedule: ScheduleKind::Cosine,
            ..OptimConfig::desk(self.lr, self.warmup_steps, self.steps)
        }
    }
}

/// Trains a probe on precomputed features; returns it with its last
/// mini-batch loss. Only probe parameters are ever updated.
pub fn fit_probe(
    features: &[Mat],
    labels: &[usize],
    num_classes: usize,
    heads: usize,
    hp: &ProbeHparams,
    seed: u64,
) -> Result<(ProbeParams, f64)> {
    check_labels(labels, num_classes)?;
    if features.len() != labels.len() {
        return Err(Error::shape("one feature matrix per label expected"));
    }
    let width = features[0].ncols();
    let mut probe = ProbeParams::init(width, heads, num_classes, &mut stream_rng(seed, u64::MAX));
    probe.norm = Some(FeatureNorm::fit(features)?);
    let mut state = OptimizerState::new(&probe);
    let adam = AdamHparams {
        beta1: hp.beta1,
        beta2: hp.beta2,
        eps: 1e-8,
        decay: WeightDecay::Coupled(hp.weight_decay),
    };
    let schedule = hp.schedule();
    let n = features.len();
    let mut last = f64::NAN;
    for t in 1..=hp.steps {
        let mut rng = stream_rng(seed, t);
        let batch: Vec<usize> = if hp.batch_size <= n {
            sample(&mut rng, n, hp.batch_size).into_vec()
        } else {
            (0..hp.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let mut grads = zeros_like(&probe);
        last = batch_loss(features, labels, &batch, &probe, Some(&mut grads))?;
        if !last.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at step {t}")));
        }
        clip_gradients(&mut grads, hp.grad_clip)?;
        adam_step(&mut probe, &grads, &mut state, lr_at_step(t, &schedule)?, &adam)?;
    }
    Ok((probe, last))
}

/// One point of the learning-rate / weight-decay sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub lr: f64,
    pub weight_decay: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub classes: Vec<String>,
    pub steps: u64,
    pub train_images: usize,
    pub eval_images: usize,
    /// CRC32 of the encoder before and after probing; always equal.
    pub encoder_checksum: u32,
    /// Least-squares accuracy on mean-pooled training features.
    pub least_squares_train_accuracy: f64,
    /// Index into `run` of the best eval accuracy (first on ties).
    pub best: usize,
    pub run: Vec<SweepEntry>,
}

impl ProbeReport {
    pub fn best_entry(&self) -> &SweepEntry {
        &self.run[self.best]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Sweeps every `(lr, wd)` pair of `cfg`, each from the same initialization,
/// and keeps the probe with the best held-out accuracy.
pub fn train_probe(
    encoder: &EncoderParams,
    train: &LabeledImages,
    eval: &LabeledImages,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeParams, ProbeReport)> {
    if train.images.is_empty() || eval.images.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let k = train.classes.len();
    check_labels(&train.labels, k)?;
    check_labels(&eval.labels, k)?;
    let checksum = param_checksum(encoder);
    let train_feats = encode_frozen(encoder, &train.images)?;
    let eval_feats = encode_frozen(encoder, &eval.images)?;
    let pooled: Vec<_> = train_feats.iter().map(mean_pool).collect();
    let ls = least_squares_accuracy(&pooled, &train.labels, k)?;

    let mut run: Vec<SweepEntry> = Vec::new();
    let mut best: Option<(usize, ProbeParams)> = None;
    for &lr in &cfg.lr_grid {
        for &wd in &cfg.wd_grid {
            let hp = ProbeHparams::from_config(cfg, lr, wd);
            let (probe, final_loss) = fit_probe(&train_feats, &train.labels, k, encoder.heads(), &hp, seed)?;
            let entry = SweepEntry {
                lr,
                weight_decay: wd,
                final_loss,
                train_accuracy: features_accuracy(&train_feats, &train.labels, &probe)?,
                eval_accuracy: features_accuracy(&eval_feats, &eval.labels, &probe)?,
            };
            let better = best.as_ref().is_none_or(|(i, _)| entry.eval_accuracy > run[*i].eval_accuracy);
            if better {
                best = Some((run.len(), probe));
            }
            run.push(entry);
        }
    }
    let (best, probe) = best.ok_or_else(|| Error::invalid("empty sweep grid"))?;
    if param_checksum(encoder) != checksum {
        return Err(Error::invalid("encoder parameters changed during probing"));
    }
    let report = ProbeReport {
        classes: train.classes.iter().map(|c| c.name().to_string()).collect(),
        steps: cfg.steps,
        train_images: train.images.len(),
        eval_images: eval.images.len(),
        encoder_checksum: checksum,
        least_squares_train_accuracy: ls,
        best,
        run,
    };
    Ok((probe, report))
}

/// Builds the train/eval shape datasets described by `cfg.probe` and runs
/// the sweep on `encoder`.
pub fn probe_from_config(cfg: &RunConfig, encoder: &EncoderParams) -> Result<(ProbeParams, ProbeReport)> {
    let classes: Vec<Shape> = cfg
        .probe
        .classes
        .iter()
        .map(|c| Shape::from_name(c).ok_or_else(|| Error::invalid(format!("unknown class `{c}`"))))
        .collect::<Result<_>>()?;
    let (size, p) = (cfg.data.image_size, cfg.model.patch_size);
    let mut seeds = stream_rng(cfg.seed, u64::MAX - 2);
    let train = labeled_dataset(&classes, cfg.probe.train_images, size, p, seeds.random())?;
    let eval = labeled_dataset(&classes, cfg.probe.eval_images, size, p, seeds.random())?;
    train_probe(encoder, &train, &eval, &cfg.probe, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset_model, ModelPreset};
    use crate::nnprim::{grad_check, GradCheckOptions};
    use ndarray::{concatenate, Array2};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_feature_pools_to_its_value() {
        let p = ProbeParams::init(8, 2, 3, &mut rng(0));
        let x = normal_mat(1, 8, 1.0, &mut rng(1));
        let pooled = attentive_pool(&x, &p).unwrap();
        let value = p.wv.forward(&x).unwrap();
        assert_eq!(pooled, value.row(0));
    }

    #[test]
    fn duplicating_and_permuting_features_is_invisible() {
        let p = ProbeParams::init(8, 2, 3, &mut rng(2));
        let x = normal_mat(5, 8, 1.0, &mut rng(3));
        let base = attentive_pool(&x, &p).unwrap();
        let doubled = concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let perm = x.select(Axis(0), &[3, 0, 4, 1, 2]);
        for other in [&doubled, &perm] {
            let y = attentive_pool(other, &p).unwrap();
            assert!(base.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert!(attentive_pool(&Array2::zeros((0, 8)), &p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let mut p = ProbeParams::init(8, 2, 3, &mut rng(seed));
            let feats: Vec<Mat> = (0..3).map(|i| normal_mat(4 + i, 8, 1.0, &mut rng(seed + 10 + i as u64))).collect();
            if seed % 2 == 1 {
                p.norm = Some(FeatureNorm::fit(&feats).unwrap());
            }
            let labels = [0, 2, 1];
            let batch = [0, 1, 2];
            let mut g = zeros_like(&p);
            batch_loss(&feats, &labels, &batch, &p, Some(&mut g)).unwrap();
            let report = grad_check(
                |q: &ProbeParams| batch_loss(&feats, &labels, &batch, q, None),
                &p,
                &g,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "{:?}", report.worst());
        }
    }

    #[test]
    fn feature_norm_standardizes() {
        let feats: Vec<Mat> = (0..4).map(|i| normal_mat(3, 5, 2.0, &mut rng(20 + i)) + 7.0).collect();
        let n = FeatureNorm::fit(&feats).unwrap();
        let all: Vec<Mat> = feats.iter().map(|f| n.apply(f).unwrap()).collect();
        let views: Vec<_> = all.iter().map(|m| m.view()).collect();
        let stacked = concatenate(Axis(0), &views).unwrap();
        for c in stacked.columns() {
            assert!(c.mean().unwrap().abs() < 1e-12);
            assert!((c.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-5);
        }
        assert!(n.apply(&Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn accuracy_rules() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        let mut r = rng(4);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let acc = accuracy(&preds, &labels).unwrap();
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((acc - 0.25).abs() < 4.0 * sd, "{acc}");
    }

    #[test]
    fn labels_outside_probe_classes_rejected() {
        let cfg = preset_model(ModelPreset::DeskTiny);
        let enc = EncoderParams::init(&cfg, &mut rng(5));
        let probe = ProbeParams::init(cfg.d_enc, cfg.heads_enc, 2, &mut rng(6));
        let mut data = labeled_dataset(&[Shape::Square, Shape::Circle], 4, 16, 4, 0).unwrap();
        assert!(evaluate_probe(&enc, &probe, &data).is_ok());
        data.labels[0] = 2;
        assert!(evaluate_probe(&enc, &probe, &data).is_err());
        data.labels.clear();
        data.images.clear();
        assert!(evaluate_probe(&enc, &probe, &data).is_err());
    }

    #[test]
    fn least_squares_oracle_fits_separable_points() {
        let pooled: Vec<Array1<f64>> = (0..20).map(|i| ndarray::arr1(&[i as f64, 1.0 - (i % 3) as f64])).collect();
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        assert_eq!(least_squares_accuracy(&pooled, &labels, 2).unwrap(), 1.0);
    }

    #[test]
    fn probing_leaves_encoder_untouched_and_picks_best() {
        let mut cfg = RunConfig::desk(ModelPreset::DeskTiny, 1);
        cfg.probe.steps = 100;
        cfg.probe.train_images = 16;
        cfg.probe.eval_images = 16;
        cfg.probe.lr_grid = vec![1e-4, 1e-3];
        cfg.probe.wd_grid = vec![0.05];
        let enc = EncoderParams::init(&cfg.model, &mut rng(7));
        let before = enc.clone();
        let (probe, report) = probe_from_config(&cfg, &enc).unwrap();
        assert_eq!(enc, before);
        assert_eq!(report.encoder_checksum, param_checksum(&enc));
        assert_eq!(report.run.len(), 2);
        let top = report.run.iter().map(|e| e.eval_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(report.best_entry().eval_accuracy, top);
        assert_eq!(probe.num_classes(), 2);
        assert!(report.to_toml().contains("[[run]]"));
    }
}
