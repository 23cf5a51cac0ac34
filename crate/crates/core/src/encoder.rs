//! Prefix-attention ViT encoder.

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::masks::AttentionMask;
use crate::nnprim::{
    block_backward, block_forward, rms_norm, rms_norm_backward, BlockCache, BlockParams, Linear, Mat, ParamTree,
    NORM_EPS,
};
use crate::nnprim::params_join as join;
use crate::patchify::PatchSequence;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Mat,
}

impl EncoderParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            patch_embed: Linear::init(cfg.patch_dim(), cfg.d_enc, cfg.bias, rng),
            blocks: (0..cfg.l_enc)
                .map(|_| BlockParams::init(cfg.d_enc, cfg.ffn_hidden_enc, cfg.heads_enc, cfg.bias, rng))
                .collect(),
            final_norm: Array2::ones((1, cfg.d_enc)),
        }
    }

    pub fn width(&self) -> usize {
        self.final_norm.ncols()
    }

    pub fn heads(&self) -> usize {
        self.blocks.first().map_or(1, |b| b.heads)
    }
}

impl ParamTree for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "final_norm"), &self.final_norm));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "final_norm"), &mut self.final_norm));
    }
}

/// Fixed 2-D sinusoidal embedding from each patch's (row, col) coordinate.
///
/// The width splits into four quarters: sin/cos of the row, sin/cos of the
/// column, over a geometric frequency ladder. Any grid shape works.
pub fn positional_embedding(grid: (usize, usize), width: usize) -> Result<Mat> {
    if width == 0 || width % 4 != 0 {
        return Err(Error::shape(format!("positional width {width} must be a positive multiple of 4")));
    }
    let (rows, cols) = grid;
    let quarter = width / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|k| 10_000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    let mut out = Array2::zeros((rows * cols, width));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = out.row_mut(r * cols + c);
            for (k, f) in freqs.iter().enumerate() {
                row[k] = (r as f64 * f).sin();
                row[quarter + k] = (r as f64 * f).cos();
                row[2 * quarter + k] = (c as f64 * f).sin();
                row[3 * quarter + k] = (c as f64 * f).cos();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    patches: Mat,
    blocks: Vec<BlockCache>,
    pre_norm: Mat,
}

pub fn encoder_forward(seq: &PatchSequence, mask: &AttentionMask, params: &EncoderParams) -> Result<Mat> {
    encoder_forward_cached(seq, mask, params).map(|(y, _)| y)
}

/// Patch embedding plus positions, the block stack under `mask`, final
/// RMSNorm. Columns of padding patches are forbidden on top of `mask`.
pub fn encoder_forward_cached(
    seq: &PatchSequence,
    mask: &AttentionMask,
    params: &EncoderParams,
) -> Result<(Mat, EncoderCache)> {
    let n = seq.len();
    if mask.dim() != (n, n) {
        return Err(Error::shape(format!("mask {:?} for {n} patches", mask.dim())));
    }
    let mut mask = mask.clone();
    mask.forbid_invalid_columns(&seq.valid)?;
    let mut x = params.patch_embed.forward(&seq.patches)?;
    x += &positional_embedding(seq.grid, params.width())?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (y, c) = block_forward(&x, b, &mask)?;
        caches.push(c);
        x = y;
    }
    let out = rms_norm(&x, &params.final_norm, NORM_EPS)?;
    Ok((
        out,
        EncoderCache {
            patches: seq.patches.clone(),
            blocks: caches,
            pre_norm: x,
        },
    ))
}

/// Accumulates parameter gradients for `d_out = dL/d(encoder output)`.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_out: &Mat,
    grads: &mut EncoderParams,
) -> Result<()> {
    let (mut dx, d_norm) = rms_norm_backward(&cache.pre_norm, &params.final_norm, NORM_EPS, d_out)?;
    grads.final_norm += &d_norm;
    for ((b, c), g) in params.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
        dx = block_backward(b, c, &dx, g)?;
    }
    params.patch_embed.backward(&cache.patches, &dx, &mut grads.patch_embed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset_model, ModelPreset};
    use crate::masks::{build_causal_mask, build_prefix_mask};
    use crate::patchify::patchify;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, rows: usize, cols: usize) -> (EncoderParams, PatchSequence) {
        let cfg = preset_model(ModelPreset::DeskTiny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&cfg, &mut rng);
        let p = cfg.patch_size;
        let img = Array3::from_shape_simple_fn((rows * p, cols * p, 3), || rng.random::<f64>());
        (params, patchify(&img, p).unwrap())
    }

    #[test]
    fn positional_embedding_properties() {
        let single = positional_embedding((1, 1), 8).unwrap();
        assert_eq!(single.row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let a = positional_embedding((2, 3), 32).unwrap();
        let b = positional_embedding((4, 5), 32).unwrap();
        // Cell (1, 2) in both grids.
        assert_eq!(a.row(3 + 2), b.row(5 + 2));
        for row in b.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 4.0).abs() < 1e-6);
        }
        assert!(positional_embedding((2, 2), 30).is_err());
    }

    #[test]
    fn causal_encoder_hides_future_patches() {
        let (params, seq) = setup(1, 2, 3);
        let mask = build_causal_mask(seq.len()).unwrap();
        let base = encoder_forward(&seq, &mask, &params).unwrap();
        for j in 0..seq.len() {
            let mut pert = seq.clone();
            pert.patches.row_mut(j).mapv_inplace(|v| v + 0.3);
            let out = encoder_forward(&pert, &mask, &params).unwrap();
            for i in 0..seq.len() {
                assert_eq!(out.row(i) == base.row(i), i < j, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn prefix_encoder_dependency_structure() {
        let (params, seq) = setup(2, 2, 2);
        let mask = build_prefix_mask(4, 2).unwrap();
        let base = encoder_forward(&seq, &mask, &params).unwrap();
        let perturb = |j: usize| {
            let mut pert = seq.clone();
            pert.patches.row_mut(j).mapv_inplace(|v| v * -1.0 + 0.2);
            encoder_forward(&pert, &mask, &params).unwrap()
        };
        let last = perturb(3);
        for i in 0..3 {
            assert_eq!(last.row(i), base.row(i));
        }
        let first = perturb(0);
        for i in 0..4 {
            assert_ne!(first.row(i), base.row(i));
        }
    }

    #[test]
    fn bidirectional_encoder_is_permutation_equivariant() {
        let (params, seq) = setup(3, 2, 2);
        let mask = AttentionMask::all_allow(4, 4);
        // Swap patches 0 and 3 together with their positions by embedding
        // manually: run the stack on permuted inputs with permuted positions.
        let pos = positional_embedding(seq.grid, params.width()).unwrap();
        let run = |patches: &Mat, pos: &Mat| {
            let mut x = params.patch_embed.forward(patches).unwrap() + pos;
            for b in &params.blocks {
                x = block_forward(&x, b, &mask).unwrap().0;
            }
            rms_norm(&x, &params.final_norm, NORM_EPS).unwrap()
        };
        let swap = |m: &Mat| {
            let mut s = m.clone();
            s.row_mut(0).assign(&m.row(3));
            s.row_mut(3).assign(&m.row(0));
            s
        };
        let base = run(&seq.patches, &pos);
        let swapped = run(&swap(&seq.patches), &swap(&pos));
        assert_eq!(base, encoder_forward(&seq, &mask, &params).unwrap());
        for (a, b) in swap(&base).iter().zip(swapped.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_patches_are_invisible_to_others() {
        let (params, mut seq) = setup(4, 2, 2);
        seq.valid[3] = false;
        let mask = AttentionMask::all_allow(4, 4);
        let base = encoder_forward(&seq, &mask, &params).unwrap();
        seq.patches.row_mut(3).fill(0.9);
        let out = encoder_forward(&seq, &mask, &params).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), base.row(i));
        }
    }

    #[test]
    fn outputs_finite_over_many_seeds() {
        for seed in 0..100 {
            let (params, seq) = setup(seed, 2, 2);
            let mask = build_prefix_mask(4, 1 + (seed as usize % 3)).unwrap();
            let out = encoder_forward(&seq, &mask, &params).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mask_size_mismatch() {
        let (params, seq) = setup(5, 2, 2);
        assert!(encoder_forward(&seq, &build_causal_mask(3).unwrap(), &params).is_err());
    }
}
