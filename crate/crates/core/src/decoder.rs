//! Joint causal decoder over `[image features ; caption tokens]` with a pixel
//! head and a token head.

use ndarray::{s, Array2};
use rand::Rng;

use crate::config::ModelConfig;
use crate::masks::build_causal_mask;
use crate::nnprim::params_join as join;
use crate::nnprim::{
    block_backward, block_forward, normal_mat, rms_norm, rms_norm_backward, BlockCache, BlockParams, Linear, Mat,
    ParamTree, NORM_EPS,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub img_proj: Linear,
    pub tok_embed: Mat,
    /// Learned absolute positions over the concatenated sequence.
    pub pos_embed: Mat,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Mat,
    pub pixel_head: Linear,
    pub text_head: Linear,
}

impl DecoderParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            img_proj: Linear::init(cfg.d_enc, cfg.d_dec, cfg.bias, rng),
            tok_embed: normal_mat(cfg.vocab_size, cfg.d_dec, 1.0, rng),
            pos_embed: normal_mat(cfg.decoder_positions(), cfg.d_dec, 0.1, rng),
            blocks: (0..cfg.l_dec)
                .map(|_| BlockParams::init(cfg.d_dec, cfg.ffn_hidden_dec, cfg.heads_dec, cfg.bias, rng))
                .collect(),
            final_norm: Array2::ones((1, cfg.d_dec)),
            pixel_head: Linear::init(cfg.d_dec, cfg.patch_dim(), cfg.bias, rng),
            text_head: Linear::init(cfg.d_dec, cfg.vocab_size, cfg.bias, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_embed.nrows()
    }
}

impl ParamTree for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.img_proj.visit(&join(prefix, "img_proj"), out);
        out.push((join(prefix, "tok_embed"), &self.tok_embed));
        out.push((join(prefix, "pos_embed"), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "final_norm"), &self.final_norm));
        self.pixel_head.visit(&join(prefix, "pixel_head"), out);
        self.text_head.visit(&join(prefix, "text_head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        self.img_proj.visit_mut(&join(prefix, "img_proj"), out);
        out.push((join(prefix, "tok_embed"), &mut self.tok_embed));
        out.push((join(prefix, "pos_embed"), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        out.push((join(prefix, "final_norm"), &mut self.final_norm));
        self.pixel_head.visit_mut(&join(prefix, "pixel_head"), out);
        self.text_head.visit_mut(&join(prefix, "text_head"), out);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    img_feats: Mat,
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    pre_norm: Mat,
    hidden: Mat,
}

pub fn decoder_forward(img_feats: &Mat, tokens: &[usize], params: &DecoderParams) -> Result<(Mat, Mat)> {
    decoder_forward_cached(img_feats, tokens, params).map(|(p, l, _)| (p, l))
}

/// Returns `(pixel_preds [I, patch_dim], token_logits [T, vocab])`.
pub fn decoder_forward_cached(
    img_feats: &Mat,
    tokens: &[usize],
    params: &DecoderParams,
) -> Result<(Mat, Mat, DecoderCache)> {
    let (n_img, n_txt) = (img_feats.nrows(), tokens.len());
    let len = n_img + n_txt;
    let width = params.final_norm.ncols();
    if len == 0 {
        return Err(Error::shape("decoder input is empty"));
    }
    if len > params.pos_embed.nrows() {
        return Err(Error::shape(format!(
            "sequence of {len} exceeds {} decoder positions",
            params.pos_embed.nrows()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= params.vocab_size()) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            params.vocab_size()
        )));
    }

    let mut x = Array2::zeros((len, width));
    x.slice_mut(s![..n_img, ..]).assign(&params.img_proj.forward(img_feats)?);
    for (t, &id) in tokens.iter().enumerate() {
        x.row_mut(n_img + t).assign(&params.tok_embed.row(id));
    }
    x += &params.pos_embed.slice(s![..len, ..]);

    let mask = build_causal_mask(len)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (y, c) = block_forward(&x, b, &mask)?;
        caches.push(c);
        x = y;
    }
    let hidden = rms_norm(&x, &params.final_norm, NORM_EPS)?;
    let pixel_preds = params.pixel_head.forward(&hidden.slice(s![..n_img, ..]).to_owned())?;
    let token_logits = params.text_head.forward(&hidden.slice(s![n_img.., ..]).to_owned())?;
    let cache = DecoderCache {
        img_feats: img_feats.clone(),
        tokens: tokens.to_vec(),
        blocks: caches,
        pre_norm: x,
        hidden,
    };
    Ok((pixel_preds, token_logits, cache))
}

/// Accumulates parameter gradients and returns `dL/d(img_feats)`.
pub fn decoder_backward(
    params: &DecoderParams,
    cache: &DecoderCache,
    d_pixel: &Mat,
    d_logits: &Mat,
    grads: &mut DecoderParams,
) -> Result<Mat> {
    let n_img = cache.img_feats.nrows();
    let len = cache.hidden.nrows();
    if d_pixel.nrows() != n_img || d_logits.nrows() != len - n_img {
        return Err(Error::shape("head gradients do not match the decoded sequence"));
    }
    let mut d_hidden = Array2::zeros(cache.hidden.dim());
    let h_img = cache.hidden.slice(s![..n_img, ..]).to_owned();
    let h_txt = cache.hidden.slice(s![n_img.., ..]).to_owned();
    d_hidden
        .slice_mut(s![..n_img, ..])
        .assign(&params.pixel_head.backward(&h_img, d_pixel, &mut grads.pixel_head));
    d_hidden
        .slice_mut(s![n_img.., ..])
        .assign(&params.text_head.backward(&h_txt, d_logits, &mut grads.text_head));

    let (mut dx, d_norm) = rms_norm_backward(&cache.pre_norm, &params.final_norm, NORM_EPS, &d_hidden)?;
    grads.final_norm += &d_norm;
    for ((b, c), g) in params.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
        dx = block_backward(b, c, &dx, g)?;
    }
    {
        let mut gp = grads.pos_embed.slice_mut(s![..len, ..]);
        gp += &dx;
    }
    for (t, &id) in cache.tokens.iter().enumerate() {
        let mut row = grads.tok_embed.row_mut(id);
        row += &dx.row(n_img + t);
    }
    let dx_img = dx.slice(s![..n_img, ..]).to_owned();
    Ok(params.img_proj.backward(&cache.img_feats, &dx_img, &mut grads.img_proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset_model, ModelPreset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (DecoderParams, Mat) {
        let cfg = preset_model(ModelPreset::DeskTiny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (DecoderParams::init(&cfg, &mut rng), normal_mat(4, cfg.d_enc, 1.0, &mut rng))
    }

    #[test]
    fn empty_caption() {
        let (params, feats) = setup(0);
        let (pix, logits) = decoder_forward(&feats, &[], &params).unwrap();
        assert_eq!(pix.dim(), (4, 48));
        assert_eq!(logits.dim(), (0, 259));
    }

    #[test]
    fn token_perturbation_only_affects_later_logits() {
        let (params, feats) = setup(1);
        let tokens = [10, 20, 30, 40];
        let (pix, logits) = decoder_forward(&feats, &tokens, &params).unwrap();
        for t in 0..tokens.len() {
            let mut pert = tokens;
            pert[t] = 99;
            let (p2, l2) = decoder_forward(&feats, &pert, &params).unwrap();
            assert_eq!(p2, pix);
            for u in 0..tokens.len() {
                assert_eq!(l2.row(u) == logits.row(u), u < t, "u={u} t={t}");
            }
        }
    }

    #[test]
    fn image_perturbation_reaches_all_text() {
        let (params, feats) = setup(2);
        let tokens = [5, 6, 7];
        let (pix, logits) = decoder_forward(&feats, &tokens, &params).unwrap();
        for j in 0..feats.nrows() {
            let mut pert = feats.clone();
            pert.row_mut(j).mapv_inplace(|v| v + 0.25);
            let (p2, l2) = decoder_forward(&pert, &tokens, &params).unwrap();
            for i in 0..feats.nrows() {
                assert_eq!(p2.row(i) == pix.row(i), i < j);
            }
            for u in 0..tokens.len() {
                assert_ne!(l2.row(u), logits.row(u));
            }
        }
    }

    #[test]
    fn rejects_bad_tokens_and_overlong_sequences() {
        let (params, feats) = setup(3);
        assert!(decoder_forward(&feats, &[259], &params).is_err());
        let long = vec![1; params.pos_embed.nrows()];
        assert!(decoder_forward(&feats, &long, &params).is_err());
    }
}
