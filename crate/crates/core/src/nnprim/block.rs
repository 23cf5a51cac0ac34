use ndarray::Array2;
use rand::Rng;

use super::ops::{masked_mha_backward, masked_mha_forward, rms_norm, rms_norm_backward, swiglu_backward, swiglu_ffn};
use super::params::{join, normal_mat, Linear, ParamTree};
use super::{Mat, NORM_EPS};
use crate::masks::AttentionMask;
use crate::{Error, Result};

/// Pre-norm transformer block: RMSNorm, attention, residual, RMSNorm,
/// SwiGLU, residual.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Mat,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: Mat,
    pub w_gate: Mat,
    pub w_in: Mat,
    pub w_out: Mat,
    pub heads: usize,
}

impl BlockParams {
    pub fn init(width: usize, hidden: usize, heads: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            attn_norm: Array2::ones((1, width)),
            wq: Linear::init(width, width, bias, rng),
            // A key bias shifts every score in a row equally, so softmax ignores it.
            wk: Linear::init(width, width, false, rng),
            wv: Linear::init(width, width, bias, rng),
            wo: Linear::init(width, width, bias, rng),
            ffn_norm: Array2::ones((1, width)),
            w_gate: normal_mat(width, hidden, 1.0 / (width as f64).sqrt(), rng),
            w_in: normal_mat(width, hidden, 1.0 / (width as f64).sqrt(), rng),
            w_out: normal_mat(hidden, width, 1.0 / (hidden as f64).sqrt(), rng),
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.attn_norm.ncols()
    }
}

impl ParamTree for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "attn_norm"), &self.attn_norm));
        self.wq.visit(&join(prefix, "wq"), out);
        self.wk.visit(&join(prefix, "wk"), out);
        self.wv.visit(&join(prefix, "wv"), out);
        self.wo.visit(&join(prefix, "wo"), out);
        out.push((join(prefix, "ffn_norm"), &self.ffn_norm));
        out.push((join(prefix, "w_gate"), &self.w_gate));
        out.push((join(prefix, "w_in"), &self.w_in));
        out.push((join(prefix, "w_out"), &self.w_out));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "attn_norm"), &mut self.attn_norm));
        self.wq.visit_mut(&join(prefix, "wq"), out);
        self.wk.visit_mut(&join(prefix, "wk"), out);
        self.wv.visit_mut(&join(prefix, "wv"), out);
        self.wo.visit_mut(&join(prefix, "wo"), out);
        out.push((join(prefix, "ffn_norm"), &mut self.ffn_norm));
        out.push((join(prefix, "w_gate"), &mut self.w_gate));
        out.push((join(prefix, "w_in"), &mut self.w_in));
        out.push((join(prefix, "w_out"), &mut self.w_out));
    }
}

/// Activations kept from the forward pass for [`block_backward`].
#[derive(Clone, Debug)]
pub struct BlockCache {
    x: Mat,
    h1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    attn: Mat,
    x2: Mat,
    h2: Mat,
}

pub fn transformer_block(x: &Mat, params: &BlockParams, mask: &AttentionMask) -> Result<Mat> {
    block_forward(x, params, mask).map(|(y, _)| y)
}

pub fn block_forward(x: &Mat, p: &BlockParams, mask: &AttentionMask) -> Result<(Mat, BlockCache)> {
    if x.ncols() != p.width() {
        return Err(Error::shape(format!(
            "block of width {} applied to input of width {}",
            p.width(),
            x.ncols()
        )));
    }
    let h1 = rms_norm(x, &p.attn_norm, NORM_EPS)?;
    let q = p.wq.forward(&h1)?;
    let k = p.wk.forward(&h1)?;
    let v = p.wv.forward(&h1)?;
    let (attn, probs) = masked_mha_forward(&q, &k, &v, mask, p.heads)?;
    let x2 = x + &p.wo.forward(&attn)?;
    let h2 = rms_norm(&x2, &p.ffn_norm, NORM_EPS)?;
    let y = &x2 + &swiglu_ffn(&h2, &p.w_gate, &p.w_in, &p.w_out)?;
    let cache = BlockCache {
        x: x.clone(),
        h1,
        q,
        k,
        v,
        probs,
        attn,
        x2,
        h2,
    };
    Ok((y, cache))
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub fn block_backward(p: &BlockParams, c: &BlockCache, dy: &Mat, grads: &mut BlockParams) -> Result<Mat> {
    let (dh2, d_gate, d_in, d_out) = swiglu_backward(&c.h2, &p.w_gate, &p.w_in, &p.w_out, dy)?;
    grads.w_gate += &d_gate;
    grads.w_in += &d_in;
    grads.w_out += &d_out;
    let (dx2_norm, d_ffn_norm) = rms_norm_backward(&c.x2, &p.ffn_norm, NORM_EPS, &dh2)?;
    grads.ffn_norm += &d_ffn_norm;
    let dx2 = dy + &dx2_norm;

    let d_attn = p.wo.backward(&c.attn, &dx2, &mut grads.wo);
    let (dq, dk, dv) = masked_mha_backward(&c.q, &c.k, &c.v, &c.probs, &d_attn);
    let mut dh1 = p.wq.backward(&c.h1, &dq, &mut grads.wq);
    dh1 += &p.wk.backward(&c.h1, &dk, &mut grads.wk);
    dh1 += &p.wv.backward(&c.h1, &dv, &mut grads.wv);
    let (dx_norm, d_attn_norm) = rms_norm_backward(&c.x, &p.attn_norm, NORM_EPS, &dh1)?;
    grads.attn_norm += &d_attn_norm;
    Ok(dx2 + dx_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_causal_mask, build_prefix_mask};
    use crate::nnprim::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = BlockParams::init(8, 16, 2, true, &mut rng);
        p.wo.weight.fill(0.0);
        p.w_out.fill(0.0);
        let x = normal_mat(5, 8, 1.0, &mut rng);
        let y = transformer_block(&x, &p, &build_causal_mask(5).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn block_respects_mask_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BlockParams::init(8, 12, 2, true, &mut rng);
        let mask = build_prefix_mask(5, 2).unwrap();
        let x = normal_mat(5, 8, 1.0, &mut rng);
        let base = transformer_block(&x, &p, &mask).unwrap();
        for j in 0..5 {
            let mut xp = x.clone();
            xp.row_mut(j).mapv_inplace(|v| v + 0.5);
            let out = transformer_block(&xp, &p, &mask).unwrap();
            for i in 0..5 {
                let depends = mask.allows(i, j);
                assert_eq!(out.row(i) != base.row(i), depends, "row {i} perturbed {j}");
            }
        }
    }

    #[test]
    fn backward_returns_shapes_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BlockParams::init(8, 12, 4, false, &mut rng);
        let mask = build_causal_mask(3).unwrap();
        let x = normal_mat(3, 8, 1.0, &mut rng);
        let dy = normal_mat(3, 8, 1.0, &mut rng);
        let run = || {
            let (_, cache) = block_forward(&x, &p, &mask).unwrap();
            let mut g = zeros_like(&p);
            let dx = block_backward(&p, &cache, &dy, &mut g).unwrap();
            (dx, g)
        };
        let (dx, g) = run();
        assert_eq!(dx.dim(), (3, 8));
        assert_eq!(run().1, g);
        assert!(transformer_block(&normal_mat(3, 7, 1.0, &mut rng), &p, &mask).is_err());
    }
}
