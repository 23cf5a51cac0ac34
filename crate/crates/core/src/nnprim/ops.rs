use ndarray::{s, Array2, Axis, Zip};

use super::Mat;
use crate::masks::AttentionMask;
use crate::{Error, Result};

fn check_gain(x: &Mat, gain: &Mat) -> Result<()> {
    if gain.nrows() != 1 || gain.ncols() != x.ncols() {
        return Err(Error::shape(format!(
            "rms_norm gain {:?} does not match input width {}",
            gain.dim(),
            x.ncols()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::shape("rms_norm over an empty last dimension"));
    }
    Ok(())
}

fn row_rms(x: &Mat, eps: f64) -> Vec<f64> {
    let d = x.ncols() as f64;
    x.rows()
        .into_iter()
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / d + eps).sqrt())
        .collect()
}

/// `y = gain * x / sqrt(mean(x^2) + eps)` applied to every row.
pub fn rms_norm(x: &Mat, gain: &Mat, eps: f64) -> Result<Mat> {
    check_gain(x, gain)?;
    let rms = row_rms(x, eps);
    let g = gain.row(0);
    let mut y = x.clone();
    for (mut row, r) in y.rows_mut().into_iter().zip(rms) {
        Zip::from(&mut row).and(&g).for_each(|v, &gi| *v = gi * *v / r);
    }
    Ok(y)
}

/// Returns `(dx, dgain)` for [`rms_norm`].
pub fn rms_norm_backward(x: &Mat, gain: &Mat, eps: f64, dy: &Mat) -> Result<(Mat, Mat)> {
    check_gain(x, gain)?;
    let d = x.ncols() as f64;
    let rms = row_rms(x, eps);
    let g = gain.row(0);
    let mut dx = Array2::zeros(x.dim());
    let mut dgain = Array2::zeros((1, x.ncols()));
    for (i, r) in rms.into_iter().enumerate() {
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut dot = 0.0;
        for j in 0..x.ncols() {
            let n = xr[j] / r;
            dgain[[0, j]] += dyr[j] * n;
            dot += dyr[j] * g[j] * n;
        }
        let mean = dot / d;
        for j in 0..x.ncols() {
            let n = xr[j] / r;
            dx[[i, j]] = (dyr[j] * g[j] - n * mean) / r;
        }
    }
    Ok((dx, dgain))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn check_swiglu(x: &Mat, w_gate: &Mat, w_in: &Mat, w_out: &Mat) -> Result<()> {
    let d = x.ncols();
    let h = w_gate.ncols();
    if w_gate.nrows() != d || w_in.dim() != (d, h) || w_out.dim() != (h, d) {
        return Err(Error::shape(format!(
            "swiglu weights gate {:?}, in {:?}, out {:?} incompatible with width {d}",
            w_gate.dim(),
            w_in.dim(),
            w_out.dim()
        )));
    }
    Ok(())
}

/// `(silu(x W_gate) * (x W_in)) W_out`.
pub fn swiglu_ffn(x: &Mat, w_gate: &Mat, w_in: &Mat, w_out: &Mat) -> Result<Mat> {
    check_swiglu(x, w_gate, w_in, w_out)?;
    let mut h = x.dot(w_gate);
    let up = x.dot(w_in);
    Zip::from(&mut h).and(&up).for_each(|a, &b| *a = silu(*a) * b);
    Ok(h.dot(w_out))
}

/// Returns `(dx, dW_gate, dW_in, dW_out)` for [`swiglu_ffn`].
pub fn swiglu_backward(
    x: &Mat,
    w_gate: &Mat,
    w_in: &Mat,
    w_out: &Mat,
    dy: &Mat,
) -> Result<(Mat, Mat, Mat, Mat)> {
    check_swiglu(x, w_gate, w_in, w_out)?;
    let a = x.dot(w_gate);
    let b = x.dot(w_in);
    let mut hidden = a.clone();
    Zip::from(&mut hidden).and(&b).for_each(|h, &bv| *h = silu(*h) * bv);
    let d_out = hidden.t().dot(dy);
    let dh = dy.dot(&w_out.t());
    let mut da = dh.clone();
    let mut db = dh;
    Zip::from(&mut da)
        .and(&mut db)
        .and(&a)
        .and(&b)
        .for_each(|da, db, &av, &bv| {
            let g = *da;
            *da = g * bv * silu_grad(av);
            *db = g * silu(av);
        });
    let dx = da.dot(&w_gate.t()) + db.dot(&w_in.t());
    let d_gate = x.t().dot(&da);
    let d_in = x.t().dot(&db);
    Ok((dx, d_gate, d_in, d_out))
}

fn check_attention(q: &Mat, k: &Mat, v: &Mat, mask: &AttentionMask, heads: usize) -> Result<()> {
    if heads == 0 || q.ncols() % heads != 0 {
        return Err(Error::shape(format!(
            "width {} not divisible by {heads} heads",
            q.ncols()
        )));
    }
    if k.ncols() != q.ncols() || v.ncols() != q.ncols() || k.nrows() != v.nrows() {
        return Err(Error::shape(format!(
            "attention q {:?}, k {:?}, v {:?} inconsistent",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if mask.dim() != (q.nrows(), k.nrows()) {
        return Err(Error::shape(format!(
            "mask {:?} does not match attention {}x{}",
            mask.dim(),
            q.nrows(),
            k.nrows()
        )));
    }
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::invalid(format!("attention mask row {row} forbids every column")));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention over already-projected inputs.
pub fn masked_mha(q: &Mat, k: &Mat, v: &Mat, mask: &AttentionMask, heads: usize) -> Result<Mat> {
    masked_mha_forward(q, k, v, mask, heads).map(|(out, _)| out)
}

/// Same as [`masked_mha`], also returning the per-head attention weights.
///
/// Forbidden columns get a weight of exactly zero; the softmax max-shift is
/// taken over allowed columns only.
pub fn masked_mha_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(Mat, Vec<Mat>)> {
    check_attention(q, k, v, mask, heads)?;
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t());
        let mut p = Array2::zeros(scores.dim());
        for i in 0..scores.nrows() {
            let mut max = f64::NEG_INFINITY;
            for j in 0..scores.ncols() {
                if mask.allows(i, j) {
                    max = max.max(scores[[i, j]] * scale);
                }
            }
            let mut z = 0.0;
            for j in 0..scores.ncols() {
                if mask.allows(i, j) {
                    let e = (scores[[i, j]] * scale - max).exp();
                    p[[i, j]] = e;
                    z += e;
                }
            }
            p.row_mut(i).mapv_inplace(|e| e / z);
        }
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)` given the weights produced by [`masked_mha_forward`].
pub fn masked_mha_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    probs: &[Mat],
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let heads = probs.len();
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let do_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&do_h));
        let dp = do_h.dot(&v.slice(cols).t());
        let mut ds = p * &dp;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut())
            .and(p.rows())
            .and(&row_dot)
            .for_each(|mut dsr, pr, &rd| {
                Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d -= pv * rd);
            });
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Summed cross-entropy over rows where `active` is set.
///
/// Returns `(loss_sum, active_count, dloss_sum/dlogits)`; inactive rows get
/// an all-zero gradient.
pub fn cross_entropy_rows(logits: &Mat, targets: &[usize], active: &[bool]) -> Result<(f64, usize, Mat)> {
    if targets.len() != logits.nrows() || active.len() != logits.nrows() {
        return Err(Error::shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            active.len()
        )));
    }
    let vocab = logits.ncols();
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    let mut count = 0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !active[i] {
            continue;
        }
        let t = targets[i];
        if t >= vocab {
            return Err(Error::invalid(format!("target {t} outside vocabulary of {vocab}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let log_z = z.ln() + max;
        total += log_z - row[t];
        count += 1;
        let mut g = grad.row_mut(i);
        for j in 0..vocab {
            g[j] = (row[j] - log_z).exp();
        }
        g[t] -= 1.0;
    }
    Ok((total, count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_causal_mask, AttentionMask};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rms_norm_hand_values() {
        let y = rms_norm(&array![[3.0, 4.0]], &array![[1.0, 1.0]], 0.0).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((y[[0, 0]] - 3.0 / rms).abs() < 1e-12);
        assert!((y[[0, 1]] - 4.0 / rms).abs() < 1e-12);
        assert!((y[[0, 0]] - 0.84853).abs() < 1e-5);
        assert!((y[[0, 1]] - 1.13137).abs() < 1e-5);

        let z = rms_norm(&array![[0.0, 0.0]], &array![[1.0, 1.0]], 1e-6).unwrap();
        assert_eq!(z, array![[0.0, 0.0]]);
    }

    #[test]
    fn rms_norm_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 5, &mut rng);
        let g = random(1, 5, &mut rng);
        let a = rms_norm(&x, &g, 0.0).unwrap();
        let b = rms_norm(&(&x * 7.5), &g, 0.0).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_rejects_gain_mismatch() {
        assert!(rms_norm(&array![[1.0, 2.0]], &array![[1.0, 1.0, 1.0]], 1e-6).is_err());
    }

    #[test]
    fn swiglu_hand_values() {
        let one = array![[1.0]];
        let y = swiglu_ffn(&one, &one, &one, &one).unwrap();
        assert!((y[[0, 0]] - 0.7310585786300049).abs() < 1e-12);
        assert!((y[[0, 0]] - 0.73106).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (wg, wi, wo) = (random(4, 6, &mut rng), random(4, 6, &mut rng), random(6, 4, &mut rng));
        let y0 = swiglu_ffn(&Array2::zeros((2, 4)), &wg, &wi, &wo).unwrap();
        assert!(y0.iter().all(|&v| v == 0.0));
        assert!(swiglu_ffn(&Array2::zeros((2, 3)), &wg, &wi, &wo).is_err());
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(1, 8, &mut rng), random(1, 8, &mut rng), random(1, 8, &mut rng));
        let out = masked_mha(&q, &k, &v, &AttentionMask::all_allow(1, 1), 2).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_weights_sum_to_one_and_forbidden_get_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random(5, 8, &mut rng), random(5, 8, &mut rng), random(5, 8, &mut rng));
        let mask = build_causal_mask(5).unwrap();
        let (_, probs) = masked_mha_forward(&q, &k, &v, &mask, 4).unwrap();
        for p in &probs {
            for i in 0..5 {
                let sum: f64 = p.row(i).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in (i + 1)..5 {
                    assert_eq!(p[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn forbidden_columns_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, mut k, mut v) = (random(3, 4, &mut rng), random(3, 4, &mut rng), random(3, 4, &mut rng));
        let mask = build_causal_mask(3).unwrap();
        let before = masked_mha(&q, &k, &v, &mask, 2).unwrap();
        k.row_mut(2).mapv_inplace(|x| x + 3.0);
        v.row_mut(2).mapv_inplace(|x| x * -5.0);
        let after = masked_mha(&q, &k, &v, &mask, 2).unwrap();
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }

    #[test]
    fn attention_rejects_empty_rows_and_bad_shapes() {
        let m = Array2::zeros((2, 4));
        let mut mask = AttentionMask::all_allow(2, 2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert!(masked_mha(&m, &m, &m, &mask, 2).is_err());
        assert!(masked_mha(&m, &m, &m, &AttentionMask::all_allow(2, 2), 3).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = Array2::zeros((2, 10));
        let (sum, n, _) = cross_entropy_rows(&logits, &[3, 7], &[true, true]).unwrap();
        assert_eq!(n, 2);
        assert!((sum / 2.0 - 10f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_rows(&logits, &[3, 10], &[true, true]).is_err());
    }
}
