//! Prefix/causal attention masks, prefix-length sampling and shift-left
//! target construction.

use ndarray::Array2;
use rand::Rng;

use crate::nnprim::Mat;
use crate::patchify::{normalize_patch_targets, PatchSequence, PATCH_NORM_EPS};
use crate::{Error, Result};

/// `allows(i, j)` means query position `i` may attend to key position `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    allow: Array2<bool>,
}

impl AttentionMask {
    pub fn all_allow(rows: usize, cols: usize) -> Self {
        Self {
            allow: Array2::from_elem((rows, cols), true),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            allow: Array2::from_shape_fn((rows, cols), |(i, j)| f(i, j)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.allow.dim()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[[i, j]]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allow[[i, j]] = allowed;
    }

    pub fn first_empty_row(&self) -> Option<usize> {
        self.allow.rows().into_iter().position(|r| !r.iter().any(|&a| a))
    }

    /// Forbids attending to key columns whose `valid` flag is false, except on
    /// the diagonal so every row keeps at least one allowed entry.
    pub fn forbid_invalid_columns(&mut self, valid: &[bool]) -> Result<()> {
        if valid.len() != self.allow.ncols() {
            return Err(Error::shape(format!(
                "{} validity flags for a mask with {} columns",
                valid.len(),
                self.allow.ncols()
            )));
        }
        for ((i, j), a) in self.allow.indexed_iter_mut() {
            if !valid[j] && i != j {
                *a = false;
            }
        }
        Ok(())
    }

    /// Allowed column indices per row, for inspection and tests.
    pub fn allowed_sets(&self) -> Vec<Vec<usize>> {
        self.allow
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect())
            .collect()
    }
}

/// Draws the prefix length `M ~ U{1, ..., I-1}`.
pub fn sample_prefix_len(num_patches: usize, rng: &mut impl Rng) -> Result<usize> {
    if num_patches < 2 {
        return Err(Error::invalid(format!(
            "prefix sampling needs at least 2 patches, got {num_patches}"
        )));
    }
    Ok(rng.random_range(1..num_patches))
}

/// Prefix mask over `len` positions: the first `prefix` positions see each
/// other bidirectionally, later positions see the prefix plus their causal
/// past. `prefix == len` gives the all-allow inference mask.
pub fn build_prefix_mask(len: usize, prefix: usize) -> Result<AttentionMask> {
    if prefix < 1 || prefix > len {
        return Err(Error::invalid(format!(
            "prefix length {prefix} outside 1..={len}"
        )));
    }
    Ok(AttentionMask::from_fn(len, len, |i, j| j < prefix || j <= i))
}

pub fn build_causal_mask(len: usize) -> Result<AttentionMask> {
    if len < 1 {
        return Err(Error::invalid("causal mask needs at least one position"));
    }
    Ok(AttentionMask::from_fn(len, len, |i, j| j <= i))
}

/// Shifted regression and caption targets with their loss masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPack {
    /// Row `i` holds the normalized patch `i + 1`; the last row is zero.
    pub pixel_targets: Mat,
    pub pixel_loss_mask: Vec<bool>,
    pub text_targets: Vec<usize>,
    pub text_loss_mask: Vec<bool>,
}

impl TargetPack {
    pub fn active_pixels(&self) -> usize {
        self.pixel_loss_mask.iter().filter(|&&a| a).count()
    }

    pub fn active_tokens(&self) -> usize {
        self.text_loss_mask.iter().filter(|&&a| a).count()
    }
}

/// Builds shift-left targets for one image/caption pair.
///
/// Output position `i` (0-based) regresses normalized patch `i + 1` and is
/// active only when that patch lies outside the prefix and is not padding.
/// Text position `t` predicts token `t + 1`; the final position predicts
/// `eot_id` unless its input already is end-of-text or padding.
pub fn make_targets(
    patches: &PatchSequence,
    tokens: &[usize],
    prefix: usize,
    pad_id: usize,
    eot_id: usize,
) -> Result<TargetPack> {
    let n = patches.len();
    if prefix < 1 || prefix + 1 > n {
        return Err(Error::invalid(format!(
            "prefix length {prefix} outside 1..={}",
            n.saturating_sub(1)
        )));
    }
    let normalized = normalize_patch_targets(patches, PATCH_NORM_EPS);
    let mut pixel_targets = Array2::zeros(normalized.dim());
    let mut pixel_loss_mask = vec![false; n];
    for i in 0..n - 1 {
        pixel_targets.row_mut(i).assign(&normalized.row(i + 1));
        pixel_loss_mask[i] = i + 1 >= prefix && patches.valid[i + 1];
    }

    let t_len = tokens.len();
    let mut text_targets = vec![pad_id; t_len];
    let mut text_loss_mask = vec![false; t_len];
    for t in 0..t_len {
        if tokens[t] == pad_id {
            continue;
        }
        let target = if t + 1 < t_len {
            tokens[t + 1]
        } else if tokens[t] == eot_id {
            pad_id
        } else {
            eot_id
        };
        text_targets[t] = target;
        text_loss_mask[t] = target != pad_id;
    }

    Ok(TargetPack {
        pixel_targets,
        pixel_loss_mask,
        text_targets,
        text_loss_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchify::patchify;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PAD: usize = 256;
    const EOT: usize = 257;

    #[test]
    fn prefix_mask_enumerated_rows() {
        let sets = |l, m| build_prefix_mask(l, m).unwrap().allowed_sets();
        assert_eq!(sets(3, 2), vec![vec![0, 1], vec![0, 1], vec![0, 1, 2]]);
        assert_eq!(sets(3, 1), vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
        assert_eq!(build_prefix_mask(3, 3).unwrap(), AttentionMask::all_allow(3, 3));
        assert!(build_prefix_mask(3, 0).is_err());
        assert!(build_prefix_mask(3, 4).is_err());
    }

    #[test]
    fn causal_mask_is_prefix_one() {
        assert_eq!(build_causal_mask(1).unwrap().allowed_sets(), vec![vec![0]]);
        for l in 1..7 {
            assert_eq!(build_causal_mask(l).unwrap(), build_prefix_mask(l, 1).unwrap());
        }
        assert!(build_causal_mask(0).is_err());
    }

    #[test]
    fn prefix_len_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_prefix_len(2, &mut rng).unwrap(), 1);
        }
        assert!(sample_prefix_len(1, &mut rng).is_err());
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_prefix_len(9, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    fn grid_patches(rows: usize, cols: usize) -> PatchSequence {
        let img = Array3::from_shape_fn((rows * 2, cols * 2, 1), |(y, x, _)| (y * 31 + x * 7) as f64 % 5.0);
        patchify(&img, 2).unwrap()
    }

    #[test]
    fn pixel_targets_shift_left_outside_prefix() {
        let seq = grid_patches(2, 2);
        let pack = make_targets(&seq, &[], 2, PAD, EOT).unwrap();
        assert_eq!(pack.pixel_loss_mask, vec![false, true, true, false]);
        let norm = normalize_patch_targets(&seq, PATCH_NORM_EPS);
        assert_eq!(pack.pixel_targets.row(1), norm.row(2));
        assert_eq!(pack.pixel_targets.row(2), norm.row(3));

        let two = grid_patches(1, 2);
        let pack = make_targets(&two, &[], 1, PAD, EOT).unwrap();
        assert_eq!(pack.pixel_loss_mask, vec![true, false]);
        assert_eq!(pack.active_pixels(), 1);
        assert!(make_targets(&two, &[], 2, PAD, EOT).is_err());
    }

    #[test]
    fn text_targets_append_end_of_text() {
        let seq = grid_patches(1, 2);
        let pack = make_targets(&seq, &[10, 11, 12], 1, PAD, EOT).unwrap();
        assert_eq!(pack.text_targets, vec![11, 12, EOT]);
        assert_eq!(pack.text_loss_mask, vec![true, true, true]);

        let pack = make_targets(&seq, &[10, 11, EOT, PAD, PAD], 1, PAD, EOT).unwrap();
        assert_eq!(pack.text_loss_mask, vec![true, true, false, false, false]);
        assert_eq!(&pack.text_targets[..2], &[11, EOT]);
    }

    #[test]
    fn padded_patches_never_targets() {
        let mut seq = grid_patches(2, 3);
        seq.valid[4] = false;
        seq.valid[5] = false;
        let pack = make_targets(&seq, &[], 1, PAD, EOT).unwrap();
        assert_eq!(pack.pixel_loss_mask, vec![true, true, true, false, false, false]);
    }
}
