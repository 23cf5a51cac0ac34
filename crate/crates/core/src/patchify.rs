//! Image to patch-sequence conversion and per-patch target normalization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::nnprim::Mat;
use crate::{Error, Result};

/// `[height, width, channels]` image with values in `[0, 1]`.
pub type Image = Array3<f64>;

pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Patches in raster (row-major) order over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `[rows * cols, p * p * channels]`, each row flattened as (y, x, channel).
    pub patches: Mat,
    pub grid: (usize, usize),
    /// False for patches made entirely of zero padding.
    pub valid: Vec<bool>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.ncols()
    }
}

pub fn patchify(image: &Image, p: usize) -> Result<PatchSequence> {
    let (h, w, c) = image.dim();
    if p == 0 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (rows, cols) = (h / p, w / p);
    let mut patches = Array2::zeros((rows * cols, p * p * c));
    for gr in 0..rows {
        for gc in 0..cols {
            let mut out = patches.row_mut(gr * cols + gc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out[k] = image[[gr * p + y, gc * p + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        grid: (rows, cols),
        valid: vec![true; rows * cols],
    })
}

/// Inverse of [`patchify`]; padding patches come back as zeros.
pub fn unpatchify(seq: &PatchSequence, p: usize) -> Result<Image> {
    let (rows, cols) = seq.grid;
    let d = seq.patch_dim();
    if p == 0 || rows * cols != seq.len() || seq.valid.len() != seq.len() || d % (p * p) != 0 {
        return Err(Error::shape(format!(
            "grid {rows}x{cols} with {} patches of width {d} inconsistent with p={p}",
            seq.len()
        )));
    }
    let c = d / (p * p);
    let mut img = Array3::zeros((rows * p, cols * p, c));
    for gr in 0..rows {
        for gc in 0..cols {
            let i = gr * cols + gc;
            if !seq.valid[i] {
                continue;
            }
            let row = seq.patches.row(i);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        img[[gr * p + y, gc * p + x, ch]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Per-patch `(x - mean) / sqrt(var + eps)` with population variance.
pub fn normalize_patch_targets(seq: &PatchSequence, eps: f64) -> Mat {
    let mut out = seq.patches.clone();
    let d = seq.patch_dim() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let denom = (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary PPM (3 channels) or PGM (1 channel).
pub fn write_pnm(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape(format!("cannot write {c}-channel image as PNM"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&v| to_byte(v)));
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Dumps the patch grid with a one-pixel separator between patches; padding
/// patches are drawn at mid-gray.
pub fn write_patch_grid(seq: &PatchSequence, p: usize, path: &Path) -> Result<()> {
    let (rows, cols) = seq.grid;
    let c = seq.patch_dim() / (p * p).max(1);
    let mut canvas = Array3::from_elem((rows * (p + 1) + 1, cols * (p + 1) + 1, c), 1.0);
    let img = unpatchify(seq, p)?;
    for gr in 0..rows {
        for gc in 0..cols {
            let valid = seq.valid[gr * cols + gc];
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        canvas[[gr * (p + 1) + 1 + y, gc * (p + 1) + 1 + x, ch]] = if valid {
                            img[[gr * p + y, gc * p + x, ch]]
                        } else {
                            0.5
                        };
                    }
                }
            }
        }
    }
    write_pnm(&canvas, path)
}
