//! Synthetic captioned scenes, the byte tokenizer, weighted source mixtures
//! and native-resolution batch planning.

use std::path::Path;

use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::patchify::{patchify, write_pnm, Image, PatchSequence};
use crate::{Error, Result};

pub const PAD_ID: usize = 256;
pub const EOT_ID: usize = 257;
pub const UNK_ID: usize = 258;
pub const TOKENIZER_VOCAB: usize = 259;

/// Byte-level tokenization with an end-of-text marker, truncated so the
/// result never exceeds `max_len` tokens (the marker is kept).
pub fn tokenize(text: &str, max_len: usize) -> Vec<usize> {
    if max_len == 0 {
        return Vec::new();
    }
    let mut ids: Vec<usize> = text.bytes().take(max_len - 1).map(usize::from).collect();
    ids.push(EOT_ID);
    ids
}

/// Inverse of [`tokenize`]: stops at end-of-text, skips padding and renders
/// unknown ids as U+FFFD.
pub fn detokenize(tokens: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            EOT_ID => break,
            PAD_ID => {}
            b if b < 256 => bytes.push(b as u8),
            _ => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Whether pixel `(y, x)` of an `s`-by-`s` box is covered.
    fn covers(self, y: usize, x: usize, s: usize) -> bool {
        let (fy, fx, half) = (y as f64 + 0.5, x as f64 + 0.5, s as f64 / 2.0);
        match self {
            Shape::Square => true,
            Shape::Circle => (fy - half).powi(2) + (fx - half).powi(2) <= half * half,
            Shape::Triangle => (fx - half).abs() <= fy / 2.0,
            Shape::Cross => {
                let band = (s as f64 / 6.0).max(0.5);
                (fy - half).abs() <= band || (fx - half).abs() <= band
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.1, 0.1],
            Color::Green => [0.1, 0.9, 0.2],
            Color::Blue => [0.15, 0.25, 1.0],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStyle {
    /// "red square and blue circle"
    AltText,
    /// "red square left of blue circle"
    #[default]
    Relational,
}

/// Scene vocabulary and canvas: a `grid_rows x grid_cols` lattice of
/// `cell`-pixel cells, each holding at most one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub cell: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub style: CaptionStyle,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            cell: 8,
            grid_rows: 2,
            grid_cols: 2,
            min_shapes: 1,
            max_shapes: 2,
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            style: CaptionStyle::Relational,
        }
    }
}

impl SceneSpec {
    pub fn canvas(&self) -> (usize, usize) {
        (self.grid_rows * self.cell, self.grid_cols * self.cell)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_rows * self.grid_cols;
        if self.cell < 4 {
            return Err(Error::invalid(format!("cell of {} px is too small to draw shapes", self.cell)));
        }
        if self.min_shapes < 1 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid(format!(
                "shape count range {}..={} is empty",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.max_shapes > cells {
            return Err(Error::invalid(format!(
                "canvas has {cells} cells, too small for {} shapes",
                self.max_shapes
            )));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::invalid("scene vocabulary is empty"));
        }
        Ok(())
    }
}

/// One placed shape; `cell` indexes the lattice in raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Placement {
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
}

pub fn sample_layout(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Placement> {
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut cells = sample(rng, spec.grid_rows * spec.grid_cols, count).into_vec();
    cells.sort_unstable();
    cells
        .into_iter()
        .map(|cell| Placement {
            cell,
            shape: spec.shapes[rng.random_range(0..spec.shapes.len())],
            color: spec.colors[rng.random_range(0..spec.colors.len())],
        })
        .collect()
}

/// Canonical caption of a raster-ordered layout.
pub fn describe(layout: &[Placement], grid_cols: usize, style: CaptionStyle) -> String {
    let mut out = String::new();
    for (i, p) in layout.iter().enumerate() {
        if i > 0 {
            let prev = layout[i - 1];
            let joiner = match style {
                CaptionStyle::AltText => " and ",
                CaptionStyle::Relational if prev.cell / grid_cols == p.cell / grid_cols => " left of ",
                CaptionStyle::Relational => " above ",
            };
            out.push_str(joiner);
        }
        out.push_str(p.color.name());
        out.push(' ');
        out.push_str(p.shape.name());
    }
    out
}

pub fn render(layout: &[Placement], spec: &SceneSpec) -> Image {
    let (h, w) = spec.canvas();
    let mut img = Array3::zeros((h, w, 3));
    let margin = (spec.cell / 8).max(1);
    let inner = spec.cell - 2 * margin;
    for p in layout {
        let (r, c) = (p.cell / spec.grid_cols, p.cell % spec.grid_cols);
        let (y0, x0) = (r * spec.cell + margin, c * spec.cell + margin);
        let rgb = p.color.rgb();
        for y in 0..inner {
            for x in 0..inner {
                if p.shape.covers(y, x, inner) {
                    for (ch, v) in rgb.iter().enumerate() {
                        img[[y0 + y, x0 + x, ch]] = *v;
                    }
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub image: Image,
    pub caption: String,
    pub source_id: usize,
}

/// Renders the scene fully determined by `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<CaptionedImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = sample_layout(spec, &mut rng);
    Ok(CaptionedImage {
        image: render(&layout, spec),
        caption: describe(&layout, spec.grid_cols, spec.style),
        source_id: 0,
    })
}

/// Single-shape scene whose class label is the index of its shape in
/// `classes`; color and cell are random.
pub fn generate_labeled(seed: u64, classes: &[Shape], image_size: usize, cell: usize) -> Result<(Image, usize)> {
    if classes.is_empty() {
        return Err(Error::invalid("no classes to sample from"));
    }
    let grid = image_size / cell;
    let spec = SceneSpec {
        cell,
        grid_rows: grid,
        grid_cols: grid,
        min_shapes: 1,
        max_shapes: 1,
        shapes: classes.to_vec(),
        ..SceneSpec::default()
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = rng.random_range(0..classes.len());
    let layout = vec![Placement {
        cell: rng.random_range(0..grid * grid),
        shape: classes[label],
        color: spec.colors[rng.random_range(0..spec.colors.len())],
    }];
    Ok((render(&layout, &spec), label))
}

/// A weighted data source; its scene fields parameterize the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSource {
    pub name: String,
    pub prob: f64,
    #[serde(default)]
    pub style: CaptionStyle,
    #[serde(default = "one")]
    pub min_shapes: usize,
    #[serde(default = "two")]
    pub max_shapes: usize,
    #[serde(default = "two")]
    pub grid_rows: usize,
    #[serde(default = "two")]
    pub grid_cols: usize,
    #[serde(default = "eight")]
    pub cell: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn eight() -> usize {
    8
}

impl MixtureSource {
    pub fn synthetic(name: &str, prob: f64) -> Self {
        Self {
            name: name.to_string(),
            prob,
            style: CaptionStyle::Relational,
            min_shapes: 1,
            max_shapes: 2,
            grid_rows: 2,
            grid_cols: 2,
            cell: 8,
        }
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            cell: self.cell,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            style: self.style,
            ..SceneSpec::default()
        }
    }
}

/// Desk-scale stand-ins for the five pre-training sources and their
/// sampling probabilities. Alt-text sources use terse captions.
pub fn paper_mixture() -> Vec<MixtureSource> {
    let src = |name: &str, prob, style| MixtureSource {
        style,
        ..MixtureSource::synthetic(name, prob)
    };
    vec![
        src("dfn_alt_text", 0.30, CaptionStyle::AltText),
        src("dfn_synthetic", 0.30, CaptionStyle::Relational),
        src("coyo_alt_text", 0.09, CaptionStyle::AltText),
        src("hqitp_alt_text", 0.28, CaptionStyle::AltText),
        src("hqitp_synthetic", 0.03, CaptionStyle::Relational),
    ]
}

pub fn validate_sources(sources: &[MixtureSource]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::invalid("mixture has no sources"));
    }
    for s in sources {
        if !(0.0..=1.0).contains(&s.prob) {
            return Err(Error::invalid(format!("source `{}` probability {} outside [0, 1]", s.name, s.prob)));
        }
        s.scene()
            .validate()
            .map_err(|e| Error::invalid(format!("source `{}`: {e}", s.name)))?;
    }
    let total: f64 = sources.iter().map(|s| s.prob).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("source probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Categorical draw over source probabilities.
pub fn sample_source(sources: &[MixtureSource], rng: &mut impl Rng) -> Result<usize> {
    validate_sources(sources)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, s) in sources.iter().enumerate() {
        acc += s.prob;
        if u < acc {
            return Ok(i);
        }
    }
    // u landed in the rounding gap below 1.0; take the last source with mass.
    Ok(sources.iter().rposition(|s| s.prob > 0.0).unwrap_or(0))
}

/// Draws a source, then a scene from it. `seed` fixes both.
pub fn generate_pair(seed: u64, sources: &[MixtureSource]) -> Result<CaptionedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_id = sample_source(sources, &mut rng)?;
    let mut pair = generate_scene(rng.random(), &sources[source_id].scene())?;
    pair.source_id = source_id;
    Ok(pair)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema_version: u32,
    source: Vec<MixtureSource>,
}

/// Reads a dataset manifest: `schema_version` plus `[[source]]` tables.
pub fn load_manifest(path: &Path) -> Result<Vec<MixtureSource>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text).map_err(|e| Error::ConfigParse {
        path: path.to_path_buf(),
        line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    if file.schema_version != crate::config::SCHEMA_VERSION {
        return Err(Error::ConfigInvalid(vec![format!(
            "manifest schema_version {} unsupported",
            file.schema_version
        )]));
    }
    validate_sources(&file.source)?;
    Ok(file.source)
}

pub fn manifest_to_toml(sources: &[MixtureSource]) -> String {
    toml::to_string(&ManifestFile {
        schema_version: crate::config::SCHEMA_VERSION,
        source: sources.to_vec(),
    })
    .expect("manifest serializes")
}

/// Writes `NNNN.ppm` images with `NNNN.txt` caption sidecars.
pub fn dump_pairs(pairs: &[CaptionedImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, pair) in pairs.iter().enumerate() {
        write_pnm(&pair.image, &dir.join(format!("{i:04}.ppm")))?;
        let txt = dir.join(format!("{i:04}.txt"));
        std::fs::write(&txt, format!("{}\n", pair.caption)).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(())
}

/// Standard normal restricted to `[-1, 1]` by rejection.
pub fn sample_truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if (-1.0..=1.0).contains(&z) {
            return z;
        }
    }
}

/// Patch area and mini-batch size for one native-resolution step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchPlan {
    pub z: f64,
    pub n: u32,
    /// Patches per image, `2^n`.
    pub area: usize,
    /// Images in the mini-batch.
    pub batch_size: usize,
    /// Patches per mini-batch; always `area * batch_size`.
    pub budget: usize,
}

pub fn validate_budget(budget: usize, n_range: (u32, u32)) -> Result<()> {
    let (lo, hi) = n_range;
    if lo > hi || hi >= usize::BITS {
        return Err(Error::invalid(format!("exponent range [{lo}, {hi}] is invalid")));
    }
    if !budget.is_power_of_two() || budget < (1usize << hi) {
        return Err(Error::invalid(format!(
            "patch budget {budget} must be a power of two ≥ 2^{hi}"
        )));
    }
    Ok(())
}

/// Maps `z ∈ [-1, 1]` linearly onto the exponent range, rounds half up and
/// sizes the batch so `area * batch_size == budget`.
pub fn plan_from_z(budget: usize, z: f64, n_range: (u32, u32)) -> Result<BatchPlan> {
    validate_budget(budget, n_range)?;
    if !(-1.0..=1.0).contains(&z) {
        return Err(Error::invalid(format!("z = {z} outside [-1, 1]")));
    }
    let (lo, hi) = (f64::from(n_range.0), f64::from(n_range.1));
    let n_real = (lo + hi) / 2.0 + (hi - lo) / 2.0 * z;
    let n = ((n_real + 0.5).floor() as u32).clamp(n_range.0, n_range.1);
    let area = 1usize << n;
    if budget % area != 0 {
        return Err(Error::invalid(format!("budget {budget} not divisible by area {area}")));
    }
    Ok(BatchPlan {
        z,
        n,
        area,
        batch_size: budget / area,
        budget,
    })
}

pub fn plan_native_batch(budget: usize, rng: &mut impl Rng, n_range: (u32, u32)) -> Result<BatchPlan> {
    validate_budget(budget, n_range)?;
    plan_from_z(budget, sample_truncated_normal(rng), n_range)
}

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    let coord = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, sy, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, sx, w);
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Size of an `h x w` image scaled to fit a `rows x cols` patch box.
fn fitted_size(h: usize, w: usize, rows: usize, cols: usize, p: usize) -> (usize, usize) {
    let scale = f64::min((rows * p) as f64 / h as f64, (cols * p) as f64 / w as f64);
    let fh = ((h as f64 * scale).round() as usize).clamp(1, rows * p);
    let fw = ((w as f64 * scale).round() as usize).clamp(1, cols * p);
    (fh, fw)
}

/// Grid with `rows * cols == area` that wastes the fewest pixels on padding
/// for an `h x w` image; ties go to the closer aspect ratio, then fewer rows.
pub fn choose_grid(h: usize, w: usize, area: usize, p: usize) -> (usize, usize) {
    let aspect = (w as f64 / h as f64).ln();
    (1..=area)
        .filter(|r| area % r == 0)
        .map(|rows| {
            let cols = area / rows;
            let (fh, fw) = fitted_size(h, w, rows, cols, p);
            let padding = area * p * p - fh * fw;
            let skew = ((cols as f64 / rows as f64).ln() - aspect).abs();
            (padding, skew, rows, cols)
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)))
        .map(|(_, _, r, c)| (r, c))
        .expect("area ≥ 1 has a factorization")
}

/// Image resized into a patch grid of exactly `area` patches, zero padded at
/// the bottom/right, with patches that hold no image pixels marked invalid.
pub fn fit_image_to_area(img: &Image, area: usize, p: usize) -> Result<PatchSequence> {
    let (h, w, _) = img.dim();
    if area == 0 || p == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("cannot fit {h}x{w} image into {area} patches of {p}px")));
    }
    let (rows, cols) = choose_grid(h, w, area, p);
    let (fh, fw) = fitted_size(h, w, rows, cols, p);
    let resized = resize_bilinear(img, fh, fw);
    let mut canvas = Array3::zeros((rows * p, cols * p, img.dim().2));
    canvas.slice_mut(ndarray::s![..fh, ..fw, ..]).assign(&resized);
    let mut seq = patchify(&canvas, p)?;
    for r in 0..rows {
        for c in 0..cols {
            seq.valid[r * cols + c] = r * p < fh && c * p < fw;
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use rand::Rng;

    #[test]
    fn tokenizer_bytes_and_truncation() {
        assert_eq!(tokenize("ab", 77), vec![97, 98, EOT_ID]);
        let long = "x".repeat(100);
        let ids = tokenize(&long, 77);
        assert_eq!(ids.len(), 77);
        assert_eq!(*ids.last().unwrap(), EOT_ID);
        assert_eq!(detokenize(&tokenize("red square", 77)), "red square");
        assert_eq!(detokenize(&[104, PAD_ID, 105, EOT_ID, 106]), "hi");
        assert_eq!(detokenize(&[UNK_ID]), "\u{FFFD}");
    }

    #[test]
    fn single_shape_scene_caption_names_shape_and_color() {
        let spec = SceneSpec {
            max_shapes: 1,
            ..SceneSpec::default()
        };
        let pair = generate_scene(0, &spec).unwrap();
        let words: Vec<&str> = pair.caption.split(' ').collect();
        assert_eq!(words.len(), 2);
        assert!(Color::ALL.iter().any(|c| c.name() == words[0]));
        assert!(Shape::from_name(words[1]).is_some());
        assert!(pair.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(pair.image.iter().any(|&v| v > 0.0));
        assert_eq!(generate_scene(0, &spec).unwrap(), pair);
    }

    #[test]
    fn too_many_shapes_for_canvas() {
        let spec = SceneSpec {
            max_shapes: 5,
            ..SceneSpec::default()
        };
        assert!(generate_scene(1, &spec).is_err());
    }

    #[test]
    fn relational_captions_follow_raster_order() {
        let layout = [
            Placement { cell: 0, shape: Shape::Square, color: Color::Red },
            Placement { cell: 1, shape: Shape::Circle, color: Color::Blue },
            Placement { cell: 3, shape: Shape::Cross, color: Color::Green },
        ];
        assert_eq!(
            describe(&layout, 2, CaptionStyle::Relational),
            "red square left of blue circle above green cross"
        );
        assert_eq!(
            describe(&layout[..2], 2, CaptionStyle::AltText),
            "red square and blue circle"
        );
    }

    #[test]
    fn caption_collision_rate_matches_vocabulary() {
        // One shape, 4 shapes x 4 colors, position not captioned: P = 1/16.
        let spec = SceneSpec {
            max_shapes: 1,
            ..SceneSpec::default()
        };
        let n = 20_000u64;
        let same = (0..n)
            .filter(|i| {
                generate_scene(2 * i, &spec).unwrap().caption == generate_scene(2 * i + 1, &spec).unwrap().caption
            })
            .count() as f64;
        let p = 1.0 / 16.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((same / n as f64 - p).abs() < 4.0 * sd, "rate {}", same / n as f64);
    }

    #[test]
    fn mixture_sampler_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = vec![MixtureSource::synthetic("only", 1.0)];
        assert!((0..1000).all(|_| sample_source(&one, &mut rng).unwrap() == 0));
        let bad = vec![MixtureSource::synthetic("a", 0.5), MixtureSource::synthetic("b", 0.4)];
        assert!(sample_source(&bad, &mut rng).is_err());
        let draws = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_source(&paper_mixture(), &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draws(5), draws(5));
    }

    #[test]
    fn mixture_chi_square_at_desk_scale() {
        let sources = paper_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 50_000;
        let mut counts = vec![0usize; sources.len()];
        for _ in 0..n {
            counts[sample_source(&sources, &mut rng).unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&sources)
            .map(|(&c, s)| {
                let e = s.prob * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 4 degrees of freedom, 0.999 quantile.
        assert!(chi2 < 18.47, "chi2 = {chi2}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix.toml");
        std::fs::write(&path, manifest_to_toml(&paper_mixture())).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), paper_mixture());
        std::fs::write(&path, "schema_version = 1\n[[source]]\nname = \"a\"\nprob = 0.5\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn planner_endpoint_arithmetic() {
        let c = 1 << 14;
        let top = plan_from_z(c, 1.0, (7, 12)).unwrap();
        assert_eq!((top.n, top.area, top.batch_size), (12, 4096, 4));
        let bottom = plan_from_z(c, -1.0, (7, 12)).unwrap();
        assert_eq!((bottom.n, bottom.area, bottom.batch_size), (7, 128, 128));
        let mid = plan_from_z(c, 0.0, (7, 12)).unwrap();
        assert_eq!((mid.n, mid.area), (10, 1024));
        assert!(plan_from_z(3000, 0.0, (7, 12)).is_err());
        assert!(plan_from_z(1 << 11, 0.0, (7, 12)).is_err());
    }

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..20_000).map(|_| sample_truncated_normal(&mut rng)).collect();
        assert!(draws.iter().all(|z| (-1.0..=1.0).contains(z)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn grid_choice_minimizes_padding() {
        // Square image, A=4.
        assert_eq!(choose_grid(8, 8, 4, 4), (2, 2));
        // 2:1 (wide) image, A=8: 2x4 needs no padding; 1x8 and 4x2 pad 6p^2.
        assert_eq!(choose_grid(8, 16, 8, 4), (2, 4));
        let padding = |rows: usize, cols: usize| {
            let (fh, fw) = fitted_size(8, 16, rows, cols, 4);
            8 * 16 - fh * fw
        };
        assert_eq!(padding(2, 4), 0);
        assert_eq!(padding(1, 8), 6 * 16);
        assert_eq!(padding(4, 2), 6 * 16);
    }

    #[test]
    fn fitted_square_image_has_no_padding() {
        let img = Array3::from_elem((16, 16, 3), 0.5);
        let seq = fit_image_to_area(&img, 4, 4).unwrap();
        assert_eq!(seq.grid, (2, 2));
        assert!(seq.valid.iter().all(|&v| v));
        assert!(seq.patches.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array3::from_shape_simple_fn((5, 7, 2), || rng.random::<f64>());
        assert_eq!(resize_bilinear(&img, 5, 7), img);
        let flat = Array3::from_elem((4, 4, 1), 0.25);
        assert!(resize_bilinear(&flat, 9, 3).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn fit_keeps_area_and_valid_count(h in 4usize..40, w in 4usize..40, n in 0u32..6) {
            let p = 4;
            let area = 1usize << n;
            let img = Array3::from_elem((h, w, 3), 1.0);
            let seq = fit_image_to_area(&img, area, p).unwrap();
            prop_assert_eq!(seq.len(), area);
            prop_assert_eq!(seq.grid.0 * seq.grid.1, area);
            let (fh, fw) = fitted_size(h, w, seq.grid.0, seq.grid.1, p);
            let valid = seq.valid.iter().filter(|&&v| v).count();
            prop_assert!(valid >= (fh * fw).div_ceil(p * p));
            // Aspect ratio preserved to within one pixel of rounding.
            let ratio_err = (fh as f64 * w as f64 - fw as f64 * h as f64).abs() / (h * w) as f64;
            prop_assert!(ratio_err <= (h + w) as f64 / (h * w) as f64 * 1.01 + 1e-9, "{} {}", fh, fw);
        }
    }

    #[test]
    fn source_frequencies_over_many_pairs() {
        let sources = paper_mixture();
        let mut freq: HashMap<usize, usize> = HashMap::new();
        for seed in 0..2000 {
            let pair = generate_pair(seed, &sources).unwrap();
            assert!(pair.caption.split(' ').count() >= 2);
            *freq.entry(pair.source_id).or_default() += 1;
        }
        assert!(freq[&0] > 450 && freq[&0] < 750);
    }
}
