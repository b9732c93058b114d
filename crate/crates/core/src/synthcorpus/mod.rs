//! Deterministic synthetic scene-text corpus, PGM/manifest persistence and
//! the resize rule.
//!
//! Words are rendered as groups of dark vertical glyph bars on a textured,
//! noisy background. Words on a line share their vertical extent, so
//! same-line neighbours produce space boxes.

mod manifest;
pub mod pgm;

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, save_manifest, CorpusManifest, ManifestEntry, WordRecord, MANIFEST_VERSION};

use crate::error::{Result, RtnError};
use crate::geom::BBox;
use crate::gridmath::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAnnotation {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl WordAnnotation {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        WordAnnotation {
            x0,
            y0,
            x1,
            y1,
            text: None,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x0, self.y0, self.x1, self.y1)
    }

    pub fn is_valid_within(&self, width: f64, height: f64) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height
    }

    pub fn scaled(&self, factor: f64) -> Self {
        WordAnnotation {
            x0: self.x0 * factor,
            y0: self.y0 * factor,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            text: self.text.clone(),
        }
    }

    /// Scales into a resized image; rounding the image extent can leave an
    /// edge up to half a pixel outside, so coordinates are clamped.
    pub fn scaled_into(&self, scaled: &Scaled) -> Self {
        let (h, w) = (scaled.extent.0 as f64, scaled.extent.1 as f64);
        let s = self.scaled(scaled.factor);
        WordAnnotation {
            x0: s.x0.clamp(0.0, w),
            y0: s.y0.clamp(0.0, h),
            x1: s.x1.clamp(0.0, w),
            y1: s.y1.clamp(0.0, h),
            text: s.text,
        }
    }
}

/// Inclusive integer range `lo..=hi`.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Image height in 32-pixel units.
    pub height_units: Span,
    /// Image width in 32-pixel units.
    pub width_units: Span,
    pub words: Span,
    pub word_height: Span,
    pub glyphs_per_word: Span,
    pub glyph_width: Span,
    /// Gap between bars of one word; kept below 8 px.
    pub intra_gap: Span,
    /// Lower bound of the gap between words; the upper bound is
    /// `2 * word_height - 2` so neighbours still form a space box.
    pub min_word_gap: usize,
    pub line_gap: Span,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height_units: (4, 6),
            width_units: (8, 12),
            words: (1, 8),
            word_height: (36, 56),
            glyphs_per_word: (2, 6),
            glyph_width: (3, 9),
            intra_gap: (2, 6),
            min_word_gap: 68,
            line_gap: (12, 32),
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let spans = [
            ("height_units", self.height_units),
            ("width_units", self.width_units),
            ("words", self.words),
            ("word_height", self.word_height),
            ("glyphs_per_word", self.glyphs_per_word),
            ("glyph_width", self.glyph_width),
            ("intra_gap", self.intra_gap),
            ("line_gap", self.line_gap),
        ];
        for (name, (lo, hi)) in spans {
            if lo == 0 || lo > hi {
                return Err(RtnError::Config(format!("{name}: invalid range {lo}..={hi}")));
            }
        }
        if self.intra_gap.1 >= 8 {
            return Err(RtnError::Config("intra_gap must stay below 8 px".into()));
        }
        if self.min_word_gap < 16 || self.min_word_gap + 2 > 2 * self.word_height.0 {
            return Err(RtnError::Config(format!(
                "min_word_gap {} must be at least 16 and below twice the minimum word height",
                self.min_word_gap
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(RtnError::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[1, 1, H, W]` intensities on the 8-bit lattice `k / 255`.
    pub image: Grid,
    pub words: Vec<WordAnnotation>,
    pub seed: u64,
}

impl SceneSample {
    pub fn extent(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[3])
    }
}

fn pick<R: Rng>(rng: &mut R, (lo, hi): Span) -> usize {
    rng.gen_range(lo..=hi)
}

fn background<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let base = rng.gen_range(0.72..0.92);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.04),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * (fx * x as f64 + fy * y as f64 + phase).sin())
                .sum();
            out.push(base + t);
        }
    }
    out
}

/// Renders one word starting at `x0` between rows `y0..y1`; returns its
/// right edge.
fn render_word<R: Rng>(rng: &mut R, cfg: &SceneConfig, pixels: &mut [f64], w: usize, x0: usize, y0: usize, y1: usize) -> usize {
    let ink = rng.gen_range(0.05..0.35);
    let glyphs = pick(rng, cfg.glyphs_per_word);
    let h = y1 - y0;
    let mut x = x0;
    for g in 0..glyphs {
        if g > 0 {
            x += pick(rng, cfg.intra_gap);
        }
        let gw = pick(rng, cfg.glyph_width);
        // first and last bars span the full height so the box is tight
        let (top, bottom) = if g == 0 || g + 1 == glyphs || rng.gen_bool(0.5) {
            (y0, y1)
        } else if rng.gen_bool(0.5) {
            (y0 + rng.gen_range(0..=h * 3 / 10), y1)
        } else {
            (y0, y1 - rng.gen_range(0..=h * 3 / 10))
        };
        for yy in top..bottom {
            for xx in x..x + gw {
                pixels[yy * w + xx] = ink;
            }
        }
        x += gw;
    }
    x
}

fn max_word_width(cfg: &SceneConfig) -> usize {
    cfg.glyphs_per_word.1 * cfg.glyph_width.1 + (cfg.glyphs_per_word.1 - 1) * cfg.intra_gap.1
}

/// Renders a scene; a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 32 * pick(&mut rng, cfg.height_units);
    let w = 32 * pick(&mut rng, cfg.width_units);
    let target = pick(&mut rng, cfg.words);
    let mut pixels = background(&mut rng, h, w);
    let margin = 8;
    let widest = max_word_width(cfg);

    let mut words = Vec::new();
    let mut y = margin + rng.gen_range(0..=8);
    'lines: while words.len() < target {
        let lh = pick(&mut rng, cfg.word_height);
        if y + lh + margin > h {
            break;
        }
        let mut x = margin + rng.gen_range(0..=16);
        let mut on_line = 0;
        while words.len() < target && x + widest + margin <= w {
            let x1 = render_word(&mut rng, cfg, &mut pixels, w, x, y, y + lh);
            words.push(WordAnnotation::new(x as f64, y as f64, x1 as f64, (y + lh) as f64));
            on_line += 1;
            x = x1 + rng.gen_range(cfg.min_word_gap..=2 * lh - 2);
        }
        if on_line == 0 {
            break 'lines;
        }
        y += lh + pick(&mut rng, cfg.line_gap);
    }

    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| RtnError::Config(e.to_string()))?;
        for p in &mut pixels {
            *p += normal.sample(&mut rng);
        }
    }
    for p in &mut pixels {
        *p = pgm::quantize(*p) as f64 / 255.0;
    }
    Ok(SceneSample {
        image: Grid::new(vec![1, 1, h, w], pixels)?,
        words,
        seed,
    })
}

/// Seed of the `index`-th scene of a corpus.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Writes `count` scenes as `img_NNNNN.pgm` plus `manifest.json` into `dir`.
pub fn generate_corpus(dir: &Path, count: usize, seed: u64, cfg: &SceneConfig) -> Result<CorpusManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| RtnError::io(dir, e))?;
    let entries = crate::par::map_range(count, |i| -> Result<ManifestEntry> {
        let sample = generate_scene(scene_seed(seed, i), cfg)?;
        let name = format!("img_{i:05}.pgm");
        pgm::write_grid(&dir.join(&name), &sample.image)?;
        let (h, w) = sample.extent();
        Ok(ManifestEntry {
            path: name,
            width: w,
            height: h,
            words: sample.words.iter().map(WordRecord::from).collect(),
        })
    });
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        entries: entries.into_iter().collect::<Result<_>>()?,
    };
    save_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleLimits {
    pub shortest: usize,
    pub longest: usize,
}

impl Default for ScaleLimits {
    fn default() -> Self {
        ScaleLimits {
            shortest: 600,
            longest: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaled {
    pub factor: f64,
    pub extent: (usize, usize),
}

/// Downscale factor keeping the shortest side within `limits.shortest` and
/// the longest within `limits.longest`; never upscales.
pub fn apply_scale_rule(extent: (usize, usize), limits: ScaleLimits) -> Scaled {
    let (h, w) = extent;
    let (short, long) = (h.min(w) as f64, h.max(w) as f64);
    let factor = (limits.shortest as f64 / short).min(limits.longest as f64 / long).min(1.0);
    if factor >= 1.0 {
        return Scaled { factor: 1.0, extent };
    }
    let side = |s: usize| ((s as f64 * factor).round() as usize).max(1);
    Scaled {
        factor,
        extent: (side(h), side(w)),
    }
}

/// Bilinear resize of a `[N, C, H, W]` grid (pixel-centre aligned).
pub fn resize_bilinear(image: &Grid, extent: (usize, usize)) -> Result<Grid> {
    let (n, c, h, w) = image.dims4()?;
    let (nh, nw) = extent;
    if (nh, nw) == (h, w) {
        return Ok(image.clone());
    }
    if nh == 0 || nw == 0 {
        return Err(RtnError::Shape(format!("cannot resize to {nh}x{nw}")));
    }
    let src_coord = |i: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(n * c * nh * nw);
    for plane in 0..n * c {
        let src = &image.values()[plane * h * w..(plane + 1) * h * w];
        for y in 0..nh {
            let (y0, y1, fy) = src_coord(y, h, nh);
            for x in 0..nw {
                let (x0, x1, fx) = src_coord(x, w, nw);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Grid::new(vec![n, c, nh, nw], out)
}
