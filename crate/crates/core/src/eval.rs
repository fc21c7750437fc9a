//! Localized CLIP-style scores and seed-aggregated reports.

use std::fmt;

use thiserror::Error;

use crate::image::RgbImage;
use crate::region::{AnnotatedPrompt, Mask, RegionLayout};
use crate::rng::{fnv1a64, hashed_unit_vector, text_unit_vector};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("mask has no pixels above 0.5")]
    EmptyMask,
    #[error("mask is {mask_h}x{mask_w} but the image is {image_h}x{image_w}")]
    MaskSize {
        mask_h: usize,
        mask_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("no described regions to score")]
    NoRegions,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("metric table is empty")]
    EmptyTable,
    #[error("metric table row {row} has {got} seeds, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
}

/// Maps text and images into a shared unit-norm embedding space.
pub trait EmbeddingProvider {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f64>, EvalError>;
    fn embed_image(&mut self, image: &RgbImage) -> Result<Vec<f64>, EvalError>;
    fn logit_scale(&self) -> f64 {
        DEFAULT_LOGIT_SCALE
    }
}

/// Deterministic provider: vectors are SplitMix64 draws seeded by an FNV-1a
/// hash of the text, or of the image size and pixels.
#[derive(Debug, Clone)]
pub struct StubProvider {
    pub dim: usize,
    pub logit_scale: f64,
}

impl Default for StubProvider {
    fn default() -> Self {
        Self {
            dim: 64,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl EmbeddingProvider for StubProvider {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f64>, EvalError> {
        Ok(text_unit_vector(text, self.dim))
    }

    fn embed_image(&mut self, image: &RgbImage) -> Result<Vec<f64>, EvalError> {
        let mut bytes = Vec::with_capacity(image.pixels.len() + 16);
        bytes.extend_from_slice(&(image.height as u64).to_le_bytes());
        bytes.extend_from_slice(&(image.width as u64).to_le_bytes());
        bytes.extend_from_slice(&image.pixels);
        Ok(hashed_unit_vector(fnv1a64(&bytes), self.dim))
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropMode {
    /// Tight bounding box of the mask.
    #[default]
    BoundingBox,
    /// Bounding box with pixels outside the mask set to black.
    MaskedBox,
}

/// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of pixels above 0.5.
pub fn mask_bbox(mask: &Mask) -> Result<(usize, usize, usize, usize), EvalError> {
    let (h, w) = (mask.height(), mask.width());
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) > 0.5 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y1 == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok((y0, x0, y1, x1))
}

pub fn crop_to_mask(image: &RgbImage, mask: &Mask, mode: CropMode) -> Result<RgbImage, EvalError> {
    if (mask.height(), mask.width()) != (image.height, image.width) {
        return Err(EvalError::MaskSize {
            mask_h: mask.height(),
            mask_w: mask.width(),
            image_h: image.height,
            image_w: image.width,
        });
    }
    let (y0, x0, y1, x1) = mask_bbox(mask)?;
    let mut crop = image.crop(y0, x0, y1, x1);
    if mode == CropMode::MaskedBox {
        for y in y0..y1 {
            for x in x0..x1 {
                if mask.get(y, x) <= 0.5 {
                    crop.set(y - y0, x - x0, [0, 0, 0]);
                }
            }
        }
    }
    Ok(crop)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `logits[i][j] = scale · ⟨image(crop_i), text(desc_j)⟩` over the given
/// `(mask, description)` pairs.
pub fn local_clip_logits<P: EmbeddingProvider + ?Sized>(
    provider: &mut P,
    image: &RgbImage,
    regions: &[(&Mask, &str)],
    mode: CropMode,
) -> Result<Vec<Vec<f64>>, EvalError> {
    if regions.is_empty() {
        return Err(EvalError::NoRegions);
    }
    let crops = regions
        .iter()
        .map(|(m, _)| crop_to_mask(image, m, mode).and_then(|c| provider.embed_image(&c)))
        .collect::<Result<Vec<_>, _>>()?;
    let texts = regions
        .iter()
        .map(|(_, d)| provider.embed_text(d))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = provider.logit_scale();
    Ok(crops
        .iter()
        .map(|c| texts.iter().map(|t| scale * dot(c, t)).collect())
        .collect())
}

/// Row softmax over descriptions.
pub fn local_clip_probs(logits_row: &[f64]) -> Vec<f64> {
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits_row.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-image scores: mean own-description logit and mean own-description
/// probability over the scored regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalScores {
    pub logit: f64,
    pub prob: f64,
}

pub fn local_scores(logits: &[Vec<f64>]) -> LocalScores {
    let n = logits.len() as f64;
    let logit = logits.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / n;
    let prob = logits
        .iter()
        .enumerate()
        .map(|(i, r)| local_clip_probs(r)[i])
        .sum::<f64>()
        / n;
    LocalScores { logit, prob }
}

/// `(mask, description)` for every region named in the prompt, skipping
/// `exclude_tags`. The first span of a tag supplies its description.
pub fn described_regions<'a>(
    layout: &'a RegionLayout,
    prompt: &AnnotatedPrompt,
    exclude_tags: &[&str],
) -> Vec<(&'a Mask, String)> {
    layout
        .regions()
        .iter()
        .filter(|r| !exclude_tags.contains(&r.tag.as_str()))
        .filter_map(|r| {
            let i = prompt.spans.iter().position(|s| s.tag == r.tag)?;
            Some((&r.mask, prompt.span_text(i)))
        })
        .collect()
}

pub fn score_image<P: EmbeddingProvider + ?Sized>(
    provider: &mut P,
    image: &RgbImage,
    layout: &RegionLayout,
    prompt: &AnnotatedPrompt,
    exclude_tags: &[&str],
    mode: CropMode,
) -> Result<LocalScores, EvalError> {
    let regions = described_regions(layout, prompt, exclude_tags);
    let pairs: Vec<(&Mask, &str)> = regions.iter().map(|(m, d)| (*m, d.as_str())).collect();
    Ok(local_scores(&local_clip_logits(
        provider, image, &pairs, mode,
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

/// Metric values indexed `[example][seed]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub name: String,
    pub direction: Direction,
    values: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn new(name: &str, direction: Direction, values: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let seeds = values.first().map_or(0, Vec::len);
        if seeds == 0 {
            return Err(EvalError::EmptyTable);
        }
        for (row, v) in values.iter().enumerate() {
            if v.len() != seeds {
                return Err(EvalError::Ragged {
                    row,
                    got: v.len(),
                    expected: seeds,
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            direction,
            values,
        })
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn n_examples(&self) -> usize {
        self.values.len()
    }

    pub fn n_seeds(&self) -> usize {
        self.values[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub mean: f64,
    pub std: f64,
    pub best: f64,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(
            f,
            "{:.p$} ± {:.p$} ({:.p$})",
            self.mean, self.std, self.best
        )
    }
}

/// Mean and spread of the per-seed example averages, plus the example
/// average of each example's best seed.
pub fn aggregate_report(table: &MetricTable, std_kind: StdKind) -> Result<Report, EvalError> {
    let (n_ex, n_seeds) = (table.n_examples(), table.n_seeds());
    let per_seed: Vec<f64> = (0..n_seeds)
        .map(|s| table.values.iter().map(|r| r[s]).sum::<f64>() / n_ex as f64)
        .collect();
    let mean = per_seed.iter().sum::<f64>() / n_seeds as f64;
    let ss: f64 = per_seed.iter().map(|v| (v - mean).powi(2)).sum();
    let std = match (std_kind, n_seeds) {
        (StdKind::Sample, 1) => 0.0,
        (StdKind::Sample, n) => (ss / (n - 1) as f64).sqrt(),
        (StdKind::Population, n) => (ss / n as f64).sqrt(),
    };
    let best = table
        .values
        .iter()
        .map(|r| {
            let it = r.iter().cloned();
            match table.direction {
                Direction::HigherBetter => it.fold(f64::NEG_INFINITY, f64::max),
                Direction::LowerBetter => it.fold(f64::INFINITY, f64::min),
            }
        })
        .sum::<f64>()
        / n_ex as f64;
    Ok(Report { mean, std, best })
}
