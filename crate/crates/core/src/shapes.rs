//! Parametric shapes and their rasterization into region masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::{Mask, RegionError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape {index} rasterizes to an empty mask")]
    DegenerateShape { index: usize },
    #[error("at most one background shape is allowed")]
    MultipleBackgrounds,
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// A filled shape in canvas coordinates (x right, y down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSpec {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Polygon {
        points: Vec<[f64; 2]>,
    },
    /// Whatever no other shape covers.
    Background,
}

impl ShapeSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeSpec::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            ShapeSpec::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            ShapeSpec::Polygon { points } => {
                let mut inside = false;
                let mut j = points.len().wrapping_sub(1);
                for i in 0..points.len() {
                    let ([xi, yi], [xj, yj]) = (points[i], points[j]);
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
            ShapeSpec::Background => false,
        }
    }

    pub fn is_background(&self) -> bool {
        matches!(self, ShapeSpec::Background)
    }
}

/// Rasterizes shapes defined on a `canvas_h × canvas_w` canvas onto an
/// `h × w` grid by testing pixel centres. Earlier shapes sit on top of later
/// ones, so the masks never overlap; a background shape takes every pixel
/// not claimed by another shape.
pub fn rasterize_shapes(
    shapes: &[ShapeSpec],
    canvas_h: usize,
    canvas_w: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Mask>, ShapeError> {
    if shapes.iter().filter(|s| s.is_background()).count() > 1 {
        return Err(ShapeError::MultipleBackgrounds);
    }
    let (sy, sx) = (canvas_h as f64 / h as f64, canvas_w as f64 / w as f64);
    let background = shapes.iter().position(ShapeSpec::is_background);
    let mut owner = vec![usize::MAX; h * w];
    for y in 0..h {
        let cy = (y as f64 + 0.5) * sy;
        for x in 0..w {
            let cx = (x as f64 + 0.5) * sx;
            owner[y * w + x] = shapes
                .iter()
                .position(|s| s.contains(cx, cy))
                .or(background)
                .unwrap_or(usize::MAX);
        }
    }
    shapes
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let data: Vec<f64> = owner.iter().map(|&o| (o == i) as u8 as f64).collect();
            if data.iter().all(|&v| v == 0.0) {
                return Err(ShapeError::DegenerateShape { index: i });
            }
            Ok(Mask::new(h, w, data)?)
        })
        .collect()
}
