//! JSON layout files and the `masks.rle` text format.
//!
//! ```json
//! {"height": 512, "width": 512, "partitioning": true,
//!  "regions": [{"id": 1, "tag": "LEFT", "shape": {"circle": {"cx": 110, "cy": 300, "r": 70}}},
//!              {"id": 2, "tag": "BG", "mask_rle": [[512], ...]}]}
//! ```
//!
//! A region gives either a `shape` (rasterized together with the other
//! shapes of the file, earlier regions on top) or `mask_rle`: one array of
//! alternating zero/one run lengths per row, starting with zeros.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::{Mask, Region, RegionError, RegionLayout};
use crate::shapes::{rasterize_shapes, ShapeError, ShapeSpec};

#[derive(Debug, Error)]
pub enum LayoutFileError {
    #[error("layout json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("region {id} needs exactly one of `shape` or `mask_rle`")]
    RegionSource { id: usize },
    #[error("masks.rle: {0}")]
    Rle(String),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub id: usize,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Vec<Vec<u32>>>,
}

/// Where a generated layout came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub layout_id: String,
    /// Seed handed to downstream sampling of this example.
    #[serde(default)]
    pub example_seed: u64,
    /// `(placeholder, value)` in draw order.
    pub draws: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub partitioning: bool,
    pub regions: Vec<RegionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl LayoutFile {
    pub fn from_json(text: &str) -> Result<Self, LayoutFileError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialization is infallible")
    }

    /// Materializes the layout at its declared size.
    pub fn to_layout(&self) -> Result<RegionLayout, LayoutFileError> {
        self.to_layout_at(self.height, self.width)
    }

    /// Materializes at `h × w`. Shapes are rasterized at that size; RLE masks
    /// must already match it.
    pub fn to_layout_at(&self, h: usize, w: usize) -> Result<RegionLayout, LayoutFileError> {
        let shapes: Vec<ShapeSpec> = self
            .regions
            .iter()
            .filter_map(|r| r.shape.clone())
            .collect();
        let mut shape_masks = if shapes.is_empty() {
            Vec::new()
        } else {
            rasterize_shapes(&shapes, self.height, self.width, h, w)?
        }
        .into_iter();
        let mut regions = Vec::with_capacity(self.regions.len());
        for entry in &self.regions {
            let mask = match (&entry.shape, &entry.mask_rle) {
                (Some(_), None) => shape_masks.next().expect("one mask per shape"),
                (None, Some(rows)) => Mask::from_rle_rows(h, w, rows)?,
                _ => return Err(LayoutFileError::RegionSource { id: entry.id }),
            };
            regions.push(Region {
                id: entry.id,
                tag: entry.tag.clone(),
                mask,
            });
        }
        Ok(RegionLayout::new(h, w, regions, self.partitioning)?)
    }

    /// RLE form of an in-memory layout.
    pub fn from_layout(layout: &RegionLayout) -> Self {
        Self {
            name: None,
            height: layout.height(),
            width: layout.width(),
            partitioning: layout.is_partitioning(),
            regions: layout
                .regions()
                .iter()
                .map(|r| RegionEntry {
                    id: r.id,
                    tag: r.tag.clone(),
                    shape: None,
                    mask_rle: Some(r.mask.to_rle_rows()),
                })
                .collect(),
            provenance: None,
        }
    }
}

/// `masks.rle`: a `RLE1 <height> <width> <regions>` header, then for every
/// region a `<id> <tag>` line followed by one line of space-separated runs per
/// mask row.
pub fn masks_to_rle(layout: &RegionLayout) -> String {
    let mut out = format!(
        "RLE1 {} {} {}\n",
        layout.height(),
        layout.width(),
        layout.n_regions()
    );
    for r in layout.regions() {
        let _ = writeln!(out, "{} {}", r.id, r.tag);
        for row in r.mask.to_rle_rows() {
            let line: Vec<String> = row.iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn masks_from_rle(text: &str, partitioning: bool) -> Result<RegionLayout, LayoutFileError> {
    let bad = |m: &str| LayoutFileError::Rle(m.to_string());
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty"))?
        .split(' ')
        .collect();
    if header.len() != 4 || header[0] != "RLE1" {
        return Err(bad("bad header"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (h, w, n) = (num(header[1])?, num(header[2])?, num(header[3])?);
    let mut regions = Vec::with_capacity(n);
    for _ in 0..n {
        let head = lines.next().ok_or_else(|| bad("missing region header"))?;
        let (id, tag) = head
            .split_once(' ')
            .ok_or_else(|| bad("bad region header"))?;
        let rows = (0..h)
            .map(|_| {
                let line = lines.next().ok_or_else(|| bad("missing row"))?;
                line.split(' ')
                    .map(|v| v.parse::<u32>().map_err(|_| bad("bad run")))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        regions.push(Region {
            id: num(id)?,
            tag: tag.to_string(),
            mask: Mask::from_rle_rows(h, w, &rows)?,
        });
    }
    Ok(RegionLayout::new(h, w, regions, partitioning)?)
}
