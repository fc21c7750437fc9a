//! Region masks, region–token alignments and annotated prompts.
//!
//! A [`RegionLayout`] holds `R` binary masks over an `H×W` canvas. Region 0 is
//! implicit and covers the whole canvas. A [`TokenAlignment`] maps every prompt
//! token to a region id in `0..=R`, where 0 means the token is not part of any
//! localized description.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("unbalanced braces at char {position}")]
    UnbalancedBraces { position: usize },
    #[error("empty or missing region tag in span starting at char {position}")]
    EmptyTag { position: usize },
    #[error("empty phrase in span starting at char {position}")]
    EmptySpan { position: usize },
    #[error("nested span at char {position}")]
    NestedSpan { position: usize },
    #[error("unknown region tag `{tag}`")]
    UnknownTag { tag: String },
    #[error("token span {start}..{end} out of bounds for text of {len} chars")]
    TokenSpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("zero-sized mask dimension")]
    ZeroDimension,
    #[error("mask is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    MaskShape {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("mask value {value} at index {index} is not binary")]
    NonBinaryMask { value: f64, index: usize },
    #[error("region ids must be 1..=R in order; found {found} at position {position}")]
    RegionIds { found: usize, position: usize },
    #[error("layout declared partitioning but pixel ({y},{x}) is covered by {count} regions")]
    NotPartitioning { y: usize, x: usize, count: usize },
    #[error("token {token} references region {region}, layout has {n_regions}")]
    RegionOutOfRange {
        token: usize,
        region: usize,
        n_regions: usize,
    },
    #[error("run-length rows do not describe a {height}x{width} mask")]
    BadRle { height: usize, width: usize },
}

pub type Result<T> = std::result::Result<T, RegionError>;

/// A single-channel mask with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RegionError::ZeroDimension);
        }
        if data.len() != height * width {
            return Err(RegionError::MaskShape {
                got_h: data.len() / width.max(1),
                got_w: width,
                want_h: height,
                want_w: width,
            });
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of pixels with value above 0.5.
    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Fraction of the canvas covered (values > 0.5).
    pub fn area_fraction(&self) -> f64 {
        self.count_on() as f64 / self.data.len() as f64
    }

    /// Run-length encoding of the thresholded mask, one row at a time.
    ///
    /// Each row alternates run lengths starting with a run of zeros, which may
    /// be empty.
    pub fn to_rle_rows(&self) -> Vec<Vec<u32>> {
        (0..self.height)
            .map(|y| {
                let row = &self.data[y * self.width..(y + 1) * self.width];
                let mut runs = Vec::new();
                let mut current = false;
                let mut len = 0u32;
                for &v in row {
                    let on = v > 0.5;
                    if on != current {
                        runs.push(len);
                        len = 0;
                        current = on;
                    }
                    len += 1;
                }
                runs.push(len);
                runs
            })
            .collect()
    }

    pub fn from_rle_rows(height: usize, width: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let bad = || RegionError::BadRle { height, width };
        if rows.len() != height {
            return Err(bad());
        }
        let mut data = Vec::with_capacity(height * width);
        for runs in rows {
            let mut on = false;
            let mut filled = 0usize;
            for &run in runs {
                filled = filled.checked_add(run as usize).ok_or_else(bad)?;
                if filled > width {
                    return Err(bad());
                }
                data.extend(std::iter::repeat_n(
                    if on { 1.0 } else { 0.0 },
                    run as usize,
                ));
                on = !on;
            }
            if filled != width {
                return Err(bad());
            }
        }
        Self::new(height, width, data)
    }
}

/// One localized region: its id, free-form tag and source-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    pub tag: String,
    pub mask: Mask,
}

/// Named binary region masks over one canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLayout {
    height: usize,
    width: usize,
    regions: Vec<Region>,
    partitioning: bool,
}

impl RegionLayout {
    /// Validates ids (`1..=R` in order), shapes, binariness and, when
    /// `partitioning` is set, that every pixel belongs to exactly one region.
    pub fn new(
        height: usize,
        width: usize,
        regions: Vec<Region>,
        partitioning: bool,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RegionError::ZeroDimension);
        }
        for (position, region) in regions.iter().enumerate() {
            if region.id != position + 1 {
                return Err(RegionError::RegionIds {
                    found: region.id,
                    position,
                });
            }
            if region.mask.height() != height || region.mask.width() != width {
                return Err(RegionError::MaskShape {
                    got_h: region.mask.height(),
                    got_w: region.mask.width(),
                    want_h: height,
                    want_w: width,
                });
            }
            if let Some((index, &value)) = region
                .mask
                .data()
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 0.0 && v != 1.0)
            {
                return Err(RegionError::NonBinaryMask { value, index });
            }
        }
        if partitioning {
            for y in 0..height {
                for x in 0..width {
                    let count = regions.iter().filter(|r| r.mask.get(y, x) == 1.0).count();
                    if count != 1 {
                        return Err(RegionError::NotPartitioning { y, x, count });
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            regions,
            partitioning,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn is_partitioning(&self) -> bool {
        self.partitioning
    }

    /// Mask for region `id`; id 0 yields an all-ones mask.
    pub fn mask(&self, id: usize) -> Option<Mask> {
        if id == 0 {
            return Mask::filled(self.height, self.width, 1.0).ok();
        }
        self.regions.get(id - 1).map(|r| r.mask.clone())
    }

    pub fn region_by_tag(&self, tag: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.tag == tag)
    }

    /// Tag → region id map for every region in the layout.
    pub fn tag_map(&self) -> HashMap<String, usize> {
        self.regions.iter().map(|r| (r.tag.clone(), r.id)).collect()
    }

    pub fn fractions(&self) -> RegionFractions {
        let mut values = Vec::with_capacity(self.regions.len() + 1);
        values.push(1.0);
        values.extend(self.regions.iter().map(|r| r.mask.area_fraction()));
        RegionFractions(values)
    }
}

/// Per-region area fraction `S_r`, indexed by region id; `S_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFractions(Vec<f64>);

impl RegionFractions {
    /// Builds from the fractions of regions `1..=R`; region 0 is prepended.
    pub fn from_regions(values: impl IntoIterator<Item = f64>) -> Self {
        let mut all = vec![1.0];
        all.extend(values.into_iter().map(|v| v.clamp(0.0, 1.0)));
        Self(all)
    }

    pub fn get(&self, region: usize) -> f64 {
        self.0.get(region).copied().unwrap_or(1.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn n_regions(&self) -> usize {
        self.0.len() - 1
    }
}

/// Token → region assignment (`f_RT`) plus the any-region indicator `B_R`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenAlignment {
    assignment: Vec<usize>,
    any_region: Vec<bool>,
}

impl TokenAlignment {
    pub fn new(assignment: Vec<usize>) -> Self {
        let any_region = assignment.iter().map(|&r| r != 0).collect();
        Self {
            assignment,
            any_region,
        }
    }

    /// All tokens global.
    pub fn global(n_tokens: usize) -> Self {
        Self::new(vec![0; n_tokens])
    }

    pub fn n_tokens(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn any_region(&self) -> &[bool] {
        &self.any_region
    }

    #[inline]
    pub fn region_of(&self, token: usize) -> usize {
        self.assignment[token]
    }

    pub fn max_region(&self) -> usize {
        self.assignment.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, n_regions: usize) -> Result<()> {
        match self
            .assignment
            .iter()
            .enumerate()
            .find(|(_, &r)| r > n_regions)
        {
            Some((token, &region)) => Err(RegionError::RegionOutOfRange {
                token,
                region,
                n_regions,
            }),
            None => Ok(()),
        }
    }
}

/// One `{phrase:TAG}` span, in char offsets of the plain text.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptSpan {
    pub start: usize,
    pub end: usize,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnnotatedPrompt {
    pub raw: String,
    pub plain: String,
    pub spans: Vec<PromptSpan>,
}

impl AnnotatedPrompt {
    /// Text of span `i` in the plain prompt.
    pub fn span_text(&self, i: usize) -> String {
        let span = &self.spans[i];
        self.plain
            .chars()
            .skip(span.start)
            .take(span.end - span.start)
            .collect()
    }

    pub fn char_len(&self) -> usize {
        self.plain.chars().count()
    }
}

/// Parses `{phrase:TAG}` annotations. The tag is everything after the last
/// colon inside the braces. Offsets are char (not byte) positions.
pub fn parse_annotated_prompt(raw: &str) -> Result<AnnotatedPrompt> {
    let mut plain = String::with_capacity(raw.len());
    let mut spans = Vec::new();
    let mut plain_len = 0usize;
    // (raw position of '{', plain offset, inner text)
    let mut open: Option<(usize, usize, String)> = None;

    for (pos, c) in raw.chars().enumerate() {
        match c {
            '{' => {
                if open.is_some() {
                    return Err(RegionError::NestedSpan { position: pos });
                }
                open = Some((pos, plain_len, String::new()));
            }
            '}' => {
                let Some((start_pos, start, inner)) = open.take() else {
                    return Err(RegionError::UnbalancedBraces { position: pos });
                };
                let Some(colon) = inner.rfind(':') else {
                    return Err(RegionError::EmptyTag {
                        position: start_pos,
                    });
                };
                let phrase = &inner[..colon];
                let tag = inner[colon + 1..].trim();
                if tag.is_empty() {
                    return Err(RegionError::EmptyTag {
                        position: start_pos,
                    });
                }
                if phrase.trim().is_empty() {
                    return Err(RegionError::EmptySpan {
                        position: start_pos,
                    });
                }
                let n = phrase.chars().count();
                plain.push_str(phrase);
                plain_len += n;
                spans.push(PromptSpan {
                    start,
                    end: start + n,
                    tag: tag.to_string(),
                });
            }
            _ => match open.as_mut() {
                Some((_, _, inner)) => inner.push(c),
                None => {
                    plain.push(c);
                    plain_len += 1;
                }
            },
        }
    }
    if let Some((position, _, _)) = open {
        return Err(RegionError::UnbalancedBraces { position });
    }
    Ok(AnnotatedPrompt {
        raw: raw.to_string(),
        plain,
        spans,
    })
}

/// Char spans of whitespace-separated words.
pub fn whitespace_token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        spans.push((s, n));
    }
    spans
}

/// Assigns every token the region of the first annotated span it overlaps by
/// at least one character; tokens overlapping nothing get region 0.
pub fn build_alignment(
    prompt: &AnnotatedPrompt,
    token_spans: &[(usize, usize)],
    tag_to_region: &HashMap<String, usize>,
) -> Result<TokenAlignment> {
    let len = prompt.char_len();
    let span_regions = prompt
        .spans
        .iter()
        .map(|s| {
            tag_to_region
                .get(&s.tag)
                .copied()
                .ok_or_else(|| RegionError::UnknownTag { tag: s.tag.clone() })
        })
        .collect::<Result<Vec<_>>>()?;

    let assignment = token_spans
        .iter()
        .map(|&(start, end)| {
            if start > end || end > len {
                return Err(RegionError::TokenSpanOutOfBounds { start, end, len });
            }
            Ok(prompt
                .spans
                .iter()
                .zip(&span_regions)
                .find(|(s, _)| start < s.end && s.start < end)
                .map(|(_, &r)| r)
                .unwrap_or(0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenAlignment::new(assignment))
}

/// Bilinear resize with pixel-centre sampling (no corner alignment) and edge
/// clamping. Identical sizes return the input unchanged.
pub fn rescale_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    if target_h == 0 || target_w == 0 {
        return Err(RegionError::ZeroDimension);
    }
    let (h, w) = (mask.height(), mask.width());
    if (h, w) == (target_h, target_w) {
        return Ok(mask.clone());
    }
    let ys: Vec<_> = (0..target_h)
        .map(|i| source_coord(i, h, target_h))
        .collect();
    let xs: Vec<_> = (0..target_w)
        .map(|j| source_coord(j, w, target_w))
        .collect();
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = mask.get(y0, x0) * (1.0 - fx) + mask.get(y0, x1) * fx;
            let bottom = mask.get(y1, x0) * (1.0 - fx) + mask.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Mask::new(target_h, target_w, out)
}

fn source_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let c = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, c - lo as f64)
}

/// Region masks of one layout, rescaled to a single attention resolution.
///
/// Index 0 is the all-ones global mask. Fractions are carried over from the
/// source layout unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRegions {
    height: usize,
    width: usize,
    masks: Vec<Vec<f64>>,
    fractions: RegionFractions,
}

impl LayerRegions {
    /// Builds directly from per-region masks (regions `1..=R`) at layer
    /// resolution.
    pub fn new(
        height: usize,
        width: usize,
        region_masks: Vec<Vec<f64>>,
        fractions: RegionFractions,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RegionError::ZeroDimension);
        }
        let mut masks = Vec::with_capacity(region_masks.len() + 1);
        masks.push(vec![1.0; height * width]);
        for m in region_masks {
            if m.len() != height * width {
                return Err(RegionError::MaskShape {
                    got_h: m.len() / width,
                    got_w: width,
                    want_h: height,
                    want_w: width,
                });
            }
            masks.push(m.into_iter().map(|v| v.clamp(0.0, 1.0)).collect());
        }
        Ok(Self {
            height,
            width,
            masks,
            fractions,
        })
    }

    /// Rescales every region of `layout` to `height×width`.
    pub fn from_layout(layout: &RegionLayout, height: usize, width: usize) -> Result<Self> {
        let masks = layout
            .regions()
            .iter()
            .map(|r| rescale_mask(&r.mask, height, width).map(|m| m.data))
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, masks, layout.fractions())
    }

    /// A layout with no localized regions.
    pub fn global(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            masks: vec![vec![1.0; height * width]],
            fractions: RegionFractions(vec![1.0]),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn n_regions(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn fractions(&self) -> &RegionFractions {
        &self.fractions
    }

    /// Mask value of region `region` at flattened pixel `p`.
    #[inline]
    pub fn value(&self, region: usize, p: usize) -> f64 {
        self.masks[region][p]
    }

    pub fn region_mask(&self, region: usize) -> &[f64] {
        &self.masks[region]
    }

    /// The region a pixel belongs to: the highest-valued region among
    /// `1..=R` (lowest id on ties), or 0 when no region covers it.
    pub fn pixel_region(&self, p: usize) -> usize {
        let mut best = 0;
        let mut best_value = 0.0;
        for r in 1..self.masks.len() {
            let v = self.masks[r][p];
            if v > best_value {
                best = r;
                best_value = v;
            }
        }
        best
    }
}

/// Per-token mask planes (`N × h × w`): plane `n` is the mask of token `n`'s
/// region, all-ones for global tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMaskStack {
    pub n_tokens: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TokenMaskStack {
    pub fn plane(&self, n: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[n * hw..(n + 1) * hw]
    }
}

pub fn layout_at_resolution(
    layout: &RegionLayout,
    alignment: &TokenAlignment,
    height: usize,
    width: usize,
) -> Result<TokenMaskStack> {
    alignment.validate(layout.n_regions())?;
    let layer = LayerRegions::from_layout(layout, height, width)?;
    Ok(token_masks(&layer, alignment))
}

pub fn token_masks(layer: &LayerRegions, alignment: &TokenAlignment) -> TokenMaskStack {
    let mut data = Vec::with_capacity(alignment.n_tokens() * layer.hw());
    for &r in alignment.assignment() {
        data.extend_from_slice(layer.region_mask(r));
    }
    TokenMaskStack {
        n_tokens: alignment.n_tokens(),
        height: layer.height(),
        width: layer.width(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_layout(h: usize, w: usize) -> RegionLayout {
        let left = Mask::from_fn(h, w, |_, x| if x < w / 2 { 1.0 } else { 0.0 }).unwrap();
        let right = Mask::from_fn(h, w, |_, x| if x >= w / 2 { 1.0 } else { 0.0 }).unwrap();
        RegionLayout::new(
            h,
            w,
            vec![
                Region {
                    id: 1,
                    tag: "L".into(),
                    mask: left,
                },
                Region {
                    id: 2,
                    tag: "R".into(),
                    mask: right,
                },
            ],
            true,
        )
        .unwrap()
    }

    #[test]
    fn parses_single_span() {
        let p = parse_annotated_prompt("a photo of {a gold coin:C1} on a table").unwrap();
        assert_eq!(p.plain, "a photo of a gold coin on a table");
        assert_eq!(p.spans.len(), 1);
        assert_eq!(p.span_text(0), "a gold coin");
        assert_eq!(p.spans[0].tag, "C1");
    }

    #[test]
    fn plain_prompt_has_no_spans() {
        let p = parse_annotated_prompt("plain prompt").unwrap();
        assert_eq!(p.plain, "plain prompt");
        assert!(p.spans.is_empty());
    }

    #[test]
    fn parses_four_spans_in_order() {
        let p = parse_annotated_prompt(
            "a highly detailed photorealistic image of {a grape:TOP_LEFT}, {a walnut:BOTTOM} \
             and {a green apple:TOP_RIGHT} on {a kitchen table:BG}",
        )
        .unwrap();
        let tags: Vec<_> = p.spans.iter().map(|s| s.tag.as_str()).collect();
        assert_eq!(tags, ["TOP_LEFT", "BOTTOM", "TOP_RIGHT", "BG"]);
        assert_eq!(p.span_text(2), "a green apple");
        assert!(p.spans.windows(2).all(|w| w[0].end <= w[1].start));
    }

    #[test]
    fn parse_errors_carry_positions() {
        assert_eq!(
            parse_annotated_prompt("a {b:X"),
            Err(RegionError::UnbalancedBraces { position: 2 })
        );
        assert_eq!(
            parse_annotated_prompt("a b:X}"),
            Err(RegionError::UnbalancedBraces { position: 5 })
        );
        assert_eq!(
            parse_annotated_prompt("x {a:} y"),
            Err(RegionError::EmptyTag { position: 2 })
        );
        assert_eq!(
            parse_annotated_prompt("x {a kitchen table}"),
            Err(RegionError::EmptyTag { position: 2 })
        );
        assert_eq!(
            parse_annotated_prompt("{a {b:X}:Y}"),
            Err(RegionError::NestedSpan { position: 3 })
        );
    }

    #[test]
    fn unicode_offsets_are_chars() {
        let p = parse_annotated_prompt("é {ü x:T} z").unwrap();
        assert_eq!(p.plain, "é ü x z");
        assert_eq!((p.spans[0].start, p.spans[0].end), (2, 5));
    }

    #[test]
    fn alignment_for_twelve_token_prompt() {
        // Leading empty span stands in for a start-of-text token.
        let p = parse_annotated_prompt(
            "A very realistic painting of {dogs:D} and {cats:C} and {guinea pigs:G}",
        )
        .unwrap();
        let mut spans = vec![(0, 0)];
        spans.extend(whitespace_token_spans(&p.plain));
        assert_eq!(spans.len(), 12);
        let tags = HashMap::from([("D".into(), 1), ("C".into(), 2), ("G".into(), 3)]);
        let a = build_alignment(&p, &spans, &tags).unwrap();
        let on: Vec<_> = (0..12).filter(|&n| a.any_region()[n]).collect();
        assert_eq!(on, [6, 8, 10, 11]);
        assert_eq!(a.region_of(6), 1);
        assert_eq!(a.region_of(8), 2);
        assert_eq!(a.region_of(10), 3);
        assert_eq!(a.region_of(11), 3);
    }

    #[test]
    fn alignment_errors() {
        let p = parse_annotated_prompt("a {b:X}").unwrap();
        let err = build_alignment(&p, &[(0, 1)], &HashMap::new()).unwrap_err();
        assert_eq!(err, RegionError::UnknownTag { tag: "X".into() });
        let tags = HashMap::from([("X".into(), 1)]);
        let err = build_alignment(&p, &[(0, 9)], &tags).unwrap_err();
        assert!(matches!(err, RegionError::TokenSpanOutOfBounds { .. }));
    }

    #[test]
    fn zero_spans_give_global_alignment() {
        let p = parse_annotated_prompt("just some words").unwrap();
        let a = build_alignment(&p, &whitespace_token_spans(&p.plain), &HashMap::new()).unwrap();
        assert_eq!(a.assignment(), [0, 0, 0]);
        assert!(a.any_region().iter().all(|&b| !b));
    }

    #[test]
    fn rescale_two_by_two_to_one() {
        let m = Mask::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = rescale_mask(&m, 1, 1).unwrap();
        assert_eq!(r.data(), [0.5]);
    }

    #[test]
    fn rescale_identity_is_bitwise() {
        let m = Mask::from_fn(5, 7, |y, x| ((y * 7 + x) as f64 / 35.0).sin().abs()).unwrap();
        assert_eq!(rescale_mask(&m, 5, 7).unwrap(), m);
    }

    #[test]
    fn rescale_rejects_zero() {
        let m = Mask::filled(2, 2, 1.0).unwrap();
        assert_eq!(rescale_mask(&m, 0, 3), Err(RegionError::ZeroDimension));
    }

    #[test]
    fn layout_validation() {
        let m = Mask::filled(2, 2, 1.0).unwrap();
        let bad_id = RegionLayout::new(
            2,
            2,
            vec![Region {
                id: 2,
                tag: "x".into(),
                mask: m.clone(),
            }],
            false,
        );
        assert!(matches!(bad_id, Err(RegionError::RegionIds { .. })));
        let soft = Mask::filled(2, 2, 0.5).unwrap();
        let non_binary = RegionLayout::new(
            2,
            2,
            vec![Region {
                id: 1,
                tag: "x".into(),
                mask: soft,
            }],
            false,
        );
        assert!(matches!(non_binary, Err(RegionError::NonBinaryMask { .. })));
        let overlap = RegionLayout::new(
            2,
            2,
            vec![
                Region {
                    id: 1,
                    tag: "a".into(),
                    mask: m.clone(),
                },
                Region {
                    id: 2,
                    tag: "b".into(),
                    mask: m,
                },
            ],
            true,
        );
        assert!(matches!(overlap, Err(RegionError::NotPartitioning { .. })));
    }

    #[test]
    fn fractions_and_region_zero() {
        let layout = half_layout(4, 8);
        let s = layout.fractions();
        assert_eq!(s.as_slice(), [1.0, 0.5, 0.5]);
        assert!(layout.mask(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_global_stack_is_ones() {
        let layout = half_layout(4, 8);
        let stack = layout_at_resolution(&layout, &TokenAlignment::global(3), 2, 2).unwrap();
        assert!(stack.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn left_half_token_plane() {
        let layout = half_layout(16, 16);
        let align = TokenAlignment::new(vec![0, 1, 0]);
        for size in [16, 8, 4] {
            let stack = layout_at_resolution(&layout, &align, size, size).unwrap();
            let plane = stack.plane(1);
            for y in 0..size {
                for x in 0..size {
                    let v = plane[y * size + x];
                    // boundary columns may blur by at most one column each side
                    if x + 1 < size / 2 {
                        assert_eq!(v, 1.0);
                    } else if x > size / 2 {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn rle_round_trip() {
        let layout = half_layout(3, 5);
        let m = &layout.regions()[1].mask;
        let rows = m.to_rle_rows();
        assert_eq!(rows[0], vec![2, 3]);
        assert_eq!(&Mask::from_rle_rows(3, 5, &rows).unwrap(), m);
        assert!(Mask::from_rle_rows(3, 5, &[vec![6], vec![5], vec![5]]).is_err());
    }

    #[test]
    fn alignment_validation() {
        let a = TokenAlignment::new(vec![0, 3]);
        assert!(matches!(
            a.validate(2),
            Err(RegionError::RegionOutOfRange { token: 1, .. })
        ));
        assert!(a.validate(3).is_ok());
    }
}
