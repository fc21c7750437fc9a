//! Cross-attention control methods.
//!
//! Four ways of steering cross-attention toward region descriptions:
//!
//! - **eDiff-I style**: additive logit boost on tokens whose region covers the
//!   pixel, scaled by `ln(1+σ²)` and the per-head spread of `QKᵀ`.
//! - **CAC**: post-softmax multiplication by the token's region mask, without
//!   renormalization.
//! - **DenseDiffusion style**: additive bias toward correct-region tokens and
//!   away from the rest, bounded by the per-head max/min of `QKᵀ`, damped by
//!   the region area and a `(t/T)⁵` schedule.
//! - **Redistribution**: the per-pixel attention mass `m` on region tokens is
//!   moved onto the pixel's own region tokens (a local softmax) while the
//!   remaining `1−m` goes to non-region tokens (a global softmax). `m` can be
//!   boosted multiplicatively and additively under a sine-ramp schedule.
//!
//! All statistics (`std`, `max`, `min`) are taken per head over the full
//! `hw × N` plane of the *unscaled* scores, reconstructed as `√d` times the
//! scaled logits, unless [`LogitStats::Scaled`] is selected.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    softmax_in_place, softmax_rows, AttentionError, AttentionKind, AttentionTensor, MASK_SENTINEL,
};
use crate::region::{LayerRegions, TokenAlignment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown control method `{0}`")]
    UnknownMethod(String),
    #[error("invalid control config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

pub type Result<T> = std::result::Result<T, ControlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Ediffi,
    Cac,
    DenseDiffusion,
    CaRedist,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::None,
        Method::Ediffi,
        Method::Cac,
        Method::DenseDiffusion,
        Method::CaRedist,
    ];

    pub fn code(self) -> u8 {
        match self {
            Method::None => 0,
            Method::Ediffi => 1,
            Method::Cac => 2,
            Method::DenseDiffusion => 3,
            Method::CaRedist => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| ControlError::UnknownMethod(code.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Ediffi => "ediffi",
            Method::Cac => "cac",
            Method::DenseDiffusion => "dense_diffusion",
            Method::CaRedist => "ca_redist",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Method::None),
            "ediffi" | "ediff_i" => Ok(Method::Ediffi),
            "cac" => Ok(Method::Cac),
            "dd" | "dense_diffusion" | "densediffusion" => Ok(Method::DenseDiffusion),
            "ca_redist" | "redist" => Ok(Method::CaRedist),
            _ => Err(ControlError::UnknownMethod(s.to_string())),
        }
    }
}

/// Which logits feed the per-head `std`/`max`/`min` statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitStats {
    /// `QKᵀ`, i.e. `√d` times the scaled logits.
    #[default]
    Unscaled,
    /// `QKᵀ/√d` as given.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub method: Method,
    /// Overall strength for the eDiff-I and DenseDiffusion variants.
    pub w_prime: f64,
    /// Multiplicative boost of the region mass.
    pub w_m: f64,
    /// Additive boost of the region mass.
    pub w_a: f64,
    /// Threshold step of the boost schedule, in `1..=total_steps`.
    pub t_thr: u32,
    /// Schedule softness in `[0, 1]`.
    pub softness: f64,
    pub total_steps: u32,
    #[serde(default)]
    pub logit_stats: LogitStats,
}

pub const DEFAULT_TOTAL_STEPS: u32 = 1000;
pub const DEFAULT_W_PRIME: f64 = 0.5;
pub const DEFAULT_SOFTNESS: f64 = 0.8;
pub const DEFAULT_SOFTNESS_ADDITIVE: f64 = 0.6;

impl ControlConfig {
    pub fn new(method: Method, total_steps: u32) -> Self {
        Self {
            method,
            w_prime: DEFAULT_W_PRIME,
            w_m: 0.0,
            w_a: 0.0,
            t_thr: total_steps,
            softness: DEFAULT_SOFTNESS,
            total_steps,
            logit_stats: LogitStats::Unscaled,
        }
    }

    /// Sets the boost weights and the matching default softness (0.6 for a
    /// purely additive boost, 0.8 otherwise).
    pub fn with_boost(mut self, w_m: f64, w_a: f64) -> Self {
        self.w_m = w_m;
        self.w_a = w_a;
        self.softness = if w_m == 0.0 && w_a > 0.0 {
            DEFAULT_SOFTNESS_ADDITIVE
        } else {
            DEFAULT_SOFTNESS
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ControlError::InvalidConfig(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        for (name, v) in [
            ("w_prime", self.w_prime),
            ("w_m", self.w_m),
            ("w_a", self.w_a),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(1..=self.total_steps).contains(&self.t_thr) {
            return bad(format!(
                "t_thr must be in 1..={}, got {}",
                self.total_steps, self.t_thr
            ));
        }
        if !(0.0..=1.0).contains(&self.softness) {
            return bad(format!("softness must be in [0, 1], got {}", self.softness));
        }
        Ok(())
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self::new(Method::None, DEFAULT_TOTAL_STEPS)
    }
}

/// Denoising step `t` (counting down from `total_steps`) and noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub t: u32,
    pub total_steps: u32,
    pub sigma: f64,
}

/// Counters and per-head statistics from a redistribution call.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RedistDiagnostics {
    /// Mean over pixels of the unmodified region mass `m`, per head.
    pub m_mean: Vec<f64>,
    /// Mean over pixels of the boosted, clamped mass `m*`, per head.
    pub m_star_mean: Vec<f64>,
    /// Boost schedule value used for this step.
    pub boost: f64,
    /// Pixels whose region has no tokens.
    pub no_local_pixels: u32,
    /// Pixels for which every token belongs to a region description.
    pub no_global_pixels: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub attention: AttentionTensor,
    pub diagnostics: Option<RedistDiagnostics>,
}

fn check_shapes(
    t: &AttentionTensor,
    regions: &LayerRegions,
    alignment: &TokenAlignment,
) -> Result<()> {
    if t.hw != regions.hw() {
        return Err(ControlError::DimensionMismatch(format!(
            "attention has {} pixels, masks are {}x{}",
            t.hw,
            regions.height(),
            regions.width()
        )));
    }
    if t.n_tokens != alignment.n_tokens() {
        return Err(ControlError::DimensionMismatch(format!(
            "attention has {} tokens, alignment has {}",
            t.n_tokens,
            alignment.n_tokens()
        )));
    }
    if alignment.max_region() > regions.n_regions() {
        return Err(ControlError::DimensionMismatch(format!(
            "alignment references region {}, only {} present",
            alignment.max_region(),
            regions.n_regions()
        )));
    }
    Ok(())
}

fn require_kind(t: &AttentionTensor, kind: AttentionKind) -> Result<()> {
    if t.kind != kind {
        return Err(AttentionError::WrongKind { expected: kind }.into());
    }
    Ok(())
}

fn stat_factor(t: &AttentionTensor, stats: LogitStats) -> f64 {
    match stats {
        LogitStats::Unscaled => (t.scale_dim as f64).sqrt(),
        LogitStats::Scaled => 1.0,
    }
}

/// Population std of one head's plane, multiplied by `factor`.
fn plane_std(plane: &[f64], factor: f64) -> f64 {
    if plane.is_empty() {
        return 0.0;
    }
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt() * factor
}

fn softmax_row_checked(row: &mut [f64], head: usize, pixel: usize) -> Result<()> {
    if !softmax_in_place(row) && !row.is_empty() {
        return Err(AttentionError::AllMaskedRow { head, pixel }.into());
    }
    Ok(())
}

/// `softmax(W + logits)` with `W = w'·ln(1+σ²)·std_h(QKᵀ)·B_{f(n)}[p]`.
pub fn ediffi_attention(
    logits: &AttentionTensor,
    regions: &LayerRegions,
    alignment: &TokenAlignment,
    cfg: &ControlConfig,
    ctx: &StepContext,
) -> Result<AttentionTensor> {
    require_kind(logits, AttentionKind::Logits)?;
    check_shapes(logits, regions, alignment)?;
    let factor = stat_factor(logits, cfg.logit_stats);
    let noise = (ctx.sigma * ctx.sigma).ln_1p();
    let mut out = logits.with_data(AttentionKind::Probabilities, logits.data.clone());
    for h in 0..logits.heads {
        let coef = cfg.w_prime * noise * plane_std(logits.head_plane(h), factor);
        for p in 0..logits.hw {
            let row = out.row_mut(h, p);
            if coef != 0.0 {
                for (n, v) in row.iter_mut().enumerate() {
                    *v += coef * regions.value(alignment.region_of(n), p);
                }
            }
            softmax_row_checked(row, h, p)?;
        }
    }
    Ok(out)
}

/// Post-softmax masking; rows are not renormalized.
pub fn cac_attention(
    probs: &AttentionTensor,
    regions: &LayerRegions,
    alignment: &TokenAlignment,
) -> Result<AttentionTensor> {
    require_kind(probs, AttentionKind::Probabilities)?;
    check_shapes(probs, regions, alignment)?;
    let mut out = probs.clone();
    for h in 0..probs.heads {
        for p in 0..probs.hw {
            for (n, v) in out.row_mut(h, p).iter_mut().enumerate() {
                *v *= regions.value(alignment.region_of(n), p);
            }
        }
    }
    Ok(out)
}

/// `softmax(W + logits)` with
/// `W = w'·(t/T)⁵·(1−S_{f(n)})·(B·M₊ − (1−B)·M₋)`.
pub fn dd_attention(
    logits: &AttentionTensor,
    regions: &LayerRegions,
    alignment: &TokenAlignment,
    cfg: &ControlConfig,
    ctx: &StepContext,
) -> Result<AttentionTensor> {
    require_kind(logits, AttentionKind::Logits)?;
    check_shapes(logits, regions, alignment)?;
    let factor = stat_factor(logits, cfg.logit_stats);
    let progress = if ctx.total_steps == 0 {
        0.0
    } else {
        (ctx.t as f64 / ctx.total_steps as f64).powi(5)
    };
    let coef = cfg.w_prime * progress;
    let damping: Vec<f64> = alignment
        .assignment()
        .iter()
        .map(|&r| 1.0 - regions.fractions().get(r))
        .collect();

    let mut out = logits.with_data(AttentionKind::Probabilities, logits.data.clone());
    for h in 0..logits.heads {
        let plane = logits.head_plane(h);
        let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max) * factor;
        let min = plane.iter().copied().fold(f64::INFINITY, f64::min) * factor;
        for p in 0..logits.hw {
            let row = out.row_mut(h, p);
            if coef != 0.0 {
                for (n, v) in row.iter_mut().enumerate() {
                    let unscaled = *v * factor;
                    let b = regions.value(alignment.region_of(n), p);
                    let up = max - unscaled;
                    let down = unscaled - min;
                    *v += coef * damping[n] * (b * up - (1.0 - b) * down);
                }
            }
            softmax_row_checked(row, h, p)?;
        }
    }
    Ok(out)
}

/// Boost schedule `W''` at a (possibly fractional) step `t`.
///
/// 1 above `T_s = T_thr + ρT/2`, 0 below `T_e = T_thr − ρT/2`, and a sine
/// ramp `½ + ½·sin(π·(t−T_thr)/(T_s−T_e))` in between. With `ρ = 0` this is
/// a step at `T_thr` taking the value ½ exactly there.
pub fn boost_schedule_at(t: f64, t_thr: f64, softness: f64, total_steps: f64) -> f64 {
    let width = softness * total_steps;
    if width <= 0.0 {
        return match t.partial_cmp(&t_thr) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        };
    }
    let start = t_thr + width / 2.0;
    let end = t_thr - width / 2.0;
    if t >= start {
        1.0
    } else if t <= end {
        0.0
    } else {
        0.5 + 0.5 * (PI * (t - t_thr) / (start - end)).sin()
    }
}

pub fn boost_schedule(ctx: &StepContext, cfg: &ControlConfig) -> f64 {
    boost_schedule_at(
        ctx.t as f64,
        cfg.t_thr as f64,
        cfg.softness,
        cfg.total_steps as f64,
    )
}

/// Attention redistribution with optional boosting of the region mass.
///
/// Per head and pixel: `m = Σ A_n·B_R[n]` from the plain softmax,
/// `m* = clamp(m·(1 + W_m·W'') + W_a·W''·(1 − S), 0, 1)` with `S` the area
/// fraction of the pixel's region, and the output is
/// `m*·A_local + (1 − m*)·A_global`. `A_local` is a softmax over region
/// tokens biased by `log` of their mask at the pixel; `A_global` is a softmax
/// over non-region tokens.
///
/// Degenerate pixels are not errors: a pixel with no local tokens gets
/// `A_global` (`m* = 0`), a prompt with no global tokens gives `A_local`
/// (`m* = 1`), and with neither the plain softmax is returned. Each case is
/// counted in the diagnostics.
pub fn redistribute(
    logits: &AttentionTensor,
    regions: &LayerRegions,
    alignment: &TokenAlignment,
    cfg: &ControlConfig,
    ctx: &StepContext,
) -> Result<(AttentionTensor, RedistDiagnostics)> {
    require_kind(logits, AttentionKind::Logits)?;
    check_shapes(logits, regions, alignment)?;
    let n_tokens = logits.n_tokens;
    let in_region = alignment.any_region();
    let has_global = in_region.iter().any(|&b| !b);
    let global_bias: Vec<f64> = in_region
        .iter()
        .map(|&b| if b { MASK_SENTINEL } else { 0.0 })
        .collect();
    let boost = boost_schedule(ctx, cfg);

    // Local biases depend only on the pixel, not the head.
    let mut local_bias = vec![0.0; logits.hw * n_tokens];
    let mut has_local = vec![false; logits.hw];
    for p in 0..logits.hw {
        let bias = &mut local_bias[p * n_tokens..(p + 1) * n_tokens];
        for n in 0..n_tokens {
            bias[n] = if in_region[n] {
                let b = regions.value(alignment.region_of(n), p);
                if b > 0.0 {
                    has_local[p] = true;
                    b.ln().max(MASK_SENTINEL)
                } else {
                    MASK_SENTINEL
                }
            } else {
                MASK_SENTINEL
            };
        }
    }

    let mut diag = RedistDiagnostics {
        m_mean: vec![0.0; logits.heads],
        m_star_mean: vec![0.0; logits.heads],
        boost,
        no_local_pixels: has_local.iter().filter(|&&l| !l).count() as u32,
        no_global_pixels: if has_global { 0 } else { logits.hw as u32 },
    };

    let mut out = logits.with_data(AttentionKind::Probabilities, vec![0.0; logits.data.len()]);
    let mut plain = vec![0.0; n_tokens];
    let mut local = vec![0.0; n_tokens];
    let mut global = vec![0.0; n_tokens];
    for h in 0..logits.heads {
        let (mut m_sum, mut m_star_sum) = (0.0, 0.0);
        for p in 0..logits.hw {
            let row = logits.row(h, p);
            plain.copy_from_slice(row);
            softmax_row_checked(&mut plain, h, p)?;
            let m: f64 = plain
                .iter()
                .zip(in_region)
                .filter(|(_, &b)| b)
                .map(|(a, _)| a)
                .sum();
            m_sum += m;

            let local_ok = has_local[p]
                && biased_softmax(
                    row,
                    &local_bias[p * n_tokens..(p + 1) * n_tokens],
                    &mut local,
                );
            let global_ok = has_global && biased_softmax(row, &global_bias, &mut global);
            let dst = out.row_mut(h, p);
            let m_star = match (local_ok, global_ok) {
                (true, true) => {
                    let s = regions.fractions().get(regions.pixel_region(p));
                    let m_star =
                        (m * (1.0 + cfg.w_m * boost) + cfg.w_a * boost * (1.0 - s)).clamp(0.0, 1.0);
                    for n in 0..n_tokens {
                        dst[n] = m_star * local[n] + (1.0 - m_star) * global[n];
                    }
                    m_star
                }
                (false, true) => {
                    dst.copy_from_slice(&global);
                    0.0
                }
                (true, false) => {
                    dst.copy_from_slice(&local);
                    1.0
                }
                (false, false) => {
                    dst.copy_from_slice(&plain);
                    m
                }
            };
            m_star_sum += m_star;
        }
        let hw = logits.hw.max(1) as f64;
        diag.m_mean[h] = m_sum / hw;
        diag.m_star_mean[h] = m_star_sum / hw;
    }
    Ok((out, diag))
}

/// `softmax(row + bias)` into `dst`; `false` if every entry ends up masked.
fn biased_softmax(row: &[f64], bias: &[f64], dst: &mut [f64]) -> bool {
    for ((d, &l), &b) in dst.iter_mut().zip(row).zip(bias) {
        *d = if b <= MASK_SENTINEL {
            MASK_SENTINEL
        } else {
            l + b
        };
    }
    softmax_in_place(dst)
}

/// Applies `cfg.method` to one attention site's logits.
pub fn apply_control(
    logits: &AttentionTensor,
    regions: &LayerRegions,
    alignment: &TokenAlignment,
    cfg: &ControlConfig,
    ctx: &StepContext,
) -> Result<ControlOutput> {
    require_kind(logits, AttentionKind::Logits)?;
    check_shapes(logits, regions, alignment)?;
    cfg.validate()?;
    let (attention, diagnostics) = match cfg.method {
        Method::None => (softmax_rows(logits)?, None),
        Method::Ediffi => (
            ediffi_attention(logits, regions, alignment, cfg, ctx)?,
            None,
        ),
        Method::Cac => (
            cac_attention(&softmax_rows(logits)?, regions, alignment)?,
            None,
        ),
        Method::DenseDiffusion => (dd_attention(logits, regions, alignment, cfg, ctx)?, None),
        Method::CaRedist => {
            let (a, d) = redistribute(logits, regions, alignment, cfg, ctx)?;
            (a, Some(d))
        }
    };
    Ok(ControlOutput {
        attention,
        diagnostics,
    })
}
