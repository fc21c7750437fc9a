//! Naive reference transcriptions of the control methods, written with plain
//! nested loops and `-inf` for `log 0`, plus a random instance generator.
//! Nothing here calls into the library's math.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use regattn_core::attention::AttentionTensor;
use regattn_core::control::{ControlConfig, LogitStats, Method, StepContext};
use regattn_core::region::{LayerRegions, RegionFractions, TokenAlignment};

/// `[head][pixel][token]`
pub type Grid = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct Instance {
    pub heads: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub d: usize,
    /// Scaled logits `QKᵀ/√d`.
    pub logits: Grid,
    /// `masks[r][p]` for `r = 1..=R`, stored at index `r - 1`.
    pub masks: Vec<Vec<f64>>,
    /// `S_r` for `r = 1..=R`, stored at index `r - 1`.
    pub fractions: Vec<f64>,
    pub token_region: Vec<usize>,
    pub sigma: f64,
    pub t: u32,
    pub total: u32,
    pub w_prime: f64,
    pub w_m: f64,
    pub w_a: f64,
    pub t_thr: u32,
    pub softness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    Binary,
    Soft,
    /// Binary masks where every pixel belongs to exactly one region.
    Partition,
}

impl Instance {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn r(&self) -> usize {
        self.masks.len()
    }

    /// `B_r[p]` with `B_0 = 1`.
    pub fn b(&self, r: usize, p: usize) -> f64 {
        if r == 0 {
            1.0
        } else {
            self.masks[r - 1][p]
        }
    }

    /// `S_r` with `S_0 = 1`.
    pub fn s(&self, r: usize) -> f64 {
        if r == 0 {
            1.0
        } else {
            self.fractions[r - 1]
        }
    }

    pub fn tensor(&self) -> AttentionTensor {
        let data = self.logits.iter().flatten().flatten().copied().collect();
        AttentionTensor::logits(self.heads, self.hw(), self.n, self.d, data).unwrap()
    }

    pub fn regions(&self) -> LayerRegions {
        LayerRegions::new(
            self.h,
            self.w,
            self.masks.clone(),
            RegionFractions::from_regions(self.fractions.iter().copied()),
        )
        .unwrap()
    }

    pub fn alignment(&self) -> TokenAlignment {
        TokenAlignment::new(self.token_region.clone())
    }

    pub fn config(&self, method: Method) -> ControlConfig {
        ControlConfig {
            method,
            w_prime: self.w_prime,
            w_m: self.w_m,
            w_a: self.w_a,
            t_thr: self.t_thr,
            softness: self.softness,
            total_steps: self.total,
            logit_stats: LogitStats::Unscaled,
        }
    }

    pub fn ctx(&self) -> StepContext {
        StepContext {
            t: self.t,
            total_steps: self.total,
            sigma: self.sigma,
        }
    }
}

pub fn random_instance(seed: u64, kind: MaskKind) -> Instance {
    let mut rng = SplitMix64::seed_from_u64(seed ^ 0x005e_ed0f_0ace);
    let heads = rng.random_range(1..=4);
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let n = rng.random_range(1..=16);
    let d = [1, 4, 8, 16, 40, 64][rng.random_range(0..6)];
    let hw = h * w;
    let r_max = if kind == MaskKind::Partition {
        hw.min(4)
    } else {
        4
    };
    let r = rng.random_range(if kind == MaskKind::Partition { 1 } else { 0 }..=r_max);
    let scale = rng.random_range(0.1..4.0);
    let logits = (0..heads)
        .map(|_| {
            (0..hw)
                .map(|_| {
                    (0..n)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();
    let masks: Vec<Vec<f64>> = match kind {
        MaskKind::Binary => (0..r)
            .map(|_| {
                let p_on = rng.random_range(0.0..1.0);
                (0..hw)
                    .map(|_| (rng.random_range(0.0..1.0) < p_on) as u8 as f64)
                    .collect()
            })
            .collect(),
        MaskKind::Soft => (0..r)
            .map(|_| {
                (0..hw)
                    .map(|_| match rng.random_range(0..4) {
                        0 => 0.0,
                        1 => 1.0,
                        _ => rng.random_range(0.0..1.0),
                    })
                    .collect()
            })
            .collect(),
        MaskKind::Partition => {
            // every region gets one pixel, the rest are assigned at random
            let mut owner: Vec<usize> = (0..hw).map(|_| rng.random_range(0..r)).collect();
            let mut pixels: Vec<usize> = (0..hw).collect();
            for region in 0..r {
                let k = rng.random_range(0..pixels.len());
                owner[pixels.swap_remove(k)] = region;
            }
            (0..r)
                .map(|region| owner.iter().map(|&o| (o == region) as u8 as f64).collect())
                .collect()
        }
    };
    let fractions = masks
        .iter()
        .map(|m| m.iter().filter(|&&v| v > 0.5).count() as f64 / hw as f64)
        .collect();
    let token_region = (0..n).map(|_| rng.random_range(0..=r)).collect();
    let total = [50u32, 1000][rng.random_range(0..2)];
    Instance {
        heads,
        h,
        w,
        n,
        d,
        logits,
        masks,
        fractions,
        token_region,
        sigma: rng.random_range(0.0..20.0),
        t: rng.random_range(0..=total),
        total,
        w_prime: rng.random_range(0.0..2.0),
        w_m: rng.random_range(0.0..2.0),
        w_a: rng.random_range(0.0..2.0),
        t_thr: rng.random_range(1..=total),
        softness: rng.random_range(0.0..=1.0),
    }
}

/// Softmax of a row that may contain `-inf`; an all `-inf` row yields `None`.
pub fn softmax(row: &[f64]) -> Option<Vec<f64>> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let e: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Some(e.iter().map(|x| x / z).collect())
}

pub fn plain(inst: &Instance) -> Grid {
    inst.logits
        .iter()
        .map(|head| head.iter().map(|row| softmax(row).unwrap()).collect())
        .collect()
}

/// Unscaled `QKᵀ` entries of one head.
fn unscaled(inst: &Instance, h: usize) -> Vec<f64> {
    let k = (inst.d as f64).sqrt();
    inst.logits[h].iter().flatten().map(|v| v * k).collect()
}

pub fn ediffi(inst: &Instance) -> Grid {
    let mut out = Vec::new();
    for h in 0..inst.heads {
        let qk = unscaled(inst, h);
        let mean = qk.iter().sum::<f64>() / qk.len() as f64;
        let std = (qk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / qk.len() as f64).sqrt();
        let mut head = Vec::new();
        for p in 0..inst.hw() {
            let row: Vec<f64> = (0..inst.n)
                .map(|n| {
                    let w = inst.w_prime
                        * (1.0 + inst.sigma * inst.sigma).ln()
                        * std
                        * inst.b(inst.token_region[n], p);
                    w + inst.logits[h][p][n]
                })
                .collect();
            head.push(softmax(&row).unwrap());
        }
        out.push(head);
    }
    out
}

pub fn cac(inst: &Instance) -> Grid {
    let base = plain(inst);
    (0..inst.heads)
        .map(|h| {
            (0..inst.hw())
                .map(|p| {
                    (0..inst.n)
                        .map(|n| base[h][p][n] * inst.b(inst.token_region[n], p))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn dense_diffusion(inst: &Instance) -> Grid {
    let mut out = Vec::new();
    let ramp = (inst.t as f64 / inst.total as f64).powi(5);
    for h in 0..inst.heads {
        let qk = unscaled(inst, h);
        let max = qk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = qk.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut head = Vec::new();
        for p in 0..inst.hw() {
            let row: Vec<f64> = (0..inst.n)
                .map(|n| {
                    let r = inst.token_region[n];
                    let b = inst.b(r, p);
                    let x = qk[p * inst.n + n];
                    let w = inst.w_prime
                        * ramp
                        * (1.0 - inst.s(r))
                        * (b * (max - x) - (1.0 - b) * (x - min));
                    w + inst.logits[h][p][n]
                })
                .collect();
            head.push(softmax(&row).unwrap());
        }
        out.push(head);
    }
    out
}

pub fn schedule(t: f64, t_thr: f64, softness: f64, total: f64) -> f64 {
    let ts = t_thr + softness * total / 2.0;
    let te = t_thr - softness * total / 2.0;
    if softness == 0.0 {
        // the sine branch is empty; the midpoint of the step sits at T_thr
        if t > t_thr {
            return 1.0;
        }
        if t < t_thr {
            return 0.0;
        }
        return 0.5;
    }
    if t >= ts {
        1.0
    } else if te >= t {
        0.0
    } else {
        0.5 + 0.5 * (std::f64::consts::PI * (t - t_thr) / (ts - te)).sin()
    }
}

/// Region of a pixel: the strongest covering region, lowest id on ties.
fn pixel_region(inst: &Instance, p: usize) -> usize {
    let mut best = (0, 0.0);
    for r in 1..=inst.r() {
        if inst.b(r, p) > best.1 {
            best = (r, inst.b(r, p));
        }
    }
    best.0
}

/// Redistribution output plus the per-pixel `m` used, `[head][pixel]`.
pub fn redistribute(inst: &Instance) -> (Grid, Vec<Vec<f64>>) {
    let base = plain(inst);
    let boost = schedule(
        inst.t as f64,
        inst.t_thr as f64,
        inst.softness,
        inst.total as f64,
    );
    let in_region: Vec<f64> = inst
        .token_region
        .iter()
        .map(|&r| (r > 0) as u8 as f64)
        .collect();
    let mut out = Vec::new();
    let mut ms = Vec::new();
    for h in 0..inst.heads {
        let mut head = Vec::new();
        let mut head_m = Vec::new();
        for p in 0..inst.hw() {
            let m: f64 = (0..inst.n).map(|n| base[h][p][n] * in_region[n]).sum();
            head_m.push(m);
            let local_row: Vec<f64> = (0..inst.n)
                .map(|n| {
                    (in_region[n] * inst.b(inst.token_region[n], p)).ln() + inst.logits[h][p][n]
                })
                .collect();
            let global_row: Vec<f64> = (0..inst.n)
                .map(|n| (1.0 - in_region[n]).ln() + inst.logits[h][p][n])
                .collect();
            let row = match (softmax(&local_row), softmax(&global_row)) {
                (Some(local), Some(global)) => {
                    let s = inst.s(pixel_region(inst, p));
                    let m_star = (m * (1.0 + inst.w_m * boost) + inst.w_a * boost * (1.0 - s))
                        .clamp(0.0, 1.0);
                    (0..inst.n)
                        .map(|n| m_star * local[n] + (1.0 - m_star) * global[n])
                        .collect()
                }
                (None, Some(global)) => global,
                (Some(local), None) => local,
                (None, None) => base[h][p].clone(),
            };
            head.push(row);
        }
        out.push(head);
        ms.push(head_m);
    }
    (out, ms)
}

pub fn oracle(inst: &Instance, method: Method) -> Grid {
    match method {
        Method::None => plain(inst),
        Method::Ediffi => ediffi(inst),
        Method::Cac => cac(inst),
        Method::DenseDiffusion => dense_diffusion(inst),
        Method::CaRedist => redistribute(inst).0,
    }
}

/// Largest absolute difference between a tensor and a grid.
pub fn max_abs_diff(t: &AttentionTensor, g: &Grid) -> f64 {
    t.data
        .iter()
        .zip(g.iter().flatten().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub mod wire_gen;
