//! A tiny deterministic two-branch denoiser with a DDIM loop.
//!
//! The main branch is a three-level U-Net (16→8→4, mid, 4→8→16) built from
//! per-pixel linear layers, with one cross-attention site per block. The
//! control branch copies the down path and mid block, adds a hint encoder for
//! the segmentation map, and feeds its features into the main skips through
//! scalar gates that start at zero. Every cross-attention site in both
//! branches goes through [`apply_control`]. Weights are random; outputs are
//! test fixtures rather than images.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{apply_values, attention_logits, AttentionError, AttentionTensor, Qkv};
use crate::control::{
    apply_control, boost_schedule, ControlConfig, ControlError, Method, StepContext,
};
use crate::region::{
    build_alignment, AnnotatedPrompt, LayerRegions, RegionError, RegionLayout, TokenAlignment,
};
use crate::rng::{split_mix, text_unit_vector, SplitMix64};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite latent after step {step} (t = {t})")]
    NonFiniteLatent { step: usize, t: u32 },
    #[error("timestep {t} outside 0..={total_steps}")]
    OutOfRange { t: u32, total_steps: u32 },
    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub latent_size: usize,
    pub latent_channels: usize,
    pub resolutions: [usize; 3],
    pub heads: usize,
    pub d: usize,
    pub token_embed_dim: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            latent_size: 16,
            latent_channels: 4,
            resolutions: [16, 8, 4],
            heads: 2,
            d: 8,
            token_embed_dim: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub total_steps: u32,
    pub steps: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Clamp the predicted clean latent to `[-1, 1]` before each update.
    pub clip_sample: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            clip_sample: true,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.steps == 0 || self.steps > self.total_steps {
            return Err(SimError::InvalidSampler(format!(
                "need 1 <= steps ({}) <= total_steps ({})",
                self.steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1` and linear `β_1..β_T`.
    pub fn alphas_cumprod(&self) -> Vec<f64> {
        let t_max = self.total_steps as usize;
        let mut out = Vec::with_capacity(t_max + 1);
        out.push(1.0);
        let mut acc = 1.0;
        for s in 1..=t_max {
            let frac = if t_max > 1 {
                (s - 1) as f64 / (t_max - 1) as f64
            } else {
                0.0
            };
            let beta = self.beta_start + (self.beta_end - self.beta_start) * frac;
            acc *= 1.0 - beta;
            out.push(acc);
        }
        out
    }

    /// Denoising timesteps, from `T` down to `T/steps`; the final update
    /// lands on `t = 0`.
    pub fn timesteps(&self) -> Vec<u32> {
        let (total, steps) = (self.total_steps as u64, self.steps as u64);
        (0..steps)
            .map(|i| (total * (steps - i) / steps) as u32)
            .collect()
    }
}

/// Noise level `σ_t = √((1−ᾱ_t)/ᾱ_t)`.
pub fn sigma_at(t: u32, scfg: &SamplerConfig) -> Result<f64> {
    if t > scfg.total_steps {
        return Err(SimError::OutOfRange {
            t,
            total_steps: scfg.total_steps,
        });
    }
    let acp = scfg.alphas_cumprod()[t as usize];
    Ok(((1.0 - acp) / acp).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    n_in: usize,
    n_out: usize,
    /// `n_out × n_in`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    fn random(rng: &mut SplitMix64, n_in: usize, n_out: usize) -> Self {
        let mut draw = |n| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.1..0.1)).collect() };
        let weight = draw(n_in * n_out);
        let bias = draw(n_out);
        Self {
            n_in,
            n_out,
            weight,
            bias,
        }
    }

    /// Applies to a stack of row vectors of width `n_in`.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.n_in;
        let mut out = Vec::with_capacity(rows * self.n_out);
        for row in x.chunks_exact(self.n_in) {
            for (o, w) in self.weight.chunks_exact(self.n_in).enumerate() {
                out.push(self.bias[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        out
    }

    fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.iter().chain(&self.bias).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionSite {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    name: String,
    attn: AttentionSite,
    mlp: Linear,
}

impl Block {
    fn random(rng: &mut SplitMix64, name: &str, width: usize, embed: usize) -> Self {
        Self {
            name: name.to_string(),
            attn: AttentionSite {
                query: Linear::random(rng, width, width),
                key: Linear::random(rng, embed, width),
                value: Linear::random(rng, embed, width),
                out: Linear::random(rng, width, width),
            },
            mlp: Linear::random(rng, width, width),
        }
    }

    fn params(&self) -> impl Iterator<Item = f64> + '_ {
        let a = &self.attn;
        a.query
            .params()
            .chain(a.key.params())
            .chain(a.value.params())
            .chain(a.out.params())
            .chain(self.mlp.params())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ControlBranch {
    hint: Linear,
    input: Linear,
    time: Linear,
    down: Vec<Block>,
    mid: Block,
}

/// One attention-site observation for one head at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: u32,
    pub sigma: f64,
    pub layer: String,
    pub resolution: usize,
    pub head: usize,
    pub row_sum_min: f64,
    pub row_sum_max: f64,
    /// Largest per-pixel attention on tokens whose region mask is 0 there.
    pub wrong_region_mass_max: f64,
    /// Boost schedule value `W''(t)`.
    pub boost: f64,
    /// `ln(1 + σ²)`.
    pub noise_factor: f64,
    pub m_mean: Option<f64>,
    pub m_star_mean: Option<f64>,
    pub no_local_pixels: Option<u32>,
}

/// Token embeddings and their region alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptConditioning {
    pub tokens: Vec<String>,
    /// `n_tokens × token_embed_dim`
    pub embeddings: Vec<f64>,
    pub alignment: TokenAlignment,
}

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

impl PromptConditioning {
    /// Whitespace tokens of the plain prompt framed by start/end tokens, each
    /// embedded as a hash-seeded unit vector.
    pub fn from_prompt(
        prompt: &AnnotatedPrompt,
        layout: &RegionLayout,
        embed_dim: usize,
    ) -> Result<Self> {
        let len = prompt.char_len();
        let mut spans = vec![(0, 0)];
        spans.extend(crate::region::whitespace_token_spans(&prompt.plain));
        spans.push((len, len));
        let alignment = build_alignment(prompt, &spans, &layout.tag_map())?;
        alignment.validate(layout.n_regions())?;
        let chars: Vec<char> = prompt.plain.chars().collect();
        let last = spans.len() - 1;
        let tokens: Vec<String> = spans
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| match i {
                0 => START_TOKEN.to_string(),
                i if i == last => END_TOKEN.to_string(),
                _ => chars[s..e].iter().collect(),
            })
            .collect();
        let embeddings = tokens
            .iter()
            .flat_map(|t| text_unit_vector(t, embed_dim))
            .collect();
        Ok(Self {
            tokens,
            embeddings,
            alignment,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Features<'a> {
    size: usize,
    data: &'a [f64],
}

struct SiteInputs<'a> {
    prompt: &'a PromptConditioning,
    layers: &'a BTreeMap<usize, LayerRegions>,
    control: &'a ControlConfig,
    ctx: StepContext,
    step: usize,
}

/// Toy denoiser. Construct with [`ToyModel::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    width: usize,
    input: Linear,
    time: Linear,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    output: Linear,
    control: ControlBranch,
    gates: [f64; 4],
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Self {
        let mut rng = split_mix(cfg.seed);
        let width = cfg.heads * cfg.d;
        let e = cfg.token_embed_dim;
        let [r0, r1, r2] = cfg.resolutions;
        let input = Linear::random(&mut rng, cfg.latent_channels, width);
        let time = Linear::random(&mut rng, width, width);
        let down = vec![
            Block::random(&mut rng, &format!("main.down{r0}"), width, e),
            Block::random(&mut rng, &format!("main.down{r1}"), width, e),
            Block::random(&mut rng, &format!("main.down{r2}"), width, e),
        ];
        let mid = Block::random(&mut rng, &format!("main.mid{r2}"), width, e);
        let up = vec![
            Block::random(&mut rng, &format!("main.up{r2}"), width, e),
            Block::random(&mut rng, &format!("main.up{r1}"), width, e),
            Block::random(&mut rng, &format!("main.up{r0}"), width, e),
        ];
        let output = Linear::random(&mut rng, width, cfg.latent_channels);
        let hint = Linear::random(&mut rng, 3, width);
        let rename = |b: &Block| Block {
            name: b.name.replacen("main.", "control.", 1),
            ..b.clone()
        };
        let control = ControlBranch {
            hint,
            input: input.clone(),
            time: time.clone(),
            down: down.iter().map(rename).collect(),
            mid: rename(&mid),
        };
        Self {
            cfg,
            width,
            input,
            time,
            down,
            mid,
            up,
            output,
            control,
            gates: [0.0; 4],
        }
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Gates applied to the control features at the 16, 8 and 4 skips and the
    /// mid block.
    pub fn gates(&self) -> [f64; 4] {
        self.gates
    }

    pub fn set_gates(&mut self, gates: [f64; 4]) {
        self.gates = gates;
    }

    /// Every parameter in a fixed order.
    pub fn parameters(&self) -> Vec<f64> {
        let c = &self.control;
        self.input
            .params()
            .chain(self.time.params())
            .chain(self.down.iter().flat_map(Block::params))
            .chain(self.mid.params())
            .chain(self.up.iter().flat_map(Block::params))
            .chain(self.output.params())
            .chain(c.hint.params())
            .chain(c.input.params())
            .chain(c.time.params())
            .chain(c.down.iter().flat_map(Block::params))
            .chain(c.mid.params())
            .chain(self.gates)
            .collect()
    }

    /// Names of the cross-attention sites, main branch first.
    pub fn site_names(&self) -> Vec<String> {
        self.down
            .iter()
            .chain([&self.mid])
            .chain(&self.up)
            .chain(&self.control.down)
            .chain([&self.control.mid])
            .map(|b| b.name.clone())
            .collect()
    }

    fn time_embedding(&self, t: u32) -> Vec<f64> {
        let half = self.width / 2;
        let mut emb = Vec::with_capacity(self.width);
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            emb.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            emb.push((t as f64 * freq).cos());
        }
        emb.resize(self.width, 0.0);
        emb
    }

    fn run_block(
        &self,
        block: &Block,
        h: &mut [f64],
        size: usize,
        inputs: &SiteInputs<'_>,
        traces: &mut Vec<TraceRecord>,
    ) -> Result<()> {
        let delta = self.attention(block, Features { size, data: h }, inputs, traces)?;
        for (x, dx) in h.iter_mut().zip(&delta) {
            *x += dx;
        }
        let mlp = block.mlp.apply(h);
        for (x, m) in h.iter_mut().zip(&mlp) {
            *x += m.tanh();
        }
        Ok(())
    }

    fn attention(
        &self,
        block: &Block,
        h: Features<'_>,
        inputs: &SiteInputs<'_>,
        traces: &mut Vec<TraceRecord>,
    ) -> Result<Vec<f64>> {
        let (heads, d) = (self.cfg.heads, self.cfg.d);
        let hw = h.size * h.size;
        let n = inputs.prompt.n_tokens();
        let site = &block.attn;
        let q = site.query.apply(h.data);
        let k = site.key.apply(&inputs.prompt.embeddings);
        let v = site.value.apply(&inputs.prompt.embeddings);
        let qkv = Qkv {
            heads,
            hw,
            n_tokens: n,
            d,
            d_v: d,
            q: split_heads(&q, hw, heads, d),
            k: split_heads(&k, n, heads, d),
            v: split_heads(&v, n, heads, d),
        };
        let logits = attention_logits(&qkv)?;
        let regions = inputs
            .layers
            .get(&h.size)
            .ok_or_else(|| SimError::Shape(format!("no masks at resolution {}", h.size)))?;
        let out = apply_control(
            &logits,
            regions,
            &inputs.prompt.alignment,
            inputs.control,
            &inputs.ctx,
        )?;
        record_traces(
            block,
            &out.attention,
            regions,
            inputs,
            out.diagnostics.as_ref(),
            h.size,
            traces,
        );
        let context = apply_values(&out.attention, &qkv.v, d)?;
        Ok(site.out.apply(&merge_heads(&context, hw, heads, d)))
    }

    /// Predicts the noise for latent `z` (`size × size × channels`).
    fn forward(
        &self,
        z: &[f64],
        hint: Option<&[f64]>,
        inputs: &SiteInputs<'_>,
        traces: &mut Vec<TraceRecord>,
    ) -> Result<Vec<f64>> {
        let size = self.cfg.latent_size;
        let temb = self.time_embedding(inputs.ctx.t);

        let control_feats = match hint {
            Some(hint) => Some(self.control_forward(z, hint, &temb, inputs, traces)?),
            None => None,
        };

        let mut h = self.input.apply(z);
        add_broadcast(&mut h, &self.time.apply(&temb));
        let mut skips = Vec::with_capacity(3);
        let mut cur = size;
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = avg_pool2(&h, cur, self.width);
                cur /= 2;
            }
            self.run_block(block, &mut h, cur, inputs, traces)?;
            skips.push(h.clone());
        }
        self.run_block(&self.mid, &mut h, cur, inputs, traces)?;
        if let Some(ctrl) = &control_feats {
            for (s, (feat, gate)) in skips.iter_mut().zip(ctrl.iter().zip(self.gates)) {
                add_gated(s, feat, gate);
            }
            add_gated(&mut h, &ctrl[3], self.gates[3]);
        }
        for (i, block) in self.up.iter().enumerate() {
            if i > 0 {
                h = upsample2(&h, cur, self.width);
                cur *= 2;
            }
            for (x, s) in h.iter_mut().zip(&skips[2 - i]) {
                *x += s;
            }
            self.run_block(block, &mut h, cur, inputs, traces)?;
        }
        Ok(self.output.apply(&h))
    }

    /// Control features at the three skip resolutions and the mid block.
    fn control_forward(
        &self,
        z: &[f64],
        hint: &[f64],
        temb: &[f64],
        inputs: &SiteInputs<'_>,
        traces: &mut Vec<TraceRecord>,
    ) -> Result<Vec<Vec<f64>>> {
        let c = &self.control;
        let mut h = c.input.apply(z);
        add_broadcast(&mut h, &c.time.apply(temb));
        for (x, y) in h.iter_mut().zip(c.hint.apply(hint)) {
            *x += y;
        }
        let mut feats = Vec::with_capacity(4);
        let mut cur = self.cfg.latent_size;
        for (i, block) in c.down.iter().enumerate() {
            if i > 0 {
                h = avg_pool2(&h, cur, self.width);
                cur /= 2;
            }
            self.run_block(block, &mut h, cur, inputs, traces)?;
            feats.push(h.clone());
        }
        self.run_block(&c.mid, &mut h, cur, inputs, traces)?;
        feats.push(h);
        Ok(feats)
    }
}

fn record_traces(
    block: &Block,
    attention: &AttentionTensor,
    regions: &LayerRegions,
    inputs: &SiteInputs<'_>,
    diag: Option<&crate::control::RedistDiagnostics>,
    resolution: usize,
    traces: &mut Vec<TraceRecord>,
) {
    let alignment = &inputs.prompt.alignment;
    let boost = boost_schedule(&inputs.ctx, inputs.control);
    let noise_factor = (inputs.ctx.sigma * inputs.ctx.sigma).ln_1p();
    for head in 0..attention.heads {
        let (mut lo, mut hi, mut wrong) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for p in 0..attention.hw {
            let row = attention.row(head, p);
            let sum: f64 = row.iter().sum();
            lo = lo.min(sum);
            hi = hi.max(sum);
            let w: f64 = row
                .iter()
                .enumerate()
                .filter(|&(n, _)| {
                    alignment.any_region()[n] && regions.value(alignment.region_of(n), p) == 0.0
                })
                .map(|(_, a)| a)
                .sum();
            wrong = wrong.max(w);
        }
        traces.push(TraceRecord {
            step: inputs.step,
            t: inputs.ctx.t,
            sigma: inputs.ctx.sigma,
            layer: block.name.clone(),
            resolution,
            head,
            row_sum_min: lo,
            row_sum_max: hi,
            wrong_region_mass_max: wrong,
            boost,
            noise_factor,
            m_mean: diag.map(|d| d.m_mean[head]),
            m_star_mean: diag.map(|d| d.m_star_mean[head]),
            no_local_pixels: diag.map(|d| d.no_local_pixels),
        });
    }
}

/// `rows × (heads·d)` → `heads × rows × d`
fn split_heads(x: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for h in 0..heads {
            out[(h * rows + r) * d..(h * rows + r + 1) * d]
                .copy_from_slice(&x[r * heads * d + h * d..r * heads * d + (h + 1) * d]);
        }
    }
    out
}

/// `heads × rows × d` → `rows × (heads·d)`
fn merge_heads(x: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for h in 0..heads {
        for r in 0..rows {
            out[r * heads * d + h * d..r * heads * d + (h + 1) * d]
                .copy_from_slice(&x[(h * rows + r) * d..(h * rows + r + 1) * d]);
        }
    }
    out
}

fn add_broadcast(x: &mut [f64], v: &[f64]) {
    for row in x.chunks_exact_mut(v.len()) {
        for (a, b) in row.iter_mut().zip(v) {
            *a += b;
        }
    }
}

fn add_gated(x: &mut [f64], feat: &[f64], gate: f64) {
    for (a, b) in x.iter_mut().zip(feat) {
        *a += gate * b;
    }
}

fn avg_pool2(x: &[f64], size: usize, ch: usize) -> Vec<f64> {
    let half = size / 2;
    let mut out = vec![0.0; half * half * ch];
    for y in 0..half {
        for xx in 0..half {
            for c in 0..ch {
                let at = |yy: usize, xx: usize| x[(yy * size + xx) * ch + c];
                out[(y * half + xx) * ch + c] = 0.25
                    * (at(2 * y, 2 * xx)
                        + at(2 * y, 2 * xx + 1)
                        + at(2 * y + 1, 2 * xx)
                        + at(2 * y + 1, 2 * xx + 1));
            }
        }
    }
    out
}

fn upsample2(x: &[f64], size: usize, ch: usize) -> Vec<f64> {
    let big = size * 2;
    let mut out = vec![0.0; big * big * ch];
    for y in 0..big {
        for xx in 0..big {
            let src = ((y / 2) * size + xx / 2) * ch;
            out[(y * big + xx) * ch..(y * big + xx + 1) * ch].copy_from_slice(&x[src..src + ch]);
        }
    }
    out
}

/// Everything a sampling run needs besides the model.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub prompt: &'a PromptConditioning,
    pub layout: &'a RegionLayout,
    /// Control hint, `latent_size × latent_size × 3`; `None` disables the
    /// control branch.
    pub hint: Option<&'a [f64]>,
    pub control: ControlConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `latent_size × latent_size × latent_channels`
    pub latent: Vec<f64>,
    pub traces: Vec<TraceRecord>,
}

/// Deterministic DDIM (η = 0) sampling from `z_T ~ N(0, I)`.
pub fn ddim_sample(model: &ToyModel, req: &SampleRequest<'_>) -> Result<SampleOutput> {
    let cfg = model.config();
    let scfg = &req.sampler;
    scfg.validate()?;
    req.control.validate()?;
    if req.control.total_steps != scfg.total_steps {
        return Err(SimError::InvalidSampler(format!(
            "control total_steps {} != sampler total_steps {}",
            req.control.total_steps, scfg.total_steps
        )));
    }
    if req.prompt.embeddings.len() != req.prompt.n_tokens() * cfg.token_embed_dim {
        return Err(SimError::Shape("prompt embedding width".into()));
    }
    let size = cfg.latent_size;
    if let Some(h) = req.hint {
        if h.len() != size * size * 3 {
            return Err(SimError::Shape(format!(
                "hint has {} values, expected {}",
                h.len(),
                size * size * 3
            )));
        }
    }
    req.prompt.alignment.validate(req.layout.n_regions())?;

    let mut layers = BTreeMap::new();
    for &r in &cfg.resolutions {
        layers.insert(r, LayerRegions::from_layout(req.layout, r, r)?);
    }

    let acp = scfg.alphas_cumprod();
    let mut rng = split_mix(req.seed);
    let mut z: Vec<f64> = (0..size * size * cfg.latent_channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();

    let timesteps = scfg.timesteps();
    let mut traces = Vec::new();
    for (step, &t) in timesteps.iter().enumerate() {
        let prev = timesteps.get(step + 1).copied().unwrap_or(0);
        let ctx = StepContext {
            t,
            total_steps: scfg.total_steps,
            sigma: sigma_at(t, scfg)?,
        };
        let inputs = SiteInputs {
            prompt: req.prompt,
            layers: &layers,
            control: &req.control,
            ctx,
            step,
        };
        let eps = model.forward(&z, req.hint, &inputs, &mut traces)?;
        let (a_t, a_prev) = (acp[t as usize], acp[prev as usize]);
        for (zi, &e) in z.iter_mut().zip(&eps) {
            let mut x0 = (*zi - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
            if scfg.clip_sample {
                x0 = x0.clamp(-1.0, 1.0);
            }
            *zi = a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteLatent { step, t });
        }
    }
    Ok(SampleOutput { latent: z, traces })
}

/// Convenience constructor for the method sweep used by tests and the CLI.
pub fn preset(method: Method, total_steps: u32) -> ControlConfig {
    let cfg = ControlConfig::new(method, total_steps);
    match method {
        Method::CaRedist => cfg.with_boost(1.0, 0.3),
        _ => cfg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{parse_annotated_prompt, Mask, Region};

    fn layout() -> RegionLayout {
        let left = Mask::from_fn(16, 16, |_, x| (x < 8) as u8 as f64).unwrap();
        let right = Mask::from_fn(16, 16, |_, x| (x >= 8) as u8 as f64).unwrap();
        RegionLayout::new(
            16,
            16,
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
    fn sigma_endpoints() {
        let s = SamplerConfig::default();
        assert_eq!(sigma_at(0, &s).unwrap(), 0.0);
        assert!(sigma_at(1000, &s).unwrap() > 100.0);
        assert!(matches!(
            sigma_at(1001, &s),
            Err(SimError::OutOfRange { .. })
        ));
    }

    #[test]
    fn timesteps_count_down() {
        let ts = SamplerConfig::default().timesteps();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[1], 980);
        assert_eq!(*ts.last().unwrap(), 20);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ToyModel::new(ToyModelConfig::default());
        let b = ToyModel::new(ToyModelConfig::default());
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(a.gates(), [0.0; 4]);
        let c = ToyModel::new(ToyModelConfig {
            seed: 1,
            ..Default::default()
        });
        assert_ne!(a.parameters(), c.parameters());
        assert_eq!(a.site_names().len(), 11);
    }

    #[test]
    fn head_split_round_trip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        assert_eq!(merge_heads(&split_heads(&x, 3, 2, 4), 3, 2, 4), x);
    }

    #[test]
    fn short_run_is_finite() {
        let layout = layout();
        let prompt = parse_annotated_prompt("a {red ball:L} and {a blue cube:R}").unwrap();
        let cond = PromptConditioning::from_prompt(&prompt, &layout, 8).unwrap();
        assert_eq!(cond.alignment.assignment(), [0, 0, 1, 1, 0, 2, 2, 2, 0]);
        let model = ToyModel::new(ToyModelConfig::default());
        let hint = vec![0.5; 16 * 16 * 3];
        let sampler = SamplerConfig {
            steps: 5,
            ..Default::default()
        };
        let out = ddim_sample(
            &model,
            &SampleRequest {
                prompt: &cond,
                layout: &layout,
                hint: Some(&hint),
                control: preset(Method::Ediffi, 1000),
                sampler,
                seed: 3,
            },
        )
        .unwrap();
        assert!(out.latent.iter().all(|v| v.is_finite()));
        assert_eq!(out.traces.len(), 5 * 11 * 2);
    }
}
