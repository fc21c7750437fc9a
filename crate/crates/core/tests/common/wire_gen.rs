//! Random CATP requests and the frozen fixture's source request.

use rand::Rng;

use regattn_core::wire::{WireRequest, FLAG_HAS_FRACTIONS, FLAG_MASKS_AT_SOURCE};

pub const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/catp_v1_basic.bin");
pub const FIXTURE_RESPONSE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/fixtures/catp_v1_basic_response.bin"
);

/// Any finite f32, drawn from raw bit patterns.
pub fn finite_f32<R: Rng>(rng: &mut R) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

/// A structurally valid request with arbitrary finite payload values.
pub fn random_request<R: Rng>(rng: &mut R) -> WireRequest {
    let heads = rng.random_range(1..=4);
    let (layer_h, layer_w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let n_tokens = rng.random_range(1..=16);
    let n_regions = rng.random_range(0..=4);
    let mut flags = 0;
    let (mask_h, mask_w) = if rng.random_bool(0.5) {
        flags |= FLAG_MASKS_AT_SOURCE;
        (rng.random_range(1..=12), rng.random_range(1..=12))
    } else {
        (layer_h, layer_w)
    };
    let fractions = rng.random_bool(0.5).then(|| {
        flags |= FLAG_HAS_FRACTIONS;
        (0..n_regions).map(|_| rng.random_range(0.0..1.0)).collect()
    });
    let wild = rng.random_bool(0.5);
    let value = |rng: &mut R, lo: f32, hi: f32| {
        if wild {
            finite_f32(rng)
        } else {
            rng.random_range(lo..hi)
        }
    };
    let hw = layer_h * layer_w;
    WireRequest {
        flags,
        heads,
        hw,
        n_tokens,
        d: rng.random_range(1..=128),
        layer_h,
        layer_w,
        t: rng.random_range(0..=1000),
        total_steps: rng.random_range(1..=1000),
        sigma: value(rng, 0.0, 50.0),
        method: rng.random_range(0..=5),
        w_prime: value(rng, 0.0, 2.0),
        w_m: value(rng, 0.0, 2.0),
        w_a: value(rng, 0.0, 2.0),
        t_thr: rng.random_range(0..=1000),
        softness: value(rng, 0.0, 1.0),
        n_regions,
        mask_h,
        mask_w,
        logits: (0..heads * hw * n_tokens)
            .map(|_| value(rng, -8.0, 8.0))
            .collect(),
        token_regions: (0..n_tokens)
            .map(|_| rng.random_range(0..=n_regions as u16))
            .collect(),
        masks: (0..n_regions * mask_h * mask_w)
            .map(|_| value(rng, 0.0, 1.0))
            .collect(),
        fractions,
    }
}

/// Two heads over a 2×2 layer, three tokens (one global, one per region),
/// left/right half masks, redistribution with boosts.
pub fn fixture_request() -> WireRequest {
    let (heads, hw, n) = (2u32, 4u32, 3u32);
    WireRequest {
        flags: FLAG_HAS_FRACTIONS,
        heads,
        hw,
        n_tokens: n,
        d: 8,
        layer_h: 2,
        layer_w: 2,
        t: 500,
        total_steps: 1000,
        sigma: 1.5,
        method: 4,
        w_prime: 0.5,
        w_m: 1.0,
        w_a: 0.25,
        t_thr: 1000,
        softness: 0.8,
        n_regions: 2,
        mask_h: 2,
        mask_w: 2,
        logits: (0..heads * hw * n)
            .map(|i| i as f32 * 0.125 - 1.0)
            .collect(),
        token_regions: vec![0, 1, 2],
        masks: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        fractions: Some(vec![0.5, 0.5]),
    }
}
