//! CATP: the binary protocol for running attention control out of process,
//! and CATE, the embedding-provider messages that share its framing.
//!
//! Every message travels as a `u32` little-endian length followed by that
//! many bytes. All integers and floats are little-endian, with no padding.
//!
//! Request (`CATP` v1):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CATP"` |
//! | version | u16 = 1 |
//! | flags | u16: bit 0 masks at source resolution, bit 1 fractions present |
//! | heads, hw, n_tokens, d, layer_h, layer_w, t, total_steps | u32 each |
//! | sigma | f32 |
//! | method | u8 (0 none, 1 ediffi, 2 cac, 3 dense_diffusion, 4 ca_redist) |
//! | w_prime, w_m, w_a | f32 each |
//! | t_thr | u32 |
//! | softness | f32 |
//! | n_regions, mask_h, mask_w | u32 each |
//! | logits | f32 × heads·hw·n_tokens (scaled, row-major) |
//! | token regions | u16 × n_tokens |
//! | masks | f32 × n_regions·mask_h·mask_w |
//! | fractions | f32 × n_regions, only with flag bit 1 |
//!
//! Response: magic, version u16, status u8. Status 0 is followed by
//! heads, hw, n_tokens (u32), the probabilities (f32 × heads·hw·n_tokens),
//! per-head mean region mass (f32 × heads, zero unless the method is
//! ca_redist) and the no-local / no-global pixel counters (u32 each). Any
//! other status is followed by a u32 length and a UTF-8 message.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::attention::AttentionTensor;
use crate::control::{apply_control, ControlConfig, LogitStats, Method, StepContext};
use crate::eval::{EmbeddingProvider, EvalError};
use crate::image::RgbImage;
use crate::region::{rescale_mask, LayerRegions, Mask, RegionFractions, TokenAlignment};

pub const MAGIC: [u8; 4] = *b"CATP";
pub const EMBED_MAGIC: [u8; 4] = *b"CATE";
pub const VERSION: u16 = 1;
pub const FLAG_MASKS_AT_SOURCE: u16 = 1;
pub const FLAG_HAS_FRACTIONS: u16 = 2;
pub const HEADER_LEN: usize = 77;
/// Frames above this size are drained and answered with a length error.
pub const MAX_FRAME: u32 = 1 << 28;

pub const STATUS_OK: u8 = 0;
pub const STATUS_BAD_MAGIC: u8 = 1;
pub const STATUS_VERSION: u8 = 2;
pub const STATUS_LENGTH: u8 = 3;
pub const STATUS_NON_FINITE: u8 = 4;
pub const STATUS_INVALID_HEADER: u8 = 5;
pub const STATUS_UNKNOWN_METHOD: u8 = 6;
pub const STATUS_COMPUTE: u8 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionUnsupported(u16),
    #[error("length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("non-finite value in {field} at index {index}")]
    NonFinitePayload { field: &'static str, index: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("unknown method code {0}")]
    UnknownMethod(u8),
    #[error("compute failed: {0}")]
    Compute(String),
    #[error("remote error {status}: {message}")]
    Remote { status: u8, message: String },
}

impl WireError {
    pub fn status(&self) -> u8 {
        match self {
            WireError::BadMagic(_) => STATUS_BAD_MAGIC,
            WireError::VersionUnsupported(_) => STATUS_VERSION,
            WireError::LengthMismatch { .. } => STATUS_LENGTH,
            WireError::NonFinitePayload { .. } => STATUS_NON_FINITE,
            WireError::InvalidHeader(_) => STATUS_INVALID_HEADER,
            WireError::UnknownMethod(_) => STATUS_UNKNOWN_METHOD,
            WireError::Compute(_) => STATUS_COMPUTE,
            WireError::Remote { status, .. } => *status,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub flags: u16,
    pub heads: u32,
    pub hw: u32,
    pub n_tokens: u32,
    pub d: u32,
    pub layer_h: u32,
    pub layer_w: u32,
    pub t: u32,
    pub total_steps: u32,
    pub sigma: f32,
    pub method: u8,
    pub w_prime: f32,
    pub w_m: f32,
    pub w_a: f32,
    pub t_thr: u32,
    pub softness: f32,
    pub n_regions: u32,
    pub mask_h: u32,
    pub mask_w: u32,
    pub logits: Vec<f32>,
    pub token_regions: Vec<u16>,
    pub masks: Vec<f32>,
    pub fractions: Option<Vec<f32>>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn f32s(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.f32()).collect()
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn bytes(&mut self, n: usize) -> &'a [u8] {
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        out
    }
}

fn check_finite(field: &'static str, values: &[f32]) -> Result<(), WireError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(WireError::NonFinitePayload { field, index }),
        None => Ok(()),
    }
}

fn check_prefix(buf: &[u8], magic: [u8; 4], min_len: usize) -> Result<(), WireError> {
    if buf.len() < 4 || buf[..4] != magic {
        let mut found = [0u8; 4];
        let n = buf.len().min(4);
        found[..n].copy_from_slice(&buf[..n]);
        return Err(WireError::BadMagic(found));
    }
    if buf.len() < 6 {
        return Err(WireError::LengthMismatch {
            expected: min_len as u64,
            actual: buf.len() as u64,
        });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(WireError::VersionUnsupported(version));
    }
    if buf.len() < min_len {
        return Err(WireError::LengthMismatch {
            expected: min_len as u64,
            actual: buf.len() as u64,
        });
    }
    Ok(())
}

impl WireRequest {
    /// Byte length implied by the header fields, or `None` on overflow.
    pub fn expected_len(&self) -> Option<u64> {
        let (heads, hw, n) = (self.heads as u64, self.hw as u64, self.n_tokens as u64);
        let (r, mh, mw) = (
            self.n_regions as u64,
            self.mask_h as u64,
            self.mask_w as u64,
        );
        let logits = heads.checked_mul(hw)?.checked_mul(n)?.checked_mul(4)?;
        let masks = r.checked_mul(mh)?.checked_mul(mw)?.checked_mul(4)?;
        let fractions = if self.flags & FLAG_HAS_FRACTIONS != 0 {
            r * 4
        } else {
            0
        };
        (HEADER_LEN as u64)
            .checked_add(logits)?
            .checked_add(n * 2)?
            .checked_add(masks)?
            .checked_add(fractions)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.expected_len().unwrap_or(0) as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        for v in [
            self.heads,
            self.hw,
            self.n_tokens,
            self.d,
            self.layer_h,
            self.layer_w,
            self.t,
            self.total_steps,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.sigma.to_le_bytes());
        out.push(self.method);
        for v in [self.w_prime, self.w_m, self.w_a] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.t_thr.to_le_bytes());
        out.extend_from_slice(&self.softness.to_le_bytes());
        for v in [self.n_regions, self.mask_h, self.mask_w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.token_regions {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.masks.iter().chain(self.fractions.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        check_prefix(buf, MAGIC, HEADER_LEN)?;
        let mut c = Cursor { buf, pos: 6 };
        let mut req = WireRequest {
            flags: c.u16(),
            heads: c.u32(),
            hw: c.u32(),
            n_tokens: c.u32(),
            d: c.u32(),
            layer_h: c.u32(),
            layer_w: c.u32(),
            t: c.u32(),
            total_steps: c.u32(),
            sigma: c.f32(),
            method: c.u8(),
            w_prime: c.f32(),
            w_m: c.f32(),
            w_a: c.f32(),
            t_thr: c.u32(),
            softness: c.f32(),
            n_regions: c.u32(),
            mask_h: c.u32(),
            mask_w: c.u32(),
            logits: Vec::new(),
            token_regions: Vec::new(),
            masks: Vec::new(),
            fractions: None,
        };
        debug_assert_eq!(c.pos, HEADER_LEN);
        let expected = req
            .expected_len()
            .ok_or_else(|| WireError::InvalidHeader("payload size overflows".into()))?;
        if expected != buf.len() as u64 {
            return Err(WireError::LengthMismatch {
                expected,
                actual: buf.len() as u64,
            });
        }
        req.validate_header()?;
        req.logits = c.f32s((req.heads * req.hw * req.n_tokens) as usize);
        req.token_regions = (0..req.n_tokens).map(|_| c.u16()).collect();
        req.masks = c.f32s((req.n_regions * req.mask_h * req.mask_w) as usize);
        if req.flags & FLAG_HAS_FRACTIONS != 0 {
            req.fractions = Some(c.f32s(req.n_regions as usize));
        }
        debug_assert_eq!(c.remaining(), 0);
        req.validate_payload()?;
        Ok(req)
    }

    fn validate_header(&self) -> Result<(), WireError> {
        let bad = |m: String| Err(WireError::InvalidHeader(m));
        if self.flags & !(FLAG_MASKS_AT_SOURCE | FLAG_HAS_FRACTIONS) != 0 {
            return bad(format!("unknown flag bits {:#06x}", self.flags));
        }
        if self.heads == 0 || self.hw == 0 || self.n_tokens == 0 || self.d == 0 {
            return bad("heads, hw, n_tokens and d must be positive".into());
        }
        if self.layer_h as u64 * self.layer_w as u64 != self.hw as u64 {
            return bad(format!(
                "hw {} != layer_h {} x layer_w {}",
                self.hw, self.layer_h, self.layer_w
            ));
        }
        if self.n_regions > 0 && (self.mask_h == 0 || self.mask_w == 0) {
            return bad("mask dimensions must be positive".into());
        }
        if self.flags & FLAG_MASKS_AT_SOURCE == 0
            && self.n_regions > 0
            && (self.mask_h, self.mask_w) != (self.layer_h, self.layer_w)
        {
            return bad("masks must match the layer size unless sent at source resolution".into());
        }
        Ok(())
    }

    fn validate_payload(&self) -> Result<(), WireError> {
        for (field, v) in [
            ("sigma", self.sigma),
            ("w_prime", self.w_prime),
            ("w_m", self.w_m),
            ("w_a", self.w_a),
            ("softness", self.softness),
        ] {
            check_finite(field, &[v])?;
        }
        check_finite("logits", &self.logits)?;
        check_finite("masks", &self.masks)?;
        if let Some(f) = &self.fractions {
            check_finite("fractions", f)?;
        }
        Ok(())
    }

    /// Method, config and step context carried by the header.
    pub fn control(&self) -> Result<(ControlConfig, StepContext), WireError> {
        let method =
            Method::from_code(self.method).map_err(|_| WireError::UnknownMethod(self.method))?;
        let cfg = ControlConfig {
            method,
            w_prime: self.w_prime as f64,
            w_m: self.w_m as f64,
            w_a: self.w_a as f64,
            t_thr: self.t_thr,
            softness: self.softness as f64,
            total_steps: self.total_steps,
            logit_stats: LogitStats::Unscaled,
        };
        cfg.validate()
            .map_err(|e| WireError::InvalidHeader(e.to_string()))?;
        let ctx = StepContext {
            t: self.t,
            total_steps: self.total_steps,
            sigma: self.sigma as f64,
        };
        Ok((cfg, ctx))
    }

    /// Region masks at the layer's resolution, with fractions taken from
    /// the request or measured on the masks as sent.
    pub fn layer_regions(&self) -> Result<LayerRegions, WireError> {
        let (lh, lw) = (self.layer_h as usize, self.layer_w as usize);
        let (mh, mw) = (self.mask_h as usize, self.mask_w as usize);
        let plane = mh * mw;
        let source: Vec<Mask> = (0..self.n_regions as usize)
            .map(|r| {
                let data = self.masks[r * plane..(r + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                Mask::new(mh, mw, data)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| WireError::InvalidHeader(e.to_string()))?;
        let fractions = match &self.fractions {
            Some(f) => RegionFractions::from_regions(f.iter().map(|&v| v as f64)),
            None => RegionFractions::from_regions(source.iter().map(Mask::area_fraction)),
        };
        let masks = source
            .iter()
            .map(|m| {
                if (mh, mw) == (lh, lw) {
                    Ok(m.data().to_vec())
                } else {
                    rescale_mask(m, lh, lw).map(|m| m.data().to_vec())
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| WireError::InvalidHeader(e.to_string()))?;
        LayerRegions::new(lh, lw, masks, fractions)
            .map_err(|e| WireError::InvalidHeader(e.to_string()))
    }

    pub fn alignment(&self) -> Result<TokenAlignment, WireError> {
        let alignment =
            TokenAlignment::new(self.token_regions.iter().map(|&r| r as usize).collect());
        alignment
            .validate(self.n_regions as usize)
            .map_err(|e| WireError::InvalidHeader(e.to_string()))?;
        Ok(alignment)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireOk {
    pub heads: u32,
    pub hw: u32,
    pub n_tokens: u32,
    pub probs: Vec<f32>,
    pub m_mean: Vec<f32>,
    pub no_local_pixels: u32,
    pub no_global_pixels: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireResponse {
    Ok(WireOk),
    Error { status: u8, message: String },
}

fn encode_error(magic: [u8; 4], status: u8, message: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + message.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(status);
    out.extend_from_slice(&(message.len() as u32).to_le_bytes());
    out.extend_from_slice(message.as_bytes());
    out
}

/// Reads the `u32 length + UTF-8` error tail that follows a non-zero status.
fn decode_error_tail(c: &mut Cursor<'_>, status: u8) -> Result<(u8, String), WireError> {
    if c.remaining() < 4 {
        return Err(WireError::LengthMismatch {
            expected: (c.pos + 4) as u64,
            actual: c.buf.len() as u64,
        });
    }
    let len = c.u32() as u64;
    if len != c.remaining() as u64 {
        return Err(WireError::LengthMismatch {
            expected: c.pos as u64 + len,
            actual: c.buf.len() as u64,
        });
    }
    let message = String::from_utf8_lossy(c.bytes(len as usize)).into_owned();
    Ok((status, message))
}

impl WireResponse {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            WireResponse::Error { status, message } => encode_error(MAGIC, *status, message),
            WireResponse::Ok(ok) => {
                let mut out = Vec::with_capacity(27 + 4 * (ok.probs.len() + ok.m_mean.len()));
                out.extend_from_slice(&MAGIC);
                out.extend_from_slice(&VERSION.to_le_bytes());
                out.push(STATUS_OK);
                for v in [ok.heads, ok.hw, ok.n_tokens] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in ok.probs.iter().chain(&ok.m_mean) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&ok.no_local_pixels.to_le_bytes());
                out.extend_from_slice(&ok.no_global_pixels.to_le_bytes());
                out
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        check_prefix(buf, MAGIC, 7)?;
        let mut c = Cursor { buf, pos: 6 };
        let status = c.u8();
        if status != STATUS_OK {
            let (status, message) = decode_error_tail(&mut c, status)?;
            return Ok(WireResponse::Error { status, message });
        }
        if c.remaining() < 12 {
            return Err(WireError::LengthMismatch {
                expected: 19,
                actual: buf.len() as u64,
            });
        }
        let (heads, hw, n) = (c.u32(), c.u32(), c.u32());
        let expected = (|| {
            let probs = (heads as u64)
                .checked_mul(hw as u64)?
                .checked_mul(n as u64)?;
            Some(19 + 4 * probs + 4 * heads as u64 + 8)
        })();
        if expected != Some(buf.len() as u64) {
            return Err(WireError::LengthMismatch {
                expected: expected.unwrap_or(u64::MAX),
                actual: buf.len() as u64,
            });
        }
        Ok(WireResponse::Ok(WireOk {
            heads,
            hw,
            n_tokens: n,
            probs: c.f32s((heads * hw * n) as usize),
            m_mean: c.f32s(heads as usize),
            no_local_pixels: c.u32(),
            no_global_pixels: c.u32(),
        }))
    }
}

/// Runs the requested control method.
pub fn process_request(req: &WireRequest) -> Result<WireOk, WireError> {
    let (cfg, ctx) = req.control()?;
    let regions = req.layer_regions()?;
    let alignment = req.alignment()?;
    let logits = AttentionTensor::logits(
        req.heads as usize,
        req.hw as usize,
        req.n_tokens as usize,
        req.d as usize,
        req.logits.iter().map(|&v| v as f64).collect(),
    )
    .map_err(|e| WireError::InvalidHeader(e.to_string()))?;
    let out = apply_control(&logits, &regions, &alignment, &cfg, &ctx)
        .map_err(|e| WireError::Compute(e.to_string()))?;
    let diag = out.diagnostics.unwrap_or_default();
    let m_mean = if diag.m_mean.is_empty() {
        vec![0.0; req.heads as usize]
    } else {
        diag.m_mean.iter().map(|&v| v as f32).collect()
    };
    Ok(WireOk {
        heads: req.heads,
        hw: req.hw,
        n_tokens: req.n_tokens,
        probs: out.attention.data.iter().map(|&v| v as f32).collect(),
        m_mean,
        no_local_pixels: diag.no_local_pixels,
        no_global_pixels: diag.no_global_pixels,
    })
}

/// Turns one request message into one response message. Never panics on
/// malformed input.
pub fn handle_message(buf: &[u8]) -> Vec<u8> {
    let response = match WireRequest::decode(buf).and_then(|r| process_request(&r)) {
        Ok(ok) => WireResponse::Ok(ok),
        Err(e) => WireResponse::Error {
            status: e.status(),
            message: e.to_string(),
        },
    };
    response.encode()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before the length
/// prefix; frames larger than `MAX_FRAME` are drained and returned as `Err`
/// with their length so the caller can answer them.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Result<Vec<u8>, u32>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        let drained = io::copy(&mut r.by_ref().take(len as u64), &mut io::sink())?;
        if drained < len as u64 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        return Ok(Some(Err(len)));
    }
    let mut buf = Vec::new();
    r.by_ref().take(len as u64).read_to_end(&mut buf)?;
    if buf.len() < len as usize {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(Some(Ok(buf)))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &[u8]) -> io::Result<()> {
    let len =
        u32::try_from(msg.len()).map_err(|_| io::Error::other("message exceeds u32 length"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(msg)?;
    w.flush()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub errors: u64,
}

/// Answers framed requests in order until the stream ends.
pub fn serve<R: Read, W: Write>(mut r: R, mut w: W) -> io::Result<ServeStats> {
    let mut stats = ServeStats::default();
    while let Some(frame) = read_frame(&mut r)? {
        let response = match frame {
            Ok(buf) => handle_message(&buf),
            Err(len) => encode_error(
                MAGIC,
                STATUS_LENGTH,
                &format!("frame of {len} bytes exceeds the {MAX_FRAME} byte limit"),
            ),
        };
        stats.requests += 1;
        if response[6] != STATUS_OK {
            stats.errors += 1;
        }
        write_frame(&mut w, &response)?;
    }
    Ok(stats)
}

/// Embedding request: `CATE`, version, kind (0 text, 1 image), then either
/// a `u32` length and UTF-8 text or `u32` height, `u32` width and RGB bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedRequest {
    Text(String),
    Image(RgbImage),
}

/// Embedding response: `CATE`, version, status; on success `u32` dim, the
/// vector as f32 and the provider's logit scale as f32.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedResponse {
    Ok { vector: Vec<f32>, logit_scale: f32 },
    Error { status: u8, message: String },
}

impl EmbedRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = EMBED_MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        match self {
            EmbedRequest::Text(t) => {
                out.push(0);
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                out.extend_from_slice(t.as_bytes());
            }
            EmbedRequest::Image(img) => {
                out.push(1);
                out.extend_from_slice(&(img.height as u32).to_le_bytes());
                out.extend_from_slice(&(img.width as u32).to_le_bytes());
                out.extend_from_slice(&img.pixels);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        check_prefix(buf, EMBED_MAGIC, 7)?;
        let mut c = Cursor { buf, pos: 6 };
        let kind = c.u8();
        let short = |need: u64| WireError::LengthMismatch {
            expected: need,
            actual: buf.len() as u64,
        };
        match kind {
            0 => {
                if c.remaining() < 4 {
                    return Err(short(11));
                }
                let len = c.u32() as u64;
                if len != c.remaining() as u64 {
                    return Err(short(11 + len));
                }
                let text = std::str::from_utf8(c.bytes(len as usize))
                    .map_err(|_| WireError::InvalidHeader("text is not UTF-8".into()))?;
                Ok(EmbedRequest::Text(text.to_string()))
            }
            1 => {
                if c.remaining() < 8 {
                    return Err(short(15));
                }
                let (h, w) = (c.u32() as u64, c.u32() as u64);
                let need = h.saturating_mul(w).saturating_mul(3);
                if need != c.remaining() as u64 {
                    return Err(short(15u64.saturating_add(need)));
                }
                let pixels = c.bytes(need as usize).to_vec();
                RgbImage::new(h as usize, w as usize, pixels)
                    .map(EmbedRequest::Image)
                    .map_err(|e| WireError::InvalidHeader(e.to_string()))
            }
            k => Err(WireError::InvalidHeader(format!("unknown embed kind {k}"))),
        }
    }
}

impl EmbedResponse {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            EmbedResponse::Error { status, message } => encode_error(EMBED_MAGIC, *status, message),
            EmbedResponse::Ok {
                vector,
                logit_scale,
            } => {
                let mut out = EMBED_MAGIC.to_vec();
                out.extend_from_slice(&VERSION.to_le_bytes());
                out.push(STATUS_OK);
                out.extend_from_slice(&(vector.len() as u32).to_le_bytes());
                for v in vector.iter().chain(std::iter::once(logit_scale)) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        check_prefix(buf, EMBED_MAGIC, 7)?;
        let mut c = Cursor { buf, pos: 6 };
        let status = c.u8();
        if status != STATUS_OK {
            let (status, message) = decode_error_tail(&mut c, status)?;
            return Ok(EmbedResponse::Error { status, message });
        }
        if c.remaining() < 4 {
            return Err(WireError::LengthMismatch {
                expected: 11,
                actual: buf.len() as u64,
            });
        }
        let dim = c.u32() as u64;
        if c.remaining() as u64 != 4 * dim + 4 {
            return Err(WireError::LengthMismatch {
                expected: 15 + 4 * dim,
                actual: buf.len() as u64,
            });
        }
        let vector = c.f32s(dim as usize);
        let logit_scale = c.f32();
        check_finite("embedding", &vector)?;
        check_finite("logit_scale", &[logit_scale])?;
        Ok(EmbedResponse::Ok {
            vector,
            logit_scale,
        })
    }
}

/// Answers framed embedding requests from `provider` until the stream ends.
pub fn serve_embeddings<P, R, W>(provider: &mut P, mut r: R, mut w: W) -> io::Result<ServeStats>
where
    P: EmbeddingProvider + ?Sized,
    R: Read,
    W: Write,
{
    let mut stats = ServeStats::default();
    while let Some(frame) = read_frame(&mut r)? {
        let result = match frame {
            Ok(buf) => EmbedRequest::decode(&buf),
            Err(len) => Err(WireError::LengthMismatch {
                expected: MAX_FRAME as u64,
                actual: len as u64,
            }),
        }
        .and_then(|req| {
            let v = match &req {
                EmbedRequest::Text(t) => provider.embed_text(t),
                EmbedRequest::Image(img) => provider.embed_image(img),
            };
            v.map_err(|e| WireError::Compute(e.to_string()))
        });
        let response = match result {
            Ok(v) => EmbedResponse::Ok {
                vector: v.iter().map(|&x| x as f32).collect(),
                logit_scale: provider.logit_scale() as f32,
            },
            Err(e) => {
                stats.errors += 1;
                EmbedResponse::Error {
                    status: e.status(),
                    message: e.to_string(),
                }
            }
        };
        stats.requests += 1;
        write_frame(&mut w, &response.encode())?;
    }
    Ok(stats)
}

/// Embedding provider that forwards every call over a CATE stream.
pub struct WireEmbeddingProvider<R: Read, W: Write> {
    reader: R,
    writer: W,
    logit_scale: f64,
}

impl<R: Read, W: Write> WireEmbeddingProvider<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            logit_scale: crate::eval::DEFAULT_LOGIT_SCALE,
        }
    }

    fn call(&mut self, req: EmbedRequest) -> Result<Vec<f64>, EvalError> {
        let provider_err = |e: String| EvalError::Provider(e);
        write_frame(&mut self.writer, &req.encode()).map_err(|e| provider_err(e.to_string()))?;
        let frame = read_frame(&mut self.reader)
            .map_err(|e| provider_err(e.to_string()))?
            .ok_or_else(|| provider_err("provider closed the stream".into()))?
            .map_err(|len| provider_err(format!("oversized response of {len} bytes")))?;
        match EmbedResponse::decode(&frame).map_err(|e| provider_err(e.to_string()))? {
            EmbedResponse::Ok {
                vector,
                logit_scale,
            } => {
                self.logit_scale = logit_scale as f64;
                Ok(vector.into_iter().map(|v| v as f64).collect())
            }
            EmbedResponse::Error { status, message } => {
                Err(provider_err(format!("status {status}: {message}")))
            }
        }
    }
}

impl<R: Read, W: Write> EmbeddingProvider for WireEmbeddingProvider<R, W> {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f64>, EvalError> {
        self.call(EmbedRequest::Text(text.to_string()))
    }

    fn embed_image(&mut self, image: &RgbImage) -> Result<Vec<f64>, EvalError> {
        self.call(EmbedRequest::Image(image.clone()))
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }
}
