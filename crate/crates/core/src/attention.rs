//! Reference multi-head scaled dot-product cross-attention.
//!
//! Tensors are flat row-major `Vec<f64>`; a row is one `(head, pixel)` pair
//! over `n_tokens` entries.

use thiserror::Error;

/// Additive bias standing in for `log(0)` before a softmax.
pub const MASK_SENTINEL: f64 = -1e9;

/// Entries at or below this value are treated as masked out.
const MASKED_THRESHOLD: f64 = MASK_SENTINEL / 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("every entry of row (head {head}, pixel {pixel}) is masked")]
    AllMaskedRow { head: usize, pixel: usize },
    #[error("expected a {expected:?} tensor")]
    WrongKind { expected: AttentionKind },
}

pub type Result<T> = std::result::Result<T, AttentionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Logits,
    Probabilities,
}

/// `heads × hw × n_tokens` attention scores or weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub heads: usize,
    pub hw: usize,
    pub n_tokens: usize,
    /// Key/query dimension `d` the logits were scaled by (`1/√d`).
    pub scale_dim: usize,
    pub kind: AttentionKind,
    pub data: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(
        heads: usize,
        hw: usize,
        n_tokens: usize,
        scale_dim: usize,
        kind: AttentionKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != heads * hw * n_tokens {
            return Err(AttentionError::DimensionMismatch(format!(
                "data has {} values, shape {heads}x{hw}x{n_tokens}",
                data.len()
            )));
        }
        if scale_dim == 0 {
            return Err(AttentionError::DimensionMismatch("d must be >= 1".into()));
        }
        Ok(Self {
            heads,
            hw,
            n_tokens,
            scale_dim,
            kind,
            data,
        })
    }

    pub fn logits(
        heads: usize,
        hw: usize,
        n_tokens: usize,
        d: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::new(heads, hw, n_tokens, d, AttentionKind::Logits, data)
    }

    #[inline]
    pub fn row(&self, head: usize, pixel: usize) -> &[f64] {
        let start = (head * self.hw + pixel) * self.n_tokens;
        &self.data[start..start + self.n_tokens]
    }

    #[inline]
    pub fn row_mut(&mut self, head: usize, pixel: usize) -> &mut [f64] {
        let start = (head * self.hw + pixel) * self.n_tokens;
        &mut self.data[start..start + self.n_tokens]
    }

    /// All rows of one head.
    pub fn head_plane(&self, head: usize) -> &[f64] {
        let len = self.hw * self.n_tokens;
        &self.data[head * len..(head + 1) * len]
    }

    pub fn row_sums(&self) -> impl Iterator<Item = f64> + '_ {
        self.data
            .chunks(self.n_tokens.max(1))
            .map(|r| r.iter().sum())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.heads == other.heads && self.hw == other.hw && self.n_tokens == other.n_tokens
    }

    pub(crate) fn with_data(&self, kind: AttentionKind, data: Vec<f64>) -> Self {
        Self {
            heads: self.heads,
            hw: self.hw,
            n_tokens: self.n_tokens,
            scale_dim: self.scale_dim,
            kind,
            data,
        }
    }
}

/// Queries, keys and values for one attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub heads: usize,
    pub hw: usize,
    pub n_tokens: usize,
    pub d: usize,
    pub d_v: usize,
    /// `heads × hw × d`
    pub q: Vec<f64>,
    /// `heads × n_tokens × d`
    pub k: Vec<f64>,
    /// `heads × n_tokens × d_v`
    pub v: Vec<f64>,
}

impl Qkv {
    fn check(&self) -> Result<()> {
        let mismatch = |what: &str, got: usize, want: usize| {
            AttentionError::DimensionMismatch(format!("{what} has {got} values, expected {want}"))
        };
        if self.d == 0 {
            return Err(AttentionError::DimensionMismatch("d must be >= 1".into()));
        }
        if self.q.len() != self.heads * self.hw * self.d {
            return Err(mismatch("Q", self.q.len(), self.heads * self.hw * self.d));
        }
        if self.k.len() != self.heads * self.n_tokens * self.d {
            return Err(mismatch(
                "K",
                self.k.len(),
                self.heads * self.n_tokens * self.d,
            ));
        }
        if self.v.len() != self.heads * self.n_tokens * self.d_v {
            return Err(mismatch(
                "V",
                self.v.len(),
                self.heads * self.n_tokens * self.d_v,
            ));
        }
        Ok(())
    }
}

/// `QKᵀ/√d` per head.
pub fn attention_logits(qkv: &Qkv) -> Result<AttentionTensor> {
    qkv.check()?;
    let (d, n) = (qkv.d, qkv.n_tokens);
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(qkv.heads * qkv.hw * n);
    for h in 0..qkv.heads {
        let keys = &qkv.k[h * n * d..(h + 1) * n * d];
        for p in 0..qkv.hw {
            let q = &qkv.q[(h * qkv.hw + p) * d..(h * qkv.hw + p + 1) * d];
            data.extend(keys.chunks_exact(d).map(|k| dot(q, k) * scale));
        }
    }
    AttentionTensor::logits(qkv.heads, qkv.hw, n, d, data)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax of one row in place. Masked entries come out as
/// exactly 0. Returns `false` if every entry is masked (row left untouched).
pub fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row
        .iter()
        .copied()
        .filter(|&v| v > MASKED_THRESHOLD)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v > MASKED_THRESHOLD {
            (*v - max).exp()
        } else {
            0.0
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

pub fn softmax_rows(t: &AttentionTensor) -> Result<AttentionTensor> {
    if t.kind != AttentionKind::Logits {
        return Err(AttentionError::WrongKind {
            expected: AttentionKind::Logits,
        });
    }
    let mut out = t.with_data(AttentionKind::Probabilities, t.data.clone());
    for h in 0..t.heads {
        for p in 0..t.hw {
            if !softmax_in_place(out.row_mut(h, p)) && t.n_tokens > 0 {
                return Err(AttentionError::AllMaskedRow { head: h, pixel: p });
            }
        }
    }
    Ok(out)
}

/// `C = AV` per head; `v` is `heads × n_tokens × d_v`. Output is
/// `heads × hw × d_v`.
pub fn apply_values(a: &AttentionTensor, v: &[f64], d_v: usize) -> Result<Vec<f64>> {
    if v.len() != a.heads * a.n_tokens * d_v {
        return Err(AttentionError::DimensionMismatch(format!(
            "V has {} values, expected {}",
            v.len(),
            a.heads * a.n_tokens * d_v
        )));
    }
    let n = a.n_tokens;
    let mut out = vec![0.0; a.heads * a.hw * d_v];
    for h in 0..a.heads {
        let values = &v[h * n * d_v..(h + 1) * n * d_v];
        for p in 0..a.hw {
            let dst = &mut out[(h * a.hw + p) * d_v..(h * a.hw + p + 1) * d_v];
            for (&w, row) in a.row(h, p).iter().zip(values.chunks_exact(d_v)) {
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_qk_gives_zero_logits() {
        let qkv = Qkv {
            heads: 1,
            hw: 2,
            n_tokens: 3,
            d: 4,
            d_v: 1,
            q: vec![0.0; 8],
            k: vec![0.0; 12],
            v: vec![0.0; 3],
        };
        assert!(attention_logits(&qkv)
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_logits() {
        let qkv = Qkv {
            heads: 1,
            hw: 1,
            n_tokens: 2,
            d: 1,
            d_v: 1,
            q: vec![1.0],
            k: vec![2.0, 3.0],
            v: vec![0.0, 0.0],
        };
        assert_eq!(attention_logits(&qkv).unwrap().data, [2.0, 3.0]);
    }

    #[test]
    fn mismatched_qkv_rejected() {
        let qkv = Qkv {
            heads: 1,
            hw: 1,
            n_tokens: 2,
            d: 2,
            d_v: 1,
            q: vec![1.0],
            k: vec![0.0; 4],
            v: vec![0.0; 2],
        };
        assert!(matches!(
            attention_logits(&qkv),
            Err(AttentionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn analytic_softmax() {
        let t = AttentionTensor::logits(1, 2, 2, 1, vec![0.0, 3f64.ln(), 1.0, 1.0]).unwrap();
        let a = softmax_rows(&t).unwrap();
        assert!((a.data[0] - 0.25).abs() < 1e-12);
        assert!((a.data[1] - 0.75).abs() < 1e-12);
        assert!((a.data[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sentinel_entry_is_exactly_zero() {
        let t = AttentionTensor::logits(1, 1, 3, 1, vec![0.0, MASK_SENTINEL, 0.0]).unwrap();
        let a = softmax_rows(&t).unwrap();
        assert_eq!(a.data, [0.5, 0.0, 0.5]);
    }

    #[test]
    fn all_masked_row_is_error() {
        let t = AttentionTensor::logits(1, 2, 2, 1, vec![0.0, 0.0, MASK_SENTINEL, MASK_SENTINEL])
            .unwrap();
        assert_eq!(
            softmax_rows(&t),
            Err(AttentionError::AllMaskedRow { head: 0, pixel: 1 })
        );
    }

    #[test]
    fn one_hot_selects_value_rows() {
        let a = AttentionTensor::new(
            1,
            2,
            3,
            1,
            AttentionKind::Probabilities,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(apply_values(&a, &v, 2).unwrap(), [3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn uniform_attention_is_mean() {
        let a =
            AttentionTensor::new(1, 1, 2, 1, AttentionKind::Probabilities, vec![0.5, 0.5]).unwrap();
        assert_eq!(apply_values(&a, &[1.0, 3.0], 1).unwrap(), [2.0]);
        assert!(apply_values(&a, &[1.0], 1).is_err());
    }
}
