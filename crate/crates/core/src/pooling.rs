//! The nine utterance-level pooling methods.
//!
//! Feature-side pooling aggregates per-frame hidden states into one feature
//! vector that feeds the final dense head:
//!
//! - `LastFrame`:  h = h_T
//! - `Attention`:  h = sum_t a_t h_t, a_t softmax-normalized scores from the
//!   head whose weights are *shared* with the final dense layer
//! - `MaxPooling`: h[n] = max_t h_t[n]
//! - `AvgPooling`: h = (1/T) sum_t h_t
//!
//! Prediction-side pooling aggregates per-frame sigmoid predictions y_t into
//! the utterance score directly:
//!
//! - `Y.MaxPooling`: y = max_t y_t
//! - `Y.AvgPooling`: y = (1/T) sum_t y_t
//! - `Y.LinSoftmax`: y = sum_t y_t^2 / sum_t y_t
//! - `Y.ExpSoftmax`: y = sum_t y_t exp(y_t) / sum_t exp(y_t)
//! - `Y.Attention`:  y = sum_t y_t w_t / sum_t w_t, w_t = exp(z_t) from a
//!   dedicated dense scorer
//!
//! Max-style gradients are routed entirely to the first index attaining the
//! maximum, so tie-breaking is deterministic.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seqmodel::HiddenSequence;

/// Prediction-attention scores are clamped to this magnitude before exp.
pub const ATTENTION_CLAMP: f64 = 30.0;

/// Additive guard on the linear-softmax denominator.
pub const LINSOFTMAX_GUARD: f64 = 1e-12;

/// The closed set of pooling methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingKind {
    FeatLastFrame,
    FeatAttention,
    FeatMax,
    FeatAvg,
    PredMax,
    PredAvg,
    PredLinSoftmax,
    PredExpSoftmax,
    PredAttention,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 9] = [
        PoolingKind::FeatLastFrame,
        PoolingKind::FeatAttention,
        PoolingKind::FeatMax,
        PoolingKind::FeatAvg,
        PoolingKind::PredMax,
        PoolingKind::PredAvg,
        PoolingKind::PredLinSoftmax,
        PoolingKind::PredExpSoftmax,
        PoolingKind::PredAttention,
    ];

    /// Canonical serialized name; prediction-side kinds carry the `Y.` prefix.
    pub fn canonical_name(self) -> &'static str {
        match self {
            PoolingKind::FeatLastFrame => "LastFrame",
            PoolingKind::FeatAttention => "Attention",
            PoolingKind::FeatMax => "MaxPooling",
            PoolingKind::FeatAvg => "AvgPooling",
            PoolingKind::PredMax => "Y.MaxPooling",
            PoolingKind::PredAvg => "Y.AvgPooling",
            PoolingKind::PredLinSoftmax => "Y.LinSoftmax",
            PoolingKind::PredExpSoftmax => "Y.ExpSoftmax",
            PoolingKind::PredAttention => "Y.Attention",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.canonical_name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|k| k.canonical_name()).collect();
                Error::PoolingKind(format!("unknown pooling {name:?}; known: {}", known.join(", ")))
            })
    }

    /// True for the four feature-side kinds.
    pub fn on_feature(self) -> bool {
        matches!(
            self,
            PoolingKind::FeatLastFrame
                | PoolingKind::FeatAttention
                | PoolingKind::FeatMax
                | PoolingKind::FeatAvg
        )
    }

    /// True for the kinds that use attention scores.
    pub fn uses_attention(self) -> bool {
        matches!(self, PoolingKind::FeatAttention | PoolingKind::PredAttention)
    }
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// A dense scorer producing one scalar per frame: z_t = w . h_t + b.
///
/// For feature-side attention this is the *final* dense head itself (weight
/// sharing is structural: there is only one tensor in the parameter store).
/// For prediction-side attention it is a dedicated head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl AttentionHead {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias }
    }

    fn score(&self, h: &HiddenSequence, t: usize) -> Result<f64> {
        if self.weights.len() != h.dim() {
            return Err(Error::ShapeMismatch(format!(
                "attention head has {} weights, hidden states have {} channels",
                self.weights.len(),
                h.dim()
            )));
        }
        let frame = h.frame(t);
        Ok(self.weights.iter().zip(frame.iter()).map(|(w, x)| w * x).sum::<f64>() + self.bias)
    }
}

fn require_frames(h: &HiddenSequence, op: &str) -> Result<()> {
    if h.num_frames() == 0 {
        return Err(Error::EmptySequence(format!("{op} needs at least one frame")));
    }
    Ok(())
}

/// Softmax-normalized attention weights over frames, scored by the shared
/// final-dense head: a_t >= 0, sum_t a_t = 1.
pub fn attention_weights_feature(h: &HiddenSequence, shared_head: &AttentionHead) -> Result<Vec<f64>> {
    require_frames(h, "attention_weights_feature")?;
    let t_len = h.num_frames();
    let mut scores = Vec::with_capacity(t_len);
    for t in 0..t_len {
        scores.push(shared_head.score(h, t)?);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Unnormalized positive attention weights for prediction pooling:
/// w_t = exp(clamp(z_t, +-30)). The pooling formula divides by sum_t w_t.
pub fn attention_weights_prediction(h: &HiddenSequence, head: &AttentionHead) -> Result<Vec<f64>> {
    require_frames(h, "attention_weights_prediction")?;
    let t_len = h.num_frames();
    let mut weights = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let z = head.score(h, t)?;
        weights.push(z.clamp(-ATTENTION_CLAMP, ATTENTION_CLAMP).exp());
    }
    Ok(weights)
}

/// Aggregate hidden states with a feature-side kind. `shared_head` is the
/// final dense head and is required only for `FeatAttention`.
pub fn pool_feature(
    kind: PoolingKind,
    h: &HiddenSequence,
    shared_head: Option<&AttentionHead>,
) -> Result<Vec<f64>> {
    if !kind.on_feature() {
        return Err(Error::PoolingKind(format!(
            "{kind} pools predictions, not features"
        )));
    }
    require_frames(h, "pool_feature")?;
    let (t_len, n) = (h.num_frames(), h.dim());
    match kind {
        PoolingKind::FeatLastFrame => Ok(h.frame(t_len - 1).to_vec()),
        PoolingKind::FeatMax => {
            let (pooled, _) = feat_max_with_argmax(h);
            Ok(pooled)
        }
        PoolingKind::FeatAvg => {
            let mut pooled = vec![0.0; n];
            for t in 0..t_len {
                for (p, x) in pooled.iter_mut().zip(h.frame(t)) {
                    *p += x;
                }
            }
            for p in &mut pooled {
                *p /= t_len as f64;
            }
            Ok(pooled)
        }
        PoolingKind::FeatAttention => {
            let head = shared_head.ok_or_else(|| {
                Error::InvalidInput("FeatAttention needs the shared final-dense head".into())
            })?;
            let a = attention_weights_feature(h, head)?;
            let mut pooled = vec![0.0; n];
            for (t, &a_t) in a.iter().enumerate() {
                for (p, x) in pooled.iter_mut().zip(h.frame(t)) {
                    *p += a_t * x;
                }
            }
            Ok(pooled)
        }
        _ => unreachable!("guarded by on_feature"),
    }
}

/// Per-channel max over frames plus the first argmax index of each channel.
pub(crate) fn feat_max_with_argmax(h: &HiddenSequence) -> (Vec<f64>, Vec<usize>) {
    let (t_len, n) = (h.num_frames(), h.dim());
    let mut pooled = h.frame(0).to_vec();
    let mut argmax = vec![0usize; n];
    for t in 1..t_len {
        for (ch, &x) in h.frame(t).iter().enumerate() {
            if x > pooled[ch] {
                pooled[ch] = x;
                argmax[ch] = t;
            }
        }
    }
    (pooled, argmax)
}

/// Aggregate frame-level predictions with a prediction-side kind.
/// `head` and `h` are required only for `PredAttention`.
pub fn pool_prediction(
    kind: PoolingKind,
    y_seq: &[f64],
    head: Option<&AttentionHead>,
    h: Option<&HiddenSequence>,
) -> Result<f64> {
    if kind.on_feature() {
        return Err(Error::PoolingKind(format!(
            "{kind} pools features, not predictions"
        )));
    }
    if y_seq.is_empty() {
        return Err(Error::EmptySequence("pool_prediction needs at least one frame".into()));
    }
    let t_len = y_seq.len() as f64;
    match kind {
        PoolingKind::PredMax => Ok(y_seq.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        PoolingKind::PredAvg => Ok(y_seq.iter().sum::<f64>() / t_len),
        PoolingKind::PredLinSoftmax => {
            let s1: f64 = y_seq.iter().sum();
            let s2: f64 = y_seq.iter().map(|y| y * y).sum();
            Ok(s2 / (s1 + LINSOFTMAX_GUARD))
        }
        PoolingKind::PredExpSoftmax => {
            let num: f64 = y_seq.iter().map(|y| y * y.exp()).sum();
            let den: f64 = y_seq.iter().map(|y| y.exp()).sum();
            Ok(num / den)
        }
        PoolingKind::PredAttention => {
            let head = head.ok_or_else(|| {
                Error::InvalidInput("PredAttention needs its dedicated attention head".into())
            })?;
            let h = h.ok_or_else(|| {
                Error::InvalidInput("PredAttention needs the hidden sequence".into())
            })?;
            if h.num_frames() != y_seq.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} predictions vs {} hidden frames",
                    y_seq.len(),
                    h.num_frames()
                )));
            }
            let w = attention_weights_prediction(h, head)?;
            let num: f64 = y_seq.iter().zip(&w).map(|(y, w)| y * w).sum();
            let den: f64 = w.iter().sum();
            Ok(num / den)
        }
        _ => unreachable!("guarded by on_feature"),
    }
}

/// First index attaining the maximum of a prediction sequence.
pub(crate) fn pred_argmax(y_seq: &[f64]) -> usize {
    let mut best = 0;
    for (t, &y) in y_seq.iter().enumerate().skip(1) {
        if y > y_seq[best] {
            best = t;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Backward passes. Layout convention: dH rows are frames (T x N), matching
// HiddenSequence storage.
// ---------------------------------------------------------------------------

/// Gradients flowing out of a feature-side pooling given d(loss)/d(pooled).
pub(crate) struct FeatPoolGrads {
    pub dh: Array2<f64>,
    /// Extra contribution to the shared head (FeatAttention only).
    pub d_head_w: Vec<f64>,
    pub d_head_b: f64,
}

pub(crate) fn pool_feature_backward(
    kind: PoolingKind,
    h: &HiddenSequence,
    shared_head: Option<&AttentionHead>,
    attention: Option<&[f64]>,
    d_pooled: &[f64],
) -> Result<FeatPoolGrads> {
    let (t_len, n) = (h.num_frames(), h.dim());
    let mut dh = Array2::zeros((t_len, n));
    let mut d_head_w = vec![0.0; n];
    let mut d_head_b = 0.0;
    match kind {
        PoolingKind::FeatLastFrame => {
            for (slot, &d) in dh.row_mut(t_len - 1).iter_mut().zip(d_pooled) {
                *slot = d;
            }
        }
        PoolingKind::FeatMax => {
            let (_, argmax) = feat_max_with_argmax(h);
            for (ch, &t) in argmax.iter().enumerate() {
                dh[(t, ch)] = d_pooled[ch];
            }
        }
        PoolingKind::FeatAvg => {
            let inv = 1.0 / t_len as f64;
            for t in 0..t_len {
                for (slot, &d) in dh.row_mut(t).iter_mut().zip(d_pooled) {
                    *slot = d * inv;
                }
            }
        }
        PoolingKind::FeatAttention => {
            let head = shared_head.ok_or_else(|| {
                Error::InvalidInput("FeatAttention backward needs the shared head".into())
            })?;
            let a = attention.ok_or_else(|| {
                Error::InvalidInput("FeatAttention backward needs the forward weights".into())
            })?;
            // h_pool = sum_t a_t h_t
            let mut da = vec![0.0; t_len];
            for (t, &a_t) in a.iter().enumerate() {
                let frame = h.frame(t);
                for (slot, &d) in dh.row_mut(t).iter_mut().zip(d_pooled) {
                    *slot += a_t * d;
                }
                da[t] = frame.iter().zip(d_pooled).map(|(x, d)| x * d).sum();
            }
            // Softmax backward: dz_t = a_t (da_t - sum_u a_u da_u)
            let weighted: f64 = a.iter().zip(&da).map(|(a_u, d_u)| a_u * d_u).sum();
            for (t, (&a_t, &da_t)) in a.iter().zip(&da).enumerate() {
                let dz = a_t * (da_t - weighted);
                d_head_b += dz;
                let frame = h.frame(t);
                for (gw, &x) in d_head_w.iter_mut().zip(frame) {
                    *gw += dz * x;
                }
                for (slot, &w) in dh.row_mut(t).iter_mut().zip(&head.weights) {
                    *slot += dz * w;
                }
            }
        }
        _ => {
            return Err(Error::PoolingKind(format!(
                "{kind} pools predictions, not features"
            )))
        }
    }
    Ok(FeatPoolGrads { dh, d_head_w, d_head_b })
}

/// Gradients flowing out of a prediction-side pooling given d(loss)/d(score).
pub(crate) struct PredPoolGrads {
    /// d(loss)/d(y_t) per frame.
    pub dy: Vec<f64>,
    /// Dedicated attention head gradients (PredAttention only).
    pub d_attn_w: Vec<f64>,
    pub d_attn_b: f64,
    /// Direct dH contribution through the attention scores (PredAttention only).
    pub dh_extra: Option<Array2<f64>>,
}

pub(crate) fn pool_prediction_backward(
    kind: PoolingKind,
    y_seq: &[f64],
    head: Option<&AttentionHead>,
    h: Option<&HiddenSequence>,
    weights: Option<&[f64]>,
    pooled: f64,
    d_score: f64,
) -> Result<PredPoolGrads> {
    let t_len = y_seq.len();
    let mut dy = vec![0.0; t_len];
    let mut d_attn_w = Vec::new();
    let mut d_attn_b = 0.0;
    let mut dh_extra = None;
    match kind {
        PoolingKind::PredMax => {
            dy[pred_argmax(y_seq)] = d_score;
        }
        PoolingKind::PredAvg => {
            let inv = d_score / t_len as f64;
            dy.fill(inv);
        }
        PoolingKind::PredLinSoftmax => {
            let s1: f64 = y_seq.iter().sum();
            let den = s1 + LINSOFTMAX_GUARD;
            for (d, &y_t) in dy.iter_mut().zip(y_seq) {
                *d = d_score * (2.0 * y_t - pooled) / den;
            }
        }
        PoolingKind::PredExpSoftmax => {
            let den: f64 = y_seq.iter().map(|y| y.exp()).sum();
            for (d, &y_t) in dy.iter_mut().zip(y_seq) {
                *d = d_score * y_t.exp() * (1.0 + y_t - pooled) / den;
            }
        }
        PoolingKind::PredAttention => {
            let head = head.ok_or_else(|| {
                Error::InvalidInput("PredAttention backward needs its head".into())
            })?;
            let h = h.ok_or_else(|| {
                Error::InvalidInput("PredAttention backward needs the hidden sequence".into())
            })?;
            let w = weights.ok_or_else(|| {
                Error::InvalidInput("PredAttention backward needs the forward weights".into())
            })?;
            let n = h.dim();
            let total: f64 = w.iter().sum();
            d_attn_w = vec![0.0; n];
            let mut dh = Array2::zeros((t_len, n));
            for t in 0..t_len {
                dy[t] = d_score * w[t] / total;
                let dw = d_score * (y_seq[t] - pooled) / total;
                // w_t = exp(clamp(z_t)); the clamp zeroes the gradient outside.
                let z = w[t].ln();
                if z.abs() < ATTENTION_CLAMP {
                    let dz = dw * w[t];
                    d_attn_b += dz;
                    let frame = h.frame(t);
                    for (gw, &x) in d_attn_w.iter_mut().zip(frame) {
                        *gw += dz * x;
                    }
                    for (slot, &wv) in dh.row_mut(t).iter_mut().zip(&head.weights) {
                        *slot = dz * wv;
                    }
                }
            }
            dh_extra = Some(dh);
        }
        _ => {
            return Err(Error::PoolingKind(format!(
                "{kind} pools features, not predictions"
            )))
        }
    }
    Ok(PredPoolGrads { dy, d_attn_w, d_attn_b, dh_extra })
}
