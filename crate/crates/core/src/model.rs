//! Forward pass of the toy decoder with layer-wise hidden-state capture.
//!
//! Block structure (pre-norm, no positional encoding):
//!
//! ```text
//! h ← h + Attn(RMSNorm(h))
//! h ← h + W_down(silu(W_gate x) ⊙ W_up x),   x = RMSNorm(h)
//! ```
//!
//! Every projection is `x Wᵀ + s · (x Aᵀ) Bᵀ` with `s = lora_alpha / lora_rank`
//! when an adapter is active.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{BlockWeights, ModelBundle};
use crate::config::{ModelConfig, Target};
use crate::error::{Error, Result};
use crate::lora::{LoraPair, LoraParams};
use crate::tensor::Mat;

pub const RMS_EPS: f64 = 1e-6;

/// Contiguous token positions belonging to one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub tag: String,
    pub start: usize,
    pub len: usize,
}

/// A probe: continuous token embeddings plus modality spans. Positions not
/// covered by a span are text-prefix positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    embeddings: Mat,
    spans: Vec<Span>,
}

impl TokenSequence {
    pub fn new(embeddings: Mat, spans: Vec<Span>) -> Result<Self> {
        let t = embeddings.rows();
        if t == 0 {
            return Err(Error::Shape("token sequence is empty".into()));
        }
        if let Some(i) = embeddings.first_non_finite() {
            return Err(Error::NonFinite {
                name: "embeddings".into(),
                index: i,
            });
        }
        let mut covered = vec![false; t];
        for (i, s) in spans.iter().enumerate() {
            if s.len == 0 || s.start + s.len > t {
                return Err(Error::Shape(format!(
                    "span `{}` [{}, +{}) out of bounds for {t} tokens",
                    s.tag, s.start, s.len
                )));
            }
            if spans[..i].iter().any(|o| o.tag == s.tag) {
                return Err(Error::InvalidArgument(format!("duplicate span tag `{}`", s.tag)));
            }
            for c in &mut covered[s.start..s.start + s.len] {
                if *c {
                    return Err(Error::Shape(format!("span `{}` overlaps another span", s.tag)));
                }
                *c = true;
            }
        }
        Ok(TokenSequence { embeddings, spans })
    }

    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, tag: &str) -> Result<&Span> {
        self.spans
            .iter()
            .find(|s| s.tag == tag)
            .ok_or_else(|| Error::UnknownModality(tag.to_string()))
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| !self.spans.iter().any(|s| p >= s.start && p < s.start + s.len))
            .collect()
    }
}

/// Hidden states after every block: `hidden[0]` is the input, `hidden[l]`
/// the output of block `l` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub hidden: Vec<Mat>,
    /// Index of the probe inside its batch; 0 for standalone forwards.
    pub probe_id: usize,
}

impl TraceSet {
    pub fn n_layers(&self) -> usize {
        self.hidden.len() - 1
    }
}

/// Runs the model and keeps every layer's hidden state. With `adapter_tag`
/// absent only base weights are used.
pub fn forward_with_trace(bundle: &ModelBundle, adapter_tag: Option<&str>, input: &TokenSequence) -> Result<TraceSet> {
    let adapter = adapter_tag
        .map(|tag| bundle.adapter(tag).map(|a| &a.params))
        .transpose()?;
    forward_params(bundle, adapter, input)
}

/// Same as [`forward_with_trace`] with an explicit (possibly modified) set
/// of LoRA factors.
pub fn forward_params(bundle: &ModelBundle, adapter: Option<&LoraParams>, input: &TokenSequence) -> Result<TraceSet> {
    let cfg = &bundle.config;
    if input.embeddings.cols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "input width {} does not match d_model {}",
            input.embeddings.cols(),
            cfg.d_model
        )));
    }
    if let Some(p) = adapter {
        p.check_config(cfg)?;
    }
    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(input.embeddings.clone());
    for (l, w) in bundle.base.layers.iter().enumerate() {
        let lora = adapter.map(|p| p.layers[l].as_slice());
        let next = block_forward(cfg, w, lora, &hidden[l]).out;
        hidden.push(next);
    }
    Ok(TraceSet { hidden, probe_id: 0 })
}

/// Rows of `trace.hidden[layer]` covered by `modality`'s span.
pub fn extract_modality(trace: &TraceSet, input: &TokenSequence, modality: &str, layer: usize) -> Result<Mat> {
    let span = input.span(modality)?;
    let h = trace
        .hidden
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range 0..={}", trace.n_layers())))?;
    if h.rows() != input.len() {
        return Err(Error::Shape("trace does not belong to this input".into()));
    }
    Ok(h.row_block(span.start, span.len))
}

/// Intermediate values of one block, enough to run its backward pass.
pub(crate) struct BlockCache {
    pub n1: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Causal attention probabilities, one `T × T` matrix per head.
    pub probs: Vec<Mat>,
    pub ctx: Mat,
    pub h1: Mat,
    pub n2: Mat,
    pub inv2: Vec<f64>,
    pub gate: Mat,
    pub up: Mat,
    pub act: Mat,
    /// `x Aᵀ` per target (empty when no adapter is active).
    pub lora_z: Vec<Mat>,
    pub out: Mat,
}

/// `x Wᵀ + s (x Aᵀ) Bᵀ`; also returns `x Aᵀ`.
pub(crate) fn lora_linear(x: &Mat, w: &Mat, lora: Option<&LoraPair>, scale: f64) -> (Mat, Option<Mat>) {
    let mut y = x.matmul_t(w);
    match lora {
        Some(p) => {
            let z = x.matmul_t(&p.a);
            let mut d = z.matmul_t(&p.b);
            d.scale(scale);
            y.add_assign(&d);
            (y, Some(z))
        }
        None => (y, None),
    }
}

/// Row-wise RMSNorm; returns the output and `1 / sqrt(mean(x²) + eps)` per row.
pub fn rms_norm(x: &Mat, gain: &[f64], eps: f64) -> (Mat, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (ms + eps).sqrt();
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain) {
            *o = g * v * s;
        }
        inv.push(s);
    }
    (out, inv)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Causal softmax of `q kᵀ / sqrt(head_dim)` for one head; entries above the
/// diagonal are exactly zero.
pub fn causal_attention_probs(q: &Mat, k: &Mat) -> Mat {
    let t = q.rows();
    let c = 1.0 / (q.cols() as f64).sqrt();
    let mut p = Mat::zeros(t, t);
    for i in 0..t {
        let qi = q.row(i);
        let scores: Vec<f64> = (0..=i).map(|j| c * crate::tensor::dot(qi, k.row(j))).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, ej) in e.iter().enumerate() {
            p.set(i, j, ej / z);
        }
    }
    p
}

pub(crate) fn block_forward(cfg: &ModelConfig, w: &BlockWeights, lora: Option<&[LoraPair]>, x: &Mat) -> BlockCache {
    let s = cfg.lora_scale();
    let pair = |t: Target| lora.map(|l| &l[t.index()]);
    let mut lora_z = Vec::new();
    let mut proj = |input: &Mat, t: Target| {
        let (y, z) = lora_linear(input, w.proj(t), pair(t), s);
        if let Some(z) = z {
            lora_z.push(z);
        }
        y
    };

    let (n1, _) = rms_norm(x, &w.attn_norm, RMS_EPS);
    let q = proj(&n1, Target::AttnQ);
    let k = proj(&n1, Target::AttnK);
    let v = proj(&n1, Target::AttnV);

    let dh = cfg.head_dim();
    let mut ctx = Mat::zeros(x.rows(), cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = (
            q.col_block(h * dh, dh),
            k.col_block(h * dh, dh),
            v.col_block(h * dh, dh),
        );
        let p = causal_attention_probs(&qh, &kh);
        let ch = p.matmul(&vh);
        for i in 0..x.rows() {
            ctx.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(ch.row(i));
        }
        probs.push(p);
    }
    let mut h1 = proj(&ctx, Target::AttnO);
    h1.add_assign(x);

    let (n2, inv2) = rms_norm(&h1, &w.mlp_norm, RMS_EPS);
    let gate = proj(&n2, Target::MlpGate);
    let up = proj(&n2, Target::MlpUp);
    let act = Mat::from_vec(
        gate.rows(),
        gate.cols(),
        gate.data().iter().zip(up.data()).map(|(&g, &u)| silu(g) * u).collect(),
    );
    let mut out = proj(&act, Target::MlpDown);
    out.add_assign(&h1);

    BlockCache {
        n1,
        q,
        k,
        v,
        probs,
        ctx,
        h1,
        n2,
        inv2,
        gate,
        up,
        act,
        lora_z,
        out,
    }
}
