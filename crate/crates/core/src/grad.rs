//! Gradients of the per-layer embedding distance
//! `r = ‖H_base[span] − H_spec[span]‖_F` with respect to the LoRA factors of
//! the block that produced that layer, and the absolute-gradient
//! sensitivity accumulator built from them.
//!
//! The backward pass is a hand-written vector-Jacobian product through one
//! block (RMSNorm, causal multi-head attention, SwiGLU, LoRA projections).
//! Layer-`l` factors only reach `r^l` through block `l`, so the block input
//! is held fixed at the specialized model's `H^{l-1}`.
//!
//! [`fd_grad`] is the independent reference: it re-runs the full forward
//! pass with one element nudged either way.

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{BlockWeights, ModelBundle};
use crate::config::{ModelConfig, Target};
use crate::error::{Error, Result};
use crate::lora::{ElementCoord, LoraPair, LoraParams};
use crate::model::{block_forward, forward_params, sigmoid, silu, BlockCache, TokenSequence, TraceSet};
use crate::probe::ProbeBatch;
use crate::rng::stream;
use crate::tensor::Mat;

/// Running sums of `|∂r/∂θ|`, shaped exactly like the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityAccumulator {
    pub params: LoraParams,
}

/// `∂r^l/∂A` and `∂r^l/∂B` for every target of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    /// Trace layer (1-based); the parameters live in block `layer - 1`.
    pub layer: usize,
    pub r: f64,
    pub grads: Vec<LoraPair>,
}

impl LayerGradient {
    pub fn pair(&self, t: Target) -> &LoraPair {
        &self.grads[t.index()]
    }
}

/// Frobenius norm of `base − spec`.
pub fn distance_r(base: &Mat, spec: &Mat) -> Result<f64> {
    if base.shape() != spec.shape() {
        return Err(Error::Shape(format!(
            "distance between {:?} and {:?} blocks",
            base.shape(),
            spec.shape()
        )));
    }
    Ok(base.sub(spec).frobenius_norm())
}

fn check_layer(cfg: &ModelConfig, layer: usize) -> Result<()> {
    if layer == 0 || layer > cfg.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range 1..={}",
            cfg.n_layers
        )));
    }
    Ok(())
}

/// Gradient of `r^layer` for `modality` tokens with respect to the
/// adapter's factors in block `layer - 1`. Defined as zero when `r = 0`.
pub fn backward_r_layer(
    bundle: &ModelBundle,
    adapter_tag: &str,
    input: &TokenSequence,
    modality: &str,
    layer: usize,
) -> Result<LayerGradient> {
    check_layer(&bundle.config, layer)?;
    let params = &bundle.adapter(adapter_tag)?.params;
    input.span(modality)?;
    let base = forward_params(bundle, None, input)?;
    let spec = forward_params(bundle, Some(params), input)?;
    backward_from_traces(bundle, params, input, &base, &spec, modality, layer)
}

pub(crate) fn backward_from_traces(
    bundle: &ModelBundle,
    params: &LoraParams,
    input: &TokenSequence,
    base: &TraceSet,
    spec: &TraceSet,
    modality: &str,
    layer: usize,
) -> Result<LayerGradient> {
    let cfg = &bundle.config;
    check_layer(cfg, layer)?;
    let span = input.span(modality)?;
    let diff = spec.hidden[layer]
        .row_block(span.start, span.len)
        .sub(&base.hidden[layer].row_block(span.start, span.len));
    let r = diff.frobenius_norm();
    let block = layer - 1;
    let lora = &params.layers[block];
    if r == 0.0 {
        return Ok(LayerGradient {
            layer,
            r,
            grads: lora.iter().map(LoraPair::zeros_like).collect(),
        });
    }

    let mut cot = Mat::zeros(input.len(), cfg.d_model);
    for i in 0..span.len {
        cot.row_mut(span.start + i)
            .iter_mut()
            .zip(diff.row(i))
            .for_each(|(c, d)| *c = d / r);
    }
    let w = &bundle.base.layers[block];
    let cache = block_forward(cfg, w, Some(lora), &spec.hidden[block]);
    let grads = block_backward(cfg, w, lora, &cache, &cot);
    Ok(LayerGradient { layer, r, grads })
}

/// Backward through `y = x Wᵀ + s (x Aᵀ) Bᵀ` given `z = x Aᵀ`.
fn lora_linear_backward(
    x: &Mat,
    w: &Mat,
    pair: &LoraPair,
    z: &Mat,
    scale: f64,
    dy: &Mat,
    need_dx: bool,
) -> (LoraPair, Option<Mat>) {
    let mut db = dy.t_matmul(z);
    db.scale(scale);
    let mut dz = dy.matmul(&pair.b);
    dz.scale(scale);
    let da = dz.t_matmul(x);
    let dx = need_dx.then(|| {
        let mut dx = dy.matmul(w);
        dx.add_assign(&dz.matmul(&pair.a));
        dx
    });
    (LoraPair { a: da, b: db }, dx)
}

fn rms_norm_backward(x: &Mat, gain: &[f64], inv: &[f64], dy: &Mat) -> Mat {
    let d = x.cols() as f64;
    let mut dx = Mat::zeros(x.rows(), x.cols());
    for (i, &s) in inv.iter().enumerate() {
        let (xr, gr) = (x.row(i), dy.row(i));
        let proj: f64 = xr.iter().zip(gr).zip(gain).map(|((x, dy), g)| g * dy * x).sum();
        let c = s * s * s * proj / d;
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * gain[k] * gr[k] - c * xr[k];
        }
    }
    dx
}

fn block_backward(
    cfg: &ModelConfig,
    w: &BlockWeights,
    lora: &[LoraPair],
    c: &BlockCache,
    d_out: &Mat,
) -> Vec<LoraPair> {
    let s = cfg.lora_scale();
    let z = |t: Target| &c.lora_z[t.index()];
    let pair = |t: Target| &lora[t.index()];

    // MLP branch: out = h1 + down(silu(gate) ⊙ up)
    let (g_down, d_act) = lora_linear_backward(
        &c.act,
        w.proj(Target::MlpDown),
        pair(Target::MlpDown),
        z(Target::MlpDown),
        s,
        d_out,
        true,
    );
    let d_act = d_act.unwrap();
    let n = c.gate.len();
    let (mut d_gate, mut d_up) = (
        Mat::zeros(c.gate.rows(), c.gate.cols()),
        Mat::zeros(c.up.rows(), c.up.cols()),
    );
    for i in 0..n {
        let (g, u, da) = (c.gate.data()[i], c.up.data()[i], d_act.data()[i]);
        let sg = sigmoid(g);
        d_gate.data_mut()[i] = da * u * sg * (1.0 + g * (1.0 - sg));
        d_up.data_mut()[i] = da * silu(g);
    }
    let (g_gate, dn2_gate) = lora_linear_backward(
        &c.n2,
        w.proj(Target::MlpGate),
        pair(Target::MlpGate),
        z(Target::MlpGate),
        s,
        &d_gate,
        true,
    );
    let (g_up, dn2_up) = lora_linear_backward(
        &c.n2,
        w.proj(Target::MlpUp),
        pair(Target::MlpUp),
        z(Target::MlpUp),
        s,
        &d_up,
        true,
    );
    let mut dn2 = dn2_gate.unwrap();
    dn2.add_assign(&dn2_up.unwrap());
    let mut dh1 = rms_norm_backward(&c.h1, &w.mlp_norm, &c.inv2, &dn2);
    dh1.add_assign(d_out);

    // attention branch: h1 = x + o(ctx)
    let (g_o, d_ctx) = lora_linear_backward(
        &c.ctx,
        w.proj(Target::AttnO),
        pair(Target::AttnO),
        z(Target::AttnO),
        s,
        &dh1,
        true,
    );
    let d_ctx = d_ctx.unwrap();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t = c.q.rows();
    let (mut dq, mut dk, mut dv) = (
        Mat::zeros(t, cfg.d_model),
        Mat::zeros(t, cfg.d_model),
        Mat::zeros(t, cfg.d_model),
    );
    for (h, p) in c.probs.iter().enumerate() {
        let off = h * dh;
        let (qh, kh, vh) = (c.q.col_block(off, dh), c.k.col_block(off, dh), c.v.col_block(off, dh));
        let dch = d_ctx.col_block(off, dh);
        let dp = dch.matmul_t(&vh);
        let dvh = p.t_matmul(&dch);
        let mut ds = Mat::zeros(t, t);
        for i in 0..t {
            let row_dot: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                ds.set(i, j, p.get(i, j) * (dp.get(i, j) - row_dot) * scale);
            }
        }
        let dqh = ds.matmul(&kh);
        let dkh = ds.t_matmul(&qh);
        for i in 0..t {
            dq.row_mut(i)[off..off + dh].copy_from_slice(dqh.row(i));
            dk.row_mut(i)[off..off + dh].copy_from_slice(dkh.row(i));
            dv.row_mut(i)[off..off + dh].copy_from_slice(dvh.row(i));
        }
    }
    let (g_q, _) = lora_linear_backward(
        &c.n1,
        w.proj(Target::AttnQ),
        pair(Target::AttnQ),
        z(Target::AttnQ),
        s,
        &dq,
        false,
    );
    let (g_k, _) = lora_linear_backward(
        &c.n1,
        w.proj(Target::AttnK),
        pair(Target::AttnK),
        z(Target::AttnK),
        s,
        &dk,
        false,
    );
    let (g_v, _) = lora_linear_backward(
        &c.n1,
        w.proj(Target::AttnV),
        pair(Target::AttnV),
        z(Target::AttnV),
        s,
        &dv,
        false,
    );

    vec![g_q, g_k, g_v, g_o, g_gate, g_up, g_down]
}

/// `r^layer` for the specialized model with an explicit set of factors.
fn r_with_params(
    bundle: &ModelBundle,
    params: &LoraParams,
    input: &TokenSequence,
    base: &TraceSet,
    modality: &str,
    layer: usize,
) -> Result<f64> {
    let span = input.span(modality)?;
    let spec = forward_params(bundle, Some(params), input)?;
    distance_r(
        &base.hidden[layer].row_block(span.start, span.len),
        &spec.hidden[layer].row_block(span.start, span.len),
    )
}

/// Central difference `(r(θ+h) − r(θ−h)) / 2h` of `r^layer` with respect to
/// one LoRA element, every other parameter held fixed. The element may sit
/// in any block (elements of later blocks give exactly zero).
pub fn fd_grad(
    bundle: &ModelBundle,
    adapter_tag: &str,
    input: &TokenSequence,
    modality: &str,
    layer: usize,
    coord: ElementCoord,
    step: f64,
) -> Result<f64> {
    check_layer(&bundle.config, layer)?;
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let params = &bundle.adapter(adapter_tag)?.params;
    if !params.contains(coord) {
        return Err(Error::InvalidArgument(format!("coordinate {coord:?} out of range")));
    }
    let base = forward_params(bundle, None, input)?;
    let theta = params.get(coord);
    let mut p = params.clone();
    p.set(coord, theta + step);
    let plus = r_with_params(bundle, &p, input, &base, modality, layer)?;
    p.set(coord, theta - step);
    let minus = r_with_params(bundle, &p, input, &base, modality, layer)?;
    Ok((plus - minus) / (2.0 * step))
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Cases with `r` at or below this are skipped (the norm has a kink at 0).
    pub min_r: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 100,
            step: 1e-5,
            seed: 0,
            min_r: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub adapter: String,
    pub probe: usize,
    pub modality: String,
    pub coord: ElementCoord,
    pub r: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares analytic gradients against central differences at uniformly
/// sampled (adapter, probe, modality, element) draws across all blocks.
pub fn check_gradients(bundle: &ModelBundle, batch: &ProbeBatch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let tags = bundle.adapter_tags();
    if tags.is_empty() || batch.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check needs adapters and probes".into(),
        ));
    }
    let modalities = batch.modality_tags();
    let total = LoraParams::zeros(&bundle.config).len();
    let mut rng = stream(opts.seed);
    let mut samples = Vec::with_capacity(opts.samples);
    let mut attempts = 0usize;
    while samples.len() < opts.samples {
        attempts += 1;
        if attempts > 100 * opts.samples.max(1) {
            return Err(Error::InvalidArgument(format!(
                "could not find {} cases with r > {}",
                opts.samples, opts.min_r
            )));
        }
        let tag = &tags[rng.random_range(0..tags.len())];
        let k = rng.random_range(0..batch.len());
        let modality = &modalities[rng.random_range(0..modalities.len())];
        let params = &bundle.adapter(tag)?.params;
        let mut flat = rng.random_range(0..total);
        let mut block = 0;
        while flat >= params.layer_len(block) {
            flat -= params.layer_len(block);
            block += 1;
        }
        let coord = params.coord_of(block, flat).expect("flat index in range");
        let input = &batch.probes[k];
        let g = backward_r_layer(bundle, tag, input, modality, block + 1)?;
        if g.r <= opts.min_r {
            continue;
        }
        let analytic = g.pair(coord.target).factor(coord.factor).get(coord.row, coord.col);
        let numeric = fd_grad(bundle, tag, input, modality, block + 1, coord, opts.step)?;
        samples.push(GradSample {
            adapter: tag.clone(),
            probe: k,
            modality: modality.clone(),
            coord,
            r: g.r,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { samples })
}

/// Forward traces of every probe, in probe order.
pub fn trace_batch(bundle: &ModelBundle, params: Option<&LoraParams>, batch: &ProbeBatch) -> Result<Vec<TraceSet>> {
    batch
        .probes
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut t = forward_params(bundle, params, p)?;
            t.probe_id = k;
            Ok(t)
        })
        .collect()
}

/// `Σ_modality Σ_probe |∂r^l/∂θ^l|` for every block `l`. Terms are
/// summed in a fixed order (modalities outer, probes inner), so the result
/// does not depend on how many workers computed them.
pub fn accumulate_sensitivity(
    bundle: &ModelBundle,
    adapter_tag: &str,
    probes: &ProbeBatch,
    modalities: &[String],
) -> Result<SensitivityAccumulator> {
    let base = trace_batch(bundle, None, probes)?;
    accumulate_with_base(bundle, adapter_tag, probes, modalities, &base)
}

pub(crate) fn accumulate_with_base(
    bundle: &ModelBundle,
    adapter_tag: &str,
    probes: &ProbeBatch,
    modalities: &[String],
    base: &[TraceSet],
) -> Result<SensitivityAccumulator> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("empty probe batch".into()));
    }
    let params = &bundle.adapter(adapter_tag)?.params;
    let spec = trace_batch(bundle, Some(params), probes)?;
    let n_layers = bundle.config.n_layers;
    let tasks: Vec<(&String, usize)> = modalities
        .iter()
        .flat_map(|m| (0..probes.len()).map(move |k| (m, k)))
        .collect();
    let terms: Vec<Vec<LayerGradient>> = tasks
        .par_iter()
        .map(|&(m, k)| {
            (1..=n_layers)
                .map(|l| backward_from_traces(bundle, params, &probes.probes[k], &base[k], &spec[k], m, l))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut acc = params.zeros_like();
    for term in &terms {
        for g in term {
            for (a, d) in acc.layers[g.layer - 1].iter_mut().zip(&g.grads) {
                for (x, y) in a.a.data_mut().iter_mut().zip(d.a.data()) {
                    *x += y.abs();
                }
                for (x, y) in a.b.data_mut().iter_mut().zip(d.b.data()) {
                    *x += y.abs();
                }
            }
        }
    }
    Ok(SensitivityAccumulator { params: acc })
}
