//! Multimodal probe batches and pooled per-layer embedding sets.
//!
//! A probe lays out, for each modality in order, a short text prefix
//! followed by that modality's token block. All probes in a batch share
//! the same layout; only the sampled embeddings differ.

use crate::checkpoint::{DType, Tensor, TensorSet};
use crate::error::{Error, Result};
use crate::model::{extract_modality, Span, TokenSequence, TraceSet};
use crate::rng::{gaussian_mat, normal, stream};
use crate::tensor::Mat;

pub const TOKEN_NOISE: f64 = 0.05;

/// A synthetic modality: an orthonormal basis (`d_m × d_model`) spanning the
/// directions its tokens occupy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub tag: String,
    pub basis: Mat,
    pub tokens_per_block: usize,
    pub prefix_tokens: usize,
}

impl ModalitySpec {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.basis.cols() != d_model {
            return Err(Error::Shape(format!(
                "modality `{}` basis width {} != d_model {d_model}",
                self.tag,
                self.basis.cols()
            )));
        }
        if self.basis.rows() == 0 || self.basis.rows() > d_model {
            return Err(Error::Config(format!(
                "modality `{}` subspace dimension {} outside 1..={d_model}",
                self.tag,
                self.basis.rows()
            )));
        }
        if self.tokens_per_block == 0 {
            return Err(Error::Config(format!("modality `{}` has no tokens", self.tag)));
        }
        let g = self.basis.matmul_t(&self.basis);
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (g.get(i, j) - want).abs() > 1e-8 {
                    return Err(Error::Config(format!(
                        "modality `{}` basis is not orthonormal",
                        self.tag
                    )));
                }
            }
        }
        Ok(())
    }

    /// Squared norm of `v`'s projection onto this subspace.
    pub fn projected_energy(&self, v: &[f64]) -> f64 {
        (0..self.basis.rows())
            .map(|i| crate::tensor::dot(self.basis.row(i), v).powi(2))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub probes: Vec<TokenSequence>,
    pub seed: u64,
}

impl ProbeBatch {
    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn spans(&self) -> &[Span] {
        self.probes[0].spans()
    }

    pub fn modality_tags(&self) -> Vec<String> {
        self.spans().iter().map(|s| s.tag.clone()).collect()
    }

    pub fn to_tensor_set(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        set.set_meta("kind", "probes")?;
        set.set_meta("seed", self.seed)?;
        set.set_meta("spans", self.spans())?;
        for (k, p) in self.probes.iter().enumerate() {
            set.push(Tensor::from_mat(
                format!("probe/{k}/embeddings"),
                p.embeddings(),
                DType::F32,
            ));
        }
        Ok(set)
    }

    pub fn from_tensor_set(set: &TensorSet) -> Result<Self> {
        let spans: Vec<Span> = set.meta_as("spans")?;
        let seed: u64 = set.meta_as("seed")?;
        let probes = (0..set.tensors.len())
            .map(|k| {
                let e = set.require(&format!("probe/{k}/embeddings"))?.to_mat()?;
                TokenSequence::new(e, spans.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProbeBatch { probes, seed })
    }
}

/// Samples `k` probes from one seeded stream. Text-prefix tokens are
/// isotropic Gaussians at scale `1/sqrt(d_model)`; modality tokens are
/// standard-Gaussian coefficients on the modality basis plus isotropic
/// noise.
pub fn build_probe_batch(specs: &[ModalitySpec], k: usize, seed: u64) -> Result<ProbeBatch> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no modality specs".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 probes, got {k}")));
    }
    let d = specs[0].basis.cols();
    for (i, s) in specs.iter().enumerate() {
        s.validate(d)?;
        if specs[..i].iter().any(|o| o.tag == s.tag) {
            return Err(Error::InvalidArgument(format!("duplicate modality `{}`", s.tag)));
        }
    }

    let mut spans = Vec::with_capacity(specs.len());
    let mut t = 0;
    for s in specs {
        t += s.prefix_tokens;
        spans.push(Span {
            tag: s.tag.clone(),
            start: t,
            len: s.tokens_per_block,
        });
        t += s.tokens_per_block;
    }

    let mut rng = stream(seed);
    let text_scale = 1.0 / (d as f64).sqrt();
    let mut probes = Vec::with_capacity(k);
    for _ in 0..k {
        let mut e = Mat::zeros(t, d);
        for (s, span) in specs.iter().zip(&spans) {
            let prefix = gaussian_mat(&mut rng, s.prefix_tokens, d, text_scale);
            for r in 0..s.prefix_tokens {
                e.row_mut(span.start - s.prefix_tokens + r)
                    .copy_from_slice(prefix.row(r));
            }
            for r in 0..s.tokens_per_block {
                let coeffs: Vec<f64> = (0..s.basis.rows()).map(|_| normal(&mut rng)).collect();
                let row = e.row_mut(span.start + r);
                for (b, &c) in coeffs.iter().enumerate() {
                    row.iter_mut().zip(s.basis.row(b)).for_each(|(x, &u)| *x += c * u);
                }
                for x in row.iter_mut() {
                    *x += TOKEN_NOISE * normal(&mut rng);
                }
            }
        }
        probes.push(TokenSequence::new(e, spans.clone())?);
    }
    Ok(ProbeBatch { probes, seed })
}

/// Mean over the rows of a token block.
pub fn mean_pool(block: &Mat) -> Result<Vec<f64>> {
    if block.rows() == 0 {
        return Err(Error::Shape("cannot pool an empty block".into()));
    }
    let mut out = vec![0.0; block.cols()];
    for i in 0..block.rows() {
        out.iter_mut().zip(block.row(i)).for_each(|(o, v)| *o += v);
    }
    let n = block.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Pooled modality embeddings at `layer`, one row per probe, for the base
/// and the specialized model.
pub fn collect_layer_sets(
    batch: &ProbeBatch,
    base: &[TraceSet],
    specialized: &[TraceSet],
    modality: &str,
    layer: usize,
) -> Result<(Mat, Mat)> {
    if base.len() != batch.len() || specialized.len() != batch.len() {
        return Err(Error::InvalidArgument("trace count does not match the batch".into()));
    }
    let pooled = |traces: &[TraceSet]| -> Result<Mat> {
        let rows = traces
            .iter()
            .zip(&batch.probes)
            .enumerate()
            .map(|(k, (tr, p))| {
                if tr.probe_id != k {
                    return Err(Error::InvalidArgument(format!(
                        "trace {k} belongs to probe {}",
                        tr.probe_id
                    )));
                }
                mean_pool(&extract_modality(tr, p, modality, layer)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_rows(&rows))
    };
    Ok((pooled(base)?, pooled(specialized)?))
}
