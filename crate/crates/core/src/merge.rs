//! Coefficient fusion and adapter merging.
//!
//! All methods merge `A` and `B` factors elementwise; none of them composes
//! `B·A` first.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraParams};
use crate::signals::{ElementCoefficients, LayerCoefficients};

const SIMPLEX_TOL: f64 = 1e-9;
pub const MERGED_TAG: &str = "merged";

/// Which granularities produced a set of merge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientSource {
    LayerOnly,
    ElementOnly,
    Fused,
    /// Supplied directly rather than estimated (uniform, one-hot, ...).
    Manual,
}

/// Per-model, per-element merge weights; every element coordinate lies on
/// the probability simplex across models.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCoefficients {
    pub models: Vec<String>,
    pub source: CoefficientSource,
    pub lambda: Vec<LoraParams>,
}

impl FusedCoefficients {
    /// Validates shapes and the per-coordinate simplex constraint.
    pub fn new(models: Vec<String>, source: CoefficientSource, lambda: Vec<LoraParams>) -> Result<Self> {
        let fc = FusedCoefficients { models, source, lambda };
        fc.validate()?;
        Ok(fc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.models.len() != self.lambda.len() {
            return Err(Error::Shape(format!(
                "{} model names for {} coefficient sets",
                self.models.len(),
                self.lambda.len()
            )));
        }
        for (name, l) in self.models.iter().zip(&self.lambda) {
            self.lambda[0].check_same_shape(l, name)?;
        }
        let mut sums = vec![0.0; self.lambda[0].len()];
        for l in &self.lambda {
            for (s, v) in sums.iter_mut().zip(l.values()) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("coefficient {v} outside [0, 1]")));
                }
                *s += v;
            }
        }
        if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > SIMPLEX_TOL) {
            return Err(Error::InvalidArgument(format!(
                "coefficients sum to {s} at some element, expected 1"
            )));
        }
        Ok(())
    }

    pub fn uniform(models: Vec<String>, config: &ModelConfig) -> Self {
        let w = 1.0 / models.len() as f64;
        let lambda = models.iter().map(|_| LoraParams::zeros(config).map(|_| w)).collect();
        FusedCoefficients {
            models,
            source: CoefficientSource::Manual,
            lambda,
        }
    }

    /// All weight on `selected`.
    pub fn one_hot(models: Vec<String>, selected: usize, config: &ModelConfig) -> Self {
        let lambda = (0..models.len())
            .map(|m| LoraParams::zeros(config).map(|_| if m == selected { 1.0 } else { 0.0 }))
            .collect();
        FusedCoefficients {
            models,
            source: CoefficientSource::Manual,
            lambda,
        }
    }

    /// Layer coefficients broadcast to every element of their block.
    pub fn from_layer(alpha: &LayerCoefficients, config: &ModelConfig) -> Result<Self> {
        if alpha.n_layers() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} layer coefficients for {} layers",
                alpha.n_layers(),
                config.n_layers
            )));
        }
        let lambda = alpha
            .alpha
            .iter()
            .map(|row| {
                let mut p = LoraParams::zeros(config);
                for (l, &a) in row.iter().enumerate() {
                    let n = p.layer_len(l);
                    p.set_layer_flat(l, &vec![a; n]);
                }
                p
            })
            .collect();
        Ok(FusedCoefficients {
            models: alpha.models.clone(),
            source: CoefficientSource::LayerOnly,
            lambda,
        })
    }

    pub fn from_element(beta: &ElementCoefficients) -> Self {
        FusedCoefficients {
            models: beta.models.clone(),
            source: CoefficientSource::ElementOnly,
            lambda: beta.beta.clone(),
        }
    }
}

/// `λ_m = α_m β_m / Σ_m' α_m' β_m'` per element, with `α` taken from the
/// element's block.
pub fn integrate(alpha: &LayerCoefficients, beta: &ElementCoefficients) -> Result<FusedCoefficients> {
    if alpha.models != beta.models {
        return Err(Error::Shape(format!(
            "layer models {:?} vs element models {:?}",
            alpha.models, beta.models
        )));
    }
    let first = beta
        .beta
        .first()
        .ok_or_else(|| Error::InvalidArgument("no element coefficients".into()))?;
    if alpha.n_layers() != first.n_layers() {
        return Err(Error::Shape(format!(
            "{} layer coefficients for {} adapter layers",
            alpha.n_layers(),
            first.n_layers()
        )));
    }
    for (name, b) in beta.models.iter().zip(&beta.beta) {
        first.check_same_shape(b, name)?;
    }
    let n_models = beta.beta.len();
    let mut lambda: Vec<LoraParams> = beta.beta.iter().map(LoraParams::zeros_like).collect();
    for l in 0..first.n_layers() {
        let flats: Vec<Vec<f64>> = beta.beta.iter().map(|b| b.layer_flat(l)).collect();
        let mut out = vec![vec![0.0; flats[0].len()]; n_models];
        for i in 0..flats[0].len() {
            let prod: Vec<f64> = (0..n_models).map(|m| alpha.alpha[m][l] * flats[m][i]).collect();
            let z: f64 = prod.iter().sum();
            for m in 0..n_models {
                out[m][i] = prod[m] / z;
            }
        }
        for (p, o) in lambda.iter_mut().zip(&out) {
            p.set_layer_flat(l, o);
        }
    }
    Ok(FusedCoefficients {
        models: beta.models.clone(),
        source: CoefficientSource::Fused,
        lambda,
    })
}

fn check_adapters(adapters: &[LoraAdapter]) -> Result<&LoraAdapter> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::InvalidArgument("no adapters to merge".into()))?;
    for a in adapters {
        first.params.check_same_shape(&a.params, &a.modality_tag)?;
    }
    Ok(first)
}

/// `θ = Σ_m λ_m θ_m` elementwise. `adapters[m]` must carry the tag
/// `lambda.models[m]`.
pub fn merge_adapters(adapters: &[LoraAdapter], lambda: &FusedCoefficients) -> Result<LoraAdapter> {
    let first = check_adapters(adapters)?;
    lambda.validate()?;
    if adapters.len() != lambda.models.len() {
        return Err(Error::Shape(format!(
            "{} adapters for {} coefficient sets",
            adapters.len(),
            lambda.models.len()
        )));
    }
    for (a, m) in adapters.iter().zip(&lambda.models) {
        if &a.modality_tag != m {
            return Err(Error::InvalidArgument(format!(
                "adapter `{}` paired with coefficients for `{m}`",
                a.modality_tag
            )));
        }
    }
    first
        .params
        .check_same_shape(&lambda.lambda[0], "adapter vs coefficients")?;

    let mut out = first.params.zeros_like();
    for (a, l) in adapters.iter().zip(&lambda.lambda) {
        for ((o, x), w) in out.values_mut().zip(a.params.values()).zip(l.values()) {
            *o += w * x;
        }
    }
    Ok(LoraAdapter {
        modality_tag: MERGED_TAG.into(),
        params: out,
    })
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-tensor apply `f` to the column of model values at every coordinate.
fn merge_per_tensor(adapters: &[LoraAdapter], f: impl Fn(&[&[f64]]) -> Vec<f64>) -> Result<LoraAdapter> {
    let first = check_adapters(adapters)?;
    let mut out = first.params.zeros_like();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for (t, pair) in layer.iter_mut().enumerate() {
            for factor in [crate::lora::Factor::A, crate::lora::Factor::B] {
                let inputs: Vec<&[f64]> = adapters
                    .iter()
                    .map(|a| a.params.layers[l][t].factor(factor).data())
                    .collect();
                pair.factor_mut(factor).data_mut().copy_from_slice(&f(&inputs));
            }
        }
    }
    Ok(LoraAdapter {
        modality_tag: MERGED_TAG.into(),
        params: out,
    })
}

/// Plain elementwise mean.
pub fn avg_merge(adapters: &[LoraAdapter]) -> Result<LoraAdapter> {
    let n = adapters.len() as f64;
    merge_per_tensor(adapters, |tensors| {
        let mut col = vec![0.0; tensors.len()];
        (0..tensors[0].len())
            .map(|i| {
                col.iter_mut().zip(tensors).for_each(|(c, t)| *c = t[i]);
                order_free_sum(&mut col) / n
            })
            .collect()
    })
}

/// Keeps the `ceil(fraction · len)` largest-magnitude entries, ties broken
/// toward the lower index.
pub fn trim_top_magnitude(values: &[f64], fraction: f64) -> Vec<f64> {
    let n = values.len();
    // the epsilon keeps e.g. 0.7 · 10 from rounding up to 8
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &i in idx.iter().take(keep) {
        out[i] = values[i];
    }
    out
}

/// TIES merging, each tensor independently: trim to the top
/// `trim_fraction` by magnitude, elect a sign per coordinate from the sum
/// of trimmed values (zero sum elects `+`), then average the trimmed values
/// that agree with the elected sign (0 when none do).
pub fn ties_merge(adapters: &[LoraAdapter], trim_fraction: f64) -> Result<LoraAdapter> {
    if adapters.len() < 2 {
        return Err(Error::InvalidArgument("TIES needs at least two adapters".into()));
    }
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction must be in (0, 1], got {trim_fraction}"
        )));
    }
    merge_per_tensor(adapters, |tensors| {
        let trimmed: Vec<Vec<f64>> = tensors.iter().map(|t| trim_top_magnitude(t, trim_fraction)).collect();
        (0..tensors[0].len())
            .map(|i| {
                let mut column: Vec<f64> = trimmed.iter().map(|t| t[i]).collect();
                let positive = order_free_sum(&mut column) >= 0.0;
                let mut agree: Vec<f64> = trimmed
                    .iter()
                    .map(|t| t[i])
                    .filter(|&v| if positive { v > 0.0 } else { v < 0.0 })
                    .collect();
                if agree.is_empty() {
                    0.0
                } else {
                    let n = agree.len() as f64;
                    order_free_sum(&mut agree) / n
                }
            })
            .collect()
    })
}
