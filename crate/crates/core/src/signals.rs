//! Coefficient mathematics.
//!
//! Layer-wise: sliced Wasserstein distance between pooled base and
//! specialized embedding sets per layer, first differences over layers,
//! z-score over layers, sum over probe modalities, softmax across models.
//!
//! Element-wise: z-score of accumulated absolute gradients within a layer,
//! softmax across models per element.

use crate::error::{Error, Result};
use crate::grad::SensitivityAccumulator;
use crate::lora::LoraParams;
use crate::rng::{normal, stream};
use crate::tensor::{dot, Mat};

const ZSCORE_FLOOR: f64 = 1e-12;
const DIRECTION_RETRIES: usize = 16;

/// Exact `p`-Wasserstein distance between two equal-size empirical
/// distributions on the line: sort both, pair by rank.
pub fn wasserstein_1d(x: &[f64], y: &[f64], p: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidArgument(format!("order p must be >= 1, got {p}")));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let cost: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b).abs().powf(p)).sum();
    Ok((cost / x.len() as f64).powf(1.0 / p))
}

/// `count` unit vectors in `dim` dimensions, uniform on the sphere.
pub fn sample_directions(dim: usize, count: usize, seed: u64) -> Result<Mat> {
    let mut rng = stream(seed);
    let mut dirs = Mat::zeros(count, dim);
    for j in 0..count {
        let mut tries = 0;
        loop {
            let v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let n = dot(&v, &v).sqrt();
            if n > 1e-12 {
                dirs.row_mut(j).iter_mut().zip(&v).for_each(|(d, x)| *d = x / n);
                break;
            }
            tries += 1;
            if tries >= DIRECTION_RETRIES {
                return Err(Error::InvalidArgument("could not draw a nonzero direction".into()));
            }
        }
    }
    Ok(dirs)
}

/// Monte-Carlo sliced `p`-Wasserstein distance between the rows of `x` and
/// `y` with `projections` seeded directions.
pub fn swd(x: &Mat, y: &Mat, projections: usize, p: f64, seed: u64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let dirs = sample_directions(x.cols(), projections, seed)?;
    let px = x.matmul_t(&dirs);
    let py = y.matmul_t(&dirs);
    let mut total = 0.0;
    for j in 0..projections {
        let a: Vec<f64> = (0..x.rows()).map(|i| px.get(i, j)).collect();
        let b: Vec<f64> = (0..y.rows()).map(|i| py.get(i, j)).collect();
        total += wasserstein_1d(&a, &b, p)?.powf(p);
    }
    Ok((total / projections as f64).powf(1.0 / p))
}

/// First differences `swd[l] − swd[l−1]`, `l = 1..n`.
pub fn layer_deltas(swd_by_layer: &[f64], n_layers: usize) -> Result<Vec<f64>> {
    if swd_by_layer.len() != n_layers + 1 {
        return Err(Error::Shape(format!(
            "expected {} layer distances, got {}",
            n_layers + 1,
            swd_by_layer.len()
        )));
    }
    Ok(swd_by_layer.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Standardizes with the population standard deviation; all zeros when the
/// deviation is below `1e-12`.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("z-score of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZSCORE_FLOOR {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

/// `softmax(scores / tau)`, max-shifted.
pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Base-vs-specialized SWD per (model, probe modality, layer), layers
/// `0..=n_layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwdTable {
    pub models: Vec<String>,
    pub modalities: Vec<String>,
    /// `values[model][modality][layer]`
    pub values: Vec<Vec<Vec<f64>>>,
}

impl SwdTable {
    pub fn n_layers(&self) -> usize {
        self.values
            .first()
            .and_then(|m| m.first())
            .map_or(0, |v| v.len().saturating_sub(1))
    }

    /// Mean over layers `1..=n` of one cell.
    pub fn mean_shift(&self, model: usize, modality: usize) -> f64 {
        let v = &self.values[model][modality];
        v[1..].iter().sum::<f64>() / (v.len() - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCoefficients {
    pub models: Vec<String>,
    pub modalities: Vec<String>,
    /// `alpha[model][layer]`, blocks `0..n_layers`.
    pub alpha: Vec<Vec<f64>>,
    pub tau: f64,
    /// Aggregated importance `s[model][layer]`.
    pub scores: Vec<Vec<f64>>,
    /// Normalized deltas `d_hat[model][modality][layer]`.
    pub d_hat: Vec<Vec<Vec<f64>>>,
}

impl LayerCoefficients {
    pub fn n_layers(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }
}

pub fn layer_coefficients(table: &SwdTable, tau: f64) -> Result<LayerCoefficients> {
    check_tau(tau)?;
    if table.models.is_empty() || table.values.len() != table.models.len() {
        return Err(Error::Shape("SWD table model count".into()));
    }
    let n_layers = table.n_layers();
    if n_layers == 0 {
        return Err(Error::Shape("SWD table has no layers".into()));
    }
    let mut scores = Vec::with_capacity(table.models.len());
    let mut d_hat = Vec::with_capacity(table.models.len());
    for per_modality in &table.values {
        if per_modality.len() != table.modalities.len() {
            return Err(Error::Shape("SWD table modality count".into()));
        }
        let mut s = vec![0.0; n_layers];
        let mut dh = Vec::with_capacity(per_modality.len());
        for swd_list in per_modality {
            let z = zscore(&layer_deltas(swd_list, n_layers)?)?;
            s.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
            dh.push(z);
        }
        scores.push(s);
        d_hat.push(dh);
    }
    let mut alpha = vec![vec![0.0; n_layers]; table.models.len()];
    for l in 0..n_layers {
        let col: Vec<f64> = scores.iter().map(|s| s[l]).collect();
        for (m, a) in softmax_with_temperature(&col, tau).into_iter().enumerate() {
            alpha[m][l] = a;
        }
    }
    Ok(LayerCoefficients {
        models: table.models.clone(),
        modalities: table.modalities.clone(),
        alpha,
        tau,
        scores,
        d_hat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementCoefficients {
    pub models: Vec<String>,
    pub tau: f64,
    /// One coefficient per LoRA element, per model.
    pub beta: Vec<LoraParams>,
}

/// Within-layer z-score of each model's sensitivities, then a softmax across
/// models for every element.
pub fn element_coefficients(
    accumulators: &[(String, SensitivityAccumulator)],
    tau: f64,
) -> Result<ElementCoefficients> {
    check_tau(tau)?;
    let Some((_, first)) = accumulators.first() else {
        return Err(Error::InvalidArgument("no accumulators".into()));
    };
    for (name, a) in accumulators {
        first.params.check_same_shape(&a.params, name)?;
    }
    let n_layers = first.params.n_layers();
    let mut normalized: Vec<LoraParams> = Vec::with_capacity(accumulators.len());
    for (_, a) in accumulators {
        let mut p = a.params.clone();
        for l in 0..n_layers {
            p.set_layer_flat(l, &zscore(&a.params.layer_flat(l))?);
        }
        normalized.push(p);
    }
    let mut beta: Vec<LoraParams> = normalized.iter().map(LoraParams::zeros_like).collect();
    for l in 0..n_layers {
        let flats: Vec<Vec<f64>> = normalized.iter().map(|p| p.layer_flat(l)).collect();
        let mut out = vec![vec![0.0; flats[0].len()]; flats.len()];
        for i in 0..flats[0].len() {
            let col: Vec<f64> = flats.iter().map(|f| f[i]).collect();
            for (m, b) in softmax_with_temperature(&col, tau).into_iter().enumerate() {
                out[m][i] = b;
            }
        }
        for (b, o) in beta.iter_mut().zip(&out) {
            b.set_layer_flat(l, o);
        }
    }
    Ok(ElementCoefficients {
        models: accumulators.iter().map(|(n, _)| n.clone()).collect(),
        tau,
        beta,
    })
}
