//! End-to-end coefficient estimation: probes → traces → layer signals
//! (SWD) and element signals (gradients) → merge weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};
use crate::grad::{accumulate_with_base, trace_batch, SensitivityAccumulator};
use crate::merge::{integrate, FusedCoefficients};
use crate::model::TraceSet;
use crate::probe::{build_probe_batch, collect_layer_sets, ProbeBatch};
use crate::rng::derive_seed;
use crate::signals::{element_coefficients, layer_coefficients, swd, ElementCoefficients, LayerCoefficients, SwdTable};

const SALT_PROBES: u64 = 0x9b0b_e001;
const SALT_SWD: u64 = 0x5_0d00;

/// Granularity of the estimated merge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    Layer,
    Element,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientOptions {
    pub seed: u64,
    pub k: usize,
    pub projections: usize,
    pub p: f64,
    pub tau: f64,
    /// Adapter tags to merge, in order; empty means every adapter.
    pub models: Vec<String>,
}

impl Default for CoefficientOptions {
    fn default() -> Self {
        CoefficientOptions {
            seed: 0,
            k: 32,
            projections: 256,
            p: 2.0,
            tau: 0.5,
            models: Vec::new(),
        }
    }
}

pub fn probe_seed(seed: u64) -> u64 {
    derive_seed(seed, SALT_PROBES)
}

/// Projection seed for one trace layer; shared by every (model, modality)
/// cell of that layer.
pub fn swd_layer_seed(seed: u64, layer: usize) -> u64 {
    derive_seed(seed, SALT_SWD + layer as u64)
}

/// Adapter tags in modality order, followed by any adapters without a
/// matching modality.
pub fn default_models(bundle: &ModelBundle) -> Vec<String> {
    let mut out: Vec<String> = bundle
        .modalities
        .iter()
        .filter(|m| bundle.adapters.contains_key(&m.tag))
        .map(|m| m.tag.clone())
        .collect();
    for tag in bundle.adapters.keys() {
        if !out.contains(tag) {
            out.push(tag.clone());
        }
    }
    out
}

/// SWD between pooled base and specialized modality embeddings for every
/// (model, modality, layer).
pub fn swd_table(
    bundle: &ModelBundle,
    batch: &ProbeBatch,
    base: &[TraceSet],
    models: &[String],
    projections: usize,
    p: f64,
    seed: u64,
) -> Result<SwdTable> {
    let modalities = batch.modality_tags();
    let n_layers = bundle.config.n_layers;
    let mut values = Vec::with_capacity(models.len());
    for tag in models {
        let spec = trace_batch(bundle, Some(&bundle.adapter(tag)?.params), batch)?;
        let cells: Vec<(usize, usize)> = (0..modalities.len())
            .flat_map(|x| (0..=n_layers).map(move |l| (x, l)))
            .collect();
        let flat: Vec<f64> = cells
            .par_iter()
            .map(|&(x, l)| {
                let (hb, hs) = collect_layer_sets(batch, base, &spec, &modalities[x], l)?;
                swd(&hb, &hs, projections, p, swd_layer_seed(seed, l))
            })
            .collect::<Result<_>>()?;
        values.push(flat.chunks(n_layers + 1).map(<[f64]>::to_vec).collect());
    }
    Ok(SwdTable {
        models: models.to_vec(),
        modalities,
        values,
    })
}

#[derive(Debug, Clone)]
pub struct CoefficientRun {
    pub models: Vec<String>,
    pub batch: ProbeBatch,
    pub swd: Option<SwdTable>,
    pub layer: Option<LayerCoefficients>,
    pub sensitivities: Option<Vec<(String, SensitivityAccumulator)>>,
    pub element: Option<ElementCoefficients>,
    pub lambda: FusedCoefficients,
}

pub fn run_coefficients(
    bundle: &ModelBundle,
    opts: &CoefficientOptions,
    mode: CoefficientMode,
) -> Result<CoefficientRun> {
    bundle.validate()?;
    let models = if opts.models.is_empty() {
        default_models(bundle)
    } else {
        opts.models.clone()
    };
    if models.is_empty() {
        return Err(Error::InvalidArgument("bundle has no adapters".into()));
    }
    for m in &models {
        bundle.adapter(m)?;
    }
    let batch = build_probe_batch(&bundle.modalities, opts.k, probe_seed(opts.seed))?;
    let base = trace_batch(bundle, None, &batch)?;

    let (swd_tab, layer) = if mode != CoefficientMode::Element {
        let t = swd_table(bundle, &batch, &base, &models, opts.projections, opts.p, opts.seed)?;
        let lc = layer_coefficients(&t, opts.tau)?;
        (Some(t), Some(lc))
    } else {
        (None, None)
    };

    let (sens, element) = if mode != CoefficientMode::Layer {
        let modalities = batch.modality_tags();
        let sens = models
            .iter()
            .map(|m| Ok((m.clone(), accumulate_with_base(bundle, m, &batch, &modalities, &base)?)))
            .collect::<Result<Vec<_>>>()?;
        let ec = element_coefficients(&sens, opts.tau)?;
        (Some(sens), Some(ec))
    } else {
        (None, None)
    };

    let lambda = match (mode, &layer, &element) {
        (CoefficientMode::Layer, Some(lc), _) => FusedCoefficients::from_layer(lc, &bundle.config)?,
        (CoefficientMode::Element, _, Some(ec)) => FusedCoefficients::from_element(ec),
        (CoefficientMode::Fused, Some(lc), Some(ec)) => integrate(lc, ec)?,
        _ => unreachable!("signals computed for the requested mode"),
    };
    Ok(CoefficientRun {
        models,
        batch,
        swd: swd_tab,
        layer,
        sensitivities: sens,
        element,
        lambda,
    })
}
