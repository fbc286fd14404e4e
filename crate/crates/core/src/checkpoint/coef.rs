use std::path::Path;

use super::bundle::{lora_from_tensors, lora_to_tensors};
use super::container::{read_checkpoint, DType, TensorSet};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::LoraParams;
use crate::merge::{CoefficientSource, FusedCoefficients};
use crate::signals::ElementCoefficients;

/// Per-element coefficients as stored on disk, tensors named
/// `coef/<model>/<layer>/<target>/{A,B}`. Stored at 64-bit so the
/// per-element simplex survives the round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFile {
    pub config: ModelConfig,
    pub models: Vec<String>,
    pub source: CoefficientSource,
    pub tau: Option<f64>,
    pub values: Vec<LoraParams>,
}

fn coef_prefix(model: &str) -> String {
    format!("coef/{model}/")
}

impl CoefficientFile {
    pub fn from_element(config: &ModelConfig, beta: &ElementCoefficients) -> Self {
        CoefficientFile {
            config: config.clone(),
            models: beta.models.clone(),
            source: CoefficientSource::ElementOnly,
            tau: Some(beta.tau),
            values: beta.beta.clone(),
        }
    }

    pub fn from_fused(config: &ModelConfig, lambda: &FusedCoefficients, tau: Option<f64>) -> Self {
        CoefficientFile {
            config: config.clone(),
            models: lambda.models.clone(),
            source: lambda.source,
            tau,
            values: lambda.lambda.clone(),
        }
    }

    pub fn to_fused(&self) -> Result<FusedCoefficients> {
        FusedCoefficients::new(self.models.clone(), self.source, self.values.clone())
    }

    pub fn to_tensor_set(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        set.set_meta("kind", "coefficients")?;
        set.set_meta("config", &self.config)?;
        set.set_meta("models", &self.models)?;
        set.set_meta("source", self.source)?;
        set.set_meta("tau", self.tau)?;
        for (m, v) in self.models.iter().zip(&self.values) {
            v.check_config(&self.config)?;
            // names use `coef/<model>/<layer>/<target>/<A|B>`
            let mut part = TensorSet::new();
            lora_to_tensors(&mut part, "", v, DType::F64);
            for mut t in part.tensors {
                t.name = format!("{}{}", coef_prefix(m), slash_name(&t.name));
                set.push(t);
            }
        }
        Ok(set)
    }

    pub fn from_tensor_set(set: &TensorSet) -> Result<Self> {
        let kind: String = set.meta_as("kind")?;
        if kind != "coefficients" {
            return Err(Error::Format(format!(
                "expected a coefficients container, found `{kind}`"
            )));
        }
        let config: ModelConfig = set.meta_as("config")?;
        config.validate()?;
        let models: Vec<String> = set.meta_as("models")?;
        let mut values = Vec::with_capacity(models.len());
        for m in &models {
            // rename back to the dotted layout the LoRA reader expects
            let prefix = coef_prefix(m);
            let mut part = TensorSet::new();
            for t in set.tensors.iter().filter(|t| t.name.starts_with(&prefix)) {
                let mut t = t.clone();
                t.name = dotted_name(&t.name[prefix.len()..])?;
                part.push(t);
            }
            values.push(lora_from_tensors(&part, "", &config)?);
        }
        Ok(CoefficientFile {
            config,
            models,
            source: set.meta_as("source")?,
            tau: set.meta_as("tau")?,
            values,
        })
    }
}

/// `layer.3.attn.q.A` → `3/attn.q/A`
fn slash_name(dotted: &str) -> String {
    let rest = dotted.strip_prefix("layer.").expect("LoRA tensor name");
    let (layer, rest) = rest.split_once('.').expect("layer index");
    let (target, factor) = rest.rsplit_once('.').expect("factor suffix");
    format!("{layer}/{target}/{factor}")
}

fn dotted_name(slashed: &str) -> Result<String> {
    let parts: Vec<&str> = slashed.split('/').collect();
    match parts[..] {
        [layer, target, factor] => Ok(format!("layer.{layer}.{target}.{factor}")),
        _ => Err(Error::Format(format!("bad coefficient tensor name `{slashed}`"))),
    }
}

pub fn load_coefficients(path: impl AsRef<Path>) -> Result<CoefficientFile> {
    CoefficientFile::from_tensor_set(&read_checkpoint(path)?)
}
