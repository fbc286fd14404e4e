use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_checkpoint, write_checkpoint, DType, Tensor, TensorSet};
use crate::config::{ModelConfig, Target};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair, LoraParams};
use crate::probe::ModalitySpec;
use crate::tensor::Mat;

/// Dense weights of one transformer block. `proj` is indexed by
/// [`Target::index`] and stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub proj: Vec<Mat>,
}

impl BlockWeights {
    pub fn proj(&self, t: Target) -> &Mat {
        &self.proj[t.index()]
    }

    pub fn proj_mut(&mut self, t: Target) -> &mut Mat {
        &mut self.proj[t.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub layers: Vec<BlockWeights>,
}

/// Base transformer, its modality-specialized adapters, and the modality
/// definitions the adapters were specialized to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub base: BaseWeights,
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub modalities: Vec<ModalitySpec>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        if self.base.layers.len() != self.config.n_layers {
            return Err(Error::Shape(format!(
                "base has {} layers, config says {}",
                self.base.layers.len(),
                self.config.n_layers
            )));
        }
        for (l, block) in self.base.layers.iter().enumerate() {
            if block.attn_norm.len() != d || block.mlp_norm.len() != d {
                return Err(Error::Shape(format!("layer {l}: norm gain length")));
            }
            if block.proj.len() != Target::ALL.len() {
                return Err(Error::Shape(format!("layer {l}: projection count")));
            }
            for t in Target::ALL {
                let w = block.proj(t);
                if w.shape() != self.config.target_shape(t) {
                    return Err(Error::Shape(format!(
                        "layer {l} {t}: weight is {:?}, expected {:?}",
                        w.shape(),
                        self.config.target_shape(t)
                    )));
                }
                if let Some(index) = w.first_non_finite() {
                    return Err(Error::NonFinite {
                        name: base_name(l, t.name()),
                        index,
                    });
                }
            }
        }
        for (tag, a) in &self.adapters {
            if a.params.n_layers() != self.config.n_layers {
                return Err(Error::Shape(format!(
                    "adapter `{tag}` has {} layers, config says {}",
                    a.params.n_layers(),
                    self.config.n_layers
                )));
            }
            a.params.check_config(&self.config)?;
        }
        Ok(())
    }

    pub fn adapter(&self, tag: &str) -> Result<&LoraAdapter> {
        self.adapters
            .get(tag)
            .ok_or_else(|| Error::UnknownAdapter(tag.to_string()))
    }

    pub fn adapter_tags(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn modality(&self, tag: &str) -> Result<&ModalitySpec> {
        self.modalities
            .iter()
            .find(|m| m.tag == tag)
            .ok_or_else(|| Error::UnknownModality(tag.to_string()))
    }

    /// Same bundle without adapters.
    pub fn base_only(&self) -> ModelBundle {
        ModelBundle {
            adapters: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_tensor_set(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        set.set_meta("kind", "bundle")?;
        set.set_meta("config", &self.config)?;
        set.set_meta(
            "modalities",
            self.modalities.iter().map(ModalityMeta::from).collect::<Vec<_>>(),
        )?;
        set.set_meta("adapters", self.adapter_tags())?;
        for (l, block) in self.base.layers.iter().enumerate() {
            set.push(Tensor::vector(base_name(l, "attn_norm"), &block.attn_norm, DType::F32));
            set.push(Tensor::vector(base_name(l, "mlp_norm"), &block.mlp_norm, DType::F32));
            for t in Target::ALL {
                set.push(Tensor::from_mat(base_name(l, t.name()), block.proj(t), DType::F32));
            }
        }
        for m in &self.modalities {
            set.push(Tensor::from_mat(
                format!("modality/{}/basis", m.tag),
                &m.basis,
                DType::F64,
            ));
        }
        for (tag, a) in &self.adapters {
            lora_to_tensors(&mut set, &format!("adapter/{tag}/"), &a.params, DType::F32);
        }
        Ok(set)
    }

    pub fn from_tensor_set(set: &TensorSet) -> Result<ModelBundle> {
        expect_kind(set, "bundle")?;
        let config: ModelConfig = set.meta_as("config")?;
        config.validate()?;
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let proj = Target::ALL
                .iter()
                .map(|&t| {
                    let (o, i) = config.target_shape(t);
                    set.mat(&base_name(l, t.name()), o, i)
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(BlockWeights {
                attn_norm: set.vector(&base_name(l, "attn_norm"), d)?,
                mlp_norm: set.vector(&base_name(l, "mlp_norm"), d)?,
                proj,
            });
        }
        let metas: Vec<ModalityMeta> = set.meta_as("modalities")?;
        let modalities = metas
            .into_iter()
            .map(|m| {
                let t = set.require(&format!("modality/{}/basis", m.tag))?;
                Ok(ModalitySpec {
                    basis: t.to_mat()?,
                    tag: m.tag,
                    tokens_per_block: m.tokens_per_block,
                    prefix_tokens: m.prefix_tokens,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tags: Vec<String> = set.meta_as("adapters")?;
        let mut adapters = BTreeMap::new();
        for tag in tags {
            let params = lora_from_tensors(set, &format!("adapter/{tag}/"), &config)?;
            adapters.insert(
                tag.clone(),
                LoraAdapter {
                    modality_tag: tag,
                    params,
                },
            );
        }
        let bundle = ModelBundle {
            config,
            base: BaseWeights { layers },
            adapters,
            modalities,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[derive(Serialize, Deserialize)]
struct ModalityMeta {
    tag: String,
    tokens_per_block: usize,
    prefix_tokens: usize,
}

impl From<&ModalitySpec> for ModalityMeta {
    fn from(m: &ModalitySpec) -> Self {
        ModalityMeta {
            tag: m.tag.clone(),
            tokens_per_block: m.tokens_per_block,
            prefix_tokens: m.prefix_tokens,
        }
    }
}

fn base_name(layer: usize, what: &str) -> String {
    format!("base/layer.{layer}.{what}")
}

fn expect_kind(set: &TensorSet, kind: &str) -> Result<()> {
    let found: String = set.meta_as("kind")?;
    if found != kind {
        return Err(Error::Format(format!("expected a `{kind}` container, found `{found}`")));
    }
    Ok(())
}

/// Appends `<prefix>layer.<l>.<target>.{A,B}` tensors.
pub fn lora_to_tensors(set: &mut TensorSet, prefix: &str, params: &LoraParams, dtype: DType) {
    for (l, layer) in params.layers.iter().enumerate() {
        for (t, pair) in Target::ALL.iter().zip(layer) {
            set.push(Tensor::from_mat(format!("{prefix}layer.{l}.{t}.A"), &pair.a, dtype));
            set.push(Tensor::from_mat(format!("{prefix}layer.{l}.{t}.B"), &pair.b, dtype));
        }
    }
}

pub fn lora_from_tensors(set: &TensorSet, prefix: &str, config: &ModelConfig) -> Result<LoraParams> {
    let r = config.lora_rank;
    let layers = (0..config.n_layers)
        .map(|l| {
            Target::ALL
                .iter()
                .map(|&t| {
                    let (o, i) = config.target_shape(t);
                    Ok(LoraPair {
                        a: set.mat(&format!("{prefix}layer.{l}.{t}.A"), r, i)?,
                        b: set.mat(&format!("{prefix}layer.{l}.{t}.B"), o, r)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoraParams { layers })
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &ModelBundle) -> Result<()> {
    bundle.validate()?;
    write_checkpoint(path, &bundle.to_tensor_set()?)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::from_tensor_set(&read_checkpoint(path)?)
}

/// Writes a standalone adapter file. `extra` entries are merged into the
/// header (provenance and the like).
pub fn save_adapter(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    adapter: &LoraAdapter,
    extra: &serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    adapter.params.check_config(config)?;
    let mut set = TensorSet::new();
    set.meta.extend(extra.clone());
    set.set_meta("kind", "adapter")?;
    set.set_meta("config", config)?;
    set.set_meta("modality_tag", &adapter.modality_tag)?;
    lora_to_tensors(&mut set, "", &adapter.params, DType::F32);
    write_checkpoint(path, &set)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<(ModelConfig, LoraAdapter)> {
    let set = read_checkpoint(path)?;
    expect_kind(&set, "adapter")?;
    let config: ModelConfig = set.meta_as("config")?;
    config.validate()?;
    let params = lora_from_tensors(&set, "", &config)?;
    Ok((
        config,
        LoraAdapter {
            modality_tag: set.meta_as("modality_tag")?,
            params,
        },
    ))
}
