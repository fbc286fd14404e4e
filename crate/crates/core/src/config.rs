use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weight matrix inside a transformer block that carries a LoRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "attn.q")]
    AttnQ,
    #[serde(rename = "attn.k")]
    AttnK,
    #[serde(rename = "attn.v")]
    AttnV,
    #[serde(rename = "attn.o")]
    AttnO,
    #[serde(rename = "mlp.gate")]
    MlpGate,
    #[serde(rename = "mlp.up")]
    MlpUp,
    #[serde(rename = "mlp.down")]
    MlpDown,
}

impl Target {
    /// Canonical order; every per-target collection in the crate is indexed by it.
    pub const ALL: [Target; 7] = [
        Target::AttnQ,
        Target::AttnK,
        Target::AttnV,
        Target::AttnO,
        Target::MlpGate,
        Target::MlpUp,
        Target::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::AttnQ => "attn.q",
            Target::AttnK => "attn.k",
            Target::AttnV => "attn.v",
            Target::AttnO => "attn.o",
            Target::MlpGate => "mlp.gate",
            Target::MlpUp => "mlp.up",
            Target::MlpDown => "mlp.down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Target> {
        Target::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and LoRA hyper-parameters of the toy decoder.
///
/// The toy default is deliberately tiny; the full-scale LoRA setting
/// (rank 8, alpha 32) is equally valid and round-trips through the
/// container format unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<Target>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            lora_rank: 2,
            lora_alpha: 8.0,
            lora_targets: Target::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "lora_alpha must be positive, got {}",
                self.lora_alpha
            )));
        }
        if self.lora_targets != Target::ALL {
            return Err(Error::Config(
                "lora_targets must be attn.q, attn.k, attn.v, attn.o, mlp.gate, mlp.up, mlp.down in that order".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Multiplier applied to `B·A`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// `(out_dim, in_dim)` of a target's dense weight.
    pub fn target_shape(&self, target: Target) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match target {
            Target::AttnQ | Target::AttnK | Target::AttnV | Target::AttnO => (d, d),
            Target::MlpGate | Target::MlpUp => (f, d),
            Target::MlpDown => (d, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        let paper_scale = ModelConfig {
            lora_rank: 8,
            lora_alpha: 32.0,
            ..ModelConfig::default()
        };
        paper_scale.validate().unwrap();
        assert_eq!(paper_scale.lora_scale(), 4.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.lora_targets.swap(0, 1);
        assert!(c.validate().is_err());
        c.lora_targets = Target::ALL.to_vec();
        c.lora_alpha = 0.0;
        assert!(c.validate().is_err());
        c.lora_alpha = 8.0;
        c.lora_rank = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn target_names_roundtrip() {
        for t in Target::ALL {
            assert_eq!(Target::from_name(t.name()), Some(t));
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
    }
}
