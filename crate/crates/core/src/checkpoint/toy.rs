//! Deterministic synthesis of a toy base model and modality-specialized
//! adapters.
//!
//! Each modality owns a block of orthonormal directions in embedding space.
//! Its adapter reads from that block: the query, gate and up factors `A`
//! have rows taken from the modality's basis (plus a little noise), so
//! tokens inside the block are strongly rewritten while tokens from other
//! modalities barely register. The remaining factors `A` are noise only.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::config::{ModelConfig, Target};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair, LoraParams};
use crate::probe::ModalitySpec;
use crate::rng::{derive_seed, gaussian_mat, normal, round_f32, stream};
use crate::tensor::{dot, Mat};

use super::bundle::{BaseWeights, BlockWeights, ModelBundle};

const A_NOISE: f64 = 0.01;
const ORTHO_TOL: f64 = 1e-8;
const SALT_FRAME: u64 = 0x5eed_0001;
const SALT_BASE: u64 = 0x5eed_0002;
const SALT_ADAPTER: u64 = 0x5eed_0100;

/// Layout of synthetic modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModalityOptions {
    pub count: usize,
    pub subspace_dim: usize,
    pub tokens_per_block: usize,
    pub prefix_tokens: usize,
}

impl Default for ToyModalityOptions {
    fn default() -> Self {
        ToyModalityOptions {
            count: 3,
            subspace_dim: 6,
            tokens_per_block: 8,
            prefix_tokens: 2,
        }
    }
}

fn modality_tag(i: usize) -> String {
    match i {
        0 => "molecule".into(),
        1 => "protein".into(),
        2 => "cell".into(),
        _ => format!("modality{i}"),
    }
}

/// Mutually orthogonal random subspaces, one per modality, cut from a single
/// seeded orthonormal frame.
pub fn toy_modalities(seed: u64, d_model: usize, opts: &ToyModalityOptions) -> Result<Vec<ModalitySpec>> {
    if opts.count == 0 || opts.subspace_dim == 0 {
        return Err(Error::Config("need at least one modality of dimension >= 1".into()));
    }
    if opts.count * opts.subspace_dim > d_model {
        return Err(Error::Config(format!(
            "{} modalities of dimension {} do not fit in d_model {d_model}",
            opts.count, opts.subspace_dim
        )));
    }
    let mut rng = stream(derive_seed(seed, SALT_FRAME));
    let mut frame: Vec<Vec<f64>> = Vec::new();
    while frame.len() < opts.count * opts.subspace_dim {
        let mut v: Vec<f64> = (0..d_model).map(|_| normal(&mut rng)).collect();
        // modified Gram-Schmidt, applied twice for orthogonality at 1e-15
        for _ in 0..2 {
            for u in &frame {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        frame.push(v);
    }
    Ok(frame
        .chunks(opts.subspace_dim)
        .enumerate()
        .map(|(i, rows)| ModalitySpec {
            tag: modality_tag(i),
            basis: Mat::from_rows(rows),
            tokens_per_block: opts.tokens_per_block,
            prefix_tokens: opts.prefix_tokens,
        })
        .collect())
}

fn check_modalities(config: &ModelConfig, modalities: &[ModalitySpec]) -> Result<()> {
    if modalities.is_empty() {
        return Err(Error::InvalidArgument("no modalities given".into()));
    }
    for (i, m) in modalities.iter().enumerate() {
        m.validate(config.d_model)?;
        if m.basis.rows() < config.lora_rank {
            return Err(Error::Config(format!(
                "modality `{}` subspace has dimension {} < lora_rank {}",
                m.tag,
                m.basis.rows(),
                config.lora_rank
            )));
        }
        for other in &modalities[..i] {
            if other.tag == m.tag {
                return Err(Error::InvalidArgument(format!("duplicate modality `{}`", m.tag)));
            }
            let overlap = m.basis.matmul_t(&other.basis);
            if overlap.data().iter().any(|v| v.abs() > ORTHO_TOL) {
                return Err(Error::Config(format!(
                    "modality subspaces `{}` and `{}` overlap",
                    other.tag, m.tag
                )));
            }
        }
    }
    Ok(())
}

/// Builds the base model and one adapter per modality. A pure function of
/// its arguments; all weights are rounded to 32-bit so that persistence is
/// lossless.
pub fn gen_toy_bundle(seed: u64, config: &ModelConfig, modalities: &[ModalitySpec]) -> Result<ModelBundle> {
    config.validate()?;
    check_modalities(config, modalities)?;

    let mut rng = stream(derive_seed(seed, SALT_BASE));
    let layers = (0..config.n_layers)
        .map(|_| {
            let proj = Target::ALL
                .iter()
                .map(|&t| {
                    let (out, inp) = config.target_shape(t);
                    let mut w = gaussian_mat(&mut rng, out, inp, 1.0 / (inp as f64).sqrt());
                    round_f32(&mut w);
                    w
                })
                .collect();
            BlockWeights {
                attn_norm: vec![1.0; config.d_model],
                mlp_norm: vec![1.0; config.d_model],
                proj,
            }
        })
        .collect();

    let mut adapters = BTreeMap::new();
    for (i, m) in modalities.iter().enumerate() {
        let params = specialized_params(derive_seed(seed, SALT_ADAPTER + i as u64), config, &m.basis);
        adapters.insert(
            m.tag.clone(),
            LoraAdapter {
                modality_tag: m.tag.clone(),
                params,
            },
        );
    }

    let bundle = ModelBundle {
        config: config.clone(),
        base: BaseWeights { layers },
        adapters,
        modalities: modalities.to_vec(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Projections that read a token's own residual stream and whose output
/// stays at that position. Keys and values are consumed by later positions
/// and the output projection reads the attention mixture, so aligning those
/// with a modality would shift every token that attends to it.
fn reads_own_token(t: Target) -> bool {
    matches!(t, Target::AttnQ | Target::MlpGate | Target::MlpUp)
}

fn specialized_params(seed: u64, config: &ModelConfig, basis: &Mat) -> LoraParams {
    let mut rng = stream(seed);
    let r = config.lora_rank;
    let b_scale = 0.5 / (r as f64).sqrt();
    let layers = (0..config.n_layers)
        .map(|_| {
            Target::ALL
                .iter()
                .map(|&t| {
                    let (out, inp) = config.target_shape(t);
                    let mut a = gaussian_mat(&mut rng, r, inp, A_NOISE);
                    if reads_own_token(t) {
                        let picks = sample(&mut rng, basis.rows(), r);
                        for (row, pick) in picks.iter().enumerate() {
                            a.row_mut(row)
                                .iter_mut()
                                .zip(basis.row(pick))
                                .for_each(|(x, b)| *x += b);
                        }
                    }
                    let mut b = gaussian_mat(&mut rng, out, r, b_scale);
                    round_f32(&mut a);
                    round_f32(&mut b);
                    LoraPair { a, b }
                })
                .collect()
        })
        .collect();
    LoraParams { layers }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        let cfg = ModelConfig::default();
        let mods = toy_modalities(7, cfg.d_model, &ToyModalityOptions::default()).unwrap();
        gen_toy_bundle(7, &cfg, &mods).unwrap()
    }

    #[test]
    fn matched_tokens_shift_most_at_layer_one() {
        use crate::model::{extract_modality, forward_with_trace};
        use crate::probe::build_probe_batch;

        let b = toy();
        let batch = build_probe_batch(&b.modalities, 8, 3).unwrap();
        for adapter in &b.modalities {
            let mut shift = vec![0.0; b.modalities.len()];
            for p in &batch.probes {
                let base = forward_with_trace(&b, None, p).unwrap();
                let spec = forward_with_trace(&b, Some(&adapter.tag), p).unwrap();
                for (i, m) in b.modalities.iter().enumerate() {
                    let h0 = extract_modality(&base, p, &m.tag, 1).unwrap();
                    let h1 = extract_modality(&spec, p, &m.tag, 1).unwrap();
                    let d = h1.sub(&h0);
                    shift[i] += (0..d.rows())
                        .map(|r| d.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                        .sum::<f64>();
                }
            }
            let own = b.modalities.iter().position(|m| m.tag == adapter.tag).unwrap();
            for (i, s) in shift.iter().enumerate() {
                if i != own {
                    assert!(shift[own] > *s, "{}: {shift:?}", adapter.tag);
                }
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(toy(), toy());
        let cfg = ModelConfig::default();
        let mods = toy_modalities(8, cfg.d_model, &ToyModalityOptions::default()).unwrap();
        assert_ne!(toy(), gen_toy_bundle(8, &cfg, &mods).unwrap());
    }

    #[test]
    fn modalities_are_orthonormal_and_disjoint() {
        let mods = toy_modalities(1, 32, &ToyModalityOptions::default()).unwrap();
        assert_eq!(mods.len(), 3);
        let tags: Vec<_> = mods.iter().map(|m| m.tag.as_str()).collect();
        assert_eq!(tags, ["molecule", "protein", "cell"]);
        for (i, a) in mods.iter().enumerate() {
            for (j, b) in mods.iter().enumerate() {
                let g = a.basis.matmul_t(&b.basis);
                for x in 0..g.rows() {
                    for y in 0..g.cols() {
                        let want = if i == j && x == y { 1.0 } else { 0.0 };
                        assert!((g.get(x, y) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_modalities() {
        let cfg = ModelConfig::default();
        let mut mods = toy_modalities(1, 32, &ToyModalityOptions::default()).unwrap();
        let dup = mods[0].clone();
        let mut overlapping = dup.clone();
        overlapping.tag = "other".into();
        mods.push(overlapping);
        assert!(matches!(gen_toy_bundle(1, &cfg, &mods), Err(Error::Config(_))));

        let narrow = ToyModalityOptions {
            subspace_dim: 1,
            ..ToyModalityOptions::default()
        };
        let mods = toy_modalities(1, 32, &narrow).unwrap();
        assert!(gen_toy_bundle(1, &cfg, &mods).is_err());
        assert!(gen_toy_bundle(1, &cfg, &[]).is_err());
        let too_many = ToyModalityOptions {
            count: 6,
            ..ToyModalityOptions::default()
        };
        assert!(toy_modalities(1, 32, &too_many).is_err());
    }

    #[test]
    fn weights_are_f32_exact() {
        let b = toy();
        for block in &b.base.layers {
            for w in &block.proj {
                assert!(w.data().iter().all(|&v| v as f32 as f64 == v));
            }
        }
        for a in b.adapters.values() {
            assert!(a.params.values().all(|v| v as f32 as f64 == v));
        }
    }
}
