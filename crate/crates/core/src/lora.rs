//! LoRA factor storage shared by adapters, gradients, sensitivities and
//! per-element coefficients: all of them are "one value per LoRA element".

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Target};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::A => "A",
            Factor::B => "B",
        }
    }
}

/// One LoRA factor pair: `a` is `rank × in`, `b` is `out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Mat,
    pub b: Mat,
}

impl LoraPair {
    pub fn factor(&self, f: Factor) -> &Mat {
        match f {
            Factor::A => &self.a,
            Factor::B => &self.b,
        }
    }

    pub fn factor_mut(&mut self, f: Factor) -> &mut Mat {
        match f {
            Factor::A => &mut self.a,
            Factor::B => &mut self.b,
        }
    }

    pub fn zeros_like(&self) -> LoraPair {
        LoraPair {
            a: Mat::zeros(self.a.rows(), self.a.cols()),
            b: Mat::zeros(self.b.rows(), self.b.cols()),
        }
    }

    /// Dense update `B·A` (unscaled), `out × in`.
    pub fn delta(&self) -> Mat {
        self.b.matmul(&self.a)
    }
}

/// Address of a single LoRA element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElementCoord {
    pub layer: usize,
    pub target: Target,
    pub factor: Factor,
    pub row: usize,
    pub col: usize,
}

/// Per-layer, per-target factor pairs, indexed `[layer][Target::index()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub layers: Vec<Vec<LoraPair>>,
}

impl LoraParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let r = config.lora_rank;
        let layers = (0..config.n_layers)
            .map(|_| {
                Target::ALL
                    .iter()
                    .map(|&t| {
                        let (out, inp) = config.target_shape(t);
                        LoraPair {
                            a: Mat::zeros(r, inp),
                            b: Mat::zeros(out, r),
                        }
                    })
                    .collect()
            })
            .collect();
        LoraParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn pair(&self, layer: usize, target: Target) -> &LoraPair {
        &self.layers[layer][target.index()]
    }

    pub fn pair_mut(&mut self, layer: usize, target: Target) -> &mut LoraPair {
        &mut self.layers[layer][target.index()]
    }

    pub fn get(&self, c: ElementCoord) -> f64 {
        self.pair(c.layer, c.target).factor(c.factor).get(c.row, c.col)
    }

    pub fn set(&mut self, c: ElementCoord, v: f64) {
        self.pair_mut(c.layer, c.target)
            .factor_mut(c.factor)
            .set(c.row, c.col, v);
    }

    pub fn contains(&self, c: ElementCoord) -> bool {
        c.layer < self.layers.len() && {
            let m = self.pair(c.layer, c.target).factor(c.factor);
            c.row < m.rows() && c.col < m.cols()
        }
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn len(&self) -> usize {
        (0..self.layers.len()).map(|l| self.layer_len(l)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every element of one layer, flattened as targets in canonical order,
    /// `A` before `B`, row-major.
    pub fn layer_flat(&self, layer: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layer_len(layer));
        for p in &self.layers[layer] {
            out.extend_from_slice(p.a.data());
            out.extend_from_slice(p.b.data());
        }
        out
    }

    /// Inverse of [`layer_flat`](Self::layer_flat).
    pub fn set_layer_flat(&mut self, layer: usize, values: &[f64]) {
        assert_eq!(values.len(), self.layer_len(layer), "flat layer length");
        let mut off = 0;
        for p in &mut self.layers[layer] {
            for m in [&mut p.a, &mut p.b] {
                let n = m.len();
                m.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
    }

    /// Coordinate of the `index`-th element of [`layer_flat`](Self::layer_flat).
    pub fn coord_of(&self, layer: usize, mut index: usize) -> Option<ElementCoord> {
        for (ti, p) in self.layers.get(layer)?.iter().enumerate() {
            for (factor, m) in [(Factor::A, &p.a), (Factor::B, &p.b)] {
                if index < m.len() {
                    return Some(ElementCoord {
                        layer,
                        target: Target::ALL[ti],
                        factor,
                        row: index / m.cols(),
                        col: index % m.cols(),
                    });
                }
                index -= m.len();
            }
        }
        None
    }

    pub fn same_shape(&self, other: &LoraParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(x, y)| {
                x.len() == y.len()
                    && x.iter()
                        .zip(y)
                        .all(|(p, q)| p.a.shape() == q.a.shape() && p.b.shape() == q.b.shape())
            })
    }

    pub fn check_same_shape(&self, other: &LoraParams, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: LoRA factor shapes differ")))
        }
    }

    /// Checks that the factor shapes are exactly those implied by `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        self.check_same_shape(&LoraParams::zeros(config), "adapter vs config")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LoraParams {
        LoraParams {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|p| LoraPair {
                            a: p.a.map(&f),
                            b: p.b.map(&f),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flat_map(|p| p.a.data().iter().chain(p.b.data()).copied()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            l.iter_mut()
                .flat_map(|p| p.a.data_mut().iter_mut().chain(p.b.data_mut().iter_mut()))
        })
    }

    pub fn add_assign(&mut self, other: &LoraParams) {
        assert!(self.same_shape(other), "add_assign shape");
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &LoraParams) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff shape");
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// LoRA adapter of a model specialized to one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub modality_tag: String,
    pub params: LoraParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_layout_and_coords_agree() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            n_layers: 2,
            ..ModelConfig::default()
        };
        let mut p = LoraParams::zeros(&cfg);
        let n = p.layer_len(1);
        let flat: Vec<f64> = (0..n).map(|i| i as f64).collect();
        p.set_layer_flat(1, &flat);
        for (i, &v) in flat.iter().enumerate() {
            let c = p.coord_of(1, i).unwrap();
            assert_eq!(p.get(c), v);
        }
        assert!(p.coord_of(1, n).is_none());
        // q: A is 2x4 then B is 4x2
        let c = p.coord_of(1, 8).unwrap();
        assert_eq!((c.target, c.factor, c.row, c.col), (Target::AttnQ, Factor::B, 0, 0));
        assert_eq!(p.layer_flat(1), flat);
        assert_eq!(p.len(), 2 * n);
    }
}
