//! Layered style latents and the coarse/medium/fine partition of layers.

use crate::{Error, Result};
use promptface_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Relative layer shares of the three levels. An 18-layer generator splits
/// into 4 coarse, 4 medium, and 10 fine layers; other depths scale these.
pub const LEVEL_SHARES: [usize; 3] = [4, 4, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Coarse,
    Medium,
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Coarse, Level::Medium, Level::Fine];

    pub fn index(self) -> usize {
        match self {
            Level::Coarse => 0,
            Level::Medium => 1,
            Level::Fine => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Coarse => "coarse",
            Level::Medium => "medium",
            Level::Fine => "fine",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s {
            "coarse" => Ok(Level::Coarse),
            "medium" => Ok(Level::Medium),
            "fine" => Ok(Level::Fine),
            other => Err(Error::invalid(format!(
                "unknown level `{other}` (expected coarse, medium, or fine)"
            ))),
        }
    }
}

/// Partition of layer indices [0, L) into three contiguous level ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSplit {
    coarse: usize, // exclusive end of the coarse range (start is 0)
    medium: usize, // exclusive end of the medium range
    layers: usize, // total layer count; fine = medium..layers
}

impl LevelSplit {
    /// Explicit split from the three counts. Every level needs at least one
    /// layer: an empty range would make its sub-network unreachable.
    pub fn from_counts(coarse: usize, medium: usize, fine: usize) -> Result<Self> {
        if coarse == 0 || medium == 0 || fine == 0 {
            return Err(Error::invalid(format!(
                "level split ({coarse}, {medium}, {fine}) has an empty level"
            )));
        }
        Ok(LevelSplit {
            coarse,
            medium: coarse + medium,
            layers: coarse + medium + fine,
        })
    }

    /// Split `layers` proportionally to [`LEVEL_SHARES`], distributing the
    /// rounding slack by largest fractional remainder (earlier level wins
    /// ties). 18 layers → (4, 4, 10); 8 layers → (2, 2, 4).
    pub fn proportional(layers: usize) -> Result<Self> {
        if layers < 3 {
            return Err(Error::invalid(format!(
                "cannot split {layers} layers into three non-empty levels"
            )));
        }
        let total: usize = LEVEL_SHARES.iter().sum();
        let mut counts = [0usize; 3];
        let mut remainders = [0.0f64; 3];
        for i in 0..3 {
            let ideal = layers as f64 * LEVEL_SHARES[i] as f64 / total as f64;
            counts[i] = ideal.floor() as usize;
            remainders[i] = ideal - ideal.floor();
        }
        let mut slack = layers - counts.iter().sum::<usize>();
        while slack > 0 {
            let mut best = 0;
            for i in 1..3 {
                if remainders[i] > remainders[best] {
                    best = i;
                }
            }
            counts[best] += 1;
            remainders[best] = -1.0;
            slack -= 1;
        }
        Self::from_counts(counts[0], counts[1], counts[2])
    }

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.coarse,
            self.medium - self.coarse,
            self.layers - self.medium,
        )
    }

    pub fn range(&self, level: Level) -> Range<usize> {
        match level {
            Level::Coarse => 0..self.coarse,
            Level::Medium => self.coarse..self.medium,
            Level::Fine => self.medium..self.layers,
        }
    }

    pub fn level_of(&self, layer: usize) -> Result<Level> {
        if layer < self.coarse {
            Ok(Level::Coarse)
        } else if layer < self.medium {
            Ok(Level::Medium)
        } else if layer < self.layers {
            Ok(Level::Fine)
        } else {
            Err(Error::invalid(format!(
                "layer {layer} out of range for {} layers",
                self.layers
            )))
        }
    }
}

/// Batched layered latent: one [N, D] style matrix per generator layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WPlus<T: Scalar = f32> {
    layers: Vec<Tensor<T>>,
}

impl<T: Scalar> WPlus<T> {
    pub fn new(layers: Vec<Tensor<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("latent needs at least one layer"));
        }
        let first = layers[0].shape().to_vec();
        if first.len() != 2 {
            return Err(Error::invalid(format!(
                "latent layers must be [batch, dim], got {first:?}"
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != first.as_slice() {
                return Err(Error::invalid(format!(
                    "latent layer {i} has shape {:?}, layer 0 has {first:?}",
                    l.shape()
                )));
            }
        }
        Ok(WPlus { layers })
    }

    pub fn zeros(layer_count: usize, batch: usize, dim: usize) -> Self {
        WPlus {
            layers: (0..layer_count).map(|_| Tensor::zeros(&[batch, dim])).collect(),
        }
    }

    /// Single (batch-1) latent from one row of values per layer.
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let layers = rows
            .into_iter()
            .map(|r| {
                let d = r.len();
                Tensor::from_vec(&[1, d], r).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn batch(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn layer(&self, i: usize) -> &Tensor<T> {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[Tensor<T>] {
        &self.layers
    }

    /// Batches rows `indices` of `self` into a new latent.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (n, d) = (self.batch(), self.dim());
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("row {i} out of batch {n}")));
            }
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    data.extend_from_slice(&l.data()[i * d..(i + 1) * d]);
                }
                Tensor::from_vec(&[indices.len(), d], data).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Stacks single-row latents into one batch.
    pub fn stack(singles: &[WPlus<T>]) -> Result<Self> {
        if singles.is_empty() {
            return Err(Error::invalid("cannot stack an empty latent list"));
        }
        let (l, d) = (singles[0].layer_count(), singles[0].dim());
        let layers = (0..l)
            .map(|li| {
                let mut data = Vec::with_capacity(singles.len() * d);
                for s in singles {
                    if s.layer_count() != l || s.dim() != d || s.batch() != 1 {
                        return Err(Error::invalid(
                            "stack expects batch-1 latents of identical shape",
                        ));
                    }
                    data.extend_from_slice(s.layer(li).data());
                }
                Tensor::from_vec(&[singles.len(), d], data).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Mean squared difference per coordinate across all layers.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.layer_count() != other.layer_count()
            || self.batch() != other.batch()
            || self.dim() != other.dim()
        {
            return Err(Error::invalid("latent shape mismatch in mse"));
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
            count += a.numel();
        }
        Ok(acc / count as f64)
    }

    /// Mean squared coordinate magnitude (the scale the inverter gate is
    /// measured against).
    pub fn mean_square(&self) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for l in &self.layers {
            for x in l.data() {
                acc += x.as_f64() * x.as_f64();
            }
            count += l.numel();
        }
        acc / count as f64
    }
}

/// Tape-resident latent: one variable per layer, same layout as [`WPlus`].
#[derive(Clone, Debug)]
pub struct WPlusVars {
    pub layers: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_split_matches_reference_depths() {
        assert_eq!(LevelSplit::proportional(18).unwrap().counts(), (4, 4, 10));
        assert_eq!(LevelSplit::proportional(8).unwrap().counts(), (2, 2, 4));
        assert_eq!(LevelSplit::proportional(4).unwrap().counts(), (1, 1, 2));
        assert!(LevelSplit::proportional(2).is_err());
    }

    #[test]
    fn split_ranges_partition_the_layers() {
        let s = LevelSplit::proportional(8).unwrap();
        assert_eq!(s.range(Level::Coarse), 0..2);
        assert_eq!(s.range(Level::Medium), 2..4);
        assert_eq!(s.range(Level::Fine), 4..8);
        for layer in 0..8 {
            let lv = s.level_of(layer).unwrap();
            assert!(s.range(lv).contains(&layer));
        }
        assert!(s.level_of(8).is_err());
    }

    #[test]
    fn empty_level_is_rejected() {
        assert!(LevelSplit::from_counts(0, 4, 4).is_err());
        assert!(LevelSplit::from_counts(2, 2, 0).is_err());
        assert_eq!(LevelSplit::from_counts(1, 1, 2).unwrap().layer_count(), 4);
    }

    #[test]
    fn select_and_stack_round_trip() {
        let w = WPlus::<f32>::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let v = WPlus::<f32>::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let both = WPlus::stack(&[w.clone(), v.clone()]).unwrap();
        assert_eq!(both.batch(), 2);
        assert_eq!(both.select(&[0]).unwrap(), w);
        assert_eq!(both.select(&[1]).unwrap(), v);
        assert_eq!(both.select(&[1, 0, 1]).unwrap().batch(), 3);
        assert!(both.select(&[2]).is_err());
    }

    #[test]
    fn latent_layers_must_agree_in_shape() {
        let bad = WPlus::new(vec![Tensor::<f32>::zeros(&[1, 4]), Tensor::zeros(&[1, 5])]);
        assert!(bad.is_err());
        let bad = WPlus::new(vec![Tensor::<f32>::zeros(&[4])]);
        assert!(bad.is_err());
    }

    #[test]
    fn mse_measures_per_coordinate_error() {
        let a = WPlus::<f32>::zeros(2, 1, 4);
        let b = WPlus::<f32>::from_rows(vec![vec![1.0; 4], vec![1.0; 4]]).unwrap();
        assert!((a.mse(&b).unwrap() - 1.0).abs() < 1e-12);
        assert!((b.mean_square() - 1.0).abs() < 1e-12);
    }
}
