//! Parameter stores: trainable tensors plus batch-norm running statistics,
//! keyed by layer id.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, NetworkGraph, Partition};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Trainable parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerParams {
    /// Convolution or head: weight `[out, in, k, k]`, optional bias `[out]`.
    Conv {
        weight: Tensor,
        bias: Option<Vec<f64>>,
    },
    /// Batch-norm scale (the channel scaling factor) and shift.
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
}

impl LayerParams {
    /// Visits the trainable slices in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::Conv { weight, bias } => {
                let mut v = vec![weight.data.as_slice()];
                if let Some(b) = bias {
                    v.push(b.as_slice());
                }
                v
            }
            LayerParams::Norm { gamma, beta } => vec![gamma.as_slice(), beta.as_slice()],
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Conv { weight, bias } => {
                let mut v = vec![weight.data.as_mut_slice()];
                if let Some(b) = bias {
                    v.push(b.as_mut_slice());
                }
                v
            }
            LayerParams::Norm { gamma, beta } => vec![gamma.as_mut_slice(), beta.as_mut_slice()],
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            LayerParams::Conv { weight, bias } => LayerParams::Conv {
                weight: Tensor::zeros(weight.shape.clone()),
                bias: bias.as_ref().map(|b| vec![0.0; b.len()]),
            },
            LayerParams::Norm { gamma, beta } => LayerParams::Norm {
                gamma: vec![0.0; gamma.len()],
                beta: vec![0.0; beta.len()],
            },
        }
    }

    fn shape_signature(&self) -> Vec<usize> {
        self.slices().iter().map(|s| s.len()).collect()
    }
}

/// Batch-norm running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Parameters for a subset of a graph's layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub layers: BTreeMap<String, LayerParams>,
    #[serde(default)]
    pub stats: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialisation of every parameterised layer: He-normal conv
    /// weights, zero biases, constant batch-norm scale, zero shift.
    pub fn init(graph: &NetworkGraph, seed: u64, bn_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a7a);
        let mut store = ParamStore::new();
        for layer in &graph.layers {
            match layer.kind {
                LayerKind::Conv | LayerKind::ClassifierHead | LayerKind::SegmentationHead => {
                    let k = layer.kernel_size;
                    let fan_in = (layer.in_channels * k * k) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let shape = vec![layer.out_channels, layer.in_channels, k, k];
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| std * standard_normal(&mut rng)).collect();
                    let bias = layer.bias.then(|| vec![0.0; layer.out_channels]);
                    store.layers.insert(
                        layer.id.clone(),
                        LayerParams::Conv {
                            weight: Tensor { shape, data },
                            bias,
                        },
                    );
                }
                LayerKind::Batchnorm => {
                    let c = layer.out_channels;
                    store.layers.insert(
                        layer.id.clone(),
                        LayerParams::Norm {
                            gamma: vec![bn_scale; c],
                            beta: vec![0.0; c],
                        },
                    );
                    store.stats.insert(
                        layer.id.clone(),
                        RunningStats {
                            mean: vec![0.0; c],
                            var: vec![1.0; c],
                        },
                    );
                }
                _ => {}
            }
        }
        store
    }

    /// Layers of `graph` in `partition` only.
    pub fn restrict(&self, graph: &NetworkGraph, partition: Partition) -> Self {
        let keep = |id: &String| {
            graph
                .layer(id)
                .map(|l| l.partition == partition)
                .unwrap_or(false)
        };
        ParamStore {
            layers: self
                .layers
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            stats: self
                .stats
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Union of two disjoint stores.
    pub fn merged(&self, other: &ParamStore) -> Self {
        let mut out = self.clone();
        out.layers
            .extend(other.layers.iter().map(|(k, v)| (k.clone(), v.clone())));
        out.stats
            .extend(other.stats.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Same layers, all trainable values zero, no statistics.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
            stats: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&LayerParams> {
        self.layers.get(id)
    }

    /// Total number of trainable scalars.
    pub fn num_values(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.slices().iter().map(|s| s.len()).sum::<usize>())
            .sum()
    }

    /// Trainable values flattened in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for p in self.layers.values() {
            for s in p.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    /// Overwrites trainable values from a flat vector produced by [`flatten`](Self::flatten).
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, store has {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut at = 0;
        for p in self.layers.values_mut() {
            for s in p.slices_mut() {
                s.copy_from_slice(&flat[at..at + s.len()]);
                at += s.len();
            }
        }
        Ok(())
    }

    /// Errors unless both stores hold the same layers with the same shapes.
    pub fn check_same_shape(&self, other: &ParamStore) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "stores hold {} vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for ((ka, a), (kb, b)) in self.layers.iter().zip(other.layers.iter()) {
            if ka != kb || a.shape_signature() != b.shape_signature() {
                return Err(Error::Shape(format!("layer `{ka}` vs `{kb}` differ in shape")));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise over trainable values.
    pub fn axpy(&mut self, scale: f64, other: &ParamStore) -> Result<()> {
        for (id, p) in self.layers.iter_mut() {
            let Some(q) = other.layers.get(id) else {
                continue;
            };
            let qs = q.slices();
            let mut ps = p.slices_mut();
            if ps.len() != qs.len() {
                return Err(Error::Shape(format!("layer `{id}` kind mismatch")));
            }
            for (dst, src) in ps.iter_mut().zip(qs) {
                if dst.len() != src.len() {
                    return Err(Error::Shape(format!("layer `{id}` length mismatch")));
                }
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
        Ok(())
    }

    /// Squared L2 norm of the trainable values.
    pub fn norm_sq(&self) -> f64 {
        self.layers
            .values()
            .map(|p| {
                p.slices()
                    .iter()
                    .map(|s| s.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Batch-norm scale vector of a layer.
    pub fn gamma(&self, id: &str) -> Option<&[f64]> {
        match self.layers.get(id)? {
            LayerParams::Norm { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    pub fn gamma_mut(&mut self, id: &str) -> Option<&mut Vec<f64>> {
        match self.layers.get_mut(id)? {
            LayerParams::Norm { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    pub fn beta_mut(&mut self, id: &str) -> Option<&mut Vec<f64>> {
        match self.layers.get_mut(id)? {
            LayerParams::Norm { beta, .. } => Some(beta),
            _ => None,
        }
    }
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
