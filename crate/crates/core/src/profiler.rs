//! Parameter, FLOP and latency accounting for a [`NetworkGraph`].
//!
//! FLOPs are counted as multiply-accumulates: a convolution (or head)
//! contributes `k^2 * Cin * Cout * Hout * Wout`; batch-norm, activation,
//! elementwise-add and pooling contribute `C * H * W` of their input;
//! upsampling and concatenation are free.

use std::time::Instant;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, NetworkGraph};
use crate::nn::{self, Mode, Weights};
use crate::params::{standard_normal, ParamStore};

pub const WARMUP_RUNS: usize = 3;
pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub params: u64,
    pub flops: u64,
    /// Median forward wall-clock time.
    pub latency_ms: f64,
    pub runs: usize,
    pub warmup_runs: usize,
    pub batch: usize,
    pub input_shape: [usize; 3],
    pub hardware: String,
}

/// `k^2 Cin Cout (+ Cout)` per convolution or head, `2 C` per batch-norm.
pub fn count_params(graph: &NetworkGraph) -> u64 {
    graph
        .layers
        .iter()
        .map(|l| match l.kind {
            k if k.is_conv_like() => {
                let w = l.kernel_size * l.kernel_size * l.in_channels * l.out_channels;
                (w + if l.bias { l.out_channels } else { 0 }) as u64
            }
            LayerKind::Batchnorm => 2 * l.out_channels as u64,
            _ => 0,
        })
        .sum()
}

/// Multiply-accumulate count of one forward pass on a single `(C, H, W)` input.
pub fn count_flops(graph: &NetworkGraph, input_shape: [usize; 3]) -> Result<u64> {
    if graph.layers.is_empty() {
        return Ok(0);
    }
    if input_shape[0] != graph.input_shape[0] {
        return Err(Error::Shape(format!(
            "input has {} channels, graph expects {}",
            input_shape[0], graph.input_shape[0]
        )));
    }
    let shapes = graph.propagate_shapes(input_shape)?;
    let producers = graph.producer_indices()?;
    let mut total = 0u64;
    for (i, l) in graph.layers.iter().enumerate() {
        let [c, h, w] = shapes[i];
        let input = producers[i].first().map_or(input_shape, |&p| shapes[p]);
        let volume = |s: [usize; 3]| (s[0] * s[1] * s[2]) as u64;
        total += match l.kind {
            k if k.is_conv_like() => (l.kernel_size * l.kernel_size * l.in_channels * c * h * w) as u64,
            LayerKind::Batchnorm | LayerKind::Activation | LayerKind::ElementwiseAdd => volume([c, h, w]),
            LayerKind::Pool => volume(input),
            _ => 0,
        };
    }
    Ok(total)
}

/// Short description of the machine the latency was measured on.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {} {}; {threads} hw threads; f64 cpu backend",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median eval-mode forward time over `runs` timed passes of a random batch,
/// after [`WARMUP_RUNS`] untimed ones. The pass computes the segmentation
/// output, or the classifier output for graphs without a decoder.
pub fn measure_latency(
    graph: &NetworkGraph,
    stores: &[&ParamStore],
    input_shape: [usize; 3],
    batch: usize,
    runs: usize,
) -> Result<ProfileResult> {
    if runs < MIN_RUNS {
        return Err(Error::Config(format!("latency needs at least {MIN_RUNS} runs, got {runs}")));
    }
    if batch == 0 {
        return Err(Error::Config("latency batch must be positive".into()));
    }
    let target = graph
        .segmentation_output()
        .or_else(|| graph.classifier_output())
        .ok_or_else(|| Error::Structure("graph has no output head".into()))?;
    let [c, h, w] = input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e_0c1);
    let input = Array4::from_shape_simple_fn((batch, c, h, w), || standard_normal(&mut rng));
    let weights = Weights::new(stores);
    let mut times = Vec::with_capacity(runs);
    for i in 0..WARMUP_RUNS + runs {
        let start = Instant::now();
        let fwd = nn::forward(graph, weights, &input, &[target], Mode::Eval)?;
        std::hint::black_box(&fwd);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if i >= WARMUP_RUNS {
            times.push(elapsed);
        }
    }
    Ok(ProfileResult {
        params: count_params(graph),
        flops: count_flops(graph, input_shape)?,
        latency_ms: median(times).max(f64::MIN_POSITIVE),
        runs,
        warmup_runs: WARMUP_RUNS,
        batch,
        input_shape,
        hardware: hardware_descriptor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{LayerSpec, Partition};

    fn single_conv(cin: usize, cout: usize, k: usize, hw: usize) -> NetworkGraph {
        NetworkGraph {
            input_shape: [cin, hw, hw],
            layers: vec![
                LayerSpec::conv("c", cin, cout, k, Partition::Backbone),
                LayerSpec::batchnorm("bn", cout, Partition::Backbone),
            ],
            edges: vec![("c".into(), "bn".into())],
        }
    }

    #[test]
    fn conv_with_bn_param_count() {
        assert_eq!(count_params(&single_conv(2, 4, 3, 5)), 80);
        let empty = NetworkGraph {
            input_shape: [1, 1, 1],
            layers: vec![],
            edges: vec![],
        };
        assert_eq!(count_params(&empty), 0);
    }

    #[test]
    fn conv_macs() {
        let g = single_conv(2, 4, 3, 5);
        // 1800 MACs for the conv plus 100 for the batch-norm.
        assert_eq!(count_flops(&g, [2, 5, 5]).unwrap(), 1800 + 100);
        let unit = NetworkGraph {
            input_shape: [1, 1, 1],
            layers: vec![LayerSpec::conv("c", 1, 1, 1, Partition::Backbone)],
            edges: vec![],
        };
        assert_eq!(count_flops(&unit, [1, 1, 1]).unwrap(), 1);
    }

    #[test]
    fn underflow_is_an_error() {
        let g = single_conv(1, 1, 2, 1);
        assert!(count_flops(&g, [1, 1, 1]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
