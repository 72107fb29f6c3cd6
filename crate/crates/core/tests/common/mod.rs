//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segprune::netgraph::{LayerKind, LayerSpec, NetworkGraph, Partition};
use segprune::params::ParamStore;
use segprune::pipeline::data::Batch;

/// A network under 100 parameters that still contains every layer kind:
/// strided and dilated convolutions, a residual add with projection, pooling,
/// upsampling, concatenation and both heads.
pub fn toy_graph() -> NetworkGraph {
    let bb = Partition::Backbone;
    let dec = Partition::Decoder;
    let mut layers = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut push = |layer: LayerSpec, inputs: &[&str]| {
        for i in inputs {
            edges.push((i.to_string(), layer.id.clone()));
        }
        layers.push(layer);
    };
    push(LayerSpec::conv("stem.conv", 1, 2, 3, bb), &[]);
    push(LayerSpec::batchnorm("stem.bn", 2, bb), &["stem.conv"]);
    push(LayerSpec::relu("stem.relu", 2, bb), &["stem.bn"]);
    push(
        LayerSpec::conv("b.c1.conv", 2, 2, 1, bb).with_stride(2).prunable(true).in_group("b"),
        &["stem.relu"],
    );
    push(LayerSpec::batchnorm("b.c1.bn", 2, bb).in_group("b"), &["b.c1.conv"]);
    push(LayerSpec::relu("b.c1.relu", 2, bb).in_group("b"), &["b.c1.bn"]);
    push(LayerSpec::conv("b.c3.conv", 2, 2, 1, bb).in_group("b"), &["b.c1.relu"]);
    push(LayerSpec::batchnorm("b.c3.bn", 2, bb).in_group("b"), &["b.c3.conv"]);
    push(LayerSpec::conv("b.proj.conv", 2, 2, 1, bb).with_stride(2).in_group("b"), &["stem.relu"]);
    push(LayerSpec::batchnorm("b.proj.bn", 2, bb).in_group("b"), &["b.proj.conv"]);
    push(LayerSpec::add("b.add", 2, bb).in_group("b"), &["b.c3.bn", "b.proj.bn"]);
    push(LayerSpec::relu("b.out", 2, bb).in_group("b"), &["b.add"]);
    push(LayerSpec::pool("cls.pool", 2, bb), &["b.out"]);
    push(LayerSpec::head("cls.head", LayerKind::ClassifierHead, 2, 2, bb), &["cls.pool"]);

    push(LayerSpec::conv("d.b0.conv", 2, 1, 1, dec).prunable(true), &["b.out"]);
    push(LayerSpec::batchnorm("d.b0.bn", 1, dec), &["d.b0.conv"]);
    push(LayerSpec::relu("d.b0.relu", 1, dec), &["d.b0.bn"]);
    push(LayerSpec::conv("d.b1.conv", 2, 1, 3, dec).with_dilation(2).prunable(true), &["b.out"]);
    push(LayerSpec::batchnorm("d.b1.bn", 1, dec), &["d.b1.conv"]);
    push(LayerSpec::relu("d.b1.relu", 1, dec), &["d.b1.bn"]);
    push(LayerSpec::pool("d.gp.pool", 2, dec), &["b.out"]);
    push(LayerSpec::conv("d.gp.conv", 2, 1, 1, dec).prunable(true), &["d.gp.pool"]);
    push(LayerSpec::batchnorm("d.gp.bn", 1, dec), &["d.gp.conv"]);
    push(LayerSpec::relu("d.gp.relu", 1, dec), &["d.gp.bn"]);
    push(LayerSpec::upsample("d.gp.up", 1, 2, dec), &["d.gp.relu"]);
    push(LayerSpec::concat("d.cat", 3, dec), &["d.b0.relu", "d.b1.relu", "d.gp.up"]);
    push(LayerSpec::head("seg.head", LayerKind::SegmentationHead, 3, 2, dec), &["d.cat"]);
    push(LayerSpec::upsample("seg.up", 2, 2, dec), &["seg.head"]);
    NetworkGraph {
        input_shape: [1, 4, 4],
        layers,
        edges,
    }
}

/// Initialised weights with every value jittered, so biases and shifts are
/// non-zero and scaling factors are away from zero.
pub fn jittered(graph: &NetworkGraph, seed: u64) -> ParamStore {
    let mut w = ParamStore::init(graph, seed, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = w.flatten().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
    w.unflatten_from(&flat).unwrap();
    w
}

pub fn random_images(n: usize, shape: [usize; 3], seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, shape[0], shape[1], shape[2]), |_| rng.gen_range(-1.0..1.0))
}

pub fn cls_batch(graph: &NetworkGraph, n: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1);
    Batch {
        images: random_images(n, graph.input_shape, seed),
        labels: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
    }
}

pub fn seg_batch(graph: &NetworkGraph, n: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e);
    let [_, h, w] = graph.input_shape;
    Batch {
        images: random_images(n, graph.input_shape, seed),
        labels: (0..n * h * w).map(|_| rng.gen_range(0..classes)).collect(),
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradients; entries where both sides are
/// below `floor` in magnitude compare absolutely against `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `grads` spread over the layout of `like`, zero where `grads` has no layer.
pub fn dense_grads(like: &ParamStore, grads: &ParamStore) -> Vec<f64> {
    let mut full = like.zeros_like();
    for (id, p) in &grads.layers {
        full.layers.insert(id.clone(), p.clone());
    }
    full.flatten()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Prune flags and threshold for the `k` smallest `|v|`: the k-th order
/// statistic, everything strictly below it, then ties in index order.
pub fn order_statistic_cut(values: &[f64], k: usize) -> (Vec<bool>, f64) {
    if k == 0 {
        return (vec![false; values.len()], f64::NEG_INFINITY);
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let tau = sorted[k - 1];
    let below = values.iter().filter(|v| v.abs() < tau).count();
    let mut ties_left = k - below;
    let flags = values
        .iter()
        .map(|v| {
            if v.abs() < tau {
                true
            } else if v.abs() == tau && ties_left > 0 {
                ties_left -= 1;
                true
            } else {
                false
            }
        })
        .collect();
    (flags, tau)
}

/// `floor(p n / 100)` with `p` given in hundredths of a percent.
pub fn cut_of(p_hundredths: u32, n: usize) -> usize {
    (p_hundredths as usize * n) / 10_000
}

pub struct ThresholdOracle {
    pub tau1: f64,
    pub tau2: f64,
    pub backbone: Vec<bool>,
    pub decoder: Vec<bool>,
}

pub fn threshold_oracle(gb: &[f64], gd: &[f64], p_hundredths: u32, unified: bool) -> ThresholdOracle {
    if unified {
        let all: Vec<f64> = gb.iter().chain(gd).copied().collect();
        let (mut flags, tau) = order_statistic_cut(&all, cut_of(p_hundredths, all.len()));
        let decoder = flags.split_off(gb.len());
        ThresholdOracle {
            tau1: tau,
            tau2: tau,
            backbone: flags,
            decoder,
        }
    } else {
        let (backbone, tau1) = order_statistic_cut(gb, cut_of(p_hundredths, gb.len()));
        let (decoder, tau2) = order_statistic_cut(gd, cut_of(p_hundredths, gd.len()));
        ThresholdOracle {
            tau1,
            tau2,
            backbone,
            decoder,
        }
    }
}

/// Overwrites the values of `v`, drawing from a handful of levels when
/// `ties` so that equal magnitudes (of either sign) are common.
pub fn randomize_scales(v: &mut segprune::ScalingVector, rng: &mut ChaCha8Rng, ties: bool) {
    for e in &mut v.entries {
        e.value = if ties {
            let level = [0.0, 0.01, 0.25, 0.5, 1.0][rng.gen_range(0..5)];
            if rng.gen_bool(0.5) { level } else { -level }
        } else {
            rng.gen_range(-2.0..2.0)
        };
    }
}

/// Zeroes scale and shift of every channel the plan removes.
pub fn silence_removed(graph: &NetworkGraph, store: &mut ParamStore, plan: &segprune::pruner::PruningPlan) {
    for m in &plan.keep_masks {
        let bn = graph.batchnorm_after(&m.layer_id).unwrap().id.clone();
        for (c, keep) in m.keep.iter().enumerate() {
            if !keep {
                store.gamma_mut(&bn).unwrap()[c] = 0.0;
                store.beta_mut(&bn).unwrap()[c] = 0.0;
            }
        }
    }
}

/// Largest `|a - b| / max |a|` over both outputs of eval-mode forwards.
pub fn output_gap(g1: &NetworkGraph, w1: &ParamStore, g2: &NetworkGraph, w2: &ParamStore, input: &Array4<f64>) -> f64 {
    use segprune::nn::{predict, Weights};
    let mut worst: f64 = 0.0;
    let targets = [g1.classifier_output().unwrap(), g1.segmentation_output().unwrap()];
    for t in targets {
        let a = predict(g1, Weights::new(&[w1]), input, t).unwrap();
        let b = predict(g2, Weights::new(&[w2]), input, t).unwrap();
        assert_eq!(a.shape(), b.shape());
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let gap = a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(gap / scale);
    }
    worst
}

/// Parameter count read off freshly allocated tensors.
pub fn allocated_params(graph: &NetworkGraph) -> u64 {
    ParamStore::init(graph, 0, 1.0).num_values() as u64
}

/// Multiply-accumulates from the activation shapes of a real forward pass.
pub fn enumerated_flops(graph: &NetworkGraph) -> u64 {
    use segprune::nn::{forward, Mode, Weights};
    let w = ParamStore::init(graph, 0, 1.0);
    let x = Array4::zeros((1, graph.input_shape[0], graph.input_shape[1], graph.input_shape[2]));
    let ids: Vec<&str> = graph.layers.iter().map(|l| l.id.as_str()).collect();
    let fwd = forward(graph, Weights::new(&[&w]), &x, &ids, Mode::Eval).unwrap();
    let out = |id: &str| fwd.output(graph, id).unwrap().shape().to_vec();
    let mut total = 0u64;
    for l in &graph.layers {
        let o = out(&l.id);
        let positions = (o[2] * o[3]) as u64;
        total += match l.kind {
            LayerKind::Conv | LayerKind::ClassifierHead | LayerKind::SegmentationHead => {
                let mut macs = 0u64;
                // One MAC per kernel tap, input channel and output element.
                for _ in 0..l.out_channels {
                    for _ in 0..l.in_channels {
                        macs += (l.kernel_size * l.kernel_size) as u64 * positions;
                    }
                }
                macs
            }
            LayerKind::Batchnorm | LayerKind::Activation | LayerKind::ElementwiseAdd => o[1] as u64 * positions,
            LayerKind::Pool => {
                let producer = graph.producers(&l.id)[0];
                out(producer)[1..].iter().product::<usize>() as u64
            }
            LayerKind::Upsample | LayerKind::Concat => 0,
        };
    }
    total
}
