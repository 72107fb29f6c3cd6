//! Percentile thresholds over batch-norm scaling factors and channel-removal
//! graph surgery.
//!
//! Channels are ranked by `|gamma|`; ties are broken by canonical order
//! (layer order, then channel index), so the first `floor(p n / 100)` ranked
//! entries are pruned and the threshold is the largest pruned magnitude
//! ("below or tied"). A layer never loses its last channel: if every channel
//! of a layer is selected, the one with the largest `|gamma|` survives.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::ThresholdPolicy;
use crate::error::{Error, Result};
use crate::netgraph::{validate, LayerKind, NetworkGraph, Partition, ScalingVector};
use crate::pipeline::model::write_atomic;
use crate::params::{LayerParams, ParamStore, RunningStats, Tensor};
use crate::profiler::{count_flops, count_params};

/// How a plan's masks were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMethod {
    /// Percentile thresholds on `|gamma|`.
    Threshold,
    /// Fixed per-layer keep count by largest `|gamma|`.
    Uniform,
}

impl PlanMethod {
    fn as_str(self) -> &'static str {
        match self {
            PlanMethod::Threshold => "threshold",
            PlanMethod::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    /// The prunable convolution whose output channels are masked.
    pub layer_id: String,
    pub partition: Partition,
    /// `true` keeps the channel.
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn bitstring(&self) -> String {
        self.keep.iter().map(|&k| if k { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub method: PlanMethod,
    pub policy: ThresholdPolicy,
    pub percentile: f64,
    /// Largest pruned backbone `|gamma|`, `-inf` when nothing is cut.
    pub tau1: f64,
    pub tau2: f64,
    /// One mask per prunable layer, in layer order.
    pub keep_masks: Vec<LayerMask>,
    pub base_params: u64,
    pub base_flops: u64,
    pub predicted_params: u64,
    pub predicted_flops: u64,
    pub predicted_params_ratio: f64,
    pub predicted_flops_ratio: f64,
}

/// Thresholds plus the selected (pre-cap) channels of each partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub tau1: f64,
    pub tau2: f64,
    /// `true` marks a channel below or tied with its threshold, in vector order.
    pub backbone: Vec<bool>,
    pub decoder: Vec<bool>,
}

/// Number of entries cut at percentile `p` out of `n`: `floor(p n / 100)`.
pub fn cut_count(p: f64, n: usize) -> usize {
    ((p * n as f64) / 100.0).floor() as usize
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::Config(format!("percentile must lie in (0, 100), got {p}")));
    }
    Ok(())
}

/// Marks the `k` smallest `|v|` with stable (canonical) tie-breaking.
fn smallest(values: &[f64], k: usize) -> (Vec<bool>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    let mut marked = vec![false; values.len()];
    for &i in &order[..k] {
        marked[i] = true;
    }
    let tau = if k == 0 {
        f64::NEG_INFINITY
    } else {
        values[order[k - 1]].abs()
    };
    (marked, tau)
}

/// Percentile selection over both partitions.
pub fn select_channels(
    gamma_backbone: &ScalingVector,
    gamma_decoder: &ScalingVector,
    p: f64,
    policy: ThresholdPolicy,
) -> Result<Selection> {
    check_percentile(p)?;
    if gamma_backbone.is_empty() || gamma_decoder.is_empty() {
        return Err(Error::Plan("threshold needs non-empty backbone and decoder vectors".into()));
    }
    let gb = gamma_backbone.values();
    let gd = gamma_decoder.values();
    if gb.iter().chain(&gd).any(|v| v.is_nan()) {
        return Err(Error::Plan("scaling factors contain NaN".into()));
    }
    Ok(match policy {
        ThresholdPolicy::Independent => {
            let (backbone, tau1) = smallest(&gb, cut_count(p, gb.len()));
            let (decoder, tau2) = smallest(&gd, cut_count(p, gd.len()));
            Selection { tau1, tau2, backbone, decoder }
        }
        ThresholdPolicy::Unified => {
            let all: Vec<f64> = gb.iter().chain(&gd).copied().collect();
            let (mut marked, tau) = smallest(&all, cut_count(p, all.len()));
            let decoder = marked.split_off(gb.len());
            Selection {
                tau1: tau,
                tau2: tau,
                backbone: marked,
                decoder,
            }
        }
    })
}

/// `(tau1, tau2)` for the given policy.
pub fn compute_thresholds(
    gamma_backbone: &ScalingVector,
    gamma_decoder: &ScalingVector,
    p: f64,
    policy: ThresholdPolicy,
) -> Result<(f64, f64)> {
    let s = select_channels(gamma_backbone, gamma_decoder, p, policy)?;
    Ok((s.tau1, s.tau2))
}

/// Checks that `gamma` lists exactly the prunable channels of its partition.
fn check_vector(graph: &NetworkGraph, gamma: &ScalingVector, partition: Partition) -> Result<()> {
    if gamma.partition != partition {
        return Err(Error::Plan(format!("expected a {partition} vector, got {}", gamma.partition)));
    }
    let mut it = gamma.entries.iter();
    for conv in graph.prunable_convs(partition) {
        for c in 0..conv.out_channels {
            match it.next() {
                Some(e) if e.layer_id == conv.id && e.channel == c => {}
                _ => {
                    return Err(Error::Plan(format!(
                        "{partition} scaling vector does not match layer `{}` channel {c}",
                        conv.id
                    )))
                }
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::Plan(format!("{partition} scaling vector has extra entries")));
    }
    Ok(())
}

/// Turns per-entry prune flags into per-layer keep masks with the
/// one-channel floor.
fn masks_from_flags(gamma: &ScalingVector, pruned: &[bool]) -> Vec<LayerMask> {
    let mut masks: Vec<LayerMask> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (e, &p) in gamma.entries.iter().zip(pruned) {
        if masks.last().is_none_or(|m| m.layer_id != e.layer_id) {
            masks.push(LayerMask {
                layer_id: e.layer_id.clone(),
                partition: gamma.partition,
                keep: Vec::new(),
            });
            values.push(Vec::new());
        }
        masks.last_mut().unwrap().keep.push(!p);
        values.last_mut().unwrap().push(e.value.abs());
    }
    for (m, v) in masks.iter_mut().zip(&values) {
        if m.kept() == 0 {
            let best = (0..v.len())
                .max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)))
                .expect("layer has channels");
            m.keep[best] = true;
        }
    }
    masks
}

impl PruningPlan {
    fn assemble(
        graph: &NetworkGraph,
        method: PlanMethod,
        policy: ThresholdPolicy,
        percentile: f64,
        (tau1, tau2): (f64, f64),
        keep_masks: Vec<LayerMask>,
    ) -> Result<Self> {
        let pruned = prune_graph(graph, &keep_masks)?;
        let base_params = count_params(graph);
        let base_flops = count_flops(graph, graph.input_shape)?;
        let predicted_params = count_params(&pruned.graph);
        let predicted_flops = count_flops(&pruned.graph, graph.input_shape)?;
        Ok(PruningPlan {
            method,
            policy,
            percentile,
            tau1,
            tau2,
            keep_masks,
            base_params,
            base_flops,
            predicted_params,
            predicted_flops,
            predicted_params_ratio: predicted_params as f64 / base_params as f64,
            predicted_flops_ratio: predicted_flops as f64 / base_flops as f64,
        })
    }

    pub fn mask(&self, layer_id: &str) -> Option<&LayerMask> {
        self.keep_masks.iter().find(|m| m.layer_id == layer_id)
    }

    /// Kept / total prunable channels of a partition.
    pub fn kept_fraction(&self, partition: Partition) -> f64 {
        let (kept, total) = self
            .keep_masks
            .iter()
            .filter(|m| m.partition == partition)
            .fold((0, 0), |(k, t), m| (k + m.kept(), t + m.keep.len()));
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{PLAN_HEADER}");
        let _ = writeln!(s, "method {}", self.method.as_str());
        let _ = writeln!(s, "policy {}", self.policy);
        let _ = writeln!(s, "percentile {:?}", self.percentile);
        let _ = writeln!(s, "tau1 {:?}", self.tau1);
        let _ = writeln!(s, "tau2 {:?}", self.tau2);
        let _ = writeln!(s, "base_params {}", self.base_params);
        let _ = writeln!(s, "base_flops {}", self.base_flops);
        let _ = writeln!(s, "predicted_params {}", self.predicted_params);
        let _ = writeln!(s, "predicted_flops {}", self.predicted_flops);
        let _ = writeln!(s, "predicted_params_ratio {:?}", self.predicted_params_ratio);
        let _ = writeln!(s, "predicted_flops_ratio {:?}", self.predicted_flops_ratio);
        for m in &self.keep_masks {
            let _ = writeln!(s, "mask {} {} {}", m.layer_id, m.partition, m.bitstring());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse(format!("plan: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(PLAN_HEADER) {
            return Err(bad(format!("missing `{PLAN_HEADER}` header")));
        }
        let mut fields: HashMap<&str, &str> = HashMap::new();
        let mut keep_masks = Vec::new();
        for line in lines {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("mask ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [id, part, bits] = parts[..] else {
                    return Err(bad(format!("malformed mask line `{line}`")));
                };
                let partition = match part {
                    "backbone" => Partition::Backbone,
                    "decoder" => Partition::Decoder,
                    other => return Err(bad(format!("unknown partition `{other}`"))),
                };
                let keep = bits
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        other => Err(bad(format!("bad mask character `{other}`"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                keep_masks.push(LayerMask {
                    layer_id: id.to_string(),
                    partition,
                    keep,
                });
            } else {
                let (k, v) = line
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
                fields.insert(k, v.trim());
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
        let float = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| bad(format!("`{k}` is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| bad(format!("`{k}` is not an integer")))
        };
        let method = match get("method")? {
            "threshold" => PlanMethod::Threshold,
            "uniform" => PlanMethod::Uniform,
            other => return Err(bad(format!("unknown method `{other}`"))),
        };
        Ok(PruningPlan {
            method,
            policy: get("policy")?.parse()?,
            percentile: float("percentile")?,
            tau1: float("tau1")?,
            tau2: float("tau2")?,
            keep_masks,
            base_params: int("base_params")?,
            base_flops: int("base_flops")?,
            predicted_params: int("predicted_params")?,
            predicted_flops: int("predicted_flops")?,
            predicted_params_ratio: float("predicted_params_ratio")?,
            predicted_flops_ratio: float("predicted_flops_ratio")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

const PLAN_HEADER: &str = "segprune-plan v1";

/// Percentile plan over both partitions, with predicted costs of the pruned
/// graph.
pub fn build_plan(
    graph: &NetworkGraph,
    gamma_backbone: &ScalingVector,
    gamma_decoder: &ScalingVector,
    p: f64,
    policy: ThresholdPolicy,
) -> Result<PruningPlan> {
    check_vector(graph, gamma_backbone, Partition::Backbone)?;
    check_vector(graph, gamma_decoder, Partition::Decoder)?;
    let sel = select_channels(gamma_backbone, gamma_decoder, p, policy)?;
    let mut masks = masks_from_flags(gamma_backbone, &sel.backbone);
    masks.extend(masks_from_flags(gamma_decoder, &sel.decoder));
    sort_masks(graph, &mut masks);
    PruningPlan::assemble(graph, PlanMethod::Threshold, policy, p, (sel.tau1, sel.tau2), masks)
}

/// Keeps `ceil(keep_fraction * C)` channels with the largest `|gamma|` in every
/// prunable layer.
pub fn uniform_plan(
    graph: &NetworkGraph,
    gamma_backbone: &ScalingVector,
    gamma_decoder: &ScalingVector,
    keep_fraction: f64,
) -> Result<PruningPlan> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    check_vector(graph, gamma_backbone, Partition::Backbone)?;
    check_vector(graph, gamma_decoder, Partition::Decoder)?;
    let mut masks = Vec::new();
    for gamma in [gamma_backbone, gamma_decoder] {
        let all = masks_from_flags(gamma, &vec![false; gamma.len()]);
        for mut m in all {
            let values: Vec<f64> = gamma
                .entries
                .iter()
                .filter(|e| e.layer_id == m.layer_id)
                .map(|e| e.value)
                .collect();
            let c = values.len();
            // Tolerate representation error such as 0.7 * 10 = 7.000000000000001.
            let keep = ((keep_fraction * c as f64) - 1e-9).ceil().clamp(1.0, c as f64) as usize;
            let (drop, _) = smallest(&values, c - keep);
            m.keep = drop.iter().map(|d| !d).collect();
            masks.push(m);
        }
    }
    sort_masks(graph, &mut masks);
    let p = (1.0 - keep_fraction) * 100.0;
    PruningPlan::assemble(
        graph,
        PlanMethod::Uniform,
        ThresholdPolicy::Independent,
        p,
        (f64::NAN, f64::NAN),
        masks,
    )
}

fn sort_masks(graph: &NetworkGraph, masks: &mut [LayerMask]) {
    let idx = graph.index_map();
    masks.sort_by_key(|m| idx.get(m.layer_id.as_str()).copied().unwrap_or(usize::MAX));
}

/// Pruned graph plus, per layer, the original output channel indices kept
/// (`None` when untouched).
pub struct Surgery {
    pub graph: NetworkGraph,
    pub kept: Vec<Option<Vec<usize>>>,
    /// Kept input channel indices per layer (`None` when untouched).
    pub kept_in: Vec<Option<Vec<usize>>>,
}

/// Structural part of [`apply_plan`]: reshapes layers without touching weights.
pub fn prune_graph(graph: &NetworkGraph, masks: &[LayerMask]) -> Result<Surgery> {
    let idx = graph.index_map();
    let mut by_layer: HashMap<&str, &LayerMask> = HashMap::new();
    for m in masks {
        let Some(&i) = idx.get(m.layer_id.as_str()) else {
            return Err(Error::Plan(format!("mask for unknown layer `{}`", m.layer_id)));
        };
        let l = &graph.layers[i];
        if !(l.prunable && l.kind.is_conv_like()) {
            return Err(Error::Plan(format!("mask eliminates channels of non-prunable layer `{}`", l.id)));
        }
        if l.partition != m.partition {
            return Err(Error::Plan(format!("mask for `{}` names the wrong partition", l.id)));
        }
        if m.keep.len() != l.out_channels {
            return Err(Error::Plan(format!(
                "mask for `{}` has {} entries, layer has {} channels",
                l.id,
                m.keep.len(),
                l.out_channels
            )));
        }
        if m.kept() == 0 {
            return Err(Error::Plan(format!("mask removes every channel of `{}`", l.id)));
        }
        if by_layer.insert(m.layer_id.as_str(), m).is_some() {
            return Err(Error::Plan(format!("duplicate mask for `{}`", l.id)));
        }
    }

    let producers = graph.producer_indices()?;
    let mut out = graph.clone();
    let mut kept: Vec<Option<Vec<usize>>> = Vec::with_capacity(graph.layers.len());
    let mut kept_in: Vec<Option<Vec<usize>>> = Vec::with_capacity(graph.layers.len());
    for (i, l) in graph.layers.iter().enumerate() {
        let ins: Vec<&Option<Vec<usize>>> = producers[i].iter().map(|&p| &kept[p]).collect();
        let input_keep: Option<Vec<usize>> = match l.kind {
            LayerKind::Concat => {
                if ins.iter().all(|k| k.is_none()) {
                    None
                } else {
                    let mut all = Vec::new();
                    let mut offset = 0;
                    for (&p, k) in producers[i].iter().zip(&ins) {
                        let c = graph.layers[p].out_channels;
                        match k {
                            Some(k) => all.extend(k.iter().map(|j| offset + j)),
                            None => all.extend(offset..offset + c),
                        }
                        offset += c;
                    }
                    Some(all)
                }
            }
            LayerKind::ElementwiseAdd => {
                if ins.iter().any(|k| **k != *ins[0]) {
                    return Err(Error::Plan(format!(
                        "plan prunes the inputs of residual sum `{}` inconsistently",
                        l.id
                    )));
                }
                ins[0].clone()
            }
            _ => ins.first().and_then(|k| (*k).clone()),
        };
        let new_in = input_keep.as_ref().map_or(l.in_channels, Vec::len);
        let output_keep = if l.kind.is_conv_like() {
            by_layer.get(l.id.as_str()).map(|m| {
                m.keep
                    .iter()
                    .enumerate()
                    .filter_map(|(j, &k)| k.then_some(j))
                    .collect::<Vec<_>>()
            })
        } else {
            input_keep.clone()
        };
        let spec = &mut out.layers[i];
        spec.in_channels = new_in;
        spec.out_channels = if l.kind.is_conv_like() {
            output_keep.as_ref().map_or(l.out_channels, Vec::len)
        } else if l.kind == LayerKind::Concat {
            new_in
        } else {
            output_keep.as_ref().map_or(l.out_channels, Vec::len)
        };
        kept_in.push(input_keep);
        kept.push(output_keep);
    }
    Ok(Surgery {
        graph: out,
        kept,
        kept_in,
    })
}

fn pick<T: Copy>(v: &[T], keep: &Option<Vec<usize>>) -> Vec<T> {
    match keep {
        Some(k) => k.iter().map(|&j| v[j]).collect(),
        None => v.to_vec(),
    }
}

/// Removes the masked channels from `graph` and `weights`, slicing every
/// consumer (through concatenations) to match.
pub fn apply_plan(
    graph: &NetworkGraph,
    weights: &ParamStore,
    plan: &PruningPlan,
) -> Result<(NetworkGraph, ParamStore)> {
    let surgery = prune_graph(graph, &plan.keep_masks)?;
    let mut store = ParamStore::new();
    for (i, l) in graph.layers.iter().enumerate() {
        let out_keep = &surgery.kept[i];
        let in_keep = &surgery.kept_in[i];
        match weights.layers.get(&l.id) {
            Some(LayerParams::Conv { weight, bias }) => {
                let [o, c, kh, kw] = weight.shape[..] else {
                    return Err(Error::Shape(format!("layer `{}` weight is not 4-d", l.id)));
                };
                let os: Vec<usize> = out_keep.clone().unwrap_or_else(|| (0..o).collect());
                let is: Vec<usize> = in_keep.clone().unwrap_or_else(|| (0..c).collect());
                let k2 = kh * kw;
                let mut data = Vec::with_capacity(os.len() * is.len() * k2);
                for &oi in &os {
                    for &ci in &is {
                        let start = (oi * c + ci) * k2;
                        data.extend_from_slice(&weight.data[start..start + k2]);
                    }
                }
                store.layers.insert(
                    l.id.clone(),
                    LayerParams::Conv {
                        weight: Tensor {
                            shape: vec![os.len(), is.len(), kh, kw],
                            data,
                        },
                        bias: bias.as_ref().map(|b| pick(b, out_keep)),
                    },
                );
            }
            Some(LayerParams::Norm { gamma, beta }) => {
                store.layers.insert(
                    l.id.clone(),
                    LayerParams::Norm {
                        gamma: pick(gamma, out_keep),
                        beta: pick(beta, out_keep),
                    },
                );
            }
            None => {}
        }
        if let Some(s) = weights.stats.get(&l.id) {
            store.stats.insert(
                l.id.clone(),
                RunningStats {
                    mean: pick(&s.mean, out_keep),
                    var: pick(&s.var, out_keep),
                },
            );
        }
    }
    let violations = validate(&surgery.graph);
    if let Some(v) = violations.first() {
        return Err(Error::Plan(format!("pruned graph is invalid: {v}")));
    }
    Ok((surgery.graph, store))
}
