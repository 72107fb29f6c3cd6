//! Multi-task sparse training by alternating minimisation of an augmented
//! Lagrangian.
//!
//! The backbone is duplicated: `w1` is trained on classification data, `w3`
//! on segmentation data together with the decoder `w2`, and the consensus
//! constraint `w1 = w3` is enforced by the penalty
//! `(mu/2)|w1 - w3|^2 + <E, w1 - w3>`. Each round runs the `w1`, `w2` and `w3`
//! sub-problems with plain SGD, then grows `E` and `mu`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Schedule, SparseConfig};
use crate::error::{Error, Result};
use crate::netgraph::{extract_scaling_factors, NetworkGraph, Partition, ScalingVector};
use crate::params::ParamStore;
use crate::pipeline::model::write_atomic;
use crate::pipeline::data::{Batch, ClassificationSet, LabeledSet, SegmentationSet, SynthDatasets};
use crate::task::{self, add_l1_to_grads, check_finite, l1_subgradient, Task};

/// Channels with `|gamma|` below this count as sparse in the history.
pub const SPARSITY_TOL: f64 = 1e-3;

/// Optimisation state: two backbone copies, the decoder, the multiplier and
/// the penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub w1: ParamStore,
    pub w2: ParamStore,
    pub w3: ParamStore,
    /// Multiplier `E`, same layout as `w1`.
    pub multiplier: ParamStore,
    pub mu: f64,
    pub round: usize,
}

impl LagrangianState {
    /// `w3` starts as a copy of `w1`, `E` at zero.
    pub fn new(backbone: ParamStore, decoder: ParamStore, mu0: f64) -> Self {
        LagrangianState {
            w3: backbone.clone(),
            multiplier: backbone.zeros_like(),
            w1: backbone,
            w2: decoder,
            mu: mu0,
            round: 0,
        }
    }

    /// `|w1 - w3|_2`.
    pub fn residual_norm(&self) -> f64 {
        self.w1
            .flatten()
            .iter()
            .zip(self.w3.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `|w1 - w3| / |w1|`.
    pub fn relative_residual(&self) -> f64 {
        let n = self.w1.norm_sq().sqrt();
        if n == 0.0 {
            0.0
        } else {
            self.residual_norm() / n
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.w1.check_same_shape(&self.w3)?;
        self.w1.check_same_shape(&self.multiplier)
    }
}

/// `(mu/2)|w1 - w3|^2 + <E, w1 - w3>` over all flattened backbone values.
pub fn coupling_loss(w1: &ParamStore, w3: &ParamStore, multiplier: &ParamStore, mu: f64) -> Result<f64> {
    w1.check_same_shape(w3)?;
    w1.check_same_shape(multiplier)?;
    let mut quad = 0.0;
    let mut lin = 0.0;
    for ((a, b), e) in w1.layers.values().zip(w3.layers.values()).zip(multiplier.layers.values()) {
        for ((sa, sb), se) in a.slices().into_iter().zip(b.slices()).zip(e.slices()) {
            for ((x, y), m) in sa.iter().zip(sb).zip(se) {
                let d = x - y;
                quad += d * d;
                lin += m * d;
            }
        }
    }
    Ok(0.5 * mu * quad + lin)
}

/// Adds `sign * (mu (w1 - w3) + E)` to `grads`: the coupling gradient with
/// respect to `w1` for `sign = 1`, and with respect to `w3` for `sign = -1`.
pub fn add_coupling_gradient(
    grads: &mut ParamStore,
    w1: &ParamStore,
    w3: &ParamStore,
    multiplier: &ParamStore,
    mu: f64,
    sign: f64,
) -> Result<()> {
    grads.check_same_shape(w1)?;
    for (((g, a), b), e) in grads
        .layers
        .values_mut()
        .zip(w1.layers.values())
        .zip(w3.layers.values())
        .zip(multiplier.layers.values())
    {
        for (((sg, sa), sb), se) in g.slices_mut().into_iter().zip(a.slices()).zip(b.slices()).zip(e.slices()) {
            for (((dst, x), y), m) in sg.iter_mut().zip(sa).zip(sb).zip(se) {
                *dst += sign * (mu * (x - y) + m);
            }
        }
    }
    Ok(())
}

/// `alpha * sum |gamma|` and the per-entry subgradient `alpha * sign(gamma)`.
pub fn l1_penalty(scales: &ScalingVector, alpha: f64) -> Result<(f64, Vec<f64>)> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let loss = alpha * scales.entries.iter().map(|e| e.value.abs()).sum::<f64>();
    let sub = scales
        .entries
        .iter()
        .map(|e| l1_subgradient(e.value, alpha))
        .collect();
    Ok((loss, sub))
}

/// Stable per-epoch shuffling seed.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x1000_0000_01B3).rotate_left(23);
    }
    h
}

/// Zero gradient with the layout of `store`, plus `task` gradients.
fn full_grads(store: &ParamStore, task: &ParamStore) -> Result<ParamStore> {
    let mut g = store.zeros_like();
    g.axpy(1.0, task)?;
    Ok(g)
}

/// Runs `sched.epochs` shuffled epochs of `update`, returning the mean loss of
/// the last epoch.
pub(crate) fn run_epochs<D: LabeledSet>(
    data: &D,
    sched: Schedule,
    seed: u64,
    stage: &str,
    mut update: impl FnMut(&Batch) -> Result<f64>,
) -> Result<f64> {
    if sched.epochs > 0 && data.is_empty() {
        return Err(Error::EmptyDataset(format!("{stage} has no training data")));
    }
    let mut last = f64::NAN;
    for epoch in 0..sched.epochs {
        let batches = data.epoch_batches(sched.batch_size, mix_seed(seed, &[epoch as u64]));
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let loss = update(batch)?;
            check_finite(loss, stage, epoch * batches.len() + step)?;
            total += loss;
        }
        last = total / batches.len() as f64;
    }
    Ok(last)
}

/// One SGD step on `l_cls(w1) + coupling(w1, w3, E, mu) + alpha1 |gamma1|_1`.
pub fn w1_update(graph: &NetworkGraph, state: &mut LagrangianState, batch: &Batch, cfg: &SparseConfig) -> Result<f64> {
    let tg = task::task_gradient(graph, &[&state.w1], batch, Task::Classification, 1.0, &[Partition::Backbone])?;
    let mut g = full_grads(&state.w1, &tg.grads)?;
    add_coupling_gradient(&mut g, &state.w1, &state.w3, &state.multiplier, state.mu, 1.0)?;
    let coupling = coupling_loss(&state.w1, &state.w3, &state.multiplier, state.mu)?;
    let l1 = add_l1_to_grads(graph, &state.w1, &mut g, Partition::Backbone, cfg.alpha1)?;
    let loss = tg.loss + coupling + l1;
    if loss.is_finite() {
        task::sgd_step(&mut state.w1, &g, cfg.w1.lr)?;
        task::update_running_stats(&mut state.w1, &tg.batch_stats);
    }
    Ok(loss)
}

/// One SGD step on `lambda l_seg(w3, w2) + alpha2 |gamma2|_1` over `w2`.
pub fn w2_update(graph: &NetworkGraph, state: &mut LagrangianState, batch: &Batch, cfg: &SparseConfig) -> Result<f64> {
    let tg = task::task_gradient(
        graph,
        &[&state.w3, &state.w2],
        batch,
        Task::Segmentation,
        cfg.lambda_tradeoff,
        &[Partition::Decoder],
    )?;
    let mut g = full_grads(&state.w2, &tg.grads)?;
    let l1 = add_l1_to_grads(graph, &state.w2, &mut g, Partition::Decoder, cfg.alpha2)?;
    let loss = tg.loss + l1;
    if loss.is_finite() {
        task::sgd_step(&mut state.w2, &g, cfg.w2.lr)?;
        task::update_running_stats(&mut state.w2, &tg.batch_stats);
    }
    Ok(loss)
}

/// One SGD step on `lambda l_seg(w3, w2) + coupling(w1, w3, E, mu) + alpha2 |gamma3|_1`
/// over `w3`.
pub fn w3_update(graph: &NetworkGraph, state: &mut LagrangianState, batch: &Batch, cfg: &SparseConfig) -> Result<f64> {
    let tg = task::task_gradient(
        graph,
        &[&state.w3, &state.w2],
        batch,
        Task::Segmentation,
        cfg.lambda_tradeoff,
        &[Partition::Backbone],
    )?;
    let mut g = full_grads(&state.w3, &tg.grads)?;
    add_coupling_gradient(&mut g, &state.w1, &state.w3, &state.multiplier, state.mu, -1.0)?;
    let coupling = coupling_loss(&state.w1, &state.w3, &state.multiplier, state.mu)?;
    let l1 = add_l1_to_grads(graph, &state.w3, &mut g, Partition::Backbone, cfg.alpha2)?;
    let loss = tg.loss + coupling + l1;
    if loss.is_finite() {
        task::sgd_step(&mut state.w3, &g, cfg.w3.lr)?;
        task::update_running_stats(&mut state.w3, &tg.batch_stats);
    }
    Ok(loss)
}

/// The `w1` sub-problem over `cfg.w1` epochs of classification data. Only
/// `w1` changes. Returns the mean objective over the last epoch.
pub fn step_w1(
    graph: &NetworkGraph,
    state: &mut LagrangianState,
    data: &ClassificationSet,
    cfg: &SparseConfig,
    seed: u64,
) -> Result<f64> {
    let stage = format!("step_w1 (round {})", state.round);
    let seed = mix_seed(seed, &[state.round as u64, 1]);
    run_epochs(data, cfg.w1, seed, &stage, |b| w1_update(graph, state, b, cfg))
}

/// The decoder sub-problem over `cfg.w2` epochs of segmentation data, with
/// `w3` as the backbone. Only `w2` changes.
pub fn step_w2(
    graph: &NetworkGraph,
    state: &mut LagrangianState,
    data: &SegmentationSet,
    cfg: &SparseConfig,
    seed: u64,
) -> Result<f64> {
    let stage = format!("step_w2 (round {})", state.round);
    let seed = mix_seed(seed, &[state.round as u64, 2]);
    run_epochs(data, cfg.w2, seed, &stage, |b| w2_update(graph, state, b, cfg))
}

/// The backbone-copy sub-problem over `cfg.w3` epochs of segmentation data.
/// Only `w3` changes.
pub fn step_w3(
    graph: &NetworkGraph,
    state: &mut LagrangianState,
    data: &SegmentationSet,
    cfg: &SparseConfig,
    seed: u64,
) -> Result<f64> {
    let stage = format!("step_w3 (round {})", state.round);
    let seed = mix_seed(seed, &[state.round as u64, 3]);
    run_epochs(data, cfg.w3, seed, &stage, |b| w3_update(graph, state, b, cfg))
}

/// `E += mu (w1 - w3)`, `mu = min(rho mu, mu_max)`, `round += 1`.
pub fn update_multipliers(state: &mut LagrangianState, cfg: &SparseConfig) -> Result<()> {
    state.check_shapes()?;
    let mu = state.mu;
    for ((e, a), b) in state
        .multiplier
        .layers
        .values_mut()
        .zip(state.w1.layers.values())
        .zip(state.w3.layers.values())
    {
        for ((se, sa), sb) in e.slices_mut().into_iter().zip(a.slices()).zip(b.slices()) {
            for ((m, x), y) in se.iter_mut().zip(sa).zip(sb) {
                *m += mu * (x - y);
            }
        }
    }
    state.mu = (cfg.rho * mu).min(cfg.mu_max).max(mu);
    state.round += 1;
    Ok(())
}

/// One row of the sparse-training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub loss_w1: f64,
    pub loss_w2: f64,
    pub loss_w3: f64,
    pub coupling: f64,
    /// Penalty weight used during the round.
    pub mu: f64,
    pub residual: f64,
    pub relative_residual: f64,
    pub sparsity_backbone: f64,
    pub sparsity_decoder: f64,
    pub sparsity_w3: f64,
}

pub fn sparsity_fractions(graph: &NetworkGraph, state: &LagrangianState) -> Result<(f64, f64, f64)> {
    let g1 = extract_scaling_factors(graph, &state.w1, Partition::Backbone)?;
    let g2 = extract_scaling_factors(graph, &state.w2, Partition::Decoder)?;
    let g3 = extract_scaling_factors(graph, &state.w3, Partition::Backbone)?;
    Ok((
        g1.fraction_below(SPARSITY_TOL),
        g2.fraction_below(SPARSITY_TOL),
        g3.fraction_below(SPARSITY_TOL),
    ))
}

/// Runs `cfg.rounds` rounds of `{w1, w2, w3, multipliers}` from the given
/// backbone and decoder weights.
pub fn train_sparse(
    graph: &NetworkGraph,
    backbone: ParamStore,
    decoder: ParamStore,
    data: &SynthDatasets,
    cfg: &SparseConfig,
    seed: u64,
) -> Result<(LagrangianState, Vec<RoundRecord>)> {
    let mut state = LagrangianState::new(backbone, decoder, cfg.mu0);
    let mut history = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let round = state.round;
        let loss_w1 = step_w1(graph, &mut state, &data.cls_train, cfg, seed)?;
        let loss_w2 = step_w2(graph, &mut state, &data.seg_train, cfg, seed)?;
        let loss_w3 = step_w3(graph, &mut state, &data.seg_train, cfg, seed)?;
        let mu = state.mu;
        let coupling = coupling_loss(&state.w1, &state.w3, &state.multiplier, mu)?;
        let (sb, sd, s3) = sparsity_fractions(graph, &state)?;
        let record = RoundRecord {
            round,
            loss_w1,
            loss_w2,
            loss_w3,
            coupling,
            mu,
            residual: state.residual_norm(),
            relative_residual: state.relative_residual(),
            sparsity_backbone: sb,
            sparsity_decoder: sd,
            sparsity_w3: s3,
        };
        update_multipliers(&mut state, cfg)?;
        let converged = cfg
            .early_stop_tol
            .is_some_and(|tol| record.relative_residual < tol);
        history.push(record);
        if converged {
            break;
        }
    }
    Ok((state, history))
}

/// Writes the history as CSV.
pub fn write_history_csv(history: &[RoundRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "segprune-lagrangian";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianCheckpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub state: LagrangianState,
}

impl LagrangianCheckpoint {
    pub fn new(state: LagrangianState, config_hash: &str) -> Self {
        LagrangianCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            state,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: LagrangianCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }
}
