//! Single-task slimming and uniform-width baselines.

use crate::config::{MtpConfig, SlimmingConfig, ThresholdPolicy};
use crate::error::Result;
use crate::netgraph::{extract_scaling_factors, NetworkGraph, Partition};
use crate::params::ParamStore;
use crate::pipeline::data::{Batch, SegmentationSet, SynthDatasets};
use crate::pipeline::model::Model;
use crate::pipeline::train::{finetune_two_stage, fit, train_step, TwoStage};
use crate::pruner::{apply_plan, build_plan, uniform_plan, PruningPlan};
use crate::sparse_trainer::mix_seed;
use crate::task::Task;

/// One slimming update: SGD on the task loss plus `alpha * sum |gamma|` over
/// the prunable channels held by `stores`.
pub fn slimming_step(
    graph: &NetworkGraph,
    stores: &mut [&mut ParamStore],
    batch: &Batch,
    task: Task,
    alpha: f64,
    lr: f64,
) -> Result<f64> {
    train_step(graph, stores, batch, task, alpha, lr)
}

/// Sparse training of the whole segmentation network on segmentation data,
/// with L1 on every prunable scaling factor.
pub fn sparse_train_slimming(
    graph: &NetworkGraph,
    model: Model,
    data: &SegmentationSet,
    cfg: &SlimmingConfig,
    seed: u64,
) -> Result<Model> {
    let mut m = model;
    fit(
        graph,
        &mut [&mut m.backbone, &mut m.decoder],
        data,
        Task::Segmentation,
        cfg.schedule,
        cfg.alpha,
        mix_seed(seed, &[0x511]),
        "slimming",
    )?;
    Ok(m)
}

/// Plan over the model's own scaling factors.
pub fn plan_from_model(graph: &NetworkGraph, model: &Model, p: f64, policy: ThresholdPolicy) -> Result<PruningPlan> {
    let gb = extract_scaling_factors(graph, &model.backbone, Partition::Backbone)?;
    let gd = extract_scaling_factors(graph, &model.decoder, Partition::Decoder)?;
    build_plan(graph, &gb, &gd, p, policy)
}

/// Applies a plan and splits the result back into backbone and decoder.
pub fn prune_model(graph: &NetworkGraph, model: &Model, plan: &PruningPlan) -> Result<(NetworkGraph, Model)> {
    let (pg, pw) = apply_plan(graph, &model.merged(), plan)?;
    let m = Model::split(&pg, &pw);
    Ok((pg, m))
}

/// A pruned and fine-tuned baseline.
pub struct ArmResult {
    pub sparse: Option<Model>,
    pub plan: PruningPlan,
    pub graph: NetworkGraph,
    pub pruned: Model,
    pub finetuned: TwoStage,
}

/// Prunes `source` with `plan` and runs two-stage fine-tuning.
pub fn prune_and_finetune(
    graph: &NetworkGraph,
    source: &Model,
    plan: PruningPlan,
    data: &SynthDatasets,
    cfg: &MtpConfig,
) -> Result<ArmResult> {
    let (pg, pruned) = prune_model(graph, source, &plan)?;
    let finetuned = finetune_two_stage(&pg, pruned.clone(), data, &cfg.finetune, cfg.seed)?;
    Ok(ArmResult {
        sparse: None,
        plan,
        graph: pg,
        pruned,
        finetuned,
    })
}

/// Slimming sparse training from the dense model, the shared percentile
/// pruner, then two-stage fine-tuning.
pub fn run_baseline_slimming(
    graph: &NetworkGraph,
    dense: &Model,
    data: &SynthDatasets,
    cfg: &MtpConfig,
) -> Result<ArmResult> {
    let sparse = sparse_train_slimming(graph, dense.clone(), &data.seg_train, &cfg.slimming, cfg.seed)?;
    let plan = plan_from_model(graph, &sparse, cfg.prune.percentile, cfg.prune.policy)?;
    let mut arm = prune_and_finetune(graph, &sparse, plan, data, cfg)?;
    arm.sparse = Some(sparse);
    Ok(arm)
}

/// Every prunable layer keeps `ceil(keep_fraction * C)` channels with the
/// largest dense `|gamma|`, then two-stage fine-tuning.
pub fn run_baseline_uniform(
    graph: &NetworkGraph,
    dense: &Model,
    keep_fraction: f64,
    data: &SynthDatasets,
    cfg: &MtpConfig,
) -> Result<ArmResult> {
    let gb = extract_scaling_factors(graph, &dense.backbone, Partition::Backbone)?;
    let gd = extract_scaling_factors(graph, &dense.decoder, Partition::Decoder)?;
    let plan = uniform_plan(graph, &gb, &gd, keep_fraction)?;
    prune_and_finetune(graph, dense, plan, data, cfg)
}
