//! Single-task training stages: backbone pre-training, dense segmentation
//! training and two-stage fine-tuning after pruning.

use std::collections::BTreeSet;

use crate::config::{FinetuneConfig, Schedule};
use crate::error::Result;
use crate::netgraph::{NetworkGraph, Partition};
use crate::params::ParamStore;
use crate::pipeline::data::{Batch, ClassificationSet, LabeledSet, SegmentationSet, SynthDatasets};
use crate::pipeline::eval::{eval_miou, eval_top1};
use crate::pipeline::model::Model;
use crate::sparse_trainer::{mix_seed, run_epochs};
use crate::task::{self, add_l1_to_grads, Task};

/// One SGD step of `task` loss plus `alpha * sum |gamma|` over every prunable
/// channel held by `stores`, updating all of them.
pub fn train_step(
    graph: &NetworkGraph,
    stores: &mut [&mut ParamStore],
    batch: &Batch,
    task: Task,
    alpha: f64,
    lr: f64,
) -> Result<f64> {
    let partitions: Vec<Partition> = stores
        .iter()
        .flat_map(|s| s.layers.keys().filter_map(|id| graph.layer(id).map(|l| l.partition)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tg = {
        let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        task::task_gradient(graph, &views, batch, task, 1.0, &partitions)?
    };
    let mut loss = tg.loss;
    let mut grads = Vec::with_capacity(stores.len());
    for store in stores.iter() {
        let mut g = store.zeros_like();
        g.axpy(1.0, &tg.grads)?;
        for &p in &partitions {
            let owns = graph
                .prunable_convs(p)
                .first()
                .and_then(|c| graph.batchnorm_after(&c.id))
                .is_some_and(|bn| store.layers.contains_key(&bn.id));
            if owns {
                loss += add_l1_to_grads(graph, store, &mut g, p, alpha)?;
            }
        }
        grads.push(g);
    }
    if loss.is_finite() {
        for (store, g) in stores.iter_mut().zip(&grads) {
            task::sgd_step(store, g, lr)?;
            task::update_running_stats(store, &tg.batch_stats);
        }
    }
    Ok(loss)
}

/// `sched.epochs` epochs of [`train_step`]. Returns the last epoch's mean loss.
#[allow(clippy::too_many_arguments)]
pub fn fit<D: LabeledSet>(
    graph: &NetworkGraph,
    stores: &mut [&mut ParamStore],
    data: &D,
    task: Task,
    sched: Schedule,
    alpha: f64,
    seed: u64,
    stage: &str,
) -> Result<f64> {
    run_epochs(data, sched, seed, stage, |b| train_step(graph, stores, b, task, alpha, sched.lr))
}

/// Classification training of the backbone and its head.
pub fn pretrain_backbone(
    graph: &NetworkGraph,
    backbone: ParamStore,
    data: &ClassificationSet,
    sched: Schedule,
    seed: u64,
) -> Result<ParamStore> {
    let mut backbone = backbone;
    fit(
        graph,
        &mut [&mut backbone],
        data,
        Task::Classification,
        sched,
        0.0,
        mix_seed(seed, &[0x9e7]),
        "pretrain",
    )?;
    Ok(backbone)
}

/// Joint backbone and decoder training on segmentation data.
pub fn train_segmentation(
    graph: &NetworkGraph,
    model: Model,
    data: &SegmentationSet,
    sched: Schedule,
    seed: u64,
) -> Result<Model> {
    let mut m = model;
    fit(
        graph,
        &mut [&mut m.backbone, &mut m.decoder],
        data,
        Task::Segmentation,
        sched,
        0.0,
        mix_seed(seed, &[0x5e9]),
        "train-seg",
    )?;
    Ok(m)
}

/// Validation metrics after a fine-tuning stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMetrics {
    pub top1: f64,
    pub miou: f64,
}

pub fn evaluate(graph: &NetworkGraph, model: &Model, data: &SynthDatasets) -> Result<StageMetrics> {
    Ok(StageMetrics {
        top1: eval_top1(graph, &[&model.backbone], &data.cls_val)?,
        miou: eval_miou(graph, &[&model.backbone, &model.decoder], &data.seg_val)?,
    })
}

pub struct TwoStage {
    /// After classification fine-tuning of the backbone and head.
    pub after_cls: Model,
    pub after_cls_metrics: StageMetrics,
    /// After segmentation fine-tuning of the whole model.
    pub model: Model,
    pub metrics: StageMetrics,
}

/// Classification fine-tuning of the (pruned) backbone with its head, then
/// segmentation fine-tuning of backbone and decoder. A zero classification
/// budget gives segmentation-only fine-tuning.
pub fn finetune_two_stage(
    graph: &NetworkGraph,
    model: Model,
    data: &SynthDatasets,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<TwoStage> {
    let mut m = model;
    fit(
        graph,
        &mut [&mut m.backbone],
        &data.cls_train,
        Task::Classification,
        cfg.classification,
        0.0,
        mix_seed(seed, &[0xf1]),
        "finetune (classification)",
    )?;
    let after_cls = m.clone();
    let after_cls_metrics = evaluate(graph, &after_cls, data)?;
    fit(
        graph,
        &mut [&mut m.backbone, &mut m.decoder],
        &data.seg_train,
        Task::Segmentation,
        cfg.segmentation,
        0.0,
        mix_seed(seed, &[0xf2]),
        "finetune (segmentation)",
    )?;
    let metrics = evaluate(graph, &m, data)?;
    Ok(TwoStage {
        after_cls,
        after_cls_metrics,
        model: m,
        metrics,
    })
}
