//! Per-task losses and gradients, and the SGD primitives shared by every
//! training stage.

use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, Partition};
use crate::nn::{self, BatchStats, Mode, Weights, BN_MOMENTUM};
use crate::params::ParamStore;
use crate::pipeline::data::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn output<'g>(self, graph: &'g NetworkGraph) -> Result<&'g str> {
        match self {
            Task::Classification => graph
                .classifier_output()
                .ok_or_else(|| Error::Structure("graph has no classification head".into())),
            Task::Segmentation => graph
                .segmentation_output()
                .ok_or_else(|| Error::Structure("graph has no segmentation output".into())),
        }
    }
}

/// Loss value, parameter gradients and the batch statistics seen in the
/// forward pass.
pub struct TaskGrad {
    pub loss: f64,
    pub grads: ParamStore,
    pub batch_stats: Vec<BatchStats>,
}

/// Train-mode `scale * cross_entropy` on one batch, with gradients for the
/// layers of the listed partitions.
pub fn task_gradient(
    graph: &NetworkGraph,
    stores: &[&ParamStore],
    batch: &Batch,
    task: Task,
    scale: f64,
    partitions: &[Partition],
) -> Result<TaskGrad> {
    let target = task.output(graph)?;
    let weights = Weights::new(stores);
    let fwd = nn::forward(graph, weights, &batch.images, &[target], Mode::Train)?;
    let logits = fwd.output(graph, target).expect("target computed");
    let (loss, mut dlogits) = nn::cross_entropy(logits, &batch.labels)?;
    dlogits *= scale;
    let grads = nn::backward(graph, weights, &fwd, vec![(target, dlogits)], &|l| {
        partitions.contains(&l.partition)
    })?;
    Ok(TaskGrad {
        loss: scale * loss,
        grads,
        batch_stats: fwd.batch_stats,
    })
}

/// Plain SGD: `store -= lr * grads`.
pub fn sgd_step(store: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    store.axpy(-lr, grads)
}

/// Folds batch statistics into the running statistics of layers owned by `store`.
pub fn update_running_stats(store: &mut ParamStore, stats: &[BatchStats]) {
    for s in stats {
        if let Some(rs) = store.stats.get_mut(&s.layer) {
            for (r, m) in rs.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in rs.var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// `alpha * sign(gamma)` with `sign(0) = 0`.
pub fn l1_subgradient(gamma: f64, alpha: f64) -> f64 {
    if gamma > 0.0 {
        alpha
    } else if gamma < 0.0 {
        -alpha
    } else {
        0.0
    }
}

/// Adds the L1 subgradient on the scaling factors of every prunable channel
/// in `partition` to `grads`. Returns the penalty value.
pub fn add_l1_to_grads(
    graph: &NetworkGraph,
    store: &ParamStore,
    grads: &mut ParamStore,
    partition: Partition,
    alpha: f64,
) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let mut penalty = 0.0;
    for conv in graph.prunable_convs(partition) {
        let bn = graph
            .batchnorm_after(&conv.id)
            .ok_or_else(|| Error::Structure(format!("prunable layer `{}` has no batch-norm", conv.id)))?;
        let gamma = store
            .gamma(&bn.id)
            .ok_or_else(|| Error::Structure(format!("missing batch-norm scale for `{}`", bn.id)))?;
        let g = grads
            .gamma_mut(&bn.id)
            .ok_or_else(|| Error::Structure(format!("no gradient slot for `{}`", bn.id)))?;
        for (dst, &v) in g.iter_mut().zip(gamma) {
            *dst += l1_subgradient(v, alpha);
            penalty += alpha * v.abs();
        }
    }
    Ok(penalty)
}

pub(crate) fn check_finite(loss: f64, stage: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.to_string(),
            step,
            loss,
        })
    }
}
