//! Top-1 accuracy and confusion-matrix mIoU.

use crate::error::{Error, Result};
use crate::netgraph::NetworkGraph;
use crate::nn::{self, Weights};
use crate::params::ParamStore;
use crate::pipeline::data::{ClassificationSet, LabeledSet, SegmentationSet};
use crate::task::Task;

const EVAL_BATCH: usize = 64;

/// Percentage of positions where `pred == truth`.
pub fn top1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset("top-1 over zero samples".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// `counts[truth * n + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::Shape(format!("label {} out of range", p.max(t))));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both
    /// prediction and truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let n = self.classes;
        let tp = self.counts[class * n + class];
        let fn_: u64 = (0..n).map(|p| self.counts[class * n + p]).sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|t| self.counts[t * n + class]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over classes present in prediction or truth, in percent.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            return Err(Error::EmptyDataset("mIoU over zero pixels".into()));
        }
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

fn predictions<D: LabeledSet>(graph: &NetworkGraph, stores: &[&ParamStore], data: &D, task: Task) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let target = task.output(graph)?;
    let weights = Weights::new(stores);
    let mut out = Vec::with_capacity(data.labels().len());
    for batch in data.sequential_batches(EVAL_BATCH) {
        let logits = nn::predict(graph, weights, &batch.images, target)?;
        out.extend(nn::argmax_channels(&logits));
    }
    Ok(out)
}

/// Top-1 accuracy (%) of the classification head.
pub fn eval_top1(graph: &NetworkGraph, stores: &[&ParamStore], data: &ClassificationSet) -> Result<f64> {
    top1(&predictions(graph, stores, data, Task::Classification)?, &data.labels)
}

/// Pixel confusion matrix of the segmentation output.
pub fn confusion(graph: &NetworkGraph, stores: &[&ParamStore], data: &SegmentationSet) -> Result<ConfusionMatrix> {
    let pred = predictions(graph, stores, data, Task::Segmentation)?;
    let mut cm = ConfusionMatrix::new(data.num_classes);
    cm.add(&pred, &data.labels)?;
    Ok(cm)
}

/// mIoU (%) of the segmentation output.
pub fn eval_miou(graph: &NetworkGraph, stores: &[&ParamStore], data: &SegmentationSet) -> Result<f64> {
    confusion(graph, stores, data)?.miou()
}
