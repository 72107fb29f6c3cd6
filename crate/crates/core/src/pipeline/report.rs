//! Experiment report table and SVG plots.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, Partition};
use crate::pipeline::model::{ensure_parent, write_atomic};
use crate::pruner::PruningPlan;
use crate::sparse_trainer::RoundRecord;

/// One evaluated checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: String,
    /// `dense`, `mtp`, `slimming`, ... for stages of one pruning arm.
    pub arm: String,
    pub top1: f64,
    pub miou: f64,
    pub params: u64,
    pub flops: u64,
    pub latency_ms: f64,
    pub latency_runs: usize,
    pub latency_batch: usize,
    pub percentile: Option<f64>,
    pub policy: Option<String>,
    pub finetune_cls_epochs: usize,
    pub finetune_seg_epochs: usize,
    pub data_seed: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Checkpoint holding the stage's graph and weights, relative to the output root.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// Plans by arm name.
    pub plans: Vec<(String, PruningPlan)>,
    pub history: Vec<RoundRecord>,
    /// Stage name and message of the first failure.
    pub failure: Option<(String, String)>,
}

impl ExperimentReport {
    pub fn row(&self, stage: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    pub fn plan(&self, arm: &str) -> Option<&PruningPlan> {
        self.plans.iter().find(|(a, _)| a == arm).map(|(_, p)| p)
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// Backbone and decoder sparsity per round.
pub fn plot_sparsity(history: &[RoundRecord], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let rounds = history.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("Fraction of |gamma| < 1e-3 per round", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..rounds, 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc("sparse fraction")
        .draw()
        .map_err(plot_err)?;
    let series: [(&str, RGBColor, fn(&RoundRecord) -> f64); 3] = [
        ("backbone (w1)", BLUE, |r| r.sparsity_backbone),
        ("decoder (w2)", RED, |r| r.sparsity_decoder),
        ("backbone copy (w3)", GREEN, |r| r.sparsity_w3),
    ];
    for (name, color, f) in series {
        let pts: Vec<(f64, f64)> = history.iter().map(|r| (r.round as f64 + 1.0, f(r))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Kept versus original channels of every prunable layer, with the decoder
/// region shaded.
pub fn plot_channels(graph: &NetworkGraph, plan: &PruningPlan, path: &Path) -> Result<()> {
    let bars: Vec<(String, Partition, usize, usize)> = plan
        .keep_masks
        .iter()
        .map(|m| (m.layer_id.clone(), m.partition, m.keep.len(), m.kept()))
        .collect();
    let n = bars.len().max(1);
    let top = bars.iter().map(|b| b.2).max().unwrap_or(1) as f64 * 1.15;
    ensure_parent(path)?;
    let root = SVGBackend::new(path, (64 * n as u32 + 160, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("Channels kept per layer ({} prunable layers)", graph.prunable_convs(Partition::Backbone).len() + graph.prunable_convs(Partition::Decoder).len()),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(plot_err)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_label_style(("sans-serif", 10).into_font().transform(FontTransform::Rotate90))
        .y_desc("channels")
        .draw()
        .map_err(plot_err)?;
    if let Some(first) = bars.iter().position(|b| b.1 == Partition::Decoder) {
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(first as f64, 0.0), (n as f64, top)],
                RED.mix(0.08).filled(),
            )))
            .map_err(plot_err)?
            .label("decoder region")
            .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 16, y + 5)], RED.mix(0.3).filled()));
    }
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b.2 as f64)], BLACK.mix(0.15).filled())
        }))
        .map_err(plot_err)?
        .label("original")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 16, y + 5)], BLACK.mix(0.15).filled()));
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            let color = if b.1 == Partition::Backbone { BLUE } else { RED };
            Rectangle::new([(i as f64 + 0.25, 0.0), (i as f64 + 0.75, b.3 as f64)], color.filled())
        }))
        .map_err(plot_err)?
        .label("kept")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 16, y + 5)], BLUE.filled()));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// mIoU against FLOPs for every row.
pub fn plot_accuracy_flops(rows: &[ReportRow], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let root = SVGBackend::new(path, (640, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_flops = rows.iter().map(|r| r.flops).max().unwrap_or(1) as f64 * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .caption("mIoU vs FLOPs", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..max_flops, 0f64..100f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("FLOPs (MACs)")
        .y_desc("mIoU (%)")
        .draw()
        .map_err(plot_err)?;
    let palette = [BLACK, BLUE, RED, GREEN, MAGENTA, CYAN];
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    for (i, arm) in arms.iter().enumerate() {
        let color = palette[i % palette.len()];
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.arm == *arm && r.miou.is_finite())
            .map(|r| (r.flops as f64, r.miou))
            .collect();
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(plot_err)?
            .label(arm.to_string())
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
