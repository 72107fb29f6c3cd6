//! End-to-end run: pre-training, dense baseline, multi-task sparse training,
//! pruning, fine-tuning and the comparison arms, with every stage profiled,
//! evaluated and persisted.

use std::path::{Path, PathBuf};

use crate::config::{GammaSource, MtpConfig, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::netgraph::{build_desk_network, extract_scaling_factors, NetworkGraph, Partition, ScalingVector};
use crate::pipeline::baselines::{prune_and_finetune, run_baseline_slimming, run_baseline_uniform, ArmResult};
use crate::pipeline::data::{generate_datasets, SynthDatasets};
use crate::pipeline::model::{write_atomic, Model, ModelCheckpoint};
use crate::pipeline::report::{
    plot_accuracy_flops, plot_channels, plot_sparsity, write_csv, ExperimentReport, ReportRow,
};
use crate::pipeline::train::{evaluate, finetune_two_stage, pretrain_backbone, train_segmentation, StageMetrics};
use crate::profiler::measure_latency;
use crate::pruner::{build_plan, PlanMethod, PruningPlan};
use crate::sparse_trainer::{train_sparse, LagrangianCheckpoint, LagrangianState};

/// Environment variable naming the output root when none is given.
pub const OUT_DIR_ENV: &str = "SEGPRUNE_OUT_DIR";

pub const REPORT_FILE: &str = "report.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const FAILURE_FILE: &str = "failure.txt";

/// `explicit`, else `$SEGPRUNE_OUT_DIR`, else `./segprune-out`.
pub fn resolve_out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("segprune-out"))
}

pub fn plan_file(arm: &str) -> String {
    format!("plans/{arm}.plan")
}

pub fn checkpoint_file(stage: &str) -> String {
    format!("stages/{stage}.json")
}

/// Backbone scaling factors used for thresholding.
pub fn backbone_gamma(graph: &NetworkGraph, state: &LagrangianState, source: GammaSource) -> Result<ScalingVector> {
    let g1 = extract_scaling_factors(graph, &state.w1, Partition::Backbone)?;
    Ok(match source {
        GammaSource::W1 => g1,
        GammaSource::MeanW1W3 => {
            let g3 = extract_scaling_factors(graph, &state.w3, Partition::Backbone)?;
            let mut out = g1;
            for (a, b) in out.entries.iter_mut().zip(&g3.entries) {
                a.value = 0.5 * (a.value + b.value);
            }
            out
        }
    })
}

/// Plan on the multi-task sparse state: backbone factors from `w1` (see
/// [`GammaSource`]), decoder factors from `w2`.
pub fn mtp_plan(
    graph: &NetworkGraph,
    state: &LagrangianState,
    cfg: &MtpConfig,
    policy: ThresholdPolicy,
) -> Result<PruningPlan> {
    let gb = backbone_gamma(graph, state, cfg.sparse.gamma_source)?;
    let gd = extract_scaling_factors(graph, &state.w2, Partition::Decoder)?;
    build_plan(graph, &gb, &gd, cfg.prune.percentile, policy)
}

/// The model that is pruned after sparse training: backbone `w1`, decoder `w2`.
pub fn mtp_model(state: &LagrangianState) -> Model {
    Model {
        backbone: state.w1.clone(),
        decoder: state.w2.clone(),
    }
}

struct Runner<'a> {
    cfg: &'a MtpConfig,
    hash: String,
    out: Option<PathBuf>,
    report: ExperimentReport,
}

impl Runner<'_> {
    fn path(&self, rel: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|o| o.join(rel))
    }

    fn persist(&self) -> Result<()> {
        let Some(out) = &self.out else {
            return Ok(());
        };
        write_csv(&self.report.rows, &out.join(REPORT_FILE))?;
        match &self.report.failure {
            Some((stage, msg)) => write_atomic(&out.join(FAILURE_FILE), format!("{stage}: {msg}\n").as_bytes())?,
            None => {
                let _ = std::fs::remove_file(out.join(FAILURE_FILE));
            }
        }
        Ok(())
    }

    fn record(
        &mut self,
        stage: &str,
        arm: &str,
        graph: &NetworkGraph,
        model: &Model,
        metrics: StageMetrics,
        plan: Option<&PruningPlan>,
    ) -> Result<()> {
        let profile = measure_latency(
            graph,
            &[&model.backbone, &model.decoder],
            graph.input_shape,
            self.cfg.profile.latency_batch,
            self.cfg.profile.latency_runs,
        )?;
        let checkpoint = checkpoint_file(stage);
        if let Some(path) = self.path(&checkpoint) {
            ModelCheckpoint::new(stage, &self.hash, graph.clone(), model.clone()).save(path)?;
        }
        self.report.rows.push(ReportRow {
            stage: stage.into(),
            arm: arm.into(),
            top1: metrics.top1,
            miou: metrics.miou,
            params: profile.params,
            flops: profile.flops,
            latency_ms: profile.latency_ms,
            latency_runs: profile.runs,
            latency_batch: profile.batch,
            percentile: plan.map(|p| p.percentile),
            policy: plan.map(|p| match p.method {
                PlanMethod::Uniform => "uniform".to_string(),
                PlanMethod::Threshold => p.policy.to_string(),
            }),
            finetune_cls_epochs: self.cfg.finetune.classification.epochs,
            finetune_seg_epochs: self.cfg.finetune.segmentation.epochs,
            data_seed: self.cfg.seed,
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
            checkpoint,
        });
        self.persist()
    }

    fn save_plan(&mut self, arm: &str, graph: &NetworkGraph, plan: &PruningPlan) -> Result<()> {
        if let Some(path) = self.path(&plan_file(arm)) {
            write_atomic(&path, plan.to_text().as_bytes())?;
            if let Some(svg) = self.path(&format!("plots/channels-{arm}.svg")) {
                plot_channels(graph, plan, &svg)?;
            }
        }
        self.report.plans.push((arm.into(), plan.clone()));
        Ok(())
    }

    fn record_arm(&mut self, arm: &str, graph: &NetworkGraph, data: &SynthDatasets, result: &ArmResult) -> Result<()> {
        self.save_plan(arm, graph, &result.plan)?;
        let pruned_metrics = evaluate(&result.graph, &result.pruned, data)?;
        self.record(&format!("{arm}-pruned"), arm, &result.graph, &result.pruned, pruned_metrics, Some(&result.plan))?;
        let ft = &result.finetuned;
        self.record(
            &format!("{arm}-finetune-cls"),
            arm,
            &result.graph,
            &ft.after_cls,
            ft.after_cls_metrics,
            Some(&result.plan),
        )?;
        self.record(&format!("{arm}-finetuned"), arm, &result.graph, &ft.model, ft.metrics, Some(&result.plan))
    }

    /// Runs `f`, recording a failure under `stage`.
    fn stage<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        match f(self) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.report.failure = Some((stage.into(), e.to_string()));
                let _ = self.persist();
                Err(Error::Stage {
                    stage: stage.into(),
                    source: Box::new(e),
                })
            }
        }
    }
}

/// Every arm of one experiment. With `out`, checkpoints, plans, history,
/// report and plots are written below it, and a partial report survives a
/// failing stage.
pub fn run_experiment(cfg: &MtpConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut r = Runner {
        cfg,
        hash: hash.clone(),
        out: out.map(Path::to_path_buf),
        report: ExperimentReport {
            config_hash: hash,
            seed: cfg.seed,
            ..ExperimentReport::default()
        },
    };
    if let Some(o) = &r.out {
        std::fs::create_dir_all(o)?;
        write_atomic(&o.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    }
    let seed = cfg.seed;

    let (graph, data) = r.stage("setup", |_| {
        let graph = build_desk_network(&cfg.model)?;
        let data = generate_datasets(seed, &cfg.data, &cfg.model)?;
        Ok((graph, data))
    })?;

    let dense = r.stage("pretrain", |r| {
        let init = Model::init(&graph, seed, cfg.model.bn_init_scale);
        let backbone = pretrain_backbone(&graph, init.backbone, &data.cls_train, cfg.pretrain, seed)?;
        let pre = Model {
            backbone,
            decoder: init.decoder,
        };
        let m = evaluate(&graph, &pre, &data)?;
        r.record("pretrain", "dense", &graph, &pre, m, None)?;
        Ok(pre)
    })?;

    let dense = r.stage("dense", |r| {
        let dense = train_segmentation(&graph, dense, &data.seg_train, cfg.segmentation, seed)?;
        let m = evaluate(&graph, &dense, &data)?;
        r.record("dense", "dense", &graph, &dense, m, None)?;
        Ok(dense)
    })?;

    let state = r.stage("mtp-sparse", |r| {
        let (state, history) = train_sparse(
            &graph,
            dense.backbone.clone(),
            dense.decoder.clone(),
            &data,
            &cfg.sparse,
            seed,
        )?;
        if let Some(out) = r.out.clone() {
            LagrangianCheckpoint::new(state.clone(), &r.hash).save(out.join("mtp/lagrangian.json"))?;
            write_csv(&history, &out.join(HISTORY_FILE))?;
            plot_sparsity(&history, &out.join("plots/sparsity.svg"))?;
        }
        r.report.history = history;
        let sparse = mtp_model(&state);
        let m = evaluate(&graph, &sparse, &data)?;
        r.record("mtp-sparse", "mtp", &graph, &sparse, m, None)?;
        Ok(state)
    })?;

    let other = match cfg.prune.policy {
        ThresholdPolicy::Independent => ThresholdPolicy::Unified,
        ThresholdPolicy::Unified => ThresholdPolicy::Independent,
    };
    for (arm, policy) in [("mtp".to_string(), cfg.prune.policy), (format!("mtp-{other}"), other)] {
        r.stage(&arm.clone(), |r| {
            let plan = mtp_plan(&graph, &state, cfg, policy)?;
            let res = prune_and_finetune(&graph, &mtp_model(&state), plan, &data, cfg)?;
            r.record_arm(&arm, &graph, &data, &res)
        })?;
    }

    r.stage("slimming", |r| {
        let res = run_baseline_slimming(&graph, &dense, &data, cfg)?;
        let sparse = res.sparse.as_ref().expect("slimming keeps its sparse model");
        let m = evaluate(&graph, sparse, &data)?;
        r.record("slimming-sparse", "slimming", &graph, sparse, m, None)?;
        r.record_arm("slimming", &graph, &data, &res)?;
        let mut seg_only = cfg.finetune.clone();
        seg_only.classification.epochs = 0;
        let ft = finetune_two_stage(&res.graph, res.pruned.clone(), &data, &seg_only, seed)?;
        r.record(
            "slimming-segonly-finetuned",
            "slimming-segonly",
            &res.graph,
            &ft.model,
            ft.metrics,
            Some(&res.plan),
        )
    })?;

    r.stage("uniform", |r| {
        let keep = 1.0 - cfg.prune.percentile / 100.0;
        let res = run_baseline_uniform(&graph, &dense, keep, &data, cfg)?;
        r.record_arm("uniform", &graph, &data, &res)
    })?;

    if let Some(out) = &r.out {
        plot_accuracy_flops(&r.report.rows, &out.join("plots/accuracy-flops.svg"))?;
    }
    r.persist()?;
    Ok(r.report)
}
