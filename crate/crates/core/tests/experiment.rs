mod common;

use segprune::config::MtpConfig;
use segprune::error::Error;
use segprune::pipeline::data::generate_datasets;
use segprune::pipeline::experiment::{checkpoint_file, plan_file, run_experiment, FAILURE_FILE, HISTORY_FILE, REPORT_FILE};
use segprune::pipeline::model::ModelCheckpoint;
use segprune::pipeline::report::{read_csv, ReportRow};
use segprune::pipeline::train::evaluate;
use segprune::profiler::{count_flops, count_params};
use segprune::pruner::PruningPlan;
use segprune::sparse_trainer::RoundRecord;

const STAGES: [&str; 17] = [
    "pretrain",
    "dense",
    "mtp-sparse",
    "mtp-pruned",
    "mtp-finetune-cls",
    "mtp-finetuned",
    "mtp-unified-pruned",
    "mtp-unified-finetune-cls",
    "mtp-unified-finetuned",
    "slimming-sparse",
    "slimming-pruned",
    "slimming-finetune-cls",
    "slimming-finetuned",
    "slimming-segonly-finetuned",
    "uniform-pruned",
    "uniform-finetune-cls",
    "uniform-finetuned",
];

#[test]
fn smoke_run_persists_a_consistent_report() {
    let cfg = MtpConfig::smoke();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let report = run_experiment(&cfg, Some(out)).unwrap();

    let stages: Vec<&str> = report.rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, STAGES);
    assert!(report.failure.is_none());
    assert!(!out.join(FAILURE_FILE).exists());

    let on_disk: Vec<ReportRow> = read_csv(&out.join(REPORT_FILE)).unwrap();
    assert_eq!(on_disk, report.rows);
    let history: Vec<RoundRecord> = read_csv(&out.join(HISTORY_FILE)).unwrap();
    assert_eq!(history, report.history);
    assert_eq!(history.len(), cfg.sparse.rounds);

    let data = generate_datasets(cfg.seed, &cfg.data, &cfg.model).unwrap();
    for row in &report.rows {
        // Every cell comes from the persisted stage graph.
        let ck = ModelCheckpoint::load(out.join(&row.checkpoint)).unwrap();
        assert_eq!(row.checkpoint, checkpoint_file(&row.stage));
        assert_eq!(ck.stage, row.stage);
        assert_eq!(ck.config_hash, cfg.hash());
        assert_eq!(row.params, count_params(&ck.graph));
        assert_eq!(row.flops, count_flops(&ck.graph, ck.graph.input_shape).unwrap());
        let m = evaluate(&ck.graph, &ck.model, &data).unwrap();
        assert!((m.top1 - row.top1).abs() <= 1e-6 && (m.miou - row.miou).abs() <= 1e-6, "{}", row.stage);
        assert!(row.latency_ms > 0.0);
        assert_eq!(row.seed, cfg.seed);
    }

    // Fair comparison: every pruned arm shares percentile, budgets and seed.
    let arms: Vec<&ReportRow> = report.rows.iter().filter(|r| r.stage.ends_with("-finetuned")).collect();
    assert_eq!(arms.len(), 5);
    for r in &arms {
        assert_eq!(r.percentile, Some(cfg.prune.percentile));
        assert_eq!(r.finetune_seg_epochs, cfg.finetune.segmentation.epochs);
        assert_eq!(r.data_seed, cfg.seed);
    }
    assert_eq!(report.row("mtp-finetuned").unwrap().policy.as_deref(), Some("independent"));
    assert_eq!(report.row("mtp-unified-finetuned").unwrap().policy.as_deref(), Some("unified"));

    for arm in ["mtp", "mtp-unified", "slimming", "uniform"] {
        let plan = PruningPlan::load(out.join(plan_file(arm))).unwrap();
        assert_eq!(plan.to_text(), report.plan(arm).unwrap().to_text());
        assert_eq!(plan.predicted_params, report.row(&format!("{arm}-pruned")).unwrap().params);
        let svg = std::fs::read_to_string(out.join(format!("plots/channels-{arm}.svg"))).unwrap();
        assert!(svg.contains("decoder region"));
    }
    for plot in ["sparsity", "accuracy-flops"] {
        assert!(std::fs::read_to_string(out.join(format!("plots/{plot}.svg"))).unwrap().contains("<svg"));
    }
    assert_eq!(MtpConfig::load(out.join("config.toml")).unwrap(), cfg);
}

#[test]
fn rerun_reproduces_plans_and_metrics() {
    let cfg = MtpConfig::smoke();
    let a = run_experiment(&cfg, None).unwrap();
    let b = run_experiment(&cfg, None).unwrap();
    for ((arm, pa), (_, pb)) in a.plans.iter().zip(&b.plans) {
        let bits = |p: &PruningPlan| p.keep_masks.iter().map(|m| m.bitstring()).collect::<Vec<_>>();
        assert_eq!(bits(pa), bits(pb), "{arm}");
    }
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.top1, x.miou, x.params, x.flops), (y.top1, y.miou, y.params, y.flops));
    }
}

#[test]
fn failing_stage_leaves_a_partial_report() {
    let mut cfg = MtpConfig::smoke();
    cfg.finetune.classification.lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, Some(dir.path())).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "mtp"),
        other => panic!("unexpected error {other}"),
    }
    let rows: Vec<ReportRow> = read_csv(&dir.path().join(REPORT_FILE)).unwrap();
    let stages: Vec<&str> = rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["pretrain", "dense", "mtp-sparse"]);
    let failure = std::fs::read_to_string(dir.path().join(FAILURE_FILE)).unwrap();
    assert!(failure.starts_with("mtp: "), "{failure}");
    assert!(dir.path().join("stages/dense.json").exists());
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let mut cfg = MtpConfig::smoke();
    cfg.prune.percentile = 100.0;
    let dir = tempfile::tempdir().unwrap();
    assert!(run_experiment(&cfg, Some(dir.path())).is_err());
    assert!(!dir.path().join(REPORT_FILE).exists());
}
