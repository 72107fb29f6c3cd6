use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use segprune::config::{MtpConfig, PruneConfig, ThresholdPolicy};
use segprune::netgraph::{build_desk_network, NetworkGraph};
use segprune::params::ParamStore;
use segprune::pipeline::baselines::{plan_from_model, prune_model};
use segprune::pipeline::data::{generate_datasets, write_previews, DataManifest, SynthDatasets};
use segprune::pipeline::experiment::{
    checkpoint_file, mtp_model, mtp_plan, plan_file, resolve_out_dir, HISTORY_FILE, OUT_DIR_ENV, REPORT_FILE,
};
use segprune::pipeline::model::{Model, ModelCheckpoint};
use segprune::pipeline::report::{plot_accuracy_flops, plot_channels, plot_sparsity, read_csv, write_csv, ReportRow};
use segprune::pipeline::train::{evaluate, finetune_two_stage, pretrain_backbone, train_segmentation};
use segprune::pipeline::run_experiment;
use segprune::profiler::{count_flops, count_params, hardware_descriptor, measure_latency};
use segprune::pruner::{uniform_plan, PruningPlan};
use segprune::sparse_trainer::{train_sparse, LagrangianCheckpoint};
use segprune::netgraph::{extract_scaling_factors, Partition};

const MANIFEST_FILE: &str = "data/manifest.json";
const LAGRANGIAN_FILE: &str = "mtp/lagrangian.json";

#[derive(Parser)]
#[command(name = "segprune", version, about = "Multi-task channel pruning for segmentation networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Tiny budgets instead of the desk defaults; ignored with --config.
    #[arg(long, global = true)]
    smoke: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (falls back to $SEGPRUNE_OUT_DIR, then ./segprune-out).
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Fraction of prunable channels to keep; sets the percentile to (1 - f) * 100.
    #[arg(long, global = true)]
    keep_fraction: Option<f64>,
    #[arg(long, global = true)]
    threshold_policy: Option<ThresholdPolicy>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets and write a manifest and previews.
    GenData {
        #[arg(long, default_value_t = 8)]
        previews: usize,
    },
    /// Pre-train the backbone on classification.
    Pretrain,
    /// Train the dense segmentation baseline from the pre-trained backbone.
    TrainSeg {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Multi-task sparse training from the dense baseline.
    MtpTrain {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Build a pruning plan and apply it.
    Prune {
        /// A sparse-training state or a model checkpoint; defaults to the sparse-training state.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Threshold)]
        method: Method,
        /// Name of the arm; defaults to `mtp` (or `uniform`).
        #[arg(long)]
        arm: Option<String>,
    },
    /// Two-stage fine-tuning of a pruned checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Classification epochs (0 gives segmentation-only fine-tuning).
        #[arg(long)]
        cls_epochs: Option<usize>,
        #[arg(long)]
        seg_epochs: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Parameters, FLOPs and latency of a graph or checkpoint.
    Profile {
        path: PathBuf,
        /// Input height and width; defaults to the graph's own input size.
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
    /// Top-1 and mIoU of a checkpoint on the validation splits.
    Eval { checkpoint: PathBuf },
    /// Merge the reports of several output directories.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Every stage and arm end to end.
    RunAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Threshold,
    Uniform,
}

struct Ctx {
    cfg: MtpConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => MtpConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if g.smoke => MtpConfig::smoke(),
            None => MtpConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        if let Some(k) = g.keep_fraction {
            cfg.prune.percentile = PruneConfig::percentile_from_keep_fraction(k)?;
        }
        if let Some(p) = g.threshold_policy {
            cfg.prune.policy = p;
        }
        cfg.validate()?;
        Ok(Ctx {
            cfg,
            out: resolve_out_dir(g.out_dir.as_deref()),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn graph(&self) -> Result<NetworkGraph> {
        Ok(build_desk_network(&self.cfg.model)?)
    }

    /// Regenerates the datasets, checking them against a manifest if one exists.
    fn data(&self) -> Result<SynthDatasets> {
        let data = generate_datasets(self.cfg.seed, &self.cfg.data, &self.cfg.model)?;
        let manifest = self.path(MANIFEST_FILE);
        if manifest.exists() {
            let m = DataManifest::load(&manifest)?;
            if m.fingerprint != data.fingerprint() {
                bail!(
                    "{} was generated with different data settings (seed {}); rerun gen-data",
                    manifest.display(),
                    m.seed
                );
            }
        }
        Ok(data)
    }

    fn load_model(&self, explicit: Option<&Path>, stage: &str) -> Result<ModelCheckpoint> {
        let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| self.path(&checkpoint_file(stage)));
        let ck = ModelCheckpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if ck.config_hash != self.cfg.hash() {
            eprintln!("warning: {} was written under config {}", path.display(), ck.config_hash);
        }
        Ok(ck)
    }

    fn save_stage(&self, stage: &str, graph: &NetworkGraph, model: &Model) -> Result<PathBuf> {
        let path = self.path(&checkpoint_file(stage));
        ModelCheckpoint::new(stage, &self.cfg.hash(), graph.clone(), model.clone()).save(&path)?;
        Ok(path)
    }
}

fn print_metrics(stage: &str, graph: &NetworkGraph, model: &Model, data: &SynthDatasets, saved: &Path) -> Result<()> {
    let m = evaluate(graph, model, data)?;
    println!(
        "{stage}: top1 {:.2}%  mIoU {:.2}%  params {}  -> {}",
        m.top1,
        m.miou,
        count_params(graph),
        saved.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = Ctx::new(&cli.global)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::GenData { previews } => {
            let data = generate_datasets(cfg.seed, &cfg.data, &cfg.model)?;
            let m = data.manifest();
            m.save(ctx.path(MANIFEST_FILE))?;
            let files = write_previews(&data, &ctx.path("data/previews"), previews)?;
            println!("fingerprint {}", m.fingerprint);
            println!("wrote {} and {} previews", ctx.path(MANIFEST_FILE).display(), files.len());
        }
        Command::Pretrain => {
            let (graph, data) = (ctx.graph()?, ctx.data()?);
            let init = Model::init(&graph, cfg.seed, cfg.model.bn_init_scale);
            let model = Model {
                backbone: pretrain_backbone(&graph, init.backbone, &data.cls_train, cfg.pretrain, cfg.seed)?,
                decoder: init.decoder,
            };
            let saved = ctx.save_stage("pretrain", &graph, &model)?;
            print_metrics("pretrain", &graph, &model, &data, &saved)?;
        }
        Command::TrainSeg { from } => {
            let data = ctx.data()?;
            let ck = ctx.load_model(from.as_deref(), "pretrain")?;
            let model = train_segmentation(&ck.graph, ck.model, &data.seg_train, cfg.segmentation, cfg.seed)?;
            let saved = ctx.save_stage("dense", &ck.graph, &model)?;
            print_metrics("dense", &ck.graph, &model, &data, &saved)?;
        }
        Command::MtpTrain { from } => {
            let data = ctx.data()?;
            let ck = ctx.load_model(from.as_deref(), "dense")?;
            let (state, history) = train_sparse(&ck.graph, ck.model.backbone, ck.model.decoder, &data, &cfg.sparse, cfg.seed)?;
            LagrangianCheckpoint::new(state.clone(), &cfg.hash()).save(ctx.path(LAGRANGIAN_FILE))?;
            write_csv(&history, &ctx.path(HISTORY_FILE))?;
            plot_sparsity(&history, &ctx.path("plots/sparsity.svg"))?;
            for r in &history {
                println!(
                    "round {}: mu {:.3} residual {:.3e} sparsity backbone {:.3} decoder {:.3}",
                    r.round, r.mu, r.relative_residual, r.sparsity_backbone, r.sparsity_decoder
                );
            }
            let model = mtp_model(&state);
            let saved = ctx.save_stage("mtp-sparse", &ck.graph, &model)?;
            print_metrics("mtp-sparse", &ck.graph, &model, &data, &saved)?;
        }
        Command::Prune { from, method, arm } => {
            let graph = ctx.graph()?;
            let from = from.unwrap_or_else(|| ctx.path(LAGRANGIAN_FILE));
            let keep = 1.0 - cfg.prune.percentile / 100.0;
            let (model, plan) = match LagrangianCheckpoint::load(&from) {
                Ok(ck) => {
                    let plan = match method {
                        Method::Threshold => mtp_plan(&graph, &ck.state, cfg, cfg.prune.policy)?,
                        Method::Uniform => uniform_from(&graph, &mtp_model(&ck.state), keep)?,
                    };
                    (mtp_model(&ck.state), plan)
                }
                Err(_) => {
                    let ck = ModelCheckpoint::load(&from).with_context(|| format!("loading {}", from.display()))?;
                    let plan = match method {
                        Method::Threshold => plan_from_model(&ck.graph, &ck.model, cfg.prune.percentile, cfg.prune.policy)?,
                        Method::Uniform => uniform_from(&ck.graph, &ck.model, keep)?,
                    };
                    (ck.model, plan)
                }
            };
            let arm = arm.unwrap_or_else(|| match method {
                Method::Threshold => "mtp".into(),
                Method::Uniform => "uniform".into(),
            });
            plan.save(ctx.path(&plan_file(&arm)))?;
            plot_channels(&graph, &plan, &ctx.path(&format!("plots/channels-{arm}.svg")))?;
            let (pg, pruned) = prune_model(&graph, &model, &plan)?;
            let saved = ctx.save_stage(&format!("{arm}-pruned"), &pg, &pruned)?;
            println!(
                "plan {}: params ratio {:.3}, FLOPs ratio {:.3}",
                ctx.path(&plan_file(&arm)).display(),
                plan.predicted_params_ratio,
                plan.predicted_flops_ratio
            );
            print_metrics(&format!("{arm}-pruned"), &pg, &pruned, &ctx.data()?, &saved)?;
        }
        Command::Finetune {
            checkpoint,
            cls_epochs,
            seg_epochs,
            name,
        } => {
            let data = ctx.data()?;
            let ck = ctx.load_model(Some(&checkpoint), "")?;
            let mut ft = cfg.finetune.clone();
            if let Some(e) = cls_epochs {
                ft.classification.epochs = e;
            }
            if let Some(e) = seg_epochs {
                ft.segmentation.epochs = e;
            }
            let name = name.unwrap_or_else(|| {
                let base = ck.stage.strip_suffix("-pruned").unwrap_or(&ck.stage);
                format!("{base}-finetuned")
            });
            let out = finetune_two_stage(&ck.graph, ck.model, &data, &ft, cfg.seed)?;
            println!(
                "after classification stage: top1 {:.2}%  mIoU {:.2}%",
                out.after_cls_metrics.top1, out.after_cls_metrics.miou
            );
            let saved = ctx.save_stage(&name, &ck.graph, &out.model)?;
            print_metrics(&name, &ck.graph, &out.model, &data, &saved)?;
        }
        Command::Profile {
            path,
            input_size,
            batch,
            runs,
        } => {
            let (graph, store) = match ModelCheckpoint::load(&path) {
                Ok(ck) => {
                    let merged = ck.model.merged();
                    (ck.graph, merged)
                }
                Err(_) => {
                    let g = NetworkGraph::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    let w = ParamStore::init(&g, cfg.seed, cfg.model.bn_init_scale);
                    (g, w)
                }
            };
            let mut shape = graph.input_shape;
            if let Some(s) = input_size {
                shape[1] = s;
                shape[2] = s;
            }
            let flops = count_flops(&graph, shape)?;
            let p = measure_latency(&graph, &[&store], shape, batch, runs)?;
            println!("params  {}", count_params(&graph));
            println!("flops   {flops} (multiply-accumulates, input {}x{}x{})", shape[0], shape[1], shape[2]);
            println!("latency {:.3} ms (median of {} runs, batch {}, {} warm-up)", p.latency_ms, p.runs, p.batch, p.warmup_runs);
            println!("host    {}", hardware_descriptor());
        }
        Command::Eval { checkpoint } => {
            let data = ctx.data()?;
            let ck = ctx.load_model(Some(&checkpoint), "")?;
            print_metrics(&ck.stage, &ck.graph, &ck.model, &data, &checkpoint)?;
        }
        Command::Report { dirs, output } => {
            let dirs = if dirs.is_empty() { vec![ctx.out.clone()] } else { dirs };
            let mut rows: Vec<ReportRow> = Vec::new();
            for d in &dirs {
                let path = d.join(REPORT_FILE);
                if !path.exists() {
                    eprintln!("skipping {}: no report yet", d.display());
                    continue;
                }
                rows.extend(read_csv::<ReportRow>(&path).with_context(|| format!("reading {}", path.display()))?);
            }
            let output = output.unwrap_or_else(|| ctx.path("merged-report.csv"));
            write_csv(&rows, &output)?;
            plot_accuracy_flops(&rows, &output.with_extension("svg"))?;
            println!("{:<30} {:>7} {:>7} {:>8} {:>9} {:>6}", "stage", "top1", "mIoU", "params", "flops", "seed");
            for r in &rows {
                println!(
                    "{:<30} {:>7.2} {:>7.2} {:>8} {:>9} {:>6}",
                    r.stage, r.top1, r.miou, r.params, r.flops, r.seed
                );
            }
            println!("{} rows -> {}", rows.len(), output.display());
        }
        Command::RunAll => {
            let report = run_experiment(cfg, Some(&ctx.out))?;
            for r in &report.rows {
                println!("{:<30} top1 {:>6.2}  mIoU {:>6.2}  params {:>6}  flops {:>8}", r.stage, r.top1, r.miou, r.params, r.flops);
            }
            println!("report -> {}", ctx.path(REPORT_FILE).display());
        }
    }
    Ok(())
}

fn uniform_from(graph: &NetworkGraph, model: &Model, keep: f64) -> Result<PruningPlan> {
    let gb = extract_scaling_factors(graph, &model.backbone, Partition::Backbone)?;
    let gd = extract_scaling_factors(graph, &model.decoder, Partition::Decoder)?;
    Ok(uniform_plan(graph, &gb, &gd, keep)?)
}
