use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vxlab::datagen::{dump_dataset, generate, DomainKind, DomainSpec};
use vxlab::harness::{
    cam_report, delta_csv, delta_report, domain_splits, evaluate_checkpoint, parse_stages,
    read_summary_mean, run_experiment, sha256_hex, ExperimentConfig, ExperimentKind, ExperimentReport,
};
use vxlab::metrics::{write_predictions_csv, METRIC_KEYS};
use vxlab::nn::{load_checkpoint, save_checkpoint, StageTag};
use vxlab::swft::{fine_tune, swft_sweep, sweep_summary_csv, write_sweep, FreezePlan};
use vxlab::{Error, MiniResNet, Result};

/// Two-step heterogeneous transfer learning on synthetic vascular images.
#[derive(Parser)]
#[command(name = "vxlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "VXLAB_OUT")]
    out: Option<PathBuf>,
    /// Run seed(s); replaces the configured seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Override train.max_epochs.
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump generated datasets as PNG files plus a manifest.
    Gen {
        #[arg(long, default_value = "all")]
        domain: String,
        /// Images per domain (defaults to the configured size).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(long)]
        stage: StageTag,
        /// Checkpoint to start from (required for intermediate; optional for target).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Freeze plan for the target stage.
        #[arg(long, default_value_t = 6)]
        step: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a staged transfer experiment over the configured seeds.
    Transfer {
        #[arg(long)]
        kind: Option<ExperimentKind>,
    },
    /// SWFT sweep, from a checkpoint or from freshly trained upstream stages.
    Swft {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
    },
    /// LayerCAM overlays for target test images.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score a checkpoint on the target test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-metric difference `a - b` of two summary CSVs.
    Report {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if let Some(e) = common.max_epochs {
        cfg.train.max_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_domain(s: &str) -> Result<Vec<DomainKind>> {
    match s {
        "all" => Ok(DomainKind::ALL.to_vec()),
        _ => DomainKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .map(|k| vec![k])
            .ok_or_else(|| Error::Config(format!("unknown domain `{s}`; use source, intermediate, target or all"))),
    }
}

fn print_report(report: &ExperimentReport) {
    println!("{} over {} seed(s)", report.kind, report.runs.len());
    for (k, v) in report.mean_named() {
        println!("  {k:<12} {v:.4}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    let seed = cfg.seeds[0];
    match cli.command {
        Command::Gen { domain, n } => {
            for kind in parse_domain(&domain)? {
                let n = n.unwrap_or(cfg.sizes.get(kind));
                let samples = generate(&DomainSpec::for_kind(kind), n, cfg.data_seed)?;
                let dir = dump_dataset(&samples, &cfg.out_dir.join("data").join(kind.name()))?;
                println!("{}: {n} images -> {}", kind.name(), dir.display());
            }
        }
        Command::Train {
            stage,
            from,
            step,
            output,
        } => {
            let tc = cfg.train_for(seed);
            let start = match &from {
                Some(p) => load_checkpoint(p)?.0,
                None if stage == StageTag::Intermediate => {
                    return Err(Error::Config("--from <source checkpoint> is required for the intermediate stage".into()));
                }
                None => MiniResNet::build(if stage == StageTag::Source { 10 } else { 2 }, seed)?,
            };
            let model = match stage {
                StageTag::Untrained => return Err(Error::Config("stage must be source, intermediate or target".into())),
                StageTag::Target => {
                    let target = domain_splits(DomainKind::Target, cfg.sizes.target, cfg.data_seed)?;
                    let r = fine_tune(&start.to_checkpoint_bytes(), &target, 2, &tc, &FreezePlan::for_step(step)?)?;
                    for (k, v) in r.report().named_values() {
                        println!("  {k:<12} {v:.4}");
                    }
                    r.model
                }
                StageTag::Source | StageTag::Intermediate => {
                    let kind = if stage == StageTag::Source {
                        DomainKind::Source
                    } else {
                        DomainKind::Intermediate
                    };
                    let splits = domain_splits(kind, cfg.sizes.get(kind), cfg.data_seed)?;
                    let mut start = start;
                    let classes = DomainSpec::for_kind(kind).num_classes();
                    if start.num_classes() != classes || stage == StageTag::Intermediate {
                        start.replace_head(classes, seed)?;
                    }
                    let (mut m, h) = vxlab::train::train(&start, &splits.train, &splits.val, &tc, &FreezePlan::all())?;
                    m.meta.stage = stage;
                    m.meta.seed = seed;
                    println!("  best epoch {} val_loss {:.4} val_acc {:.4}", h.best_epoch, h.best().val_loss, h.best().val_acc);
                    m
                }
            };
            let bytes = save_checkpoint(&model, &output)?;
            println!("wrote {} sha256={}", output.display(), sha256_hex(&bytes));
        }
        Command::Transfer { kind } => {
            let mut cfg = cfg;
            if let Some(k) = kind {
                cfg.kind = k;
            }
            if matches!(cfg.kind, ExperimentKind::CamReport) {
                return Err(Error::Config("use `vxlab cam` for cam reports".into()));
            }
            let report = run_experiment(&cfg)?;
            print_report(&report);
            println!("summary: {}", cfg.out_dir.join(cfg.kind.name()).join("summary.csv").display());
        }
        Command::Swft { checkpoint, steps } => {
            let mut cfg = cfg;
            if !steps.is_empty() {
                cfg.swft.steps = steps;
            }
            cfg.validate()?;
            match checkpoint {
                Some(path) => {
                    let (_, bytes) = load_checkpoint(&path)?;
                    let target = domain_splits(DomainKind::Target, cfg.sizes.target, cfg.data_seed)?;
                    let results = swft_sweep(&bytes, &target, &cfg.train_for(seed), &cfg.swft.steps)?;
                    let dir = cfg.seed_dir(ExperimentKind::SwftSweep, seed).join("swft");
                    write_sweep(&results, &dir)?;
                    print!("{}", sweep_summary_csv(&results));
                }
                None => {
                    cfg.kind = ExperimentKind::SwftSweep;
                    let report = run_experiment(&cfg)?;
                    println!("step,epoch,{}", METRIC_KEYS.join(","));
                    for (step, vals, epochs) in &report.sweep_mean {
                        let vals: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
                        println!("{step},{epochs},{}", vals.join(","));
                    }
                }
            }
        }
        Command::Cam {
            checkpoint,
            stages,
            class,
            n,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let stages = if stages.is_empty() {
                cfg.cam.groups()?
            } else {
                parse_stages(&stages)?
            };
            let class = class.unwrap_or(cfg.cam.class);
            let target = domain_splits(DomainKind::Target, cfg.sizes.target, cfg.data_seed)?;
            let n = n.unwrap_or(cfg.cam.samples).min(target.test.len());
            let dir = cfg.seed_dir(ExperimentKind::CamReport, seed).join("cams");
            let rows = cam_report(&model, &target.test[..n], &stages, class, &cfg.train, &dir)?;
            println!("{} overlays -> {}", rows.len(), dir.display());
        }
        Command::Eval { checkpoint } => {
            let eval = evaluate_checkpoint(&cfg, &checkpoint)?;
            for (k, v) in eval.report.named_values() {
                println!("  {k:<12} {v:.4}");
            }
            let path = cfg.out_dir.join("eval").join("predictions.csv");
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_predictions_csv(file, &eval.predictions)?;
        }
        Command::Report { a, b, output } => {
            let deltas = delta_report(&read_summary_mean(&a)?, &read_summary_mean(&b)?)?;
            let text = delta_csv(&deltas);
            match output {
                Some(p) => std::fs::write(&p, text).map_err(|e| io_err(&p, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
