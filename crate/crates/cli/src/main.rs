//! `foba`: synthesise corpora, train, evaluate, run ablations and score
//! prediction rasters.

mod config_io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use foba::dataset::{
    export_corpus, load_corpus, read_palette, read_splits, split, synth_generate, write_splits, CorpusStats, Palette,
    SplitTable, SPLITS_FILE,
};
use foba::metrics::{format_score, MetricReport};
use foba::trainer::ablation::{baseline_vs_full, standard_grid};
use foba::trainer::{evaluate_oracle, evaluate_rasters, run_ablation, EvalOutput, write_predictions, Checkpoint, RunDir, Trainer};
use foba::{BiTemporalSample, ErrorKind, FobaError, Result, RunConfig};

/// Fraction of a corpus used for training when it has no split file.
const TRAIN_FRACTION: f64 = 0.75;

#[derive(Parser)]
#[command(name = "foba", version, about = "Bi-temporal semantic change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the model, the trainer and the synthetic corpus.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// Baseline against the full model.
    Pair,
    /// Every component added in turn, both decoder variants.
    Standard,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and print its class statistics.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; a synthetic corpus is generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run, or the ground truth itself with `--oracle`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory holding a checkpoint.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Corpus directory; defaults to the synthetic corpus of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Score the ground truth as the prediction.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and score each configuration of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; defaults to the synthetic corpus of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pair")]
        grid: Grid,
    },
    /// Score prediction rasters against a corpus, no model needed.
    Metrics {
        /// Directory of `<id>_sem1.png`, `<id>_sem2.png`, `<id>_change.png`.
        #[arg(long)]
        pred: PathBuf,
        /// Corpus directory with the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Palette file; defaults to the corpus palette.
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Also write `metrics.txt` and `metrics.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &FobaError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn headline(r: &MetricReport) -> String {
    format!(
        "F_scd {} | mIoU {} | SeK {} | OA {}",
        format_score(r.f_scd),
        format_score(r.miou),
        format_score(r.sek),
        format_score(r.oa)
    )
}

/// Rounded text and JSON reports plus the unrounded scores and the confusion matrix.
fn write_report(dir: &Path, out: &EvalOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FobaError::io(dir, e))?;
    let r = &out.report;
    let exact = dir.join("metrics_exact.json");
    std::fs::write(&exact, serde_json::to_string_pretty(r)?).map_err(|e| FobaError::io(&exact, e))?;
    let cm = dir.join("confusion.json");
    std::fs::write(&cm, serde_json::to_string(&out.confusion.rows())?).map_err(|e| FobaError::io(&cm, e))?;
    let txt = dir.join("metrics.txt");
    std::fs::write(&txt, r.to_text()).map_err(|e| FobaError::io(&txt, e))?;
    let json = dir.join("metrics.json");
    std::fs::write(&json, serde_json::to_string_pretty(&r.to_json())?).map_err(|e| FobaError::io(&json, e))
}

/// Train/test samples from a corpus directory (its split file if present)
/// or from the synthetic generator.
fn load_splits(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<BiTemporalSample>, Vec<BiTemporalSample>, Palette)> {
    let (corpus, palette, table) = match data {
        Some(dir) => {
            let corpus = load_corpus(dir)?;
            if corpus.is_empty() {
                return Err(FobaError::EmptySplit(format!("no samples under {}", dir.display())));
            }
            let table = if dir.join(SPLITS_FILE).exists() {
                Some(read_splits(dir)?)
            } else {
                None
            };
            (corpus, read_palette(dir)?, table)
        }
        None => (
            synth_generate(&cfg.synth)?,
            Palette::default_for(cfg.synth.n_classes),
            None,
        ),
    };
    if palette.n_classes() != cfg.model.n_classes {
        return Err(FobaError::config(
            "model.n_classes",
            format!("corpus has {} classes", palette.n_classes()),
        ));
    }
    let (train, test) = match table {
        Some(t) => {
            let pick = |name: &str| -> Vec<BiTemporalSample> {
                let ids = t.get(name).cloned().unwrap_or_default();
                corpus.iter().filter(|s| ids.contains(&s.id)).cloned().collect()
            };
            (pick("train"), pick("test"))
        }
        None => split(corpus, [TRAIN_FRACTION, 1.0 - TRAIN_FRACTION], cfg.synth.seed)?,
    };
    Ok((train, test, palette))
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = config_io::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    let samples = synth_generate(&cfg.synth)?;
    let palette = Palette::default_for(cfg.synth.n_classes);
    export_corpus(&common.out, &samples, &palette)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (train, test) = split(ids, [TRAIN_FRACTION, 1.0 - TRAIN_FRACTION], cfg.synth.seed)?;
    let table: SplitTable = [("train".to_string(), train), ("test".to_string(), test)].into();
    write_splits(&common.out, &table)?;
    let names: Vec<String> = palette.entries().iter().map(|e| e.name.clone()).collect();
    print!("{}", CorpusStats::compute(&samples, cfg.synth.n_classes).to_text(&names));
    println!("wrote {}", common.out.display());
    Ok(())
}

fn cmd_train(common: &Common, data: Option<&Path>, resume: bool) -> Result<()> {
    let cfg = config_io::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    let (train, test, palette) = load_splits(&cfg, data)?;
    let mut trainer = if resume {
        let (run, _) = RunDir::open(&common.out)?;
        let mut ck = Checkpoint::load(&run.checkpoint_path())?;
        if ck.config.model != cfg.model {
            return Err(FobaError::config("model", "differs from the checkpoint being resumed"));
        }
        ck.config = cfg.clone();
        Trainer::resume(ck)?
    } else {
        Trainer::new(cfg.clone())?
    };
    let run = RunDir::create(&common.out, &cfg)?;
    let summary = trainer.fit(&train, Some(&run))?;
    println!("trained {} steps", summary.steps);
    if let Some(step) = summary.early_stop_step {
        println!("targets reached at step {}", step);
    }
    let train_eval = trainer.evaluate(&train)?;
    run.write_report("train_metrics", &train_eval.report)?;
    println!("train: {}", headline(&train_eval.report));
    let (scored, name) = if test.is_empty() { (&train_eval, "train") } else { (&trainer.evaluate(&test)?, "test") };
    if !test.is_empty() {
        run.write_report("test_metrics", &scored.report)?;
        println!("test:  {}", headline(&scored.report));
    }
    write_predictions(&run.predictions_dir(), &scored.predictions, &palette)?;
    let first = if name == "test" { &test[0] } else { &train[0] };
    run.write_mask_snapshots(&trainer.model, &trainer.store, first)?;
    run.write_monitor(&trainer.monitor)?;
    if trainer.monitor.violations() > 0 {
        log::warn!("mask monitor recorded {} violations", trainer.monitor.violations());
    }
    println!("wrote {}", run.root().display());
    Ok(())
}

fn cmd_eval(common: &Common, run: Option<&Path>, data: Option<&Path>, which: SplitName, oracle: bool) -> Result<()> {
    let checkpoint = match run {
        Some(dir) => Some(Checkpoint::load(&dir.join(foba::trainer::run::CHECKPOINT_FILE))?),
        None if oracle => None,
        None => return Err(FobaError::config("--run", "a run directory is required unless --oracle is given")),
    };
    let cfg = match &checkpoint {
        Some(ck) => ck.config.clone(),
        None => config_io::resolve(common.config.as_deref(), &common.overrides, common.seed)?,
    };
    let (train, test, palette) = load_splits(&cfg, data)?;
    let samples = match which {
        SplitName::Train => train,
        SplitName::Test => test,
        SplitName::All => train.into_iter().chain(test).collect(),
    };
    if samples.is_empty() {
        return Err(FobaError::EmptySplit("nothing to evaluate".into()));
    }
    let out = match checkpoint {
        Some(ck) if !oracle => Trainer::resume(ck)?.evaluate(&samples)?,
        _ => evaluate_oracle(&samples, cfg.model.n_classes)?,
    };
    write_report(&common.out, &out)?;
    write_predictions(&common.out.join(foba::trainer::run::PREDICTIONS_DIR), &out.predictions, &palette)?;
    println!("{}", headline(&out.report));
    print!("{}", out.report);
    Ok(())
}

fn cmd_ablate(common: &Common, data: Option<&Path>, grid: Grid) -> Result<()> {
    let cfg = config_io::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    let (train, test, _) = load_splits(&cfg, data)?;
    let entries = match grid {
        Grid::Pair => baseline_vs_full(&cfg),
        Grid::Standard => standard_grid(&cfg),
    };
    let table = run_ablation(&entries, &train, &test, Some(&common.out))?;
    let md = table.to_markdown();
    let md_path = common.out.join("ablation.md");
    std::fs::write(&md_path, &md).map_err(|e| FobaError::io(&md_path, e))?;
    let json_path = common.out.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)?).map_err(|e| FobaError::io(&json_path, e))?;
    print!("{}", md);
    Ok(())
}

fn cmd_metrics(pred: &Path, gt: &Path, palette: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let palette = match palette {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => FobaError::MissingFile(p.to_path_buf()),
                _ => FobaError::io(p, e),
            })?;
            Palette::parse(&text)?
        }
        None => read_palette(gt)?,
    };
    let samples = load_corpus(gt)?;
    if samples.is_empty() {
        return Err(FobaError::EmptySplit(format!("no ground truth under {}", gt.display())));
    }
    let result = evaluate_rasters(pred, &samples, &palette)?;
    if let Some(dir) = out {
        write_report(dir, &result)?;
    }
    println!("{}", headline(&result.report));
    print!("{}", result.report);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, data, resume } => cmd_train(common, data.as_deref(), *resume),
        Command::Eval {
            common,
            run,
            data,
            split,
            oracle,
        } => cmd_eval(common, run.as_deref(), data.as_deref(), *split, *oracle),
        Command::Ablate { common, data, grid } => cmd_ablate(common, data.as_deref(), *grid),
        Command::Metrics { pred, gt, palette, out } => cmd_metrics(pred, gt, palette.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
