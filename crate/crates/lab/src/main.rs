use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splitlab::config::ExperimentConfig;
use splitlab::corpus::{generate_sensi_corpora, SensiTemplateSpec};
use splitlab::experiment::{self, RunOptions};
use splitlab::report::{read_csv, read_summary, Report};
use splitlab::{LabError, Result};
use splitlab_core::splitsim::{read_log, write_log, UtilityPoint};

#[derive(Parser, Debug)]
#[command(name = "splitlab", version, about = "Split-learning fine-tuning and reconstruction-attack lab")]
struct Cli {
    /// Experiment configuration (JSON, version 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent sweep points.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Pretrain (or load) the public model and save it as `pretrained.json`.
    Pretrain,
    /// Write marked, replaced and masked corpora from a template spec.
    GenCorpus {
        /// Built-in template family when no `--config` spec is given.
        #[arg(long, default_value = "news")]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// File stem for the three outputs.
        #[arg(long, default_value = "sensi")]
        stem: String,
    },
    /// Split fine-tuning; writes the client model, transcript log and utility trace.
    SplitFt,
    /// Train the configured inverter on the auxiliary corpus.
    TrainInverter,
    /// Attack a transcript log and score it.
    Attack {
        /// Transcript log; defaults to running the fine-tuning in-process.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Utility trace written by `split-ft`, merged into the rows.
        #[arg(long)]
        utility: Option<PathBuf>,
        /// Inverter checkpoint; defaults to the configured one or training a new one.
        #[arg(long)]
        inverter: Option<PathBuf>,
    },
    /// Full experiment with sweeps.
    Run,
    /// Rebuild the summary from an existing `report.csv` and print it.
    Report {
        /// Directory holding `report.csv` (defaults to `--out`).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| LabError::Config("this command needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions {
        jobs: cli.jobs,
        cache_dir: Some(cli.out.join("cache")),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn print_summary(report: &Report) {
    println!("{:>5} {:>6} {:>12} {:>9} {:>9} {:>3}", "point", "stage", "metric", "mean", "std", "n");
    for e in &report.summary.metrics {
        let std = e.std.map_or("-".to_string(), |s| format!("{s:.4}"));
        println!("{:>5} {:>6} {:>12} {:>9.4} {:>9} {:>3}", e.sweep_id, e.stage, e.metric, e.mean, std, e.n);
    }
    for f in &report.summary.failures {
        println!("point {} seed {} failed: {}", f.sweep_id, f.seed, f.error);
    }
}

fn run(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    let opts = options(cli);
    match &cli.cmd {
        Cmd::Pretrain => {
            let cfg = load_config(cli)?;
            let m = experiment::pretrained(&cfg, &opts)?;
            let p = cli.out.join("pretrained.json");
            m.save(&p)?;
            println!("{}", p.display());
        }
        Cmd::GenCorpus { kind, count, stem } => {
            let spec = match &cli.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => {
                    let seed = cli.seed.unwrap_or(0);
                    match kind.as_str() {
                        "news" => SensiTemplateSpec::news(*count, seed),
                        "code" => SensiTemplateSpec::code(*count, seed),
                        k => return Err(LabError::Config(format!("unknown corpus kind {k:?}"))),
                    }
                }
            };
            let c = generate_sensi_corpora(&spec)?;
            c.write(&cli.out, stem)?;
            println!("{} lines -> {}/{stem}.{{marked,replaced,masked}}.txt", c.marked.len(), cli.out.display());
        }
        Cmd::SplitFt => {
            let cfg = load_config(cli)?;
            let seed = first_seed(&cfg);
            let ft = experiment::finetuned(&cfg, seed, &opts)?;
            ft.model.save(&cli.out.join("finetuned.json"))?;
            write_log(&cli.out.join("transcripts.jsonl"), &ft.transcripts)?;
            write_json(&cli.out.join("utility.json"), &ft.utility)?;
            println!("{} transcripts recorded", ft.transcripts.len());
        }
        Cmd::TrainInverter => {
            let cfg = load_config(cli)?;
            let inv = experiment::inverter(&cfg, first_seed(&cfg), &opts)?;
            let p = cli.out.join("inverter.json");
            inv.save(&p)?;
            println!("{}", p.display());
        }
        Cmd::Attack { log, utility, inverter } => {
            let mut cfg = load_config(cli)?;
            if let Some(p) = inverter {
                cfg.inverter.checkpoint = Some(p.clone());
            }
            let seed = first_seed(&cfg);
            let (transcripts, util) = match log {
                Some(p) => {
                    let u: Vec<UtilityPoint> = match utility {
                        Some(u) => serde_json::from_str(&std::fs::read_to_string(u)?)?,
                        None => Vec::new(),
                    };
                    (read_log(p)?, u)
                }
                None => {
                    let ft = experiment::finetuned(&cfg, seed, &opts)?;
                    (ft.transcripts.clone(), ft.utility.clone())
                }
            };
            let inv = experiment::inverter(&cfg, seed, &opts)?;
            let rep = experiment::replica(&cfg, &opts)?;
            let spans = if cfg.attack.spans_only { Some(experiment::finetune_spans(&cfg)?) } else { None };
            let rows = experiment::attack_transcripts(
                &cfg,
                0,
                seed,
                &transcripts,
                &util,
                inv.as_ref(),
                &rep,
                spans.as_deref().map(Vec::as_slice),
            )?;
            let report = Report::new(rows, Some(experiment::config_value(&cfg)), Vec::new())?;
            report.write(&cli.out)?;
            print_summary(&report);
        }
        Cmd::Run => {
            let cfg = load_config(cli)?;
            let report = experiment::run_experiment(&cfg, &opts)?;
            report.write(&cli.out)?;
            print_summary(&report);
        }
        Cmd::Report { dir } => {
            let dir = dir.as_ref().unwrap_or(&cli.out);
            let rows = read_csv(&dir.join("report.csv"))?;
            let old = read_summary(&dir.join("summary.json")).ok();
            let report = Report::new(
                rows,
                old.as_ref().and_then(|s| s.config.clone()),
                old.map(|s| s.points).unwrap_or_default(),
            )?;
            report.write(dir)?;
            print_summary(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
