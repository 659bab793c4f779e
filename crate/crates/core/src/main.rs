use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use chaos_ssl::chaos::MapKind;
use chaos_ssl::harness::pipeline::{self, RunReport};
use chaos_ssl::harness::verify::run_self_checks;
use chaos_ssl::harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "chaos-ssl", version, about = "Chaotic-map contrastive pre-training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic texture dataset.
    GenData(Common),
    /// Stage 1: contrastive pre-training of the tiny encoder.
    Pretrain(Common),
    /// Stage 2: supervised fine-tuning of both backbones.
    Finetune(Common),
    /// Stage 3: attention-gated fusion of the fine-tuned backbones.
    Fuse(Common),
    /// Score every trained model on the test split and write metrics.json.
    Evaluate(Common),
    /// All of the above in order.
    RunAll(Common),
    /// Run the built-in oracle and property checks.
    Verify,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["logistic", "tent", "sine"])]
    map: Option<String>,
    #[arg(long)]
    ssl_epochs: Option<usize>,
    /// Run directory for data, checkpoints and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(map) = &self.map {
            cfg.map.kind = map.parse::<MapKind>()?;
            cfg.map.param = None;
        }
        if let Some(epochs) = self.ssl_epochs {
            cfg.pretrain.epochs = epochs;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summarize(report: &RunReport) {
    let line = |name: &str, acc: f64, f1: f64| println!("{name:<12} accuracy {acc:.4}  macro-F1 {f1:.4}");
    line("tiny (ssl)", report.tiny_ssl.test.accuracy, report.tiny_ssl.test.macro_f1);
    if let Some(b) = &report.tiny_random {
        line("tiny (rand)", b.test.accuracy, b.test.macro_f1);
    }
    line("large", report.large.test.accuracy, report.large.test.macro_f1);
    line("fusion", report.fusion.test.accuracy, report.fusion.test.macro_f1);
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let (train, test) = pipeline::stage_gen_data(&cfg)?;
            println!("wrote {} train / {} test images to {}", train.len(), test.len(), cfg.out_dir.display());
        }
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            pipeline::stage_pretrain(&cfg)?;
            println!("pre-trained encoder saved under {}", cfg.out_dir.display());
        }
        Command::Finetune(c) => {
            let cfg = c.resolve()?;
            pipeline::stage_finetune(&cfg)?;
            println!("fine-tuned checkpoints saved under {}", cfg.out_dir.display());
        }
        Command::Fuse(c) => {
            let cfg = c.resolve()?;
            pipeline::stage_fuse(&cfg)?;
            println!("fusion checkpoint saved under {}", cfg.out_dir.display());
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            summarize(&pipeline::stage_evaluate(&cfg)?);
        }
        Command::RunAll(c) => {
            let cfg = c.resolve()?;
            summarize(&pipeline::run_pipeline(&cfg)?);
        }
        Command::Verify => {
            let outcomes = run_self_checks();
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            anyhow::ensure!(failed == 0, "{failed} self-check(s) failed");
        }
    }
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
