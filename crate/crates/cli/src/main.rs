use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use scriptbridge_core::evalmetrics::MetricsReport;
use scriptbridge_core::pipeline::{self, Layout};
use scriptbridge_core::synthgen::Split;
use scriptbridge_core::RunConfig;

/// Cross-script handwritten word retrieval: data generation, training,
/// evaluation and quantization.
#[derive(Parser)]
#[command(name = "scriptbridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root; overrides `output_dir` from the config.
    #[arg(long, env = "SCRIPTBRIDGE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArg {
    /// Split to evaluate; defaults to `eval.split` from the config.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage 1 and, unless disabled, stage 2.
    Train {
        #[command(flatten)]
        common: Common,
        /// Init and sampler seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after the first stage.
        #[arg(long)]
        no_finetune: bool,
    },
    /// Within-language and mixed-gallery retrieval metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Retrieval across every ordered language pair.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Embedding geometry before and after training.
    Characterize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Int8 quantization, quantized evaluation and the cost model.
    Quantize {
        #[command(flatten)]
        common: Common,
    },
    /// Objective × fine-tuning ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the configuration.
    Config {
        #[command(flatten)]
        common: Common,
        /// Print the built-in defaults instead of the loaded config.
        #[arg(long)]
        defaults: bool,
    },
}

fn load(common: &Common) -> Result<(RunConfig, Layout)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let layout = Layout::new(cfg.output_dir.clone());
    Ok((cfg, layout))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, seed } => {
            let (mut cfg, layout) = load(&common)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            let m = pipeline::gen(&cfg, &layout).context("gen")?;
            layout.stamp("gen")?;
            println!(
                "{} samples written to {} (checksum {})",
                m.records.len(),
                layout.dataset_dir().display(),
                m.header.checksum
            );
        }
        Command::Train {
            common,
            seed,
            no_finetune,
        } => {
            let (mut cfg, layout) = load(&common)?;
            if let Some(s) = seed {
                cfg.train.init_seed = s;
                cfg.train.sampler.seed = s;
            }
            if no_finetune {
                cfg.train.finetune_enabled = false;
            }
            let r = pipeline::train(&cfg, &layout).context("train")?;
            layout.stamp("train")?;
            for e in &r.history.epochs {
                println!(
                    "{} epoch {:>2}  loss {:.4}  tau {:.4}  id_eval acc@1 {}",
                    e.stage.as_str(),
                    e.epoch + 1,
                    e.mean_loss,
                    e.tau,
                    e.eval_acc1.map_or("-".into(), |a| format!("{a:.3}"))
                );
            }
            for c in &r.checkpoints {
                println!("wrote {}", c.display());
            }
        }
        Command::Eval { common, split } => {
            let (cfg, layout) = load(&common)?;
            let split = split.split.unwrap_or(cfg.eval.split);
            let r = pipeline::evaluate(&cfg, &layout, split).context("eval")?;
            layout.stamp("eval")?;
            print_report(&r);
        }
        Command::CrossEval { common, split } => {
            let (cfg, layout) = load(&common)?;
            let split = split.split.unwrap_or(cfg.eval.split);
            let r = pipeline::cross_eval(&cfg, &layout, split).context("cross-eval")?;
            layout.stamp("cross-eval")?;
            print_report(&r);
        }
        Command::Characterize { common, split } => {
            let (cfg, layout) = load(&common)?;
            let split = split.split.unwrap_or(cfg.eval.split);
            let g = pipeline::characterize(&cfg, &layout, split).context("characterize")?;
            layout.stamp("characterize")?;
            println!("split {split}");
            println!(
                "init     r_intra {:.4}  d_inter {:.4}  rd_ratio {:.4}",
                g.init.r_intra, g.init.d_inter, g.init.rd_ratio
            );
            println!(
                "trained  r_intra {:.4}  d_inter {:.4}  rd_ratio {:.4}",
                g.trained.r_intra, g.trained.d_inter, g.trained.rd_ratio
            );
            println!(
                "median cosine  positive {:.4}  negative {:.4}",
                g.median_positive_cosine, g.median_negative_cosine
            );
        }
        Command::Quantize { common } => {
            let (cfg, layout) = load(&common)?;
            let q = pipeline::quantize(&cfg, &layout).context("quantize")?;
            layout.stamp("quantize")?;
            println!(
                "weights  f32 {} B  int8 {} B",
                q.weight_payload_f32, q.weight_payload_i8
            );
            println!(
                "cosine to float  mean {:.4}  min {:.4}",
                q.mean_cosine, q.min_cosine
            );
            println!(
                "acc@1  float {:.4}  int8 {:.4}  drop {:.4}",
                q.float_acc1, q.quant_acc1, q.acc1_drop
            );
            println!(
                "modeled f32/int8  latency {:.1}x  energy {:.1}x  ({} MACs)",
                q.cost.latency_ratio_f32_over_i8,
                q.cost.energy_ratio_f32_over_i8,
                q.cost.total_macs
            );
        }
        Command::Ablate { common } => {
            let (cfg, layout) = load(&common)?;
            let t = pipeline::ablate(&cfg, &layout).context("ablate")?;
            layout.stamp("ablate")?;
            println!(
                "{:<14} {:>3}  {:>8}  {:>8}",
                "objective", "ft", "within", "cross"
            );
            for r in &t.rows {
                println!(
                    "{:<14} {:>3}  {:>8.4}  {:>8.4}",
                    r.objective,
                    if r.finetune { "on" } else { "off" },
                    r.mean_within_acc1,
                    r.mean_cross_acc1
                );
            }
            println!("random baseline {:.4}", t.random_baseline);
        }
        Command::Config { common, defaults } => {
            let cfg = if defaults {
                RunConfig::default()
            } else {
                load(&common)?.0
            };
            print!("{}", cfg.to_json()?);
        }
    }
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!("split {}  checkpoint {}", r.meta.split, r.meta.checkpoint);
    println!(
        "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "protocol", "acc@1", "acc@3", "acc@5", "mrr", "nes"
    );
    for p in &r.protocols {
        println!(
            "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            p.protocol.to_string(),
            p.acc1,
            p.acc3,
            p.acc5,
            p.mrr,
            p.nes
        );
    }
}

/// The error and its causes on one line, skipping causes whose text the
/// previous message already includes.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
