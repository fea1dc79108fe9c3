use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use normgen::config::RunConfig;
use normgen::pipeline::{self, Dimension, DirLock, LM_BASE};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Train a small language model, train sentence classifiers, fine-tune the
/// model to avoid flagged continuations, and measure the effect.
#[derive(Parser)]
#[command(name = "normgen", version)]
struct Cli {
    /// Path to a TOML run configuration (defaults apply when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. --set finetune.rho=2.5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts (overrides the config)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest corpora, write splits and prompt lists
    PrepareData,
    /// Train the base language model on the prepared splits
    TrainLm,
    /// Train a sentence classifier for one label dimension
    TrainClassifier {
        /// Which label dimension: norm or alt
        #[arg(long, default_value = "norm")]
        dimension: String,
    },
    /// Fine-tune a copy of the base model against a classifier
    Finetune {
        #[arg(long, default_value = "norm")]
        dimension: String,
    },
    /// Sample continuations for the evaluation prompts from a checkpoint
    Generate {
        /// Checkpoint name under the run's models directory
        #[arg(long, default_value = LM_BASE)]
        model: String,
        /// Continuations per prompt
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Measure flagged proportions, perplexity, and classifier agreement
    Evaluate {
        #[arg(long, default_value = "norm")]
        dimension: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.display().to_string();
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    Ok((cfg, out_dir))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, out_dir) = resolve_config(&cli)?;
    let _lock = DirLock::acquire(&out_dir)?;
    match &cli.command {
        Command::PrepareData => {
            let files = pipeline::prepare_data(&cfg, &out_dir)?;
            println!("prepared {} artifacts under {}", files.len(), out_dir.display());
        }
        Command::TrainLm => {
            let model = pipeline::train_lm(&cfg, &out_dir)?;
            let test = load_test_split(&out_dir)?;
            let ppl = perplexity_on(&model, &test)?;
            println!("trained {LM_BASE}: test perplexity {ppl:.3}");
        }
        Command::TrainClassifier { dimension } => {
            let dim = Dimension::parse(dimension)?;
            pipeline::train_classifier(&cfg, &out_dir, dim)?;
            println!("trained {}", dim.classifier_name());
        }
        Command::Finetune { dimension } => {
            let dim = Dimension::parse(dimension)?;
            let stats = pipeline::finetune(&cfg, &out_dir, dim)?;
            if let Some(last) = stats.last() {
                println!(
                    "saved {}: final iteration flagged {}/{}",
                    dim.finetuned_name(),
                    last.n_flagged,
                    last.n_continuations
                );
            }
        }
        Command::Generate { model, samples } => {
            for row in pipeline::generate(&cfg, &out_dir, model, *samples)? {
                println!("{row}");
            }
        }
        Command::Evaluate { dimension } => {
            let dim = Dimension::parse(dimension)?;
            let ev = pipeline::evaluate(&cfg, &out_dir, dim)?;
            let r = &ev.report;
            println!(
                "p={:.4} p_hat={:.4} decrease={:.1}% ppl {:.3} -> {:.3}",
                r.p,
                r.p_hat.unwrap_or(f64::NAN),
                r.pct_decrease.unwrap_or(f64::NAN) * 100.0,
                r.ppl_before,
                r.ppl_after
            );
        }
    }
    Ok(())
}

fn load_test_split(out_dir: &Path) -> Result<Vec<Vec<usize>>> {
    // small convenience for the post-training summary line
    let sents = normgen::corpus::load_corpus(
        &out_dir.join("data").join("lm_test.jsonl"),
        normgen::corpus::CorpusFormat::Jsonl,
    )?;
    let (model, _) = normgen::lm::LmModel::load(&out_dir.join("models").join(LM_BASE))?;
    Ok(sents
        .iter()
        .map(|s| {
            let mut ids = normgen::corpus::tokenize(&s.text, &model.vocab).0;
            ids.push(normgen::corpus::EOS);
            ids
        })
        .collect())
}

fn perplexity_on(model: &normgen::lm::LmModel, seqs: &[Vec<usize>]) -> Result<f64> {
    model.perplexity(seqs).map_err(|e| anyhow!(e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
