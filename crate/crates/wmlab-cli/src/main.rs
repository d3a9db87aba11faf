//! Command-line front end for the watermarking laboratory: model
//! training, watermarked generation, detection, threshold calibration,
//! attack experiments, the noise defense evaluation, closed-form
//! checks, and the hosted detection service.

mod commands;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{GreenSchemeArg, ModelKindArg};
use experiment::run_experiment;
use wmlab::error::Result;

#[derive(Parser)]
#[command(name = "wmlab", version, about = "Watermark attack/defense laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or synthesize a language model plus its vocabulary.
    TrainLm {
        #[command(subcommand)]
        kind: TrainKind,
    },
    /// Generate watermarked text with a random key from a keyset.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        model_kind: ModelKindArg,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        keyset: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 100)]
        length: usize,
        #[arg(long, default_value = "0101010101010101010101010101010101010101010101010101010101010101")]
        seed_hex: String,
    },
    /// Score a text against every key in a keyset.
    Detect {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        keyset: PathBuf,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Calibrate per-keyset detection thresholds on model-generated nulls.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        model_kind: ModelKindArg,
        /// Existing keyset file to calibrate.
        #[arg(long)]
        keyset: Option<PathBuf>,
        /// JSON spec ({"scheme": .., "keys": .., "master_seed_hex": ..})
        /// to derive a fresh keyset from.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        target_fpr: f64,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 110)]
        length: usize,
        #[arg(long, default_value = "0202020202020202020202020202020202020202020202020202020202020202")]
        seed_hex: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an attack experiment described by a JSON config.
    Attack {
        #[command(subcommand)]
        kind: AttackCommand,
    },
    /// Evaluate the noised-detector defense against distribution spoofing.
    DefendEval {
        #[arg(long, value_enum, default_value = "kgw")]
        scheme: GreenSchemeArg,
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 120)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        top_l: usize,
        #[arg(long, default_value_t = 256)]
        vocab_size: usize,
        #[arg(long, default_value_t = 10.0)]
        gen_concentration: f64,
        #[arg(long, default_value_t = 2.0)]
        local_concentration: f64,
        #[arg(long, default_value = "0303030303030303030303030303030303030303030303030303030303030303")]
        seed_hex: String,
    },
    /// Check the closed-form detection bounds against simulation.
    VerifyTheorems {
        #[arg(long, default_value_t = 100_000)]
        mc_trials: usize,
        #[arg(long, default_value = "0404040404040404040404040404040404040404040404040404040404040404")]
        seed_hex: String,
    },
    /// Start the hosted detection/generation HTTP service.
    Serve {
        /// Config path (falls back to WMLAB_SERVICE_CONFIG, then service.json).
        config: Option<String>,
    },
    /// Summarize a saved experiment report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainKind {
    /// Fit an n-gram model to a plain-text corpus.
    Corpus {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2000)]
        vocab_cap: usize,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_vocab: PathBuf,
    },
    /// Build a seeded random model with a synthetic vocabulary.
    Synthetic {
        #[arg(long, default_value_t = 256)]
        vocab_size: usize,
        #[arg(long, default_value_t = 10.0)]
        concentration: f64,
        #[arg(long, default_value = "0505050505050505050505050505050505050505050505050505050505050505")]
        seed_hex: String,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_vocab: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the configured master seed.
    #[arg(long)]
    seed_hex: Option<String>,
    /// Override the CSV output path.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Override the JSON output path.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Append tokens from a fixed lexicon (or at random) to dilute the score.
    Piggyback(ExperimentArgs),
    /// Remove the watermark by diffing generations under multiple keys.
    Multikey(ExperimentArgs),
    /// Remove the watermark using a detection API and top-L continuations.
    ApiRemoval(ExperimentArgs),
    /// Forge a watermarked-looking text using a detection API.
    ApiSpoof(ExperimentArgs),
    /// Estimate the favored-token list from watermarked samples.
    Steal(ExperimentArgs),
}

impl AttackCommand {
    fn parts(&self) -> (&'static str, &ExperimentArgs) {
        match self {
            AttackCommand::Piggyback(a) => ("piggyback", a),
            AttackCommand::Multikey(a) => ("multikey", a),
            AttackCommand::ApiRemoval(a) => ("api-removal", a),
            AttackCommand::ApiSpoof(a) => ("api-spoof", a),
            AttackCommand::Steal(a) => ("steal", a),
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::TrainLm { kind } => {
            match kind {
                TrainKind::Corpus {
                    corpus,
                    vocab_cap,
                    order,
                    alpha,
                    out_model,
                    out_vocab,
                } => commands::train_lm_corpus(
                    &corpus, vocab_cap, order, alpha, &out_model, &out_vocab,
                )?,
                TrainKind::Synthetic {
                    vocab_size,
                    concentration,
                    seed_hex,
                    out_model,
                    out_vocab,
                } => commands::train_lm_synthetic(
                    vocab_size,
                    concentration,
                    &seed_hex,
                    &out_model,
                    &out_vocab,
                )?,
            }
            Ok(0)
        }
        Command::Generate {
            model,
            model_kind,
            vocab,
            keyset,
            prompt,
            length,
            seed_hex,
        } => {
            commands::generate(
                model_kind, &model, &vocab, &keyset, &prompt, length, &seed_hex,
            )?;
            Ok(0)
        }
        Command::Detect {
            vocab,
            keyset,
            text,
            input,
        } => {
            commands::detect(&vocab, &keyset, text, input)?;
            Ok(0)
        }
        Command::Calibrate {
            model,
            model_kind,
            keyset,
            spec,
            target_fpr,
            samples,
            length,
            seed_hex,
            out,
        } => {
            commands::calibrate(
                model_kind, &model, keyset, spec, target_fpr, samples, length, &seed_hex, &out,
            )?;
            Ok(0)
        }
        Command::Attack { kind } => {
            let (name, args) = kind.parts();
            let mut config = experiment::ExperimentConfig::load(&args.config)?;
            if config.attack.kind_name() != name {
                return Err(wmlab::error::Error::InvalidParameter(format!(
                    "config describes a {} attack but the {name} subcommand was invoked",
                    config.attack.kind_name()
                )));
            }
            config.apply_overrides(
                args.trials,
                args.seed_hex.clone(),
                args.out_csv.clone(),
                args.out_json.clone(),
            );
            config.validate()?;
            let outcome = run_experiment(&config)?;
            let rendered = experiment::write_outputs(&config, &outcome)?;
            print!("{rendered}");
            if outcome.partial() {
                eprintln!(
                    "warning: {} of {} trials failed; see {}",
                    outcome.failures.len(),
                    config.trials,
                    config.out_json.display()
                );
                return Ok(1);
            }
            Ok(0)
        }
        Command::DefendEval {
            scheme,
            sigma,
            trials,
            length,
            top_l,
            vocab_size,
            gen_concentration,
            local_concentration,
            seed_hex,
        } => {
            commands::defend_eval(
                scheme,
                sigma,
                trials,
                length,
                top_l,
                vocab_size,
                gen_concentration,
                local_concentration,
                &seed_hex,
            )?;
            Ok(0)
        }
        Command::VerifyTheorems {
            mc_trials,
            seed_hex,
        } => {
            let all_pass = commands::verify_theorems(mc_trials, &seed_hex)?;
            Ok(if all_pass { 0 } else { 1 })
        }
        Command::Serve { config } => {
            commands::serve(config)?;
            Ok(0)
        }
        Command::Report { input, json } => {
            commands::report(&input, json)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
