//! Implementations of the non-experiment subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use wmlab::bounds::{thm2_monte_carlo, thm2_prob, thm3_enumerate, thm3_prob};
use wmlab::dp::{dp_defense_eval, DpMode, DpParams};
use wmlab::error::{Error, Result};
use wmlab::keyring::{
    calibrate_thresholds, detect_multi, embed_with_keyset, load_keyset, save_keyset, KeySet,
    SchemeInstance,
};
use wmlab::lm::{generate as lm_generate, train_markov, LanguageModel, MarkovModel, SyntheticModel};
use wmlab::prf::{prf, UniformStream, WatermarkKey};
use wmlab::report::{render_summary, summarize, Report};
use wmlab::vocab::{TokenId, Vocabulary};
use wmlab::watermark::kgw::{KgwParams, KgwScheme};
use wmlab::watermark::unigram::{UnigramParams, UnigramScheme};

use crate::experiment::{seed_from_hex, SchemeConfig};

/// Standalone keyset description for `calibrate`: the same scheme block
/// as an experiment config, a key count, and the seed the keys derive
/// from.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeysetSpec {
    pub scheme: SchemeConfig,
    pub keys: usize,
    pub master_seed_hex: String,
}

impl KeysetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidParameter(format!("cannot read keyset spec {}: {e}", path.display()))
        })?;
        let spec: Self = serde_json::from_str(&raw).map_err(|e| {
            Error::InvalidParameter(format!("malformed keyset spec {}: {e}", path.display()))
        })?;
        if spec.keys < 1 {
            return Err(Error::InvalidParameter("keyset spec needs at least one key".into()));
        }
        Ok(spec)
    }

    pub fn build(&self, vocab_size: usize) -> Result<KeySet> {
        let shim = crate::experiment::ExperimentConfig {
            experiment: "keyset".into(),
            scheme: self.scheme.clone(),
            keys: self.keys,
            model: crate::experiment::ModelSpec::Toy,
            attack: crate::experiment::AttackSpec::Multikey { queries: 1 },
            trials: 0,
            length: 1,
            master_seed_hex: self.master_seed_hex.clone(),
            out_csv: PathBuf::new(),
            out_json: PathBuf::new(),
        };
        shim.build_keyset(vocab_size)
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum ModelKindArg {
    Markov,
    Synthetic,
}

pub fn load_model(kind: ModelKindArg, path: &Path) -> Result<Box<dyn LanguageModel>> {
    match kind {
        ModelKindArg::Markov => Ok(Box::new(MarkovModel::load(path)?)),
        ModelKindArg::Synthetic => Ok(Box::new(SyntheticModel::load(path)?)),
    }
}

pub fn train_lm_corpus(
    corpus: &Path,
    vocab_cap: usize,
    order: usize,
    alpha: f64,
    out_model: &Path,
    out_vocab: &Path,
) -> Result<()> {
    let text = std::fs::read_to_string(corpus).map_err(|e| {
        Error::InvalidParameter(format!("cannot read corpus {}: {e}", corpus.display()))
    })?;
    let vocab = Vocabulary::from_corpus(&text, vocab_cap)?;
    let tokens = vocab.tokenize(&text);
    let model = train_markov(&tokens, vocab.size(), order, alpha)?;
    vocab.save(out_vocab)?;
    model.save(out_model)?;
    println!(
        "trained order-{order} model: vocabulary {}, {} training tokens",
        vocab.size(),
        tokens.len()
    );
    Ok(())
}

pub fn train_lm_synthetic(
    vocab_size: usize,
    concentration: f64,
    seed_hex: &str,
    out_model: &Path,
    out_vocab: &Path,
) -> Result<()> {
    let vocab = Vocabulary::synthetic(vocab_size)?;
    let model = SyntheticModel::new(seed_from_hex(seed_hex)?, concentration, vocab_size)?;
    vocab.save(out_vocab)?;
    model.save(out_model)?;
    println!("wrote synthetic model over {vocab_size} tokens");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    model_kind: ModelKindArg,
    model_path: &Path,
    vocab_path: &Path,
    keyset_path: &Path,
    prompt: &str,
    length: usize,
    seed_hex: &str,
) -> Result<()> {
    let model = load_model(model_kind, model_path)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let (keyset, _) = load_keyset(keyset_path)?;
    check_sizes(model.vocab_size(), vocab.size(), Some(keyset.vocab_size()))?;
    let prompt_tokens = vocab.tokenize(prompt);
    let mut stream = UniformStream::new(prf(
        &WatermarkKey::from_hex(seed_hex)?,
        b"cli-generate",
    ));
    let (tokens, key_index) =
        embed_with_keyset(&*model, &prompt_tokens, &keyset, length, &mut stream)?;
    eprintln!("embedded with key {key_index} of {}", keyset.len());
    println!("{}", vocab.render(&tokens));
    Ok(())
}

pub fn detect(
    vocab_path: &Path,
    keyset_path: &Path,
    text: Option<String>,
    input: Option<PathBuf>,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let (keyset, table) = load_keyset(keyset_path)?;
    let table = table.unwrap_or_else(|| wmlab_service::default_threshold_table(&keyset));
    let text = match (text, input) {
        (Some(t), None) => t,
        (None, Some(path)) => std::fs::read_to_string(&path).map_err(|e| {
            Error::InvalidParameter(format!("cannot read input {}: {e}", path.display()))
        })?,
        _ => {
            return Err(Error::InvalidParameter(
                "provide exactly one of --text and --input".into(),
            ));
        }
    };
    let tokens = vocab.tokenize(&text);
    let report = detect_multi(&tokens, &keyset, &table)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    model_kind: ModelKindArg,
    model_path: &Path,
    keyset_path: Option<PathBuf>,
    spec_path: Option<PathBuf>,
    target_fpr: f64,
    samples: usize,
    length: usize,
    seed_hex: &str,
    out: &Path,
) -> Result<()> {
    let model = load_model(model_kind, model_path)?;
    let keyset = match (keyset_path, spec_path) {
        (Some(path), None) => load_keyset(&path)?.0,
        (None, Some(path)) => KeysetSpec::load(&path)?.build(model.vocab_size())?,
        _ => {
            return Err(Error::InvalidParameter(
                "provide exactly one of --keyset and --spec".into(),
            ));
        }
    };
    check_sizes(model.vocab_size(), keyset.vocab_size(), None)?;
    let master = WatermarkKey::from_hex(seed_hex)?;
    let vocab_size = model.vocab_size();
    let mut counter = 0usize;
    let mut sampler = || {
        let mut message = b"calibration-null".to_vec();
        message.extend_from_slice(&(counter as u64).to_le_bytes());
        counter += 1;
        let mut stream = UniformStream::new(prf(&master, &message));
        let mut x = vec![
            stream.next_index(vocab_size) as TokenId,
            stream.next_index(vocab_size) as TokenId,
        ];
        let body = lm_generate(&*model, &x, length, &mut stream)?;
        x.extend(body);
        Ok(x)
    };
    let table = calibrate_thresholds(&keyset, &mut sampler, target_fpr, samples)?;
    save_keyset(out, &keyset, Some(&table))?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum GreenSchemeArg {
    Kgw,
    Unigram,
}

#[allow(clippy::too_many_arguments)]
pub fn defend_eval(
    scheme: GreenSchemeArg,
    sigma: f64,
    trials: usize,
    length: usize,
    top_l: usize,
    vocab_size: usize,
    gen_concentration: f64,
    local_concentration: f64,
    seed_hex: &str,
) -> Result<()> {
    let master = WatermarkKey::from_hex(seed_hex)?;
    let gen_model =
        SyntheticModel::new(prf(&master, b"generation-model"), gen_concentration, vocab_size)?;
    let local_model =
        SyntheticModel::new(prf(&master, b"attacker-model"), local_concentration, vocab_size)?;
    let scheme_key =
        WatermarkKey::from_bytes(prf(&master, b"scheme-key").as_bytes()).expect("32-byte seed");
    let instance = match scheme {
        GreenSchemeArg::Kgw => SchemeInstance::Kgw(
            KgwScheme::new(scheme_key, KgwParams::default(), vocab_size)?.with_cache(),
        ),
        GreenSchemeArg::Unigram => SchemeInstance::Unigram(UnigramScheme::new(
            scheme_key,
            UnigramParams::default(),
            vocab_size,
        )?),
    };
    let noise_key =
        WatermarkKey::from_bytes(prf(&master, b"noise-key").as_bytes()).expect("32-byte seed");
    let params = DpParams::new(sigma, noise_key, DpMode::ZScore)?;
    let mut stream = UniformStream::new(prf(&master, b"defend-eval"));
    let summary = dp_defense_eval(
        &instance,
        &gen_model,
        &local_model,
        &params,
        trials,
        length,
        top_l,
        &mut stream,
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Runs the closed-form checks; returns false when any check fails.
pub fn verify_theorems(mc_trials: usize, seed_hex: &str) -> Result<bool> {
    let mut all_pass = true;
    let mut check = |name: &str, detail: String, pass: bool| {
        all_pass &= pass;
        println!("{}  {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };

    let closed = thm2_prob(13, 0.5, 3)?;
    check(
        "removal-probability closed form",
        format!("p(n=13, gamma=0.5, c=3) = {closed:.6}, expected within [0.70, 0.72]"),
        (0.70..=0.72).contains(&closed),
    );

    let mut stream =
        UniformStream::new(prf(&WatermarkKey::from_hex(seed_hex)?, b"verify-theorems"));
    let mc = thm2_monte_carlo(13, 0.5, 3, mc_trials, &mut stream)?;
    check(
        "Monte-Carlo agreement",
        format!("estimate {mc:.6} vs closed form {closed:.6} at {mc_trials} trials"),
        (mc - closed).abs() <= 0.02,
    );

    let mut worst = 0.0f64;
    for n in 1..=12 {
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let gap = (thm3_prob(n, p)? - thm3_enumerate(n, p)?).abs();
            worst = worst.max(gap);
        }
    }
    check(
        "all-keys-hit probability vs exhaustive enumeration",
        format!("worst gap {worst:.3e} over n <= 12, five p values"),
        worst <= 1e-12,
    );

    Ok(all_pass)
}

pub fn report(input: &Path, json_out: Option<PathBuf>) -> Result<()> {
    let raw = std::fs::read_to_string(input).map_err(|e| {
        Error::InvalidParameter(format!("cannot read report {}: {e}", input.display()))
    })?;
    let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| {
        Error::InvalidParameter(format!("malformed report {}: {e}", input.display()))
    })?;
    let report_value = value.get("report").cloned().unwrap_or(value);
    let report: Report = serde_json::from_value(report_value).map_err(|e| {
        Error::InvalidParameter(format!("not a report document: {e}"))
    })?;
    let summary = summarize(&report)?;
    if let Some(path) = json_out {
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    }
    print!("{}", render_summary(&summary));
    Ok(())
}

pub fn serve(config_arg: Option<String>) -> Result<()> {
    use wmlab_service::config::{resolve_config_path, ServiceConfig};
    let path = resolve_config_path(config_arg);
    let config = ServiceConfig::load(&path)?;
    let state = Arc::new(wmlab_service::ServiceState::from_config(&config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Error::Io)?;
    runtime.block_on(wmlab_service::run_with_state(state, &config.listen))
}

fn check_sizes(model: usize, vocab: usize, keyset: Option<usize>) -> Result<()> {
    if model != vocab {
        return Err(Error::InvalidParameter(format!(
            "model vocabulary {model} does not match vocabulary file {vocab}"
        )));
    }
    if let Some(k) = keyset {
        if k != model {
            return Err(Error::InvalidParameter(format!(
                "keyset vocabulary {k} does not match model vocabulary {model}"
            )));
        }
    }
    Ok(())
}
