//! Experiment configuration and the trial runner behind `wmlab attack`.
//!
//! A config file fully determines an experiment; per-trial randomness is
//! derived from the master seed by counter, so a config always reproduces
//! the same CSV byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use wmlab::attack::api::{api_removal, api_spoof};
use wmlab::attack::multikey::multikey_removal;
use wmlab::attack::piggyback::{flagged_fraction, insert_random_tokens, piggyback_insert};
use wmlab::attack::steal::{greenlist_precision, steal_greenlist};
use wmlab::attack::{AttackOutcome, KeysetOracle, Lexicon};
use wmlab::error::{Error, Result};
use wmlab::keyring::{
    detect_multi, embed_with_keyset, ExpInstance, KeySet, SchemeInstance, ThresholdTable,
};
use wmlab::lm::toy::standard_model;
use wmlab::lm::{pseudo_perplexity, LanguageModel, MarkovModel, SyntheticModel};
use wmlab::prf::{prf, Seed, UniformStream, WatermarkKey};
use wmlab::report::{summarize, AttackGoal, Report, ReportRow, Summary};
use wmlab::vocab::TokenId;
use wmlab::watermark::exp::ExpKey;
use wmlab::watermark::kgw::KgwParams;
use wmlab::watermark::unigram::UnigramParams;
use wmlab::watermark::{DEFAULT_P_THRESHOLD, DEFAULT_Z_THRESHOLD};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form name stamped into the report files.
    pub experiment: String,
    pub scheme: SchemeConfig,
    /// Number of keys in the service's keyset.
    pub keys: usize,
    pub model: ModelSpec,
    pub attack: AttackSpec,
    pub trials: usize,
    /// Watermarked-generation length per trial (tokens).
    pub length: usize,
    /// 64 hex characters; everything random in the run derives from it.
    pub master_seed_hex: String,
    pub out_csv: PathBuf,
    pub out_json: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    Kgw {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_h")]
        h: usize,
        #[serde(default = "default_z_threshold")]
        z_threshold: f64,
    },
    Unigram {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_z_threshold")]
        z_threshold: f64,
    },
    Exp {
        #[serde(default = "default_key_len")]
        key_len: usize,
        #[serde(default = "default_resamples")]
        resamples: usize,
        #[serde(default = "default_edit_penalty")]
        edit_penalty: f64,
        #[serde(default = "default_p_threshold")]
        p_threshold: f64,
    },
}

fn default_gamma() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    2.0
}
fn default_h() -> usize {
    1
}
fn default_z_threshold() -> f64 {
    DEFAULT_Z_THRESHOLD
}
fn default_key_len() -> usize {
    wmlab::watermark::exp::DEFAULT_EXP_KEY_LEN
}
fn default_resamples() -> usize {
    wmlab::watermark::exp::DEFAULT_RESAMPLES
}
fn default_edit_penalty() -> f64 {
    wmlab::watermark::exp::DEFAULT_EDIT_PENALTY
}
fn default_p_threshold() -> f64 {
    DEFAULT_P_THRESHOLD
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Synthetic { seed_hex: String, concentration: f64, vocab_size: usize },
    Markov { path: PathBuf },
    /// The built-in corpus-trained toy model.
    Toy,
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn LanguageModel>> {
        match self {
            ModelSpec::Synthetic { seed_hex, concentration, vocab_size } => Ok(Box::new(
                SyntheticModel::new(seed_from_hex(seed_hex)?, *concentration, *vocab_size)?,
            )),
            ModelSpec::Markov { path } => match MarkovModel::load(path) {
                Ok(m) => Ok(Box::new(m)),
                Err(e) => Err(Error::InvalidParameter(format!(
                    "cannot load model {}: {e}",
                    path.display()
                ))),
            },
            ModelSpec::Toy => Ok(Box::new(standard_model().clone())),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Insert `insert_tokens` extra tokens into watermarked text: from
    /// `lexicon_ids` when given (content injection), uniformly from the
    /// vocabulary otherwise (dilution).
    Piggyback {
        insert_tokens: usize,
        #[serde(default)]
        lexicon_ids: Vec<TokenId>,
    },
    /// Estimate green tokens from `queries` watermarked samples and
    /// regenerate avoiding them.
    Multikey { queries: usize },
    /// Rewrite a watermarked text by probing detection over top-L
    /// candidate lists.
    ApiRemoval { top_l: usize },
    /// Grow a text the detector flags, guided only by detection scores
    /// and a local model's top-L lists.
    ApiSpoof { top_l: usize, local_model: ModelSpec },
    /// Recover the green list from passively collected samples; the score
    /// column holds list precision, success = precision beats chance by
    /// 0.1.
    Steal { budget_tokens: usize, sample_length: usize },
}

impl AttackSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackSpec::Piggyback { .. } => "piggyback",
            AttackSpec::Multikey { .. } => "multikey",
            AttackSpec::ApiRemoval { .. } => "api-removal",
            AttackSpec::ApiSpoof { .. } => "api-spoof",
            AttackSpec::Steal { .. } => "steal",
        }
    }

    pub fn goal(&self) -> AttackGoal {
        match self {
            AttackSpec::Multikey { .. } | AttackSpec::ApiRemoval { .. } => AttackGoal::Removal,
            _ => AttackGoal::Spoof,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidParameter(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&raw).map_err(|e| {
            Error::InvalidParameter(format!("malformed config {}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::InvalidParameter("experiment name must not be empty".into()));
        }
        if self.keys < 1 {
            return Err(Error::InvalidParameter("keyset needs at least one key".into()));
        }
        if self.length < 1 {
            return Err(Error::InvalidParameter("generation length must be at least 1".into()));
        }
        master_key_from_hex(&self.master_seed_hex)?;
        match &self.attack {
            AttackSpec::Multikey { queries } if *queries < 1 => {
                return Err(Error::InvalidParameter("multikey attack needs queries >= 1".into()));
            }
            AttackSpec::ApiRemoval { top_l } | AttackSpec::ApiSpoof { top_l, .. }
                if !(1..=5).contains(top_l) =>
            {
                return Err(Error::InvalidParameter(format!(
                    "top_l must be in 1..=5, got {top_l}"
                )));
            }
            AttackSpec::Steal { budget_tokens, sample_length } => {
                if *sample_length < 2 {
                    return Err(Error::InvalidParameter(
                        "steal sample_length must be at least 2".into(),
                    ));
                }
                if budget_tokens / sample_length < 1 {
                    return Err(Error::InvalidParameter(
                        "steal budget must cover at least one sample".into(),
                    ));
                }
                if !matches!(self.scheme, SchemeConfig::Unigram { .. }) {
                    return Err(Error::InvalidParameter(
                        "steal targets a global green list; use the unigram scheme".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn apply_overrides(
        &mut self,
        trials: Option<usize>,
        seed_hex: Option<String>,
        out_csv: Option<PathBuf>,
        out_json: Option<PathBuf>,
    ) {
        if let Some(t) = trials {
            self.trials = t;
        }
        if let Some(s) = seed_hex {
            self.master_seed_hex = s;
        }
        if let Some(p) = out_csv {
            self.out_csv = p;
        }
        if let Some(p) = out_json {
            self.out_json = p;
        }
    }

    fn master_key(&self) -> Result<WatermarkKey> {
        master_key_from_hex(&self.master_seed_hex)
    }

    pub fn build_keyset(&self, vocab_size: usize) -> Result<KeySet> {
        let master = self.master_key()?;
        match &self.scheme {
            SchemeConfig::Kgw { gamma, delta, h, z_threshold } => {
                let params = KgwParams {
                    gamma: *gamma,
                    delta: *delta,
                    h: *h,
                    z_threshold: *z_threshold,
                };
                let keys =
                    (0..self.keys).map(|i| derived_key(&master, b"kgw-key", i)).collect();
                KeySet::kgw(keys, params, vocab_size)
            }
            SchemeConfig::Unigram { gamma, delta, z_threshold } => {
                let params =
                    UnigramParams { gamma: *gamma, delta: *delta, z_threshold: *z_threshold };
                let keys =
                    (0..self.keys).map(|i| derived_key(&master, b"unigram-key", i)).collect();
                KeySet::unigram(keys, params, vocab_size)
            }
            SchemeConfig::Exp { key_len, resamples, edit_penalty, p_threshold } => {
                let instances = (0..self.keys)
                    .map(|i| {
                        let mut stream =
                            UniformStream::new(prf(&master, &tagged(b"exp-key", i)));
                        let key = ExpKey::draw(&mut stream, *key_len, vocab_size)?;
                        Ok(SchemeInstance::Exp(ExpInstance {
                            key,
                            resamples: *resamples,
                            edit_penalty: *edit_penalty,
                            p_threshold: *p_threshold,
                        }))
                    })
                    .collect::<Result<Vec<_>>>()?;
                KeySet::from_instances(instances)
            }
        }
    }
}

pub fn seed_from_hex(s: &str) -> Result<Seed> {
    let key = WatermarkKey::from_hex(s)?;
    Ok(Seed(key.bytes().try_into().expect("32-byte key")))
}

fn master_key_from_hex(s: &str) -> Result<WatermarkKey> {
    WatermarkKey::from_hex(s)
}

fn tagged(tag: &[u8], i: usize) -> Vec<u8> {
    let mut message = tag.to_vec();
    message.extend_from_slice(&(i as u64).to_le_bytes());
    message
}

fn derived_key(master: &WatermarkKey, tag: &[u8], i: usize) -> WatermarkKey {
    WatermarkKey::from_bytes(prf(master, &tagged(tag, i)).as_bytes()).expect("32-byte seed")
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub error: String,
}

pub struct ExperimentOutcome {
    pub report: Report,
    pub summary: Option<Summary>,
    pub failures: Vec<TrialFailure>,
}

impl ExperimentOutcome {
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Attack state that is fixed across trials.
enum Prepared {
    Piggyback { insert_tokens: usize, lexicon: Option<Lexicon> },
    Multikey { queries: usize },
    ApiRemoval { top_l: usize },
    ApiSpoof { top_l: usize, local: Box<dyn LanguageModel> },
    Steal { samples: usize, sample_length: usize, gamma: f64 },
}

fn prepare(config: &ExperimentConfig, vocab_size: usize) -> Result<Prepared> {
    Ok(match &config.attack {
        AttackSpec::Piggyback { insert_tokens, lexicon_ids } => {
            let lexicon = if lexicon_ids.is_empty() {
                None
            } else {
                Some(Lexicon::new("config", lexicon_ids.clone(), vocab_size)?)
            };
            Prepared::Piggyback { insert_tokens: *insert_tokens, lexicon }
        }
        AttackSpec::Multikey { queries } => Prepared::Multikey { queries: *queries },
        AttackSpec::ApiRemoval { top_l } => Prepared::ApiRemoval { top_l: *top_l },
        AttackSpec::ApiSpoof { top_l, local_model } => {
            let local = local_model.build()?;
            if local.vocab_size() != vocab_size {
                return Err(Error::InvalidParameter(format!(
                    "local model vocabulary {} does not match target vocabulary {vocab_size}",
                    local.vocab_size()
                )));
            }
            Prepared::ApiSpoof { top_l: *top_l, local }
        }
        AttackSpec::Steal { budget_tokens, sample_length } => {
            let gamma = match &config.scheme {
                SchemeConfig::Unigram { gamma, .. } => *gamma,
                _ => unreachable!("validated"),
            };
            Prepared::Steal {
                samples: budget_tokens / sample_length,
                sample_length: *sample_length,
                gamma,
            }
        }
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let model = config.model.build()?;
    let vocab_size = model.vocab_size();
    let keyset = config.build_keyset(vocab_size)?;
    let thresholds = wmlab_service::default_threshold_table(&keyset);
    let master = config.master_key()?;
    let prepared = prepare(config, vocab_size)?;

    let mut rows = Vec::with_capacity(config.trials);
    let mut failures = Vec::new();
    for trial in 0..config.trials {
        let started = Instant::now();
        let mut stream = UniformStream::new(prf(&master, &tagged(b"trial", trial)));
        match run_trial(config, &prepared, &*model, &keyset, &thresholds, &mut stream) {
            Ok(mut row) => {
                row.trial = trial;
                row.wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
                rows.push(row);
            }
            Err(e) if e.is_config_error() => return Err(e),
            Err(e) => failures.push(TrialFailure { trial, error: e.to_string() }),
        }
    }

    let report = Report::new(config.experiment.clone(), config.attack.goal(), rows)?;
    let summary = if report.rows.is_empty() { None } else { Some(summarize(&report)?) };
    Ok(ExperimentOutcome { report, summary, failures })
}

fn random_prompt(vocab_size: usize, stream: &mut UniformStream) -> Vec<TokenId> {
    vec![stream.next_index(vocab_size) as TokenId, stream.next_index(vocab_size) as TokenId]
}

fn row_from_outcome(outcome: &AttackOutcome, quality: Option<f64>) -> ReportRow {
    ReportRow {
        trial: 0,
        score_before: outcome.score_before.value,
        score_after: outcome.score_after.value,
        verdict_before: outcome.score_before.verdict,
        verdict_after: outcome.score_after.verdict,
        queries_generation: outcome.queries_generation,
        queries_detection: outcome.queries_detection,
        quality,
        wall_clock_ms: 0.0,
    }
}

fn run_trial(
    config: &ExperimentConfig,
    prepared: &Prepared,
    model: &dyn LanguageModel,
    keyset: &KeySet,
    thresholds: &ThresholdTable,
    stream: &mut UniformStream,
) -> Result<ReportRow> {
    let vocab_size = model.vocab_size();
    match prepared {
        Prepared::Piggyback { insert_tokens, lexicon } => {
            let prompt = random_prompt(vocab_size, stream);
            let (x, _) = embed_with_keyset(model, &prompt, keyset, config.length, stream)?;
            let before = detect_multi(&x, keyset, thresholds)?;
            let (attacked, quality) = match lexicon {
                Some(lex) => {
                    let y = piggyback_insert(&x, lex, *insert_tokens, stream)?;
                    let flagged = flagged_fraction(&y, lex);
                    (y, flagged)
                }
                None => {
                    let y = insert_random_tokens(&x, *insert_tokens, vocab_size, stream)?;
                    let ppl = pseudo_perplexity(model, &y)?;
                    (y, ppl)
                }
            };
            let after = detect_multi(&attacked, keyset, thresholds)?;
            Ok(ReportRow {
                trial: 0,
                score_before: before.value,
                score_after: after.value,
                verdict_before: before.verdict,
                verdict_after: after.verdict,
                queries_generation: config.length,
                queries_detection: 0,
                quality: Some(quality),
                wall_clock_ms: 0.0,
            })
        }
        Prepared::Multikey { queries } => {
            let prompt = random_prompt(vocab_size, stream);
            let outcome = multikey_removal(
                model,
                &prompt,
                keyset,
                thresholds,
                *queries,
                config.length,
                stream,
            )?;
            let quality = outcome.quality_proxy;
            Ok(row_from_outcome(&outcome, Some(quality)))
        }
        Prepared::ApiRemoval { top_l } => {
            let prompt = random_prompt(vocab_size, stream);
            let choice = stream.next_index(keyset.len());
            let instance = keyset.get(choice);
            let mut oracle = KeysetOracle::new(keyset, thresholds);
            let outcome = api_removal(
                model,
                instance,
                &prompt,
                &mut oracle,
                *top_l,
                config.length,
                stream,
            )?;
            let quality = outcome.quality_proxy;
            Ok(row_from_outcome(&outcome, Some(quality)))
        }
        Prepared::ApiSpoof { top_l, local } => {
            let prompt = random_prompt(vocab_size, stream);
            let mut oracle = KeysetOracle::new(keyset, thresholds);
            let outcome = api_spoof(&**local, &prompt, &mut oracle, *top_l, config.length)?;
            let quality = outcome.quality_proxy;
            Ok(row_from_outcome(&outcome, Some(quality)))
        }
        Prepared::Steal { samples, sample_length, gamma } => {
            let mut collected = Vec::with_capacity(*samples);
            for _ in 0..*samples {
                let prompt = random_prompt(vocab_size, stream);
                let (x, _) = embed_with_keyset(model, &prompt, keyset, *sample_length, stream)?;
                collected.push(x);
            }
            let estimate = steal_greenlist(&collected, model, *gamma)?;
            let truth = match keyset.get(0) {
                SchemeInstance::Unigram(s) => s.green(),
                _ => unreachable!("validated"),
            };
            let precision = greenlist_precision(&estimate.estimated, truth);
            Ok(ReportRow {
                trial: 0,
                score_before: *gamma,
                score_after: precision,
                verdict_before: false,
                verdict_after: precision > gamma + 0.1,
                queries_generation: samples * sample_length,
                queries_detection: 0,
                quality: None,
                wall_clock_ms: 0.0,
            })
        }
    }
}

/// Writes the CSV, the JSON document (config + rows + summary), and
/// returns the rendered stdout table.
pub fn write_outputs(config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<String> {
    std::fs::write(&config.out_csv, outcome.report.to_csv())?;
    let document = serde_json::json!({
        "config": config,
        "report": outcome.report,
        "summary": outcome.summary,
        "partial": outcome.partial(),
        "failures": outcome.failures,
    });
    std::fs::write(&config.out_json, serde_json::to_string_pretty(&document)?)?;
    let table = match &outcome.summary {
        Some(s) => wmlab::report::render_summary(s),
        None => format!("experiment {}: no completed trials\n", config.experiment),
    };
    Ok(table)
}
