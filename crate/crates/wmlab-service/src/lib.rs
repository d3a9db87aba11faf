//! HTTP detection-and-generation service: raw or noised detection scores,
//! top-logprobs generation under a hosted keyset, and per-client rate
//! limiting.

pub mod config;
pub mod handlers;
pub mod limiter;

use std::io::Write as _;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, Mutex};

use axum::routing::{get, post};
use axum::Router;

use wmlab::error::{Error, Result};
use wmlab::keyring::{load_keyset, KeySet, SchemeKind, ThresholdTable};
use wmlab::lm::{LanguageModel, MarkovModel, SyntheticModel};
use wmlab::prf::WatermarkKey;
use wmlab::vocab::Vocabulary;

use config::{parse_scheme_name, DpPolicy, ModelKind, ServiceConfig};
use limiter::{Clock, MonotonicClock, RateLimiter};

pub struct HostedKeyset {
    pub keyset: KeySet,
    pub thresholds: ThresholdTable,
}

/// Up to one keyset per scheme kind.
#[derive(Default)]
pub struct HostedSchemes {
    kgw: Option<HostedKeyset>,
    unigram: Option<HostedKeyset>,
    exp: Option<HostedKeyset>,
}

impl HostedSchemes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hosted: HostedKeyset) {
        match hosted.keyset.kind() {
            SchemeKind::Kgw => self.kgw = Some(hosted),
            SchemeKind::Unigram => self.unigram = Some(hosted),
            SchemeKind::Exp => self.exp = Some(hosted),
        }
    }

    pub fn get(&self, kind: SchemeKind) -> Option<&HostedKeyset> {
        match kind {
            SchemeKind::Kgw => self.kgw.as_ref(),
            SchemeKind::Unigram => self.unigram.as_ref(),
            SchemeKind::Exp => self.exp.as_ref(),
        }
    }

    pub fn hosted_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.kgw.is_some() {
            names.push("kgw");
        }
        if self.unigram.is_some() {
            names.push("unigram");
        }
        if self.exp.is_some() {
            names.push("exp");
        }
        names
    }
}

/// Runtime noise policy (config's DP section with the key decoded).
pub struct DpSettings {
    pub policy: DpPolicy,
    pub sigma: f64,
    pub noise_key: Option<WatermarkKey>,
    pub log_p_sensitivity: Option<f64>,
    pub sensitivity_multiplier: f64,
}

impl DpSettings {
    pub fn off() -> Self {
        Self {
            policy: DpPolicy::Off,
            sigma: 0.0,
            noise_key: None,
            log_p_sensitivity: None,
            sensitivity_multiplier: 1.0,
        }
    }
}

pub struct ServiceState {
    pub vocab: Vocabulary,
    pub model: Box<dyn LanguageModel + Send + Sync>,
    pub schemes: HostedSchemes,
    pub generation: SchemeKind,
    pub dp: DpSettings,
    pub limiter: RateLimiter,
    pub max_text_tokens: usize,
    pub max_generate_tokens: usize,
    pub binary_verdict_only: bool,
    /// Seeds per-request generation streams together with the counter.
    pub generation_key: WatermarkKey,
    pub request_counter: AtomicU64,
    pub audit: Option<Mutex<std::fs::File>>,
}

impl ServiceState {
    pub fn from_config(config: &ServiceConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::load(&config.vocab_path)?;
        let model: Box<dyn LanguageModel + Send + Sync> = match config.model.kind {
            ModelKind::Markov => Box::new(MarkovModel::load(&config.model.path)?),
            ModelKind::Synthetic => Box::new(SyntheticModel::load(&config.model.path)?),
        };
        if model.vocab_size() != vocab.size() {
            return Err(Error::InvalidParameter(format!(
                "model vocabulary {} does not match service vocabulary {}",
                model.vocab_size(),
                vocab.size()
            )));
        }
        let mut schemes = HostedSchemes::new();
        for (name, path) in &config.keysets {
            let kind = parse_scheme_name(name).expect("validated");
            let (keyset, thresholds) = load_keyset(path)?;
            if keyset.kind() != kind {
                return Err(Error::InvalidParameter(format!(
                    "keyset {} holds {:?} keys but is configured as {name:?}",
                    path.display(),
                    keyset.kind()
                )));
            }
            if keyset.vocab_size() != vocab.size() {
                return Err(Error::InvalidParameter(format!(
                    "keyset {} vocabulary {} does not match service vocabulary {}",
                    path.display(),
                    keyset.vocab_size(),
                    vocab.size()
                )));
            }
            let thresholds = match thresholds {
                Some(t) => t,
                None => default_threshold_table(&keyset),
            };
            schemes.insert(HostedKeyset { keyset, thresholds });
        }
        let generation = parse_scheme_name(&config.generation_scheme).expect("validated");
        let noise_key = match &config.dp.noise_key_hex {
            Some(hx) => Some(WatermarkKey::from_hex(hx)?),
            None => None,
        };
        let generation_key = match &config.generation_seed_hex {
            Some(hx) => WatermarkKey::from_hex(hx)?,
            None => WatermarkKey::from_bytes(&[0x0Fu8; 32]).expect("32-byte key"),
        };
        let limiter = RateLimiter::new(
            config.rate_limit.capacity,
            config.rate_limit.refill_per_second,
            Arc::new(MonotonicClock::new()) as Arc<dyn Clock>,
        )?;
        let audit = match &config.audit_path {
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        Ok(Self {
            vocab,
            model,
            schemes,
            generation,
            dp: DpSettings {
                policy: config.dp.policy,
                sigma: config.dp.sigma,
                noise_key,
                log_p_sensitivity: config.dp.log_p_sensitivity,
                sensitivity_multiplier: config.dp.sensitivity_multiplier,
            },
            limiter,
            max_text_tokens: config.max_text_tokens,
            max_generate_tokens: config.max_generate_tokens,
            binary_verdict_only: config.binary_verdict_only,
            generation_key,
            request_counter: AtomicU64::new(0),
            audit,
        })
    }

    pub(crate) fn audit_line(&self, endpoint: &str, client: &str, status: u16) {
        if let Some(file) = &self.audit {
            let line = serde_json::json!({
                "endpoint": endpoint,
                "client": client,
                "status": status,
            });
            let mut file = file.lock().unwrap();
            let _ = writeln!(file, "{line}");
        }
    }
}

/// Keysets saved without calibration fall back to the scheme's built-in
/// threshold; the table is marked low-sample so callers can tell.
pub fn default_threshold_table(keyset: &KeySet) -> ThresholdTable {
    let threshold = keyset.get(0).default_threshold();
    ThresholdTable {
        kind: keyset.score_kind(),
        keys: keyset.len(),
        threshold,
        target_fpr: 0.0,
        calibration_samples: 0,
        low_sample_warning: true,
        analytic_bound: threshold,
    }
}

pub fn build_router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/detect", post(handlers::detect))
        .route("/v1/generate", post(handlers::generate))
        .route("/v1/health", get(handlers::health))
        .with_state(state)
}

/// Binds `listen` and serves until the process is stopped.
pub async fn run_with_state(state: Arc<ServiceState>, listen: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    eprintln!("listening on {listen}");
    axum::serve(listener, build_router(state)).await?;
    Ok(())
}
