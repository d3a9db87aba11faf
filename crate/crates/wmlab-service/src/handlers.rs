//! Request handlers. Responses never include key bytes, per-key score
//! breakdowns, or noise seeds; detection with noise enabled reports only the
//! noised aggregate.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Json, Response};
use serde::{Deserialize, Serialize};
use serde_json::json;

use wmlab::dp;
use wmlab::error::Error;
use wmlab::keyring::{detect_multi, SchemeInstance};
use wmlab::prf::{prf, UniformStream};
use wmlab::watermark::exp::exp_embed_step;
use wmlab::watermark::ScoreKind;
use wmlab::vocab::TokenId;

use crate::config::{parse_scheme_name, DpPolicy};
use crate::limiter::RateDecision;
use crate::ServiceState;

#[derive(Deserialize)]
struct DetectRequest {
    text: String,
    scheme: String,
    #[serde(default)]
    dp: bool,
}

#[derive(Serialize)]
struct DetectResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    score_kind: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    watermarked: bool,
}

#[derive(Deserialize)]
struct GenerateRequest {
    prompt: String,
    max_tokens: usize,
    #[serde(default)]
    top_logprobs: usize,
}

#[derive(Serialize)]
struct TopEntry {
    token: String,
    probability: f64,
}

#[derive(Serialize)]
struct GenerateResponse {
    text: String,
    tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<Vec<Vec<TopEntry>>>,
}

fn client_id(headers: &HeaderMap) -> String {
    headers
        .get("x-client-id")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("anonymous")
        .to_string()
}

fn error_response(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

fn rate_limited_response(retry_after: f64) -> Response {
    let mut response = (
        StatusCode::TOO_MANY_REQUESTS,
        Json(json!({ "error": "rate limited", "retry_after_seconds": retry_after })),
    )
        .into_response();
    let secs = retry_after.ceil() as u64;
    response.headers_mut().insert(
        header::RETRY_AFTER,
        HeaderValue::from_str(&secs.to_string()).expect("integer header"),
    );
    response
}

/// Client-triggered failures map to 400; anything touching server
/// internals is a 500.
fn library_error_response(e: &Error) -> Response {
    let status = match e {
        Error::Io(_) | Error::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    };
    error_response(status, &e.to_string())
}

fn score_kind_name(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::ZScore => "z_score",
        ScoreKind::PValue => "p_value",
    }
}

pub async fn health() -> Response {
    (StatusCode::OK, Json(json!({ "status": "ok" }))).into_response()
}

pub async fn detect(
    State(state): State<Arc<ServiceState>>,
    headers: HeaderMap,
    body: String,
) -> Response {
    let client = client_id(&headers);
    let response = detect_inner(&state, &client, &body);
    state.audit_line("/v1/detect", &client, response.status().as_u16());
    response
}

fn detect_inner(state: &ServiceState, client: &str, body: &str) -> Response {
    match state.limiter.check(client) {
        RateDecision::Allowed => {}
        RateDecision::Denied { retry_after } => return rate_limited_response(retry_after),
    }
    let request: DetectRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, &format!("bad request: {e}")),
    };
    let kind = match parse_scheme_name(&request.scheme) {
        Some(k) => k,
        None => {
            return error_response(
                StatusCode::BAD_REQUEST,
                &format!("unknown scheme {:?}", request.scheme),
            );
        }
    };
    let hosted = match state.schemes.get(kind) {
        Some(h) => h,
        None => {
            return error_response(
                StatusCode::BAD_REQUEST,
                &format!(
                    "scheme {:?} is not hosted here (available: {})",
                    request.scheme,
                    state.schemes.hosted_names().join(", ")
                ),
            );
        }
    };
    let tokens = state.vocab.tokenize(&request.text);
    if tokens.len() > state.max_text_tokens {
        return error_response(
            StatusCode::PAYLOAD_TOO_LARGE,
            &format!("text is {} tokens, limit {}", tokens.len(), state.max_text_tokens),
        );
    }
    let report = match detect_multi(&tokens, &hosted.keyset, &hosted.thresholds) {
        Ok(r) => r,
        Err(e) => return library_error_response(&e),
    };

    let dp_active = match state.dp.policy {
        DpPolicy::Off => false,
        DpPolicy::On => true,
        DpPolicy::ClientChoice => request.dp,
    };
    let (score, watermarked) = if dp_active {
        let noise_key = match &state.dp.noise_key {
            Some(k) => k,
            None => {
                return error_response(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "noise key not configured",
                );
            }
        };
        let delta = match hosted.thresholds.kind {
            ScoreKind::ZScore => {
                let (h, gamma) = match hosted.keyset.get(0) {
                    SchemeInstance::Kgw(s) => (s.params().h, s.params().gamma),
                    SchemeInstance::Unigram(s) => (0, s.params().gamma),
                    SchemeInstance::Exp(_) => unreachable!("p-value table"),
                };
                match dp::sensitivity(report.length, h, gamma) {
                    Ok(d) => d * state.dp.sensitivity_multiplier,
                    Err(e) => return library_error_response(&e),
                }
            }
            ScoreKind::PValue => match state.dp.log_p_sensitivity {
                Some(d) => d * state.dp.sensitivity_multiplier,
                None => {
                    return error_response(
                        StatusCode::INTERNAL_SERVER_ERROR,
                        "log-p sensitivity not configured",
                    );
                }
            },
        };
        let noised = match dp::apply_noise(report, &tokens, delta, state.dp.sigma, noise_key) {
            Ok(n) => n,
            Err(e) => return library_error_response(&e),
        };
        (noised.noised_value, noised.verdict)
    } else {
        (report.value, report.verdict)
    };

    let payload = if state.binary_verdict_only {
        DetectResponse { score_kind: None, score: None, threshold: None, watermarked }
    } else {
        DetectResponse {
            score_kind: Some(score_kind_name(hosted.thresholds.kind)),
            score: Some(score),
            threshold: Some(hosted.thresholds.threshold),
            watermarked,
        }
    };
    (StatusCode::OK, Json(payload)).into_response()
}

pub async fn generate(
    State(state): State<Arc<ServiceState>>,
    headers: HeaderMap,
    body: String,
) -> Response {
    let client = client_id(&headers);
    let response = generate_inner(&state, &client, &body);
    state.audit_line("/v1/generate", &client, response.status().as_u16());
    response
}

fn generate_inner(state: &ServiceState, client: &str, body: &str) -> Response {
    match state.limiter.check(client) {
        RateDecision::Allowed => {}
        RateDecision::Denied { retry_after } => return rate_limited_response(retry_after),
    }
    let request: GenerateRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, &format!("bad request: {e}")),
    };
    if request.top_logprobs > 5 {
        return error_response(
            StatusCode::BAD_REQUEST,
            &format!("top_logprobs is {}, limit 5", request.top_logprobs),
        );
    }
    if request.max_tokens < 1 || request.max_tokens > state.max_generate_tokens {
        return error_response(
            StatusCode::BAD_REQUEST,
            &format!(
                "max_tokens must lie in 1..={}, got {}",
                state.max_generate_tokens, request.max_tokens
            ),
        );
    }
    let prompt = state.vocab.tokenize(&request.prompt);
    if prompt.len() > state.max_text_tokens {
        return error_response(
            StatusCode::PAYLOAD_TOO_LARGE,
            &format!("prompt is {} tokens, limit {}", prompt.len(), state.max_text_tokens),
        );
    }
    let hosted = state
        .schemes
        .get(state.generation)
        .expect("generation scheme validated at startup");

    // Fresh keyed stream per request; the counter keeps responses
    // independent without shared RNG state.
    let serial = state.request_counter.fetch_add(1, Ordering::Relaxed);
    let mut seed_msg = serial.to_le_bytes().to_vec();
    seed_msg.extend_from_slice(b"generate");
    let mut stream = UniformStream::new(prf(&state.generation_key, &seed_msg));

    match generate_tokens(state, hosted, &prompt, &request, &mut stream) {
        Ok(response) => (StatusCode::OK, Json(response)).into_response(),
        Err(e) => library_error_response(&e),
    }
}

/// Mirrors keyset embedding (uniform key choice, then the per-scheme
/// sampling loop) while capturing each step's top-L list from the
/// distribution the server actually samples — the boosted one for
/// green-list schemes, the base model for key-sequence sampling.
fn generate_tokens(
    state: &ServiceState,
    hosted: &crate::HostedKeyset,
    prompt: &[TokenId],
    request: &GenerateRequest,
    stream: &mut UniformStream,
) -> wmlab::error::Result<GenerateResponse> {
    let keyset = &hosted.keyset;
    let choice = stream.next_index(keyset.len());
    let instance = keyset.get(choice);
    let l = request.top_logprobs;
    let mut context = prompt.to_vec();
    let mut out: Vec<TokenId> = Vec::with_capacity(request.max_tokens);
    let mut tops: Vec<Vec<TopEntry>> = Vec::new();

    let exp_shift = match instance {
        SchemeInstance::Exp(e) => stream.next_index(e.key.n()),
        _ => 0,
    };
    for step in 0..request.max_tokens {
        let dist = state.model.next_dist(&context)?;
        let (token, top_source) = match instance {
            SchemeInstance::Kgw(s) => {
                let boosted = s.embed_step(&dist.to_logits(), &context)?;
                let t = boosted.sample_at(stream.next_f64());
                (t, Some(boosted))
            }
            SchemeInstance::Unigram(s) => {
                let boosted = s.embed_step(&dist.to_logits())?;
                let t = boosted.sample_at(stream.next_f64());
                (t, Some(boosted))
            }
            SchemeInstance::Exp(e) => {
                let k = (exp_shift + step) % e.key.n();
                let t = exp_embed_step(&dist, e.key.row(k))?;
                (t, None)
            }
        };
        if l > 0 {
            let entries = top_source.as_ref().unwrap_or(&dist).top_l(l)?;
            tops.push(
                entries
                    .into_iter()
                    .map(|(t, p)| TopEntry {
                        token: state.vocab.surface(t).unwrap_or("<unk>").to_string(),
                        probability: p,
                    })
                    .collect(),
            );
        }
        context.push(token);
        out.push(token);
    }

    Ok(GenerateResponse {
        text: state.vocab.render(&out),
        tokens: out
            .iter()
            .map(|&t| state.vocab.surface(t).unwrap_or("<unk>").to_string())
            .collect(),
        top_logprobs: if l > 0 { Some(tops) } else { None },
    })
}
