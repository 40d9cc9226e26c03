//! Client for OpenAI-compatible `/v1/completions` servers.

use std::collections::BTreeMap;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, FinishReason, GenerationRequest, GenerationResult};
use crate::error::BackendError;
use crate::types::{BackendProfile, Role, Tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// Send the request seed hint as `seed`.
    #[serde(default = "default_true")]
    pub send_seed: bool,
}

fn default_timeout() -> f64 {
    120.0
}

fn default_attempts() -> u32 {
    3
}

fn default_true() -> bool {
    true
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_s: default_timeout(),
            max_attempts: default_attempts(),
            send_seed: true,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    stop_reason: Option<Value>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: Option<Tokens>,
    #[serde(default)]
    completion_tokens: Option<Tokens>,
}

/// Result plus the server's prompt token count, when reported.
#[derive(Debug, Clone)]
pub struct RawCompletion {
    pub result: GenerationResult,
    pub prompt_tokens: Option<Tokens>,
}

pub struct OpenAiCompletions {
    config: HttpBackendConfig,
    profile: BackendProfile,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompletions {
    /// Reads the API key from the configured environment variable, if any.
    pub fn new(config: HttpBackendConfig, profile: BackendProfile) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::InvalidRequest(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        if !(config.timeout_s.is_finite() && config.timeout_s > 0.0) || config.max_attempts == 0 {
            return Err(BackendError::InvalidRequest(
                "timeout_s must be > 0 and max_attempts >= 1".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(OpenAiCompletions {
            config,
            profile,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn body(&self, req: &GenerationRequest) -> Value {
        let mut stop = req.stop.clone();
        let answering = req
            .end_marker
            .as_deref()
            .is_some_and(|m| req.prompt.trim_end().ends_with(m));
        if let Some(m) = &req.end_marker {
            if !answering && !stop.contains(m) {
                stop.push(m.clone());
            }
        }
        let mut body = json!({
            "model": self.config.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if !stop.is_empty() {
            body["stop"] = json!(stop);
        }
        if req.want_top_logprobs {
            body["logprobs"] = json!(10);
        }
        if let (true, Some(seed)) = (self.config.send_seed, req.seed_hint) {
            body["seed"] = json!(seed);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<CompletionResponse, BackendError> {
        let url = format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'));
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            let mut rb = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                rb = rb.bearer_auth(key);
            }
            match rb.send() {
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("HTTP {}", resp.status());
                }
                Ok(resp) if !resp.status().is_success() => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    return Err(BackendError::Misbehavior(format!("HTTP {status}: {text}")));
                }
                Ok(resp) => {
                    return resp
                        .json::<CompletionResponse>()
                        .map_err(|e| BackendError::Misbehavior(format!("malformed completion response: {e}")));
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.config.max_attempts {
                thread::sleep(Duration::from_millis(250 << (attempt - 1)));
            }
        }
        Err(BackendError::Transport {
            attempts: self.config.max_attempts,
            detail: last,
        })
    }

    pub fn complete(&self, req: &GenerationRequest) -> Result<RawCompletion, BackendError> {
        let started = Instant::now();
        let resp = self.post(&self.body(req))?;
        let elapsed = started.elapsed().as_secs_f64();
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Misbehavior("response has no choices".into()))?;
        let mut text = choice.text;
        let mut finish = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        let end = req.end_marker.as_deref();
        let answering = end.is_some_and(|m| req.prompt.trim_end().ends_with(m));
        if let Some(p) = end.filter(|_| !answering).and_then(|m| text.find(m)) {
            text.truncate(p);
            finish = FinishReason::EndThink;
        } else if finish == FinishReason::Stop {
            match choice.stop_reason {
                Some(Value::String(s)) if Some(s.as_str()) == end => finish = FinishReason::EndThink,
                Some(Value::String(s)) if req.stop.contains(&s) => text.push_str(&s),
                // end of sequence while thinking
                None | Some(Value::Null) if end.is_some() && !answering => finish = FinishReason::EndThink,
                _ => {}
            }
        }
        let top_logprobs = choice
            .logprobs
            .and_then(|l| l.top_logprobs)
            .and_then(|v| v.into_iter().next().flatten());
        let usage = resp.usage;
        let token_count = usage
            .as_ref()
            .and_then(|u| u.completion_tokens)
            .unwrap_or_else(|| self.count_tokens(&text));
        Ok(RawCompletion {
            result: GenerationResult {
                text,
                token_count,
                finish_reason: finish,
                top_logprobs,
                measured_latency_s: elapsed,
            },
            prompt_tokens: usage.and_then(|u| u.prompt_tokens),
        })
    }
}

impl Backend for OpenAiCompletions {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.complete(req).map(|r| r.result)
    }

    fn measures_latency(&self) -> bool {
        true
    }
}

/// Timing samples behind a measured profile.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileMeasurement {
    pub profile: BackendProfile,
    pub decode_samples_s: Vec<f64>,
    pub prefill_samples_s: Vec<f64>,
}

/// Estimate decode and prefill rates from a live server.
///
/// Decode: the time difference between a long and a one-token completion of
/// the same short prompt, per extra token. Prefill: the extra time a long
/// fresh prompt takes over a short one for a single output token.
pub fn measure_profile(
    backend: &OpenAiCompletions,
    name: &str,
    role: Role,
    samples: usize,
) -> Result<ProfileMeasurement, BackendError> {
    let mut decode = Vec::new();
    let mut prefill = Vec::new();
    for s in 0..samples.max(1) {
        let short = format!("Sample {s}. Count upward from one, one number per line:\n");
        let one = backend.complete(&GenerationRequest::new(short.clone(), 1))?;
        let many = backend.complete(&GenerationRequest::new(short.clone(), 128))?;
        let extra = many.result.token_count.saturating_sub(1).max(1) as f64;
        decode.push(((many.result.measured_latency_s - one.result.measured_latency_s) / extra).max(1e-6));
        let filler: String = (0..1500).map(|i| format!("w{s}x{i} ")).collect();
        let long = backend.complete(&GenerationRequest::new(format!("{filler}\n{short}"), 1))?;
        let words = |t: &str| super::tokenize::count_tokens(t);
        let long_tokens = long.prompt_tokens.unwrap_or_else(|| words(&filler) + words(&short));
        let short_tokens = one.prompt_tokens.unwrap_or_else(|| words(&short));
        let dt = (long.result.measured_latency_s - one.result.measured_latency_s).max(1e-6);
        prefill.push(long_tokens.saturating_sub(short_tokens).max(1) as f64 / dt);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut d = decode.clone();
    let mut p = prefill.clone();
    let profile = BackendProfile::new(name, role, median(&mut d), median(&mut p))
        .map_err(|e| BackendError::Misbehavior(e.message().to_string()))?;
    Ok(ProfileMeasurement {
        profile,
        decode_samples_s: decode,
        prefill_samples_s: prefill,
    })
}
