//! Experiment files: backends, problems, schemes and an optional sweep.
//!
//! Files are JSON. Overrides are `dotted.path=value` pairs applied on top of
//! the parsed file; a key that does not exist in the schema is an error. Keys
//! naming an engine field may drop the `engine.` prefix.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::http::{HttpBackendConfig, OpenAiCompletions};
use crate::backend::sim::SimBackend;
use crate::backend::Backend;
use crate::bench::{Knob, Problem, SweepSpec};
use crate::engine::Scheme;
use crate::error::ConfigError;
use crate::simlab::suite::chain_suite;
use crate::simlab::{ChainTask, SimJudgeSpec, SimModelSpec};
use crate::types::{BackendProfile, EngineConfig, Role};

fn default_agreement() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Simulated {
        model: SimModelSpec,
        #[serde(default)]
        judge: Option<SimJudgeSpec>,
        #[serde(default = "default_agreement")]
        draft_agreement: f64,
        #[serde(default)]
        seed: u64,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_attempts")]
        max_attempts: u32,
        #[serde(default = "default_true")]
        send_seed: bool,
        profile: BackendProfile,
    },
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

impl BackendSpec {
    pub fn default_simulated(role: Role) -> Self {
        let model = match role {
            Role::Small => SimModelSpec::default_small(),
            Role::Base => SimModelSpec::default_base(),
        };
        BackendSpec::Simulated {
            model,
            judge: None,
            draft_agreement: default_agreement(),
            seed: 0,
        }
    }

    pub fn http_config(&self) -> Option<HttpBackendConfig> {
        match self {
            BackendSpec::Http {
                base_url,
                model,
                api_key_env,
                timeout_s,
                max_attempts,
                send_seed,
                ..
            } => Some(HttpBackendConfig {
                base_url: base_url.clone(),
                model: model.clone(),
                api_key_env: api_key_env.clone(),
                timeout_s: *timeout_s,
                max_attempts: *max_attempts,
                send_seed: *send_seed,
            }),
            BackendSpec::Simulated { .. } => None,
        }
    }

    pub fn profile(&self) -> &BackendProfile {
        match self {
            BackendSpec::Simulated { model, .. } => &model.profile,
            BackendSpec::Http { profile, .. } => profile,
        }
    }

    fn validate(&self, slot: &str, role: Role) -> Result<(), ConfigError> {
        if self.profile().role != role {
            return Err(ConfigError::Invalid(format!("{slot} backend profile must have role {role:?}")));
        }
        match self {
            BackendSpec::Simulated {
                model,
                judge,
                draft_agreement,
                ..
            } => {
                model.validate()?;
                if let Some(j) = judge {
                    j.validate()?;
                }
                if !(0.0..=1.0).contains(draft_agreement) {
                    return Err(ConfigError::Invalid(format!("{slot}.draft_agreement must lie in [0, 1]")));
                }
            }
            BackendSpec::Http { profile, .. } => {
                let http = self.http_config().expect("http variant");
                profile.validate()?;
                if !(http.base_url.starts_with("http://") || http.base_url.starts_with("https://")) {
                    return Err(ConfigError::Invalid(format!("{slot}.base_url must be an http(s) URL")));
                }
                if !(http.timeout_s.is_finite() && http.timeout_s > 0.0) || http.max_attempts == 0 {
                    return Err(ConfigError::Invalid(format!("{slot}: timeout_s must be > 0, max_attempts >= 1")));
                }
            }
        }
        Ok(())
    }

    /// Instantiate the backend. HTTP backends read their API key here.
    pub fn build(&self) -> Result<Box<dyn Backend>, ConfigError> {
        Ok(match self {
            BackendSpec::Simulated {
                model,
                judge,
                draft_agreement,
                seed,
            } => {
                let mut b = SimBackend::new(model.clone(), *seed).with_draft_agreement(*draft_agreement);
                if model.profile.role == Role::Base {
                    b = b.with_judge(judge.clone().unwrap_or_default());
                }
                Box::new(b)
            }
            BackendSpec::Http { profile, .. } => Box::new(
                OpenAiCompletions::new(self.http_config().expect("http variant"), profile.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSource {
    /// Random chain tasks.
    Chain {
        count: usize,
        modulus: u64,
        length: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A JSON file holding one chain task or a list of them.
    TaskFile { path: PathBuf },
    /// A JSON file holding a list of `{id, prompt, answer}` problems.
    ProblemFile { path: PathBuf },
    Inline { items: Vec<Problem> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub knob: Knob,
    pub values: Vec<u64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_repeats() -> usize {
    16
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::SpecReason]
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub small: BackendSpec,
    pub base: BackendSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    pub problems: ProblemSource,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl ExperimentConfig {
    /// An all-simulated config over `count` chains of length `length`.
    pub fn simulated(count: usize, length: usize) -> Self {
        ExperimentConfig {
            small: BackendSpec::default_simulated(Role::Small),
            base: BackendSpec::default_simulated(Role::Base),
            engine: EngineConfig::default(),
            problems: ProblemSource::Chain {
                count,
                modulus: 97,
                length,
                seed: 0,
            },
            schemes: default_schemes(),
            sweep: None,
            parallelism: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.engine.validate()?;
        self.small.validate("small", Role::Small)?;
        self.base.validate("base", Role::Base)?;
        if self.schemes.is_empty() {
            return Err(ConfigError::Invalid("schemes must not be empty".into()));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be >= 1".into()));
        }
        match &self.problems {
            ProblemSource::Chain { count, modulus, length, .. } => {
                if *count == 0 || *length == 0 || *modulus < 2 {
                    return Err(ConfigError::Invalid(
                        "chain problems need count >= 1, length >= 1, modulus >= 2".into(),
                    ));
                }
            }
            ProblemSource::Inline { items } if items.is_empty() => {
                return Err(ConfigError::Invalid("inline problem list is empty".into()));
            }
            _ => {}
        }
        if let Some(s) = &self.sweep {
            self.sweep_spec_from(s)
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    fn sweep_spec_from(&self, s: &SweepConfig) -> SweepSpec {
        SweepSpec::new(s.knob, s.values.clone(), s.repeats, self.engine.clone())
    }

    pub fn sweep_spec(&self) -> Option<SweepSpec> {
        self.sweep.as_ref().map(|s| self.sweep_spec_from(s))
    }

    /// Set the URL and key variable of every HTTP backend.
    pub fn set_http(&mut self, url: Option<&str>, api_key_env: Option<&str>) {
        for b in [&mut self.small, &mut self.base] {
            if let BackendSpec::Http {
                base_url,
                api_key_env: key_env,
                ..
            } = b
            {
                if let Some(u) = url {
                    *base_url = u.to_string();
                }
                if let Some(k) = api_key_env {
                    *key_env = Some(k.to_string());
                }
            }
        }
    }

    pub fn load_problems(&self) -> Result<Vec<Problem>, ConfigError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let parse_err = |p: &Path, e: serde_json::Error| ConfigError::Parse {
            path: p.display().to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        };
        match &self.problems {
            ProblemSource::Chain {
                count,
                modulus,
                length,
                seed,
            } => Ok(chain_suite(*seed, *count, *modulus, *length)
                .iter()
                .enumerate()
                .map(|(i, t)| Problem::from_chain(format!("chain-{i:04}"), t))
                .collect()),
            ProblemSource::TaskFile { path } => {
                #[derive(Deserialize)]
                #[serde(untagged)]
                enum OneOrMany {
                    One(ChainTask),
                    Many(Vec<ChainTask>),
                }
                let text = read(path)?;
                let tasks = match serde_json::from_str::<OneOrMany>(&text).map_err(|e| parse_err(path, e))? {
                    OneOrMany::One(t) => vec![t],
                    OneOrMany::Many(v) => v,
                };
                tasks
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        t.validate()?;
                        Ok(Problem::from_chain(format!("task-{i:04}"), t))
                    })
                    .collect()
            }
            ProblemSource::ProblemFile { path } => {
                let text = read(path)?;
                serde_json::from_str(&text).map_err(|e| parse_err(path, e))
            }
            ProblemSource::Inline { items } => Ok(items.clone()),
        }
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if let ProblemSource::TaskFile { path } | ProblemSource::ProblemFile { path } = &mut self.problems {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }
}

/// Parse, override and validate a config file. Nothing is written and no
/// backend is contacted.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    cfg = apply_overrides(&cfg, overrides)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

/// Apply `key=value` overrides. Values parse as JSON, falling back to a
/// plain string.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = serde_json::to_value(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override {
            key: o.clone(),
            msg: "expected key=value".into(),
        })?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.split('.').collect();
        let top = root.as_object().expect("config serializes to an object");
        if !top.contains_key(parts[0]) && root["engine"].as_object().is_some_and(|e| e.contains_key(parts[0])) {
            parts.insert(0, "engine");
        }
        let mut slot = &mut root;
        for p in &parts {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(*p))
                .ok_or_else(|| ConfigError::Override {
                    key: key.to_string(),
                    msg: format!("unknown key segment {p:?}"),
                })?;
        }
        *slot = value;
    }
    serde_json::from_value(root).map_err(|e| ConfigError::Override {
        key: overrides.join(" "),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sim_roundtrip_and_valid() {
        let c = ExperimentConfig::simulated(3, 5);
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(parse_config(&text, "x").unwrap(), c);
    }

    #[test]
    fn overrides_with_engine_shorthand() {
        let c = ExperimentConfig::simulated(3, 5);
        let o = apply_overrides(&c, &["threshold=10".into(), "seed=1".into(), "small.model.error_prob=0.5".into()]).unwrap();
        assert_eq!(o.engine.threshold.value(), 10);
        assert_eq!(o.engine.seed, 1);
        match &o.small {
            BackendSpec::Simulated { model, .. } => assert_eq!(model.error_prob, 0.5),
            _ => unreachable!(),
        }
        assert!(matches!(
            apply_overrides(&c, &["engine.thresold=3".into()]),
            Err(ConfigError::Override { .. })
        ));
        assert!(apply_overrides(&c, &["threshold=11".into()]).is_err());
        let o = apply_overrides(&c, &["engine.verify_template=null".into()]).unwrap();
        assert_eq!(o.engine.verify_template, None);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\n  \"small\": {\"kind\": \"simulated\"},\n  \"bogus\": 1\n}";
        match parse_config(text, "f.json") {
            Err(ConfigError::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::simulated(1, 2)).unwrap();
        v["engine"]["treshold"] = 3.into();
        assert!(parse_config(&v.to_string(), "x").is_err());
        let mut v = serde_json::to_value(ExperimentConfig::simulated(1, 2)).unwrap();
        v["small"]["extra"] = 3.into();
        assert!(parse_config(&v.to_string(), "x").is_err());
    }

    #[test]
    fn http_backend_spec_parses() {
        let text = r#"{"kind":"http","base_url":"http://localhost:8000","model":"m",
            "profile":{"name":"b","role":"Base","decode_s_per_token":0.05,"prefill_tokens_per_s":2000}}"#;
        let b: BackendSpec = serde_json::from_str(text).unwrap();
        b.validate("base", Role::Base).unwrap();
        assert!(b.validate("small", Role::Small).is_err());
    }

    #[test]
    fn role_mismatch_is_invalid() {
        let mut c = ExperimentConfig::simulated(1, 2);
        std::mem::swap(&mut c.small, &mut c.base);
        assert!(c.validate().is_err());
    }
}
