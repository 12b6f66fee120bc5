use std::sync::Arc;
use std::time::Duration;

use aho_corasick::AhoCorasick;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::LlmError;

/// How a scripted rule recognizes a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Substring(String),
    /// A regular expression. Its capture groups may be referenced from the
    /// response as `${1}`, `${name}`, and so on.
    Regex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: Pattern,
    pub response: String,
}

/// Ordered pattern → response table; the first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScriptedConfig {
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_max_tokens() -> u32 {
    256
}

fn default_pointer() -> String {
    "/text".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// JSON pointer to the completion text in the response body.
    #[serde(default = "default_pointer")]
    pub response_pointer: String,
    /// Extra provider-specific fields merged into the request body.
    #[serde(default)]
    pub extra_body: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Scripted(ScriptedConfig),
    Remote(RemoteConfig),
}

impl BackendConfig {
    /// A scripted backend that repeats the tree's outcome when the prompt
    /// carries one, and answers `unknown` otherwise.
    pub fn tree_echo() -> Self {
        BackendConfig::Scripted(ScriptedConfig {
            rules: vec![ScriptRule {
                pattern: Pattern::Regex(r"(?m)^outcome (\S+) \(confidence".into()),
                response: "ANSWER: ${1} | RATIONALE: consistent with the tree".into(),
            }],
            default: Some("ANSWER: unknown".into()),
        })
    }
}

/// Compiled rule table. All substring patterns share one automaton, so a
/// lookup costs one pass over the prompt however many rules there are.
#[derive(Debug)]
struct Script {
    responses: Vec<String>,
    substrings: AhoCorasick,
    /// Rule index of each automaton pattern.
    substring_rule: Vec<usize>,
    regexes: Vec<(usize, Regex)>,
    default: Option<String>,
}

impl Script {
    fn generate(&self, prompt: &str) -> Option<String> {
        let first_substring = self
            .substrings
            .find_overlapping_iter(prompt)
            .map(|m| self.substring_rule[m.pattern().as_usize()])
            .min();
        for (rule, re) in &self.regexes {
            if first_substring.is_some_and(|s| s < *rule) {
                break;
            }
            if let Some(caps) = re.captures(prompt) {
                let mut out = String::new();
                caps.expand(&self.responses[*rule], &mut out);
                return Some(out);
            }
        }
        first_substring
            .map(|rule| self.responses[rule].clone())
            .or_else(|| self.default.clone())
    }
}

#[derive(Debug)]
enum Inner {
    Scripted(Script),
    Remote(RemoteConfig),
}

/// A ready-to-use backend. Cheap to clone; the compiled rule table is shared
/// and never changes after construction.
#[derive(Debug, Clone)]
pub struct Backend {
    inner: Arc<Inner>,
}

impl Backend {
    pub fn new(config: &BackendConfig) -> Result<Self, LlmError> {
        let inner = match config {
            BackendConfig::Scripted(s) => {
                if s.rules.is_empty() && s.default.is_none() {
                    return Err(LlmError::InvalidConfig("scripted backend needs a rule or a default".into()));
                }
                let mut substrings = Vec::new();
                let mut substring_rule = Vec::new();
                let mut regexes = Vec::new();
                for (i, r) in s.rules.iter().enumerate() {
                    match &r.pattern {
                        Pattern::Substring(p) => {
                            substrings.push(p.as_str());
                            substring_rule.push(i);
                        }
                        Pattern::Regex(p) => regexes.push((
                            i,
                            Regex::new(p).map_err(|e| LlmError::InvalidConfig(format!("pattern {p:?}: {e}")))?,
                        )),
                    }
                }
                let substrings = AhoCorasick::new(&substrings)
                    .map_err(|e| LlmError::InvalidConfig(format!("substring patterns: {e}")))?;
                Inner::Scripted(Script {
                    responses: s.rules.iter().map(|r| r.response.clone()).collect(),
                    substrings,
                    substring_rule,
                    regexes,
                    default: s.default.clone(),
                })
            }
            BackendConfig::Remote(r) => {
                if r.temperature != 0.0 {
                    return Err(LlmError::InvalidConfig("remote temperature must be 0".into()));
                }
                if r.timeout_ms == 0 {
                    return Err(LlmError::InvalidConfig("timeout_ms must be positive".into()));
                }
                Inner::Remote(r.clone())
            }
        };
        Ok(Self { inner: Arc::new(inner) })
    }

    pub fn is_scripted(&self) -> bool {
        matches!(*self.inner, Inner::Scripted(_))
    }

    pub fn generate(&self, prompt: &str) -> Result<String, LlmError> {
        match &*self.inner {
            Inner::Scripted(script) => script.generate(prompt).ok_or(LlmError::NoRuleMatched),
            Inner::Remote(cfg) => remote_generate(cfg, prompt),
        }
    }
}

fn remote_generate(cfg: &RemoteConfig, prompt: &str) -> Result<String, LlmError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut body = json!({
        "model": cfg.model,
        "prompt": prompt,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    });
    if let Value::Object(o) = &mut body {
        for (k, v) in &cfg.extra_body {
            o.insert(k.clone(), v.clone());
        }
    }
    let token = cfg.token_env.as_ref().and_then(|var| std::env::var(var).ok());

    let mut last = LlmError::BackendHttpError {
        status: None,
        message: "no attempt made".into(),
    };
    for _ in 0..=cfg.max_retries {
        let mut req = agent.post(&cfg.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if !(200..300).contains(&status) {
                    last = LlmError::BackendHttpError {
                        status: Some(status),
                        message: "non-success status".into(),
                    };
                    // client errors will not improve on retry
                    if (400..500).contains(&status) && status != 429 {
                        return Err(last);
                    }
                    continue;
                }
                let v: Value = resp.body_mut().read_json().map_err(|e| LlmError::BackendHttpError {
                    status: Some(status),
                    message: format!("response is not JSON: {e}"),
                })?;
                return v
                    .pointer(&cfg.response_pointer)
                    .and_then(Value::as_str)
                    .map(String::from)
                    .ok_or_else(|| LlmError::BackendHttpError {
                        status: Some(status),
                        message: format!("no string at {}", cfg.response_pointer),
                    });
            }
            Err(ureq::Error::Timeout(_)) => last = LlmError::BackendTimeout,
            Err(e) => {
                last = LlmError::BackendHttpError {
                    status: None,
                    message: e.to_string(),
                }
            }
        }
    }
    Err(last)
}
