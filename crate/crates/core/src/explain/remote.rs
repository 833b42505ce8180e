//! Optional HTTP text generator. POSTs `{"prompt", "max_tokens"}` and expects
//! `{"text"}` back.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{
    render_template, ActionCatalog, DirectedCause, ExplainError, Explanation, ExplanationPrompt, ExplanationSource,
};
use crate::anomaly::AnomalyEvent;

pub const URL_ENV: &str = "INSIGHT_REMOTE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// No URL means template only.
    pub url: Option<String>,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    /// Extra attempts after the first one.
    pub retries: u32,
    /// Initial backoff, doubled after every failed attempt.
    pub backoff_ms: u64,
    /// Render the template when the endpoint fails instead of erroring.
    pub fallback: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self { url: None, max_tokens: 256, timeout_secs: 30, retries: 2, backoff_ms: 500, fallback: true }
    }
}

impl RemoteConfig {
    /// Fills `url` from the environment when it is not set explicitly.
    pub fn with_env(mut self) -> Self {
        if self.url.is_none() {
            self.url = std::env::var(URL_ENV).ok().filter(|s| !s.trim().is_empty());
        }
        self
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.max_tokens == 0 {
            return Err(("max_tokens", "must be positive".into()));
        }
        if self.timeout_secs == 0 {
            return Err(("timeout_secs", "must be positive".into()));
        }
        if let Some(url) = &self.url {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(("url", format!("`{url}` is not an http(s) URL")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

enum Attempt {
    Retry(ExplainError),
    Fatal(ExplainError),
}

fn attempt(agent: &ureq::Agent, url: &str, body: &GenerateRequest<'_>) -> Result<String, Attempt> {
    let mut resp =
        agent.post(url).send_json(body).map_err(|e| Attempt::Retry(ExplainError::RemoteUnavailable(e.to_string())))?;
    let status = resp.status().as_u16();
    if status >= 500 || status == 429 {
        return Err(Attempt::Retry(ExplainError::RemoteUnavailable(format!("HTTP {status}"))));
    }
    if status >= 400 {
        return Err(Attempt::Fatal(ExplainError::RemoteUnavailable(format!("HTTP {status}"))));
    }
    let raw =
        resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(ExplainError::RemoteUnavailable(e.to_string())))?;
    let parsed: GenerateResponse =
        serde_json::from_str(&raw).map_err(|e| Attempt::Fatal(ExplainError::MalformedResponse(e.to_string())))?;
    if parsed.text.trim().is_empty() {
        return Err(Attempt::Fatal(ExplainError::MalformedResponse("empty `text`".into())));
    }
    Ok(parsed.text)
}

/// Sends the prompt, retrying transport failures and 5xx/429 replies with
/// exponential backoff. Malformed bodies and other 4xx replies are not retried.
pub fn request_remote_explanation(cfg: &RemoteConfig, prompt: &ExplanationPrompt) -> Result<String, ExplainError> {
    let url = cfg.url.as_deref().ok_or_else(|| ExplainError::RemoteUnavailable("no URL configured".into()))?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = GenerateRequest { prompt: &prompt.text, max_tokens: cfg.max_tokens };
    let mut backoff = Duration::from_millis(cfg.backoff_ms);
    let mut last = None;
    for n in 0..=cfg.retries {
        if n > 0 {
            thread::sleep(backoff);
            backoff = backoff.saturating_mul(2);
        }
        match attempt(&agent, url, &body) {
            Ok(text) => return Ok(text),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(e)) => {
                debug!(attempt = n + 1, error = %e, "remote request failed");
                last = Some(e);
            }
        }
    }
    Err(last.unwrap_or_else(|| ExplainError::RemoteUnavailable("no attempt made".into())))
}

/// An explanation plus the remote error that forced a template fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOutcome {
    pub explanation: Explanation,
    pub fallback_reason: Option<ExplainError>,
}

/// Remote generation when a URL is configured, template otherwise.
pub fn explain(
    prompt: &ExplanationPrompt,
    causes: &[DirectedCause],
    target: &str,
    anomaly: &AnomalyEvent,
    catalog: &ActionCatalog,
    remote: Option<&RemoteConfig>,
) -> Result<RemoteOutcome, ExplainError> {
    let Some(cfg) = remote.filter(|c| c.url.is_some()) else {
        return Ok(RemoteOutcome {
            explanation: render_template(causes, target, anomaly, catalog)?,
            fallback_reason: None,
        });
    };
    match request_remote_explanation(cfg, prompt) {
        Ok(text) => Ok(RemoteOutcome {
            explanation: Explanation { text, source: ExplanationSource::Remote, causes: causes.to_vec() },
            fallback_reason: None,
        }),
        Err(e) if cfg.fallback => {
            warn!(error = %e, "remote explanation failed; using template");
            Ok(RemoteOutcome {
                explanation: render_template(causes, target, anomaly, catalog)?,
                fallback_reason: Some(e),
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = RemoteConfig::default();
        assert_eq!((c.timeout_secs, c.retries, c.fallback), (30, 2, true));
        assert!(c.validate().is_ok());
        let bad = RemoteConfig { url: Some("ftp://x".into()), ..RemoteConfig::default() };
        assert_eq!(bad.validate().unwrap_err().0, "url");
        assert_eq!(RemoteConfig { max_tokens: 0, ..c }.validate().unwrap_err().0, "max_tokens");
    }

    #[test]
    fn no_url_is_unavailable() {
        let p = ExplanationPrompt { text: "x".into() };
        assert!(matches!(
            request_remote_explanation(&RemoteConfig::default(), &p),
            Err(ExplainError::RemoteUnavailable(_))
        ));
    }

    #[test]
    fn connection_refused_falls_back() {
        // bind then drop to get a port nobody listens on
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = RemoteConfig {
            url: Some(format!("http://127.0.0.1:{port}/generate")),
            retries: 1,
            backoff_ms: 1,
            ..RemoteConfig::default()
        };
        let causes =
            [DirectedCause { channel: "occupancy".into(), direction: super::super::Direction::Up, f_stat: 2.0 }];
        let prompt = super::super::build_prompt(&causes).unwrap();
        let ev = AnomalyEvent { time: 0, index: 30, z_score: 4.0, magnitude: 1.0 };
        let out = explain(&prompt, &causes, "energy", &ev, &ActionCatalog::default(), Some(&cfg)).unwrap();
        assert_eq!(out.explanation.source, ExplanationSource::Template);
        assert!(matches!(out.fallback_reason, Some(ExplainError::RemoteUnavailable(_))));

        let strict = RemoteConfig { fallback: false, ..cfg };
        assert!(matches!(
            explain(&prompt, &causes, "energy", &ev, &ActionCatalog::default(), Some(&strict)),
            Err(ExplainError::RemoteUnavailable(_))
        ));
    }
}
