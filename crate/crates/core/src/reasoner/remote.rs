use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{render_prompt, validate_response, Payload, Reasoner, ReasonerError, ReasonerQuery, ReasonerResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_retries() -> usize {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: None,
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            timeout_s: default_timeout(),
        }
    }
}

/// Sends one JSON request body and returns the raw response body.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, token: Option<&str>, body: &serde_json::Value) -> Result<String, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        Self { agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, token: Option<&str>, body: &serde_json::Value) -> Result<String, String> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        req.send_string(&body.to_string()).map_err(|e| e.to_string())?.into_string().map_err(|e| e.to_string())
    }
}

struct Gate {
    count: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

impl Gate {
    fn enter(&self) -> GateGuard<'_> {
        let mut n = self.count.lock().expect("gate lock");
        while *n >= self.limit {
            n = self.cv.wait(n).expect("gate lock");
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("gate lock") -= 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completion backend with transport retries, one schema re-prompt and
/// a bound on concurrent requests.
pub struct RemoteReasoner {
    config: RemoteConfig,
    transport: Box<dyn HttpTransport>,
    gate: Gate,
}

impl RemoteReasoner {
    pub fn new(config: RemoteConfig) -> Self {
        let transport = Box::new(UreqTransport::new(Duration::from_secs(config.timeout_s)));
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: RemoteConfig, transport: Box<dyn HttpTransport>) -> Self {
        let limit = config.max_in_flight.max(1);
        Self { config, transport, gate: Gate { count: Mutex::new(0), cv: Condvar::new(), limit } }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn send(&self, messages: &[serde_json::Value]) -> Result<String, ReasonerError> {
        let body = serde_json::json!({ "model": self.config.model, "messages": messages, "temperature": 0 });
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            let _slot = self.gate.enter();
            match self.transport.post_json(&self.endpoint(), self.config.token.as_deref(), &body) {
                Ok(raw) => return extract_content(&raw).map_err(ReasonerError::Transport),
                Err(e) => {
                    log::warn!("reasoner request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(ReasonerError::Transport(last))
    }
}

fn extract_content(raw: &str) -> Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| format!("response body is not JSON: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

/// Strips an optional fenced code block around a JSON answer.
fn strip_fence(s: &str) -> &str {
    let t = s.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

fn parse_payload(q: &ReasonerQuery, content: &str) -> Result<Payload, ReasonerError> {
    let payload: Payload = serde_json::from_str(strip_fence(content))
        .map_err(|e| ReasonerError::Schema { message: e.to_string(), transcript: content.to_string() })?;
    validate_response(q, &payload, content)?;
    Ok(payload)
}

impl Reasoner for RemoteReasoner {
    fn name(&self) -> &str {
        "remote"
    }

    fn query(&self, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError> {
        q.validate()?;
        let (system, user) = render_prompt(q);
        let mut user_content = vec![serde_json::json!({ "type": "text", "text": user })];
        for img in &q.images {
            let data = base64::engine::general_purpose::STANDARD.encode(img.to_pgm());
            let url = format!("data:image/x-portable-graymap;base64,{data}");
            user_content.push(serde_json::json!({ "type": "image_url", "image_url": { "url": url } }));
        }
        let mut messages = vec![
            serde_json::json!({ "role": "system", "content": system }),
            serde_json::json!({ "role": "user", "content": user_content }),
        ];
        let first = self.send(&messages)?;
        let err = match parse_payload(q, &first) {
            Ok(payload) => return Ok(ReasonerResponse { payload, transcript: first }),
            Err(e @ ReasonerError::Schema { .. }) | Err(e @ ReasonerError::UnknownReference { .. }) => e,
            Err(e) => return Err(e),
        };
        messages.push(serde_json::json!({ "role": "assistant", "content": first }));
        messages.push(serde_json::json!({
            "role": "user",
            "content": format!("Your answer was rejected: {err}. Reply again with a single valid JSON object."),
        }));
        let second = self.send(&messages)?;
        let transcript = format!("{first}\n---\n{second}");
        match parse_payload(q, &second) {
            Ok(payload) => Ok(ReasonerResponse { payload, transcript }),
            Err(ReasonerError::Schema { message, .. }) => Err(ReasonerError::Schema { message, transcript }),
            Err(ReasonerError::UnknownReference { names, .. }) => Err(ReasonerError::UnknownReference { names, transcript }),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::QueryKind;
    use crate::scene::{GraspGrid, Scene, SceneObject};
    use crate::{Pose, Vec3};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Fake {
        replies: Mutex<Vec<Result<String, String>>>,
        calls: Arc<AtomicUsize>,
    }

    impl HttpTransport for Fake {
        fn post_json(&self, _: &str, _: Option<&str>, _: &serde_json::Value) -> Result<String, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut r = self.replies.lock().unwrap();
            if r.is_empty() {
                Err("exhausted".into())
            } else {
                r.remove(0)
            }
        }
    }

    fn chat(content: &str) -> Result<String, String> {
        Ok(serde_json::json!({ "choices": [{ "message": { "content": content } }] }).to_string())
    }

    fn reasoner(replies: Vec<Result<String, String>>) -> (RemoteReasoner, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let fake = Fake { replies: Mutex::new(replies), calls: calls.clone() };
        (RemoteReasoner::with_transport(RemoteConfig::new("http://x", "m"), Box::new(fake)), calls)
    }

    fn grid_query() -> ReasonerQuery {
        let obj = SceneObject {
            id: "drawer".into(),
            pose: Pose::identity(),
            bbox_center: Pose::identity(),
            extents: Vec3::splat(0.2),
            parts: vec![],
        };
        let scene = Scene { objects: vec![obj], grid: Some(GraspGrid::new(10, 10).unwrap()), ..Default::default() };
        ReasonerQuery::new(QueryKind::GraspRegionSelection, scene).with_samples(1)
    }

    #[test]
    fn malformed_cell_is_schema_error_after_one_reprompt() {
        let bad = r#"{"kind":"grid_cells","samples":[{"perspective_a":"Z99","perspective_b":"A1"}]}"#;
        let (r, calls) = reasoner(vec![chat(bad), chat(bad)]);
        let err = r.query(&grid_query()).unwrap_err();
        assert!(matches!(err, ReasonerError::Schema { .. }), "{err:?}");
        assert!(err.transcript().unwrap().contains("Z99"));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn reprompt_recovers() {
        let bad = r#"{"kind":"grid_cells","samples":[]}"#;
        let good = "```json\n{\"kind\":\"grid_cells\",\"samples\":[{\"perspective_a\":\"C3\",\"perspective_b\":\"C4:C5\"}]}\n```";
        let (r, _) = reasoner(vec![chat(bad), chat(good)]);
        let resp = r.query(&grid_query()).unwrap();
        assert!(matches!(resp.payload, Payload::GridCells { .. }));
    }

    #[test]
    fn transport_retried_three_times() {
        let (r, calls) = reasoner(vec![Err("down".into()), Err("down".into()), Err("down".into()), Err("down".into())]);
        assert!(matches!(r.query(&grid_query()), Err(ReasonerError::Transport(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 4);
        let good = r#"{"kind":"grid_cells","samples":[{"perspective_a":"C3","perspective_b":"C4"}]}"#;
        let (r, calls) = reasoner(vec![Err("down".into()), chat(good)]);
        assert!(r.query(&grid_query()).is_ok());
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }
}
