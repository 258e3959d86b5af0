//! Scripted backend for offline, deterministic runs.
//!
//! A response is chosen by, in order: a rule pinned to the request's exact
//! fingerprint; the first rule whose `contains` text occurs in the request's
//! text parts; the stage's default rule. Fault rules make the first `m` calls
//! for each distinct `(stage, fingerprint)` key fail.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRequest, ChatResponse, Stage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Calls per key that fail before the response is served.
    #[serde(default)]
    pub fail_first: u32,
    /// Text returned by failing calls. Without it, failures are transport
    /// errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_text: Option<String>,
}

impl MockRule {
    fn specificity(&self, req: &ChatRequest, fingerprint: &str, text: &str) -> Option<u8> {
        if self.stage != req.stage {
            return None;
        }
        match (&self.fingerprint, &self.contains) {
            (Some(fp), _) if fp == fingerprint => Some(0),
            (Some(_), _) => None,
            (None, Some(needle)) if text.contains(needle.as_str()) => Some(1),
            (None, Some(_)) => None,
            (None, None) => Some(2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(std::io::Error::other)
    }

    pub fn push(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_stage_default(self, stage: Stage, response: impl Into<String>) -> Self {
        self.push(MockRule {
            stage,
            response: Some(response.into()),
            ..Default::default()
        })
    }

    pub fn with_contains(
        self,
        stage: Stage,
        needle: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        self.push(MockRule {
            stage,
            contains: Some(needle.into()),
            response: Some(response.into()),
            ..Default::default()
        })
    }

    pub fn with_fingerprint(
        self,
        stage: Stage,
        fingerprint: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        self.push(MockRule {
            stage,
            fingerprint: Some(fingerprint.into()),
            response: Some(response.into()),
            ..Default::default()
        })
    }

    /// Every distinct request of `stage` fails `m` times before succeeding.
    pub fn with_stage_faults(self, stage: Stage, m: u32) -> Self {
        self.push(MockRule {
            stage,
            fail_first: m,
            ..Default::default()
        })
    }

    /// Requests of `stage` containing `needle` fail `m` times.
    pub fn with_contains_faults(self, stage: Stage, needle: impl Into<String>, m: u32) -> Self {
        self.push(MockRule {
            stage,
            contains: Some(needle.into()),
            fail_first: m,
            ..Default::default()
        })
    }

    fn best<'a>(
        &'a self,
        req: &ChatRequest,
        fingerprint: &str,
        text: &str,
        want: impl Fn(&MockRule) -> bool,
    ) -> Option<&'a MockRule> {
        self.rules
            .iter()
            .filter(|r| want(r))
            .filter_map(|r| r.specificity(req, fingerprint, text).map(|s| (s, r)))
            .min_by_key(|(s, _)| *s)
            .map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub image_parts: usize,
}

#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    faults: Mutex<HashMap<(Stage, String), u32>>,
    log: Mutex<Vec<CallRecord>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            ..Default::default()
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn calls_for(&self, stage: Stage) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.stage == stage)
            .count()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    pub fn reset_faults(&self) {
        self.faults.lock().unwrap().clear();
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let fingerprint = req.fingerprint();
        let text = req.text();
        self.log.lock().unwrap().push(CallRecord {
            stage: req.stage,
            fingerprint: fingerprint.clone(),
            image_parts: req.image_count(),
        });

        if let Some(rule) = self
            .script
            .best(req, &fingerprint, &text, |r| r.fail_first > 0)
        {
            let mut faults = self.faults.lock().unwrap();
            let seen = faults.entry((req.stage, fingerprint.clone())).or_insert(0);
            if *seen < rule.fail_first {
                *seen += 1;
                return match &rule.fault_text {
                    Some(t) => Ok(ChatResponse::text(t.clone())),
                    None => Err(BackendError::InjectedFault),
                };
            }
        }

        match self
            .script
            .best(req, &fingerprint, &text, |r| r.response.is_some())
        {
            Some(rule) => Ok(ChatResponse::text(rule.response.clone().unwrap_or_default())),
            None => Err(BackendError::Unscripted {
                stage: req.stage,
                fingerprint,
            }),
        }
    }

    fn describe(&self) -> String {
        format!("mock({} rules)", self.script.rules.len())
    }
}
