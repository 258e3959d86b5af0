//! Shared plumbing for the model-backed stages.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{
    complete_with_retry, extract_structured, Backend, ChatRequest, Completed, RetriesExhausted,
    RetryContext, Stage, Usage,
};
use crate::media::ImageLoader;
use crate::prompts::PromptSet;

/// Per-stage request knobs. Unset temperature means provider default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSettings {
    pub temperature: BTreeMap<Stage, f64>,
    pub max_output: Option<u32>,
}

/// Everything a stage needs to issue model calls.
#[derive(Clone, Copy)]
pub struct StageEnv<'a> {
    pub backend: &'a dyn Backend,
    pub retry: RetryContext<'a>,
    pub prompts: &'a PromptSet,
    pub images: &'a ImageLoader,
    pub settings: &'a StageSettings,
}

impl StageEnv<'_> {
    pub(crate) fn finish(&self, req: ChatRequest) -> ChatRequest {
        let t = self.settings.temperature.get(&req.stage).copied();
        req.with_temperature(t).with_max_output(self.settings.max_output)
    }

    /// Sends `req` and validates the response as a JSON record accepted by
    /// `schema`.
    pub(crate) fn call_json<T>(
        &self,
        req: &ChatRequest,
        schema: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<Completed<T>, RetriesExhausted> {
        complete_with_retry(self.backend, req, self.retry, |text| {
            let value = extract_structured(text).map_err(|e| e.to_string())?;
            schema(&value)
        })
    }
}

/// Accounting for one stage of one trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    /// Logical calls, excluding retries.
    pub calls: u32,
    pub attempts: u32,
    pub failed_calls: u32,
    pub usage: Usage,
    /// Response latency plus backoff, in milliseconds.
    pub elapsed_ms: u64,
}

impl StageStats {
    pub fn from_completed<T>(c: &Completed<T>) -> Self {
        Self {
            calls: 1,
            attempts: c.attempts,
            failed_calls: 0,
            usage: c.usage,
            elapsed_ms: millis(c.elapsed),
        }
    }

    pub fn from_exhausted(e: &RetriesExhausted) -> Self {
        Self {
            calls: 1,
            attempts: e.attempts,
            failed_calls: 1,
            usage: e.usage,
            elapsed_ms: millis(e.elapsed),
        }
    }

    pub fn merge(&mut self, other: &StageStats) {
        self.calls += other.calls;
        self.attempts += other.attempts;
        self.failed_calls += other.failed_calls;
        self.usage += other.usage;
        self.elapsed_ms += other.elapsed_ms;
    }
}

fn millis(d: Duration) -> u64 {
    d.as_millis() as u64
}

// Field helpers for schema validators.

pub(crate) fn get_str<'v>(v: &'v Value, key: &str) -> Option<&'v str> {
    v.get(key).and_then(Value::as_str)
}

pub(crate) fn get_trimmed(v: &Value, key: &str) -> String {
    get_str(v, key).map(str::trim).unwrap_or_default().to_owned()
}

/// Integer that may arrive as a number or a numeric string.
pub(crate) fn as_int(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.is_finite()).map(|f| f.round() as i64)),
        Value::String(s) => {
            let s = s.trim();
            s.parse::<i64>()
                .ok()
                .or_else(|| s.parse::<f64>().ok().filter(|f| f.is_finite()).map(|f| f.round() as i64))
        }
        _ => None,
    }
}

/// Position of `key` among the record's keys, in document order.
pub(crate) fn key_position(v: &Value, key: &str) -> Option<usize> {
    v.as_object()?.keys().position(|k| k == key)
}
