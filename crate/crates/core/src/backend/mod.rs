//! Uniform chat-model interface.
//!
//! Everything above this module talks to a [`Backend`]; the concrete
//! implementations are the deterministic [`MockBackend`] and the
//! OpenAI-compatible [`HttpBackend`].

mod audit;
mod extract;
mod http;
mod mock;
mod retry;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use audit::{AttemptMeta, AttemptOutcome, AuditRecord, AuditSink};
pub use extract::{extract_structured, ExtractError};
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{CallRecord, MockBackend, MockRule, MockScript};
pub use retry::{
    complete_with_retry, AttemptFailure, Clock, Completed, RetriesExhausted, RetryContext,
    RetryPolicy, RetryPolicyError, SystemClock, VirtualClock,
};

/// Pipeline stage a request belongs to.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Segment,
    Diagnose,
    Summarize,
    SegQuality,
    Baseline,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Segment,
        Stage::Diagnose,
        Stage::Summarize,
        Stage::SegQuality,
        Stage::Baseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Diagnose => "diagnose",
            Stage::Summarize => "summarize",
            Stage::SegQuality => "seg_quality",
            Stage::Baseline => "baseline",
        }
    }

    pub fn permits_images(&self) -> bool {
        !matches!(self, Stage::Segment)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image { media_type: String, bytes: Vec<u8> },
}

impl Part {
    pub fn is_image(&self) -> bool {
        matches!(self, Part::Image { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub stage: Stage,
    pub system_text: String,
    pub user_parts: Vec<Part>,
    /// `None` leaves the provider default in effect.
    pub temperature: Option<f64>,
    pub max_output: Option<u32>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("request has no user parts")]
    NoParts,
    #[error("stage {0} does not accept image parts")]
    ImagesForbidden(Stage),
}

impl ChatRequest {
    pub fn new(
        stage: Stage,
        system_text: impl Into<String>,
        user_parts: Vec<Part>,
    ) -> Result<Self, RequestError> {
        if user_parts.is_empty() {
            return Err(RequestError::NoParts);
        }
        if !stage.permits_images() && user_parts.iter().any(Part::is_image) {
            return Err(RequestError::ImagesForbidden(stage));
        }
        Ok(Self {
            stage,
            system_text: system_text.into(),
            user_parts,
            temperature: None,
            max_output: None,
        })
    }

    pub fn with_temperature(mut self, t: Option<f64>) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_output(mut self, m: Option<u32>) -> Self {
        self.max_output = m;
        self
    }

    pub fn image_count(&self) -> usize {
        self.user_parts.iter().filter(|p| p.is_image()).count()
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.user_parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable content hash: system text, concatenated text parts and the
    /// SHA-256 digest of each image, in part order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"system\0");
        h.update(self.system_text.as_bytes());
        for part in &self.user_parts {
            match part {
                Part::Text(t) => {
                    h.update(b"\0text\0");
                    h.update(t.as_bytes());
                }
                Part::Image { bytes, .. } => {
                    h.update(b"\0image\0");
                    h.update(Sha256::digest(bytes));
                }
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    /// Raw model output. May be empty.
    pub text: String,
    pub usage: Option<Usage>,
    pub latency: Duration,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
            latency: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("injected fault")]
    InjectedFault,
    #[error("no scripted response for stage {stage} (fingerprint {fingerprint})")]
    Unscripted { stage: Stage, fingerprint: String },
}

/// A chat model. Implementations must tolerate concurrent callers.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Short identifier recorded in report provenance.
    fn describe(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_stage_rejects_images() {
        let parts = vec![
            Part::Text("x".into()),
            Part::Image {
                media_type: "image/png".into(),
                bytes: vec![1],
            },
        ];
        assert_eq!(
            ChatRequest::new(Stage::Segment, "s", parts.clone()).unwrap_err(),
            RequestError::ImagesForbidden(Stage::Segment)
        );
        assert!(ChatRequest::new(Stage::Diagnose, "s", parts).is_ok());
        assert_eq!(
            ChatRequest::new(Stage::Diagnose, "s", vec![]).unwrap_err(),
            RequestError::NoParts
        );
    }

    #[test]
    fn fingerprint_tracks_content() {
        let mk = |t: &str, img: u8| {
            ChatRequest::new(
                Stage::Diagnose,
                "sys",
                vec![
                    Part::Text(t.into()),
                    Part::Image {
                        media_type: "image/png".into(),
                        bytes: vec![img],
                    },
                ],
            )
            .unwrap()
        };
        assert_eq!(mk("a", 1).fingerprint(), mk("a", 1).fingerprint());
        assert_ne!(mk("a", 1).fingerprint(), mk("b", 1).fingerprint());
        assert_ne!(mk("a", 1).fingerprint(), mk("a", 2).fingerprint());
        // temperature is not part of the content hash
        assert_eq!(
            mk("a", 1).with_temperature(Some(0.3)).fingerprint(),
            mk("a", 1).fingerprint()
        );
    }
}
