use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::audit::{AttemptMeta, AttemptOutcome, AuditSink};
use super::{Backend, ChatRequest, Usage};

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "duration_ms")]
    pub base_delay: Duration,
    pub factor: f64,
    #[serde(with = "duration_ms")]
    pub max_delay: Duration,
    pub jitter_fraction: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 10,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
            jitter_fraction: 0.2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RetryPolicyError {
    #[error("max_attempts must be at least 1")]
    NoAttempts,
    #[error("factor must be >= 1, got {0}")]
    Factor(f64),
    #[error("base_delay exceeds max_delay")]
    DelayOrder,
    #[error("jitter_fraction must lie in [0, 1], got {0}")]
    Jitter(f64),
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), RetryPolicyError> {
        if self.max_attempts < 1 {
            return Err(RetryPolicyError::NoAttempts);
        }
        if !(self.factor >= 1.0) {
            return Err(RetryPolicyError::Factor(self.factor));
        }
        if self.base_delay > self.max_delay {
            return Err(RetryPolicyError::DelayOrder);
        }
        if !(0.0..=1.0).contains(&self.jitter_fraction) {
            return Err(RetryPolicyError::Jitter(self.jitter_fraction));
        }
        Ok(())
    }

    /// Delay slept before 1-based `attempt`, before jitter. Zero for the
    /// first attempt, then `min(max_delay, base * factor^(attempt - 2))`.
    pub fn pre_jitter_delay(&self, attempt: u32) -> Duration {
        if attempt < 2 {
            return Duration::ZERO;
        }
        let scaled = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32 - 2);
        if !scaled.is_finite() || scaled >= self.max_delay.as_secs_f64() {
            self.max_delay
        } else {
            Duration::from_secs_f64(scaled)
        }
    }
}

/// Source of sleeping. Tests use [`VirtualClock`] so no real time passes.
pub trait Clock: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Records requested sleeps and returns immediately.
#[derive(Debug, Default)]
pub struct VirtualClock {
    sleeps: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }

    pub fn total(&self) -> Duration {
        self.sleeps.lock().unwrap().iter().sum()
    }
}

impl Clock for VirtualClock {
    fn sleep(&self, d: Duration) {
        self.sleeps.lock().unwrap().push(d);
    }
}

/// Shared state for a series of retried calls.
#[derive(Clone, Copy)]
pub struct RetryContext<'a> {
    pub policy: &'a RetryPolicy,
    pub clock: &'a dyn Clock,
    pub audit: &'a AuditSink,
    /// Jitter seed. Each request derives its own generator from this seed and
    /// its fingerprint, so concurrent callers cannot perturb each other.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptFailure {
    pub attempt: u32,
    pub kind: FailureKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completed<T> {
    pub value: T,
    pub attempts: u32,
    pub raw_text: String,
    pub usage: Usage,
    /// Pre-jitter backoff before each retry.
    pub delays: Vec<Duration>,
    /// Response latency plus time slept.
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("retries exhausted after {attempts} attempts: {}", .failures.last().map(|f| f.reason.as_str()).unwrap_or(""))]
pub struct RetriesExhausted {
    pub attempts: u32,
    pub failures: Vec<AttemptFailure>,
    pub last_text: Option<String>,
    pub usage: Usage,
    pub delays: Vec<Duration>,
    pub elapsed: Duration,
}

fn jitter_rng(seed: u64, fingerprint: &str) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(fingerprint.as_bytes())
        .finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Sends `request` until `validate` accepts a response or the attempt budget
/// runs out. Transport errors and validation failures both use up an attempt.
pub fn complete_with_retry<B, T, F>(
    backend: &B,
    request: &ChatRequest,
    ctx: RetryContext<'_>,
    validate: F,
) -> Result<Completed<T>, RetriesExhausted>
where
    B: Backend + ?Sized,
    F: Fn(&str) -> Result<T, String>,
{
    let policy = ctx.policy;
    let fingerprint = request.fingerprint();
    let mut rng = jitter_rng(ctx.seed, &fingerprint);
    let mut failures = Vec::new();
    let mut delays = Vec::new();
    let mut usage = Usage::default();
    let mut elapsed = Duration::ZERO;
    let mut last_text = None;

    for attempt in 1..=policy.max_attempts.max(1) {
        if attempt >= 2 {
            let base = policy.pre_jitter_delay(attempt);
            let j = policy.jitter_fraction;
            let scale = if j > 0.0 {
                rng.random_range(1.0 - j..=1.0 + j)
            } else {
                1.0
            };
            let actual = base.mul_f64(scale);
            delays.push(base);
            ctx.clock.sleep(actual);
            elapsed += actual;
        }

        let meta = |outcome, detail: Option<String>| AttemptMeta {
            stage: request.stage,
            fingerprint: fingerprint.clone(),
            attempt,
            outcome,
            detail,
        };

        match backend.complete(request) {
            Err(e) => {
                ctx.audit
                    .record(&meta(AttemptOutcome::TransportError, Some(e.to_string())), None);
                failures.push(AttemptFailure {
                    attempt,
                    kind: FailureKind::Transport,
                    reason: e.to_string(),
                });
            }
            Ok(resp) => {
                elapsed += resp.latency;
                if let Some(u) = resp.usage {
                    usage += u;
                }
                match validate(&resp.text) {
                    Ok(value) => {
                        ctx.audit.record(&meta(AttemptOutcome::Ok, None), Some(&resp));
                        return Ok(Completed {
                            value,
                            attempts: attempt,
                            raw_text: resp.text,
                            usage,
                            delays,
                            elapsed,
                        });
                    }
                    Err(reason) => {
                        ctx.audit.record(
                            &meta(AttemptOutcome::Invalid, Some(reason.clone())),
                            Some(&resp),
                        );
                        failures.push(AttemptFailure {
                            attempt,
                            kind: FailureKind::Validation,
                            reason,
                        });
                        last_text = Some(resp.text);
                    }
                }
            }
        }
    }

    Err(RetriesExhausted {
        attempts: policy.max_attempts.max(1),
        failures,
        last_text,
        usage,
        delays,
        elapsed,
    })
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript, Part, Stage};

    fn req() -> ChatRequest {
        ChatRequest::new(Stage::Summarize, "sys", vec![Part::Text("hello".into())]).unwrap()
    }

    fn accept(text: &str) -> Result<String, String> {
        if text == "ok" {
            Ok(text.to_owned())
        } else {
            Err(format!("bad text {text:?}"))
        }
    }

    #[test]
    fn pre_jitter_schedule_is_monotone_and_capped() {
        let p = RetryPolicy::default();
        let secs: Vec<f64> = (1..=10).map(|k| p.pre_jitter_delay(k).as_secs_f64()).collect();
        assert_eq!(secs, vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 60.0, 60.0, 60.0]);
        assert_eq!(p.pre_jitter_delay(400), p.max_delay);
    }

    #[test]
    fn first_attempt_success_sleeps_zero() {
        let backend = MockBackend::new(MockScript::default().with_stage_default(Stage::Summarize, "ok"));
        let clock = VirtualClock::new();
        let audit = AuditSink::memory();
        let policy = RetryPolicy::default();
        let ctx = RetryContext { policy: &policy, clock: &clock, audit: &audit, seed: 7 };
        let done = complete_with_retry(&backend, &req(), ctx, accept).unwrap();
        assert_eq!(done.attempts, 1);
        assert!(clock.sleeps().is_empty());
        assert_eq!(audit.records().len(), 1);
    }

    #[test]
    fn validation_failures_consume_attempts() {
        let backend = MockBackend::new(MockScript::default().with_stage_default(Stage::Summarize, "nope"));
        let clock = VirtualClock::new();
        let audit = AuditSink::Disabled;
        let policy = RetryPolicy { max_attempts: 3, ..RetryPolicy::default() };
        let ctx = RetryContext { policy: &policy, clock: &clock, audit: &audit, seed: 7 };
        let err = complete_with_retry(&backend, &req(), ctx, accept).unwrap_err();
        assert_eq!(err.attempts, 3);
        assert_eq!(err.failures.len(), 3);
        assert!(err.failures.iter().all(|f| f.kind == FailureKind::Validation));
        assert_eq!(err.last_text.as_deref(), Some("nope"));
    }

    #[test]
    fn jitter_stays_in_band_and_is_seeded() {
        let backend = MockBackend::new(
            MockScript::default()
                .with_stage_default(Stage::Summarize, "ok")
                .with_stage_faults(Stage::Summarize, 5),
        );
        let run = |seed| {
            backend.reset_faults();
            let clock = VirtualClock::new();
            let audit = AuditSink::Disabled;
            let policy = RetryPolicy::default();
            let ctx = RetryContext { policy: &policy, clock: &clock, audit: &audit, seed };
            let done = complete_with_retry(&backend, &req(), ctx, accept).unwrap();
            assert_eq!(done.attempts, 6);
            for (actual, base) in clock.sleeps().iter().zip(&done.delays) {
                let ratio = actual.as_secs_f64() / base.as_secs_f64();
                assert!((0.8..=1.2).contains(&ratio), "{ratio}");
            }
            clock.sleeps()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn policy_validation() {
        assert!(RetryPolicy::default().validate().is_ok());
        let bad = RetryPolicy { max_attempts: 0, ..Default::default() };
        assert_eq!(bad.validate(), Err(RetryPolicyError::NoAttempts));
        let bad = RetryPolicy { factor: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetryPolicy { base_delay: Duration::from_secs(100), ..Default::default() };
        assert_eq!(bad.validate(), Err(RetryPolicyError::DelayOrder));
        let bad = RetryPolicy { jitter_fraction: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn backoff_non_decreasing(base_ms in 1u64..5000, factor in 1.0f64..4.0, cap_ms in 5000u64..120_000) {
            let p = RetryPolicy {
                base_delay: Duration::from_millis(base_ms),
                factor,
                max_delay: Duration::from_millis(cap_ms),
                ..Default::default()
            };
            let mut prev = Duration::ZERO;
            for k in 1..40 {
                let d = p.pre_jitter_delay(k);
                proptest::prop_assert!(d >= prev);
                proptest::prop_assert!(d <= p.max_delay);
                prev = d;
            }
        }
    }
}
