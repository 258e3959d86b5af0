//! Shows the backoff schedule against a backend that fails a few times,
//! using a virtual clock so nothing actually sleeps.

use guide::backend::{
    complete_with_retry, extract_structured, AuditSink, ChatRequest, MockBackend, MockScript, Part,
    RetryContext, RetryPolicy, Stage, VirtualClock,
};

fn main() {
    let policy = RetryPolicy::default();
    let audit = AuditSink::memory();
    let req = ChatRequest::new(Stage::Diagnose, "You are a judge.", vec![Part::Text("Was the item added?".into())]).unwrap();

    for faults in [0, 3, 10] {
        let backend = MockBackend::new(
            MockScript::default()
                .with_stage_faults(Stage::Diagnose, faults)
                .with_stage_default(Stage::Diagnose, r#"{"verdict": "success"}"#),
        );
        let clock = VirtualClock::new();
        let ctx = RetryContext { policy: &policy, clock: &clock, audit: &audit, seed: 1 };
        let result = complete_with_retry(&backend, &req, ctx, |t| extract_structured(t).map_err(|e| e.to_string()));
        let slept: Vec<String> = clock.sleeps().iter().map(|d| format!("{:.2}s", d.as_secs_f64())).collect();
        match result {
            Ok(c) => println!("{faults:>2} faults: ok after {} attempts, slept [{}]", c.attempts, slept.join(", ")),
            Err(e) => println!("{faults:>2} faults: {e}; slept {:.1}s in total", clock.total().as_secs_f64()),
        }
    }
    println!("{} attempts recorded in the audit log", audit.records().len());
}
