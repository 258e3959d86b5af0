//! Pulls JSON records out of the kinds of text models actually return.

use guide::backend::extract_structured;

fn main() {
    let samples = [
        r#"{"verdict": "success"}"#,
        "Sure, here it is:\n```json\n{\"verdict\": \"fail\", \"issues\": []}\n```",
        "My answer is {\"success\": true, \"reasoning\": \"cart shows 2 items\"} as requested.",
        "{\u{201c}score\u{201d}: 4, \"notes\": [\"ok\",],}",
        "I can't evaluate this trajectory.",
        "{\"verdict\": ",
    ];
    for s in samples {
        match extract_structured(s) {
            Ok(v) => println!("ok    {v}"),
            Err(e) => println!("error {e}"),
        }
    }
}
