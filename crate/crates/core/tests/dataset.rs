use guide::trajectory::{
    load_dataset, write_dataset, Dataset, IngestError, IngestOptions, ScreenshotRef, Step,
    TaskInstance, Trajectory,
};
use proptest::prelude::*;

fn task_strategy() -> impl Strategy<Value = TaskInstance> {
    (
        "[a-z0-9]{1,8}",
        "[ -~]{1,40}",
        proptest::option::of(any::<bool>()),
        proptest::collection::vec(("[ -~]{1,30}", proptest::option::of("[a-z]{1,6}\\.png")), 1..12),
        proptest::option::of("[a-z]{1,6}\\.png"),
    )
        .prop_filter("non-blank text", |(_, instr, _, steps, _)| {
            !instr.trim().is_empty() && steps.iter().all(|(a, _)| !a.trim().is_empty())
        })
        .prop_map(|(id, instruction, gold, steps, initial)| {
            let steps = steps
                .into_iter()
                .enumerate()
                .map(|(index, (action_text, shot))| Step {
                    index,
                    action_text,
                    screenshot_ref: shot.map(ScreenshotRef),
                })
                .collect();
            TaskInstance {
                task_id: id,
                instruction,
                gold_label: gold,
                source_tag: None,
                trajectory: Trajectory::new(initial.map(ScreenshotRef), steps).unwrap(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_load_is_identity(tasks in proptest::collection::vec(task_strategy(), 1..8)) {
        let mut seen = std::collections::HashSet::new();
        let tasks: Vec<_> = tasks.into_iter().filter(|t| seen.insert(t.task_id.clone())).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = Dataset::from_items("d", dir.path(), tasks.clone());
        write_dataset(&ds, std::fs::File::create(&path).unwrap()).unwrap();
        let back = load_dataset(&path, &IngestOptions::default()).unwrap();
        prop_assert_eq!(back.items, tasks);
    }
}

#[test]
fn one_based_indices_are_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(
        &path,
        r#"{"task_id": "a", "instruction": "do", "gold_label": true, "steps": [{"index": 2, "action": "second"}, {"index": 1, "action": "first"}]}"#,
    )
    .unwrap();
    let ds = load_dataset(&path, &IngestOptions::default()).unwrap();
    let steps = ds.items[0].trajectory.steps();
    assert_eq!(steps[0].action_text, "first");
    assert_eq!(steps[1].index, 1);
}

#[test]
fn duplicate_ids_and_missing_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let line = r#"{"task_id": "a", "instruction": "do", "steps": [{"index": 0, "action": "x", "screenshot": "s.png"}]}"#;
    std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
    assert!(matches!(
        load_dataset(&path, &IngestOptions::default()),
        Err(IngestError::DuplicateTaskId { first_line: 1, second_line: 2, .. })
    ));
    std::fs::write(&path, line).unwrap();
    assert!(load_dataset(&path, &IngestOptions::default()).is_ok());
    assert!(matches!(
        load_dataset(&path, &IngestOptions { verify_images: true }),
        Err(IngestError::MissingImage { .. })
    ));
}
