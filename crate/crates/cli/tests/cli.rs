use std::path::Path;
use std::process::Command;

fn bevplan(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bevplan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn bevplan")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "[anchors]\nn = 3\nmax_iters = 20\n\
         [data]\ncount = 8\nagent_count = 1\n\
         [train]\nsteps = 2\nscore_steps = 2\n\
         [rollout]\nsteps = 1\n",
    )
    .unwrap();
    path
}

#[test]
fn pipeline_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let mut snapshots = Vec::new();
    for round in 0..2 {
        for step in [
            vec!["--config", "run.toml", "gen-data"],
            vec!["--config", "run.toml", "fit-anchors"],
            vec!["--config", "run.toml", "train"],
            vec!["--config", "run.toml", "evaluate", "--selector", "vloe"],
        ] {
            let out = bevplan(dir.path(), &step);
            assert!(out.status.success(), "round {round} {step:?}: {out:?}");
        }
        snapshots.push(
            ["scenarios.jsonl", "anchors.jsonl", "checkpoint.txt", "results.jsonl"]
                .map(|f| std::fs::read(dir.path().join(f)).unwrap()),
        );
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn seed_flag_changes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let a = bevplan(dir.path(), &["--config", "run.toml", "gen-data", "--out", "a.jsonl"]);
    assert!(a.status.success());
    let b = bevplan(
        dir.path(),
        &["--config", "run.toml", "--seed", "99", "gen-data", "--out", "b.jsonl"],
    );
    assert!(b.status.success());
    assert_ne!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap()
    );
}

#[test]
fn empty_dataset_is_still_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[data]\ncount = 0\n").unwrap();
    let out = bevplan(dir.path(), &["--config", "run.toml", "gen-data"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("scenarios.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "header only");
    assert!(lines[0].contains("schema_version"));
}

#[test]
fn error_exit_codes_follow_categories() {
    let dir = tempfile::tempdir().unwrap();
    // config category
    std::fs::write(dir.path().join("bad.toml"), "[grid]\nc = 1\n").unwrap();
    let out = bevplan(dir.path(), &["--config", "bad.toml", "gen-data"]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    // io category: missing input file
    let out = bevplan(dir.path(), &["fit-anchors"]);
    assert_eq!(out.status.code(), Some(7), "{out:?}");
    // clap handles unknown selector values itself
    let out = bevplan(dir.path(), &["evaluate", "--selector", "psychic"]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("psychic"), "{stderr}");
}

#[test]
fn report_renders_results_file() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    for step in [
        vec!["--config", "run.toml", "gen-data"],
        vec!["--config", "run.toml", "fit-anchors"],
        vec!["--config", "run.toml", "train"],
        vec!["--config", "run.toml", "evaluate", "--selector", "oracle"],
    ] {
        assert!(bevplan(dir.path(), &step).status.success());
    }
    let out = bevplan(dir.path(), &["--config", "run.toml", "report"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PDMS"), "{stdout}");
    assert!(stdout.contains("mean regret"), "{stdout}");
    // --out writes the same table to a file
    let out = bevplan(dir.path(), &["--config", "run.toml", "report", "--out", "report.txt"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("PDMS"));
}
