use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dyncfg::output::read_manifest;

const CONFIG: &str = r#"
seed = 2
workers = 2

[world]
preset = "default"

[schedule]
steps = 40

[evaluator.align]
kind = "alignment-oracle"

[evaluator.quality]
kind = "quality-oracle"

[policy.fixed]
kind = "fixed"

[policy.dyn]
kind = "dynamic"
evaluators = ["align", "quality"]

[policy.mean]
kind = "mean-of-dynamic"
source = "dyn"

[experiment]
seeds = 12
reference_draws = 300

[filter]
evaluators = ["align"]
policy = "fixed"
"#;

fn dyncfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyncfg")).args(args).output().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn compare_writes_table_and_manifest() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = dyncfg(&["compare", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("table2_analog.csv")).unwrap();
    assert!(table.starts_with("# schema_version=1\npolicy,"));
    assert_eq!(table.lines().count(), 5);
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.status, "complete");
    assert_eq!(m.command, "compare");
    assert!(m.outputs.contains_key("table2_analog.csv") && m.outputs.contains_key("op_counts.csv"));

    let r = dyncfg(&["report", "--run", s(&out), "--verify"]);
    assert!(r.status.success(), "{}", stderr(&r));
}

#[test]
fn search_is_deterministic_under_a_seed_override() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dyncfg(&["search", "--config", s(&cfg), "--seed", "7", "--out", s(out), "--svg"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ma, mb) = (read_manifest(&a).unwrap(), read_manifest(&b).unwrap());
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.master_seed, 7);
    assert!(ma.outputs.contains_key("traces/cell_00011.csv"));
    assert!(ma.outputs.contains_key("schedule.svg"));
}

#[test]
fn rerun_needs_force() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let args = ["sample", "--config", s(&cfg), "--out", s(&out)];
    assert!(dyncfg(&args).status.success());
    let again = dyncfg(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).starts_with("error[output-exists]:"), "{}", stderr(&again));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(dyncfg(&forced).status.success());
}

#[test]
fn verification_catches_tampering() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    assert!(dyncfg(&["filter", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(dyncfg(&["report", "--run", s(&out), "--verify"]).status.success());
    let path = out.join("filter.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("forged,row\n");
    fs::write(&path, text).unwrap();
    let o = dyncfg(&["report", "--run", s(&out), "--verify"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[checksum]:"), "{}", stderr(&o));
}

#[test]
fn schedules_aggregates_trace_directories() {
    let (dir, cfg) = setup();
    let run = dir.path().join("run");
    assert!(dyncfg(&["search", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let fig = dir.path().join("fig3.csv");
    let o = dyncfg(&["schedules", "--traces", s(&run.join("traces")), "--out", s(&fig), "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&fig).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema_version=1"));
    assert_eq!(lines.next(), Some("t,mean,median,smoothed_normalized_median"));
    assert_eq!(lines.count(), 40);
    assert!(fig.with_extension("svg").exists());
    let again = dyncfg(&["schedules", "--traces", s(&run.join("traces")), "--out", s(&fig)]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn usage_and_config_errors() {
    assert_eq!(dyncfg(&["bogus"]).status.code(), Some(2));
    assert_eq!(dyncfg(&["search", "--nope"]).status.code(), Some(2));
    assert_eq!(dyncfg(&[]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\ncolour = 3\n[filter]\nbatch = 4\nkeep = 8\n").unwrap();
    let o = dyncfg(&["compare", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.lines().all(|l| l.starts_with("error[config]: line ")), "{err}");
    assert!(err.contains("colour") && err.contains("keep") && err.contains("batch"), "{err}");
    assert!(!dir.path().join("x").exists());
}

#[test]
fn train_evals_writes_loadable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.toml");
    fs::write(
        &cfg,
        "seed = 4\n[schedule]\nsteps = 50\n[evaluator.clip]\nkind = \"alignment-learned\"\nsteps = 50\n",
    )
    .unwrap();
    let out = dir.path().join("evals");
    let o = dyncfg(&["train-evals", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ev = dyncfg::cli::load_artifact(&out.join("clip.eval")).unwrap();
    assert_eq!(ev.kind(), dyncfg::EvaluatorKind::AlignmentLearned);
    let m = read_manifest(&out).unwrap();
    assert!(m.evaluator_artifacts.contains_key("clip"));
    assert!(fs::read_to_string(out.join("train_summary.csv")).unwrap().contains("clip,alignment-learned,50,"));
}
