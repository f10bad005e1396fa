use std::fs;
use std::path::Path;
use std::process::Command;

use carfollow::harness::{run_experiment, ExperimentKind, ExperimentSpec, Manifest};
use carfollow::Case;
use serde_json::json;

fn small_dp(kind: ExperimentKind, out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(kind, out);
    spec.case = Some(Case::Kinematic);
    spec.grid_scale = Some(0.2);
    spec.overrides = vec![("dp.actions".into(), json!(9))];
    spec
}

fn short_train(out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(ExperimentKind::Train, out);
    spec.case = Some(Case::Kinematic);
    spec.seed = Some(7);
    spec.steps = Some(1_400);
    spec.overrides = vec![("agent.hidden".into(), json!(8)), ("agent.warmup_steps".into(), json!(400))];
    spec
}

fn manifest_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join("manifest.json")).unwrap()
}

#[test]
fn reruns_reproduce_the_manifest_and_every_file_is_listed() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, make) in [
        ("dp", small_dp as fn(ExperimentKind, &Path) -> ExperimentSpec),
    ] {
        let a = tmp.path().join(format!("{name}-a"));
        let b = tmp.path().join(format!("{name}-b"));
        let ma = run_experiment(&make(ExperimentKind::DpSolve, &a)).unwrap();
        run_experiment(&make(ExperimentKind::DpSolve, &b)).unwrap();
        assert_eq!(manifest_bytes(&a), manifest_bytes(&b));
        let mut listed: Vec<String> = ma.files.iter().map(|f| f.path.clone()).collect();
        listed.push("manifest.json".into());
        listed.sort();
        let mut on_disk: Vec<String> = fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        on_disk.sort();
        assert_eq!(listed, on_disk);
    }
    let a = tmp.path().join("train-a");
    let b = tmp.path().join("train-b");
    let m = run_experiment(&short_train(&a)).unwrap();
    run_experiment(&short_train(&b)).unwrap();
    assert_eq!(manifest_bytes(&a), manifest_bytes(&b));
    let cfg = m.config.unwrap();
    assert_eq!((cfg.agent.seed, cfg.agent.total_steps, cfg.agent.hidden), (7, 1_400, 8));
    let curve = fs::read_to_string(a.join("learning_curve.csv")).unwrap();
    assert!(curve.starts_with("episode,reward,steps,moving_avg_100\n"));
    assert_eq!(curve.lines().count(), 1 + 7);
}

#[test]
fn evaluation_compare_and_report_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    run_experiment(&short_train(&train)).unwrap();
    let dp = tmp.path().join("dp");
    run_experiment(&small_dp(ExperimentKind::DpSolve, &dp)).unwrap();

    let mut eval = ExperimentSpec::new(ExperimentKind::Evaluate, tmp.path().join("eval"));
    eval.inputs.checkpoint = Some(train.join("actor.json"));
    eval.inputs.dp_csv = Some(dp.join("dp_trajectory.csv"));
    run_experiment(&eval).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics.pointer("/metrics/relative_gap").unwrap().is_number());

    let mut transfer = ExperimentSpec::new(ExperimentKind::Transfer, tmp.path().join("transfer"));
    transfer.case = Some(Case::DelayLag);
    transfer.inputs.checkpoint = Some(train.join("actor.json"));
    run_experiment(&transfer).unwrap();

    let mut wrong = ExperimentSpec::new(ExperimentKind::Evaluate, tmp.path().join("wrong"));
    wrong.case = Some(Case::DelayLag);
    wrong.inputs.checkpoint = Some(train.join("actor.json"));
    assert!(matches!(
        run_experiment(&wrong),
        Err(carfollow::Error::UnsupportedTransfer { from: 1, to: 4 })
    ));

    let mut cmp = ExperimentSpec::new(ExperimentKind::Compare, tmp.path().join("cmp"));
    cmp.inputs.drl_csv = Some(tmp.path().join("eval/trajectory.csv"));
    cmp.inputs.dp_csv = Some(dp.join("dp_trajectory.csv"));
    run_experiment(&cmp).unwrap();

    let mut report = ExperimentSpec::new(ExperimentKind::Report, tmp.path().join("report"));
    report.inputs.report_dirs = vec![train, dp, tmp.path().join("eval")];
    run_experiment(&report).unwrap();
    let md = fs::read_to_string(tmp.path().join("report/report.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 3);
    let m = Manifest::load(&tmp.path().join("report")).unwrap();
    assert_eq!(m.inputs.len(), 3);
}

#[test]
fn failed_runs_leave_no_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "t,e,e_dot,v_i,u,a,reward\n0,1,2,3,4,5\n").unwrap();
    let good = tmp.path().join("good");
    run_experiment(&small_dp(ExperimentKind::DpSolve, &good)).unwrap();
    let out = tmp.path().join("cmp");
    let mut cmp = ExperimentSpec::new(ExperimentKind::Compare, &out);
    cmp.inputs.drl_csv = Some(bad);
    cmp.inputs.dp_csv = Some(good.join("dp_trajectory.csv"));
    assert!(run_experiment(&cmp).is_err());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);

    let mut train = short_train(&tmp.path().join("t"));
    train.seed = None;
    assert!(matches!(run_experiment(&train), Err(carfollow::Error::InvalidConfig(_))));
}

#[test]
fn cli_reports_errors_as_json_and_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_carfollow");
    let out = Command::new(bin)
        .args(["evaluate", "--checkpoint"])
        .arg(tmp.path().join("missing.json"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_input");

    let out = Command::new(bin)
        .args(["dp-solve", "--case", "1", "--grid-scale", "0.2", "--set", "dp.actions=5", "--set", "save_tables=false", "--out"])
        .arg(tmp.path().join("dp"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("dp/manifest.json").exists());
    assert!(!tmp.path().join("dp/dp_tables.bin").exists());
}
