//! End-to-end tests of the experiment runner: exit codes, output schemas,
//! exact round trips and byte-level determinism.

use std::fs;
use std::path::Path;

use lmpc::cli::{cmd_export_plots, cmd_oracle, cmd_run, read_trajectories_csv, CampaignSummary};

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn run_clqr_roundtrip_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "clqr.json", r#"{"instance": "clqr"}"#);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    assert_eq!(cmd_run(&config, Some(&out_a)), 0);
    assert_eq!(cmd_run(&config, Some(&out_b)), 0);

    // Byte-identical outputs across runs.
    for name in ["trajectories.csv", "summary.json", "safe_set.json"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // Re-summing the persisted stage costs reproduces the reported
    // iteration costs exactly.
    let summary: CampaignSummary =
        serde_json::from_str(&fs::read_to_string(out_a.join("summary.json")).unwrap()).unwrap();
    let rows = read_trajectories_csv(&out_a.join("trajectories.csv")).unwrap();
    for it in &summary.iterations {
        // Same backward accumulation order as the recorded cost, so the
        // round trip is exact to the last bit.
        let stage_costs: Vec<f64> =
            rows.iter().filter(|r| r.iteration == it.j).map(|r| r.stage_cost).collect();
        let resummed = stage_costs.iter().rev().fold(0.0, |acc, c| c + acc);
        assert_eq!(resummed, it.cost, "iteration {} cost does not round-trip", it.j);
    }
    // Costs non-increasing in the summary.
    for pair in summary.iterations.windows(2) {
        assert!(pair[1].cost <= pair[0].cost + 1e-9);
    }
    assert!(summary.converged);
    assert_eq!(summary.instance, "clqr");
    assert_eq!(summary.mode, "enumeration");
}

#[test]
fn run_rejects_unknown_instance_and_bad_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_name = write_config(tmp.path(), "bad.json", r#"{"instance": "pendulum"}"#);
    assert_eq!(cmd_run(&bad_name, Some(&tmp.path().join("x"))), 1);
    let bad_field = write_config(
        tmp.path(),
        "bad2.json",
        r#"{"instance": "clqr", "overrides": {"horizon": 4, "not_a_field": 1}}"#,
    );
    assert_eq!(cmd_run(&bad_field, Some(&tmp.path().join("y"))), 1);
    let bad_json = write_config(tmp.path(), "bad3.json", "{");
    assert_eq!(cmd_run(&bad_json, Some(&tmp.path().join("z"))), 1);
}

#[test]
fn run_reports_iteration_cap_exit() {
    let tmp = tempfile::tempdir().unwrap();
    // One iteration cannot satisfy a zero-tolerance convergence test.
    let config = write_config(
        tmp.path(),
        "cap.json",
        r#"{"instance": "clqr", "iteration_cap": 1, "gamma": 0.0}"#,
    );
    assert_eq!(cmd_run(&config, Some(&tmp.path().join("out"))), 2);
}

#[test]
fn dubins_summary_ends_at_integer_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "dubins.json", r#"{"instance": "dubins"}"#);
    let out = tmp.path().join("out");
    assert_eq!(cmd_run(&config, Some(&out)), 0);
    let summary: CampaignSummary =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let last = summary.iterations.last().unwrap();
    assert_eq!(last.cost, last.cost.round(), "minimum-time cost must be an integer");
    assert_eq!(last.cost, 16.0);
}

#[test]
fn oracle_and_plot_export_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "clqr.json", r#"{"instance": "clqr"}"#);
    let out = tmp.path().join("campaign");
    assert_eq!(cmd_run(&config, Some(&out)), 0);
    assert_eq!(cmd_oracle(&config, &out, 150), 0);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
    let oracle_cost = report["oracle_cost"].as_f64().unwrap();
    assert!((oracle_cost - 49.9163600440).abs() < 1e-4);
    assert!(report["cost_gap"].as_f64().unwrap().abs() < 1e-4);
    assert!(report["max_deviation"].as_f64().unwrap() < 1e-3);
    assert!(out.join("oracle_trajectory.csv").exists());

    assert_eq!(cmd_export_plots(&out), 0);
    for name in [
        "fig_trajectory.csv",
        "fig_inputs.csv",
        "fig_velocity.csv",
        "fig_safe_set.csv",
        "fig_error_norm.csv",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    // The trajectory figure carries one (z, y) row per CSV state row.
    let fig = fs::read_to_string(out.join("fig_trajectory.csv")).unwrap();
    let rows = read_trajectories_csv(&out.join("trajectories.csv")).unwrap();
    assert_eq!(fig.lines().count(), rows.len() + 1);
    // The oracle subcommand is clqr-only.
    let dubins = write_config(tmp.path(), "dubins.json", r#"{"instance": "dubins"}"#);
    assert_eq!(cmd_oracle(&dubins, &out, 150), 1);
}

#[test]
fn relaxation_mode_rejects_nonlinear_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "bad_mode.json",
        r#"{"instance": "dubins", "mode": "convex-relaxation"}"#,
    );
    assert_eq!(cmd_run(&config, Some(&tmp.path().join("out"))), 1);
}

#[test]
fn adaptive_summary_reports_error_norms() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "ad.json", r#"{"instance": "adaptive-dubins"}"#);
    let out = tmp.path().join("out");
    assert_eq!(cmd_run(&config, Some(&out)), 0);
    let summary: CampaignSummary =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let norms: Vec<f64> = summary.iterations.iter().map(|i| i.error_norm.unwrap()).collect();
    assert!(norms[0] > 1.0, "the seed run carries the unidentified error");
    assert!(norms.last().unwrap().abs() < 1e-6);
    for pair in norms.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9);
    }
    // Exported error-norm series mirrors the summary.
    assert_eq!(cmd_export_plots(&out), 0);
    let fig = fs::read_to_string(out.join("fig_error_norm.csv")).unwrap();
    assert_eq!(fig.lines().count(), summary.iterations.len() + 1);
}
