//! Experiment runner and data export: loads a JSON configuration, runs a
//! campaign to convergence, and persists trajectories, summaries, safe-set
//! snapshots and plot-ready series.
//!
//! Exit codes: 0 converged, 1 bad configuration, 2 iteration cap reached,
//! 3 numerical hard error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{run_until_convergence, CampaignResult, LmpcError, StepMode};
use crate::model::ConfigError;
use crate::oracle::{clqr_oracle, deviation_against_states};
use crate::safe_set::cost_to_go_tails;
use crate::systems::{build_instance, ClqrInstance, InstanceSetup};
use crate::trajectory::{IterationRecord, Trajectory, TrajectoryStep};

/// Experiment configuration. The random-seed field is accepted for schema
/// stability but unused: every algorithm in the pipeline is deterministic.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: String,
    #[serde(default = "default_mode")]
    pub mode: StepMode,
    #[serde(default)]
    pub overrides: serde_json::Value,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub iteration_cap: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_mode() -> StepMode {
    StepMode::Enumeration
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationSummary {
    pub j: usize,
    pub cost: f64,
    pub steps: usize,
    pub ss_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_norm: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub instance: String,
    pub mode: String,
    pub iterations: Vec<IterationSummary>,
    pub converged: bool,
    pub gamma: f64,
    pub epsilon: f64,
}

/// 17 significant digits, round-trip exact for doubles.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError::Invalid(format!("config {} rejected: {e}", path.display())))
}

/// Apply the top-level threshold overrides onto the instance overrides and
/// build the instance.
pub fn setup_from_config(cfg: &ExperimentConfig) -> Result<InstanceSetup, ConfigError> {
    let mut overrides = match &cfg.overrides {
        serde_json::Value::Null => serde_json::Map::new(),
        serde_json::Value::Object(map) => map.clone(),
        other => {
            return Err(ConfigError::Invalid(format!(
                "overrides must be an object, got {other}"
            )))
        }
    };
    if let Some(g) = cfg.gamma {
        overrides.insert("gamma".into(), serde_json::json!(g));
    }
    if let Some(e) = cfg.epsilon {
        overrides.insert("epsilon".into(), serde_json::json!(e));
    }
    if let Some(c) = cfg.iteration_cap {
        overrides.insert("iteration_cap".into(), serde_json::json!(c));
    }
    build_instance(&cfg.instance, &serde_json::Value::Object(overrides), cfg.mode)
}

/// Sum of |e_k| over the realized augmented states with k >= 1; the
/// appended terminal has e = 0 by construction.
pub fn estimation_error_norm(rec: &IterationRecord) -> f64 {
    rec.trajectory.steps.iter().skip(1).map(|s| s.state[s.state.len() - 1].abs()).sum()
}

fn write_trajectories_csv(path: &Path, records: &[IterationRecord]) -> std::io::Result<()> {
    let (n, m) = records
        .iter()
        .find_map(|r| r.trajectory.steps.first())
        .map(|s| (s.state.len(), s.input.len()))
        .unwrap_or((0, 0));
    let mut out = String::new();
    out.push_str("iteration,t");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 0..m {
        out.push_str(&format!(",u{i}"));
    }
    out.push_str(",stage_cost,cost_to_go\n");
    for rec in records {
        let tails = cost_to_go_tails(&rec.trajectory);
        let j = rec.trajectory.iteration;
        for (t, step) in rec.trajectory.steps.iter().enumerate() {
            out.push_str(&format!("{j},{t}"));
            for v in step.state.iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            for v in step.input.iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push(',');
            out.push_str(&fmt_f64(step.stage_cost));
            out.push(',');
            out.push_str(&fmt_f64(tails[t]));
            out.push('\n');
        }
        // Terminal row: zero input, zero stage cost, zero tail.
        out.push_str(&format!("{j},{}", rec.trajectory.len()));
        for v in rec.trajectory.terminal.iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        for _ in 0..m {
            out.push(',');
            out.push_str(&fmt_f64(0.0));
        }
        out.push(',');
        out.push_str(&fmt_f64(0.0));
        out.push(',');
        out.push_str(&fmt_f64(0.0));
        out.push('\n');
    }
    fs::write(path, out)
}

#[derive(Clone, Debug)]
pub struct CsvRow {
    pub iteration: usize,
    pub t: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub stage_cost: f64,
    pub cost_to_go: f64,
}

pub fn read_trajectories_csv(path: &Path) -> Result<Vec<CsvRow>, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ConfigError::Invalid("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    let m = cols.iter().filter(|c| c.starts_with('u')).count();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + n + m {
            return Err(ConfigError::Invalid(format!("malformed CSV row: {line}")));
        }
        let parse = |s: &str| -> Result<f64, ConfigError> {
            s.parse::<f64>().map_err(|e| ConfigError::Invalid(format!("bad float {s}: {e}")))
        };
        rows.push(CsvRow {
            iteration: fields[0]
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("bad iteration: {e}")))?,
            t: fields[1].parse().map_err(|e| ConfigError::Invalid(format!("bad time: {e}")))?,
            state: fields[2..2 + n].iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
            input: fields[2 + n..2 + n + m].iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
            stage_cost: parse(fields[2 + n + m])?,
            cost_to_go: parse(fields[3 + n + m])?,
        });
    }
    Ok(rows)
}

/// Reassemble one iteration's trajectory from CSV rows (the last row of the
/// iteration is the terminal marker).
pub fn trajectory_from_rows(rows: &[CsvRow], iteration: usize) -> Option<Trajectory> {
    let mut its: Vec<&CsvRow> = rows.iter().filter(|r| r.iteration == iteration).collect();
    if its.is_empty() {
        return None;
    }
    its.sort_by_key(|r| r.t);
    let terminal = nalgebra::DVector::from_vec(its.last().unwrap().state.clone());
    let steps = its[..its.len() - 1]
        .iter()
        .map(|r| TrajectoryStep {
            state: nalgebra::DVector::from_vec(r.state.clone()),
            input: nalgebra::DVector::from_vec(r.input.clone()),
            stage_cost: r.stage_cost,
        })
        .collect();
    Some(Trajectory { iteration, steps, terminal })
}

fn write_safe_set_json(path: &Path, result: &CampaignResult) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct PointOut<'a> {
        iteration: usize,
        time: usize,
        state: &'a [f64],
        cost_to_go: f64,
    }
    let points: Vec<PointOut> = result
        .safe_set
        .points()
        .iter()
        .map(|p| PointOut {
            iteration: p.iteration,
            time: p.time,
            state: p.state.as_slice(),
            cost_to_go: p.cost_to_go,
        })
        .collect();
    let body = serde_json::json!({ "points": points });
    fs::write(path, serde_json::to_string_pretty(&body).unwrap() + "\n")
}

pub fn summarize(setup: &InstanceSetup, result: &CampaignResult, mode: StepMode) -> CampaignSummary {
    let adaptive = setup.name == "adaptive-dubins";
    let iterations = result
        .records
        .iter()
        .zip(result.ss_sizes.iter())
        .map(|(rec, &ss_size)| IterationSummary {
            j: rec.trajectory.iteration,
            cost: rec.cost,
            steps: rec.termination_time,
            ss_size,
            error_norm: adaptive.then(|| estimation_error_norm(rec)),
        })
        .collect();
    CampaignSummary {
        instance: setup.name.clone(),
        mode: mode.name().to_string(),
        iterations,
        converged: result.converged,
        gamma: setup.problem.gamma,
        epsilon: setup.problem.epsilon,
    }
}

pub fn write_campaign(
    out_dir: &Path,
    setup: &InstanceSetup,
    result: &CampaignResult,
    mode: StepMode,
) -> Result<(), ConfigError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| ConfigError::Invalid(format!("cannot create {}: {e}", out_dir.display())))?;
    let io = |e: std::io::Error| ConfigError::Invalid(format!("write failed: {e}"));
    write_trajectories_csv(&out_dir.join("trajectories.csv"), &result.records).map_err(io)?;
    let summary = summarize(setup, result, mode);
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap() + "\n",
    )
    .map_err(io)?;
    write_safe_set_json(&out_dir.join("safe_set.json"), result).map_err(io)?;
    Ok(())
}

/// Run a campaign from a configuration file and persist its outputs.
pub fn cmd_run(config_path: &Path, out_override: Option<&Path>) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let setup = match setup_from_config(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let strategy = match crate::controller::strategy_by_name(cfg.mode.name()) {
        Some(s) => s,
        None => {
            eprintln!("error: unknown mode {:?}", cfg.mode);
            return 1;
        }
    };
    if cfg.mode == StepMode::ConvexRelaxation
        && (setup.problem.model.linear_form().is_none() || !setup.problem.cost.is_quadratic())
    {
        eprintln!("error: convex-relaxation mode requires linear dynamics and the quadratic cost");
        return 1;
    }
    let result = match run_until_convergence(
        &setup.problem,
        setup.initial_safe_set.clone(),
        &setup.seed,
        strategy.as_ref(),
        setup.plant.as_ref(),
    ) {
        Ok(r) => r,
        Err(LmpcError::Config(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    let default_dir = PathBuf::from(format!("campaign_{}", setup.name));
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or(default_dir);
    if let Err(e) = write_campaign(&out_dir, &setup, &result, cfg.mode) {
        eprintln!("error: {e}");
        return 3;
    }
    let last = result.records.last().unwrap();
    println!(
        "{}: {} iterations, final cost {:.12}, {}",
        setup.name,
        result.records.len() - 1,
        last.cost,
        if result.converged { "converged" } else { "iteration cap reached" }
    );
    if result.converged {
        0
    } else {
        2
    }
}

/// Solve the reference optimum and compare it against a stored campaign.
pub fn cmd_oracle(config_path: &Path, campaign_dir: &Path, horizon: usize) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if cfg.instance != "clqr" {
        eprintln!("error: the oracle is defined for the clqr instance only");
        return 1;
    }
    let inst: ClqrInstance = match serde_json::from_value(if cfg.overrides.is_null() {
        serde_json::json!({})
    } else {
        cfg.overrides.clone()
    }) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("error: overrides rejected: {e}");
            return 1;
        }
    };
    let oracle = match clqr_oracle(&inst, horizon) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };

    let summary_path = campaign_dir.join("summary.json");
    let summary: CampaignSummary = match fs::read_to_string(&summary_path)
        .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", summary_path.display())))
        .and_then(|t| {
            serde_json::from_str(&t).map_err(|e| ConfigError::Invalid(format!("bad summary: {e}")))
        }) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let rows = match read_trajectories_csv(&campaign_dir.join("trajectories.csv")) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let last_j = summary.iterations.last().map(|i| i.j).unwrap_or(0);
    let Some(converged_traj) = trajectory_from_rows(&rows, last_j) else {
        eprintln!("error: campaign has no trajectory for iteration {last_j}");
        return 1;
    };
    let deviations = deviation_against_states(&converged_traj, &oracle.states);
    let max_deviation = deviations.iter().cloned().fold(0.0f64, f64::max);
    let final_cost = summary.iterations.last().map(|i| i.cost).unwrap_or(f64::NAN);
    let report = serde_json::json!({
        "oracle_cost": oracle.cost,
        "max_deviation": max_deviation,
        "cost_gap": final_cost - oracle.cost,
    });
    if let Err(e) = fs::write(
        campaign_dir.join("oracle.json"),
        serde_json::to_string_pretty(&report).unwrap() + "\n",
    ) {
        eprintln!("error: write failed: {e}");
        return 3;
    }
    // Oracle trajectory in the campaign CSV schema.
    let steps: Vec<TrajectoryStep> = oracle
        .inputs
        .iter()
        .enumerate()
        .map(|(k, u)| TrajectoryStep {
            state: oracle.states[k].clone(),
            input: u.clone(),
            stage_cost: oracle.states[k].norm_squared() + u.norm_squared(),
        })
        .collect();
    let oracle_traj = Trajectory {
        iteration: 0,
        steps,
        terminal: oracle.states.last().unwrap().clone(),
    };
    let oracle_rec = IterationRecord::from_trajectory(oracle_traj, true, vec![]);
    if let Err(e) =
        write_trajectories_csv(&campaign_dir.join("oracle_trajectory.csv"), &[oracle_rec])
    {
        eprintln!("error: write failed: {e}");
        return 3;
    }
    println!(
        "oracle cost {:.12}, campaign gap {:.3e}, max deviation {:.3e}",
        oracle.cost,
        final_cost - oracle.cost,
        max_deviation
    );
    0
}

/// Emit one CSV per figure-style data series from a stored campaign.
pub fn cmd_export_plots(campaign_dir: &Path) -> i32 {
    let rows = match read_trajectories_csv(&campaign_dir.join("trajectories.csv")) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let summary: Option<CampaignSummary> = fs::read_to_string(campaign_dir.join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let n = rows.first().map(|r| r.state.len()).unwrap_or(0);
    let m = rows.first().map(|r| r.input.len()).unwrap_or(0);

    let mut traj = String::from("iteration,t,z,y\n");
    for r in &rows {
        if n >= 2 {
            traj.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration,
                r.t,
                fmt_f64(r.state[0]),
                fmt_f64(r.state[1])
            ));
        }
    }
    let mut inputs = String::from("iteration,t");
    for i in 0..m {
        inputs.push_str(&format!(",u{i}"));
    }
    inputs.push('\n');
    for r in &rows {
        inputs.push_str(&format!("{},{}", r.iteration, r.t));
        for v in &r.input {
            inputs.push(',');
            inputs.push_str(&fmt_f64(*v));
        }
        inputs.push('\n');
    }
    let mut velocity = String::from("iteration,t,v\n");
    if n >= 3 {
        for r in &rows {
            velocity.push_str(&format!("{},{},{}\n", r.iteration, r.t, fmt_f64(r.state[2])));
        }
    }
    let mut error_norm = String::from("j,error_norm\n");
    if let Some(s) = &summary {
        for it in &s.iterations {
            if let Some(e) = it.error_norm {
                error_norm.push_str(&format!("{},{}\n", it.j, fmt_f64(e)));
            }
        }
    }
    let mut safe_set = String::new();
    if let Ok(text) = fs::read_to_string(campaign_dir.join("safe_set.json")) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            safe_set.push_str("iteration,time");
            for i in 0..n {
                safe_set.push_str(&format!(",x{i}"));
            }
            safe_set.push_str(",cost_to_go\n");
            if let Some(points) = v["points"].as_array() {
                for p in points {
                    safe_set.push_str(&format!(
                        "{},{}",
                        p["iteration"].as_u64().unwrap_or(0),
                        p["time"].as_u64().unwrap_or(0)
                    ));
                    if let Some(state) = p["state"].as_array() {
                        for c in state {
                            safe_set.push(',');
                            safe_set.push_str(&fmt_f64(c.as_f64().unwrap_or(f64::NAN)));
                        }
                    }
                    safe_set.push(',');
                    safe_set.push_str(&fmt_f64(p["cost_to_go"].as_f64().unwrap_or(f64::NAN)));
                    safe_set.push('\n');
                }
            }
        }
    }

    let files = [
        ("fig_trajectory.csv", traj),
        ("fig_inputs.csv", inputs),
        ("fig_velocity.csv", velocity),
        ("fig_safe_set.csv", safe_set),
        ("fig_error_norm.csv", error_norm),
    ];
    for (name, body) in files {
        if let Err(e) = fs::write(campaign_dir.join(name), body) {
            eprintln!("error: write {name} failed: {e}");
            return 3;
        }
    }
    println!("exported 5 figure series to {}", campaign_dir.display());
    0
}
