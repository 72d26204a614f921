//! Command-line front end: phantom generation, planning, limit improvement,
//! and trade-off sweeps as file-based, reproducible experiments.
//!
//! Every command reads and writes plain files under `--out`: JSON for
//! models, CSV for tables, binary only for the dose-influence matrix.
//! Outputs depend only on the inputs and flags, so re-runs are
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use replan::analysis::{dose_at_volume, dvh, pareto_sweep, AnalysisError, ParetoPoint};
use replan::improve::{
    compare_plans, improve_iteratively, ImproveError, ImprovementTarget,
};
use replan::inverse::Norm;
use replan::phantom::{generate, mask_pgm, preset, PhantomSpec};
use replan::rtp::io::{load_problem, save_problem, IoError};
use replan::rtp::{
    cvar_value, lower_cvar_value, solve_plan, BoundKind, DvKind, Plan, PlanProblem, RtpError,
};

#[derive(Parser)]
#[command(name = "replan", version, about = "Treatment-plan optimization and improvement")]
pub struct Cli {
    /// Provenance stamp recorded in generated phantom specs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created when missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Distance measure for plan movement.
    #[arg(long, global = true, value_enum, default_value_t = NormArg::L1)]
    pub norm: NormArg,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(v: NormArg) -> Norm {
        match v {
            NormArg::L1 => Norm::L1,
            NormArg::Linf => Norm::Linf,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundArg {
    Upper,
    Lower,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom planning problem.
    Phantom {
        /// Built-in case, p1 through p4.
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// Phantom spec JSON file.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Solve a planning problem into a plan plus DVH and metric tables.
    Plan {
        /// Problem JSON file.
        problem: PathBuf,
    },
    /// Learn a tighter dose-volume limit from an observed plan.
    Improve {
        /// Problem JSON file.
        problem: PathBuf,
        /// Observed plan JSON file.
        plan: PathBuf,
        /// Structure whose dose-volume row is improved.
        #[arg(long)]
        structure: String,
        /// Tail parameter of the targeted row.
        #[arg(long)]
        alpha: f64,
        /// Blend between plan distance (1) and limit movement (0).
        #[arg(long, default_value_t = 0.5)]
        omega: f64,
        /// +1 pushes the limit down, -1 pushes it up.
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        direction: i8,
        /// Stop once the limit moves less than this between iterations.
        #[arg(long, default_value_t = 0.01)]
        eps_stop: f64,
        /// Side of the targeted row.
        #[arg(long, value_enum, default_value_t = BoundArg::Upper)]
        bound: BoundArg,
        /// Smallest admissible learned limit.
        #[arg(long, default_value_t = 0.0)]
        u_lower: f64,
        /// Largest admissible learned limit; defaults to the current one.
        #[arg(long)]
        u_upper: Option<f64>,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
    },
    /// Sweep trade-off weights into a frontier CSV.
    Pareto {
        /// Problem JSON file.
        problem: PathBuf,
        /// Index of the risk-structure upper dose-volume objective.
        #[arg(long)]
        oar_objective: Option<usize>,
        /// Index of the target lower dose-volume objective.
        #[arg(long)]
        target_objective: Option<usize>,
        /// Weight pair `w_oar,w_target`; repeatable.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(f64, f64)>,
        /// Re-sweep with the risk limit replaced by this learned value.
        #[arg(long)]
        improved_limit: Option<f64>,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `w_oar,w_target`, got `{s}`"))?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad weight `{a}`"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad weight `{b}`"))?;
    Ok((a, b))
}

/// Command failures, split by exit code: 2 validation, 3 infeasibility,
/// 4 internal consistency.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<RtpError> for CliError {
    fn from(e: RtpError) -> Self {
        match e {
            RtpError::InfeasibleDvh(violations) => {
                let detail: Vec<String> = violations
                    .iter()
                    .map(|v| {
                        format!(
                            "structure {} (alpha {}, limit {}) exceeded by {:.6}",
                            v.structure, v.fraction, v.limit, v.excess
                        )
                    })
                    .collect();
                CliError::Infeasible(format!(
                    "dose-volume rows cannot all hold: {}",
                    detail.join("; ")
                ))
            }
            RtpError::Infeasible => CliError::Infeasible(e.to_string()),
            RtpError::Unbounded | RtpError::Lp(_) => CliError::Internal(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ImproveError> for CliError {
    fn from(e: ImproveError) -> Self {
        match e {
            ImproveError::BoundsTooTight | ImproveError::ObservationInfeasible { .. } => {
                CliError::Infeasible(e.to_string())
            }
            ImproveError::NonMonotone { .. }
            | ImproveError::Internal
            | ImproveError::Lp(_) => CliError::Internal(e.to_string()),
            ImproveError::Rtp(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::SubSolveInfeasible { .. } => CliError::Infeasible(e.to_string()),
            AnalysisError::SubSolve { .. } => CliError::Internal(e.to_string()),
            AnalysisError::Rtp(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Phantom { preset: p, spec } => cmd_phantom(cli, p.as_deref(), spec.as_deref()),
        Command::Plan { problem } => cmd_plan(cli, problem),
        Command::Improve {
            problem,
            plan,
            structure,
            alpha,
            omega,
            direction,
            eps_stop,
            bound,
            u_lower,
            u_upper,
            max_iters,
        } => cmd_improve(
            cli, problem, plan, structure, *alpha, *omega, *direction, *eps_stop, *bound,
            *u_lower, *u_upper, *max_iters,
        ),
        Command::Pareto {
            problem,
            oar_objective,
            target_objective,
            pairs,
            improved_limit,
        } => cmd_pareto(cli, problem, *oar_objective, *target_objective, pairs, *improved_limit),
    }
}

fn cmd_phantom(
    cli: &Cli,
    preset_name: Option<&str>,
    spec_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut spec: PhantomSpec = match (preset_name, spec_path) {
        (Some(name), None) => preset(name).ok_or_else(|| {
            CliError::Validation(format!("unknown preset `{name}`; available: p1, p2, p3, p4"))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("bad phantom spec: {e}")))?
        }
        _ => {
            return Err(CliError::Validation(
                "exactly one of --preset or --spec is required".into(),
            ))
        }
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let problem = generate(&spec).map_err(|e| CliError::Validation(e.to_string()))?;
    save_problem(&problem, &cli.out.join("problem.json"), "dose_influence.bin")?;
    fs::write(cli.out.join("mask.pgm"), mask_pgm(&spec).map_err(|e| {
        CliError::Validation(e.to_string())
    })?)?;
    println!(
        "wrote problem.json, dose_influence.bin, mask.pgm ({} voxels, {} beams, {} structures)",
        problem.n_voxels,
        problem.n_beams,
        problem.structures.len()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_plan(path: &Path) -> Result<Plan, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("bad plan file: {e}")))
}

/// One DVH CSV per structure, named `<prefix><structure>.csv`.
fn write_dvh_csvs(
    problem: &PlanProblem,
    doses: &[f64],
    out: &Path,
    prefix: &str,
) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for s in &problem.structures {
        let curve = dvh(&problem.structure_doses(s, doses), 100)?;
        let mut text = String::from("dose_gy,volume_fraction\n");
        for (d, f) in &curve.points {
            text.push_str(&format!("{d},{f}\n"));
        }
        let name = format!("{prefix}{}.csv", s.name);
        fs::write(out.join(&name), text)?;
        names.push(name);
    }
    Ok(names)
}

const METRIC_FRACTIONS: [(f64, &str); 4] =
    [(0.95, "d_95_gy"), (0.70, "d_70_gy"), (0.30, "d_30_gy"), (0.05, "d_5_gy")];

/// Per-structure metric table: max, mean, and standard dose-at-volume
/// levels, one row per structure.
fn metrics_csv(problem: &PlanProblem, doses: &[f64]) -> Result<String, CliError> {
    let mut text = String::from("structure,d_max_gy,d_mean_gy");
    for (_, name) in METRIC_FRACTIONS {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for s in &problem.structures {
        let d = problem.structure_doses(s, doses);
        let max = d.iter().fold(0.0f64, |a, &b| a.max(b));
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        text.push_str(&format!("{},{:.2},{:.2}", s.name, max, mean));
        let curve = dvh(&d, 100)?;
        for (fraction, _) in METRIC_FRACTIONS {
            text.push_str(&format!(",{:.2}", dose_at_volume(&curve, fraction)?));
        }
        text.push('\n');
    }
    Ok(text)
}

fn cmd_plan(cli: &Cli, problem_path: &Path) -> Result<(), CliError> {
    let problem = load_problem(problem_path)?;
    let plan = solve_plan(&problem)?;
    write_json(&cli.out.join("plan.json"), &plan)?;
    let dvh_files = write_dvh_csvs(&problem, &plan.voxel_doses, &cli.out, "dvh_")?;
    fs::write(cli.out.join("metrics.csv"), metrics_csv(&problem, &plan.voxel_doses)?)?;
    println!(
        "wrote plan.json, metrics.csv, {} (objective {:.6})",
        dvh_files.join(", "),
        plan.objective_value
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_improve(
    cli: &Cli,
    problem_path: &Path,
    plan_path: &Path,
    structure: &str,
    alpha: f64,
    omega: f64,
    direction: i8,
    eps_stop: f64,
    bound: BoundArg,
    u_lower: f64,
    u_upper: Option<f64>,
    max_iters: usize,
) -> Result<(), CliError> {
    let problem = load_problem(problem_path)?;
    let plan0 = read_plan(plan_path)?;
    let bound_kind = match bound {
        BoundArg::Upper => BoundKind::Upper,
        BoundArg::Lower => BoundKind::Lower,
    };
    let u_upper = match u_upper {
        Some(v) => v,
        None => current_limit(&problem, &plan0, structure, alpha, bound_kind)?,
    };
    let target = ImprovementTarget {
        structure: structure.to_string(),
        fraction: alpha,
        bound_kind,
        u_lower,
        u_upper,
        omega,
        direction,
        norm: cli.norm.into(),
    };
    let result = improve_iteratively(&problem, &plan0, &target, eps_stop, max_iters)?;
    write_json(&cli.out.join("improvement.json"), &result)?;
    write_json(&cli.out.join("plan_improved.json"), &result.new_plan)?;
    let cmp = compare_plans(&plan0, &result.new_plan, &problem)?;
    fs::write(cli.out.join("compare.csv"), cmp.to_csv())?;
    write_dvh_csvs(&problem, &plan0.voxel_doses, &cli.out, "dvh_before_")?;
    write_dvh_csvs(&problem, &result.new_plan.voxel_doses, &cli.out, "dvh_after_")?;
    println!(
        "limit {:.4} -> {:.4} in {} iteration(s), loss {:.6}, certificate {}",
        result.old_limit,
        result.learned_limit,
        result.iterations,
        result.loss,
        if result.check.holds { "holds" } else { "does not hold" }
    );
    Ok(())
}

/// The targeted row's current limit: the matching objective's dose when the
/// problem declares one, otherwise the observed plan's own tail value.
fn current_limit(
    problem: &PlanProblem,
    plan0: &Plan,
    structure: &str,
    alpha: f64,
    bound_kind: BoundKind,
) -> Result<f64, CliError> {
    let kind = match bound_kind {
        BoundKind::Upper => DvKind::MaxDvh,
        BoundKind::Lower => DvKind::MinDvh,
    };
    if let Some(o) = problem.objectives.iter().find(|o| {
        o.kind == kind && o.structure == structure && (o.fraction - alpha).abs() <= 1e-12
    }) {
        return Ok(o.dose_limit);
    }
    let s = problem
        .structure(structure)
        .ok_or_else(|| CliError::Validation(format!("unknown structure `{structure}`")))?;
    if plan0.voxel_doses.len() != problem.n_voxels {
        return Err(CliError::Validation("plan does not match the problem".into()));
    }
    let doses = problem.structure_doses(s, &plan0.voxel_doses);
    let value = match bound_kind {
        BoundKind::Upper => cvar_value(&doses, alpha),
        BoundKind::Lower => lower_cvar_value(&doses, alpha),
    };
    value.map_err(|e| CliError::Validation(e.to_string()))
}

fn frontier_csv(points: &[ParetoPoint]) -> String {
    let mut text = String::from("w_oar,w_target,oar_value,target_value,dominated\n");
    for p in points {
        text.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            p.weights.0, p.weights.1, p.objective_values.0, p.objective_values.1, p.dominated
        ));
    }
    text
}

/// Default sweep weights, risk-heavy toward the end.
pub const DEFAULT_SWEEP: [(f64, f64); 4] = [(1.0, 1.0), (2.0, 1.0), (5.0, 1.0), (10.0, 1.0)];

fn cmd_pareto(
    cli: &Cli,
    problem_path: &Path,
    oar_objective: Option<usize>,
    target_objective: Option<usize>,
    pairs: &[(f64, f64)],
    improved_limit: Option<f64>,
) -> Result<(), CliError> {
    let problem = load_problem(problem_path)?;
    let find = |kind: DvKind| {
        problem
            .objectives
            .iter()
            .position(|o| o.kind == kind && o.fraction < 1.0)
    };
    let oar_idx = match oar_objective.or_else(|| find(DvKind::MaxDvh)) {
        Some(i) => i,
        None => {
            return Err(CliError::Validation(
                "problem has no upper dose-volume objective to sweep".into(),
            ))
        }
    };
    let target_idx = match target_objective.or_else(|| find(DvKind::MinDvh)) {
        Some(i) => i,
        None => {
            return Err(CliError::Validation(
                "problem has no lower dose-volume objective to sweep".into(),
            ))
        }
    };
    let pairs: Vec<(f64, f64)> =
        if pairs.is_empty() { DEFAULT_SWEEP.to_vec() } else { pairs.to_vec() };

    let points = pareto_sweep(&problem, oar_idx, target_idx, &pairs)?;
    fs::write(cli.out.join("frontier.csv"), frontier_csv(&points))?;
    let mut written = vec!["frontier.csv"];
    if let Some(limit) = improved_limit {
        let mut improved = problem.clone();
        improved.objectives[oar_idx].dose_limit = limit;
        let points = pareto_sweep(&improved, oar_idx, target_idx, &pairs)?;
        fs::write(cli.out.join("frontier_improved.csv"), frontier_csv(&points))?;
        written.push("frontier_improved.csv");
    }
    println!("wrote {} ({} weight pairs)", written.join(", "), pairs.len());
    Ok(())
}
