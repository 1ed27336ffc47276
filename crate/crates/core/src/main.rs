//! Batch front door: validate model files, solve Bellman recursions, audit
//! candidate programs against the optimality conditions.
//!
//! Exit codes: 0 all checks pass, 1 at least one check failed, 2 input error
//! (parse failure, inadmissible or non-adapted program, malformed request).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use nsdp::dp::{
    self, AuditOptions, DpError, DpModel, HorizonMode, SolveOptions, ValueTable,
};
use nsdp::feasibility::{check_lower_viability, check_upper_viability};
use nsdp::model::{self, LoadedModel, LoadedProgram, ModelError};
use nsdp::report::{export_value_table, CheckStatus, Report};
use nsdp::stochastic::{
    self, reduce_to_deterministic, validate_adapted, Reduction, StochasticDpModel,
    StochasticHorizon,
};

#[derive(Parser)]
#[command(name = "nsdp", version, about = "Nonsmooth dynamic programming: solve, audit, certify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a model file: structure, filtration, summability, assumptions.
    Validate {
        model: PathBuf,
        /// Write the machine-readable JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Solve the Bellman recursion and export the value table.
    Solve {
        model: PathBuf,
        /// Output path for the tab-separated value table.
        #[arg(long)]
        out: PathBuf,
        /// Override the truncation epsilon of the model file.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Solve a specific horizon instead of the computed T_eff.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Evaluate grid nodes of a stage in parallel.
        #[arg(long, default_value_t = false)]
        parallel: bool,
    },
    /// Audit a candidate program: Bellman residuals, Euler inclusions,
    /// viability and value-subdifferential checks.
    Audit {
        model: PathBuf,
        program: PathBuf,
        /// Comma-separated subset of bellman,euler,viability,subdiff.
        #[arg(long, value_delimiter = ',')]
        checks: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Viability sampling radius around program states.
        #[arg(long, default_value_t = 0.05)]
        radius: f64,
        /// Viability sample count.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Branch-activity tolerance for gradients.
        #[arg(long = "tol-active")]
        tol_active: Option<f64>,
        /// Distance under which an action counts as a policy point.
        #[arg(long = "tol-policy")]
        tol_policy: Option<f64>,
        /// Feasibility slack for admissibility and candidate filtering.
        #[arg(long = "tol-feasibility")]
        tol_feasibility: Option<f64>,
        /// Slack for finite-difference audits and Bellman residuals.
        #[arg(long = "tol-audit")]
        tol_audit: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        parallel: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match run(cli, started) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Stochastic(#[from] stochastic::StochasticError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Input(String),
}

fn run(cli: Cli, started: Instant) -> Result<u8, CliError> {
    match cli.command {
        Command::Validate { model, report } => cmd_validate(&model, report.as_deref(), started),
        Command::Solve { model, out, epsilon, horizon, report, parallel } => {
            cmd_solve(&model, &out, epsilon, horizon, report.as_deref(), parallel, started)
        }
        Command::Audit {
            model,
            program,
            checks,
            seed,
            radius,
            samples,
            tol_active,
            tol_policy,
            tol_feasibility,
            tol_audit,
            report,
            parallel,
        } => {
            let mut opts = AuditOptions {
                seed,
                viability_radius: radius,
                viability_samples: samples,
                ..AuditOptions::default()
            };
            if let Some(v) = tol_active {
                opts.active_tol = v;
            }
            if let Some(v) = tol_policy {
                opts.policy_point_tol = v;
            }
            if let Some(v) = tol_feasibility {
                opts.solve.feas_tol = v;
            }
            if let Some(v) = tol_audit {
                opts.audit_tol = v;
            }
            opts.solve.parallel = parallel;
            let selected = parse_checks(checks)?;
            cmd_audit(&model, &program, &selected, opts, report.as_deref(), started)
        }
    }
}

const ALL_CHECKS: [&str; 4] = ["bellman", "euler", "viability", "subdiff"];

fn parse_checks(requested: Option<Vec<String>>) -> Result<Vec<String>, CliError> {
    match requested {
        None => Ok(ALL_CHECKS.iter().map(|s| s.to_string()).collect()),
        Some(list) => {
            for item in &list {
                if !ALL_CHECKS.contains(&item.as_str()) {
                    return Err(CliError::Input(format!(
                        "unknown check `{item}`; expected a subset of {}",
                        ALL_CHECKS.join(",")
                    )));
                }
            }
            Ok(list)
        }
    }
}

fn finish(
    mut report: Report,
    path: Option<&Path>,
    started: Instant,
) -> Result<u8, CliError> {
    report.checks.sort_by(|a, b| a.name.cmp(&b.name));
    print!("{}", report.render_text(Some(started.elapsed())));
    if let Some(path) = path {
        std::fs::write(path, report.to_json())?;
    }
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_validate(model_path: &Path, report_path: Option<&Path>, started: Instant) -> Result<u8, CliError> {
    let bytes = std::fs::read(model_path)?;
    let digest = model::digest_bytes(&bytes);
    let text = String::from_utf8_lossy(&bytes);
    // Parse failures are input errors; semantic defects are check failures.
    let file = model::ModelFile::from_json(&text)?;
    let mut report = Report::new("validate", digest, None);

    let built = file.build();
    match &built {
        Err(err) => {
            report.push("model", CheckStatus::Fail, err.to_string(), serde_json::json!(null));
        }
        Ok(LoadedModel::Deterministic(model)) => {
            report.push(
                "model",
                CheckStatus::Pass,
                format!("deterministic, {} stages", model.stages.len()),
                serde_json::json!({"stages": model.stages.len()}),
            );
            push_summability(&mut report, model);
        }
        Ok(LoadedModel::Stochastic(smodel)) => {
            report.push(
                "model",
                CheckStatus::Pass,
                format!(
                    "stochastic, {} stages over {} atoms",
                    smodel.stages.len(),
                    smodel.tree.atom_count()
                ),
                serde_json::json!({
                    "stages": smodel.stages.len(),
                    "atoms": smodel.tree.atom_count(),
                }),
            );
            let assumptions = stochastic::check_assumptions(smodel, 0, 128)?;
            report.push(
                "assumptions",
                if assumptions.all_ok() { CheckStatus::Pass } else { CheckStatus::Fail },
                if assumptions.all_ok() {
                    "summable envelope holds; Lipschitz data not falsified".to_string()
                } else {
                    "summable envelope or Lipschitz declarations violated".to_string()
                },
                serde_json::to_value(&assumptions).unwrap(),
            );
            match reduce_to_deterministic(smodel) {
                Ok(red) => push_summability(&mut report, &red.model),
                Err(err) => {
                    report.push("reduction", CheckStatus::Fail, err.to_string(), serde_json::json!(null));
                }
            }
        }
    }
    finish(report, report_path, started)
}

fn push_summability(report: &mut Report, model: &DpModel) {
    match dp::check_summability(model) {
        Ok(profile) => report.push(
            "summability",
            CheckStatus::Pass,
            format!("T_eff = {}, tail = {:.3e}", profile.t_eff, profile.tail),
            serde_json::to_value(&profile).unwrap(),
        ),
        Err(err) => {
            report.push("summability", CheckStatus::Fail, err.to_string(), serde_json::json!(null))
        }
    }
}

fn apply_epsilon(model: &mut LoadedModel, epsilon: Option<f64>) {
    let Some(eps) = epsilon else { return };
    match model {
        LoadedModel::Deterministic(m) => {
            if let HorizonMode::Truncated { epsilon, .. } = &mut m.horizon {
                *epsilon = eps;
            }
        }
        LoadedModel::Stochastic(m) => {
            if let StochasticHorizon::Truncated { epsilon, .. } = &mut m.horizon {
                *epsilon = eps;
            }
        }
    }
}

fn cmd_solve(
    model_path: &Path,
    out: &Path,
    epsilon: Option<f64>,
    horizon: Option<usize>,
    report_path: Option<&Path>,
    parallel: bool,
    started: Instant,
) -> Result<u8, CliError> {
    let (mut loaded, digest) = model::load_model(model_path)?;
    apply_epsilon(&mut loaded, epsilon);
    let mut report = Report::new("solve", digest, None);
    let solve_opts =
        SolveOptions { horizon_override: horizon, parallel, ..SolveOptions::default() };

    let (model, reduction): (DpModel, Option<Reduction>) = match loaded {
        LoadedModel::Deterministic(m) => (m, None),
        LoadedModel::Stochastic(sm) => {
            let red = reduce_to_deterministic(&sm)?;
            (red.model.clone(), Some(red))
        }
    };
    if reduction.is_some() {
        report.push(
            "reduction",
            CheckStatus::Pass,
            "stochastic model reduced to cell-block coordinates".to_string(),
            serde_json::json!({
                "stage_dims": (0..model.stages.len()).map(|t| model.state_grid(t).dim()).collect::<Vec<_>>(),
            }),
        );
    }

    match dp::solve_value(&model, &solve_opts) {
        Ok(table) => {
            let tsv = export_value_table(&model, &table, &solve_opts, 1e-9)?;
            std::fs::write(out, tsv)?;
            report.push(
                "solve",
                CheckStatus::Pass,
                format!(
                    "T_eff = {}, tail error = {:.3e}, table written to {}",
                    table.t_eff,
                    table.tail_error,
                    out.display()
                ),
                serde_json::json!({
                    "t_eff": table.t_eff,
                    "tail_error": table.tail_error,
                }),
            );
        }
        Err(err) => {
            report.push("solve", CheckStatus::Fail, err.to_string(), serde_json::json!(null));
        }
    }
    finish(report, report_path, started)
}

struct AuditContext {
    model: DpModel,
    table: ValueTable,
    program: Vec<Vec<f64>>,
    stochastic: Option<(StochasticDpModel, Reduction, Vec<Vec<Vec<f64>>>)>,
    opts: AuditOptions,
}

fn cmd_audit(
    model_path: &Path,
    program_path: &Path,
    selected: &[String],
    opts: AuditOptions,
    report_path: Option<&Path>,
    started: Instant,
) -> Result<u8, CliError> {
    let (loaded, digest) = model::load_model(model_path)?;
    let program = model::load_program(program_path)?;
    let mut report = Report::new("audit", digest, Some(opts.seed));

    let ctx = match (loaded, program) {
        (LoadedModel::Deterministic(model), LoadedProgram::Deterministic(states)) => {
            let table = dp::solve_value(&model, &opts.solve)?;
            AuditContext { model, table, program: states, stochastic: None, opts }
        }
        (LoadedModel::Stochastic(smodel), LoadedProgram::Stochastic(process)) => {
            // Adaptedness is an input gate, checked exactly.
            validate_adapted(&process, &smodel.tree)?;
            let red = reduce_to_deterministic(&smodel)?;
            let flat = red.flatten_process(&process)?;
            let table = dp::solve_value(&red.model, &opts.solve)?;
            AuditContext {
                model: red.model.clone(),
                table,
                program: flat,
                stochastic: Some((smodel, red, process.stages.clone())),
                opts,
            }
        }
        _ => {
            return Err(CliError::Input(
                "model and program kinds disagree (deterministic vs stochastic)".into(),
            ))
        }
    };

    if ctx.program.len() < 2 {
        return Err(CliError::Input("program needs at least two states".into()));
    }
    // Admissibility gate: reuse the residual path, which locates the first
    // violated stage.
    let residuals = dp::bellman_residual(&ctx.model, &ctx.table, &ctx.program, &ctx.opts.solve)
        .map_err(|e| match e {
            DpError::InadmissibleProgram { .. } | DpError::InfeasibleProgramState(_) => {
                CliError::Input(e.to_string())
            }
            other => CliError::Dp(other),
        })?;

    for check in selected {
        match check.as_str() {
            "bellman" => audit_bellman(&mut report, &ctx, &residuals),
            "euler" => audit_euler(&mut report, &ctx),
            "viability" => audit_viability(&mut report, &ctx),
            "subdiff" => audit_subdiff(&mut report, &ctx),
            _ => unreachable!("validated by parse_checks"),
        }
    }
    finish(report, report_path, started)
}

fn audit_bellman(report: &mut Report, ctx: &AuditContext, residuals: &[f64]) {
    let worst = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let ok = worst <= ctx.opts.audit_tol;
    report.push(
        "bellman",
        if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        format!("worst |residual| = {worst:.3e} over {} steps", residuals.len()),
        serde_json::json!({ "residuals": residuals, "tolerance": ctx.opts.audit_tol }),
    );
}

fn audit_euler(report: &mut Report, ctx: &AuditContext) {
    let transitions = ctx.program.len() - 1;
    if transitions < 2 {
        report.push(
            "euler",
            CheckStatus::NotApplicable,
            "program too short for the two-stage inclusion".to_string(),
            serde_json::json!(null),
        );
        return;
    }
    for t in 0..transitions - 1 {
        let name = format!("euler[{t}]");
        match &ctx.stochastic {
            None => {
                let result = dp::euler_check(
                    &ctx.model,
                    &ctx.table,
                    t,
                    &ctx.program[t],
                    &ctx.program[t + 1],
                    &ctx.program[t + 2],
                    &ctx.opts,
                );
                match result {
                    Ok(cert) => {
                        let member = cert.membership.is_member();
                        let summary = if member {
                            format!("member (residual {:.3e})", cert.membership.residual)
                        } else {
                            let sep = cert.membership.separator.as_ref().unwrap();
                            format!(
                                "non-member: separator {:?} with margin {:.3e}",
                                sep.direction, sep.margin
                            )
                        };
                        report.push(
                            name,
                            if member { CheckStatus::Pass } else { CheckStatus::Fail },
                            summary,
                            serde_json::to_value(&cert).unwrap(),
                        );
                    }
                    Err(err) => report.push(
                        name,
                        CheckStatus::NotApplicable,
                        format!("premise uncertified: {err}"),
                        serde_json::json!(null),
                    ),
                }
            }
            Some((smodel, red, stages)) => {
                let result = stochastic::stochastic_euler_check(
                    smodel,
                    red,
                    &ctx.table,
                    t,
                    &stages[t],
                    &stages[t + 1],
                    &stages[t + 2],
                    &ctx.opts,
                );
                match result {
                    Ok(cert) => {
                        let summary = if cert.all_member {
                            "member on every atom".to_string()
                        } else {
                            let failing: Vec<usize> = cert
                                .atoms
                                .iter()
                                .filter(|a| !a.membership.is_member())
                                .map(|a| a.atom)
                                .collect();
                            format!("non-member on atoms {failing:?}")
                        };
                        report.push(
                            name,
                            if cert.all_member { CheckStatus::Pass } else { CheckStatus::Fail },
                            summary,
                            serde_json::to_value(&cert).unwrap(),
                        );
                    }
                    Err(err) => report.push(
                        name,
                        CheckStatus::NotApplicable,
                        format!("premise uncertified: {err}"),
                        serde_json::json!(null),
                    ),
                }
            }
        }
    }
}

fn audit_viability(report: &mut Report, ctx: &AuditContext) {
    for t in 0..ctx.program.len() - 1 {
        if t >= ctx.model.stages.len() {
            break;
        }
        let name = format!("viability[{t}]");
        let x = &ctx.program[t];
        let policy = |p: &[f64]| {
            let clamped = ctx.model.state_grid(t).clamp(p);
            dp::extract_policy(
                &ctx.model,
                &ctx.table,
                t,
                &clamped,
                &ctx.opts.solve,
                ctx.opts.policy_value_tol,
            )
            .ok()
        };
        let set = &ctx.model.stages[t].feasibility;
        let lower = check_lower_viability(
            policy,
            set,
            x,
            ctx.opts.viability_radius,
            ctx.opts.viability_samples,
            ctx.opts.seed,
        );
        let upper = check_upper_viability(
            policy,
            set,
            x,
            ctx.opts.viability_radius,
            ctx.opts.viability_samples,
            ctx.opts.seed,
            ctx.opts.solve.feas_tol,
        );
        match (lower, upper) {
            (Ok(lo), Ok(up)) => {
                let ok = lo.holds() && up.holds();
                report.push(
                    name,
                    if ok { CheckStatus::Pass } else { CheckStatus::Fail },
                    format!(
                        "lower {}, upper {} ({} samples, radius {})",
                        if lo.holds() { "holds-on-samples" } else { "violated" },
                        if up.holds() { "holds-on-samples" } else { "violated" },
                        ctx.opts.viability_samples,
                        ctx.opts.viability_radius
                    ),
                    serde_json::json!({ "lower": lo, "upper": up }),
                );
            }
            (Err(err), _) | (_, Err(err)) => report.push(
                name,
                CheckStatus::NotApplicable,
                format!("premise uncertified: {err}"),
                serde_json::json!(null),
            ),
        }
    }
}

fn audit_subdiff(report: &mut Report, ctx: &AuditContext) {
    for t in 0..ctx.program.len() - 1 {
        if t >= ctx.model.stages.len() {
            break;
        }
        let name = format!("subdiff[{t}]");
        let result = dp::value_subdiff_bound(
            &ctx.model,
            &ctx.table,
            t,
            &ctx.program[t],
            &ctx.program[t + 1],
            &ctx.opts,
        );
        match result {
            Ok(bound) => {
                let mut detail = serde_json::json!({ "bound": bound });
                let mut ok = bound.audit_ok;
                let mut summary = format!(
                    "{} generator(s); table quotients within support + {:.1e}",
                    bound.polytope.generators().len(),
                    ctx.opts.audit_tol
                );
                if bound.polytope.as_singleton().is_some() {
                    match dp::strict_diff_value(
                        &ctx.model,
                        &ctx.table,
                        t,
                        &ctx.program[t],
                        &ctx.program[t + 1],
                        &ctx.opts,
                    ) {
                        Ok(strict) => {
                            ok &= strict.ok;
                            summary = format!(
                                "singleton gradient {:?}; table gradient {:?}",
                                strict.gradient, strict.table_gradient
                            );
                            detail["strict"] = serde_json::to_value(&strict).unwrap();
                        }
                        Err(err) => {
                            detail["strict_error"] = serde_json::json!(err.to_string());
                        }
                    }
                }
                if let Some((smodel, _, stages)) = &ctx.stochastic {
                    match stochastic::integral_subdiff(
                        smodel,
                        t,
                        &stages[t],
                        &stages[t + 1],
                        stochastic::Block::State,
                        ctx.opts.active_tol,
                    ) {
                        Ok(family) => {
                            detail["per_atom"] = serde_json::to_value(&family).unwrap();
                        }
                        Err(err) => {
                            detail["per_atom_error"] = serde_json::json!(err.to_string());
                        }
                    }
                }
                report.push(
                    name,
                    if ok { CheckStatus::Pass } else { CheckStatus::Fail },
                    summary,
                    detail,
                );
            }
            Err(err) => report.push(
                name,
                CheckStatus::NotApplicable,
                format!("premise uncertified: {err}"),
                serde_json::json!(null),
            ),
        }
    }
}
