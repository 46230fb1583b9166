//! Subcommand bodies. Each turns a validated configuration into staged
//! artifacts, a JSON results block for the manifest, and console lines.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use lindistill::bounds::{
    bound_approx, bound_approx_optimize_beta, bound_optimize_beta, bound_thm3,
    transfer_risk_mc_allow_zero, BoundOptions, BoundReport, ClosedFormLearner, DistillationLearner,
    HardTargetLearner, Learner, PerturbedLearner,
};
use lindistill::distill::{closed_form_solution, loss};
use lindistill::experiments::{
    exp_data_geometry, exp_monotonicity, exp_optim_bias, BiasConfig, BiasData, GeometryConfig,
    MonotonicityConfig, ResultTable,
};
use lindistill::geometry::unsigned_angle;
use lindistill::rng::stream;
use lindistill::stats::mean_and_se;
use lindistill::tasks::{make_transfer_set, EmpiricalTask, MnistFiles, Task};
use lindistill::trainers::{
    balanced_init, init_scale_bound, train_deep, train_shallow, DeepConfig, TrainTrace,
};
use lindistill::verify::{run_all, VerifyOptions};
use lindistill::{TransferSet, Vector};
use serde_json::{json, Value};

use crate::config::{
    BoundConfig, ClosedFormConfig, LearnerKind, RiskConfig, TrainConfig, VerifyConfig,
};
use crate::output::{csv_bytes, Artifacts};
use crate::{plot, Failure};

/// What a successful command hands back for writing and reporting.
#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Artifacts,
    pub results: Value,
    pub failures: usize,
    pub warnings: Vec<String>,
    pub lines: Vec<String>,
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn io(e: std::io::Error) -> Failure {
    Failure::Runtime(format!("cannot serialise output: {e}"))
}

fn transfer_set(
    task: &impl Task,
    n: usize,
    seed: u64,
    label: &str,
) -> Result<TransferSet, Failure> {
    Ok(make_transfer_set(task, n, &mut stream(seed, label, 0))?)
}

fn trace_csv(trace: &TrainTrace) -> Result<Vec<u8>, Failure> {
    csv_bytes(
        &["iteration", "loss", "grad_norm", "distance", "elapsed_secs"],
        trace.records.iter().map(|r| {
            [
                r.iteration.to_string(),
                fmt(r.loss),
                fmt(r.grad_norm),
                fmt(r.distance),
                fmt(r.elapsed_secs),
            ]
        }),
    )
    .map_err(io)
}

fn weights_csv(w: &Vector, w_hat: &Vector, w_star: &Vector) -> Result<Vec<u8>, Failure> {
    csv_bytes(
        &["index", "w", "w_hat", "w_star"],
        (0..w.len()).map(|i| [i.to_string(), fmt(w[i]), fmt(w_hat[i]), fmt(w_star[i])]),
    )
    .map_err(io)
}

pub fn train(cfg: &TrainConfig) -> Result<Outcome, Failure> {
    let task = cfg.task.build()?;
    let ts = transfer_set(&task, cfg.n, cfg.seed, "train/transfer")?;
    let w_star = task.teacher();
    let w_hat = closed_form_solution(&ts, w_star)?;
    let w_hat_norm = w_hat.norm();
    let mut out = Outcome::default();
    let mut results = serde_json::Map::new();

    let (w, trace) = if cfg.depth == 1 {
        let shallow = cfg.trainer.shallow(&ts);
        results.insert("step".into(), json!(shallow.step));
        train_shallow(&ts, &shallow)?
    } else {
        let epsilon = cfg.deep.epsilon_relative * w_hat_norm;
        let bound = init_scale_bound(epsilon, w_hat_norm, cfg.depth);
        let init_scale = cfg
            .deep
            .init_scale
            .unwrap_or(cfg.deep.init_fraction * bound);
        if init_scale >= bound {
            out.warnings.push(format!(
                "init_scale {init_scale:e} is not below the admissible bound {bound:e}"
            ));
        }
        let mut deep = DeepConfig {
            depth: cfg.depth,
            widths: cfg.deep.widths.clone(),
            init_scale,
            init_direction: None,
            step: cfg.trainer.step.unwrap_or(DeepConfig::default().step),
            max_iters: cfg.trainer.max_iters,
            loss_tol: cfg.trainer.loss_tol,
            grad_tol: cfg.trainer.grad_tol,
            epsilon,
            max_halvings: cfg.trainer.max_halvings,
            record_stride: cfg.trainer.record_stride,
            allow_nonconforming: cfg.deep.allow_nonconforming,
        };
        if cfg.trainer.step.is_none() {
            deep = deep.with_auto_step(&ts, w_hat_norm);
        }
        let stack = balanced_init(&deep, &ts, &mut stream(cfg.seed, "train/init", 0))?;
        let outcome = train_deep(stack, &ts, &deep, Some(w_star))?;
        results.insert("step".into(), json!(deep.step));
        results.insert("epsilon".into(), json!(epsilon));
        results.insert("init_scale".into(), json!(init_scale));
        results.insert("init_scale_bound".into(), json!(bound));
        results.insert(
            "initial_balancedness".into(),
            json!(outcome.initial_balancedness),
        );
        results.insert("max_balancedness".into(), json!(outcome.max_balancedness));
        (outcome.w, outcome.trace)
    };

    let final_loss = loss(&w, &ts)?;
    let distance = (&w - &w_hat).norm();
    results.insert("final_loss".into(), json!(final_loss));
    results.insert("distance_to_solution".into(), json!(distance));
    results.insert("w_hat_norm".into(), json!(w_hat_norm));
    results.insert("stop".into(), json!(trace.stop.as_str()));
    results.insert("iterations".into(), json!(trace.iterations));
    results.insert("halvings".into(), json!(trace.halvings));
    results.insert("final_step".into(), json!(trace.final_step));
    out.warnings.extend(trace.warnings.iter().cloned());
    out.lines.push(format!("final loss      {final_loss:.6e}"));
    out.lines.push(format!("‖w − ŵ‖         {distance:.6e}"));
    out.lines.push(format!(
        "stopped         {} after {} iterations ({} halvings)",
        trace.stop.as_str(),
        trace.iterations,
        trace.halvings
    ));
    out.artifacts
        .add("weights.csv", weights_csv(&w, &w_hat, w_star)?);
    out.artifacts.add("trace.csv", trace_csv(&trace)?);
    out.results = Value::Object(results);
    Ok(out)
}

pub fn closed_form(cfg: &ClosedFormConfig) -> Result<Outcome, Failure> {
    let task = cfg.task.build()?;
    let ts = transfer_set(&task, cfg.n, cfg.seed, "closed-form/transfer")?;
    let w_star = task.teacher();
    let w_hat = closed_form_solution(&ts, w_star)?;
    let angle = unsigned_angle(&w_hat, w_star)?;
    let final_loss = loss(&w_hat, &ts)?;
    let mut out = Outcome::default();
    out.lines
        .push(format!("‖ŵ‖             {:.6e}", w_hat.norm()));
    out.lines.push(format!("angle to w*     {angle:.6e}"));
    out.lines.push(format!("loss            {final_loss:.6e}"));
    out.artifacts.add(
        "w_hat.csv",
        csv_bytes(
            &["index", "w_hat", "w_star"],
            (0..w_hat.len()).map(|i| [i.to_string(), fmt(w_hat[i]), fmt(w_star[i])]),
        )
        .map_err(io)?,
    );
    out.results = json!({
        "w_hat_norm": w_hat.norm(),
        "angle_to_teacher": angle,
        "loss": final_loss,
        "spans_input_space": cfg.n >= cfg.task.dim,
    });
    Ok(out)
}

fn learner(cfg: &RiskConfig) -> Box<dyn Learner> {
    match cfg.learner {
        LearnerKind::ClosedForm => Box::new(ClosedFormLearner),
        LearnerKind::Distillation => Box::new(DistillationLearner::default()),
        LearnerKind::HardTarget => Box::new(HardTargetLearner::default()),
        LearnerKind::Perturbed => Box::new(PerturbedLearner { delta: cfg.delta }),
    }
}

pub fn risk(cfg: &RiskConfig) -> Result<Outcome, Failure> {
    let task = cfg.task.build()?;
    let learner = learner(cfg);
    let mut out = Outcome::default();
    let mut rows = Vec::with_capacity(cfg.trials);
    let mut risks = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials as u64 {
        let trial = (|| -> lindistill::Result<_> {
            let ts = make_transfer_set(&task, cfg.n, &mut stream(cfg.seed, "risk/transfer", t))?;
            let w = learner.fit(&ts, &mut stream(cfg.seed, "risk/fit", t))?;
            transfer_risk_mc_allow_zero(
                &w,
                task.teacher(),
                &task,
                cfg.mc_samples,
                &mut stream(cfg.seed, "risk/eval", t),
            )
        })();
        match trial {
            Ok(est) => {
                risks.push(est.estimate);
                rows.push([
                    t.to_string(),
                    fmt(est.estimate),
                    fmt(est.half_width),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                out.failures += 1;
                out.warnings.push(format!("trial {t} failed: {e}"));
                rows.push([t.to_string(), String::new(), String::new(), e.to_string()]);
            }
        }
    }
    if risks.is_empty() {
        return Err(Failure::Runtime(format!(
            "all {} trials failed; first: {}",
            cfg.trials, out.warnings[0]
        )));
    }
    let (mean, se) = mean_and_se(&risks)?;
    out.lines.push(format!(
        "{}: mean risk {mean:.6e} ± {:.2e} over {} trials ({} failed)",
        learner.name(),
        1.96 * se,
        risks.len(),
        out.failures
    ));
    out.artifacts.add(
        "risk.csv",
        csv_bytes(&["trial", "risk", "ci_half_width", "status"], rows).map_err(io)?,
    );
    out.results = json!({
        "learner": learner.name(),
        "mean_risk": mean,
        "standard_error": se,
        "ci_half_width": 1.96 * se,
        "successful_trials": risks.len(),
    });
    Ok(out)
}

fn bound_row(label: &str, r: &BoundReport) -> [String; 8] {
    [
        label.to_string(),
        fmt(r.beta),
        fmt(r.p_beta),
        fmt(r.p_complement),
        r.n.to_string(),
        fmt(r.value),
        r.delta.map(fmt).unwrap_or_default(),
        r.is_vacuous().to_string(),
    ]
}

fn report_json(r: &BoundReport) -> Value {
    json!({
        "beta": r.beta,
        "p_beta": r.p_beta,
        "p_complement": r.p_complement,
        "n": r.n,
        "value": r.value,
        "delta": r.delta,
        "vacuous": r.is_vacuous(),
    })
}

pub fn bound(cfg: &BoundConfig) -> Result<Outcome, Failure> {
    let p = cfg.p.build().map_err(Failure::Config)?;
    let opts = BoundOptions {
        tight: cfg.tight,
        exact_zero: cfg.exact_zero,
    };
    let (best, lo, hi) = match &cfg.approx {
        None => (
            bound_optimize_beta(&p, cfg.n, cfg.grid_size, opts)?,
            bound_thm3(&p, 0.0, cfg.n, opts)?,
            bound_thm3(&p, FRAC_PI_2, cfg.n, opts)?,
        ),
        Some(a) => {
            let best =
                bound_approx_optimize_beta(&p, cfg.n, a.epsilon, a.w_hat_norm, cfg.grid_size)?;
            let top = FRAC_PI_2 - best.delta.unwrap_or(0.0);
            (
                best,
                bound_approx(&p, 0.0, cfg.n, a.epsilon, a.w_hat_norm)?,
                bound_approx(&p, top, cfg.n, a.epsilon, a.w_hat_norm)?,
            )
        }
    };
    let mut out = Outcome::default();
    out.lines.push(format!(
        "risk ≤ {:.6}  at β = {:.6} (p(β) = {:.6}, complement {:.6}){}",
        best.value,
        best.beta,
        best.p_beta,
        best.p_complement,
        if best.is_vacuous() { "  [vacuous]" } else { "" }
    ));
    if best.is_vacuous() {
        out.warnings.push("the bound is vacuous (≥ 1)".into());
    }
    out.artifacts.add(
        "bound.csv",
        csv_bytes(
            &[
                "row",
                "beta",
                "p_beta",
                "p_complement",
                "n",
                "value",
                "delta",
                "vacuous",
            ],
            [
                bound_row("optimum", &best),
                bound_row("beta_min", &lo),
                bound_row("beta_max", &hi),
            ],
        )
        .map_err(io)?,
    );
    out.results = json!({
        "optimum": report_json(&best),
        "beta_min": report_json(&lo),
        "beta_max": report_json(&hi),
    });
    Ok(out)
}

fn table_outcome(table: ResultTable, plot_svg: bool) -> Result<Outcome, Failure> {
    let mut out = Outcome::default();
    let aux = table.experiment.aux_columns();
    let mut summaries = Vec::new();
    for row in table.summaries() {
        let mut line = format!(
            "{:<16} param {:<10} risk {:.4e} ± {:.1e}  ({} ok, {} failed)",
            row.series,
            fmt(row.param),
            row.risk.unwrap_or(f64::NAN),
            row.ci_half_width.unwrap_or(f64::NAN),
            row.count,
            row.failures
        );
        let mut entry = serde_json::Map::new();
        entry.insert("series".into(), json!(row.series));
        entry.insert("param".into(), json!(row.param));
        entry.insert("risk".into(), json!(row.risk));
        entry.insert("ci_half_width".into(), json!(row.ci_half_width));
        entry.insert("count".into(), json!(row.count));
        entry.insert("failures".into(), json!(row.failures));
        for (i, name) in aux.iter().enumerate() {
            let v = row.aux.get(i).copied().flatten();
            entry.insert((*name).into(), json!(v));
            if i == 0 {
                if let Some(v) = v {
                    line.push_str(&format!("  {name} {v:.4}"));
                }
            }
        }
        out.lines.push(line);
        summaries.push(Value::Object(entry));
    }
    out.failures = table.failures();
    if out.failures > 0 {
        out.warnings.push(format!(
            "{} trials failed; see the status column",
            out.failures
        ));
    }
    out.artifacts
        .add("results.csv", table.to_csv_string()?.into_bytes());
    if plot_svg {
        out.artifacts.add("plot.svg", plot::render(&table));
    }
    out.results = json!({
        "experiment": table.experiment.as_str(),
        "summaries": summaries,
    });
    Ok(out)
}

pub fn geometry(cfg: &GeometryConfig, plot_svg: bool) -> Result<Outcome, Failure> {
    table_outcome(exp_data_geometry(cfg)?, plot_svg)
}

/// Uses MNIST from `mnist_dir` when given (all four files must exist), else
/// the synthetic stand-in.
pub fn bias(
    cfg: &BiasConfig,
    mnist_dir: Option<&Path>,
    plot_svg: bool,
) -> Result<Outcome, Failure> {
    let (data, source) = match mnist_dir {
        Some(dir) => {
            let files = MnistFiles::in_dir(dir);
            let missing = files.missing();
            if !missing.is_empty() {
                let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
                return Err(Failure::Config(format!(
                    "MNIST files missing: {}",
                    list.join(", ")
                )));
            }
            let (train, test) = files.load()?;
            let task =
                EmpiricalTask::from_mnist(&train, &test, cfg.teacher_fraction, &cfg.teacher)?;
            (BiasData::Mnist(task), format!("mnist:{}", dir.display()))
        }
        None => (BiasData::synthetic(cfg)?, "synthetic".to_string()),
    };
    let mut out = table_outcome(exp_optim_bias(cfg, &data)?, plot_svg)?;
    if !data.is_mnist() {
        out.warnings
            .push("no MNIST directory given; used the synthetic polynomial task instead".into());
    }
    out.lines.insert(0, format!("data            {source}"));
    out.results["data_source"] = json!(source);
    Ok(out)
}

pub fn monotonicity(cfg: &MonotonicityConfig, plot_svg: bool) -> Result<Outcome, Failure> {
    table_outcome(exp_monotonicity(cfg)?, plot_svg)
}

pub fn verify(cfg: &VerifyConfig) -> Result<Outcome, Failure> {
    let reports = run_all(&VerifyOptions {
        seed: cfg.seed,
        cases: cfg.cases,
    });
    let mut out = Outcome::default();
    let mut rows = Vec::with_capacity(reports.len());
    let mut checks = Vec::with_capacity(reports.len());
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        out.lines.push(format!(
            "{verdict} {:<34} {} cases, worst {:.3e}",
            r.name, r.cases, r.worst
        ));
        if let Some(first) = &r.first_failure {
            out.lines.push(format!("     first failure: {first}"));
        }
        rows.push([
            r.name.to_string(),
            verdict.to_string(),
            r.cases.to_string(),
            r.failures.to_string(),
            fmt(r.worst),
            r.first_failure.clone().unwrap_or_default(),
        ]);
        checks.push(json!({
            "name": r.name,
            "passed": r.passed(),
            "cases": r.cases,
            "failures": r.failures,
            "worst": r.worst,
        }));
    }
    out.failures = reports.iter().filter(|r| !r.passed()).count();
    out.artifacts.add(
        "verify.csv",
        csv_bytes(
            &[
                "check",
                "verdict",
                "cases",
                "failures",
                "worst",
                "first_failure",
            ],
            rows,
        )
        .map_err(io)?,
    );
    out.results = json!({ "checks": checks });
    Ok(out)
}
