//! Reproducible experiment pipelines and their tabular output.
//!
//! Every trial draws from its own seeded streams, keyed by experiment,
//! purpose, series and trial index, so tables do not depend on thread count
//! or execution order. Within a trial the evaluation stream is shared by all
//! series, which makes differences between series sharper than independent
//! draws would.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    append_on, perturb_along, transfer_risk_mc, transfer_risk_on_inputs, DistillationLearner,
    HardTargetLearner, Learner, PerturbedLearner, RiskEstimate,
};
use crate::distill::{closed_form_solution, loss};
use crate::error::{domain, Error, Result};
use crate::geometry::{orthogonal_complement_sample, unsigned_angle};
use crate::rng::{stream, SeededRng};
use crate::stats::{mean_and_se, Z95};
use crate::tasks::{
    make_transfer_set, EmpiricalTask, InputSampler, PolyAngleTask, Task, TransferSet,
};
use crate::trainers::{train_shallow, ShallowConfig};

/// The three pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Geometry,
    Bias,
    Monotonicity,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Geometry => "geometry",
            ExperimentKind::Bias => "bias",
            ExperimentKind::Monotonicity => "monotonicity",
        }
    }

    /// Names of the per-row metrics besides the risk.
    pub fn aux_columns(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Geometry => &["angle", "train_loss", "iterations"],
            ExperimentKind::Bias => &["angle", "train_loss"],
            ExperimentKind::Monotonicity => &["improved", "angle_before", "angle_after"],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometry" => Ok(ExperimentKind::Geometry),
            "bias" => Ok(ExperimentKind::Bias),
            "monotonicity" => Ok(ExperimentKind::Monotonicity),
            other => Err(Error::Usage(format!(
                "unknown experiment '{other}' (expected geometry, bias or monotonicity)"
            ))),
        }
    }
}

/// Shallow gradient-descent settings; `step = None` picks `1/L` from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    pub step: Option<f64>,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub grad_tol: f64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        let d = ShallowConfig::default();
        Self {
            step: None,
            max_iters: d.max_iters,
            loss_tol: d.loss_tol,
            grad_tol: d.grad_tol,
        }
    }
}

impl TrainerSettings {
    pub fn shallow(&self, ts: &TransferSet) -> ShallowConfig {
        let cfg = ShallowConfig {
            max_iters: self.max_iters,
            loss_tol: self.loss_tol,
            grad_tol: self.grad_tol,
            ..ShallowConfig::default()
        };
        match self.step {
            Some(step) => ShallowConfig { step, ..cfg },
            None => cfg.with_auto_step(ts),
        }
    }
}

/// Risk of distillation students across task geometries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub seed: u64,
    pub kappas: Vec<f64>,
    pub dim: usize,
    pub n: usize,
    pub trials: usize,
    pub mc_samples: usize,
    pub trainer: TrainerSettings,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kappas: vec![0.5, 1.0, 2.0, 4.0],
            dim: 1000,
            n: 20,
            trials: 50,
            mc_samples: 100_000,
            trainer: TrainerSettings::default(),
        }
    }
}

/// Risk of global minimisers pushed off the data span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub seed: u64,
    pub deltas: Vec<f64>,
    pub n: usize,
    pub trials: usize,
    /// Held-out draws per risk estimate on the synthetic task.
    pub mc_samples: usize,
    pub synthetic_dim: usize,
    pub synthetic_kappa: f64,
    /// Fraction of the MNIST training pool used to fit the teacher.
    pub teacher_fraction: f64,
    pub teacher: crate::tasks::LogisticConfig,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deltas: (0..10).map(|k| 10.0 * k as f64).collect(),
            n: 100,
            trials: 50,
            mc_samples: 100_000,
            synthetic_dim: 784,
            synthetic_kappa: 1.0,
            teacher_fraction: 0.8,
            teacher: Default::default(),
        }
    }
}

/// Risk and monotonicity index across a roster of learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonotonicityConfig {
    pub seed: u64,
    pub kappa: f64,
    pub dim: usize,
    pub n: usize,
    pub trials: usize,
    pub mc_samples: usize,
    /// Relative perturbations of the off-span learners in the roster.
    pub perturbations: Vec<f64>,
    pub distillation: TrainerSettings,
    /// Iteration cap of the hard-label learner.
    pub hard_target_iters: usize,
}

impl Default for MonotonicityConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kappa: 1.0,
            dim: 100,
            n: 5,
            trials: 1000,
            mc_samples: 100_000,
            perturbations: vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0],
            // Inputs with a small radial scale are learned slowly, so the
            // tolerance must be tight for the learner to resolve one extra point.
            distillation: TrainerSettings {
                loss_tol: 0.0,
                grad_tol: 1e-12,
                max_iters: 50_000_000,
                ..TrainerSettings::default()
            },
            hard_target_iters: 10_000,
        }
    }
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return domain(format!("{what} must be ≥ 1"));
    }
    Ok(())
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        positive("dim", self.dim)?;
        positive("n", self.n)?;
        positive("trials", self.trials)?;
        positive("mc_samples", self.mc_samples)?;
        if self.kappas.is_empty() {
            return domain("kappas must list at least one degree");
        }
        for &k in &self.kappas {
            if !(k >= 0.0) || !k.is_finite() {
                return domain(format!("κ={k} must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        positive("n", self.n)?;
        positive("trials", self.trials)?;
        positive("mc_samples", self.mc_samples)?;
        positive("synthetic_dim", self.synthetic_dim)?;
        if self.deltas.is_empty() {
            return domain("deltas must list at least one value");
        }
        if self.deltas.iter().any(|d| !d.is_finite()) {
            return domain("deltas must be finite");
        }
        Ok(())
    }
}

impl MonotonicityConfig {
    pub fn validate(&self) -> Result<()> {
        positive("dim", self.dim)?;
        positive("n", self.n)?;
        positive("trials", self.trials)?;
        positive("mc_samples", self.mc_samples)?;
        positive("hard_target_iters", self.hard_target_iters)?;
        if self.perturbations.iter().any(|d| !d.is_finite()) {
            return domain("perturbations must be finite");
        }
        Ok(())
    }
}

/// Per-trial or aggregated row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Trial,
    Summary,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Trial => "trial",
            RowKind::Summary => "summary",
        }
    }
}

/// One line of a result table.
///
/// Trial rows carry a risk estimate with its binomial interval and `count`
/// held-out samples; summary rows carry the mean over successful trials with
/// a 95% interval across trials, `count` successful trials and `failures`
/// failed ones. `aux` and `aux_ci` follow the experiment's auxiliary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub kind: RowKind,
    pub series: String,
    pub param: f64,
    pub trial: Option<usize>,
    pub risk: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub count: usize,
    pub failures: usize,
    pub status: String,
    pub aux: Vec<Option<f64>>,
    pub aux_ci: Vec<Option<f64>>,
}

/// Rows of one experiment run, trial rows of each series followed by its
/// summary, series in roster order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub experiment: ExperimentKind,
    pub rows: Vec<ResultRow>,
}

const FIXED_COLUMNS: [&str; 10] = [
    "experiment",
    "row",
    "series",
    "param",
    "trial",
    "risk",
    "ci_half_width",
    "count",
    "failures",
    "status",
];

fn fmt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn parse_opt<T: FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad {what} cell '{s}'")))
}

fn parse_req<T: FromStr>(s: &str, what: &str) -> Result<T> {
    parse_opt(s, what)?.ok_or_else(|| Error::Format(format!("empty {what} cell")))
}

impl ResultTable {
    /// Column names of the CSV form.
    pub fn header(kind: ExperimentKind) -> Vec<String> {
        let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for name in kind.aux_columns() {
            h.push(name.to_string());
            h.push(format!("{name}_ci"));
        }
        h
    }

    pub fn summaries(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Summary)
    }

    pub fn summary(&self, series: &str) -> Option<&ResultRow> {
        self.summaries().find(|r| r.series == series)
    }

    pub fn trials<'a>(&'a self, series: &'a str) -> impl Iterator<Item = &'a ResultRow> {
        self.rows
            .iter()
            .filter(move |r| r.kind == RowKind::Trial && r.series == series)
    }

    /// Total failed trials over all series.
    pub fn failures(&self) -> usize {
        self.summaries().map(|r| r.failures).sum()
    }

    /// Writes the table as CSV; floats use the shortest representation that
    /// parses back to the same value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.experiment))?;
        for r in &self.rows {
            let mut rec = vec![
                self.experiment.as_str().to_string(),
                r.kind.as_str().to_string(),
                r.series.clone(),
                format!("{:?}", r.param),
                r.trial.map(|t| t.to_string()).unwrap_or_default(),
                fmt_f64(r.risk),
                fmt_f64(r.ci_half_width),
                r.count.to_string(),
                r.failures.to_string(),
                r.status.clone(),
            ];
            for (v, ci) in r.aux.iter().zip(&r.aux_ci) {
                rec.push(fmt_f64(*v));
                rec.push(fmt_f64(*ci));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses a table written by [`ResultTable::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let kind = Self::kind_from_header(&header)?;
        let n_aux = kind.aux_columns().len();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec[0] != *kind.as_str() {
                return Err(Error::Format(format!(
                    "row of experiment '{}' in a {kind} table",
                    &rec[0]
                )));
            }
            let row_kind = match &rec[1] {
                "trial" => RowKind::Trial,
                "summary" => RowKind::Summary,
                other => return Err(Error::Format(format!("unknown row kind '{other}'"))),
            };
            let mut aux = Vec::with_capacity(n_aux);
            let mut aux_ci = Vec::with_capacity(n_aux);
            for k in 0..n_aux {
                aux.push(parse_opt(&rec[10 + 2 * k], "auxiliary")?);
                aux_ci.push(parse_opt(&rec[11 + 2 * k], "auxiliary interval")?);
            }
            rows.push(ResultRow {
                kind: row_kind,
                series: rec[2].to_string(),
                param: parse_req(&rec[3], "param")?,
                trial: parse_opt(&rec[4], "trial")?,
                risk: parse_opt(&rec[5], "risk")?,
                ci_half_width: parse_opt(&rec[6], "interval")?,
                count: parse_req(&rec[7], "count")?,
                failures: parse_req(&rec[8], "failures")?,
                status: rec[9].to_string(),
                aux,
                aux_ci,
            });
        }
        Ok(Self {
            experiment: kind,
            rows,
        })
    }

    fn kind_from_header(header: &[String]) -> Result<ExperimentKind> {
        for kind in [
            ExperimentKind::Geometry,
            ExperimentKind::Bias,
            ExperimentKind::Monotonicity,
        ] {
            if header == Self::header(kind).as_slice() {
                return Ok(kind);
            }
        }
        Err(Error::Format(format!(
            "unrecognised result header: {}",
            header.join(",")
        )))
    }
}

/// Risk estimate and auxiliary metrics, or the reason the trial failed.
type TrialResult = std::result::Result<(RiskEstimate, Vec<f64>), String>;

fn trial_row(series: &str, param: f64, trial: usize, n_aux: usize, res: &TrialResult) -> ResultRow {
    let (risk, ci, count, failures, status, aux) = match res {
        Ok((r, aux)) => (
            Some(r.estimate),
            Some(r.half_width),
            r.m,
            0,
            "ok".to_string(),
            aux.iter().map(|&v| Some(v)).collect(),
        ),
        Err(e) => (None, None, 0, 1, format!("failed: {e}"), vec![None; n_aux]),
    };
    ResultRow {
        kind: RowKind::Trial,
        series: series.to_string(),
        param,
        trial: Some(trial),
        risk,
        ci_half_width: ci,
        count,
        failures,
        status,
        aux,
        aux_ci: vec![None; n_aux],
    }
}

fn mean_ci(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match mean_and_se(values) {
        Ok((m, se)) => (Some(m), Some(Z95 * se)),
        Err(_) => (None, None),
    }
}

fn summary_row(series: &str, param: f64, trials: &[ResultRow], n_aux: usize) -> ResultRow {
    let ok: Vec<&ResultRow> = trials.iter().filter(|r| r.risk.is_some()).collect();
    let risks: Vec<f64> = ok.iter().filter_map(|r| r.risk).collect();
    let (risk, ci) = mean_ci(&risks);
    let (aux, aux_ci) = (0..n_aux)
        .map(|k| mean_ci(&ok.iter().filter_map(|r| r.aux[k]).collect::<Vec<_>>()))
        .unzip();
    let failures = trials.len() - ok.len();
    ResultRow {
        kind: RowKind::Summary,
        series: series.to_string(),
        param,
        trial: None,
        risk,
        ci_half_width: ci,
        count: ok.len(),
        failures,
        status: if ok.is_empty() {
            "failed".into()
        } else {
            "ok".into()
        },
        aux,
        aux_ci,
    }
}

/// Appends the trial rows of one series and their summary.
fn push_series(
    rows: &mut Vec<ResultRow>,
    kind: ExperimentKind,
    series: &str,
    param: f64,
    results: &[TrialResult],
) {
    let n_aux = kind.aux_columns().len();
    let start = rows.len();
    rows.extend(
        results
            .iter()
            .enumerate()
            .map(|(t, r)| trial_row(series, param, t, n_aux, r)),
    );
    let summary = summary_row(series, param, &rows[start..], n_aux);
    rows.push(summary);
}

fn param_label(name: &str, v: f64) -> String {
    format!("{name}={v:?}")
}

/// Distillation risk as the task concentrates around the teacher: one series
/// per κ, one row per trial.
pub fn exp_data_geometry(cfg: &GeometryConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &kappa in &cfg.kappas {
        let series = param_label("kappa", kappa);
        let task = PolyAngleTask::with_axis_teacher(kappa, cfg.dim)?;
        let results: Vec<TrialResult> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| -> Result<_> {
                let mut draw = stream(cfg.seed, &format!("geometry/transfer/{series}"), t as u64);
                let ts = make_transfer_set(&task, cfg.n, &mut draw)?;
                let (w, trace) = train_shallow(&ts, &cfg.trainer.shallow(&ts))?;
                let mut eval = stream(cfg.seed, &format!("geometry/eval/{series}"), t as u64);
                let risk = transfer_risk_mc(&w, task.w_star(), &task, cfg.mc_samples, &mut eval)?;
                let angle = unsigned_angle(task.w_star(), &w)?;
                Ok((
                    risk,
                    vec![angle, trace.last().loss, trace.iterations as f64],
                ))
            })
            .map(|r| r.map_err(|e| e.to_string()))
            .collect();
        push_series(
            &mut rows,
            ExperimentKind::Geometry,
            &series,
            kappa,
            &results,
        );
    }
    Ok(ResultTable {
        experiment: ExperimentKind::Geometry,
        rows,
    })
}

/// Input distribution for the bias experiment.
#[derive(Debug, Clone)]
pub enum BiasData {
    /// MNIST 0/1 with a logistic teacher; risk on the held-out test split.
    Mnist(EmpiricalTask),
    /// κ-polynomial stand-in; risk by Monte Carlo.
    Synthetic(PolyAngleTask),
}

impl BiasData {
    pub fn synthetic(cfg: &BiasConfig) -> Result<Self> {
        Ok(BiasData::Synthetic(PolyAngleTask::with_axis_teacher(
            cfg.synthetic_kappa,
            cfg.synthetic_dim,
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            BiasData::Mnist(t) => t.teacher().len(),
            BiasData::Synthetic(t) => t.dim(),
        }
    }

    pub fn is_mnist(&self) -> bool {
        matches!(self, BiasData::Mnist(_))
    }
}

/// Risk of `ŵ + δ(‖ŵ‖/‖q‖)q` for each `δ`, with `q` orthogonal to the
/// transfer inputs. Within a trial every `δ` shares the transfer set, the
/// direction `q` and the evaluation draws.
pub fn exp_optim_bias(cfg: &BiasConfig, data: &BiasData) -> Result<ResultTable> {
    cfg.validate()?;
    if cfg.n >= data.dim() {
        return domain(format!(
            "n={} inputs in dimension {} leave no direction orthogonal to the data",
            cfg.n,
            data.dim()
        ));
    }
    let eval_inputs = match data {
        BiasData::Mnist(task) => Some(task.eval_inputs()),
        BiasData::Synthetic(_) => None,
    };
    let per_trial: Vec<Vec<TrialResult>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let t = t as u64;
            let setup = || -> Result<(TransferSet, DVector<f64>, DVector<f64>)> {
                let mut draw = stream(cfg.seed, "bias/transfer", t);
                let ts = match data {
                    BiasData::Mnist(task) => make_transfer_set(task, cfg.n, &mut draw)?,
                    BiasData::Synthetic(task) => make_transfer_set(task, cfg.n, &mut draw)?,
                };
                let w_star = match data {
                    BiasData::Mnist(task) => task.teacher(),
                    BiasData::Synthetic(task) => task.teacher(),
                };
                let w_hat = closed_form_solution(&ts, w_star)?;
                let q = orthogonal_complement_sample(
                    ts.x(),
                    &mut stream(cfg.seed, "bias/direction", t),
                )?;
                Ok((ts, w_hat, q))
            };
            let (ts, w_hat, q) = match setup() {
                Ok(s) => s,
                Err(e) => return vec![Err(e.to_string()); cfg.deltas.len()],
            };
            let eval = stream(cfg.seed, "bias/eval", t);
            cfg.deltas
                .iter()
                .map(|&delta| -> Result<_> {
                    let w = perturb_along(&w_hat, &q, delta)?;
                    let (w_star, risk) = match (data, &eval_inputs) {
                        (BiasData::Mnist(task), Some(x)) => (
                            task.teacher(),
                            transfer_risk_on_inputs(&w, task.teacher(), x)?,
                        ),
                        (BiasData::Synthetic(task), _) => (
                            task.teacher(),
                            transfer_risk_mc(
                                &w,
                                task.w_star(),
                                task,
                                cfg.mc_samples,
                                &mut eval.clone(),
                            )?,
                        ),
                        _ => unreachable!("evaluation inputs exist exactly for MNIST"),
                    };
                    Ok((risk, vec![unsigned_angle(w_star, &w)?, loss(&w, &ts)?]))
                })
                .map(|r| r.map_err(|e| e.to_string()))
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for (k, &delta) in cfg.deltas.iter().enumerate() {
        let results: Vec<TrialResult> = per_trial.iter().map(|r| r[k].clone()).collect();
        push_series(
            &mut rows,
            ExperimentKind::Bias,
            &param_label("delta", delta),
            delta,
            &results,
        );
    }
    Ok(ResultTable {
        experiment: ExperimentKind::Bias,
        rows,
    })
}

/// The learners compared by the monotonicity experiment, in table order.
pub fn monotonicity_roster(cfg: &MonotonicityConfig) -> Vec<(String, f64, Box<dyn Learner>)> {
    let mut roster: Vec<(String, f64, Box<dyn Learner>)> = vec![
        (
            "distillation".into(),
            0.0,
            Box::new(DistillationLearner {
                cfg: ShallowConfig {
                    step: cfg
                        .distillation
                        .step
                        .unwrap_or(ShallowConfig::default().step),
                    max_iters: cfg.distillation.max_iters,
                    loss_tol: cfg.distillation.loss_tol,
                    grad_tol: cfg.distillation.grad_tol,
                    ..ShallowConfig::default()
                },
                auto_step: cfg.distillation.step.is_none(),
            }),
        ),
        (
            "hard_target".into(),
            0.0,
            Box::new(HardTargetLearner {
                cfg: ShallowConfig {
                    max_iters: cfg.hard_target_iters,
                    ..ShallowConfig::default()
                },
            }),
        ),
    ];
    for &delta in &cfg.perturbations {
        roster.push((
            param_label("delta", delta),
            delta,
            Box::new(PerturbedLearner { delta }),
        ));
    }
    roster
}

/// Mean risk (on `n` points) and monotonicity index (appending point `n+1`)
/// of each learner in the roster. All learners see the same transfer inputs
/// and evaluation draws within a trial.
pub fn exp_monotonicity(cfg: &MonotonicityConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let task = PolyAngleTask::with_axis_teacher(cfg.kappa, cfg.dim)?;
    let roster = monotonicity_roster(cfg);
    let per_trial: Vec<Vec<TrialResult>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let t = t as u64;
            let x = task.draw_inputs(cfg.n + 1, &mut stream(cfg.seed, "monotonicity/transfer", t));
            let eval = stream(cfg.seed, "monotonicity/eval", t);
            roster
                .iter()
                .map(|(name, _, learner)| -> std::result::Result<_, String> {
                    let x = x.as_ref().map_err(|e| e.to_string())?;
                    let mut fit: SeededRng =
                        stream(cfg.seed, &format!("monotonicity/fit/{name}"), t);
                    let out = append_on(learner.as_ref(), x, task.w_star(), &mut fit)
                        .map_err(|e| e.to_string())?;
                    let risk = transfer_risk_mc(
                        &out.before,
                        task.w_star(),
                        &task,
                        cfg.mc_samples,
                        &mut eval.clone(),
                    )
                    .map_err(|e| e.to_string())?;
                    let improved = if out.improved() { 1.0 } else { 0.0 };
                    Ok((risk, vec![improved, out.angle_before, out.angle_after]))
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for (k, (name, param, _)) in roster.iter().enumerate() {
        let results: Vec<TrialResult> = per_trial.iter().map(|r| r[k].clone()).collect();
        push_series(
            &mut rows,
            ExperimentKind::Monotonicity,
            name,
            *param,
            &results,
        );
    }
    Ok(ResultTable {
        experiment: ExperimentKind::Monotonicity,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geometry() -> GeometryConfig {
        GeometryConfig {
            kappas: vec![0.5, 4.0],
            dim: 40,
            n: 5,
            trials: 6,
            mc_samples: 4000,
            ..Default::default()
        }
    }

    #[test]
    fn geometry_table_has_trials_and_summaries() {
        let table = exp_data_geometry(&small_geometry()).unwrap();
        assert_eq!(table.rows.len(), 2 * 7);
        let lo = table.summary("kappa=0.5").unwrap();
        let hi = table.summary("kappa=4.0").unwrap();
        assert_eq!(lo.count, 6);
        assert!(hi.risk.unwrap() < lo.risk.unwrap());
        assert_eq!(table.trials("kappa=4.0").count(), 6);
        for r in &table.rows {
            let risk = r.risk.unwrap();
            assert!((0.0..=1.0).contains(&risk));
        }
    }

    #[test]
    fn spanning_transfer_sets_give_zero_risk() {
        let cfg = GeometryConfig {
            kappas: vec![1.0],
            dim: 6,
            n: 12,
            trials: 3,
            mc_samples: 20_000,
            ..Default::default()
        };
        let table = exp_data_geometry(&cfg).unwrap();
        for r in table.trials("kappa=1.0") {
            assert!(r.risk.unwrap() <= 3.0 / 20_000.0, "{:?}", r.risk);
        }
    }

    #[test]
    fn tables_are_deterministic_and_round_trip() {
        let a = exp_data_geometry(&small_geometry()).unwrap();
        let b = exp_data_geometry(&small_geometry()).unwrap();
        let csv = a.to_csv_string().unwrap();
        assert_eq!(csv, b.to_csv_string().unwrap());
        let back = ResultTable::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rows_do_not_depend_on_the_roster() {
        let both = exp_data_geometry(&small_geometry()).unwrap();
        let one = exp_data_geometry(&GeometryConfig {
            kappas: vec![4.0],
            ..small_geometry()
        })
        .unwrap();
        let from_both: Vec<_> = both
            .rows
            .iter()
            .filter(|r| r.series == "kappa=4.0")
            .collect();
        let from_one: Vec<_> = one.rows.iter().collect();
        assert_eq!(from_both, from_one);
    }

    #[test]
    fn bias_rows_cover_every_delta() {
        let cfg = BiasConfig {
            deltas: vec![0.0, 1.0, 10.0],
            n: 6,
            trials: 4,
            mc_samples: 5000,
            synthetic_dim: 30,
            ..Default::default()
        };
        let table = exp_optim_bias(&cfg, &BiasData::synthetic(&cfg).unwrap()).unwrap();
        assert_eq!(table.rows.len(), 3 * 5);
        for r in table.rows.iter().filter(|r| r.kind == RowKind::Trial) {
            assert!(r.aux[1].unwrap() <= 1e-10, "training loss {:?}", r.aux[1]);
        }
        let means: Vec<f64> = table.summaries().map(|r| r.risk.unwrap()).collect();
        assert!(means[0] <= means[2]);
        let csv = table.to_csv_string().unwrap();
        assert_eq!(ResultTable::read_csv(csv.as_bytes()).unwrap(), table);
    }

    #[test]
    fn bias_needs_room_off_the_span() {
        let cfg = BiasConfig {
            n: 30,
            synthetic_dim: 30,
            ..Default::default()
        };
        assert!(exp_optim_bias(&cfg, &BiasData::synthetic(&cfg).unwrap()).is_err());
    }

    #[test]
    fn monotonicity_roster_rows() {
        let cfg = MonotonicityConfig {
            dim: 20,
            n: 3,
            trials: 20,
            mc_samples: 2000,
            ..Default::default()
        };
        let table = exp_monotonicity(&cfg).unwrap();
        let names: Vec<&str> = table.summaries().map(|r| r.series.as_str()).collect();
        assert_eq!(names[..2], ["distillation", "hard_target"]);
        assert_eq!(names.len(), 7);
        let distill = table.summary("distillation").unwrap();
        assert_eq!(distill.aux[0], Some(1.0));
        let hard = table.summary("hard_target").unwrap();
        assert!(hard.risk.is_some() && hard.aux[0].is_some());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(exp_data_geometry(&GeometryConfig {
            kappas: vec![],
            ..small_geometry()
        })
        .is_err());
        assert!(exp_data_geometry(&GeometryConfig {
            trials: 0,
            ..small_geometry()
        })
        .is_err());
        assert!(exp_monotonicity(&MonotonicityConfig {
            mc_samples: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            ExperimentKind::Geometry,
            ExperimentKind::Bias,
            ExperimentKind::Monotonicity,
        ] {
            assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("figure".parse::<ExperimentKind>().is_err());
        let bad = "experiment,row\ngeometry,trial\n";
        assert!(ResultTable::read_csv(bad.as_bytes()).is_err());
    }
}
