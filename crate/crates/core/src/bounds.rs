//! Transfer risk: Monte Carlo estimates, geometric upper bounds, and the
//! learner families used to probe optimisation bias and monotonicity.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::distill::interpolating_solution;
use crate::error::{domain, usage, Result};
use crate::geometry::{orthogonal_complement_sample, unsigned_angle, PCurve};
use crate::rng::{stream, SeededRng};
use crate::stats::Z95;
use crate::tasks::{analytic_p, margin_p, InputSampler, Task, TransferSet};
use crate::trainers::{train_shallow, ShallowConfig};

/// Monte Carlo estimate of a probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub estimate: f64,
    pub m: usize,
    /// Half-width of the normal-approximation 95% interval.
    pub half_width: f64,
}

impl RiskEstimate {
    pub fn from_counts(hits: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return domain("an estimate needs at least one sample");
        }
        if hits > m {
            return usage(format!("{hits} hits out of {m} samples"));
        }
        let estimate = hits as f64 / m as f64;
        let half_width = Z95 * (estimate * (1.0 - estimate) / m as f64).sqrt();
        Ok(Self {
            estimate,
            m,
            half_width,
        })
    }

    /// Binomial standard error `sqrt(p(1−p)/m)`.
    pub fn standard_error(&self) -> f64 {
        self.half_width / Z95
    }
}

/// Fraction of `m` fresh inputs on which `w` and `w_star` disagree.
pub fn transfer_risk_mc<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    w: &DVector<f64>,
    w_star: &DVector<f64>,
    sampler: &S,
    m: usize,
    rng: &mut R,
) -> Result<RiskEstimate> {
    risk_mc(w, w_star, sampler, m, false, rng)
}

/// Like [`transfer_risk_mc`] but accepts the zero student, which predicts 1
/// everywhere.
pub fn transfer_risk_mc_allow_zero<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    w: &DVector<f64>,
    w_star: &DVector<f64>,
    sampler: &S,
    m: usize,
    rng: &mut R,
) -> Result<RiskEstimate> {
    risk_mc(w, w_star, sampler, m, true, rng)
}

fn risk_mc<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    w: &DVector<f64>,
    w_star: &DVector<f64>,
    sampler: &S,
    m: usize,
    allow_zero: bool,
    rng: &mut R,
) -> Result<RiskEstimate> {
    if m == 0 {
        return domain("risk estimate needs m ≥ 1 samples");
    }
    if w_star.iter().all(|&v| v == 0.0) {
        return domain("teacher weights are zero");
    }
    if !allow_zero && w.iter().all(|&v| v == 0.0) {
        return domain("student weights are zero, so it predicts 1 everywhere; use the zero-allowing variant to score it");
    }
    let hits = sampler.count_disagreements(w, w_star, m, rng)?;
    RiskEstimate::from_counts(hits, m)
}

/// Disagreement rate over a fixed set of inputs (the columns of `x`).
pub fn transfer_risk_on_inputs(
    w: &DVector<f64>,
    w_star: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<RiskEstimate> {
    if w.len() != x.nrows() || w_star.len() != x.nrows() {
        return usage(format!(
            "weights of dimension {} and {} for inputs of dimension {}",
            w.len(),
            w_star.len(),
            x.nrows()
        ));
    }
    let student = x.tr_mul(w);
    let teacher = x.tr_mul(w_star);
    let hits = student
        .iter()
        .zip(teacher.iter())
        .filter(|(s, t)| (**s >= 0.0) != (**t >= 0.0))
        .count();
    RiskEstimate::from_counts(hits, x.ncols())
}

/// Where the reverse cdf `p(θ)` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PSource {
    /// κ-polynomial task, exact.
    Poly { kappa: f64 },
    /// Uniform angles inside a margin `β₀`, exact.
    Margin { beta0: f64 },
    /// Tabulated curve, interpolated.
    Curve(PCurve),
}

impl PSource {
    pub fn eval(&self, theta: f64) -> Result<f64> {
        match self {
            PSource::Poly { kappa } => analytic_p(*kappa, theta),
            PSource::Margin { beta0 } => margin_p(*beta0, theta),
            PSource::Curve(curve) => {
                if !(0.0..=FRAC_PI_2).contains(&theta) {
                    return domain(format!("angle θ={theta} outside [0, π/2]"));
                }
                Ok(curve.eval(theta))
            }
        }
    }
}

/// Variants of the geometric bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundOptions {
    /// Use `p(β) + (1 − p(β))·p(π/2 − β)ⁿ` instead of `p(β) + p(π/2 − β)ⁿ`.
    pub tight: bool,
    /// The transfer set spans the input space (`n ≥ d`), so the risk is zero.
    pub exact_zero: bool,
}

/// One evaluation of a geometric risk bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub beta: f64,
    pub p_beta: f64,
    /// `p` at the complementary angle `π/2 − β` (or `π/2 − δ − β`).
    pub p_complement: f64,
    pub n: usize,
    pub value: f64,
    /// Angular slack of approximate distillation, if any.
    pub delta: Option<f64>,
}

impl BoundReport {
    /// The bound says nothing beyond the trivial `R ≤ 1`.
    pub fn is_vacuous(&self) -> bool {
        self.value >= 1.0
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return domain("transfer set size n must be ≥ 1");
    }
    Ok(())
}

fn combine(p_beta: f64, p_complement: f64, n: usize, tight: bool) -> f64 {
    let tail = p_complement.powi(n.min(i32::MAX as usize) as i32);
    if tight {
        p_beta + (1.0 - p_beta) * tail
    } else {
        p_beta + tail
    }
}

/// Expected-risk bound `p(β) + p(π/2 − β)ⁿ` at a given angle `β`.
pub fn bound_thm3(p: &PSource, beta: f64, n: usize, opts: BoundOptions) -> Result<BoundReport> {
    check_n(n)?;
    if !(0.0..=FRAC_PI_2).contains(&beta) {
        return domain(format!("β={beta} outside [0, π/2]"));
    }
    let p_beta = p.eval(beta)?;
    let p_complement = p.eval((FRAC_PI_2 - beta).max(0.0))?;
    let value = if opts.exact_zero {
        0.0
    } else {
        combine(p_beta, p_complement, n, opts.tight)
    };
    Ok(BoundReport {
        beta,
        p_beta,
        p_complement,
        n,
        value,
        delta: None,
    })
}

fn grid(hi: f64, grid_size: usize) -> Result<impl Iterator<Item = f64>> {
    if grid_size < 2 {
        return domain(format!("β grid needs at least 2 points, got {grid_size}"));
    }
    let last = (grid_size - 1) as f64;
    Ok((0..grid_size).map(move |k| {
        if k + 1 == grid_size {
            hi
        } else {
            hi * k as f64 / last
        }
    }))
}

fn argmin(reports: impl Iterator<Item = Result<BoundReport>>) -> Result<BoundReport> {
    let mut best: Option<BoundReport> = None;
    for r in reports {
        let r = r?;
        if best.is_none_or(|b| r.value < b.value) {
            best = Some(r);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Minimises [`bound_thm3`] over a uniform grid on `[0, π/2]`; ties go to the
/// smaller angle.
pub fn bound_optimize_beta(
    p: &PSource,
    n: usize,
    grid_size: usize,
    opts: BoundOptions,
) -> Result<BoundReport> {
    argmin(grid(FRAC_PI_2, grid_size)?.map(|beta| bound_thm3(p, beta, n, opts)))
}

/// Risk bound `γⁿ` for tasks with `p(β) = 0` and `p(π/2 − β) = γ`.
pub fn bound_margin(gamma: f64, n: usize) -> Result<f64> {
    check_n(n)?;
    if !(0.0..1.0).contains(&gamma) {
        return domain(format!("margin bound needs γ ∈ [0, 1), got γ={gamma}"));
    }
    Ok(gamma.powi(n.min(i32::MAX as usize) as i32))
}

/// Rate `c(1 + (log n)^κ)/n^κ` for tasks with `p(θ) ≤ c(1 − (2/π)θ)^κ`.
///
/// `n` is real so the rate can be evaluated between integer set sizes.
pub fn bound_poly(c: f64, kappa: f64, n: f64) -> Result<f64> {
    if !(n >= 1.0) || !n.is_finite() {
        return domain(format!("transfer set size n={n} must be ≥ 1"));
    }
    if !(c >= 1.0) || !c.is_finite() {
        return domain(format!(
            "constant c={c} must be ≥ 1: p(0) = 1 has to be dominated by c"
        ));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return domain(format!("degree κ={kappa} must be finite and ≥ 0"));
    }
    Ok(c * (1.0 + n.ln().powf(kappa)) / n.powf(kappa))
}

/// Largest angle between `w` and any `v` with `‖w − v‖ ≤ ε`, bounded as
/// `sqrt(2πε/‖w‖)`.
pub fn small_angle_bound(epsilon: f64, w_norm: f64) -> Result<f64> {
    if !(w_norm > 0.0) || !w_norm.is_finite() {
        return domain(format!("reference norm {w_norm} must be positive"));
    }
    if !(epsilon >= 0.0) {
        return domain(format!("radius ε={epsilon} must be ≥ 0"));
    }
    if epsilon > 0.5 * w_norm {
        return domain(format!(
            "radius ε={epsilon} exceeds half the reference norm ({}): need ε ≤ ‖w‖/2",
            0.5 * w_norm
        ));
    }
    Ok((2.0 * PI * epsilon / w_norm).sqrt())
}

fn approx_slack(epsilon: f64, w_hat_norm: f64) -> Result<f64> {
    let delta = small_angle_bound(epsilon, w_hat_norm)
        .map_err(|e| crate::Error::Domain(format!("approximate bound: {e}")))?;
    if delta > FRAC_PI_2 {
        return domain(format!(
            "δ = sqrt(2πε/‖ŵ‖) = {delta} exceeds π/2, so no β ∈ [0, π/2 − δ] exists"
        ));
    }
    Ok(delta)
}

/// Bound `p(β) + p(π/2 − δ − β)ⁿ` for students within `ε` of the distillation
/// solution, with `δ = sqrt(2πε/‖ŵ‖)`.
pub fn bound_approx(
    p: &PSource,
    beta: f64,
    n: usize,
    epsilon: f64,
    w_hat_norm: f64,
) -> Result<BoundReport> {
    check_n(n)?;
    let delta = approx_slack(epsilon, w_hat_norm)?;
    let hi = FRAC_PI_2 - delta;
    if !(0.0..=hi).contains(&beta) {
        return domain(format!("β={beta} outside [0, π/2 − δ] = [0, {hi}]"));
    }
    let p_beta = p.eval(beta)?;
    let p_complement = p.eval((hi - beta).max(0.0))?;
    let value = combine(p_beta, p_complement, n, false);
    Ok(BoundReport {
        beta,
        p_beta,
        p_complement,
        n,
        value,
        delta: Some(delta),
    })
}

/// Minimises [`bound_approx`] over a uniform grid on `[0, π/2 − δ]`.
pub fn bound_approx_optimize_beta(
    p: &PSource,
    n: usize,
    epsilon: f64,
    w_hat_norm: f64,
    grid_size: usize,
) -> Result<BoundReport> {
    let delta = approx_slack(epsilon, w_hat_norm)?;
    argmin(
        grid(FRAC_PI_2 - delta, grid_size)?
            .map(|beta| bound_approx(p, beta, n, epsilon, w_hat_norm)),
    )
}

/// `ŵ + δ(‖ŵ‖/‖q‖)q` for a given off-span direction `q`.
pub fn perturb_along(w_hat: &DVector<f64>, q: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    let norm = w_hat.norm();
    if norm == 0.0 {
        return domain("cannot perturb the zero solution relative to its norm");
    }
    let qn = q.norm();
    if qn == 0.0 {
        return domain("perturbation direction is zero");
    }
    Ok(w_hat + q * (delta * norm / qn))
}

/// A global minimiser of the distillation loss moved off the data span by a
/// relative amount `δ` in a random direction orthogonal to the data.
pub fn perturbed_learner<R: Rng + ?Sized>(
    w_hat: &DVector<f64>,
    x: &DMatrix<f64>,
    delta: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if x.ncols() >= x.nrows() {
        return domain(format!(
            "{} inputs span ℝ^{}: no direction leaves the training loss unchanged",
            x.ncols(),
            x.nrows()
        ));
    }
    if w_hat.iter().all(|&v| v == 0.0) {
        return domain("cannot perturb the zero solution relative to its norm");
    }
    let q = orthogonal_complement_sample(x, rng)?;
    perturb_along(w_hat, &q, delta)
}

/// A procedure mapping a transfer set to student weights.
pub trait Learner: Sync {
    fn name(&self) -> String;

    fn fit(&self, ts: &TransferSet, rng: &mut SeededRng) -> Result<DVector<f64>>;
}

/// Exact minimum-norm distillation solution, computed from the soft labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClosedFormLearner;

impl Learner for ClosedFormLearner {
    fn name(&self) -> String {
        "closed_form".into()
    }

    fn fit(&self, ts: &TransferSet, _rng: &mut SeededRng) -> Result<DVector<f64>> {
        interpolating_solution(ts)
    }
}

/// Gradient descent on the distillation loss from zero.
#[derive(Debug, Clone, Copy)]
pub struct DistillationLearner {
    pub cfg: ShallowConfig,
    /// Replace `cfg.step` by `1/L` for each transfer set.
    pub auto_step: bool,
}

impl Default for DistillationLearner {
    fn default() -> Self {
        Self {
            cfg: ShallowConfig {
                loss_tol: 0.0,
                grad_tol: 1e-9,
                ..ShallowConfig::default()
            },
            auto_step: true,
        }
    }
}

impl Learner for DistillationLearner {
    fn name(&self) -> String {
        "distillation".into()
    }

    fn fit(&self, ts: &TransferSet, _rng: &mut SeededRng) -> Result<DVector<f64>> {
        let cfg = if self.auto_step {
            self.cfg.with_auto_step(ts)
        } else {
            self.cfg
        };
        Ok(train_shallow(ts, &cfg)?.0)
    }
}

/// Logistic regression on thresholded teacher labels, trained by gradient
/// descent from zero with a capped budget.
#[derive(Debug, Clone, Copy)]
pub struct HardTargetLearner {
    pub cfg: ShallowConfig,
}

impl Default for HardTargetLearner {
    fn default() -> Self {
        Self {
            cfg: ShallowConfig {
                max_iters: 10_000,
                ..ShallowConfig::default()
            },
        }
    }
}

impl Learner for HardTargetLearner {
    fn name(&self) -> String {
        "hard_target".into()
    }

    fn fit(&self, ts: &TransferSet, _rng: &mut SeededRng) -> Result<DVector<f64>> {
        // σ(w*ᵀx) ≥ 1/2 exactly when w*ᵀx ≥ 0.
        let hard = ts.y().map(|y| if y >= 0.5 { 1.0 } else { 0.0 });
        let hard = TransferSet::new(ts.x().clone(), hard)?;
        Ok(train_shallow(&hard, &self.cfg.with_auto_step(&hard))?.0)
    }
}

/// Closed-form solution pushed off the data span by a relative amount `δ`.
#[derive(Debug, Clone, Copy)]
pub struct PerturbedLearner {
    pub delta: f64,
}

impl Learner for PerturbedLearner {
    fn name(&self) -> String {
        format!("perturbed_{}", self.delta)
    }

    fn fit(&self, ts: &TransferSet, rng: &mut SeededRng) -> Result<DVector<f64>> {
        let w_hat = interpolating_solution(ts)?;
        perturbed_learner(&w_hat, ts.x(), self.delta, rng)
    }
}

/// Ignores the data.
#[derive(Debug, Clone)]
pub struct ConstantLearner {
    pub w: DVector<f64>,
}

impl Learner for ConstantLearner {
    fn name(&self) -> String {
        "constant".into()
    }

    fn fit(&self, _ts: &TransferSet, _rng: &mut SeededRng) -> Result<DVector<f64>> {
        Ok(self.w.clone())
    }
}

/// Student weights before and after one transfer point is appended.
#[derive(Debug, Clone)]
pub struct AppendOutcome {
    pub before: DVector<f64>,
    pub after: DVector<f64>,
    pub angle_before: f64,
    pub angle_after: f64,
}

impl AppendOutcome {
    /// The extra point strictly reduced the angle to the teacher.
    pub fn improved(&self) -> bool {
        self.angle_after < self.angle_before
    }
}

/// Fits `learner` on `n` fresh inputs and on the same inputs plus one more.
pub fn append_trial<L, K>(
    learner: &L,
    task: &K,
    n: usize,
    rng: &mut SeededRng,
) -> Result<AppendOutcome>
where
    L: Learner + ?Sized,
    K: Task + ?Sized,
{
    let x = task.draw_inputs(n + 1, rng)?;
    append_on(learner, &x, task.teacher(), rng)
}

/// Fits `learner` on all but the last column of `x`, then on all of `x`.
pub fn append_on<L: Learner + ?Sized>(
    learner: &L,
    x: &DMatrix<f64>,
    w_star: &DVector<f64>,
    rng: &mut SeededRng,
) -> Result<AppendOutcome> {
    let n = x.ncols();
    if n < 2 {
        return usage("appending needs at least two inputs");
    }
    let smaller = TransferSet::from_teacher(x.columns(0, n - 1).into_owned(), w_star)?;
    let larger = TransferSet::from_teacher(x.clone(), w_star)?;
    let before = learner.fit(&smaller, rng)?;
    let after = learner.fit(&larger, rng)?;
    let angle_before = unsigned_angle(w_star, &before)?;
    let angle_after = unsigned_angle(w_star, &after)?;
    Ok(AppendOutcome {
        before,
        after,
        angle_before,
        angle_after,
    })
}

/// Monte Carlo monotonicity index with the number of failed trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityEstimate {
    pub index: RiskEstimate,
    pub failures: usize,
}

/// Probability that one extra transfer point strictly reduces the angle
/// between the learned student and the teacher.
///
/// Trial `i` draws from the stream `(seed, "monotonicity", i)`, so the result
/// does not depend on scheduling. Trials where the learner fails are excluded
/// and counted.
pub fn monotonicity_index_mc<L, K>(
    learner: &L,
    task: &K,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<MonotonicityEstimate>
where
    L: Learner + ?Sized,
    K: Task + Sync + ?Sized,
{
    if trials == 0 || n == 0 {
        return domain(format!("need trials ≥ 1 and n ≥ 1, got {trials} and {n}"));
    }
    let outcomes: Vec<Option<bool>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "monotonicity", i as u64);
            append_trial(learner, task, n, &mut rng)
                .ok()
                .map(|o| o.improved())
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let ok = trials - failures;
    if ok == 0 {
        return domain(format!("learner failed on all {trials} trials"));
    }
    let hits = outcomes.iter().filter(|o| **o == Some(true)).count();
    Ok(MonotonicityEstimate {
        index: RiskEstimate::from_counts(hits, ok)?,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::loss;
    use crate::geometry::signed_angle;
    use crate::rng::from_seed;
    use crate::tasks::{GaussianTask, PolyAngleTask};
    use rand_distr::StandardNormal;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn risk_examples() {
        let task = PolyAngleTask::with_axis_teacher(1.0, 5).unwrap();
        let w_star = task.w_star().clone();
        let mut rng = from_seed(1);
        assert_eq!(
            transfer_risk_mc(&w_star, &w_star, &task, 1000, &mut rng)
                .unwrap()
                .estimate,
            0.0
        );
        let scaled = &w_star * 3.5;
        assert_eq!(
            transfer_risk_mc(&scaled, &w_star, &task, 1000, &mut rng)
                .unwrap()
                .estimate,
            0.0
        );

        let gauss = GaussianTask::new(v(&[1.0, 0.0])).unwrap();
        let m = 100_000;
        let r = transfer_risk_mc(&v(&[0.0, 1.0]), &v(&[1.0, 0.0]), &gauss, m, &mut rng).unwrap();
        let sigma = (0.25 / m as f64).sqrt();
        assert!((r.estimate - 0.5).abs() <= 3.0 * sigma, "{}", r.estimate);
        assert!((r.half_width - Z95 * sigma).abs() < 1e-4);
    }

    #[test]
    fn zero_student_needs_the_flag() {
        let task = GaussianTask::new(v(&[1.0, 0.0])).unwrap();
        let zero = DVector::zeros(2);
        let mut rng = from_seed(2);
        assert!(transfer_risk_mc(&zero, task.teacher(), &task, 10, &mut rng).is_err());
        let r =
            transfer_risk_mc_allow_zero(&zero, task.teacher(), &task, 20_000, &mut rng).unwrap();
        assert!((r.estimate - 0.5).abs() < 0.02);
        assert!(transfer_risk_mc(task.teacher(), task.teacher(), &task, 0, &mut rng).is_err());
    }

    #[test]
    fn risk_is_scale_invariant_under_common_draws() {
        let task = PolyAngleTask::with_axis_teacher(2.0, 6).unwrap();
        let w = v(&[0.8, 0.3, -0.2, 0.1, 0.0, 0.4]);
        let a = transfer_risk_mc(&w, task.w_star(), &task, 5000, &mut from_seed(7)).unwrap();
        let b =
            transfer_risk_mc(&(&w * 17.0), task.w_star(), &task, 5000, &mut from_seed(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn risk_on_fixed_inputs() {
        let x = DMatrix::from_column_slice(2, 4, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.5, -2.0]);
        let r = transfer_risk_on_inputs(&v(&[0.0, 1.0]), &v(&[1.0, 0.0]), &x).unwrap();
        // Teacher labels 1,1,0,1; student labels 1,1,1,0.
        assert_eq!(r.estimate, 0.5);
        assert_eq!(r.m, 4);
    }

    #[test]
    fn thm3_examples() {
        let opts = BoundOptions::default();
        let poly = PSource::Poly { kappa: 1.0 };
        assert_eq!(bound_thm3(&poly, FRAC_PI_2, 7, opts).unwrap().value, 1.0);
        let r = bound_thm3(&poly, FRAC_PI_2 / 2.0, 5, opts).unwrap();
        assert!((r.value - 0.53125).abs() < 1e-15);
        assert!(!r.is_vacuous());

        let margin = PSource::Margin { beta0: 0.3 };
        let beta = FRAC_PI_2 - 0.3;
        let r = bound_thm3(&margin, beta, 6, opts).unwrap();
        let gamma = margin_p(0.3, 0.3).unwrap();
        assert_eq!(r.p_beta, 0.0);
        assert!((r.value - bound_margin(gamma, 6).unwrap()).abs() < 1e-15);

        assert!(bound_thm3(&poly, -0.1, 5, opts).is_err());
        assert!(bound_thm3(&poly, 1.6, 5, opts).is_err());
        assert!(bound_thm3(&poly, 0.5, 0, opts).is_err());
    }

    #[test]
    fn tight_variant_is_never_larger() {
        let poly = PSource::Poly { kappa: 2.0 };
        for k in 0..=20 {
            let beta = FRAC_PI_2 * k as f64 / 20.0;
            let stated = bound_thm3(&poly, beta, 4, BoundOptions::default())
                .unwrap()
                .value;
            let tight = bound_thm3(
                &poly,
                beta,
                4,
                BoundOptions {
                    tight: true,
                    ..Default::default()
                },
            )
            .unwrap()
            .value;
            assert!(tight <= stated);
        }
    }

    #[test]
    fn optimized_beta_examples() {
        let poly = PSource::Poly { kappa: 1.0 };
        let opts = BoundOptions::default();
        let best = bound_optimize_beta(&poly, 5, 1001, opts).unwrap();
        assert!(best.value <= 0.53125);
        for beta in [0.0, FRAC_PI_2] {
            assert!(best.value <= bound_thm3(&poly, beta, 5, opts).unwrap().value);
        }
        let zero = bound_optimize_beta(
            &poly,
            5,
            11,
            BoundOptions {
                exact_zero: true,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(zero.value, 0.0);
        // Every grid point ties, so the smallest angle wins.
        assert_eq!(zero.beta, 0.0);
        assert!(bound_optimize_beta(&poly, 5, 1, opts).is_err());
    }

    #[test]
    fn margin_and_poly_rates() {
        assert_eq!(bound_margin(0.0, 3).unwrap(), 0.0);
        assert_eq!(bound_margin(0.5, 10).unwrap(), 9.765625e-4);
        assert!(bound_margin(1.0, 3).is_err());
        let mut prev = 1.0;
        for n in 1..50 {
            let b = bound_margin(0.7, n).unwrap();
            assert!(b < prev);
            prev = b;
        }

        assert_eq!(bound_poly(2.5, 1.5, 1.0).unwrap(), 2.5);
        let b = bound_poly(1.0, 1.0, 2.0f64.exp()).unwrap();
        assert!((b - 3.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((b - 0.4060).abs() < 1e-4);
        assert!(bound_poly(0.5, 1.0, 3.0).is_err());
        assert!(bound_poly(1.0, -1.0, 3.0).is_err());
        assert!(bound_poly(1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn corollary_substitution_is_dominated() {
        let poly = PSource::Poly { kappa: 1.0 };
        for n in 2..=100usize {
            let beta = FRAC_PI_2 * (n as f64).powf(-1.0 / n as f64);
            let thm = bound_thm3(&poly, beta, n, BoundOptions::default())
                .unwrap()
                .value;
            assert!(thm <= bound_poly(1.0, 1.0, n as f64).unwrap(), "n={n}");
        }
    }

    #[test]
    fn small_angle_examples() {
        assert_eq!(small_angle_bound(0.0, 3.0).unwrap(), 0.0);
        let w = 2.7;
        assert!((small_angle_bound(w / (2.0 * PI), w).unwrap() - 1.0).abs() < 1e-15);
        assert!(small_angle_bound(1.5, 2.0).is_err());
        assert!(small_angle_bound(0.1, 0.0).is_err());
    }

    #[test]
    fn small_angle_holds_on_random_pairs() {
        let mut rng = from_seed(11);
        for _ in 0..1000 {
            let d = rng.random_range(2..10);
            let w = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            let eps = 0.5 * w.norm() * rng.random::<f64>();
            let dir = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            let v = &w + dir.normalize() * (eps * rng.random::<f64>());
            assert!(signed_angle(&w, &v).unwrap() <= small_angle_bound(eps, w.norm()).unwrap());
        }
    }

    #[test]
    fn approx_bound_examples() {
        let poly = PSource::Poly { kappa: 1.0 };
        let opts = BoundOptions::default();
        let exact = bound_thm3(&poly, 0.4, 6, opts).unwrap().value;
        let approx = bound_approx(&poly, 0.4, 6, 0.0, 1.0).unwrap();
        assert_eq!(approx.value, exact);
        assert_eq!(approx.delta, Some(0.0));
        let approx = bound_approx(&poly, 0.4, 6, 1e-3, 1.0).unwrap();
        assert!(approx.value >= exact);
        assert!(bound_approx(&poly, 0.4, 6, 0.5, 1.0).is_err());
        assert!(bound_approx(&poly, 0.4, 6, 0.6, 1.0).is_err());
        assert!(bound_approx(&poly, 1.5, 6, 0.01, 1.0).is_err());
        let best = bound_approx_optimize_beta(&poly, 6, 0.01, 1.0, 501).unwrap();
        assert!(best.value <= bound_approx(&poly, 0.0, 6, 0.01, 1.0).unwrap().value);
    }

    fn underdetermined(d: usize, n: usize, seed: u64) -> (TransferSet, DVector<f64>) {
        let mut rng = from_seed(seed);
        let w_star = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal)).normalize();
        let x = DMatrix::<f64>::from_fn(d, n, |_, _| rng.sample(StandardNormal));
        (TransferSet::from_teacher(x, &w_star).unwrap(), w_star)
    }

    #[test]
    fn perturbed_learner_examples() {
        let (ts, _) = underdetermined(8, 3, 5);
        let w_hat = interpolating_solution(&ts).unwrap();
        let mut rng = from_seed(9);
        assert_eq!(
            perturbed_learner(&w_hat, ts.x(), 0.0, &mut rng).unwrap(),
            w_hat
        );
        for delta in [0.1, 1.0, 10.0, -3.0] {
            let w = perturbed_learner(&w_hat, ts.x(), delta, &mut rng).unwrap();
            assert!(((&w - &w_hat).norm() - delta.abs() * w_hat.norm()).abs() <= 1e-9);
            let drift = (ts.x().tr_mul(&w) - ts.x().tr_mul(&w_hat)).amax();
            assert!(drift <= 1e-9);
            assert!(loss(&w, &ts).unwrap() <= 1e-10);
        }
        let (square, _) = underdetermined(3, 3, 6);
        let w_hat = interpolating_solution(&square).unwrap();
        assert!(perturbed_learner(&w_hat, square.x(), 0.5, &mut rng).is_err());
    }

    #[test]
    fn learners_fit_a_transfer_set() {
        let (ts, w_star) = underdetermined(10, 4, 12);
        let mut rng = from_seed(1);
        let closed = ClosedFormLearner.fit(&ts, &mut rng).unwrap();
        let gd = DistillationLearner::default().fit(&ts, &mut rng).unwrap();
        assert!((&gd - &closed).norm() / closed.norm() < 1e-6);
        let hard = HardTargetLearner::default().fit(&ts, &mut rng).unwrap();
        let x = ts.x();
        for j in 0..ts.len() {
            let col = x.column(j);
            assert_eq!(col.dot(&hard) >= 0.0, col.dot(&w_star) >= 0.0);
        }
        assert_eq!(PerturbedLearner { delta: 0.25 }.name(), "perturbed_0.25");
    }

    #[test]
    fn monotonicity_examples() {
        let task = PolyAngleTask::with_axis_teacher(1.0, 12).unwrap();
        let closed = monotonicity_index_mc(&ClosedFormLearner, &task, 4, 300, 3).unwrap();
        assert_eq!(closed.failures, 0);
        assert_eq!(closed.index.estimate, 1.0);
        let constant = ConstantLearner {
            w: DVector::from_element(12, 1.0),
        };
        let idx = monotonicity_index_mc(&constant, &task, 4, 50, 3).unwrap();
        assert_eq!(idx.index.estimate, 0.0);
        // Reproducible regardless of scheduling.
        let again = monotonicity_index_mc(&ClosedFormLearner, &task, 4, 300, 3).unwrap();
        assert_eq!(closed, again);
    }

    #[test]
    fn failing_trials_are_counted() {
        let task = PolyAngleTask::with_axis_teacher(1.0, 3).unwrap();
        // With n ≥ d there is no off-span direction to perturb along.
        let r = monotonicity_index_mc(&PerturbedLearner { delta: 0.5 }, &task, 3, 10, 1);
        assert!(r.is_err());
        let zero = ConstantLearner {
            w: DVector::zeros(3),
        };
        assert!(monotonicity_index_mc(&zero, &task, 2, 5, 1).is_err());
    }
}
