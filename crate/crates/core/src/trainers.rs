//! Gradient-descent discretisations of gradient flow on the distillation loss.
//!
//! The shallow trainer updates a weight vector from zero. The deep trainer
//! updates every factor of `wᵀ = W_N ⋯ W_1` simultaneously, starting from a
//! balanced rank-one initialisation close to zero.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distill::{closed_form_solution, interpolating_solution, Objective};
use crate::error::{domain, usage, Error, Result};
use crate::scalar::Real;
use crate::tasks::TransferSet;

/// A step whose loss exceeds the last accepted loss by more than this counts
/// as diverging.
pub const DIVERGENCE_JUMP: f64 = 1e-6;
/// Consecutive diverging steps that trigger a step halving.
pub const DIVERGENCE_STREAK: usize = 10;

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    LossTol,
    GradTol,
    MaxIters,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::LossTol => "loss_tol",
            StopReason::GradTol => "grad_tol",
            StopReason::MaxIters => "max_iters",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// `‖w − ŵ‖`, NaN when no reference solution is available.
    pub distance: f64,
    pub elapsed_secs: f64,
}

/// Recorded history of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub stride: usize,
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
    pub iterations: usize,
    /// Step size in force when the run ended.
    pub final_step: f64,
    pub halvings: u32,
    pub warnings: Vec<String>,
}

impl TrainTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records
            .last()
            .expect("trace holds at least the initial record")
    }

    /// True when the recorded loss never rises by more than `slack`.
    pub fn is_descending(&self, slack: f64) -> bool {
        self.records
            .windows(2)
            .all(|p| p[1].loss <= p[0].loss + slack)
    }
}

/// Stopping rules and step control shared by both trainers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopOptions {
    pub step: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub grad_tol: f64,
    pub max_halvings: u32,
    pub record_stride: usize,
}

impl LoopOptions {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return usage(format!(
                "step size {} must be positive and finite",
                self.step
            ));
        }
        if !(self.loss_tol >= 0.0) || !(self.grad_tol >= 0.0) {
            return usage("stopping tolerances must be non-negative");
        }
        if self.record_stride == 0 {
            return usage("trace stride must be at least 1");
        }
        Ok(())
    }
}

/// Settings of the shallow (`N = 1`) trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShallowConfig {
    pub step: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub grad_tol: f64,
    pub max_halvings: u32,
    pub record_stride: usize,
}

impl Default for ShallowConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_iters: 1_000_000,
            loss_tol: 1e-10,
            grad_tol: 1e-10,
            max_halvings: 20,
            record_stride: 100,
        }
    }
}

impl ShallowConfig {
    /// Replaces the step by `1/L`, where `L = ‖X‖₂²/(4n)` bounds the
    /// curvature of the loss everywhere.
    pub fn with_auto_step<T: Real>(mut self, ts: &TransferSet<T>) -> Self {
        self.step = 1.0 / smoothness_bound(ts);
        self
    }

    fn options(&self) -> LoopOptions {
        LoopOptions {
            step: self.step,
            max_iters: self.max_iters,
            loss_tol: self.loss_tol,
            grad_tol: self.grad_tol,
            max_halvings: self.max_halvings,
            record_stride: self.record_stride,
        }
    }
}

/// Global smoothness constant `‖X‖₂² / (4n)` of the loss.
pub fn smoothness_bound<T: Real>(ts: &TransferSet<T>) -> f64 {
    let x = ts.x().map(|v| v.as_f64());
    let top = x.singular_values().max();
    (top * top / (4.0 * ts.len() as f64)).max(f64::MIN_POSITIVE)
}

struct Evaluated<T: Real, G> {
    loss: T,
    grad: G,
    grad_norm: T,
}

/// Gradient descent with stopping rules, divergence-triggered step halving
/// and strided trace recording.
fn descend<T: Real, S, G>(
    init: S,
    opts: &LoopOptions,
    reference: Option<&DVector<T>>,
    weights: impl Fn(&S) -> DVector<T>,
    eval: impl Fn(&S) -> Result<Evaluated<T, G>>,
    advance: impl Fn(&S, &G, T) -> S,
) -> Result<(S, TrainTrace)> {
    opts.validate()?;
    let clock = Instant::now();
    let distance = |w: &DVector<T>| reference.map_or(f64::NAN, |r| (w - r).norm().as_f64());
    let record = |it: usize, s: &S, e: &Evaluated<T, G>| TraceRecord {
        iteration: it,
        loss: e.loss.as_f64(),
        grad_norm: e.grad_norm.as_f64(),
        distance: distance(&weights(s)),
        elapsed_secs: clock.elapsed().as_secs_f64(),
    };
    let finite = |e: &Evaluated<T, G>| e.loss.is_finite() && e.grad_norm.is_finite();

    let mut state = init;
    let mut current = eval(&state)?;
    if !finite(&current) {
        return Err(Error::Numeric {
            what: "initial loss".into(),
            iteration: 0,
        });
    }
    let mut records = vec![record(0, &state, &current)];
    let mut step = opts.step;
    let mut halvings = 0;
    let mut streak = 0;
    // Last accepted state and its iteration; `None` while it is the current state.
    let mut snapshot: Option<(S, usize)> = None;
    let mut snapshot_loss = current.loss;
    let mut it = 0;

    let stop = loop {
        if current.loss <= T::lit(opts.loss_tol) {
            break StopReason::LossTol;
        }
        if current.grad_norm <= T::lit(opts.grad_tol) {
            break StopReason::GradTol;
        }
        if it >= opts.max_iters {
            break StopReason::MaxIters;
        }
        let next_state = advance(&state, &current.grad, T::lit(step));
        let next = eval(&next_state).map_err(|e| match e {
            Error::Numeric { what, .. } => Error::Numeric {
                what,
                iteration: it + 1,
            },
            other => other,
        })?;
        it += 1;
        let blown = !finite(&next);
        let diverging = blown || next.loss > snapshot_loss + T::lit(DIVERGENCE_JUMP);
        streak = if diverging { streak + 1 } else { 0 };
        if blown || streak >= DIVERGENCE_STREAK {
            if halvings >= opts.max_halvings {
                return Err(if blown {
                    Error::Numeric {
                        what: "loss or gradient".into(),
                        iteration: it,
                    }
                } else {
                    Error::StepSize {
                        iteration: it,
                        step,
                    }
                });
            }
            halvings += 1;
            step *= 0.5;
            streak = 0;
            match snapshot.take() {
                Some((s, k)) => {
                    state = s;
                    it = k;
                }
                None => it -= 1,
            }
            records.retain(|r| r.iteration <= it);
            current = eval(&state)?;
            continue;
        }
        if !diverging {
            snapshot = None;
            snapshot_loss = next.loss;
            state = next_state;
        } else if snapshot.is_none() {
            snapshot = Some((std::mem::replace(&mut state, next_state), it - 1));
        } else {
            state = next_state;
        }
        current = next;
        if it % opts.record_stride == 0 {
            records.push(record(it, &state, &current));
        }
    };
    if records.last().map(|r| r.iteration) != Some(it) {
        records.push(record(it, &state, &current));
    }
    let trace = TrainTrace {
        stride: opts.record_stride,
        records,
        stop,
        iterations: it,
        final_step: step,
        halvings,
        warnings: Vec::new(),
    };
    Ok((state, trace))
}

/// Gradient descent on `L¹` from `w = 0`.
pub fn train_shallow<T: Real>(
    ts: &TransferSet<T>,
    cfg: &ShallowConfig,
) -> Result<(DVector<T>, TrainTrace)> {
    if ts.len() <= ts.dim() {
        train_in_span(ts, cfg)
    } else {
        train_in_weights(ts, cfg)
    }
}

fn train_in_weights<T: Real>(
    ts: &TransferSet<T>,
    cfg: &ShallowConfig,
) -> Result<(DVector<T>, TrainTrace)> {
    let obj = Objective::new(ts);
    let reference = interpolating_solution(ts).ok();
    let eval = |w: &DVector<T>| {
        let (loss, grad) = obj.value_and_gradient(w)?;
        let grad_norm = grad.norm();
        Ok(Evaluated {
            loss,
            grad,
            grad_norm,
        })
    };
    let advance = |w: &DVector<T>, g: &DVector<T>, step: T| w - g * step;
    descend(
        DVector::zeros(ts.dim()),
        &cfg.options(),
        reference.as_ref(),
        |w: &DVector<T>| w.clone(),
        eval,
        advance,
    )
}

/// Iterations between recomputations of the carried logits.
const LOGIT_RESYNC: usize = 256;

/// Shallow iterate `w = X c`, with the logits `z = Xᵀw` carried along.
struct SpanIterate<T: Real> {
    coef: DVector<T>,
    logits: DVector<T>,
    age: usize,
}

/// The same iterates as [`train_in_weights`]: every gradient lies in the
/// column span of `X`, so with `n ≤ d` a step costs one `n×n` product with
/// the Gram matrix instead of two `d×n` products.
fn train_in_span<T: Real>(
    ts: &TransferSet<T>,
    cfg: &ShallowConfig,
) -> Result<(DVector<T>, TrainTrace)> {
    let obj = Objective::new(ts);
    let reference = interpolating_solution(ts).ok();
    let n = ts.len();
    let inv_n = T::one() / T::from_usize(n).expect("transfer set size fits scalar");
    let gram = ts.x().tr_mul(ts.x());
    let eval = |s: &SpanIterate<T>| {
        if s.coef.iter().any(|v| !v.is_finite()) {
            return domain("weights must be finite");
        }
        let mut residual = DVector::zeros(n);
        let loss = obj.terms(&s.logits, Some(&mut residual));
        let mut pulled = DVector::zeros(n);
        pulled.gemv(T::one(), &gram, &residual, T::zero());
        // ‖X r‖² = rᵀ(XᵀX)r.
        let grad_norm = residual.dot(&pulled).max(T::zero()).sqrt() * inv_n;
        Ok(Evaluated {
            loss,
            grad: (residual, pulled),
            grad_norm,
        })
    };
    let advance = |s: &SpanIterate<T>, g: &(DVector<T>, DVector<T>), step: T| {
        let scale = step * inv_n;
        let coef = &s.coef - &g.0 * scale;
        if s.age + 1 >= LOGIT_RESYNC {
            let mut logits = DVector::zeros(n);
            logits.gemv(T::one(), &gram, &coef, T::zero());
            SpanIterate {
                coef,
                logits,
                age: 0,
            }
        } else {
            let mut logits = s.logits.clone();
            logits.axpy(-scale, &g.1, T::one());
            SpanIterate {
                coef,
                logits,
                age: s.age + 1,
            }
        }
    };
    let weights = |s: &SpanIterate<T>| ts.x() * &s.coef;
    let init = SpanIterate {
        coef: DVector::zeros(n),
        logits: DVector::zeros(n),
        age: 0,
    };
    let (last, trace) = descend(
        init,
        &cfg.options(),
        reference.as_ref(),
        weights,
        eval,
        advance,
    )?;
    Ok((weights(&last), trace))
}

/// Factors `W_1 (h₁×d), …, W_N (1×h_{N−1})` of a deep linear student.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStack<T: Real = f64> {
    factors: Vec<DMatrix<T>>,
}

impl<T: Real> FactorStack<T> {
    pub fn new(factors: Vec<DMatrix<T>>) -> Result<Self> {
        if factors.is_empty() {
            return usage("a factor stack needs at least one matrix");
        }
        for j in 1..factors.len() {
            if factors[j].ncols() != factors[j - 1].nrows() {
                return usage(format!(
                    "factor {} has {} columns but factor {} has {} rows",
                    j + 1,
                    factors[j].ncols(),
                    j,
                    factors[j - 1].nrows()
                ));
            }
        }
        let last = factors.last().unwrap();
        if last.nrows() != 1 {
            return usage(format!(
                "last factor must have one row, found {}",
                last.nrows()
            ));
        }
        if factors[0].ncols() == 0 {
            return usage("input dimension must be positive");
        }
        Ok(Self { factors })
    }

    /// Depth-one stack holding `wᵀ`.
    pub fn from_vector(w: &DVector<T>) -> Self {
        Self {
            factors: vec![DMatrix::from_row_slice(1, w.len(), w.as_slice())],
        }
    }

    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    pub fn input_dim(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn factors(&self) -> &[DMatrix<T>] {
        &self.factors
    }

    /// `max_j ‖W_{j+1}ᵀW_{j+1} − W_jW_jᵀ‖_F`.
    pub fn balancedness_residual(&self) -> T {
        self.factors
            .windows(2)
            .map(|p| (p[1].transpose() * &p[1] - &p[0] * p[0].transpose()).norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Suffix products `r_j = (W_N ⋯ W_{j+1})ᵀ` for `j = 0..N`, as columns.
    fn suffixes(&self) -> Vec<DVector<T>> {
        let n = self.depth();
        let mut r = vec![DVector::from_element(1, T::one()); n + 1];
        for j in (0..n).rev() {
            r[j] = self.factors[j].tr_mul(&r[j + 1]);
        }
        r
    }

    /// Chain-rule gradients of `L¹(end_to_end)` given `∇L¹` at the end-to-end vector.
    fn factor_gradients(&self, suffixes: &[DVector<T>], grad: &DVector<T>) -> Vec<DMatrix<T>> {
        let mut out = Vec::with_capacity(self.depth());
        let mut v = grad.clone();
        for (j, f) in self.factors.iter().enumerate() {
            out.push(&suffixes[j + 1] * v.transpose());
            v = f * v;
        }
        out
    }

    fn stepped(&self, grads: &[DMatrix<T>], step: T) -> Self {
        Self {
            factors: self
                .factors
                .iter()
                .zip(grads)
                .map(|(w, g)| w - g * step)
                .collect(),
        }
    }
}

/// End-to-end weight vector `(W_N ⋯ W_1)ᵀ`.
pub fn end_to_end<T: Real>(stack: &FactorStack<T>) -> DVector<T> {
    let mut r = DVector::from_element(1, T::one());
    for f in stack.factors.iter().rev() {
        r = f.tr_mul(&r);
    }
    r
}

/// Settings of the deep (`N ≥ 2`) trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepConfig {
    pub depth: usize,
    /// Hidden widths `h₁ … h_{N−1}`; `None` uses the input dimension for all.
    pub widths: Option<Vec<usize>>,
    /// Norm `s` of the initial end-to-end vector.
    pub init_scale: f64,
    /// Direction of the initial end-to-end vector; `None` draws a uniform one.
    pub init_direction: Option<Vec<f64>>,
    pub step: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub grad_tol: f64,
    /// Target closeness `ε` of the final vector to the distillation solution.
    pub epsilon: f64,
    pub max_halvings: u32,
    pub record_stride: usize,
    /// Accept an initialisation that violates the convergence conditions,
    /// recording a warning instead of failing.
    pub allow_nonconforming: bool,
}

impl Default for DeepConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            widths: None,
            init_scale: 1e-3,
            init_direction: None,
            step: 0.05,
            max_iters: 1_000_000,
            loss_tol: 1e-10,
            grad_tol: 1e-10,
            epsilon: 0.05,
            max_halvings: 20,
            record_stride: 100,
            allow_nonconforming: false,
        }
    }
}

impl DeepConfig {
    fn widths_for(&self, d: usize) -> Result<Vec<usize>> {
        let widths = self
            .widths
            .clone()
            .unwrap_or_else(|| vec![d; self.depth.saturating_sub(1)]);
        if widths.len() + 1 != self.depth {
            return usage(format!(
                "depth {} needs {} hidden widths, got {}",
                self.depth,
                self.depth.saturating_sub(1),
                widths.len()
            ));
        }
        if widths.contains(&0) {
            return usage("hidden widths must be at least 1");
        }
        Ok(widths)
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return usage(format!("deep trainer needs depth ≥ 2, got {}", self.depth));
        }
        if !(self.epsilon > 0.0) {
            return usage("target closeness ε must be positive");
        }
        Ok(())
    }

    /// Step `1/(N·L·‖ŵ‖^{2−2/N})` matched to the curvature of the induced
    /// end-to-end dynamics near the solution.
    pub fn with_auto_step<T: Real>(mut self, ts: &TransferSet<T>, w_hat_norm: f64) -> Self {
        let n = self.depth.max(1) as f64;
        let scale = w_hat_norm.max(1e-12).powf(2.0 - 2.0 / n);
        self.step = 1.0 / (n * smoothness_bound(ts) * scale);
        self
    }

    fn options(&self) -> LoopOptions {
        LoopOptions {
            step: self.step,
            max_iters: self.max_iters,
            loss_tol: self.loss_tol,
            grad_tol: self.grad_tol,
            max_halvings: self.max_halvings,
            record_stride: self.record_stride,
        }
    }
}

/// Largest admissible initial norm
/// `min{‖ŵ‖, εᴺ(ε²‖ŵ‖^{−2/N} + ‖ŵ‖^{2−2/N})^{−N/2}}`.
pub fn init_scale_bound(epsilon: f64, w_hat_norm: f64, depth: usize) -> f64 {
    let n = depth as f64;
    let inner = epsilon.powi(2) * w_hat_norm.powf(-2.0 / n) + w_hat_norm.powf(2.0 - 2.0 / n);
    w_hat_norm.min(epsilon.powf(n) * inner.powf(-n / 2.0))
}

/// Balanced rank-one initialisation with end-to-end vector `±s·u`.
///
/// `W_1 = c e₁uᵀ`, `W_j = c e₁e₁ᵀ`, `W_N = c e₁ᵀ` with `c = s^{1/N}`, so that
/// `W_{j+1}ᵀW_{j+1} = W_jW_jᵀ = c² e₁e₁ᵀ`. The sign of `W_N` is flipped when
/// needed so that the initial loss is below the loss at zero.
pub fn balanced_init<T: Real, R: Rng + ?Sized>(
    cfg: &DeepConfig,
    ts: &TransferSet<T>,
    rng: &mut R,
) -> Result<FactorStack<T>> {
    cfg.validate()?;
    if !(cfg.init_scale > 0.0) || !cfg.init_scale.is_finite() {
        return domain(format!(
            "initial scale {} must be positive: zero is a stationary point where every factor gradient vanishes",
            cfg.init_scale
        ));
    }
    let d = ts.dim();
    let widths = cfg.widths_for(d)?;
    let u: DVector<f64> = match &cfg.init_direction {
        Some(dir) => {
            if dir.len() != d {
                return usage(format!(
                    "initial direction has dimension {}, expected {d}",
                    dir.len()
                ));
            }
            DVector::from_column_slice(dir)
        }
        None => DVector::from_fn(d, |_, _| rng.sample(StandardNormal)),
    };
    let norm = u.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return domain("initial direction must be nonzero and finite");
    }
    let u = u.map(|v| T::lit(v / norm));
    let c = T::lit(cfg.init_scale.powf(1.0 / cfg.depth as f64));

    let mut factors = Vec::with_capacity(cfg.depth);
    let mut first = DMatrix::zeros(widths[0], d);
    first.set_row(0, &(u.transpose() * c));
    factors.push(first);
    for j in 1..widths.len() {
        let mut m = DMatrix::zeros(widths[j], widths[j - 1]);
        m[(0, 0)] = c;
        factors.push(m);
    }
    let mut last = DMatrix::zeros(1, widths[widths.len() - 1]);
    last[(0, 0)] = c;
    factors.push(last);
    let mut stack = FactorStack::new(factors)?;

    let obj = Objective::new(ts);
    let at_zero = obj.value(&DVector::zeros(d))?;
    if obj.value(&end_to_end(&stack))? >= at_zero {
        let n = stack.factors.len();
        stack.factors[n - 1].neg_mut();
        if obj.value(&end_to_end(&stack))? >= at_zero {
            return domain(
                "neither sign of the initial direction lowers the loss below its value at zero",
            );
        }
    }
    Ok(stack)
}

/// Result of a deep training run.
#[derive(Debug, Clone)]
pub struct DeepOutcome<T: Real = f64> {
    pub w: DVector<T>,
    pub stack: FactorStack<T>,
    pub trace: TrainTrace,
    /// Bound on the initial norm when a teacher was supplied.
    pub init_scale_bound: Option<f64>,
    pub initial_balancedness: f64,
    /// Largest balancedness residual seen at the recorded iterations.
    pub max_balancedness: f64,
}

/// Simultaneous gradient descent on every factor of `stack`.
///
/// `teacher` is used only to verify the initialisation and to report the
/// distance to the closed-form solution.
pub fn train_deep<T: Real>(
    stack: FactorStack<T>,
    ts: &TransferSet<T>,
    cfg: &DeepConfig,
    teacher: Option<&DVector<T>>,
) -> Result<DeepOutcome<T>> {
    cfg.validate()?;
    if stack.depth() != cfg.depth {
        return usage(format!(
            "stack depth {} differs from configured depth {}",
            stack.depth(),
            cfg.depth
        ));
    }
    if stack.input_dim() != ts.dim() {
        return usage(format!(
            "stack input dimension {} differs from data dimension {}",
            stack.input_dim(),
            ts.dim()
        ));
    }
    if let Some(widths) = &cfg.widths {
        let actual: Vec<usize> = stack.factors[..stack.depth() - 1]
            .iter()
            .map(|f| f.nrows())
            .collect();
        if &actual != widths {
            return usage(format!(
                "stack widths {actual:?} differ from configured widths {widths:?}"
            ));
        }
    }

    let obj = Objective::new(ts);
    let w0 = end_to_end(&stack);
    let mut warnings = Vec::new();
    let mut violations = Vec::new();

    let reference = match teacher {
        Some(w_star) => Some(closed_form_solution(ts, w_star)?),
        None => {
            warnings.push("no teacher supplied: initial-norm condition not checked".to_string());
            interpolating_solution(ts).ok()
        }
    };
    let bound = reference
        .as_ref()
        .filter(|_| teacher.is_some())
        .map(|w_hat| init_scale_bound(cfg.epsilon, w_hat.norm().as_f64(), cfg.depth));
    if let Some(b) = bound {
        let n0 = w0.norm().as_f64();
        if !(n0 < b) {
            violations.push(format!(
                "initial norm {n0:e} is not below the admissible bound {b:e}"
            ));
        }
    }
    if !(obj.value(&w0)? < obj.value(&DVector::zeros(ts.dim()))?) {
        violations.push("initial loss is not below the loss at zero".to_string());
    }
    let initial_balancedness = stack.balancedness_residual().as_f64();
    let scale = stack
        .factors
        .iter()
        .map(|f| f.norm_squared().as_f64())
        .fold(0.0, f64::max);
    if initial_balancedness > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        violations.push(format!(
            "initial factors are unbalanced (residual {initial_balancedness:e})"
        ));
    }
    if !violations.is_empty() {
        if !cfg.allow_nonconforming {
            return domain(format!(
                "initialisation violates convergence conditions: {}",
                violations.join("; ")
            ));
        }
        warnings.extend(violations);
    }

    let eval = |s: &FactorStack<T>| -> Result<Evaluated<T, Vec<DMatrix<T>>>> {
        if let Some(j) = s
            .factors
            .iter()
            .position(|f| f.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric {
                what: format!("factor {}", j + 1),
                iteration: 0,
            });
        }
        let suffixes = s.suffixes();
        let w = s.factors[0].tr_mul(&suffixes[1]);
        let (loss, g) = obj.value_and_gradient(&w)?;
        let grads = s.factor_gradients(&suffixes, &g);
        let grad_norm = grads
            .iter()
            .map(|m| m.norm_squared())
            .fold(T::zero(), |a, b| a + b)
            .sqrt();
        Ok(Evaluated {
            loss,
            grad: grads,
            grad_norm,
        })
    };
    let advance = |s: &FactorStack<T>, g: &Vec<DMatrix<T>>, step: T| s.stepped(g, step);
    let weights = |s: &FactorStack<T>| end_to_end(s);
    let (stack, mut trace) = descend(
        stack,
        &cfg.options(),
        reference.as_ref(),
        weights,
        eval,
        advance,
    )?;
    trace.warnings = warnings;
    let max_balancedness = initial_balancedness.max(stack.balancedness_residual().as_f64());
    Ok(DeepOutcome {
        w: end_to_end(&stack),
        stack,
        trace,
        init_scale_bound: bound,
        initial_balancedness,
        max_balancedness,
    })
}

/// Right-hand side of the end-to-end dynamics induced by balanced factors:
/// `−‖w‖^{2(N−1)/N} (∇ + (N−1) P_w ∇)` with `P_w` the projector onto `w`.
pub fn induced_flow_rhs<T: Real>(
    w: &DVector<T>,
    grad: &DVector<T>,
    depth: usize,
) -> Result<DVector<T>> {
    if w.len() != grad.len() {
        return usage("weights and gradient differ in dimension");
    }
    if depth == 0 {
        return usage("depth must be at least 1");
    }
    let norm_sq = w.norm_squared();
    if norm_sq == T::zero() {
        return domain("induced dynamics are undefined at w = 0");
    }
    let n = T::from_usize(depth).expect("depth fits scalar");
    let exponent = (n - T::one()) / n;
    let along = w * (w.dot(grad) / norm_sq);
    Ok(-(grad + along * (n - T::one())) * norm_sq.powf(exponent))
}

/// One gradient step of size `step` on the factors; returns the change of the
/// end-to-end vector.
pub fn factor_step_delta<T: Real>(
    stack: &FactorStack<T>,
    ts: &TransferSet<T>,
    step: T,
) -> Result<DVector<T>> {
    let obj = Objective::new(ts);
    let suffixes = stack.suffixes();
    let w = stack.factors[0].tr_mul(&suffixes[1]);
    let g = obj.gradient(&w)?;
    let grads = stack.factor_gradients(&suffixes, &g);
    Ok(end_to_end(&stack.stepped(&grads, step)) - w)
}
