//! The distillation objective: normalised cross-entropy against teacher soft
//! labels, its derivatives, and the closed-form minimiser reached by gradient
//! flow from zero.
//!
//! Per point the loss is the Bernoulli KL divergence
//! `KL(yᵢ ‖ σ(zᵢ)) = softplus(zᵢ) − softplus(tᵢ) − yᵢ(zᵢ − tᵢ)` with student
//! logit `zᵢ = wᵀxᵢ` and teacher logit `tᵢ = σ⁻¹(yᵢ)`, which equals the
//! cross-entropy minus its minimum value. It is evaluated in the form
//! `log(1 + yᵢ·expm1(hᵢ)) − yᵢhᵢ` (`hᵢ = zᵢ − tᵢ`) on the side where the label
//! is at most 1/2, so values near the minimum keep full relative precision
//! even for labels at the clamp.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, usage, Error, Result};
use crate::geometry::{check_full_rank, ColumnSpan};
use crate::scalar::Real;
use crate::tasks::TransferSet;

/// Soft labels are kept this far from {0, 1} before inverting the sigmoid.
pub const LABEL_CLAMP: f64 = 1e-15;

/// Default tolerance of [`is_global_minimizer`].
pub const MINIMIZER_TOL: f64 = 1e-8;

/// Logistic function, branching on the sign of the argument.
#[inline]
pub fn sigmoid<T: Real>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + eᵘ)` without overflow.
#[inline]
pub fn softplus<T: Real>(u: T) -> T {
    u.max(T::zero()) + (-u.abs()).exp().ln_1p()
}

/// Inverse of the logistic function, with the argument clamped into
/// `[LABEL_CLAMP, 1 − LABEL_CLAMP]`.
#[inline]
pub fn logit<T: Real>(y: T) -> T {
    let lo = T::lit(LABEL_CLAMP);
    let y = y.clamp(lo, T::one() - lo);
    y.ln() - (-y).ln_1p()
}

/// Logit gaps below this use the power series of the per-point loss.
const SERIES_RADIUS: f64 = 1e-3;

/// Coefficients `κₖ/k!`, `k = 2..6`, of the Bernoulli(`y`) cumulant
/// generating function `log(1 − y + y·eʰ)`. The loss near the label is
/// `Σₖ κₖhᵏ/k!`; later terms are below rounding within [`SERIES_RADIUS`].
fn cumulant_series<T: Real>(y: T) -> [T; 5] {
    let v = y * (T::one() - y);
    let k3 = v * (T::one() - y - y);
    let k4 = v * (T::one() - T::lit(6.0) * v);
    let k5 = k3 * (T::one() - T::lit(12.0) * v);
    let k6 = v * (T::one() - T::lit(30.0) * v + T::lit(120.0) * v * v);
    [
        v / T::lit(2.0),
        k3 / T::lit(6.0),
        k4 / T::lit(24.0),
        k5 / T::lit(120.0),
        k6 / T::lit(720.0),
    ]
}

/// Per-point loss `KL(σ(t) ‖ σ(z))` and its derivative `σ(z) − σ(t)`, given
/// the smaller label `y = σ(−|t|)` and its [`cumulant_series`].
///
/// The pair is evaluated on the side where the label is at most 1/2 (using
/// `KL(y ‖ σ(z)) = KL(1−y ‖ σ(−z))`), so `1 + y·expm1(h)` never cancels.
#[inline]
fn point_terms<T: Real>(t: T, y: T, series: &[T; 5], z: T) -> (T, T) {
    let flip = t > T::zero();
    let (t, z) = if flip { (-t, -z) } else { (t, z) };
    let h = z - t;
    let (kl, residual) = if h.abs() <= T::lit(SERIES_RADIUS) {
        let [c2, c3, c4, c5, c6] = *series;
        let kl = h * h * (c2 + h * (c3 + h * (c4 + h * (c5 + h * c6))));
        let two = T::lit(2.0);
        let residual = h
            * (two * c2
                + h * (T::lit(3.0) * c3
                    + h * (T::lit(4.0) * c4 + h * (T::lit(5.0) * c5 + h * T::lit(6.0) * c6))));
        (kl, residual)
    } else if h.abs() <= T::lit(30.0) {
        let e = h.exp_m1();
        let q = T::one() + y * e;
        (q.ln() - y * h, y * (T::one() - y) * e / q)
    } else {
        (softplus(z) - softplus(t) - y * h, sigmoid(z) - y)
    };
    (kl.max(T::zero()), if flip { -residual } else { residual })
}

fn check<T: Real>(w: &DVector<T>, ts: &TransferSet<T>) -> Result<()> {
    if w.len() != ts.dim() {
        return usage(format!(
            "weights of dimension {} for inputs of dimension {}",
            w.len(),
            ts.dim()
        ));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return domain("weights must be finite");
    }
    Ok(())
}

/// Loss and gradient evaluator that caches the teacher logits of a transfer set.
#[derive(Debug, Clone)]
pub struct Objective<'a, T: Real> {
    ts: &'a TransferSet<T>,
    logits: DVector<T>,
    minor: DVector<T>,
    series: Vec<[T; 5]>,
    inv_n: T,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(ts: &'a TransferSet<T>) -> Self {
        let logits = ts.y().map(logit);
        let minor = logits.map(|t: T| sigmoid(-t.abs()));
        Self {
            series: minor.iter().map(|&y| cumulant_series(y)).collect(),
            minor,
            logits,
            inv_n: T::one() / T::from_usize(ts.len()).expect("transfer set size fits scalar"),
            ts,
        }
    }

    pub fn transfer_set(&self) -> &TransferSet<T> {
        self.ts
    }

    /// Teacher logits recovered from the soft labels.
    pub fn teacher_logits(&self) -> &DVector<T> {
        &self.logits
    }

    /// Loss at logits `z` and, when asked, the residuals `σ(z) − y`.
    pub(crate) fn terms(&self, z: &DVector<T>, residual: Option<&mut DVector<T>>) -> T {
        let mut total = T::zero();
        match residual {
            Some(r) => {
                for i in 0..z.len() {
                    let (kl, ri) =
                        point_terms(self.logits[i], self.minor[i], &self.series[i], z[i]);
                    total += kl;
                    r[i] = ri;
                }
            }
            None => {
                for i in 0..z.len() {
                    total += point_terms(self.logits[i], self.minor[i], &self.series[i], z[i]).0;
                }
            }
        }
        total * self.inv_n
    }

    pub fn value(&self, w: &DVector<T>) -> Result<T> {
        check(w, self.ts)?;
        Ok(self.terms(&self.ts.x().tr_mul(w), None))
    }

    pub fn gradient(&self, w: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.value_and_gradient(w)?.1)
    }

    /// Loss and gradient from one pass over the logits.
    pub fn value_and_gradient(&self, w: &DVector<T>) -> Result<(T, DVector<T>)> {
        check(w, self.ts)?;
        let z = self.ts.x().tr_mul(w);
        let mut residual = DVector::zeros(z.len());
        let value = self.terms(&z, Some(&mut residual));
        Ok((value, self.ts.x() * residual * self.inv_n))
    }

    pub fn hessian(&self, w: &DVector<T>) -> Result<DMatrix<T>> {
        check(w, self.ts)?;
        let curvature = self.ts.x().tr_mul(w).map(|z| {
            let s = sigmoid(z);
            s * (T::one() - s) * self.inv_n
        });
        let x = self.ts.x();
        let mut scaled = x.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= curvature[j];
        }
        let h = &scaled * x.transpose();
        // Symmetrise exactly; the product above is symmetric up to rounding.
        Ok((&h + h.transpose()) * T::lit(0.5))
    }
}

/// Normalised cross-entropy `L¹(w)`, zero at any global minimiser.
pub fn loss<T: Real>(w: &DVector<T>, ts: &TransferSet<T>) -> Result<T> {
    Objective::new(ts).value(w)
}

/// `(1/n) Σᵢ (σ(wᵀxᵢ) − yᵢ) xᵢ`.
pub fn loss_gradient<T: Real>(w: &DVector<T>, ts: &TransferSet<T>) -> Result<DVector<T>> {
    Objective::new(ts).gradient(w)
}

/// `(1/n) X diag(σᵢ(1 − σᵢ)) Xᵀ`.
pub fn loss_hessian<T: Real>(w: &DVector<T>, ts: &TransferSet<T>) -> Result<DMatrix<T>> {
    Objective::new(ts).hessian(w)
}

/// The limit of gradient flow from zero: `w*` when `n ≥ d`, otherwise the
/// orthogonal projection of `w*` onto the span of the transfer inputs.
pub fn closed_form_solution<T: Real>(
    ts: &TransferSet<T>,
    w_star: &DVector<T>,
) -> Result<DVector<T>> {
    if w_star.len() != ts.dim() {
        return usage(format!(
            "teacher of dimension {} for inputs of dimension {}",
            w_star.len(),
            ts.dim()
        ));
    }
    if ts.len() >= ts.dim() {
        check_full_rank(ts.x())?;
        return Ok(w_star.clone());
    }
    ColumnSpan::new(ts.x())?.project(w_star)
}

/// The same solution computed from the soft labels alone: the minimum-norm
/// `w` with `Xᵀw = σ⁻¹(y)`.
pub fn interpolating_solution<T: Real>(ts: &TransferSet<T>) -> Result<DVector<T>> {
    let t = ts.y().map(logit);
    let (d, n) = ts.x().shape();
    if n < d {
        let span = ColumnSpan::new(ts.x())?;
        return span.min_norm_solution(&t).ok_or(Error::Singular {
            columns: n,
            rank: n.saturating_sub(1),
        });
    }
    check_full_rank(ts.x())?;
    // Overdetermined but consistent: least squares through QR of Xᵀ.
    let qr = ts.x().transpose().qr();
    let rhs = qr.q().transpose() * t;
    qr.r().solve_upper_triangular(&rhs).ok_or(Error::Singular {
        columns: n,
        rank: d.saturating_sub(1),
    })
}

/// True iff `max_i |wᵀxᵢ − σ⁻¹(yᵢ)| ≤ tol`, i.e. `w` reproduces the teacher
/// logits on every transfer input.
pub fn is_global_minimizer<T: Real>(w: &DVector<T>, ts: &TransferSet<T>, tol: T) -> Result<bool> {
    check(w, ts)?;
    if ts.y().iter().any(|&y| y == T::zero() || y == T::one()) {
        return domain("a soft label is exactly 0 or 1; the teacher logit cannot be recovered");
    }
    let z = ts.x().transpose() * w;
    let worst = z
        .iter()
        .zip(ts.y().iter())
        .fold(T::zero(), |acc, (&z, &y)| acc.max((z - logit(y)).abs()));
    Ok(worst <= tol)
}
