//! Randomised property checks over the numerical core.
//!
//! Each check draws its cases from its own seeded stream, so a report is
//! reproducible from the seed alone. Checks compare against identities that
//! hold exactly in real arithmetic, with tolerances sized for rounding.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bounds::{bound_optimize_beta, bound_thm3, small_angle_bound, BoundOptions, PSource};
use crate::distill::{closed_form_solution, loss, loss_gradient, loss_hessian};
use crate::geometry::{signed_angle, unsigned_angle, ColumnSpan};
use crate::rng::{stream, SeededRng};
use crate::tasks::{analytic_p, PolyAngleTask, TransferSet};
use crate::trainers::induced_flow_rhs;

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation statistic seen, in the check's own units.
    pub worst: f64,
    /// First failing case, if any.
    pub first_failure: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random cases per check.
    pub cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 200,
        }
    }
}

type Check = fn(&mut SeededRng) -> Result<f64, String>;

/// Name, tolerance on the statistic, and case generator of every check.
const CHECKS: &[(&str, f64, Check)] = &[
    ("projection_is_idempotent", 1e-10, projection_is_idempotent),
    ("projection_is_orthogonal", 1e-10, projection_is_orthogonal),
    ("gradient_lies_in_span", 1e-10, gradient_lies_in_span),
    (
        "gradient_matches_differences",
        1e-5,
        gradient_matches_differences,
    ),
    ("hessian_is_psd", 1e-12, hessian_is_psd),
    (
        "loss_is_convex_on_segments",
        1e-12,
        loss_is_convex_on_segments,
    ),
    (
        "closed_form_is_global_minimum",
        1e-10,
        closed_form_is_global_minimum,
    ),
    (
        "appending_never_widens_angle",
        1e-9,
        appending_never_widens_angle,
    ),
    ("small_angle_lemma_holds", 0.0, small_angle_lemma_holds),
    ("angles_ignore_scale", 1e-12, angles_ignore_scale),
    (
        "optimised_bound_beats_midpoint",
        0.0,
        optimised_bound_beats_midpoint,
    ),
    (
        "unit_depth_flow_is_gradient",
        1e-15,
        unit_depth_flow_is_gradient,
    ),
    (
        "sampler_matches_reverse_cdf",
        0.0,
        sampler_matches_reverse_cdf,
    ),
];

/// Names of all checks, in execution order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check with `opts.cases` cases.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckReport> {
    CHECKS
        .iter()
        .map(|&(name, tol, check)| run_check(name, tol, check, opts))
        .collect()
}

fn run_check(name: &'static str, tol: f64, check: Check, opts: &VerifyOptions) -> CheckReport {
    let mut report = CheckReport {
        name,
        cases: opts.cases,
        failures: 0,
        worst: 0.0,
        first_failure: None,
    };
    for i in 0..opts.cases {
        let mut rng = stream(opts.seed, &format!("verify/{name}"), i as u64);
        let failure = match check(&mut rng) {
            Ok(stat) => {
                report.worst = report.worst.max(stat);
                (stat > tol || stat.is_nan())
                    .then(|| format!("case {i}: statistic {stat:e} above {tol:e}"))
            }
            Err(e) => Some(format!("case {i}: {e}")),
        };
        if let Some(f) = failure {
            report.failures += 1;
            report.first_failure.get_or_insert(f);
        }
    }
    report
}

fn gaussian_vec(d: usize, rng: &mut SeededRng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn gaussian_mat(d: usize, n: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal))
}

/// Random transfer set with a unit teacher, `n ≤ 2d`.
fn random_set(rng: &mut SeededRng) -> Result<(TransferSet, DVector<f64>), String> {
    let d = rng.random_range(2..=12);
    let n = rng.random_range(1..=2 * d);
    let w_star = gaussian_vec(d, rng).normalize();
    let ts =
        TransferSet::from_teacher(gaussian_mat(d, n, rng), &w_star).map_err(|e| e.to_string())?;
    Ok((ts, w_star))
}

fn text(e: crate::Error) -> String {
    e.to_string()
}

fn projection_is_idempotent(rng: &mut SeededRng) -> Result<f64, String> {
    let d = rng.random_range(2..=20);
    let n = rng.random_range(1..=d);
    let span = ColumnSpan::new(&gaussian_mat(d, n, rng)).map_err(text)?;
    let p = span.project(&gaussian_vec(d, rng)).map_err(text)?;
    let pp = span.project(&p).map_err(text)?;
    Ok((&pp - &p).norm() / p.norm().max(f64::MIN_POSITIVE))
}

fn projection_is_orthogonal(rng: &mut SeededRng) -> Result<f64, String> {
    let d = rng.random_range(2..=20);
    let n = rng.random_range(1..=d);
    let x = gaussian_mat(d, n, rng);
    let span = ColumnSpan::new(&x).map_err(text)?;
    let w = gaussian_vec(d, rng);
    let p = span.project(&w).map_err(text)?;
    let r = &w - &p;
    // Pythagoras and orthogonality of the rejection to every column.
    let pythagoras =
        (w.norm_squared() - p.norm_squared() - r.norm_squared()).abs() / w.norm_squared();
    let leak = x.tr_mul(&r).norm() / (x.norm() * w.norm());
    Ok(pythagoras.max(leak))
}

fn gradient_lies_in_span(rng: &mut SeededRng) -> Result<f64, String> {
    let (ts, _) = random_set(rng)?;
    if ts.len() >= ts.dim() {
        return Ok(0.0);
    }
    let g = loss_gradient(&gaussian_vec(ts.dim(), rng), &ts).map_err(text)?;
    let off = ColumnSpan::new(ts.x())
        .map_err(text)?
        .reject(&g)
        .map_err(text)?;
    Ok(off.norm() / g.norm().max(f64::MIN_POSITIVE))
}

fn gradient_matches_differences(rng: &mut SeededRng) -> Result<f64, String> {
    let (ts, _) = random_set(rng)?;
    let w = gaussian_vec(ts.dim(), rng) * 0.5;
    let g = loss_gradient(&w, &ts).map_err(text)?;
    let h = 1e-6;
    let fd = DVector::from_fn(ts.dim(), |i, _| {
        let mut up = w.clone();
        let mut down = w.clone();
        up[i] += h;
        down[i] -= h;
        (loss(&up, &ts).unwrap_or(f64::NAN) - loss(&down, &ts).unwrap_or(f64::NAN)) / (2.0 * h)
    });
    Ok((&fd - &g).norm() / g.norm().max(1e-8))
}

fn hessian_is_psd(rng: &mut SeededRng) -> Result<f64, String> {
    let (ts, _) = random_set(rng)?;
    let hess = loss_hessian(&gaussian_vec(ts.dim(), rng), &ts).map_err(text)?;
    let eig = hess.symmetric_eigenvalues();
    let top = eig.max().max(f64::MIN_POSITIVE);
    Ok((-eig.min()).max(0.0) / top)
}

fn loss_is_convex_on_segments(rng: &mut SeededRng) -> Result<f64, String> {
    let (ts, _) = random_set(rng)?;
    let a = gaussian_vec(ts.dim(), rng);
    let b = gaussian_vec(ts.dim(), rng);
    let lambda: f64 = rng.random();
    let mid = &a * lambda + &b * (1.0 - lambda);
    let chord =
        lambda * loss(&a, &ts).map_err(text)? + (1.0 - lambda) * loss(&b, &ts).map_err(text)?;
    Ok(((loss(&mid, &ts).map_err(text)? - chord) / chord.max(1.0)).max(0.0))
}

fn closed_form_is_global_minimum(rng: &mut SeededRng) -> Result<f64, String> {
    let (ts, w_star) = random_set(rng)?;
    let w_hat = closed_form_solution(&ts, &w_star).map_err(text)?;
    let g = loss_gradient(&w_hat, &ts).map_err(text)?.norm();
    Ok(g.max(loss(&w_hat, &ts).map_err(text)?))
}

fn appending_never_widens_angle(rng: &mut SeededRng) -> Result<f64, String> {
    let d = rng.random_range(3..=30);
    let n = rng.random_range(1..d);
    let w_star = gaussian_vec(d, rng);
    let x = gaussian_mat(d, n + 1, rng);
    let before = ColumnSpan::new(&x.columns(0, n).into_owned())
        .map_err(text)?
        .project(&w_star)
        .map_err(text)?;
    let after = ColumnSpan::new(&x)
        .map_err(text)?
        .project(&w_star)
        .map_err(text)?;
    let widen = unsigned_angle(&w_star, &after).map_err(text)?
        - unsigned_angle(&w_star, &before).map_err(text)?;
    Ok(widen.max(0.0))
}

fn small_angle_lemma_holds(rng: &mut SeededRng) -> Result<f64, String> {
    let d = rng.random_range(2..=20);
    let w = gaussian_vec(d, rng) * rng.random_range(0.1..10.0);
    let eps = rng.random_range(0.0..=0.5) * w.norm();
    let dir = gaussian_vec(d, rng).normalize();
    let v = &w + dir * (eps * rng.random::<f64>());
    let angle = signed_angle(&w, &v).map_err(text)?;
    Ok((angle - small_angle_bound(eps, w.norm()).map_err(text)?).max(0.0))
}

fn angles_ignore_scale(rng: &mut SeededRng) -> Result<f64, String> {
    let d = rng.random_range(2..=20);
    let u = gaussian_vec(d, rng);
    let v = gaussian_vec(d, rng);
    let c = rng.random_range(1e-3..1e3);
    let base = unsigned_angle(&u, &v).map_err(text)?;
    Ok((unsigned_angle(&(&u * c), &v).map_err(text)? - base).abs())
}

fn optimised_bound_beats_midpoint(rng: &mut SeededRng) -> Result<f64, String> {
    let kappa = rng.random_range(0.0..6.0);
    let n = rng.random_range(1..=200);
    let p = PSource::Poly { kappa };
    let opts = BoundOptions::default();
    let best = bound_optimize_beta(&p, n, 1001, opts).map_err(text)?;
    let mid = bound_thm3(&p, FRAC_PI_4, n, opts).map_err(text)?;
    let out_of_range = if (0.0..=FRAC_PI_2).contains(&best.beta) {
        0.0
    } else {
        1.0
    };
    Ok((best.value - mid.value).max(0.0) + out_of_range)
}

fn unit_depth_flow_is_gradient(rng: &mut SeededRng) -> Result<f64, String> {
    let d = rng.random_range(1..=20);
    let w = gaussian_vec(d, rng);
    let g = gaussian_vec(d, rng);
    let rhs = induced_flow_rhs(&w, &g, 1).map_err(text)?;
    Ok((rhs + &g).norm() / g.norm().max(f64::MIN_POSITIVE))
}

/// Kolmogorov distance between sampled angles and the analytic reverse cdf,
/// in excess of the DKW radius at confidence 1 − 1e−6.
fn sampler_matches_reverse_cdf(rng: &mut SeededRng) -> Result<f64, String> {
    const DRAWS: usize = 2000;
    let kappa = [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)];
    let task = PolyAngleTask::with_axis_teacher(kappa, 8).map_err(text)?;
    let mut angles: Vec<f64> = (0..DRAWS).map(|_| task.sample_angle(rng)).collect();
    angles.sort_by(f64::total_cmp);
    let mut gap = 0.0f64;
    for (i, &a) in angles.iter().enumerate() {
        let cdf = 1.0 - analytic_p(kappa, a).map_err(text)?;
        let lo = i as f64 / DRAWS as f64;
        let hi = (i + 1) as f64 / DRAWS as f64;
        gap = gap.max((cdf - lo).abs()).max((cdf - hi).abs());
    }
    let radius = ((2.0f64 / 1e-6).ln() / (2.0 * DRAWS as f64)).sqrt();
    Ok((gap - radius).max(0.0))
}
