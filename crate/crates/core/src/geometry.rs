//! Angular and subspace primitives.
//!
//! Angles are measured between weight vectors and inputs; the unsigned angle
//! folds antiparallel vectors onto parallel ones and lives in `[0, π/2]`, the
//! signed angle keeps the sign of the inner product and lives in `[0, π]`.
//! Projections onto the span of a data matrix go through a thin QR
//! factorisation rather than the normal equations.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, usage, Error, Result};
use crate::scalar::Real;
use crate::tasks::InputSampler;

/// Relative threshold on the diagonal of `R` below which a column counts as dependent.
pub const RANK_TOL: f64 = 1e-12;

/// Draws that may be rejected (zero vectors) are retried at most this many times.
pub const MAX_REDRAWS: usize = 1000;

fn cosine<T: Real>(u: &DVector<T>, v: &DVector<T>) -> Result<T> {
    if u.len() != v.len() {
        return usage(format!(
            "angle between vectors of dimension {} and {}",
            u.len(),
            v.len()
        ));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == T::zero() || nv == T::zero() {
        return domain("angle with a zero vector is undefined");
    }
    let c = u.dot(v) / (nu * nv);
    Ok(c.clamp(-T::one(), T::one()))
}

/// Unsigned angle `arccos(|uᵀv| / (‖u‖‖v‖))` in `[0, π/2]`.
pub fn unsigned_angle<T: Real>(u: &DVector<T>, v: &DVector<T>) -> Result<T> {
    let c = cosine(u, v)?.abs();
    Ok(c.acos().clamp(T::zero(), T::frac_pi_2()))
}

/// Signed angle `arccos(uᵀv / (‖u‖‖v‖))` in `[0, π]`.
pub fn signed_angle<T: Real>(u: &DVector<T>, v: &DVector<T>) -> Result<T> {
    let c = cosine(u, v)?;
    Ok(c.acos().clamp(T::zero(), T::pi()))
}

fn rank_tol<T: Real>() -> T {
    T::lit(RANK_TOL).max(T::eps() * T::lit(10.0))
}

/// Numerical rank of the columns of a tall (or square) matrix from the
/// diagonal of its unpivoted QR factor.
fn tall_rank<T: Real>(r_diag: impl Iterator<Item = T>) -> usize {
    let diag: Vec<T> = r_diag.map(|v| v.abs()).collect();
    let largest = diag.iter().copied().fold(T::zero(), |a, b| a.max(b));
    if largest == T::zero() {
        return 0;
    }
    let floor = rank_tol::<T>() * largest;
    diag.iter().filter(|&&v| v > floor).count()
}

/// Checks that a `d × n` data matrix has full rank `min(d, n)`.
pub fn check_full_rank<T: Real>(x: &DMatrix<T>) -> Result<()> {
    let (d, n) = x.shape();
    let tall = if n <= d { x.clone() } else { x.transpose() };
    let k = tall.ncols();
    let r = tall.qr().r();
    let rank = tall_rank((0..k).map(|i| r[(i, i)]));
    if rank < k {
        return Err(Error::Singular { columns: n, rank });
    }
    Ok(())
}

/// The column span of a data matrix, ready for repeated projections.
///
/// When the matrix has at least as many columns as rows the projector is the
/// identity (no rank requirement); otherwise the span is represented by an
/// orthonormal basis from a thin QR factorisation and full column rank is
/// enforced.
#[derive(Debug, Clone)]
pub enum ColumnSpan<T: Real> {
    Whole { dim: usize },
    Basis { q: DMatrix<T>, r: DMatrix<T> },
}

impl<T: Real> ColumnSpan<T> {
    pub fn new(x: &DMatrix<T>) -> Result<Self> {
        let (d, n) = x.shape();
        if d == 0 || n == 0 {
            return usage("data matrix must have at least one row and one column");
        }
        if n >= d {
            return Ok(ColumnSpan::Whole { dim: d });
        }
        let qr = x.clone().qr();
        let r = qr.r();
        let rank = tall_rank((0..n).map(|i| r[(i, i)]));
        if rank < n {
            return Err(Error::Singular { columns: n, rank });
        }
        Ok(ColumnSpan::Basis { q: qr.q(), r })
    }

    pub fn dim(&self) -> usize {
        match self {
            ColumnSpan::Whole { dim } => *dim,
            ColumnSpan::Basis { q, .. } => q.nrows(),
        }
    }

    /// True when the span is the whole space.
    pub fn is_whole(&self) -> bool {
        matches!(self, ColumnSpan::Whole { .. })
    }

    /// Orthogonal projection `QQᵀw`.
    pub fn project(&self, w: &DVector<T>) -> Result<DVector<T>> {
        if w.len() != self.dim() {
            return usage(format!(
                "projecting a {}-vector onto a span in dimension {}",
                w.len(),
                self.dim()
            ));
        }
        Ok(match self {
            ColumnSpan::Whole { .. } => w.clone(),
            ColumnSpan::Basis { q, .. } => q * (q.transpose() * w),
        })
    }

    /// Component of `w` orthogonal to the span.
    pub fn reject(&self, w: &DVector<T>) -> Result<DVector<T>> {
        Ok(w - self.project(w)?)
    }

    /// Minimum-norm `w` with `Xᵀw = t`, i.e. `X(XᵀX)⁻¹t`, for the matrix this
    /// span was built from. Only available in the basis representation.
    pub(crate) fn min_norm_solution(&self, t: &DVector<T>) -> Option<DVector<T>> {
        match self {
            ColumnSpan::Whole { .. } => None,
            ColumnSpan::Basis { q, r } => {
                // Xᵀw = RᵀQᵀw = t, with w = Qz  =>  Rᵀz = t.
                let z = r.transpose().solve_lower_triangular(t)?;
                Some(q * z)
            }
        }
    }
}

/// Orthogonal projection of `w` onto the column span of `x`.
///
/// Identity when `x` has at least as many columns as rows.
pub fn project_onto_span<T: Real>(x: &DMatrix<T>, w: &DVector<T>) -> Result<DVector<T>> {
    if w.len() != x.nrows() {
        return usage(format!(
            "vector of dimension {} does not match data dimension {}",
            w.len(),
            x.nrows()
        ));
    }
    ColumnSpan::new(x)?.project(w)
}

/// Gaussian random vector in the orthogonal complement of the column span of `x`.
pub fn orthogonal_complement_sample<T: Real, R: Rng + ?Sized>(
    x: &DMatrix<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    let (d, n) = x.shape();
    if n >= d {
        return domain(format!(
            "orthogonal complement of {n} columns in dimension {d} is trivial"
        ));
    }
    let span = ColumnSpan::new(x)?;
    for _ in 0..MAX_REDRAWS {
        let g = DVector::<T>::from_fn(d, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let q = span.reject(&g)?;
        if q.norm() > T::eps() * g.norm() {
            return Ok(q);
        }
    }
    domain("could not draw a nonzero complement vector")
}

/// Empirical reverse cdf `θ ↦ P[ᾱ(w*, x) ≥ θ]` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PCurve {
    thetas: Vec<f64>,
    values: Vec<f64>,
}

impl PCurve {
    /// Validates and wraps a curve: ascending grid inside `[0, π/2]`, values
    /// in `[0, 1]` and non-increasing.
    pub fn new(thetas: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if thetas.is_empty() || thetas.len() != values.len() {
            return usage(format!(
                "curve needs matching nonempty grids, got {} angles and {} values",
                thetas.len(),
                values.len()
            ));
        }
        check_grid(&thetas)?;
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return domain(format!("curve value {v} at index {i} is not a probability"));
            }
            if i > 0 && v > values[i - 1] {
                return domain(format!(
                    "curve increases between θ={} and θ={} ({} -> {v}); a reverse cdf is non-increasing",
                    thetas[i - 1],
                    thetas[i],
                    values[i - 1]
                ));
            }
        }
        Ok(Self { thetas, values })
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reads a curve from CSV with header `theta,p`, one grid point per row.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["theta", "p"] {
            return Err(Error::Format(format!(
                "curve header must be `theta,p`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut thetas = Vec::new();
        let mut values = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let field = |k: usize| -> Result<f64> {
                record[k].trim().parse().map_err(|_| {
                    Error::Format(format!("row {}: `{}` is not a number", i + 1, &record[k]))
                })
            };
            thetas.push(field(0)?);
            values.push(field(1)?);
        }
        Self::new(thetas, values)
    }

    /// Writes the curve in the format read by [`PCurve::read_csv`].
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["theta", "p"])?;
        for (t, v) in self.thetas.iter().zip(&self.values) {
            writer.write_record([format!("{t:?}"), format!("{v:?}")])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Piecewise-linear interpolation with flat extrapolation.
    pub fn eval(&self, theta: f64) -> f64 {
        let t = &self.thetas;
        let v = &self.values;
        if theta <= t[0] {
            return v[0];
        }
        if theta >= t[t.len() - 1] {
            return v[v.len() - 1];
        }
        let hi = t.partition_point(|&x| x <= theta);
        let lo = hi - 1;
        let frac = (theta - t[lo]) / (t[hi] - t[lo]);
        v[lo] + frac * (v[hi] - v[lo])
    }
}

fn check_grid(thetas: &[f64]) -> Result<()> {
    for (i, &t) in thetas.iter().enumerate() {
        if !(0.0..=FRAC_PI_2).contains(&t) {
            return domain(format!("grid angle {t} outside [0, π/2]"));
        }
        if i > 0 && t <= thetas[i - 1] {
            return domain("angle grid must be strictly ascending");
        }
    }
    Ok(())
}

/// Monte Carlo estimate of the reverse cdf of `ᾱ(w*, x)` at every grid angle,
/// all from one shared sample of `m` draws.
pub fn reverse_cdf_estimate<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &S,
    w_star: &DVector<f64>,
    theta_grid: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<PCurve> {
    if m == 0 {
        return usage("reverse cdf estimate needs at least one draw");
    }
    if theta_grid.is_empty() {
        return usage("empty angle grid");
    }
    check_grid(theta_grid)?;
    let mut angles = Vec::with_capacity(m);
    for _ in 0..m {
        let x = draw_nonzero(sampler, rng)?;
        angles.push(unsigned_angle(w_star, &x)?);
    }
    angles.sort_by(f64::total_cmp);
    let values = theta_grid
        .iter()
        .map(|&theta| {
            let below = angles.partition_point(|&a| a < theta);
            (m - below) as f64 / m as f64
        })
        .collect();
    PCurve::new(theta_grid.to_vec(), values)
}

pub(crate) fn draw_nonzero<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &S,
    rng: &mut R,
) -> Result<DVector<f64>> {
    for _ in 0..MAX_REDRAWS {
        let x = sampler.sample(rng);
        if x.iter().any(|&v| v != 0.0) {
            return Ok(x);
        }
    }
    domain(format!(
        "sampler produced {MAX_REDRAWS} zero vectors in a row"
    ))
}
