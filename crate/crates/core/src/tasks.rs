//! Transfer tasks: input distributions paired with a teacher, soft/hard
//! labelling, and the MNIST 0/1 pipeline.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distill::sigmoid;
use crate::error::{domain, usage, Error, Result};
use crate::geometry::draw_nonzero;
use crate::scalar::Real;

/// A distribution over inputs in `ℝ^d`.
pub trait InputSampler: Sync {
    fn dim(&self) -> usize;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64>;

    /// Number of draws among `m` on which `w` and `w_star` assign different
    /// hard labels.
    ///
    /// Samplers that are rotationally symmetric about their own teacher
    /// override this with an exact low-dimensional reduction of the same law.
    fn count_disagreements<R: Rng + ?Sized>(
        &self,
        w: &DVector<f64>,
        w_star: &DVector<f64>,
        m: usize,
        rng: &mut R,
    ) -> Result<usize> {
        count_disagreements_full(self, w, w_star, m, rng)
    }
}

/// Reference implementation of [`InputSampler::count_disagreements`]: draws
/// full input vectors and compares hard labels.
pub fn count_disagreements_full<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &S,
    w: &DVector<f64>,
    w_star: &DVector<f64>,
    m: usize,
    rng: &mut R,
) -> Result<usize> {
    check_dims(w, w_star)?;
    if w.len() != sampler.dim() {
        return usage(format!(
            "weights of dimension {} for a sampler in dimension {}",
            w.len(),
            sampler.dim()
        ));
    }
    let mut count = 0;
    for _ in 0..m {
        let x = sampler.sample(rng);
        if (w.dot(&x) >= 0.0) != (w_star.dot(&x) >= 0.0) {
            count += 1;
        }
    }
    Ok(count)
}

/// A source of transfer inputs together with the teacher that labels them.
pub trait Task {
    fn teacher(&self) -> &DVector<f64>;

    /// Draws `n` inputs as the columns of a `d × n` matrix.
    fn draw_inputs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>>;
}

/// Numerically stable logistic teacher output `σ(w*ᵀx)`.
pub fn soft_label<T: Real>(w_star: &DVector<T>, x: &DVector<T>) -> Result<T> {
    check_dims(w_star, x)?;
    Ok(sigmoid(w_star.dot(x)))
}

/// Linear classifier output `𝟙{wᵀx ≥ 0}`; the boundary is classified as 1.
pub fn hard_label<T: Real>(w: &DVector<T>, x: &DVector<T>) -> Result<u8> {
    check_dims(w, x)?;
    Ok(u8::from(w.dot(x) >= T::zero()))
}

fn check_dims<T: Real>(a: &DVector<T>, b: &DVector<T>) -> Result<()> {
    if a.len() != b.len() {
        return usage(format!("dimension mismatch: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// Reverse cdf `P[a ≥ θ] = (1 − (2/π)θ)^κ` of the κ-polynomial angle law.
pub fn analytic_p(kappa: f64, theta: f64) -> Result<f64> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return domain(format!(
            "polynomial degree κ={kappa} must be finite and ≥ 0"
        ));
    }
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return domain(format!("angle θ={theta} outside [0, π/2]"));
    }
    Ok((1.0 - theta / FRAC_PI_2).max(0.0).powf(kappa))
}

/// Reverse cdf of the uniform angle law restricted to `[0, π/2 − β₀]`.
pub fn margin_p(beta0: f64, theta: f64) -> Result<f64> {
    if !(beta0 > 0.0 && beta0 < FRAC_PI_2) {
        return domain(format!("margin β₀={beta0} must lie in (0, π/2)"));
    }
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return domain(format!("angle θ={theta} outside [0, π/2]"));
    }
    Ok((1.0 - theta / (FRAC_PI_2 - beta0)).clamp(0.0, 1.0))
}

fn unit(w: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = w.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return domain("teacher weights must be finite and nonzero");
    }
    Ok(w / norm)
}

/// Shared machinery of tasks whose inputs are `x = ν z` with `ν` standard
/// Gaussian and `z` uniform among unit vectors at a random angle `a` from the
/// teacher.
#[derive(Debug, Clone)]
struct AngularLaw {
    w_star: DVector<f64>,
    direction: DVector<f64>,
    /// Law of `t²` where `t` is one coordinate of a uniform point on the unit
    /// sphere of the teacher's orthogonal complement; `None` when that
    /// complement is one-dimensional.
    coordinate: Option<Beta<f64>>,
}

impl AngularLaw {
    fn new(w_star: DVector<f64>) -> Result<Self> {
        let d = w_star.len();
        if d < 2 {
            return domain(format!(
                "dimension {d} < 2 leaves no direction at a nonzero angle from the teacher"
            ));
        }
        let direction = unit(&w_star)?;
        let coordinate = if d >= 3 {
            Some(Beta::new(0.5, (d as f64 - 2.0) / 2.0).map_err(|e| Error::Domain(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            w_star,
            direction,
            coordinate,
        })
    }

    fn sample_at_angle<R: Rng + ?Sized>(&self, a: f64, rng: &mut R) -> DVector<f64> {
        let d = self.direction.len();
        // Uniform unit vector in the complement of the teacher.
        let u = loop {
            let g = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            let g = &g - &self.direction * self.direction.dot(&g);
            let norm = g.norm();
            if norm > 1e-12 {
                break g / norm;
            }
        };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let nu: f64 = rng.sample(StandardNormal);
        (&self.direction * a.cos() + u * (sign * a.sin())) * nu
    }

    /// Exact reduction: only the projection of `x` onto the plane spanned by
    /// the teacher and the student's orthogonal part matters for the labels.
    fn count_disagreements<R: Rng + ?Sized>(
        &self,
        w: &DVector<f64>,
        m: usize,
        mut angle: impl FnMut(&mut R) -> f64,
        rng: &mut R,
    ) -> usize {
        let along = w.dot(&self.direction);
        let across = (w - &self.direction * along).norm();
        let mut count = 0;
        for _ in 0..m {
            let a = angle(rng);
            let t = match &self.coordinate {
                Some(beta) => beta.sample(rng).sqrt(),
                None => 1.0,
            };
            let t = if rng.random::<bool>() { t } else { -t };
            let nu: f64 = rng.sample(StandardNormal);
            let teacher = nu * a.cos();
            let student = nu * (a.cos() * along + a.sin() * across * t);
            if (teacher >= 0.0) != (student >= 0.0) {
                count += 1;
            }
        }
        count
    }

    fn aligned_with(&self, w_star: &DVector<f64>) -> bool {
        if w_star.len() != self.direction.len() {
            return false;
        }
        let norm = w_star.norm();
        norm > 0.0 && w_star.dot(&self.direction) >= norm * (1.0 - 1e-12)
    }
}

/// The κ-polynomial task: angles with `P[a ≥ θ] = (1 − (2/π)θ)^κ`.
#[derive(Debug, Clone)]
pub struct PolyAngleTask {
    kappa: f64,
    law: AngularLaw,
}

impl PolyAngleTask {
    pub fn new(kappa: f64, w_star: DVector<f64>) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return domain(format!(
                "polynomial degree κ={kappa} must be finite and ≥ 0"
            ));
        }
        Ok(Self {
            kappa,
            law: AngularLaw::new(w_star)?,
        })
    }

    /// Task in dimension `d` with the teacher `e₁`.
    pub fn with_axis_teacher(kappa: f64, d: usize) -> Result<Self> {
        let mut w = DVector::zeros(d.max(1));
        w[0] = 1.0;
        if d < 2 {
            return domain(format!("dimension {d} < 2"));
        }
        Self::new(kappa, w)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.law.w_star
    }

    /// Inverse-cdf draw of the angle; κ = 0 is the point mass at 0.
    pub fn sample_angle<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.kappa == 0.0 {
            return 0.0;
        }
        let u: f64 = rng.random();
        FRAC_PI_2 * (1.0 - u.powf(1.0 / self.kappa))
    }

    pub fn p(&self, theta: f64) -> Result<f64> {
        analytic_p(self.kappa, theta)
    }
}

impl InputSampler for PolyAngleTask {
    fn dim(&self) -> usize {
        self.law.w_star.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let a = self.sample_angle(rng);
        self.law.sample_at_angle(a, rng)
    }

    fn count_disagreements<R: Rng + ?Sized>(
        &self,
        w: &DVector<f64>,
        w_star: &DVector<f64>,
        m: usize,
        rng: &mut R,
    ) -> Result<usize> {
        if w.len() != self.dim() || !self.law.aligned_with(w_star) {
            return count_disagreements_full(self, w, w_star, m, rng);
        }
        Ok(self
            .law
            .count_disagreements(w, m, |r: &mut R| self.sample_angle(r), rng))
    }
}

impl Task for PolyAngleTask {
    fn teacher(&self) -> &DVector<f64> {
        &self.law.w_star
    }

    fn draw_inputs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        sample_columns(self, n, rng)
    }
}

/// Draws `n` inputs from the κ-polynomial task.
pub fn sample_poly_angle<R: Rng + ?Sized>(
    task: &PolyAngleTask,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    sample_columns(task, n, rng)
}

fn sample_columns<S: InputSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &S,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if n == 0 {
        return usage("cannot draw an empty transfer set");
    }
    let d = sampler.dim();
    let mut x = DMatrix::zeros(d, n);
    for j in 0..n {
        x.set_column(j, &draw_nonzero(sampler, rng)?);
    }
    Ok(x)
}

/// Task whose inputs keep an angular margin from the decision boundary:
/// `ᾱ(w*, x) ≤ π/2 − β₀` for every draw.
#[derive(Debug, Clone)]
pub struct MarginTask {
    beta0: f64,
    law: AngularLaw,
}

impl MarginTask {
    pub fn new(beta0: f64, w_star: DVector<f64>) -> Result<Self> {
        if !(beta0 > 0.0 && beta0 < FRAC_PI_2) {
            return domain(format!("margin β₀={beta0} must lie in (0, π/2)"));
        }
        Ok(Self {
            beta0,
            law: AngularLaw::new(w_star)?,
        })
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    /// Largest angle the task can produce.
    pub fn max_angle(&self) -> f64 {
        FRAC_PI_2 - self.beta0
    }

    /// Uniform angle law conditioned on the wedge, by rejection.
    pub fn sample_angle<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let a = FRAC_PI_2 * rng.random::<f64>();
            if a <= self.max_angle() {
                return a;
            }
        }
    }

    /// Exact reverse cdf of the conditioned uniform law.
    pub fn p(&self, theta: f64) -> Result<f64> {
        margin_p(self.beta0, theta)
    }
}

impl InputSampler for MarginTask {
    fn dim(&self) -> usize {
        self.law.w_star.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let a = self.sample_angle(rng);
        self.law.sample_at_angle(a, rng)
    }

    fn count_disagreements<R: Rng + ?Sized>(
        &self,
        w: &DVector<f64>,
        w_star: &DVector<f64>,
        m: usize,
        rng: &mut R,
    ) -> Result<usize> {
        if w.len() != self.dim() || !self.law.aligned_with(w_star) {
            return count_disagreements_full(self, w, w_star, m, rng);
        }
        Ok(self
            .law
            .count_disagreements(w, m, |r: &mut R| self.sample_angle(r), rng))
    }
}

impl Task for MarginTask {
    fn teacher(&self) -> &DVector<f64> {
        &self.law.w_star
    }

    fn draw_inputs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        sample_columns(self, n, rng)
    }
}

/// Isotropic standard Gaussian inputs.
#[derive(Debug, Clone)]
pub struct GaussianTask {
    w_star: DVector<f64>,
}

impl GaussianTask {
    pub fn new(w_star: DVector<f64>) -> Result<Self> {
        unit(&w_star)?;
        Ok(Self { w_star })
    }
}

impl InputSampler for GaussianTask {
    fn dim(&self) -> usize {
        self.w_star.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.w_star.len(), |_, _| rng.sample(StandardNormal))
    }
}

impl Task for GaussianTask {
    fn teacher(&self) -> &DVector<f64> {
        &self.w_star
    }

    fn draw_inputs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        sample_columns(self, n, rng)
    }
}

/// Transfer inputs with their teacher soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSet<T: Real = f64> {
    x: DMatrix<T>,
    y: DVector<T>,
}

impl<T: Real> TransferSet<T> {
    /// Wraps inputs (as columns) and soft labels in `[0, 1]`.
    pub fn new(x: DMatrix<T>, y: DVector<T>) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return usage("transfer set needs at least one input of positive dimension");
        }
        if y.len() != x.ncols() {
            return usage(format!("{} inputs but {} labels", x.ncols(), y.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return domain("transfer inputs must be finite");
        }
        if let Some(bad) = y.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return domain(format!("soft label {bad} outside [0, 1]"));
        }
        Ok(Self { x, y })
    }

    /// Labels the columns of `x` with `σ(w*ᵀxᵢ)`.
    pub fn from_teacher(x: DMatrix<T>, w_star: &DVector<T>) -> Result<Self> {
        if w_star.len() != x.nrows() {
            return usage(format!(
                "teacher of dimension {} for inputs of dimension {}",
                w_star.len(),
                x.nrows()
            ));
        }
        let y = (x.transpose() * w_star).map(sigmoid);
        Self::new(x, y)
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    /// Input dimension `d`.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Number of transfer points `n`.
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> TransferSet<U> {
        TransferSet {
            x: self.x.map(|v| U::lit(v.as_f64())),
            y: self.y.map(|v| U::lit(v.as_f64())),
        }
    }

    /// Returns a copy with the extra point appended, labelled by `w_star`.
    pub fn with_point(&self, x: &DVector<T>, w_star: &DVector<T>) -> Result<Self> {
        if x.len() != self.dim() {
            return usage(format!(
                "appending a {}-vector to a {}-dimensional set",
                x.len(),
                self.dim()
            ));
        }
        let n = self.len();
        let mut cols = self.x.clone().resize_horizontally(n + 1, T::zero());
        cols.set_column(n, x);
        let mut y = self.y.clone().resize_vertically(n + 1, T::zero());
        y[n] = soft_label(w_star, x)?;
        Self::new(cols, y)
    }
}

/// Samples `n` inputs from the task and labels them with the teacher.
pub fn make_transfer_set<K: Task + ?Sized, R: Rng + ?Sized>(
    task: &K,
    n: usize,
    rng: &mut R,
) -> Result<TransferSet<f64>> {
    if n == 0 {
        return usage("transfer set size must be at least 1");
    }
    let x = task.draw_inputs(n, rng)?;
    TransferSet::from_teacher(x, task.teacher())
}

// ---------------------------------------------------------------------------
// MNIST

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images (as columns scaled to `[0, 1]`) with their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub rows: usize,
    pub cols: usize,
    pub images: DMatrix<f64>,
    pub labels: Vec<u8>,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-pool made of the given columns, in order.
    pub fn select(&self, indices: &[usize]) -> LabeledPool {
        LabeledPool {
            rows: self.rows,
            cols: self.cols,
            images: self.images.select_columns(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "{} truncated: needed {} bytes at offset {}, file has {}",
                    self.what,
                    n,
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Reads an IDX image/label pair and keeps the digits 0 and 1.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledPool> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    parse_mnist_idx(&image_bytes, &label_bytes)
}

/// Parses IDX bytes; see [`load_mnist_idx`].
pub fn parse_mnist_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledPool> {
    let mut img = Reader {
        bytes: image_bytes,
        pos: 0,
        what: "image file",
    };
    let magic = img.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let count = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;

    let mut lab = Reader {
        bytes: label_bytes,
        pos: 0,
        what: "label file",
    };
    let magic = lab.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let label_count = lab.u32_be()? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "image file holds {count} records but label file holds {label_count}"
        )));
    }

    let pixels = rows * cols;
    let labels = lab.take(count)?;
    let data = img.take(
        count
            .checked_mul(pixels)
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?,
    )?;

    let keep: Vec<usize> = (0..count).filter(|&i| labels[i] <= 1).collect();
    let mut images = DMatrix::zeros(pixels, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        let src = &data[i * pixels..(i + 1) * pixels];
        for (p, &b) in src.iter().enumerate() {
            images[(p, j)] = f64::from(b) / 255.0;
        }
    }
    Ok(LabeledPool {
        rows,
        cols,
        images,
        labels: keep.iter().map(|&i| labels[i]).collect(),
    })
}

/// Writes a pool in IDX format; pixels are rounded to the nearest `k/255`.
pub fn write_mnist_idx(pool: &LabeledPool, images_path: &Path, labels_path: &Path) -> Result<()> {
    let pixels = pool.rows * pool.cols;
    if pool.images.nrows() != pixels || pool.images.ncols() != pool.labels.len() {
        return usage("pool shape does not match its declared image size");
    }
    let count = pool.labels.len() as u32;
    let mut img = Vec::with_capacity(16 + pixels * pool.labels.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&count.to_be_bytes());
    img.extend_from_slice(&(pool.rows as u32).to_be_bytes());
    img.extend_from_slice(&(pool.cols as u32).to_be_bytes());
    for j in 0..pool.images.ncols() {
        for p in 0..pixels {
            img.push((pool.images[(p, j)] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut lab = Vec::with_capacity(8 + pool.labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&count.to_be_bytes());
    lab.extend_from_slice(&pool.labels);
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Standard file names of the MNIST distribution inside a directory.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    /// Paths that do not exist.
    pub fn missing(&self) -> Vec<&Path> {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .into_iter()
        .map(PathBuf::as_path)
        .filter(|p| !p.is_file())
        .collect()
    }

    /// Loads `(train, test)` pools restricted to digits 0 and 1.
    pub fn load(&self) -> Result<(LabeledPool, LabeledPool)> {
        let missing = self.missing();
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!(
                    "missing MNIST files (uncompressed IDX expected): {}",
                    names.join(", ")
                ),
            )));
        }
        Ok((
            load_mnist_idx(&self.train_images, &self.train_labels)?,
            load_mnist_idx(&self.test_images, &self.test_labels)?,
        ))
    }
}

/// Full-batch gradient descent settings for the logistic teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub step: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            step: 0.5,
        }
    }
}

/// Unregularised, bias-free logistic regression on hard 0/1 labels, trained
/// by full-batch gradient descent from zero.
pub fn train_logistic_teacher(pool: &LabeledPool, cfg: &LogisticConfig) -> Result<DVector<f64>> {
    if pool.is_empty() {
        return domain("cannot train a teacher on an empty pool");
    }
    if pool.labels.iter().any(|&l| l > 1) {
        return domain("teacher training expects labels in {0, 1}");
    }
    let ones = pool.labels.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == pool.len() {
        return domain("teacher training needs both classes present");
    }
    if !(cfg.step > 0.0) {
        return usage("teacher step size must be positive");
    }
    let x = &pool.images;
    let y = DVector::from_iterator(pool.len(), pool.labels.iter().map(|&l| f64::from(l)));
    let scale = cfg.step / pool.len() as f64;
    let mut w = DVector::zeros(x.nrows());
    for _ in 0..cfg.iterations {
        let residual = (x.transpose() * &w).map(sigmoid) - &y;
        w -= x * residual * scale;
    }
    Ok(w)
}

/// Role of a pool element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TeacherTrain,
    TransferPool,
    Eval,
}

/// A finite pool standing in for the input distribution, with a fixed teacher.
#[derive(Debug, Clone)]
pub struct EmpiricalTask {
    pool: DMatrix<f64>,
    w_star: DVector<f64>,
    splits: Vec<Split>,
    transfer: Vec<usize>,
    eval: Vec<usize>,
}

impl EmpiricalTask {
    pub fn new(pool: DMatrix<f64>, w_star: DVector<f64>, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != pool.ncols() {
            return usage(format!(
                "{} split tags for {} pool elements",
                splits.len(),
                pool.ncols()
            ));
        }
        if w_star.len() != pool.nrows() {
            return usage("teacher dimension differs from pool dimension");
        }
        let of = |s: Split| -> Vec<usize> {
            splits
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == s)
                .map(|(i, _)| i)
                .collect()
        };
        let transfer = of(Split::TransferPool);
        let eval = of(Split::Eval);
        Ok(Self {
            pool,
            w_star,
            splits,
            transfer,
            eval,
        })
    }

    /// Builds the MNIST 0/1 task: the teacher is trained on the first
    /// `teacher_fraction` of the training pool (in file order), transfer
    /// sets come from the rest of the training pool, and the test pool is
    /// held out for evaluation.
    pub fn from_mnist(
        train: &LabeledPool,
        test: &LabeledPool,
        teacher_fraction: f64,
        cfg: &LogisticConfig,
    ) -> Result<Self> {
        if !(teacher_fraction > 0.0 && teacher_fraction < 1.0) {
            return domain("teacher fraction must lie in (0, 1)");
        }
        if train.images.nrows() != test.images.nrows() {
            return usage("train and test images differ in size");
        }
        let cut = ((train.len() as f64) * teacher_fraction).floor() as usize;
        let teacher_idx: Vec<usize> = (0..cut).collect();
        let w_star = train_logistic_teacher(&train.select(&teacher_idx), cfg)?;

        let mut pool = DMatrix::zeros(train.images.nrows(), train.len() + test.len());
        pool.columns_mut(0, train.len()).copy_from(&train.images);
        pool.columns_mut(train.len(), test.len())
            .copy_from(&test.images);
        let splits = (0..train.len())
            .map(|i| {
                if i < cut {
                    Split::TeacherTrain
                } else {
                    Split::TransferPool
                }
            })
            .chain(std::iter::repeat_n(Split::Eval, test.len()))
            .collect();
        Self::new(pool, w_star, splits)
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn transfer_indices(&self) -> &[usize] {
        &self.transfer
    }

    /// Held-out evaluation inputs as columns.
    pub fn eval_inputs(&self) -> DMatrix<f64> {
        self.pool.select_columns(&self.eval)
    }

    pub fn pool(&self) -> &DMatrix<f64> {
        &self.pool
    }

    /// Uniform draw without replacement from the transfer pool; returns pool indices.
    pub fn draw_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n > self.transfer.len() {
            return domain(format!(
                "transfer pool holds {} inputs, cannot draw {n} without replacement",
                self.transfer.len()
            ));
        }
        Ok(index::sample(rng, self.transfer.len(), n)
            .into_iter()
            .map(|i| self.transfer[i])
            .collect())
    }
}

impl Task for EmpiricalTask {
    fn teacher(&self) -> &DVector<f64> {
        &self.w_star
    }

    fn draw_inputs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if n == 0 {
            return usage("cannot draw an empty transfer set");
        }
        let idx = self.draw_indices(n, rng)?;
        Ok(self.pool.select_columns(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unsigned_angle;
    use crate::rng::from_seed;
    use std::f64::consts::FRAC_PI_4;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn analytic_p_examples() {
        assert_eq!(analytic_p(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(analytic_p(3.0, FRAC_PI_2).unwrap(), 0.0);
        assert!((analytic_p(2.0, FRAC_PI_4).unwrap() - 0.25).abs() < 1e-15);
        assert!(analytic_p(1.0, 2.0).is_err());
        assert!(analytic_p(-1.0, 0.5).is_err());
    }

    #[test]
    fn soft_label_examples() {
        assert_eq!(soft_label(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap(), 0.5);
        let s = soft_label(&v(&[1.0]), &v(&[1.0])).unwrap();
        assert!((s - 0.7310585786).abs() < 1e-9);
        let mut prev = 1.0;
        for k in 0..60 {
            let s = soft_label(&v(&[1.0]), &v(&[-(k as f64) * 20.0])).unwrap();
            assert!(s <= prev && s >= 0.0);
            prev = s;
        }
        let big = soft_label(&v(&[1.0]), &v(&[1000.0])).unwrap();
        assert!(big.is_finite() && big <= 1.0);
        assert!(soft_label(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn hard_label_examples() {
        assert_eq!(hard_label(&v(&[1.0, 0.0]), &v(&[0.0, 5.0])).unwrap(), 1);
        assert_eq!(hard_label(&v(&[1.0, 0.0]), &v(&[-2.0, 5.0])).unwrap(), 0);
        assert_eq!(hard_label(&v(&[1.0, 0.0]), &v(&[2.0, -5.0])).unwrap(), 1);
    }

    #[test]
    fn poly_task_validation() {
        assert!(PolyAngleTask::new(-0.5, v(&[1.0, 0.0])).is_err());
        assert!(PolyAngleTask::new(1.0, v(&[1.0])).is_err());
        assert!(PolyAngleTask::new(1.0, v(&[0.0, 0.0])).is_err());
        assert!(PolyAngleTask::with_axis_teacher(1.0, 1).is_err());
    }

    #[test]
    fn large_kappa_concentrates_on_teacher() {
        let task = PolyAngleTask::with_axis_teacher(1e6, 5).unwrap();
        let mut rng = from_seed(1);
        for _ in 0..100 {
            let x = task.sample(&mut rng);
            assert!(unsigned_angle(task.w_star(), &x).unwrap() < 1e-3);
        }
    }

    #[test]
    fn zero_kappa_is_aligned() {
        let task = PolyAngleTask::with_axis_teacher(0.0, 4).unwrap();
        let mut rng = from_seed(2);
        for _ in 0..20 {
            let x = task.sample(&mut rng);
            assert!(unsigned_angle(task.w_star(), &x).unwrap() < 1e-7);
        }
    }

    #[test]
    fn sign_of_radius_does_not_change_angle() {
        let task = PolyAngleTask::with_axis_teacher(1.0, 6).unwrap();
        let mut rng = from_seed(3);
        for _ in 0..20 {
            let x = task.sample(&mut rng);
            let a = unsigned_angle(task.w_star(), &x).unwrap();
            let b = unsigned_angle(task.w_star(), &(-&x)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_task_respects_wedge() {
        let task = MarginTask::new(0.3, v(&[0.0, 2.0, 1.0])).unwrap();
        let mut rng = from_seed(4);
        for _ in 0..2000 {
            let x = task.sample(&mut rng);
            assert!(unsigned_angle(task.teacher(), &x).unwrap() <= task.max_angle() + 1e-12);
        }
        assert_eq!(task.p(task.max_angle() + 0.01).unwrap(), 0.0);
        assert!(MarginTask::new(0.0, v(&[1.0, 0.0])).is_err());
        assert!(MarginTask::new(FRAC_PI_2, v(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn transfer_set_labels_match_teacher() {
        let task = PolyAngleTask::with_axis_teacher(1.0, 8).unwrap();
        let ts = make_transfer_set(&task, 12, &mut from_seed(5)).unwrap();
        for i in 0..ts.len() {
            let expect = sigmoid(task.teacher().dot(&ts.x().column(i).into_owned()));
            assert!((ts.y()[i] - expect).abs() <= 1e-12);
        }
        let again = make_transfer_set(&task, 12, &mut from_seed(5)).unwrap();
        assert_eq!(ts, again);
        assert!(make_transfer_set(&task, 0, &mut from_seed(5)).is_err());
    }

    #[test]
    fn with_point_appends_a_labelled_column() {
        let w = v(&[1.0, -1.0]);
        let ts =
            TransferSet::from_teacher(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), &w).unwrap();
        let grown = ts.with_point(&v(&[0.0, 2.0]), &w).unwrap();
        assert_eq!(grown.len(), 2);
        assert_eq!(grown.y()[1], sigmoid(-2.0));
    }

    #[test]
    fn transfer_set_rejects_bad_labels() {
        let x = DMatrix::from_column_slice(1, 1, &[1.0]);
        assert!(TransferSet::new(x.clone(), v(&[1.5])).is_err());
        assert!(TransferSet::new(x, v(&[0.5, 0.5])).is_err());
    }

    fn tiny_pool() -> LabeledPool {
        let images = DMatrix::from_fn(4, 3, |p, j| ((p * 40 + j * 7) % 256) as f64 / 255.0);
        LabeledPool {
            rows: 2,
            cols: 2,
            images,
            labels: vec![0, 7, 1],
        }
    }

    #[test]
    fn idx_roundtrip_drops_other_digits() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_mnist_idx(&tiny_pool(), &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back, tiny_pool().select(&[0, 2]));
    }

    #[test]
    fn idx_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_mnist_idx(&tiny_pool(), &ip, &lp).unwrap();
        let img = fs::read(&ip).unwrap();
        let lab = fs::read(&lp).unwrap();

        let err = parse_mnist_idx(&img[..img.len() - 1], &lab).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");

        let mut bad = img.clone();
        bad[3] = 0x02;
        let err = parse_mnist_idx(&bad, &lab).unwrap_err().to_string();
        assert!(err.contains("0x00000802"), "{err}");

        let err = parse_mnist_idx(&img, &img).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");

        let mut short_labels = lab.clone();
        short_labels[7] = 2;
        short_labels.pop();
        let err = parse_mnist_idx(&img, &short_labels)
            .unwrap_err()
            .to_string();
        assert!(err.contains("3 records but label file holds 2"), "{err}");

        assert!(matches!(parse_mnist_idx(&[], &lab), Err(Error::Format(_))));
    }

    #[test]
    fn logistic_teacher_on_separable_points() {
        let pool = LabeledPool {
            rows: 1,
            cols: 2,
            images: DMatrix::from_column_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            labels: vec![1, 0],
        };
        let cfg = LogisticConfig::default();
        let w = train_logistic_teacher(&pool, &cfg).unwrap();
        assert!(w[0] > 0.0);
        assert_eq!(w, train_logistic_teacher(&pool, &cfg).unwrap());

        let single = pool.select(&[0]);
        assert!(matches!(
            train_logistic_teacher(&single, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn logistic_teacher_separates_a_fixture() {
        let mut rng = from_seed(8);
        let truth = v(&[1.0, -2.0, 0.5]);
        let images = DMatrix::<f64>::from_fn(3, 60, |_, _| rng.sample(StandardNormal));
        let labels: Vec<u8> = (0..60)
            .map(|j| u8::from(truth.dot(&images.column(j)) >= 0.0))
            .collect();
        let pool = LabeledPool {
            rows: 1,
            cols: 3,
            images,
            labels,
        };
        let w = train_logistic_teacher(&pool, &LogisticConfig::default()).unwrap();
        for j in 0..pool.len() {
            let pred = u8::from(w.dot(&pool.images.column(j)) >= 0.0);
            assert_eq!(pred, pool.labels[j]);
        }
    }

    #[test]
    fn empirical_task_splits_and_draws() {
        let mut rng = from_seed(9);
        let truth = v(&[1.0, -1.0]);
        let mk = |m: usize, rng: &mut crate::rng::SeededRng| {
            let images = DMatrix::<f64>::from_fn(2, m, |_, _| rng.random::<f64>());
            let labels = (0..m)
                .map(|j| u8::from(truth.dot(&images.column(j)) >= 0.0))
                .collect();
            LabeledPool {
                rows: 1,
                cols: 2,
                images,
                labels,
            }
        };
        let train = mk(200, &mut rng);
        let test = mk(50, &mut rng);
        let task =
            EmpiricalTask::from_mnist(&train, &test, 0.8, &LogisticConfig::default()).unwrap();
        assert_eq!(task.transfer_indices().len(), 40);
        assert_eq!(task.eval_inputs().ncols(), 50);
        assert_eq!(
            task.splits()
                .iter()
                .filter(|&&s| s == Split::TeacherTrain)
                .count(),
            160
        );

        let idx = task.draw_indices(40, &mut from_seed(1)).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 40);
        assert!(idx.iter().all(|i| (160..200).contains(i)));
        assert!(matches!(
            task.draw_indices(41, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn missing_mnist_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = MnistFiles::in_dir(dir.path())
            .load()
            .unwrap_err()
            .to_string();
        assert!(err.contains("train-images-idx3-ubyte"), "{err}");
        assert!(err.contains("t10k-labels-idx1-ubyte"), "{err}");
    }

    #[test]
    fn reduced_disagreement_matches_full_sampler() {
        let task = PolyAngleTask::with_axis_teacher(1.0, 6).unwrap();
        let w = v(&[0.6, 0.8, 0.0, -0.3, 0.1, 0.0]);
        let m = 40_000;
        let fast = task
            .count_disagreements(&w, task.teacher(), m, &mut from_seed(10))
            .unwrap();
        let full =
            count_disagreements_full(&task, &w, task.teacher(), m, &mut from_seed(11)).unwrap();
        let (pf, pu) = (fast as f64 / m as f64, full as f64 / m as f64);
        let se = (pf * (1.0 - pf) / m as f64 * 2.0).sqrt();
        assert!((pf - pu).abs() < 4.0 * se, "{pf} vs {pu}");
    }
}
