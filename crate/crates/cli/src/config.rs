//! Command configurations. Each is a TOML document whose omitted keys take
//! the defaults below; unknown keys are rejected.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};

use lindistill::bounds::PSource;
use lindistill::experiments::{BiasConfig, GeometryConfig, MonotonicityConfig};
use lindistill::geometry::PCurve;
use lindistill::tasks::{GaussianTask, InputSampler, MarginTask, PolyAngleTask, Task};
use lindistill::trainers::ShallowConfig;
use lindistill::{Matrix, TransferSet, Vector};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// A configuration that can be loaded, seeded and validated.
pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    /// Master seed, for commands that draw random numbers.
    fn seed_mut(&mut self) -> Option<&mut u64>;

    fn check(&self) -> Result<(), String>;
}

/// Reads `path` (TOML, or the `config` member of a JSON run manifest), or
/// takes the defaults when no path is given; then applies the seed override
/// and validates.
pub fn load<C: CommandConfig>(path: Option<&Path>, seed: Option<u64>) -> Result<C, Failure> {
    let mut cfg: C = match path {
        None => C::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse(path, &text)?
        }
    };
    if let Some(seed) = seed {
        match cfg.seed_mut() {
            Some(s) => *s = seed,
            None => return Err(Failure::Config("this command takes no seed".into())),
        }
    }
    cfg.check()
        .map_err(|e| Failure::Config(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn parse<C: CommandConfig>(path: &Path, text: &str) -> Result<C, Failure> {
    let bad = |e: String| Failure::Config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }
}

fn positive(field: &str, v: usize) -> Result<(), String> {
    if v == 0 {
        return Err(format!("`{field}` must be at least 1"));
    }
    Ok(())
}

fn positive_real(field: &str, v: f64) -> Result<(), String> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(format!("`{field}` must be positive and finite, got {v}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Angles with reverse cdf `(1 − 2θ/π)^κ`.
    Poly,
    /// Uniform angles inside a margin `β₀`.
    Margin,
    /// Isotropic Gaussian inputs.
    Gaussian,
}

/// Input distribution with teacher `e₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub kappa: f64,
    pub beta0: f64,
    pub dim: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Poly,
            kappa: 1.0,
            beta0: 0.2,
            dim: 20,
        }
    }
}

impl TaskSpec {
    fn check(&self) -> Result<(), String> {
        positive("task.dim", self.dim)?;
        match self.kind {
            TaskKind::Poly if !(self.kappa >= 0.0) || !self.kappa.is_finite() => {
                Err(format!("`task.kappa` must be ≥ 0, got {}", self.kappa))
            }
            TaskKind::Margin if !(0.0..FRAC_PI_2).contains(&self.beta0) => Err(format!(
                "`task.beta0` must lie in [0, π/2), got {}",
                self.beta0
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> lindistill::Result<AnyTask> {
        let mut axis = Vector::zeros(self.dim);
        axis[0] = 1.0;
        Ok(match self.kind {
            TaskKind::Poly => AnyTask::Poly(PolyAngleTask::new(self.kappa, axis)?),
            TaskKind::Margin => AnyTask::Margin(MarginTask::new(self.beta0, axis)?),
            TaskKind::Gaussian => AnyTask::Gaussian(GaussianTask::new(axis)?),
        })
    }
}

/// One of the synthetic tasks.
#[derive(Debug, Clone)]
pub enum AnyTask {
    Poly(PolyAngleTask),
    Margin(MarginTask),
    Gaussian(GaussianTask),
}

impl InputSampler for AnyTask {
    fn dim(&self) -> usize {
        match self {
            AnyTask::Poly(t) => t.dim(),
            AnyTask::Margin(t) => t.dim(),
            AnyTask::Gaussian(t) => t.dim(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match self {
            AnyTask::Poly(t) => t.sample(rng),
            AnyTask::Margin(t) => t.sample(rng),
            AnyTask::Gaussian(t) => t.sample(rng),
        }
    }

    fn count_disagreements<R: Rng + ?Sized>(
        &self,
        w: &Vector,
        w_star: &Vector,
        m: usize,
        rng: &mut R,
    ) -> lindistill::Result<usize> {
        match self {
            AnyTask::Poly(t) => t.count_disagreements(w, w_star, m, rng),
            AnyTask::Margin(t) => t.count_disagreements(w, w_star, m, rng),
            AnyTask::Gaussian(t) => t.count_disagreements(w, w_star, m, rng),
        }
    }
}

impl Task for AnyTask {
    fn teacher(&self) -> &Vector {
        match self {
            AnyTask::Poly(t) => t.teacher(),
            AnyTask::Margin(t) => t.teacher(),
            AnyTask::Gaussian(t) => t.teacher(),
        }
    }

    fn draw_inputs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> lindistill::Result<Matrix> {
        match self {
            AnyTask::Poly(t) => t.draw_inputs(n, rng),
            AnyTask::Margin(t) => t.draw_inputs(n, rng),
            AnyTask::Gaussian(t) => t.draw_inputs(n, rng),
        }
    }
}

/// Gradient-descent settings; `step` absent means `1/L` from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSpec {
    pub step: Option<f64>,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub grad_tol: f64,
    pub max_halvings: u32,
    pub record_stride: usize,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        let d = ShallowConfig::default();
        Self {
            step: None,
            max_iters: d.max_iters,
            loss_tol: d.loss_tol,
            grad_tol: d.grad_tol,
            max_halvings: d.max_halvings,
            record_stride: d.record_stride,
        }
    }
}

impl TrainerSpec {
    fn check(&self) -> Result<(), String> {
        if let Some(step) = self.step {
            positive_real("trainer.step", step)?;
        }
        positive("trainer.record_stride", self.record_stride)?;
        if !(self.loss_tol >= 0.0) || !(self.grad_tol >= 0.0) {
            return Err("`trainer.loss_tol` and `trainer.grad_tol` must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn shallow(&self, ts: &TransferSet) -> ShallowConfig {
        let cfg = ShallowConfig {
            step: self.step.unwrap_or(ShallowConfig::default().step),
            max_iters: self.max_iters,
            loss_tol: self.loss_tol,
            grad_tol: self.grad_tol,
            max_halvings: self.max_halvings,
            record_stride: self.record_stride,
        };
        match self.step {
            Some(_) => cfg,
            None => cfg.with_auto_step(ts),
        }
    }
}

/// Settings used only when `depth ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepSpec {
    /// Target closeness `ε`, as a fraction of `‖ŵ‖`.
    pub epsilon_relative: f64,
    /// Initial end-to-end norm; absent means `init_fraction` of the admissible bound.
    pub init_scale: Option<f64>,
    pub init_fraction: f64,
    /// Hidden widths; absent means the input dimension throughout.
    pub widths: Option<Vec<usize>>,
    pub allow_nonconforming: bool,
}

impl Default for DeepSpec {
    fn default() -> Self {
        Self {
            epsilon_relative: 0.05,
            init_scale: None,
            init_fraction: 0.5,
            widths: None,
            allow_nonconforming: false,
        }
    }
}

impl DeepSpec {
    fn check(&self, depth: usize) -> Result<(), String> {
        positive_real("deep.epsilon_relative", self.epsilon_relative)?;
        if let Some(s) = self.init_scale {
            positive_real("deep.init_scale", s)?;
        }
        if !(self.init_fraction > 0.0 && self.init_fraction < 1.0) {
            return Err(format!(
                "`deep.init_fraction` must lie in (0, 1), got {}",
                self.init_fraction
            ));
        }
        if let Some(w) = &self.widths {
            if w.len() + 1 != depth {
                return Err(format!(
                    "`deep.widths` lists {} widths but depth {depth} needs {}",
                    w.len(),
                    depth.saturating_sub(1)
                ));
            }
            if w.contains(&0) {
                return Err("`deep.widths` must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub n: usize,
    /// 1 trains the weight vector directly; ≥ 2 trains a factorised student.
    pub depth: usize,
    pub task: TaskSpec,
    pub trainer: TrainerSpec,
    pub deep: DeepSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 10,
            depth: 1,
            task: TaskSpec::default(),
            trainer: TrainerSpec::default(),
            deep: DeepSpec::default(),
        }
    }
}

impl CommandConfig for TrainConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        positive("n", self.n)?;
        positive("depth", self.depth)?;
        self.task.check()?;
        self.trainer.check()?;
        self.deep.check(self.depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedFormConfig {
    pub seed: u64,
    pub n: usize,
    pub task: TaskSpec,
}

impl Default for ClosedFormConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 10,
            task: TaskSpec::default(),
        }
    }
}

impl CommandConfig for ClosedFormConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        positive("n", self.n)?;
        self.task.check()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    ClosedForm,
    Distillation,
    HardTarget,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub seed: u64,
    pub n: usize,
    pub trials: usize,
    pub mc_samples: usize,
    pub learner: LearnerKind,
    /// Relative off-span perturbation of the `perturbed` learner.
    pub delta: f64,
    pub task: TaskSpec,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 10,
            trials: 10,
            mc_samples: 100_000,
            learner: LearnerKind::ClosedForm,
            delta: 0.5,
            task: TaskSpec::default(),
        }
    }
}

impl CommandConfig for RiskConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        positive("n", self.n)?;
        positive("trials", self.trials)?;
        positive("mc_samples", self.mc_samples)?;
        if !self.delta.is_finite() {
            return Err("`delta` must be finite".into());
        }
        if self.learner == LearnerKind::Perturbed && self.n >= self.task.dim {
            return Err(format!(
                "the perturbed learner needs n < task.dim, got n={} and dim={}",
                self.n, self.task.dim
            ));
        }
        self.task.check()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PKind {
    Poly,
    Margin,
    Curve,
}

/// Source of the reverse cdf `p(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PSpec {
    pub kind: PKind,
    pub kappa: f64,
    pub beta0: f64,
    /// CSV file with header `theta,p`, for `kind = "curve"`.
    pub path: Option<PathBuf>,
}

impl Default for PSpec {
    fn default() -> Self {
        Self {
            kind: PKind::Poly,
            kappa: 1.0,
            beta0: 0.2,
            path: None,
        }
    }
}

impl PSpec {
    /// Builds the source, reading and validating a curve file if needed.
    pub fn build(&self) -> Result<PSource, String> {
        match self.kind {
            PKind::Poly if !(self.kappa >= 0.0) || !self.kappa.is_finite() => {
                Err(format!("`p.kappa` must be ≥ 0, got {}", self.kappa))
            }
            PKind::Poly => Ok(PSource::Poly { kappa: self.kappa }),
            PKind::Margin if !(0.0..FRAC_PI_2).contains(&self.beta0) => Err(format!(
                "`p.beta0` must lie in [0, π/2), got {}",
                self.beta0
            )),
            PKind::Margin => Ok(PSource::Margin { beta0: self.beta0 }),
            PKind::Curve => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or("`p.path` is required for a curve")?;
                let file = fs::File::open(path)
                    .map_err(|e| format!("cannot open curve {}: {e}", path.display()))?;
                PCurve::read_csv(file)
                    .map(PSource::Curve)
                    .map_err(|e| format!("curve {}: {e}", path.display()))
            }
        }
    }
}

/// Students known only to lie within `epsilon` of a solution of norm `w_hat_norm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSpec {
    pub epsilon: f64,
    pub w_hat_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub n: usize,
    pub grid_size: usize,
    /// Use `p(β) + (1 − p(β))·p(π/2 − β)ⁿ`.
    pub tight: bool,
    /// The transfer set spans the input space, so the risk is exactly zero.
    pub exact_zero: bool,
    pub p: PSpec,
    pub approx: Option<ApproxSpec>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            n: 5,
            grid_size: 1001,
            tight: false,
            exact_zero: false,
            p: PSpec::default(),
            approx: None,
        }
    }
}

impl CommandConfig for BoundConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        None
    }

    fn check(&self) -> Result<(), String> {
        positive("n", self.n)?;
        if self.grid_size < 2 {
            return Err("`grid_size` must be at least 2".into());
        }
        if let Some(a) = &self.approx {
            positive_real("approx.w_hat_norm", a.w_hat_norm)?;
            if !(a.epsilon >= 0.0) || a.epsilon > 0.5 * a.w_hat_norm {
                return Err(format!(
                    "`approx.epsilon` must lie in [0, w_hat_norm/2] = [0, {}], got {}",
                    0.5 * a.w_hat_norm,
                    a.epsilon
                ));
            }
            if self.tight || self.exact_zero {
                return Err("`approx` cannot be combined with `tight` or `exact_zero`".into());
            }
        }
        self.p.build().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub cases: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 200,
        }
    }
}

impl CommandConfig for VerifyConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        positive("cases", self.cases)
    }
}

impl CommandConfig for GeometryConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

impl CommandConfig for BiasConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

impl CommandConfig for MonotonicityConfig {
    fn seed_mut(&mut self) -> Option<&mut u64> {
        Some(&mut self.seed)
    }

    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        fs::File::create(&path)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        path
    }

    #[test]
    fn defaults_fill_omitted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "t.toml", "n = 4\n[task]\nkappa = 2.0\n");
        let cfg: TrainConfig = load(Some(&path), None).unwrap();
        assert_eq!(cfg.n, 4);
        assert_eq!(cfg.task.kappa, 2.0);
        assert_eq!(cfg.task.dim, TaskSpec::default().dim);
        assert_eq!(cfg.trainer, TrainerSpec::default());
    }

    #[test]
    fn unknown_and_mistyped_fields_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "t.toml", "[trainer]\nstepsize = 0.1\n");
        let Err(Failure::Config(msg)) = load::<TrainConfig>(Some(&path), None) else {
            panic!("accepted an unknown field");
        };
        assert!(msg.contains("stepsize"), "{msg}");
        let path = write(dir.path(), "u.toml", "n = \"five\"\n");
        let Err(Failure::Config(msg)) = load::<TrainConfig>(Some(&path), None) else {
            panic!("accepted a string for n");
        };
        assert!(msg.contains('n'), "{msg}");
    }

    #[test]
    fn validation_failures_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "b.toml",
            "[approx]\nepsilon = 0.6\nw_hat_norm = 1.0\n",
        );
        let Err(Failure::Config(msg)) = load::<BoundConfig>(Some(&path), None) else {
            panic!("accepted ε > ‖ŵ‖/2");
        };
        assert!(msg.contains("approx.epsilon"), "{msg}");
        let path = write(dir.path(), "d.toml", "depth = 3\n[deep]\nwidths = [4]\n");
        assert!(load::<TrainConfig>(Some(&path), None).is_err());
    }

    #[test]
    fn seed_override_and_seedless_commands() {
        let cfg: TrainConfig = load(None, Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(matches!(
            load::<BoundConfig>(None, Some(9)),
            Err(Failure::Config(_))
        ));
    }

    #[test]
    fn manifest_json_is_accepted_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "manifest.json",
            r#"{"tool": "lindistill", "config": {"seed": 4, "n": 3}}"#,
        );
        let cfg: ClosedFormConfig = load(Some(&path), None).unwrap();
        assert_eq!((cfg.seed, cfg.n), (4, 3));
    }

    #[test]
    fn tasks_build_with_axis_teacher() {
        for kind in [TaskKind::Poly, TaskKind::Margin, TaskKind::Gaussian] {
            let spec = TaskSpec {
                kind,
                dim: 5,
                ..TaskSpec::default()
            };
            let task = spec.build().unwrap();
            assert_eq!(task.dim(), 5);
            assert_eq!(task.teacher()[0], 1.0);
        }
    }
}
