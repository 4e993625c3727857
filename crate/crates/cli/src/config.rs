//! Experiment configuration: a single JSON document naming the problem, the
//! study, simulation sizes, and study-specific parameters.

use std::sync::Arc;

use mfc_core::control::{OptMethod, Policy, PolicyFamily};
use mfc_core::particle::{InitialLaw, SimConfig};
use mfc_core::problem::{builtin_problem, ControlSet, ProblemSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_expr, Expr, ExprInputs};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config key `{key}` is invalid: {message}")]
    Invalid { key: &'static str, message: String },
    #[error(transparent)]
    Problem(#[from] mfc_core::problem::ProblemError),
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

/// Which study a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyKind {
    #[serde(rename = "chaos")]
    Chaos,
    #[serde(rename = "optimize")]
    Optimize,
    #[serde(rename = "verify")]
    Verify,
    #[serde(rename = "mollify")]
    Mollify,
    #[serde(rename = "residual-scaling")]
    ResidualScaling,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Chaos => "chaos",
            StudyKind::Optimize => "optimize",
            StudyKind::Verify => "verify",
            StudyKind::Mollify => "mollify",
            StudyKind::ResidualScaling => "residual-scaling",
        }
    }
}

/// Inline problem description: one-dimensional coefficients written in the
/// small expression grammar. Richer problems are registered in code.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InlineProblem {
    pub name: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub control_lower: f64,
    pub control_upper: f64,
    pub drift: String,
    pub vol: String,
    #[serde(default = "zero_expr")]
    pub running: String,
    #[serde(default = "zero_expr")]
    pub terminal: String,
    pub theta: f64,
    #[serde(default)]
    pub sigma0: Option<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_p_prime")]
    pub p_prime: f64,
}

fn default_horizon() -> f64 {
    1.0
}
fn zero_expr() -> String {
    "0".to_string()
}
fn default_p() -> f64 {
    2.0
}
fn default_p_prime() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ProblemRef {
    Builtin(String),
    Inline(InlineProblem),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Point { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: f64 },
    Spread { lo: f64, hi: f64, std: f64 },
}

impl InitSpec {
    pub fn to_initial_law(&self) -> InitialLaw {
        match self {
            InitSpec::Point { value } => InitialLaw::Point(value.clone()),
            InitSpec::Gaussian { mean, std } => InitialLaw::GaussianIid {
                mean: mean.clone(),
                std: *std,
            },
            InitSpec::Spread { lo, hi, std } => InitialLaw::SpreadGaussian {
                lo: *lo,
                hi: *hi,
                std: *std,
            },
        }
    }
}

fn default_init() -> InitSpec {
    InitSpec::Point { value: vec![0.0] }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimSection {
    pub particles: usize,
    pub steps: usize,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FamilySpec {
    Constant,
    Feedback { time_bins: usize, state_bins: usize },
}

impl FamilySpec {
    pub fn to_family(&self) -> PolicyFamily {
        match self {
            FamilySpec::Constant => PolicyFamily::Constant,
            FamilySpec::Feedback {
                time_bins,
                state_bins,
            } => PolicyFamily::FeedbackGrid {
                time_bins: *time_bins,
                state_bins: *state_bins,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum MethodSpec {
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
    #[serde(rename = "random-search")]
    RandomSearch,
}

impl MethodSpec {
    pub fn to_method(self) -> OptMethod {
        match self {
            MethodSpec::CrossEntropy => OptMethod::CrossEntropy,
            MethodSpec::RandomSearch => OptMethod::RandomSearch,
        }
    }
}

fn default_method() -> MethodSpec {
    MethodSpec::CrossEntropy
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicySpec {
    pub constant: Vec<f64>,
}

impl PolicySpec {
    pub fn to_policy(&self) -> Policy {
        Policy::Constant {
            u: self.constant.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChaosSection {
    pub n_list: Vec<usize>,
    pub budget: usize,
    #[serde(default = "constant_family")]
    pub family: FamilySpec,
    #[serde(default = "default_method")]
    pub method: MethodSpec,
    /// When present, every value is checked against it within
    /// `se_multiplier` standard errors; otherwise the gap trend is checked.
    #[serde(default)]
    pub target_value: Option<f64>,
    #[serde(default = "three")]
    pub se_multiplier: f64,
    /// Upper bound on the fitted log-log slope of the gap (trend mode).
    #[serde(default = "default_gap_slope")]
    pub max_gap_slope: f64,
}

fn constant_family() -> FamilySpec {
    FamilySpec::Constant
}
fn three() -> f64 {
    3.0
}
fn default_gap_slope() -> f64 {
    -0.3
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizeSection {
    pub budget: usize,
    #[serde(default = "constant_family")]
    pub family: FamilySpec,
    #[serde(default = "default_method")]
    pub method: MethodSpec,
    #[serde(default)]
    pub target_value: Option<f64>,
    #[serde(default)]
    pub value_tolerance: Option<f64>,
    #[serde(default)]
    pub target_params: Option<Vec<f64>>,
    #[serde(default)]
    pub params_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerifySection {
    pub policy: PolicySpec,
    #[serde(default)]
    pub residual_ceiling: Option<f64>,
    #[serde(default)]
    pub moment_ceiling: Option<f64>,
    #[serde(default)]
    pub holder_window: Option<(f64, f64)>,
    #[serde(default)]
    pub defect_ceiling: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MollifySection {
    /// Strictly descending bandwidths.
    pub eps_list: Vec<f64>,
    pub policy: PolicySpec,
    /// Reference cloud size multiplier over `sim.particles`.
    #[serde(default = "four")]
    pub reference_multiplier: usize,
    #[serde(default = "four")]
    pub study_reps: usize,
    /// Check that the largest-to-smallest bandwidth halves the distance.
    #[serde(default)]
    pub require_halving: bool,
}

fn four() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResidualScalingSection {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub policy: PolicySpec,
    #[serde(default = "default_slope_window")]
    pub slope_window: (f64, f64),
    #[serde(default)]
    pub ratio_window: Option<(f64, f64)>,
}

fn default_slope_window() -> (f64, f64) {
    (-1.4, -0.6)
}

/// The complete experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemRef,
    pub study: StudyKind,
    pub seed: u64,
    pub output_dir: String,
    pub sim: SimSection,
    #[serde(default = "default_init")]
    pub init: InitSpec,
    #[serde(default)]
    pub chaos: Option<ChaosSection>,
    #[serde(default)]
    pub optimize: Option<OptimizeSection>,
    #[serde(default)]
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub mollify: Option<MollifySection>,
    #[serde(default)]
    pub residual_scaling: Option<ResidualScalingSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sim.particles == 0 || self.sim.steps == 0 || self.sim.replications == 0 {
            return Err(invalid("sim", "particles, steps, replications must be >= 1"));
        }
        match self.study {
            StudyKind::Chaos => {
                let s = self
                    .chaos
                    .as_ref()
                    .ok_or_else(|| invalid("chaos", "study section is required"))?;
                if s.n_list.is_empty() || s.n_list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid("chaos.n_list", "must be non-empty and ascending"));
                }
            }
            StudyKind::Optimize => {
                self.optimize
                    .as_ref()
                    .ok_or_else(|| invalid("optimize", "study section is required"))?;
            }
            StudyKind::Verify => {
                self.verify
                    .as_ref()
                    .ok_or_else(|| invalid("verify", "study section is required"))?;
            }
            StudyKind::Mollify => {
                let s = self
                    .mollify
                    .as_ref()
                    .ok_or_else(|| invalid("mollify", "study section is required"))?;
                if s.eps_list.is_empty() || s.eps_list.windows(2).any(|w| w[0] <= w[1]) {
                    return Err(invalid(
                        "mollify.eps_list",
                        "must be non-empty and strictly descending",
                    ));
                }
                if s.eps_list.iter().any(|e| *e <= 0.0) {
                    return Err(invalid("mollify.eps_list", "bandwidths must be positive"));
                }
            }
            StudyKind::ResidualScaling => {
                let s = self
                    .residual_scaling
                    .as_ref()
                    .ok_or_else(|| invalid("residual_scaling", "study section is required"))?;
                if s.n_list.is_empty() || s.n_list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid(
                        "residual_scaling.n_list",
                        "must be non-empty and ascending",
                    ));
                }
                if s.reps < 30 {
                    return Err(invalid("residual_scaling.reps", "must be >= 30"));
                }
            }
        }
        // Resolve the problem eagerly so unknown names fail at load time.
        let _ = self.resolve_problem()?;
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            particles: self.sim.particles,
            steps: self.sim.steps,
            replications: self.sim.replications,
            seed: self.seed,
            epsilon: self.sim.epsilon,
        }
    }

    pub fn resolve_problem(&self) -> Result<ProblemSpec, ConfigError> {
        match &self.problem {
            ProblemRef::Builtin(name) => Ok(builtin_problem(name)?),
            ProblemRef::Inline(inline) => build_inline_problem(inline),
        }
    }
}

fn parse_role(
    key: &'static str,
    src: &str,
    allowed: &[&str],
) -> Result<Expr, ConfigError> {
    let expr = parse_expr(src).map_err(|e| invalid(key, e.to_string()))?;
    for var in expr.variables() {
        if !allowed.contains(&var) {
            return Err(invalid(
                key,
                format!("variable `{var}` is not available in this coefficient"),
            ));
        }
    }
    Ok(expr)
}

/// Builds a one-dimensional `ProblemSpec` from inline expressions.
pub fn build_inline_problem(inline: &InlineProblem) -> Result<ProblemSpec, ConfigError> {
    if inline.control_lower > inline.control_upper {
        return Err(invalid("problem.control_lower", "lower bound exceeds upper"));
    }
    if !(inline.horizon > 0.0) {
        return Err(invalid("problem.horizon", "must be positive"));
    }
    if !(inline.p >= 2.0) || !(inline.p_prime > inline.p) {
        return Err(invalid("problem.p", "requires p' > p >= 2"));
    }
    let coeff_vars = ["t", "x", "u", "xbar", "ubar", "pimom"];
    let terminal_vars = ["x", "pimom"];
    let drift = Arc::new(parse_role("problem.drift", &inline.drift, &coeff_vars)?);
    let vol = Arc::new(parse_role("problem.vol", &inline.vol, &coeff_vars)?);
    let running = Arc::new(parse_role("problem.running", &inline.running, &coeff_vars)?);
    let terminal = Arc::new(parse_role(
        "problem.terminal",
        &inline.terminal,
        &terminal_vars,
    )?);

    let ell = usize::from(inline.sigma0.is_some());
    let sigma0 = match inline.sigma0 {
        Some(s0) => DMatrix::from_element(1, 1, s0),
        None => DMatrix::zeros(1, 0),
    };

    let eval_coeff = |expr: &Arc<Expr>, a: &mfc_core::problem::CoeffArgs| -> f64 {
        let mean = a.m.mean();
        let node = a.path.last();
        let inputs = ExprInputs {
            t: a.t,
            x: a.x[0],
            u: a.u[0],
            xbar: mean[0],
            ubar: mean[1],
            pimom: &|p| node.p_moment(p),
        };
        expr.eval(&inputs)
    };

    let drift_expr = drift.clone();
    let vol_expr = vol.clone();
    let running_expr = running.clone();
    let terminal_expr = terminal.clone();
    Ok(ProblemSpec {
        name: inline.name.clone(),
        n: 1,
        ell,
        horizon: inline.horizon,
        control: ControlSet::interval(inline.control_lower, inline.control_upper),
        p: inline.p,
        p_prime: inline.p_prime,
        theta: inline.theta,
        sigma0,
        drift: Arc::new(move |a| vec![eval_coeff(&drift_expr, a)]),
        vol: Arc::new(move |a| DMatrix::from_element(1, 1, eval_coeff(&vol_expr, a))),
        running: Arc::new(move |a| eval_coeff(&running_expr, a)),
        terminal: Arc::new(move |x, path| {
            let node = path.last();
            let inputs = ExprInputs {
                t: 0.0,
                x: x[0],
                u: 0.0,
                xbar: 0.0,
                ubar: 0.0,
                pimom: &|p| node.p_moment(p),
            };
            terminal_expr.eval(&inputs)
        }),
    })
}
