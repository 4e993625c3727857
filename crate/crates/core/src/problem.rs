//! Problem definitions: coefficient tuples, compact control sets, and
//! sampling probes for the standing regularity assumptions.
//!
//! A problem is the data `(b, sigma, sigma0, L, g)` on
//! `[0,T] x R^n x C([0,T];P(R^n)) x P(R^n x U) x U`, together with the
//! exponents `p' > p >= 2` and a declared ellipticity floor `theta` for
//! `sigma sigma^T`. Coefficients are arbitrary callables; they must be pure,
//! total on valid inputs, and safe to invoke concurrently. Non-anticipativity
//! is structural: callables only ever receive a measure-path prefix.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::measures::{
    path_distance, wasserstein_auto, DiscreteMeasure, MeasurePath, MeasurePathView,
};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown builtin problem `{0}`")]
    UnknownProblem(String),
    #[error("control set is invalid: {0}")]
    InvalidControlSet(String),
    #[error("coefficient evaluation failed: {0}")]
    CoefficientFailure(String),
    #[error("probe budget must be at least 1")]
    EmptyBudget,
}

/// A compact control set: a coordinate box or a finite point set.
#[derive(Debug, Clone)]
pub enum ControlSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Finite { points: Vec<Vec<f64>> },
}

impl ControlSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        ControlSet::Box {
            lower: vec![lo],
            upper: vec![hi],
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        match self {
            ControlSet::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(ProblemError::InvalidControlSet(
                        "box bounds must be non-empty and of equal length".into(),
                    ));
                }
                if lower.iter().zip(upper).any(|(l, u)| l > u) {
                    return Err(ProblemError::InvalidControlSet(
                        "box requires lower <= upper componentwise".into(),
                    ));
                }
            }
            ControlSet::Finite { points } => {
                if points.is_empty() {
                    return Err(ProblemError::InvalidControlSet(
                        "finite control set must be non-empty".into(),
                    ));
                }
                let d = points[0].len();
                if points.iter().any(|p| p.len() != d) {
                    return Err(ProblemError::InvalidControlSet(
                        "finite control points must share a dimension".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Finite { points } => points[0].len(),
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        match self {
            ControlSet::Box { lower, upper } => {
                u.len() == lower.len()
                    && u.iter()
                        .zip(lower.iter().zip(upper))
                        .all(|(x, (l, h))| *x >= l - tol && *x <= h + tol)
            }
            ControlSet::Finite { points } => points
                .iter()
                .any(|p| p.iter().zip(u).all(|(a, b)| (a - b).abs() <= tol)),
        }
    }

    /// Nearest point of the set (componentwise clamp for boxes, nearest
    /// neighbour for finite sets).
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, h))| x.clamp(*l, *h))
                .collect(),
            ControlSet::Finite { points } => {
                let mut best = &points[0];
                let mut best_d = f64::INFINITY;
                for p in points {
                    let d: f64 = p.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = p;
                    }
                }
                best.clone()
            }
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, h)| if l == h { *l } else { rng.gen_range(*l..*h) })
                .collect(),
            ControlSet::Finite { points } => points[rng.gen_range(0..points.len())].clone(),
        }
    }

    /// Center of the box, or the first point of a finite set. Used to seed
    /// optimizers.
    pub fn center(&self) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, h)| 0.5 * (l + h)).collect()
            }
            ControlSet::Finite { points } => points[0].clone(),
        }
    }
}

/// Arguments handed to drift, volatility, and running-reward callables.
///
/// `path` is the prefix of the state-law path up to the current time;
/// `m` is the joint state-control measure at the current time.
pub struct CoeffArgs<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub path: &'a MeasurePathView<'a>,
    pub m: &'a DiscreteMeasure,
    pub u: &'a [f64],
}

pub type DriftFn = Arc<dyn Fn(&CoeffArgs) -> Vec<f64> + Send + Sync>;
pub type VolFn = Arc<dyn Fn(&CoeffArgs) -> DMatrix<f64> + Send + Sync>;
pub type RunningRewardFn = Arc<dyn Fn(&CoeffArgs) -> f64 + Send + Sync>;
pub type TerminalRewardFn = Arc<dyn Fn(&[f64], &MeasurePathView) -> f64 + Send + Sync>;

/// The coefficient tuple plus dimensions, horizon, control set, exponents,
/// and the author-declared ellipticity constant.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    /// State dimension n.
    pub n: usize,
    /// Common-noise dimension (0 allowed).
    pub ell: usize,
    /// Time horizon T.
    pub horizon: f64,
    pub control: ControlSet,
    /// Exponents with p' > p >= 2.
    pub p: f64,
    pub p_prime: f64,
    /// Declared floor for the smallest eigenvalue of sigma sigma^T.
    pub theta: f64,
    /// Constant n x ell common-noise loading.
    pub sigma0: DMatrix<f64>,
    pub drift: DriftFn,
    pub vol: VolFn,
    pub running: RunningRewardFn,
    pub terminal: TerminalRewardFn,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("ell", &self.ell)
            .field("horizon", &self.horizon)
            .field("p", &self.p)
            .field("p_prime", &self.p_prime)
            .field("theta", &self.theta)
            .finish()
    }
}

impl ProblemSpec {
    pub fn control_dim(&self) -> usize {
        self.control.dim()
    }

    pub fn drift_at(&self, args: &CoeffArgs) -> Vec<f64> {
        (self.drift)(args)
    }

    pub fn vol_at(&self, args: &CoeffArgs) -> DMatrix<f64> {
        (self.vol)(args)
    }

    pub fn running_at(&self, args: &CoeffArgs) -> f64 {
        (self.running)(args)
    }

    pub fn terminal_at(&self, x: &[f64], path: &MeasurePathView) -> f64 {
        (self.terminal)(x, path)
    }
}

/// Report of the sampling probe over the standing assumptions.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub samples: usize,
    /// Smallest eigenvalue of `sigma sigma^T` observed.
    pub min_eigenvalue: f64,
    pub max_drift_norm: f64,
    pub max_vol_norm: f64,
    /// Sup of |[b,sigma](a) - [b,sigma](a')| over the probe metric on
    /// (x, pi, m) pairs.
    pub lipschitz_ratio: f64,
    /// Sup of (|L| + |g|) / (1 + |x|^p + sup_s W_p(pi_s, delta_0)^p + p-moment of m).
    pub growth_constant: f64,
    /// True when some probe saw lambda_min(sigma sigma^T) < theta - 1e-9.
    pub ellipticity_violated: bool,
}

fn sym_min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, dim: usize, atoms: usize, scale: f64) -> DiscreteMeasure {
    let pts: Vec<f64> = (0..dim * atoms)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    DiscreteMeasure::uniform(dim, &pts).expect("random cloud is valid")
}

fn random_state_control_cloud(
    rng: &mut ChaCha8Rng,
    spec: &ProblemSpec,
    atoms: usize,
    scale: f64,
) -> DiscreteMeasure {
    let n = spec.n;
    let ud = spec.control_dim();
    let mut coords = Vec::with_capacity(atoms * (n + ud));
    for _ in 0..atoms {
        coords.extend(random_point(rng, n, scale));
        coords.extend(spec.control.sample(rng));
    }
    DiscreteMeasure::uniform(n + ud, &coords).expect("random joint cloud is valid")
}

fn random_path(
    rng: &mut ChaCha8Rng,
    spec: &ProblemSpec,
    nodes: usize,
    atoms: usize,
    scale: f64,
) -> MeasurePath {
    let grid: Vec<f64> = (0..nodes)
        .map(|k| spec.horizon * k as f64 / (nodes - 1) as f64)
        .collect();
    let measures = (0..nodes)
        .map(|_| random_cloud(rng, spec.n, atoms, scale))
        .collect();
    MeasurePath::new(grid, measures).expect("random path is valid")
}

/// Evaluates the coefficients on randomized `(t, x, pi, m, u)` tuples and
/// reports observed ellipticity, bounds, Lipschitz ratios, and growth
/// constants. A clean probe is necessary-not-sufficient evidence that the
/// problem sits inside the standing assumptions.
pub fn probe_assumptions(
    spec: &ProblemSpec,
    sample_budget: usize,
    rng_seed: u64,
) -> Result<AssumptionReport, ProblemError> {
    if sample_budget == 0 {
        return Err(ProblemError::EmptyBudget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    use rand::SeedableRng;

    let mut report = AssumptionReport {
        samples: sample_budget,
        min_eigenvalue: f64::INFINITY,
        max_drift_norm: 0.0,
        max_vol_norm: 0.0,
        lipschitz_ratio: 0.0,
        growth_constant: 0.0,
        ellipticity_violated: false,
    };

    let atoms = 6;
    let nodes = 4;
    let scale = 1.5;

    for _ in 0..sample_budget {
        let t = rng.gen_range(0.0..spec.horizon);
        let x = random_point(&mut rng, spec.n, scale);
        let x2 = random_point(&mut rng, spec.n, scale);
        let u = spec.control.sample(&mut rng);
        let path_a = random_path(&mut rng, spec, nodes, atoms, scale);
        let path_b = random_path(&mut rng, spec, nodes, atoms, scale);
        let m_a = random_state_control_cloud(&mut rng, spec, atoms, scale);
        let m_b = random_state_control_cloud(&mut rng, spec, atoms, scale);

        let view_a = path_a.full();
        let view_b = path_b.full();
        let args_a = CoeffArgs {
            t,
            x: &x,
            path: &view_a,
            m: &m_a,
            u: &u,
        };
        let args_b = CoeffArgs {
            t,
            x: &x2,
            path: &view_b,
            m: &m_b,
            u: &u,
        };

        let eval = |args: &CoeffArgs| -> Result<(Vec<f64>, DMatrix<f64>, f64), ProblemError> {
            let b = spec.drift_at(args);
            let s = spec.vol_at(args);
            let l = spec.running_at(args);
            if b.iter().any(|v| !v.is_finite())
                || s.iter().any(|v| !v.is_finite())
                || !l.is_finite()
            {
                return Err(ProblemError::CoefficientFailure(format!(
                    "non-finite coefficient at t={}, x={:?}, u={:?}",
                    args.t, args.x, args.u
                )));
            }
            Ok((b, s, l))
        };

        let (b_a, s_a, l_a) = eval(&args_a)?;
        let (b_b, s_b, _) = eval(&args_b)?;
        let g_a = spec.terminal_at(&x, &view_a);

        let a_mat = &s_a * s_a.transpose();
        let lam = sym_min_eigenvalue(&a_mat);
        report.min_eigenvalue = report.min_eigenvalue.min(lam);
        if lam < spec.theta - 1e-9 {
            report.ellipticity_violated = true;
        }
        let bn = b_a.iter().map(|v| v * v).sum::<f64>().sqrt();
        report.max_drift_norm = report.max_drift_norm.max(bn);
        report.max_vol_norm = report.max_vol_norm.max(s_a.norm());

        // Empirical Lipschitz difference quotient in (x, pi, m) at fixed (t, u).
        let dx: f64 = x
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dpath = path_distance(spec.p, &path_a, &path_b)
            .map_err(|e| ProblemError::CoefficientFailure(e.to_string()))?;
        let dm = wasserstein_auto(spec.p, &m_a, &m_b)
            .map_err(|e| ProblemError::CoefficientFailure(e.to_string()))?;
        let denom = dx + dpath + dm;
        if denom > 1e-9 {
            let db: f64 = b_a
                .iter()
                .zip(&b_b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let ds = (&s_a - &s_b).norm();
            report.lipschitz_ratio = report.lipschitz_ratio.max((db + ds) / denom);
        }

        // Growth constant for the rewards. W_p(pi_s, delta_0)^p against a
        // Dirac at the origin is exactly the p-moment of pi_s.
        let xp = x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(spec.p);
        let mut sup_w = 0.0f64;
        for node in path_a.measures() {
            sup_w = sup_w.max(node.p_moment(spec.p));
        }
        let m_moment = m_a
            .marginal_state(spec.n)
            .map_err(|e| ProblemError::CoefficientFailure(e.to_string()))?
            .p_moment(spec.p);
        let denom = 1.0 + xp + sup_w + m_moment;
        report.growth_constant = report.growth_constant.max((l_a.abs() + g_a.abs()) / denom);
    }

    Ok(report)
}

fn constant_vol(n: usize, s: f64) -> VolFn {
    Arc::new(move |_| DMatrix::identity(n, n) * s)
}

fn zero_running() -> RunningRewardFn {
    Arc::new(|_| 0.0)
}

/// Mean of the state block of a joint state-control measure.
pub fn state_mean(m: &DiscreteMeasure, n: usize) -> Vec<f64> {
    m.mean()[..n].to_vec()
}

/// Mean of the control block of a joint state-control measure.
pub fn control_mean(m: &DiscreteMeasure, n: usize) -> Vec<f64> {
    m.mean()[n..].to_vec()
}

fn linear_drift(ell: usize, s0: f64) -> ProblemSpec {
    let n = 1;
    ProblemSpec {
        name: if ell == 0 {
            "LINEAR_DRIFT".into()
        } else {
            "LINEAR_DRIFT_CN".into()
        },
        n,
        ell,
        horizon: 1.0,
        control: ControlSet::interval(-1.0, 1.0),
        p: 2.0,
        p_prime: 4.0,
        theta: 1.0,
        sigma0: DMatrix::from_element(n, ell, s0),
        drift: Arc::new(|a| vec![a.u[0]]),
        vol: constant_vol(n, 1.0),
        running: zero_running(),
        terminal: Arc::new(|x, _| x[0]),
    }
}

fn control_consensus(ell: usize, s0: f64) -> ProblemSpec {
    let n = 1;
    ProblemSpec {
        name: if ell == 0 {
            "CONTROL_CONSENSUS".into()
        } else {
            "CONTROL_CONSENSUS_CN".into()
        },
        n,
        ell,
        horizon: 1.0,
        control: ControlSet::interval(-1.0, 1.0),
        p: 2.0,
        p_prime: 4.0,
        theta: 1.0,
        sigma0: DMatrix::from_element(n, ell, s0),
        drift: Arc::new(|a| vec![a.u[0]]),
        vol: constant_vol(n, 1.0),
        running: Arc::new(move |a| {
            let ubar = control_mean(a.m, 1)[0];
            let d = a.u[0] - ubar;
            -(d * d)
        }),
        terminal: Arc::new(|_, _| 0.0),
    }
}

fn clipped_meanrev(ell: usize, s0: f64) -> ProblemSpec {
    let n = 1;
    // Interaction gain and clip level; clipping keeps the drift bounded.
    let kappa = 1.0;
    let clip = 1.0;
    ProblemSpec {
        name: if ell == 0 {
            "CLIPPED_MEANREV".into()
        } else {
            "CLIPPED_MEANREV_CN".into()
        },
        n,
        ell,
        horizon: 1.0,
        control: ControlSet::interval(-1.0, 1.0),
        p: 2.0,
        p_prime: 4.0,
        theta: 1.0,
        sigma0: DMatrix::from_element(n, ell, s0),
        drift: Arc::new(move |a| {
            let xbar = state_mean(a.m, 1)[0];
            vec![a.u[0] + (kappa * (xbar - a.x[0])).clamp(-clip, clip)]
        }),
        vol: constant_vol(n, 1.0),
        running: Arc::new(|a| -(a.u[0] * a.u[0])),
        terminal: Arc::new(|x, _| -(x[0] * x[0])),
    }
}

/// Names of all builtin problems.
pub fn builtin_names() -> Vec<&'static str> {
    vec![
        "LINEAR_DRIFT",
        "CONTROL_CONSENSUS",
        "CLIPPED_MEANREV",
        "LINEAR_DRIFT_CN",
        "CONTROL_CONSENSUS_CN",
        "CLIPPED_MEANREV_CN",
    ]
}

/// Looks up a builtin problem by name.
///
/// The catalog constants are artifact choices: horizons are 1, controls live
/// in `[-1, 1]`, idiosyncratic volatility is 1 (so `theta = 1`), the `_CN`
/// variants add one common-noise dimension with loading `s0 = 0.3`, and
/// CLIPPED_MEANREV uses gain 1 clipped at `|.| <= 1`.
pub fn builtin_problem(name: &str) -> Result<ProblemSpec, ProblemError> {
    const S0: f64 = 0.3;
    match name {
        "LINEAR_DRIFT" => Ok(linear_drift(0, 0.0)),
        "CONTROL_CONSENSUS" => Ok(control_consensus(0, 0.0)),
        "CLIPPED_MEANREV" => Ok(clipped_meanrev(0, 0.0)),
        "LINEAR_DRIFT_CN" => Ok(linear_drift(1, S0)),
        "CONTROL_CONSENSUS_CN" => Ok(control_consensus(1, S0)),
        "CLIPPED_MEANREV_CN" => Ok(clipped_meanrev(1, S0)),
        other => Err(ProblemError::UnknownProblem(other.to_string())),
    }
}
