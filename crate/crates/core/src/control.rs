//! Feedback policies, the three reward functionals, and derivative-free
//! policy search.
//!
//! The policy class is Markovian feedback on `(t, x)` plus constants and
//! finite mixtures whose component is drawn once per particle from its
//! private uniform stream. This is a strict subset of the admissible
//! controls of the underlying problem; the toy problems used for acceptance
//! have optima inside the class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::measures::{MeasurePath, RelaxedControlPath};
use crate::particle::{simulate_mkv, InitialLaw, SimConfig, SimError, TrajectoryBundle};
use crate::problem::{CoeffArgs, ControlSet, ProblemSpec};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Measure(#[from] crate::error::MeasureError),
    #[error("policy is invalid: {0}")]
    InvalidPolicy(String),
    #[error("optimization budget {budget} is below the population size {population}")]
    BudgetTooSmall { budget: usize, population: usize },
    #[error("policy family requires a box control set")]
    BoxControlRequired,
    #[error("parameter vector has length {got}, family requires {expected}")]
    ParamLength { got: usize, expected: usize },
}

/// A feedback table on time and state bins with nearest-cell lookup, clamped
/// at the boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGrid {
    pub horizon: f64,
    pub time_bins: usize,
    /// Box covered by the state bins (per axis).
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    /// Bins per state axis; the table has `time_bins * state_bins^n` cells.
    pub state_bins: usize,
    pub control_dim: usize,
    /// Row-major over (time bin, state cell), `control_dim` entries per cell.
    pub table: Vec<f64>,
}

impl FeedbackGrid {
    pub fn cells(&self) -> usize {
        self.time_bins * self.state_bins.pow(self.state_lo.len() as u32)
    }

    fn cell_index(&self, t: f64, x: &[f64]) -> usize {
        let tb = ((t / self.horizon) * self.time_bins as f64) as isize;
        let tb = tb.clamp(0, self.time_bins as isize - 1) as usize;
        let mut cell = 0usize;
        for (d, &xd) in x.iter().enumerate() {
            let lo = self.state_lo[d];
            let hi = self.state_hi[d];
            let frac = if hi > lo { (xd - lo) / (hi - lo) } else { 0.0 };
            let sb = (frac * self.state_bins as f64) as isize;
            let sb = sb.clamp(0, self.state_bins as isize - 1) as usize;
            cell = cell * self.state_bins + sb;
        }
        tb * self.state_bins.pow(x.len() as u32) + cell
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> &[f64] {
        let c = self.cell_index(t, x);
        &self.table[c * self.control_dim..(c + 1) * self.control_dim]
    }
}

/// A feedback control rule. Mixtures draw their component once per particle.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Constant { u: Vec<f64> },
    FeedbackGrid(FeedbackGrid),
    Mixture { components: Vec<(f64, Policy)> },
}

impl Policy {
    pub fn constant(u: Vec<f64>) -> Self {
        Policy::Constant { u }
    }

    pub fn validate(&self, control: &ControlSet) -> Result<(), ControlError> {
        match self {
            Policy::Constant { u } => {
                if !control.contains(u, 1e-9) {
                    return Err(ControlError::InvalidPolicy(format!(
                        "constant control {u:?} lies outside the control set"
                    )));
                }
            }
            Policy::FeedbackGrid(grid) => {
                for cell in grid.table.chunks_exact(grid.control_dim) {
                    if !control.contains(cell, 1e-9) {
                        return Err(ControlError::InvalidPolicy(format!(
                            "table entry {cell:?} lies outside the control set"
                        )));
                    }
                }
            }
            Policy::Mixture { components } => {
                if components.is_empty() {
                    return Err(ControlError::InvalidPolicy("empty mixture".into()));
                }
                let sum: f64 = components.iter().map(|(w, _)| w).sum();
                if (sum - 1.0).abs() > 1e-12 || components.iter().any(|(w, _)| *w < 0.0) {
                    return Err(ControlError::InvalidPolicy(format!(
                        "mixture weights sum to {sum}"
                    )));
                }
                for (_, p) in components {
                    p.validate(control)?;
                }
            }
        }
        Ok(())
    }

    /// Draws mixture components (recursively) once, using the particle's
    /// private stream, and returns the concrete non-mixture policy the
    /// particle will follow for its whole trajectory.
    pub fn resolve(&self, rng: &mut ChaCha8Rng) -> ResolvedPolicy {
        match self {
            Policy::Constant { u } => ResolvedPolicy::Constant(u.clone()),
            Policy::FeedbackGrid(g) => ResolvedPolicy::Grid(g.clone()),
            Policy::Mixture { components } => {
                let v: f64 = rng.gen();
                let mut cum = 0.0;
                for (w, p) in components {
                    cum += w;
                    if cum >= v {
                        return p.resolve(rng);
                    }
                }
                components.last().expect("non-empty mixture").1.resolve(rng)
            }
        }
    }
}

/// A policy with all mixture randomness already resolved.
#[derive(Debug, Clone)]
pub enum ResolvedPolicy {
    Constant(Vec<f64>),
    Grid(FeedbackGrid),
}

impl ResolvedPolicy {
    pub fn evaluate(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            ResolvedPolicy::Constant(u) => u.clone(),
            ResolvedPolicy::Grid(g) => g.evaluate(t, x).to_vec(),
        }
    }
}

/// Parametric policy families optimized over: the flat parameter vector is
/// box-constrained by the control set.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyFamily {
    Constant,
    FeedbackGrid { time_bins: usize, state_bins: usize },
}

impl PolicyFamily {
    pub fn param_len(&self, spec: &ProblemSpec) -> usize {
        let ud = spec.control_dim();
        match self {
            PolicyFamily::Constant => ud,
            PolicyFamily::FeedbackGrid {
                time_bins,
                state_bins,
            } => time_bins * state_bins.pow(spec.n as u32) * ud,
        }
    }

    /// State box covered by a feedback table; a fixed window around the
    /// origin scaled to the horizon is enough for the bounded toy problems.
    fn state_window(spec: &ProblemSpec) -> (Vec<f64>, Vec<f64>) {
        let half = 3.0 * (1.0 + spec.horizon);
        (vec![-half; spec.n], vec![half; spec.n])
    }

    pub fn decode(&self, spec: &ProblemSpec, params: &[f64]) -> Result<Policy, ControlError> {
        let expected = self.param_len(spec);
        if params.len() != expected {
            return Err(ControlError::ParamLength {
                got: params.len(),
                expected,
            });
        }
        let projected: Vec<f64> = params
            .chunks_exact(spec.control_dim())
            .flat_map(|u| spec.control.project(u))
            .collect();
        match self {
            PolicyFamily::Constant => Ok(Policy::Constant { u: projected }),
            PolicyFamily::FeedbackGrid {
                time_bins,
                state_bins,
            } => {
                let (state_lo, state_hi) = Self::state_window(spec);
                Ok(Policy::FeedbackGrid(FeedbackGrid {
                    horizon: spec.horizon,
                    time_bins: *time_bins,
                    state_lo,
                    state_hi,
                    state_bins: *state_bins,
                    control_dim: spec.control_dim(),
                    table: projected,
                }))
            }
        }
    }
}

/// Average pathwise reward of a simulated bundle: left-endpoint quadrature of
/// the running reward along every particle plus the terminal reward, averaged
/// over particles and replications.
pub fn reward_n_agent(spec: &ProblemSpec, bundle: &TrajectoryBundle) -> f64 {
    per_replication_rewards(spec, bundle).iter().sum::<f64>()
        / bundle.replications.len() as f64
}

/// Per-replication average rewards (used for standard errors).
pub fn per_replication_rewards(spec: &ProblemSpec, bundle: &TrajectoryBundle) -> Vec<f64> {
    bundle
        .replications
        .iter()
        .map(|rep| {
            per_particle_rewards(spec, bundle, rep).iter().sum::<f64>()
                / bundle.particles as f64
        })
        .collect()
}

/// Pathwise reward of each particle of one replication.
pub fn per_particle_rewards(
    spec: &ProblemSpec,
    bundle: &TrajectoryBundle,
    rep: &crate::particle::Replication,
) -> Vec<f64> {
    let n = spec.n;
    let u_dim = spec.control_dim();
    let count = bundle.particles;
    let steps = bundle.grid.len() - 1;
    let mut acc = vec![0.0; count];
    for k in 0..steps {
        let t = bundle.grid[k];
        let dt = bundle.grid[k + 1] - bundle.grid[k];
        let prefix = rep.state_path.prefix(k);
        let phi = &rep.control_path.step(k)[0].1;
        let contributions: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|i| {
                let x = rep.state_at(n, count, k, i);
                let u = rep.control_at(u_dim, count, k, i);
                let args = CoeffArgs {
                    t,
                    x,
                    path: &prefix,
                    m: phi,
                    u,
                };
                spec.running_at(&args) * dt
            })
            .collect();
        for (a, c) in acc.iter_mut().zip(contributions) {
            *a += c;
        }
    }
    let full = rep.state_path.full();
    for (i, a) in acc.iter_mut().enumerate() {
        let x = rep.state_at(n, count, steps, i);
        *a += spec.terminal_at(x, &full);
    }
    acc
}

/// Reward of a measure path under a relaxed control: left-endpoint time
/// quadrature of the mixture-and-atom sums of the running reward plus the
/// terminal integral against the final marginal. The marginal-constraint
/// defect is reported by `check_marginal_constraint`, not enforced here.
pub fn reward_measure_valued(
    spec: &ProblemSpec,
    mu: &MeasurePath,
    lambda: &RelaxedControlPath,
) -> Result<f64, ControlError> {
    if mu.grid() != lambda.grid() {
        return Err(ControlError::Measure(
            crate::error::MeasureError::GridMismatch {
                detail: "reward_measure_valued".into(),
            },
        ));
    }
    let n = spec.n;
    let mut total = 0.0;
    for k in 0..lambda.steps().len() {
        let t = mu.grid()[k];
        let dt = mu.grid()[k + 1] - mu.grid()[k];
        let prefix = mu.prefix(k);
        let mut step_val = 0.0;
        for (wt, m) in lambda.step(k) {
            let mut inner = 0.0;
            for (atom, w) in m.iter() {
                let args = CoeffArgs {
                    t,
                    x: &atom[..n],
                    path: &prefix,
                    m,
                    u: &atom[n..],
                };
                inner += w * spec.running_at(&args);
            }
            step_val += wt * inner;
        }
        total += step_val * dt;
    }
    let full = mu.full();
    let terminal: f64 = mu
        .node(mu.len() - 1)
        .iter()
        .map(|(x, w)| w * spec.terminal_at(x, &full))
        .sum();
    Ok(total + terminal)
}

/// Monte Carlo estimate of the mean-field reward of a policy, with a
/// standard error taken across replications when there are several and
/// across particles otherwise.
pub fn reward_mfc(
    spec: &ProblemSpec,
    policy: &Policy,
    init: &InitialLaw,
    cfg: &SimConfig,
) -> Result<(f64, f64), ControlError> {
    let bundle = simulate_mkv(spec, policy, init, cfg)?;
    Ok(bundle_estimate(spec, &bundle))
}

/// Mean and standard error of the reward carried by a bundle.
pub fn bundle_estimate(spec: &ProblemSpec, bundle: &TrajectoryBundle) -> (f64, f64) {
    if bundle.replications.len() > 1 {
        let per_rep = per_replication_rewards(spec, bundle);
        let m = per_rep.len() as f64;
        let mean = per_rep.iter().sum::<f64>() / m;
        let var = per_rep.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        (mean, (var / m).sqrt())
    } else {
        let rep = &bundle.replications[0];
        let per_particle = per_particle_rewards(spec, bundle, rep);
        let nn = per_particle.len() as f64;
        let mean = per_particle.iter().sum::<f64>() / nn;
        let var = if per_particle.len() > 1 {
            per_particle
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (nn - 1.0)
        } else {
            0.0
        };
        (mean, (var / nn).sqrt())
    }
}

/// Optimization method for the derivative-free search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMethod {
    CrossEntropy,
    RandomSearch,
}

#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_value: f64,
    pub mean_value: f64,
    pub best_params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub best: Policy,
    pub best_params: Vec<f64>,
    pub value: f64,
    pub standard_error: f64,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
}

const POPULATION: usize = 32;
const ELITE_FRACTION: f64 = 0.2;
const SMOOTHING: f64 = 0.7;

fn box_bounds(spec: &ProblemSpec) -> Result<(Vec<f64>, Vec<f64>), ControlError> {
    match &spec.control {
        ControlSet::Box { lower, upper } => Ok((lower.clone(), upper.clone())),
        ControlSet::Finite { .. } => Err(ControlError::BoxControlRequired),
    }
}

/// Derivative-free policy search by cross-entropy (elite fraction 0.2,
/// population 32, Gaussian parameter smoothing, box projection) or plain
/// random search. All candidates of every generation are evaluated under
/// common random numbers: the simulation seed is fixed, so differences
/// between candidates reflect the policy alone and re-evaluating any policy
/// reproduces its value bit for bit.
pub fn optimize_policy(
    spec: &ProblemSpec,
    family: &PolicyFamily,
    init: &InitialLaw,
    budget: usize,
    cfg: &SimConfig,
    method: OptMethod,
) -> Result<OptimizeResult, ControlError> {
    if budget < POPULATION {
        return Err(ControlError::BudgetTooSmall {
            budget,
            population: POPULATION,
        });
    }
    let (lower, upper) = box_bounds(spec)?;
    let dim = family.param_len(spec);
    let reps = dim / lower.len();
    let lo: Vec<f64> = (0..reps).flat_map(|_| lower.iter().copied()).collect();
    let hi: Vec<f64> = (0..reps).flat_map(|_| upper.iter().copied()).collect();

    let evaluate = |params: &[f64]| -> Result<f64, ControlError> {
        let policy = family.decode(spec, params)?;
        let (value, _) = reward_mfc(spec, &policy, init, cfg)?;
        Ok(value)
    };

    let mut sampler = ChaCha8Rng::seed_from_u64(crate::particle::derive_seed(
        cfg.seed,
        crate::particle::StreamId {
            replication: u64::MAX,
            particle: 0,
            step: 0,
            purpose: crate::particle::StreamPurpose::Mixture,
        },
    ));

    let mut mean: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let mut std: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (0.5 * (h - l)).max(1e-3))
        .collect();

    let generations = budget / POPULATION;
    let elite = ((POPULATION as f64 * ELITE_FRACTION).round() as usize).max(1);
    let mut history = Vec::with_capacity(generations);
    let mut best_params: Option<Vec<f64>> = None;
    let mut best_value = f64::NEG_INFINITY;
    let mut evaluations = 0usize;

    for generation in 0..generations {
        // Sampling is sequential (deterministic); evaluation is parallel
        // with results written into per-candidate slots.
        let candidates: Vec<Vec<f64>> = (0..POPULATION)
            .map(|_| {
                (0..dim)
                    .map(|d| {
                        let raw = match method {
                            OptMethod::CrossEntropy => {
                                let z: f64 = StandardNormal.sample(&mut sampler);
                                mean[d] + std[d] * z
                            }
                            OptMethod::RandomSearch => sampler.gen_range(lo[d]..=hi[d]),
                        };
                        raw.clamp(lo[d], hi[d])
                    })
                    .collect()
            })
            .collect();

        let values: Vec<Result<f64, ControlError>> =
            candidates.par_iter().map(|c| evaluate(c)).collect();
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(POPULATION);
        for (i, v) in values.into_iter().enumerate() {
            scored.push((i, v?));
        }
        evaluations += POPULATION;
        // Sort descending by value with index tie-break for determinism.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let gen_best = scored[0].1;
        let gen_mean = scored.iter().map(|(_, v)| v).sum::<f64>() / POPULATION as f64;
        if gen_best > best_value {
            best_value = gen_best;
            best_params = Some(candidates[scored[0].0].clone());
        }
        history.push(GenerationRecord {
            generation,
            best_value: gen_best,
            mean_value: gen_mean,
            best_params: candidates[scored[0].0].clone(),
        });

        if method == OptMethod::CrossEntropy {
            let elites: Vec<&Vec<f64>> = scored[..elite]
                .iter()
                .map(|(i, _)| &candidates[*i])
                .collect();
            for d in 0..dim {
                let em = elites.iter().map(|c| c[d]).sum::<f64>() / elite as f64;
                let ev = elites
                    .iter()
                    .map(|c| (c[d] - em) * (c[d] - em))
                    .sum::<f64>()
                    / elite as f64;
                mean[d] = SMOOTHING * em + (1.0 - SMOOTHING) * mean[d];
                std[d] = (SMOOTHING * ev.sqrt() + (1.0 - SMOOTHING) * std[d]).max(1e-6);
            }
        }
    }

    let best_params = best_params.expect("at least one generation ran");
    let policy = family.decode(spec, &best_params)?;
    let bundle = simulate_mkv(spec, &policy, init, cfg)?;
    let (value, standard_error) = bundle_estimate(spec, &bundle);
    Ok(OptimizeResult {
        best: policy,
        best_params,
        value,
        standard_error,
        history,
        evaluations,
    })
}

/// One row of a propagation-of-chaos study.
#[derive(Debug, Clone)]
pub struct ValueGapRow {
    pub particles: usize,
    pub value: f64,
    pub standard_error: f64,
    /// |V_N - V_ref| against the reference optimized at 4x the largest N.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ValueGapStudy {
    pub rows: Vec<ValueGapRow>,
    pub reference_particles: usize,
    pub reference_value: f64,
    pub reference_se: f64,
}

/// Optimizes the family at every N in `n_list` and at a reference size of
/// four times the largest N, and reports the gaps `|V_N - V_ref|`.
pub fn value_gap_study(
    spec: &ProblemSpec,
    family: &PolicyFamily,
    init: &InitialLaw,
    n_list: &[usize],
    budget: usize,
    cfg: &SimConfig,
    method: OptMethod,
) -> Result<ValueGapStudy, ControlError> {
    assert!(!n_list.is_empty() && n_list.windows(2).all(|w| w[0] < w[1]));
    let reference_particles = n_list.last().unwrap() * 4;
    let mut ref_cfg = cfg.clone();
    ref_cfg.particles = reference_particles;
    let reference = optimize_policy(spec, family, init, budget, &ref_cfg, method)?;

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut n_cfg = cfg.clone();
        n_cfg.particles = n;
        let result = optimize_policy(spec, family, init, budget, &n_cfg, method)?;
        rows.push(ValueGapRow {
            particles: n,
            value: result.value,
            standard_error: result.standard_error,
            gap: (result.value - reference.value).abs(),
        });
    }
    Ok(ValueGapStudy {
        rows,
        reference_particles,
        reference_value: reference.value,
        reference_se: reference.standard_error,
    })
}
