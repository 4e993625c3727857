//! Euler-Maruyama engines for the interacting particle systems.
//!
//! One shared engine drives both the N-agent system (per-agent policies) and
//! the conditional McKean-Vlasov approximation (one policy, conditional laws
//! given the common noise approximated by the within-replication empirical
//! cloud; the two loops literally coincide). On top of it sit the
//! kernel-regularized Fokker-Planck representation and the randomized
//! discretization scheme with its drift and volatility corrections.
//!
//! Reproducibility contract: every random draw comes from a ChaCha stream
//! seeded by [`derive_seed`] on the tuple (replication, particle label, step,
//! purpose). Parallel sections only ever write to disjoint index slots and
//! all reductions happen sequentially afterwards, so results are bitwise
//! independent of the worker count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

use crate::control::Policy;
use crate::error::MeasureError;
use crate::measures::{
    empirical_from_particles, CommonNoisePath, DiscreteMeasure, MeasurePath, MeasurePathView,
    MixtureStep, RelaxedControlPath,
};
use crate::mollify::{
    inv_principal_sqrt, kernel_weights, mollified_coefficients, principal_sqrt, sample_control,
    MollifyError, SpdMatrix,
};
use crate::problem::{CoeffArgs, ProblemSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation config invalid: {0}")]
    Config(String),
    #[error("expected {expected} policies, got {got}")]
    PolicyCount { expected: usize, got: usize },
    #[error("all {0} replications aborted on non-finite states")]
    AllReplicationsAborted(usize),
    #[error("kernel mass still zero after {doublings} bandwidth doublings (base eps {eps})")]
    ZeroMassExhausted { eps: f64, doublings: usize },
    #[error("diffusion matrix not SPD at t={t}: {source}")]
    NotSpd { t: f64, source: MollifyError },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Mollify(#[from] MollifyError),
    #[error("grids of q, reference path, and noise must coincide")]
    GridMismatch,
    #[error("dyadic level {level} does not refine the {steps}-step grid")]
    DyadicMismatch { level: u32, steps: usize },
    #[error("randomized scheme requires Dirac (single-component) control steps")]
    NotDirac,
}

/// What a derived random stream is used for. Part of the stream identity, so
/// distinct purposes can never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    /// Initial-state sampling.
    Init,
    /// Mixture-policy component resolution (once per particle).
    Mixture,
    /// Idiosyncratic Brownian increments.
    Idiosyncratic,
    /// Shared common-noise increments.
    Common,
    /// Per-dyadic-cell uniforms for the randomized scheme.
    SchemeUniform,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Init => 1,
            StreamPurpose::Mixture => 2,
            StreamPurpose::Idiosyncratic => 3,
            StreamPurpose::Common => 4,
            StreamPurpose::SchemeUniform => 5,
        }
    }
}

/// Identity of one random stream inside a run.
#[derive(Debug, Clone, Copy)]
pub struct StreamId {
    pub replication: u64,
    pub particle: u64,
    pub step: u64,
    pub purpose: StreamPurpose,
}

fn avalanche(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn absorb(h: u64, v: u64) -> u64 {
    avalanche(h ^ v.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0xd1b5_4a32_d192_ed03))
}

/// Pure hash-based stream splitting: identical tuples give identical seeds,
/// distinct tuples give distinct, statistically independent seeds.
pub fn derive_seed(master: u64, stream: StreamId) -> u64 {
    let mut h = avalanche(master.wrapping_add(0x243f_6a88_85a3_08d3));
    h = absorb(h, stream.replication);
    h = absorb(h, stream.particle);
    h = absorb(h, stream.step);
    h = absorb(h, stream.purpose.tag());
    h
}

fn stream_rng(master: u64, stream: StreamId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// Simulation size and seeding parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Particles per cloud (N).
    pub particles: usize,
    /// Time steps (K) on the uniform grid.
    pub steps: usize,
    /// Outer common-noise replications (M); 1 when there is no common noise.
    pub replications: usize,
    /// Master seed; every stream in the run is derived from it.
    pub seed: u64,
    /// Mollifier bandwidth, where applicable.
    pub epsilon: Option<f64>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.particles == 0 || self.steps == 0 || self.replications == 0 {
            return Err(SimError::Config(
                "particles, steps, and replications must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self, horizon: f64) -> Vec<f64> {
        (0..=self.steps)
            .map(|k| horizon * k as f64 / self.steps as f64)
            .collect()
    }
}

/// Initial law of a particle. `Spread` produces per-particle heterogeneous
/// Gaussians with centers equally spaced over an interval, so the average of
/// the per-agent laws does not depend on N.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(Vec<f64>),
    GaussianIid { mean: Vec<f64>, std: f64 },
    Atoms(DiscreteMeasure),
    SpreadGaussian { lo: f64, hi: f64, std: f64 },
}

impl InitialLaw {
    /// Resolves a possibly particle-indexed law to the concrete law of
    /// particle `i` out of `total`.
    fn for_particle(&self, i: usize, total: usize) -> InitialLaw {
        match self {
            InitialLaw::SpreadGaussian { lo, hi, std } => {
                let frac = if total <= 1 {
                    0.5
                } else {
                    i as f64 / (total - 1) as f64
                };
                InitialLaw::GaussianIid {
                    mean: vec![lo + (hi - lo) * frac],
                    std: *std,
                }
            }
            other => other.clone(),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            InitialLaw::Point(p) => {
                assert_eq!(p.len(), n);
                p.clone()
            }
            InitialLaw::GaussianIid { mean, std } => {
                assert_eq!(mean.len(), n);
                mean.iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + std * z
                    })
                    .collect()
            }
            InitialLaw::Atoms(m) => {
                assert_eq!(m.dim(), n);
                let v: f64 = rng.gen();
                let mut cum = 0.0;
                for (p, w) in m.iter() {
                    cum += w;
                    if cum >= v {
                        return p.to_vec();
                    }
                }
                m.point(m.len() - 1).to_vec()
            }
            InitialLaw::SpreadGaussian { .. } => {
                self.for_particle(0, 1).sample(n, rng)
            }
        }
    }
}

/// One agent of the engine: its policy, initial law, and the label that
/// identifies its random streams. Permuting whole `AgentSetup`s permutes the
/// resulting trajectories identically.
#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub policy: Policy,
    pub init: InitialLaw,
    pub stream_label: u64,
}

/// Everything recorded for one replication: particle states at every grid
/// node, realized controls per step, the common-noise path, and the derived
/// empirical measure paths.
#[derive(Debug, Clone)]
pub struct Replication {
    pub index: usize,
    /// Flat `(K+1) x N x n` states.
    pub states: Vec<f64>,
    /// Flat `K x N x u_dim` controls.
    pub controls: Vec<f64>,
    pub noise: CommonNoisePath,
    /// Empirical state-law path `phi^{N,X}`.
    pub state_path: MeasurePath,
    /// Dirac relaxed control `delta_{phi^N_t}`.
    pub control_path: RelaxedControlPath,
}

impl Replication {
    pub fn state_at(&self, n: usize, particles: usize, node: usize, particle: usize) -> &[f64] {
        let base = (node * particles + particle) * n;
        &self.states[base..base + n]
    }

    pub fn control_at(&self, u_dim: usize, particles: usize, step: usize, particle: usize) -> &[f64] {
        let base = (step * particles + particle) * u_dim;
        &self.controls[base..base + u_dim]
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimWarnings {
    /// Policy outputs projected back onto the control set.
    pub projected_controls: u64,
    /// Kernel-bandwidth doublings triggered by empty local mass.
    pub zero_mass_fallbacks: u64,
    /// Replications dropped after a non-finite state, with the step index.
    pub aborted: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub n: usize,
    pub control_dim: usize,
    pub particles: usize,
    pub grid: Vec<f64>,
    pub replications: Vec<Replication>,
    pub warnings: SimWarnings,
}

impl TrajectoryBundle {
    /// Per-node particle table as delimited text:
    /// `replication,particle,time,x...,u...` with the terminal node carrying
    /// the last applied control.
    pub fn write_particle_table(&self) -> String {
        let mut out = String::new();
        out.push_str("replication,particle,time");
        for d in 0..self.n {
            let _ = write!(out, ",x{d}");
        }
        for d in 0..self.control_dim {
            let _ = write!(out, ",u{d}");
        }
        out.push('\n');
        let steps = self.grid.len() - 1;
        for rep in &self.replications {
            for (k, &t) in self.grid.iter().enumerate() {
                let ctrl_step = k.min(steps - 1);
                for i in 0..self.particles {
                    let _ = write!(out, "{},{},{}", rep.index, i, t);
                    for v in rep.state_at(self.n, self.particles, k, i) {
                        let _ = write!(out, ",{}", v);
                    }
                    for v in rep.control_at(self.control_dim, self.particles, ctrl_step, i) {
                        let _ = write!(out, ",{}", v);
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

fn sigma0_dot(sigma0: &DMatrix<f64>, db: &[f64], out: &mut [f64]) {
    for r in 0..sigma0.nrows() {
        let mut acc = 0.0;
        for c in 0..sigma0.ncols() {
            acc += sigma0[(r, c)] * db[c];
        }
        out[r] += acc;
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

struct ReplicationOutcome {
    replication: Option<Replication>,
    aborted_at: Option<usize>,
    projected: u64,
}

fn simulate_replication(
    spec: &ProblemSpec,
    agents: &[AgentSetup],
    cfg: &SimConfig,
    rep_index: usize,
) -> Result<ReplicationOutcome, SimError> {
    let n = spec.n;
    let u_dim = spec.control_dim();
    let count = agents.len();
    let grid = cfg.grid(spec.horizon);
    let steps = cfg.steps;
    let dt = spec.horizon / steps as f64;
    let rep = rep_index as u64;

    // Common noise for the whole replication, shared by every particle.
    let noise = {
        let mut increments = Vec::with_capacity(steps * spec.ell);
        for k in 0..steps {
            let mut rng = stream_rng(
                cfg.seed,
                StreamId {
                    replication: rep,
                    particle: 0,
                    step: k as u64,
                    purpose: StreamPurpose::Common,
                },
            );
            increments.extend(gaussian_vec(&mut rng, spec.ell, dt.sqrt()));
        }
        CommonNoisePath::new(grid.clone(), spec.ell, increments)?
    };

    // Initial states and per-particle resolved policies.
    let mut states = vec![0.0; count * n];
    let mut resolved = Vec::with_capacity(count);
    for (i, agent) in agents.iter().enumerate() {
        let mut rng = stream_rng(
            cfg.seed,
            StreamId {
                replication: rep,
                particle: agent.stream_label,
                step: 0,
                purpose: StreamPurpose::Init,
            },
        );
        let x0 = agent.init.for_particle(i, count).sample(n, &mut rng);
        states[i * n..(i + 1) * n].copy_from_slice(&x0);
        let mut mix_rng = stream_rng(
            cfg.seed,
            StreamId {
                replication: rep,
                particle: agent.stream_label,
                step: 0,
                purpose: StreamPurpose::Mixture,
            },
        );
        resolved.push(agent.policy.resolve(&mut mix_rng));
    }

    let mut all_states = Vec::with_capacity((steps + 1) * count * n);
    all_states.extend_from_slice(&states);
    let mut all_controls = Vec::with_capacity(steps * count * u_dim);
    let mut path_grid: Vec<f64> = vec![0.0];
    let mut path_measures: Vec<DiscreteMeasure> = Vec::with_capacity(steps + 1);
    let mut control_steps: Vec<MixtureStep> = Vec::with_capacity(steps);
    let projected = AtomicU64::new(0);
    let mut aborted_at = None;

    let (phi_x0, _) = empirical_from_particles(n, 0, &states, &[])?;
    path_measures.push(phi_x0);

    for k in 0..steps {
        let t = grid[k];
        // Controls for this step.
        let mut controls = vec![0.0; count * u_dim];
        controls
            .par_chunks_mut(u_dim)
            .enumerate()
            .for_each(|(i, out)| {
                let x = &states[i * n..(i + 1) * n];
                let u = resolved[i].evaluate(t, x);
                if spec.control.contains(&u, 1e-9) {
                    out.copy_from_slice(&u);
                } else {
                    projected.fetch_add(1, Ordering::Relaxed);
                    out.copy_from_slice(&spec.control.project(&u));
                }
            });
        all_controls.extend_from_slice(&controls);

        // Empirical state-control measure, rebuilt each step.
        let (_, phi) = empirical_from_particles(n, u_dim, &states, &controls)?;
        control_steps.push(vec![(1.0, phi.clone())]);

        let prefix = MeasurePathView::from_parts(&path_grid, &path_measures);
        let db = noise.increment(k);
        let mut next = vec![0.0; count * n];
        next.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let x = &states[i * n..(i + 1) * n];
            let u = &controls[i * u_dim..(i + 1) * u_dim];
            let args = CoeffArgs {
                t,
                x,
                path: &prefix,
                m: &phi,
                u,
            };
            let b = spec.drift_at(&args);
            let s = spec.vol_at(&args);
            let mut rng = stream_rng(
                cfg.seed,
                StreamId {
                    replication: rep,
                    particle: agents[i].stream_label,
                    step: k as u64,
                    purpose: StreamPurpose::Idiosyncratic,
                },
            );
            let dw = gaussian_vec(&mut rng, n, dt.sqrt());
            for r in 0..n {
                let mut diff = 0.0;
                for c in 0..n {
                    diff += s[(r, c)] * dw[c];
                }
                out[r] = x[r] + b[r] * dt + diff;
            }
            sigma0_dot(&spec.sigma0, db, out);
        });

        if next.iter().any(|v| !v.is_finite()) {
            aborted_at = Some(k);
            break;
        }
        states = next;
        all_states.extend_from_slice(&states);
        path_grid.push(grid[k + 1]);
        let (phi_x, _) = empirical_from_particles(n, 0, &states, &[])?;
        path_measures.push(phi_x);
    }

    if let Some(step) = aborted_at {
        return Ok(ReplicationOutcome {
            replication: None,
            aborted_at: Some(step),
            projected: projected.into_inner(),
        });
    }

    let state_path = MeasurePath::new(grid.clone(), path_measures)?;
    let control_path = RelaxedControlPath::new(grid, control_steps)?;
    Ok(ReplicationOutcome {
        replication: Some(Replication {
            index: rep_index,
            states: all_states,
            controls: all_controls,
            noise,
            state_path,
            control_path,
        }),
        aborted_at: None,
        projected: projected.into_inner(),
    })
}

/// Simulates the controlled system driven by per-agent setups. This is the
/// shared engine behind [`simulate_n_agent`] and [`simulate_mkv`].
pub fn simulate_agents(
    spec: &ProblemSpec,
    agents: &[AgentSetup],
    cfg: &SimConfig,
) -> Result<TrajectoryBundle, SimError> {
    cfg.validate()?;
    if agents.len() != cfg.particles {
        return Err(SimError::PolicyCount {
            expected: cfg.particles,
            got: agents.len(),
        });
    }
    let outcomes: Vec<Result<ReplicationOutcome, SimError>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| simulate_replication(spec, agents, cfg, r))
        .collect();

    let mut warnings = SimWarnings::default();
    let mut replications = Vec::with_capacity(cfg.replications);
    for (r, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        warnings.projected_controls += outcome.projected;
        match outcome.replication {
            Some(rep) => replications.push(rep),
            None => warnings.aborted.push((r, outcome.aborted_at.unwrap_or(0))),
        }
    }
    if !warnings.aborted.is_empty() {
        log::warn!(
            "{} replication(s) aborted on non-finite states",
            warnings.aborted.len()
        );
    }
    if warnings.projected_controls > 0 {
        log::warn!(
            "{} policy outputs were projected onto the control set",
            warnings.projected_controls
        );
    }
    if replications.is_empty() {
        return Err(SimError::AllReplicationsAborted(cfg.replications));
    }
    Ok(TrajectoryBundle {
        n: spec.n,
        control_dim: spec.control_dim(),
        particles: cfg.particles,
        grid: cfg.grid(spec.horizon),
        replications,
        warnings,
    })
}

/// The N-agent system: one policy per agent, interactions through the
/// empirical state path and the joint state-control cloud, idiosyncratic
/// noise per agent, and common noise shared within a replication.
pub fn simulate_n_agent(
    spec: &ProblemSpec,
    policies: &[Policy],
    init: &InitialLaw,
    cfg: &SimConfig,
) -> Result<TrajectoryBundle, SimError> {
    let agents: Vec<AgentSetup> = policies
        .iter()
        .enumerate()
        .map(|(i, p)| AgentSetup {
            policy: p.clone(),
            init: init.clone(),
            stream_label: i as u64,
        })
        .collect();
    simulate_agents(spec, &agents, cfg)
}

/// The conditional McKean-Vlasov approximation: an exchangeable cloud under
/// one shared policy. The conditional laws given the common noise are the
/// within-replication empirical measures, so the loop coincides with
/// [`simulate_n_agent`] (same seed, bitwise identical paths).
pub fn simulate_mkv(
    spec: &ProblemSpec,
    policy: &Policy,
    init: &InitialLaw,
    cfg: &SimConfig,
) -> Result<TrajectoryBundle, SimError> {
    let agents: Vec<AgentSetup> = (0..cfg.particles)
        .map(|i| AgentSetup {
            policy: policy.clone(),
            init: init.clone(),
            stream_label: i as u64,
        })
        .collect();
    simulate_agents(spec, &agents, cfg)
}

/// Resolves the smallest bandwidth `eps * 2^j` (j <= 40) at which the kernel
/// carries mass at `x`, counting fallbacks.
fn effective_eps(
    m: &DiscreteMeasure,
    eps: f64,
    x: &[f64],
    fallbacks: &AtomicU64,
) -> Result<f64, SimError> {
    let mut e = eps;
    for j in 0..=40 {
        match kernel_weights(m, e, x) {
            Ok(_) => {
                if j > 0 {
                    fallbacks.fetch_add(j, Ordering::Relaxed);
                }
                return Ok(e);
            }
            Err(MollifyError::ZeroMass { .. }) => e *= 2.0,
            Err(other) => return Err(other.into()),
        }
    }
    Err(SimError::ZeroMassExhausted { eps, doublings: 40 })
}

fn mollified_with_fallback(
    spec: &ProblemSpec,
    eps: f64,
    t: f64,
    x: &[f64],
    path: &MeasurePathView,
    q_step: &MixtureStep,
    fallbacks: &AtomicU64,
) -> Result<(Vec<f64>, SpdMatrix), SimError> {
    let mut e = eps;
    for j in 0..=40 {
        match mollified_coefficients(spec, e, t, x, path, q_step) {
            Ok(out) => {
                if j > 0 {
                    fallbacks.fetch_add(j, Ordering::Relaxed);
                }
                return Ok(out);
            }
            Err(MollifyError::ZeroMass { .. }) => e *= 2.0,
            Err(err @ MollifyError::NotSpd { .. }) => {
                return Err(SimError::NotSpd { t, source: err })
            }
            Err(other) => return Err(other.into()),
        }
    }
    Err(SimError::ZeroMassExhausted { eps, doublings: 40 })
}

/// Simulates the SDE representation of the kernel-regularized Fokker-Planck
/// equation: independent copies of `dY = bhat dt + sqrt(ahat) dW + sigma0 dB`
/// with coefficients frozen from `(pi_ref, q)` and the given noise path.
/// Returns the empirical path of the cloud on the shared grid.
pub fn simulate_regularized_fp(
    spec: &ProblemSpec,
    eps: f64,
    q: &RelaxedControlPath,
    pi_ref: &MeasurePath,
    noise: &CommonNoisePath,
    init: &InitialLaw,
    cfg: &SimConfig,
) -> Result<(MeasurePath, SimWarnings), SimError> {
    cfg.validate()?;
    let grids_ok = q.grid() == pi_ref.grid() && q.grid() == noise.grid();
    if !grids_ok {
        return Err(SimError::GridMismatch);
    }
    let n = spec.n;
    let grid = pi_ref.grid().to_vec();
    let steps = grid.len() - 1;
    let count = cfg.particles;
    let fallbacks = AtomicU64::new(0);

    let mut states = vec![0.0; count * n];
    for i in 0..count {
        let mut rng = stream_rng(
            cfg.seed,
            StreamId {
                replication: 0,
                particle: i as u64,
                step: 0,
                purpose: StreamPurpose::Init,
            },
        );
        let x0 = init.for_particle(i, count).sample(n, &mut rng);
        states[i * n..(i + 1) * n].copy_from_slice(&x0);
    }

    let mut cloud_measures = Vec::with_capacity(steps + 1);
    cloud_measures.push(DiscreteMeasure::uniform(n, &states)?);

    for k in 0..steps {
        let t = grid[k];
        let dt = grid[k + 1] - grid[k];
        let prefix = pi_ref.prefix(k);
        let q_step = q.step(k);
        let db = noise.increment(k);
        let results: Vec<Result<Vec<f64>, SimError>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let x = states[i * n..(i + 1) * n].to_vec();
                let (bhat, ahat) =
                    mollified_with_fallback(spec, eps, t, &x, &prefix, q_step, &fallbacks)?;
                let vol = principal_sqrt(&ahat);
                let mut rng = stream_rng(
                    cfg.seed,
                    StreamId {
                        replication: 0,
                        particle: i as u64,
                        step: k as u64,
                        purpose: StreamPurpose::Idiosyncratic,
                    },
                );
                let dw = gaussian_vec(&mut rng, n, dt.sqrt());
                let mut out = vec![0.0; n];
                for r in 0..n {
                    let mut diff = 0.0;
                    for c in 0..n {
                        diff += vol.matrix()[(r, c)] * dw[c];
                    }
                    out[r] = x[r] + bhat[r] * dt + diff;
                }
                sigma0_dot(&spec.sigma0, db, &mut out);
                Ok(out)
            })
            .collect();
        for (i, res) in results.into_iter().enumerate() {
            let x = res?;
            states[i * n..(i + 1) * n].copy_from_slice(&x);
        }
        cloud_measures.push(DiscreteMeasure::uniform(n, &states)?);
    }

    let warnings = SimWarnings {
        projected_controls: 0,
        zero_mass_fallbacks: fallbacks.into_inner(),
        aborted: Vec::new(),
    };
    Ok((MeasurePath::new(grid, cloud_measures)?, warnings))
}

/// The drift and volatility corrections of the randomized scheme at one
/// evaluation point.
///
/// The drift correction recentres the drawn-control drift on the kernel
/// average: `bhat_eps(x) - integral of b(t, x, pi, m, u) under the control
/// kernel H_eps(x, m)`. The volatility factor is
/// `sqrt(ahat_eps(x)) * (integral of sigma sigma^T(t, x, pi, m, u) under
/// H_eps(x, m))^{-1/2}`, which turns the conditional second moment of the
/// drawn-control volatility into `ahat_eps` exactly.
pub fn scheme_corrections(
    spec: &ProblemSpec,
    eps: f64,
    t: f64,
    x: &[f64],
    path: &MeasurePathView,
    m: &DiscreteMeasure,
) -> Result<(Vec<f64>, DMatrix<f64>), SimError> {
    let n = spec.n;
    let q_step = vec![(1.0, m.clone())];
    let (bhat, ahat) = mollified_coefficients(spec, eps, t, x, path, &q_step)
        .map_err(SimError::from)?;
    let weights = kernel_weights(m, eps, x)?;
    let mut b_bar = vec![0.0; n];
    let mut a_bar = DMatrix::<f64>::zeros(n, n);
    for &id in crate::mollify::support_window(m, eps, x[0]) {
        let i = id as usize;
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let atom = m.point(i);
        let u = &atom[n..];
        let args = CoeffArgs { t, x, path, m, u };
        let b = spec.drift_at(&args);
        let s = spec.vol_at(&args);
        for (acc, v) in b_bar.iter_mut().zip(&b) {
            *acc += w * v;
        }
        a_bar += (&s * s.transpose()) * w;
    }
    let a_bar = SpdMatrix::new(a_bar).map_err(|e| SimError::NotSpd { t, source: e })?;
    let drift_corr: Vec<f64> = bhat.iter().zip(&b_bar).map(|(a, b)| a - b).collect();
    let vol_factor = principal_sqrt(&ahat).matrix() * inv_principal_sqrt(&a_bar).matrix();
    Ok((drift_corr, vol_factor))
}

/// The randomized Euler discretization: controls are drawn per dyadic cell
/// from the conditional kernel at the frozen state, the drift carries the
/// recentring correction, and the volatility carries the second-moment
/// factor. With a one-atom kernel both corrections vanish and the scheme is
/// plain Euler.
pub fn simulate_randomized_scheme(
    spec: &ProblemSpec,
    eps: f64,
    m_path: &RelaxedControlPath,
    init: &InitialLaw,
    cfg: &SimConfig,
    dyadic_level: u32,
) -> Result<TrajectoryBundle, SimError> {
    cfg.validate()?;
    if m_path
        .steps()
        .iter()
        .any(|step| step.len() != 1)
    {
        return Err(SimError::NotDirac);
    }
    let coarse_grid = m_path.grid().to_vec();
    let coarse_steps = coarse_grid.len() - 1;
    let cells = 1usize << dyadic_level;
    if cells % coarse_steps != 0 || cells < coarse_steps {
        return Err(SimError::DyadicMismatch {
            level: dyadic_level,
            steps: coarse_steps,
        });
    }
    // The dyadic grid must refine a uniform coarse grid.
    let horizon = *coarse_grid.last().unwrap();
    let coarse_dt = horizon / coarse_steps as f64;
    if coarse_grid
        .iter()
        .enumerate()
        .any(|(k, &t)| (t - k as f64 * coarse_dt).abs() > 1e-12 * horizon.max(1.0))
    {
        return Err(SimError::Config(
            "randomized scheme requires a uniform coarse grid".into(),
        ));
    }
    let cells_per_step = cells / coarse_steps;
    let cell_dt = horizon / cells as f64;
    let n = spec.n;
    let u_dim = spec.control_dim();
    let count = cfg.particles;
    let fallbacks = AtomicU64::new(0);

    // State-marginal path of the prescribed control path; the terminal node
    // repeats the last step's marginal.
    let pi = {
        let mut ms: Vec<DiscreteMeasure> = m_path
            .steps()
            .iter()
            .map(|s| s[0].1.marginal_state(n))
            .collect::<Result<_, _>>()?;
        let last = ms.last().unwrap().clone();
        ms.push(last);
        MeasurePath::new(coarse_grid.clone(), ms)?
    };

    let mut replications = Vec::with_capacity(cfg.replications);
    for rep_index in 0..cfg.replications {
        let rep = rep_index as u64;
        let noise = {
            let fine_grid: Vec<f64> = (0..=cells).map(|j| horizon * j as f64 / cells as f64).collect();
            let mut increments = Vec::with_capacity(cells * spec.ell);
            for j in 0..cells {
                let mut rng = stream_rng(
                    cfg.seed,
                    StreamId {
                        replication: rep,
                        particle: 0,
                        step: j as u64,
                        purpose: StreamPurpose::Common,
                    },
                );
                increments.extend(gaussian_vec(&mut rng, spec.ell, cell_dt.sqrt()));
            }
            CommonNoisePath::new(fine_grid, spec.ell, increments)?
        };

        let mut states = vec![0.0; count * n];
        for i in 0..count {
            let mut rng = stream_rng(
                cfg.seed,
                StreamId {
                    replication: rep,
                    particle: i as u64,
                    step: 0,
                    purpose: StreamPurpose::Init,
                },
            );
            let x0 = init.for_particle(i, count).sample(n, &mut rng);
            states[i * n..(i + 1) * n].copy_from_slice(&x0);
        }

        let mut all_states = Vec::with_capacity((coarse_steps + 1) * count * n);
        all_states.extend_from_slice(&states);
        let mut all_controls = vec![0.0; coarse_steps * count * u_dim];
        let mut cloud = Vec::with_capacity(coarse_steps + 1);
        cloud.push(DiscreteMeasure::uniform(n, &states)?);

        for j in 0..cells {
            let s_time = j as f64 * cell_dt;
            let coarse_k = j / cells_per_step;
            let m = &m_path.step(coarse_k)[0].1;
            let prefix = pi.prefix(coarse_k);
            let db = noise.increment(j);
            let results: Vec<Result<(Vec<f64>, Vec<f64>), SimError>> = (0..count)
                .into_par_iter()
                .map(|i| {
                    let x = states[i * n..(i + 1) * n].to_vec();
                    let e = effective_eps(m, eps, &x, &fallbacks)?;
                    let mut v_rng = stream_rng(
                        cfg.seed,
                        StreamId {
                            replication: rep,
                            particle: i as u64,
                            step: j as u64,
                            purpose: StreamPurpose::SchemeUniform,
                        },
                    );
                    let v: f64 = v_rng.gen();
                    let u = sample_control(&x, m, e, v)?;
                    let (drift_corr, vol_factor) =
                        scheme_corrections(spec, e, s_time, &x, &prefix, m)?;
                    let args = CoeffArgs {
                        t: s_time,
                        x: &x,
                        path: &prefix,
                        m,
                        u: &u,
                    };
                    let b = spec.drift_at(&args);
                    let sig = spec.vol_at(&args);
                    let vol = &vol_factor * sig;
                    let mut rng = stream_rng(
                        cfg.seed,
                        StreamId {
                            replication: rep,
                            particle: i as u64,
                            step: j as u64,
                            purpose: StreamPurpose::Idiosyncratic,
                        },
                    );
                    let dw = gaussian_vec(&mut rng, n, cell_dt.sqrt());
                    let mut out = vec![0.0; n];
                    for r in 0..n {
                        let mut diff = 0.0;
                        for c in 0..n {
                            diff += vol[(r, c)] * dw[c];
                        }
                        out[r] = x[r] + (b[r] + drift_corr[r]) * cell_dt + diff;
                    }
                    sigma0_dot(&spec.sigma0, db, &mut out);
                    Ok((out, u))
                })
                .collect();
            let record_control = j % cells_per_step == 0;
            for (i, res) in results.into_iter().enumerate() {
                let (x, u) = res?;
                states[i * n..(i + 1) * n].copy_from_slice(&x);
                if record_control {
                    let base = (coarse_k * count + i) * u_dim;
                    all_controls[base..base + u_dim].copy_from_slice(&u);
                }
            }
            if (j + 1) % cells_per_step == 0 {
                all_states.extend_from_slice(&states);
                cloud.push(DiscreteMeasure::uniform(n, &states)?);
            }
        }

        // Derived empirical paths on the coarse grid.
        let state_path = MeasurePath::new(coarse_grid.clone(), cloud)?;
        let mut control_steps = Vec::with_capacity(coarse_steps);
        for k in 0..coarse_steps {
            let st = &all_states[k * count * n..(k + 1) * count * n];
            let ct = &all_controls[k * count * u_dim..(k + 1) * count * u_dim];
            let (_, phi) = empirical_from_particles(n, u_dim, st, ct)?;
            control_steps.push(vec![(1.0, phi)]);
        }
        let coarse_noise = {
            // Aggregate the fine increments back onto the coarse grid.
            let mut incs = vec![0.0; coarse_steps * spec.ell];
            for j in 0..cells {
                let k = j / cells_per_step;
                for d in 0..spec.ell {
                    incs[k * spec.ell + d] += noise.increment(j)[d];
                }
            }
            CommonNoisePath::new(coarse_grid.clone(), spec.ell, incs)?
        };
        replications.push(Replication {
            index: rep_index,
            states: all_states,
            controls: all_controls,
            noise: coarse_noise,
            state_path,
            control_path: RelaxedControlPath::new(coarse_grid.clone(), control_steps)?,
        });
    }

    Ok(TrajectoryBundle {
        n,
        control_dim: u_dim,
        particles: count,
        grid: coarse_grid,
        replications,
        warnings: SimWarnings {
            projected_controls: 0,
            zero_mass_fallbacks: fallbacks.into_inner(),
            aborted: Vec::new(),
        },
    })
}
