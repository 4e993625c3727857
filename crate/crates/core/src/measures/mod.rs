//! Empirical probability measures, transport distances, and time-gridded
//! paths of measures.
//!
//! Everything downstream is particle-based: an element of `P(R^n)` (or of
//! `P(R^n x U)` for joint state-control laws) is always a finite weighted
//! atom cloud. Paths of measures live on an explicit simulation grid, and
//! relaxed controls are piecewise-constant mixtures over state-control
//! measures held on the same grid.

mod assignment;
mod transport;

pub use transport::{path_distance, wasserstein, wasserstein_auto, TransportMode};

use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::error::MeasureError;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Neumaier-compensated sum; the error stays at a few ulps regardless of the
/// number of terms, which matters for clouds of 10^5+ atoms.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pairwise summation of `f(i)` over `lo..hi`. Exact for power-of-two counts
/// of identical terms, which keeps "mean of a constant cloud" bit-exact.
pub(crate) fn pairwise_sum(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
    match hi - lo {
        0 => 0.0,
        1 => f(lo),
        2 => f(lo) + f(lo + 1),
        len => {
            let mid = lo + len / 2;
            pairwise_sum(lo, mid, f) + pairwise_sum(mid, hi, f)
        }
    }
}

/// A finite weighted atom cloud representing a Borel probability measure on
/// `R^dim`.
///
/// Invariants enforced at construction: the atom list is non-empty, all
/// coordinates are finite, weights are non-negative and sum to 1 within
/// `1e-12`. Duplicate atoms are kept as-is (particle identity matters for
/// assignment transport); multiset comparisons go through
/// [`DiscreteMeasure::canonical_atoms`].
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    dim: usize,
    /// Row-major atom coordinates, `len = dim * weights.len()`.
    coords: Vec<f64>,
    weights: Vec<f64>,
    /// Lazily computed full-dimension barycenter, shared across threads.
    mean: OnceLock<Vec<f64>>,
    /// Atom ids sorted by first coordinate, built on first use. Compactly
    /// supported kernels restrict their sums to a first-coordinate window,
    /// which this index makes a binary search.
    first_coord_order: OnceLock<Vec<u32>>,
}

impl DiscreteMeasure {
    /// Builds a measure from parallel coordinate/weight storage.
    ///
    /// `coords` is row-major with `dim` entries per atom.
    pub fn from_flat(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if weights.is_empty() {
            return Err(MeasureError::Empty);
        }
        if coords.len() != dim * weights.len() {
            return Err(MeasureError::AtomDimension {
                index: 0,
                got: coords.len(),
                expected: dim * weights.len(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(MeasureError::NonFinite { index: i });
            }
            if w < 0.0 {
                return Err(MeasureError::NegativeWeight { index: i, weight: w });
            }
        }
        let sum = compensated_sum(weights.iter().copied());
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MeasureError::WeightSum {
                sum,
                tol: WEIGHT_SUM_TOL,
            });
        }
        for (i, chunk) in coords.chunks_exact(dim.max(1)).enumerate() {
            if chunk.iter().any(|c| !c.is_finite()) {
                return Err(MeasureError::NonFinite { index: i });
            }
        }
        Ok(Self {
            dim,
            coords,
            weights,
            mean: OnceLock::new(),
            first_coord_order: OnceLock::new(),
        })
    }

    /// Builds a measure from `(point, weight)` pairs.
    pub fn from_atoms(dim: usize, atoms: &[(Vec<f64>, f64)]) -> Result<Self, MeasureError> {
        for (i, (p, _)) in atoms.iter().enumerate() {
            if p.len() != dim {
                return Err(MeasureError::AtomDimension {
                    index: i,
                    got: p.len(),
                    expected: dim,
                });
            }
        }
        let coords = atoms.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        let weights = atoms.iter().map(|(_, w)| *w).collect();
        Self::from_flat(dim, coords, weights)
    }

    /// The Dirac measure at `point`.
    pub fn dirac(point: &[f64]) -> Result<Self, MeasureError> {
        Self::from_flat(point.len(), point.to_vec(), vec![1.0])
    }

    /// Uniform weights `1/N` over the given points.
    pub fn uniform(dim: usize, points: &[f64]) -> Result<Self, MeasureError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(MeasureError::AtomDimension {
                index: 0,
                got: points.len(),
                expected: dim,
            });
        }
        let n = points.len() / dim;
        Self::from_flat(dim, points.to_vec(), vec![1.0 / n as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Iterates over `(point, weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.coords
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// Weighted barycenter over all coordinates, computed once and cached.
    /// Pairwise summation keeps the mean of a constant power-of-two cloud
    /// bit-exact and the error flat in the atom count.
    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            (0..self.dim)
                .map(|d| {
                    pairwise_sum(0, self.len(), &|i| {
                        self.weights[i] * self.coords[i * self.dim + d]
                    })
                })
                .collect()
        })
    }

    /// Atom ids sorted by the first coordinate (stable in the atom index).
    pub fn first_coord_order(&self) -> &[u32] {
        self.first_coord_order.get_or_init(|| {
            let mut order: Vec<u32> = (0..self.len() as u32).collect();
            order.sort_by(|&a, &b| {
                self.coords[a as usize * self.dim]
                    .total_cmp(&self.coords[b as usize * self.dim])
                    .then(a.cmp(&b))
            });
            order
        })
    }

    /// Half-open range of [`DiscreteMeasure::first_coord_order`] whose first
    /// coordinate lies in `(lo, hi)`.
    pub fn first_coord_window(&self, lo: f64, hi: f64) -> (usize, usize) {
        let order = self.first_coord_order();
        let coord = |id: &u32| self.coords[*id as usize * self.dim];
        let start = order.partition_point(|id| coord(id) <= lo);
        let end = order.partition_point(|id| coord(id) < hi);
        (start, end)
    }

    /// `sum_i w_i |x_i|^p` with the Euclidean norm.
    pub fn p_moment(&self, p: f64) -> f64 {
        assert!(p > 0.0, "p_moment requires p > 0");
        self.iter()
            .map(|(x, w)| {
                let norm2: f64 = x.iter().map(|c| c * c).sum();
                w * norm2.sqrt().powf(p)
            })
            .sum()
    }

    /// Projects each atom onto its leading `state_dim` coordinates,
    /// preserving weights. This is the state marginal of a state-control
    /// measure.
    pub fn marginal_state(&self, state_dim: usize) -> Result<DiscreteMeasure, MeasureError> {
        if state_dim > self.dim || state_dim == 0 {
            return Err(MeasureError::InvalidSplit {
                state_dim,
                dim: self.dim,
            });
        }
        let mut coords = Vec::with_capacity(state_dim * self.len());
        for (p, _) in self.iter() {
            coords.extend_from_slice(&p[..state_dim]);
        }
        DiscreteMeasure::from_flat(state_dim, coords, self.weights.clone())
    }

    /// Returns the measure with every atom translated by `v`.
    pub fn translate(&self, v: &[f64]) -> Result<DiscreteMeasure, MeasureError> {
        if v.len() != self.dim {
            return Err(MeasureError::DimensionMismatch {
                left: v.len(),
                right: self.dim,
            });
        }
        let coords = self
            .coords
            .chunks_exact(self.dim)
            .flat_map(|p| p.iter().zip(v).map(|(c, d)| c + d))
            .collect();
        DiscreteMeasure::from_flat(self.dim, coords, self.weights.clone())
    }

    /// Translates only the leading `state_dim` coordinates of every atom,
    /// leaving control coordinates untouched.
    pub fn translate_state(&self, state_dim: usize, v: &[f64]) -> Result<DiscreteMeasure, MeasureError> {
        if state_dim > self.dim || v.len() != state_dim {
            return Err(MeasureError::InvalidSplit {
                state_dim,
                dim: self.dim,
            });
        }
        let mut coords = self.coords.clone();
        for p in coords.chunks_exact_mut(self.dim) {
            for (c, d) in p[..state_dim].iter_mut().zip(v) {
                *c += d;
            }
        }
        DiscreteMeasure::from_flat(self.dim, coords, self.weights.clone())
    }

    /// Atoms sorted lexicographically with weights of coinciding points
    /// accumulated. This is the canonical multiset representation used for
    /// equality checks.
    pub fn canonical_atoms(&self) -> Vec<(Vec<f64>, f64)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let pa = self.point(a);
            let pb = self.point(b);
            pa.iter()
                .zip(pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
        for idx in order {
            let p = self.point(idx);
            match out.last_mut() {
                Some((q, w)) if q.as_slice() == p => *w += self.weight(idx),
                _ => out.push((p.to_vec(), self.weight(idx))),
            }
        }
        out
    }

    /// Multiset equality up to `tol` on coordinates and accumulated weights.
    pub fn multiset_eq(&self, other: &DiscreteMeasure, tol: f64) -> bool {
        if self.dim != other.dim {
            return false;
        }
        let a = self.canonical_atoms();
        let b = other.canonical_atoms();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((pa, wa), (pb, wb))| {
                (wa - wb).abs() <= tol && pa.iter().zip(pb).all(|(x, y)| (x - y).abs() <= tol)
            })
    }

    /// True when every weight equals `1/N` within `1e-12`.
    pub fn is_uniform(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - w0).abs() <= WEIGHT_SUM_TOL)
    }

    /// Flat text record: a `dim atom_count` header line followed by one
    /// `weight coord...` line per atom. Numbers use shortest round-trip
    /// decimal form.
    pub fn write_flat(&self, out: &mut String) {
        let _ = writeln!(out, "{} {}", self.dim, self.len());
        for (p, w) in self.iter() {
            let _ = write!(out, "{}", w);
            for c in p {
                let _ = write!(out, " {}", c);
            }
            let _ = writeln!(out);
        }
    }

    /// Parses the record format produced by [`DiscreteMeasure::write_flat`].
    /// Returns the measure and the number of lines consumed.
    pub fn parse_flat(lines: &[&str]) -> Result<(Self, usize), MeasureError> {
        let header = lines
            .first()
            .ok_or_else(|| MeasureError::Parse("missing header".into()))?;
        let mut parts = header.split_whitespace();
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MeasureError::Parse(format!("bad header: {header}")))?;
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MeasureError::Parse(format!("bad header: {header}")))?;
        if lines.len() < 1 + count {
            return Err(MeasureError::Parse(format!(
                "expected {count} atom rows, found {}",
                lines.len() - 1
            )));
        }
        let mut coords = Vec::with_capacity(dim * count);
        let mut weights = Vec::with_capacity(count);
        for row in &lines[1..1 + count] {
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MeasureError::Parse(format!("bad atom row `{row}`: {e}")))?;
            if vals.len() != dim + 1 {
                return Err(MeasureError::Parse(format!(
                    "atom row has {} fields, expected {}",
                    vals.len(),
                    dim + 1
                )));
            }
            weights.push(vals[0]);
            coords.extend_from_slice(&vals[1..]);
        }
        Ok((Self::from_flat(dim, coords, weights)?, 1 + count))
    }
}

/// Builds the pair of empirical measures `(phi_x, phi)` from particle states
/// and controls: `phi` is the uniform cloud over `(x_i, u_i)` pairs in
/// `R^n x U` and `phi_x` its state marginal.
///
/// `states` is flat row-major `N x n`, `controls` flat `N x u_dim`.
pub fn empirical_from_particles(
    n: usize,
    u_dim: usize,
    states: &[f64],
    controls: &[f64],
) -> Result<(DiscreteMeasure, DiscreteMeasure), MeasureError> {
    if n == 0 || states.len() % n != 0 {
        return Err(MeasureError::AtomDimension {
            index: 0,
            got: states.len(),
            expected: n,
        });
    }
    let count = states.len() / n;
    if count == 0 {
        return Err(MeasureError::Empty);
    }
    let control_count = if u_dim == 0 { count } else { controls.len() / u_dim.max(1) };
    if u_dim > 0 && (controls.len() % u_dim != 0 || control_count != count) {
        return Err(MeasureError::CountMismatch {
            states: count,
            controls: control_count,
        });
    }
    let mut joint = Vec::with_capacity(count * (n + u_dim));
    for i in 0..count {
        joint.extend_from_slice(&states[i * n..(i + 1) * n]);
        joint.extend_from_slice(&controls[i * u_dim..(i + 1) * u_dim]);
    }
    let phi = DiscreteMeasure::uniform(n + u_dim, &joint)?;
    let phi_x = DiscreteMeasure::uniform(n, states)?;
    Ok((phi_x, phi))
}

fn validate_grid(grid: &[f64]) -> Result<(), MeasureError> {
    if grid.len() < 2 || grid[0] != 0.0 {
        return Err(MeasureError::InvalidGrid);
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(MeasureError::InvalidGrid);
    }
    Ok(())
}

fn grids_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// A time-gridded path of measures: `K+1` clouds of a common dimension on a
/// strictly increasing grid `0 = t_0 < ... < t_K = T`.
#[derive(Debug, Clone)]
pub struct MeasurePath {
    grid: Vec<f64>,
    measures: Vec<DiscreteMeasure>,
}

impl MeasurePath {
    pub fn new(grid: Vec<f64>, measures: Vec<DiscreteMeasure>) -> Result<Self, MeasureError> {
        validate_grid(&grid)?;
        if measures.len() != grid.len() {
            return Err(MeasureError::GridMismatch {
                detail: format!("{} nodes vs {} measures", grid.len(), measures.len()),
            });
        }
        let dim = measures[0].dim();
        if let Some(bad) = measures.iter().find(|m| m.dim() != dim) {
            return Err(MeasureError::DimensionMismatch {
                left: dim,
                right: bad.dim(),
            });
        }
        Ok(Self { grid, measures })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, k: usize) -> &DiscreteMeasure {
        &self.measures[k]
    }

    pub fn measures(&self) -> &[DiscreteMeasure] {
        &self.measures
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Borrowed prefix covering nodes `0..=k`. Coefficients only ever see
    /// prefixes, which enforces non-anticipativity structurally.
    pub fn prefix(&self, k: usize) -> MeasurePathView<'_> {
        MeasurePathView {
            grid: &self.grid[..=k],
            measures: &self.measures[..=k],
        }
    }

    pub fn full(&self) -> MeasurePathView<'_> {
        self.prefix(self.grid.len() - 1)
    }

    /// Shifts every node's atoms by the node-dependent vector `shift(k)`.
    pub fn translate_by_nodes(
        &self,
        mut shift: impl FnMut(usize) -> Vec<f64>,
    ) -> Result<MeasurePath, MeasureError> {
        let measures = self
            .measures
            .iter()
            .enumerate()
            .map(|(k, m)| m.translate(&shift(k)))
            .collect::<Result<Vec<_>, _>>()?;
        MeasurePath::new(self.grid.clone(), measures)
    }
}

/// Borrowed view of a [`MeasurePath`] prefix.
#[derive(Debug, Clone, Copy)]
pub struct MeasurePathView<'a> {
    grid: &'a [f64],
    measures: &'a [DiscreteMeasure],
}

impl<'a> MeasurePathView<'a> {
    pub fn from_parts(grid: &'a [f64], measures: &'a [DiscreteMeasure]) -> Self {
        Self { grid, measures }
    }

    pub fn grid(&self) -> &'a [f64] {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn node(&self, k: usize) -> &'a DiscreteMeasure {
        &self.measures[k]
    }

    /// Latest node of the prefix (the measure at the current time).
    pub fn last(&self) -> &'a DiscreteMeasure {
        self.measures.last().expect("prefix is non-empty")
    }

    pub fn measures(&self) -> &'a [DiscreteMeasure] {
        self.measures
    }
}

/// One step of a relaxed control: a finite mixture over state-control
/// measures, held constant on `[t_k, t_{k+1})`.
pub type MixtureStep = Vec<(f64, DiscreteMeasure)>;

/// A piecewise-constant path of mixtures over `P(R^n x U)`, the particle
/// representation of a measure-valued control. Dirac steps (single-component
/// mixtures) recover strong controls.
#[derive(Debug, Clone)]
pub struct RelaxedControlPath {
    grid: Vec<f64>,
    steps: Vec<MixtureStep>,
}

impl RelaxedControlPath {
    pub fn new(grid: Vec<f64>, steps: Vec<MixtureStep>) -> Result<Self, MeasureError> {
        validate_grid(&grid)?;
        if steps.len() + 1 != grid.len() {
            return Err(MeasureError::GridMismatch {
                detail: format!("{} nodes vs {} steps", grid.len(), steps.len()),
            });
        }
        let mut dim = None;
        for (k, step) in steps.iter().enumerate() {
            if step.is_empty() {
                return Err(MeasureError::Empty);
            }
            let sum: f64 = step.iter().map(|(w, _)| w).sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL || step.iter().any(|(w, _)| *w < 0.0) {
                return Err(MeasureError::MixtureWeightSum { step: k, sum });
            }
            for (_, m) in step {
                match dim {
                    None => dim = Some(m.dim()),
                    Some(d) if d != m.dim() => {
                        return Err(MeasureError::DimensionMismatch {
                            left: d,
                            right: m.dim(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { grid, steps })
    }

    /// Dirac steps `delta_{m_k}` from one measure per step.
    pub fn dirac(grid: Vec<f64>, measures: Vec<DiscreteMeasure>) -> Result<Self, MeasureError> {
        let steps = measures.into_iter().map(|m| vec![(1.0, m)]).collect();
        Self::new(grid, steps)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn steps(&self) -> &[MixtureStep] {
        &self.steps
    }

    pub fn step(&self, k: usize) -> &MixtureStep {
        &self.steps[k]
    }

    pub fn dim(&self) -> usize {
        self.steps[0][0].1.dim()
    }

    /// Applies `f` to every component measure, preserving mixture weights.
    pub fn map_components(
        &self,
        mut f: impl FnMut(usize, &DiscreteMeasure) -> Result<DiscreteMeasure, MeasureError>,
    ) -> Result<RelaxedControlPath, MeasureError> {
        let steps = self
            .steps
            .iter()
            .enumerate()
            .map(|(k, step)| {
                step.iter()
                    .map(|(w, m)| Ok((*w, f(k, m)?)))
                    .collect::<Result<MixtureStep, MeasureError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        RelaxedControlPath::new(self.grid.clone(), steps)
    }
}

/// A discretized common-noise trajectory: Brownian increments per grid step.
/// `ell = 0` (no common noise) is represented by empty increment vectors.
#[derive(Debug, Clone)]
pub struct CommonNoisePath {
    grid: Vec<f64>,
    ell: usize,
    /// Flat `K x ell` increments.
    increments: Vec<f64>,
    /// Flat `(K+1) x ell` cumulative values, `B_0 = 0`.
    nodes: Vec<f64>,
}

impl CommonNoisePath {
    pub fn new(grid: Vec<f64>, ell: usize, increments: Vec<f64>) -> Result<Self, MeasureError> {
        validate_grid(&grid)?;
        let steps = grid.len() - 1;
        if increments.len() != steps * ell {
            return Err(MeasureError::IncrementCount {
                got: if ell == 0 { increments.len() } else { increments.len() / ell },
                expected: steps,
            });
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite { index: 0 });
        }
        let mut nodes = vec![0.0; (steps + 1) * ell];
        for k in 0..steps {
            for j in 0..ell {
                nodes[(k + 1) * ell + j] = nodes[k * ell + j] + increments[k * ell + j];
            }
        }
        Ok(Self {
            grid,
            ell,
            increments,
            nodes,
        })
    }

    /// The zero path (used when `ell = 0` or for frozen-noise runs).
    pub fn zero(grid: Vec<f64>, ell: usize) -> Result<Self, MeasureError> {
        let steps = grid.len() - 1;
        Self::new(grid, ell, vec![0.0; steps * ell])
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    /// Increment over step `k`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.ell..(k + 1) * self.ell]
    }

    /// Value `B_{t_k}` at node `k`.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.ell..(k + 1) * self.ell]
    }
}

/// Defect report for the marginal constraint `Lambda_t(Z_{mu_t}) = 1`.
#[derive(Debug, Clone)]
pub struct MarginalReport {
    /// Max transport defect per step, over mixture components.
    pub per_step: Vec<f64>,
    pub max_defect: f64,
    pub violated: bool,
}

/// Checks, step by step, how far the state marginals of a relaxed control's
/// mixture components sit from the prescribed measure path, in `W_p`.
pub fn check_marginal_constraint(
    lambda: &RelaxedControlPath,
    mu: &MeasurePath,
    p: f64,
    tol: f64,
) -> Result<MarginalReport, MeasureError> {
    if !grids_equal(lambda.grid(), mu.grid()) {
        return Err(MeasureError::GridMismatch {
            detail: "relaxed control vs measure path".into(),
        });
    }
    let n = mu.dim();
    let mut per_step = Vec::with_capacity(lambda.steps().len());
    for (k, step) in lambda.steps().iter().enumerate() {
        let target = mu.node(k);
        let mut worst = 0.0f64;
        for (_, m) in step {
            let marg = m.marginal_state(n)?;
            let d = wasserstein_auto(p, &marg, target)?;
            worst = worst.max(d);
        }
        per_step.push(worst);
    }
    let max_defect = per_step.iter().cloned().fold(0.0, f64::max);
    Ok(MarginalReport {
        per_step,
        max_defect,
        violated: max_defect > tol,
    })
}

#[cfg(test)]
mod tests;
