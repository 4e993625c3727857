//! p-Wasserstein distances between atom clouds.
//!
//! Two exact regimes are supported: optimal assignment between equal-size
//! uniform clouds in any dimension, and the quantile coupling between
//! one-dimensional clouds with arbitrary weights. General unequal-weight
//! multidimensional transport is deliberately out of scope.

use super::assignment::min_cost_assignment;
use super::{DiscreteMeasure, MeasurePath};
use crate::error::MeasureError;

/// Which exact transport formulation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    /// Linear assignment between equal-size uniform clouds.
    ExactAssignment,
    /// Quantile (CDF) coupling, dimension 1 only, arbitrary weights.
    Sorted1d,
}

fn ground_cost(a: &[f64], b: &[f64], p: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2.sqrt().powf(p)
}

/// Total order on measures used to canonicalize argument order, making the
/// distance exactly symmetric (the solver's summation order then never
/// depends on which argument came first).
fn canonical_le(a: &DiscreteMeasure, b: &DiscreteMeasure) -> bool {
    let by_coords = a
        .coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne());
    match by_coords {
        Some(o) => o.is_lt(),
        None => match a.coords().len().cmp(&b.coords().len()) {
            std::cmp::Ordering::Equal => a
                .weights()
                .iter()
                .zip(b.weights())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .map_or(true, |o| o.is_lt()),
            o => o.is_lt(),
        },
    }
}

/// `W_p(mu, nu)` in the requested mode.
pub fn wasserstein(
    p: f64,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    mode: TransportMode,
) -> Result<f64, MeasureError> {
    if p < 1.0 {
        return Err(MeasureError::InvalidOrder { p });
    }
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch {
            left: mu.dim(),
            right: nu.dim(),
        });
    }
    let (mu, nu) = if canonical_le(mu, nu) { (mu, nu) } else { (nu, mu) };
    match mode {
        TransportMode::ExactAssignment => {
            if mu.len() != nu.len() {
                return Err(MeasureError::AssignmentPrecondition {
                    detail: format!("{} vs {} atoms", mu.len(), nu.len()),
                });
            }
            if !mu.is_uniform() || !nu.is_uniform() {
                return Err(MeasureError::AssignmentPrecondition {
                    detail: "weights are not uniform".into(),
                });
            }
            let n = mu.len();
            let (_, total) = min_cost_assignment(n, |i, j| ground_cost(mu.point(i), nu.point(j), p));
            Ok((total.max(0.0) / n as f64).powf(1.0 / p))
        }
        TransportMode::Sorted1d => {
            if mu.dim() != 1 {
                return Err(MeasureError::QuantilePrecondition { dim: mu.dim() });
            }
            Ok(quantile_distance(p, mu, nu))
        }
    }
}

/// Picks an exact mode automatically: quantile coupling in dimension 1,
/// otherwise optimal assignment when both clouds are equal-size uniform.
pub fn wasserstein_auto(
    p: f64,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<f64, MeasureError> {
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch {
            left: mu.dim(),
            right: nu.dim(),
        });
    }
    if mu.dim() == 1 {
        return wasserstein(p, mu, nu, TransportMode::Sorted1d);
    }
    if mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform() {
        return wasserstein(p, mu, nu, TransportMode::ExactAssignment);
    }
    Err(MeasureError::UnsupportedTransport {
        dim: mu.dim(),
        left: mu.len(),
        right: nu.len(),
        uniform: mu.is_uniform() && nu.is_uniform(),
    })
}

/// 1D quantile coupling: walk both weight profiles in coordinate order and
/// pay `|x - y|^p` per unit of shared mass.
fn quantile_distance(p: f64, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let sorted = |m: &DiscreteMeasure| {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        idx.sort_by(|&a, &b| m.point(a)[0].total_cmp(&m.point(b)[0]));
        idx
    };
    let ia = sorted(mu);
    let ib = sorted(nu);
    let mut cost = 0.0;
    let (mut a, mut b) = (0usize, 0usize);
    let mut wa = mu.weight(ia[0]);
    let mut wb = nu.weight(ib[0]);
    loop {
        let shared = wa.min(wb);
        if shared > 0.0 {
            let xa = mu.point(ia[a])[0];
            let xb = nu.point(ib[b])[0];
            cost += shared * (xa - xb).abs().powf(p);
        }
        wa -= shared;
        wb -= shared;
        if wa <= 0.0 {
            a += 1;
            if a >= ia.len() {
                break;
            }
            wa = mu.weight(ia[a]);
        }
        if wb <= 0.0 {
            b += 1;
            if b >= ib.len() {
                break;
            }
            wb = nu.weight(ib[b]);
        }
    }
    cost.max(0.0).powf(1.0 / p)
}

/// Sup over shared grid nodes of the nodewise `W_p`, the discrete analogue of
/// the uniform Wasserstein distance between measure paths.
pub fn path_distance(p: f64, a: &MeasurePath, b: &MeasurePath) -> Result<f64, MeasureError> {
    if a.grid().len() != b.grid().len() || a.grid().iter().zip(b.grid()).any(|(x, y)| x != y) {
        return Err(MeasureError::GridMismatch {
            detail: "path grids differ".into(),
        });
    }
    if a.dim() != b.dim() {
        return Err(MeasureError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mut worst = 0.0f64;
    for k in 0..a.len() {
        worst = worst.max(wasserstein_auto(p, a.node(k), b.node(k))?);
    }
    Ok(worst)
}
