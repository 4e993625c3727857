//! Compactly supported mollifier, kernel-smoothed densities, the conditional
//! control kernel and its inverse-CDF sampler, kernel-averaged Fokker-Planck
//! coefficients, and principal square roots of SPD matrices.
//!
//! The base profile is the quartic bump `G(x) = c_n (1 - |x|^2)^2` on the
//! unit ball. It is even, non-negative, C^1, integrates to one, and is cheap
//! to evaluate; nothing downstream exercises higher smoothness. Rescaling is
//! `G_eps(x) = eps^-n G(x / eps)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::measures::{DiscreteMeasure, MeasurePathView, MixtureStep};
use crate::problem::{CoeffArgs, ProblemSpec};

#[derive(Debug, Error, Clone)]
pub enum MollifyError {
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("no atom carries kernel mass at the query point (bandwidth {eps})")]
    ZeroMass { eps: f64 },
    #[error("matrix is not symmetric positive definite (lambda_min {lambda_min:e}, lambda_max {lambda_max:e})")]
    NotSpd { lambda_min: f64, lambda_max: f64 },
    #[error("matrix is not symmetric within tolerance (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("measure dim {dim} does not split as state {state_dim} + control")]
    InvalidSplit { dim: usize, state_dim: usize },
}

/// Gamma function at half-integer arguments: `gamma(half / 2)`.
fn gamma_of_half(half: usize) -> f64 {
    assert!(half >= 1);
    let mut value = if half % 2 == 0 {
        1.0
    } else {
        std::f64::consts::PI.sqrt()
    };
    let mut z = if half % 2 == 0 { 1.0 } else { 0.5 };
    while z + 1e-9 < half as f64 / 2.0 {
        value *= z;
        z += 1.0;
    }
    value
}

/// Normalizing constant of the quartic bump in dimension `n`.
///
/// The radial reduction of the integral is exact: the angular factor is the
/// unit-sphere area and the radial polynomial integrates in closed form, so
/// no quadrature is needed. Tests confirm the normalization by tensor
/// quadrature.
fn bump_normalizer(n: usize) -> f64 {
    let sphere_area = 2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / gamma_of_half(n);
    // integral_0^1 (1 - r^2)^2 r^(n-1) dr
    let nf = n as f64;
    let radial = 1.0 / nf - 2.0 / (nf + 2.0) + 1.0 / (nf + 4.0);
    1.0 / (sphere_area * radial)
}

/// The rescaled quartic bump `G_eps` in a fixed state dimension.
#[derive(Debug, Clone)]
pub struct Mollifier {
    eps: f64,
    state_dim: usize,
    normalizer: f64,
}

impl Mollifier {
    pub fn new(eps: f64, state_dim: usize) -> Result<Self, MollifyError> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(MollifyError::BadBandwidth(eps));
        }
        assert!(state_dim >= 1);
        Ok(Self {
            eps,
            state_dim,
            normalizer: bump_normalizer(state_dim),
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `G_eps(z)` for a displacement `z`.
    pub fn eval(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.state_dim);
        let r2: f64 = z.iter().map(|c| (c / self.eps) * (c / self.eps)).sum();
        if r2 >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - r2;
        self.normalizer * s * s / self.eps.powi(self.state_dim as i32)
    }

    /// `G_eps(x - y)` for points given separately.
    pub fn eval_diff(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let d = (a - b) / self.eps;
                d * d
            })
            .sum();
        if r2 >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - r2;
        self.normalizer * s * s / self.eps.powi(self.state_dim as i32)
    }
}

/// Atom ids of `m` whose state block can carry kernel mass at `x`: the
/// kernel support forces `|x_0 - y_0| < eps`, so a first-coordinate window
/// over the sorted index suffices in any dimension.
pub(crate) fn support_window<'a>(m: &'a DiscreteMeasure, eps: f64, x0: f64) -> &'a [u32] {
    let (start, end) = m.first_coord_window(x0 - eps, x0 + eps);
    &m.first_coord_order()[start..end]
}

/// Kernel-smoothed density `m^(eps)(x) = sum_i w_i G_eps(x - y_i)` where the
/// `y_i` are the state blocks of the atoms of `m` (the leading `x.len()`
/// coordinates).
pub fn smoothed_density(m: &DiscreteMeasure, eps: f64, x: &[f64]) -> Result<f64, MollifyError> {
    let state_dim = x.len();
    if m.dim() < state_dim || state_dim == 0 {
        return Err(MollifyError::InvalidSplit {
            dim: m.dim(),
            state_dim,
        });
    }
    let g = Mollifier::new(eps, state_dim)?;
    Ok(support_window(m, eps, x[0])
        .iter()
        .map(|&id| {
            let i = id as usize;
            m.weight(i) * g.eval_diff(x, &m.point(i)[..state_dim])
        })
        .sum())
}

/// Self-normalized kernel weights `w_i G_eps(x - y_i) / m^(eps)(x)` over the
/// atoms of `m`, aligned with the atom indexing (zero outside the kernel
/// support). Errors with `ZeroMass` when no atom's state lies within `eps`
/// of `x`.
pub fn kernel_weights(
    m: &DiscreteMeasure,
    eps: f64,
    x: &[f64],
) -> Result<Vec<f64>, MollifyError> {
    let state_dim = x.len();
    if m.dim() < state_dim || state_dim == 0 {
        return Err(MollifyError::InvalidSplit {
            dim: m.dim(),
            state_dim,
        });
    }
    let g = Mollifier::new(eps, state_dim)?;
    let window = support_window(m, eps, x[0]);
    let mut weights = vec![0.0; m.len()];
    let mut total = 0.0;
    for &id in window {
        let i = id as usize;
        let w = m.weight(i) * g.eval_diff(x, &m.point(i)[..state_dim]);
        weights[i] = w;
        total += w;
    }
    if !(total > 0.0) {
        return Err(MollifyError::ZeroMass { eps });
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// The conditional control distribution at state `x` induced by the joint
/// state-control measure `m`: atoms are the control blocks `u_i`, weights are
/// the self-normalized kernel weights at `x`.
pub fn conditional_kernel(
    x: &[f64],
    m: &DiscreteMeasure,
    eps: f64,
) -> Result<DiscreteMeasure, MollifyError> {
    let state_dim = x.len();
    if m.dim() <= state_dim {
        return Err(MollifyError::InvalidSplit {
            dim: m.dim(),
            state_dim,
        });
    }
    let weights = kernel_weights(m, eps, x)?;
    let control_dim = m.dim() - state_dim;
    let mut coords = Vec::with_capacity(weights.len() * control_dim);
    for (p, _) in m.iter() {
        coords.extend_from_slice(&p[state_dim..]);
    }
    DiscreteMeasure::from_flat(control_dim, coords, weights)
        .map_err(|_| MollifyError::ZeroMass { eps })
}

/// Inverse-CDF draw from [`conditional_kernel`] under the fixed lexicographic
/// order on control atoms: returns the first atom (in that order) whose
/// cumulative weight reaches `v`. Deterministic in `(x, m, eps, v)`.
pub fn sample_control(
    x: &[f64],
    m: &DiscreteMeasure,
    eps: f64,
    v: f64,
) -> Result<Vec<f64>, MollifyError> {
    let kernel = conditional_kernel(x, m, eps)?;
    let mut order: Vec<usize> = (0..kernel.len()).collect();
    order.sort_by(|&a, &b| {
        kernel
            .point(a)
            .iter()
            .zip(kernel.point(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let v = v.clamp(0.0, 1.0);
    let mut cum = 0.0;
    let mut last_positive = None;
    for &i in &order {
        let w = kernel.weight(i);
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last_positive = Some(i);
        if cum >= v {
            return Ok(kernel.point(i).to_vec());
        }
    }
    // Rounding can leave cum fractionally below 1; fall back to the last
    // mass-carrying atom.
    Ok(kernel.point(last_positive.expect("kernel has positive mass")).to_vec())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Quadratically
/// convergent and accurate to a few ulps, which the square-root
/// reconstruction bound (1e-10 relative) actually requires; it is also
/// cheaper than a general QR eigensolver at the small dimensions used in the
/// simulation inner loop.
pub(crate) fn symmetric_jacobi_eigen(mat: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = mat.nrows();
    let mut a = mat.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    if n == 1 {
        return (v, DVector::from_element(1, a[(0, 0)]));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = c * apj - s * aqj;
                    a[(q, j)] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    (v, DVector::from_iterator(n, (0..n).map(|i| a[(i, i)])))
}

/// A symmetric positive definite matrix, stored together with its
/// eigendecomposition so square roots come at no extra factorization cost.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

/// Relative eigenvalue floor below which a matrix is rejected as not SPD.
const SPD_RELATIVE_FLOOR: f64 = 1e-12;

impl SpdMatrix {
    /// Validates symmetry (entrywise within `1e-12` relative to the matrix
    /// scale) and strict positive definiteness.
    pub fn new(mat: DMatrix<f64>) -> Result<Self, MollifyError> {
        assert_eq!(mat.nrows(), mat.ncols());
        let scale = mat.amax().max(1.0);
        let mut asym = 0.0f64;
        for i in 0..mat.nrows() {
            for j in (i + 1)..mat.ncols() {
                asym = asym.max((mat[(i, j)] - mat[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(MollifyError::NotSymmetric(asym));
        }
        let sym = (&mat + mat.transpose()) * 0.5;
        let (eigvecs, eigvals) = symmetric_jacobi_eigen(&sym);
        let lambda_min = eigvals.iter().cloned().fold(f64::INFINITY, f64::min);
        let lambda_max = eigvals.iter().map(|l| l.abs()).fold(0.0f64, f64::max);
        if lambda_min <= SPD_RELATIVE_FLOOR * lambda_max || !(lambda_min > 0.0) {
            return Err(MollifyError::NotSpd {
                lambda_min,
                lambda_max,
            });
        }
        Ok(Self {
            mat: sym,
            eigvecs,
            eigvals,
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigvals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SpdMatrix {
        let vals = self.eigvals.map(f);
        let mut scaled = self.eigvecs.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= vals[j];
        }
        let mat = &scaled * self.eigvecs.transpose();
        let sym = (&mat + mat.transpose()) * 0.5;
        SpdMatrix {
            mat: sym,
            eigvecs: self.eigvecs.clone(),
            eigvals: vals,
        }
    }
}

/// The unique SPD matrix `B` with `B^2 = A`, from the symmetric
/// eigendecomposition of `A`.
pub fn principal_sqrt(a: &SpdMatrix) -> SpdMatrix {
    a.map_spectrum(f64::sqrt)
}

/// `A^{-1/2}`, computed on the same eigenbasis.
pub fn inv_principal_sqrt(a: &SpdMatrix) -> SpdMatrix {
    a.map_spectrum(|l| 1.0 / l.sqrt())
}

/// Kernel-weighted Fokker-Planck coefficients at `(t, x)`:
///
/// `bhat(x) = sum_j wt_j sum_i khat_i(x) b(t, y_i, pi, m_j, u_i)` and the
/// analogous average of `sigma sigma^T`, where `khat` are the self-normalized
/// kernel weights of component `m_j` at `x`. Both averages are convex
/// combinations, so the diffusion matrix inherits the ellipticity floor of
/// `sigma sigma^T`.
pub fn mollified_coefficients(
    spec: &ProblemSpec,
    eps: f64,
    t: f64,
    x: &[f64],
    path: &MeasurePathView,
    q_step: &MixtureStep,
) -> Result<(Vec<f64>, SpdMatrix), MollifyError> {
    let n = spec.n;
    let mut bhat = vec![0.0; n];
    let mut ahat = DMatrix::<f64>::zeros(n, n);
    for (mix_weight, m) in q_step {
        let khat = kernel_weights(m, eps, x)?;
        for &id in support_window(m, eps, x[0]) {
            let i = id as usize;
            let k = mix_weight * khat[i];
            if k == 0.0 {
                continue;
            }
            let atom = m.point(i);
            let y = &atom[..n];
            let u = &atom[n..];
            let args = CoeffArgs {
                t,
                x: y,
                path,
                m,
                u,
            };
            let b = spec.drift_at(&args);
            let s = spec.vol_at(&args);
            let a = &s * s.transpose();
            for (acc, v) in bhat.iter_mut().zip(&b) {
                *acc += k * v;
            }
            ahat += a * k;
        }
    }
    let ahat = SpdMatrix::new(ahat)?;
    Ok((bhat, ahat))
}
