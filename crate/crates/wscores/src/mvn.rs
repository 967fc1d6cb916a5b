//! Multivariate normal rectangle probabilities and the analytic derivatives
//! of bivariate rectangles.
//!
//! Dispatch: dimension 1 and 2 are closed form (up to the bivariate cdf);
//! nonnegative equicorrelated matrices reduce to a 1-D integral over the
//! common latent factor; dimension 3 uses the deterministic Plackett
//! reduction of the trivariate cdf; everything else is randomized
//! quasi-Monte Carlo with a separation-of-variables transform and a
//! Richtmyer lattice.

use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;
use crate::quad::rule16;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Latent rectangle with its correlation matrix. Bounds may be infinite;
/// `lower[j] < upper[j]` must hold strictly.
#[derive(Debug, Clone)]
pub struct Rectangle {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub corr: Array2<f64>,
}

impl Rectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, corr: Array2<f64>) -> Result<Self> {
        let d = lower.len();
        if upper.len() != d || corr.nrows() != d || corr.ncols() != d {
            return Err(Error::Config("rectangle dimensions disagree".into()));
        }
        for j in 0..d {
            if lower[j] >= upper[j] || lower[j].is_nan() || upper[j].is_nan() {
                return Err(Error::Config(format!(
                    "rectangle bound {j} is empty: [{}, {}]",
                    lower[j], upper[j]
                )));
            }
            if (corr[[j, j]] - 1.0).abs() > 1e-12 {
                return Err(Error::Config("correlation diagonal must be 1".into()));
            }
        }
        Ok(Rectangle {
            lower,
            upper,
            corr,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

/// Which cutpoint of a coordinate a derivative refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

/// Bivariate rectangle probability from four bivariate cdf evaluations.
pub fn bvn_rectangle(l1: f64, u1: f64, l2: f64, u2: f64, rho: f64) -> f64 {
    let p = normal::bvn_cdf(u1, u2, rho) - normal::bvn_cdf(l1, u2, rho)
        - normal::bvn_cdf(u1, l2, rho)
        + normal::bvn_cdf(l1, l2, rho);
    p.clamp(0.0, 1.0)
}

/// Derivative of the bivariate rectangle probability with respect to rho
/// (Plackett's identity applied at the four corners; infinite corners
/// contribute zero).
pub fn bvn_rectangle_drho(l1: f64, u1: f64, l2: f64, u2: f64, rho: f64) -> f64 {
    normal::bvn_pdf(u1, u2, rho) - normal::bvn_pdf(l1, u2, rho) - normal::bvn_pdf(u1, l2, rho)
        + normal::bvn_pdf(l1, l2, rho)
}

/// Derivative of the bivariate rectangle probability with respect to one of
/// its cutpoints. `which` selects the coordinate (0 or 1). Errors if the
/// named bound is infinite (the derivative is zero there by convention and
/// callers short-circuit that case).
pub fn bvn_rectangle_dmargin(
    l1: f64,
    u1: f64,
    l2: f64,
    u2: f64,
    rho: f64,
    which: usize,
    bound: Bound,
) -> Result<f64> {
    let (z, other_lo, other_hi) = match (which, bound) {
        (0, Bound::Lower) => (l1, l2, u2),
        (0, Bound::Upper) => (u1, l2, u2),
        (1, Bound::Lower) => (l2, l1, u1),
        (1, Bound::Upper) => (u2, l1, u1),
        _ => return Err(Error::Config("margin index must be 0 or 1".into())),
    };
    if !z.is_finite() {
        return Err(Error::Config(
            "derivative requested at an infinite cutpoint".into(),
        ));
    }
    let s = (1.0 - rho * rho).max(1e-300).sqrt();
    let upper_arg = if other_hi == f64::INFINITY {
        1.0
    } else {
        normal::cdf((other_hi - rho * z) / s)
    };
    let lower_arg = if other_lo == f64::NEG_INFINITY {
        0.0
    } else {
        normal::cdf((other_lo - rho * z) / s)
    };
    let slice = normal::pdf(z) * (upper_arg - lower_arg);
    Ok(match bound {
        Bound::Upper => slice,
        Bound::Lower => -slice,
    })
}

/// Trivariate rectangle probability by inclusion-exclusion over the corners
/// of the box; infinite coordinates reduce the dimension inside `tvn_cdf`.
pub fn tvn_rectangle(lower: &[f64], upper: &[f64], r21: f64, r31: f64, r32: f64) -> f64 {
    debug_assert_eq!(lower.len(), 3);
    let mut p = 0.0;
    for mask in 0..8u32 {
        let pick = |j: usize| {
            if mask & (1 << j) != 0 {
                lower[j]
            } else {
                upper[j]
            }
        };
        let corner = [pick(0), pick(1), pick(2)];
        if corner.contains(&f64::NEG_INFINITY) {
            continue;
        }
        let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        p += sign * normal::tvn_cdf(corner, r21, r31, r32);
    }
    p.clamp(0.0, 1.0)
}

/// Rectangle probability for a nonnegative equicorrelated matrix via the 1-D
/// reduction over the shared latent factor:
/// integral of phi(t) * prod_j [Phi((u_j - sqrt(rho) t) / sqrt(1 - rho))
///                              - Phi((l_j - sqrt(rho) t) / sqrt(1 - rho))].
pub fn mvn_rectangle_exchangeable(lower: &[f64], upper: &[f64], rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Integration(format!(
            "equicorrelated reduction needs rho in [0, 1), got {rho}"
        )));
    }
    debug_assert_eq!(lower.len(), upper.len());
    if rho < 1e-14 {
        let mut p = 1.0;
        for (l, u) in lower.iter().zip(upper) {
            p *= (normal::cdf(*u) - normal::cdf(*l)).max(0.0);
        }
        return Ok(p);
    }
    let sr = rho.sqrt();
    let s = (1.0 - rho).sqrt();
    let rule = rule16();
    let value = rule.integrate_panels(-8.5, 8.5, 12, |t| {
        let mut prod = normal::pdf(t);
        for (l, u) in lower.iter().zip(upper) {
            let hi = if *u == f64::INFINITY {
                1.0
            } else {
                normal::cdf((u - sr * t) / s)
            };
            let lo = if *l == f64::NEG_INFINITY {
                0.0
            } else {
                normal::cdf((l - sr * t) / s)
            };
            prod *= (hi - lo).max(0.0);
            if prod == 0.0 {
                break;
            }
        }
        prod
    });
    Ok(value.clamp(0.0, 1.0))
}

/// Sampling budget for the randomized quasi-Monte Carlo path.
#[derive(Debug, Clone)]
pub struct QmcBudget {
    pub randomizations: usize,
    pub points: usize,
    pub escalations: usize,
    pub target_se: f64,
}

impl Default for QmcBudget {
    fn default() -> Self {
        QmcBudget {
            randomizations: 8,
            points: 4096,
            escalations: 2,
            target_se: 1e-5,
        }
    }
}

/// A QMC estimate with its randomization standard error.
#[derive(Debug, Clone, Copy)]
pub struct QmcEstimate {
    pub value: f64,
    pub std_err: f64,
    pub converged: bool,
}

const PRIMES: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];

/// Randomized QMC estimate of a general rectangle probability, deterministic
/// given the seed. The lattice size escalates by a factor of four (up to
/// `escalations` times) until the standard error meets `target_se`; if the
/// budget is exhausted the estimate is returned with `converged = false`.
pub fn mvn_rectangle_general(rect: &Rectangle, seed: u64, budget: &QmcBudget) -> Result<QmcEstimate> {
    let d = rect.dim();
    if d > 8 {
        return Err(Error::Integration(format!(
            "QMC rectangle probabilities support dimension <= 8, got {d}"
        )));
    }
    if d == 1 {
        let value = (normal::cdf(rect.upper[0]) - normal::cdf(rect.lower[0])).max(0.0);
        return Ok(QmcEstimate {
            value,
            std_err: 0.0,
            converged: true,
        });
    }
    let chol = linalg::cholesky(&rect.corr).ok_or_else(|| {
        Error::Integration("correlation matrix is not positive definite".into())
    })?;
    let gen: Vec<f64> = PRIMES[..d - 1].iter().map(|p| p.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = budget.points;
    let mut best = QmcEstimate {
        value: 0.0,
        std_err: f64::INFINITY,
        converged: false,
    };
    for _round in 0..=budget.escalations {
        let mut means = Vec::with_capacity(budget.randomizations);
        for _ in 0..budget.randomizations {
            let shift: Vec<f64> = (0..d - 1).map(|_| rng.random::<f64>()).collect();
            let mut acc = 0.0;
            for k in 1..=points {
                let kf = k as f64;
                let mut w = [0.0f64; 7];
                for (j, (g, s)) in gen.iter().zip(&shift).enumerate() {
                    let x = (kf * g + s).fract();
                    w[j] = (2.0 * x - 1.0).abs();
                }
                acc += transformed_integrand(rect, &chol, &w[..d - 1]);
            }
            means.push(acc / points as f64);
        }
        let m = budget.randomizations as f64;
        let mean = means.iter().sum::<f64>() / m;
        let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        best = QmcEstimate {
            value: mean.clamp(0.0, 1.0),
            std_err: se,
            converged: se <= budget.target_se,
        };
        if best.converged {
            break;
        }
        points *= 4;
    }
    Ok(best)
}

/// Genz separation-of-variables integrand: one evaluation per QMC point.
fn transformed_integrand(rect: &Rectangle, chol: &Array2<f64>, w: &[f64]) -> f64 {
    let d = rect.dim();
    let mut y = [0.0f64; 8];
    let clamp = |u: f64| u.clamp(1e-16, 1.0 - 1e-16);
    let mut lo = norm_cdf_scaled(rect.lower[0], 0.0, chol[[0, 0]]);
    let mut hi = norm_cdf_scaled(rect.upper[0], 0.0, chol[[0, 0]]);
    let mut f = (hi - lo).max(0.0);
    for j in 1..d {
        if f == 0.0 {
            return 0.0;
        }
        let u = lo + w[j - 1] * (hi - lo);
        y[j - 1] = normal::inverse_cdf(clamp(u));
        let mut t = 0.0;
        for (m, ym) in y.iter().enumerate().take(j) {
            t += chol[[j, m]] * ym;
        }
        lo = norm_cdf_scaled(rect.lower[j], t, chol[[j, j]]);
        hi = norm_cdf_scaled(rect.upper[j], t, chol[[j, j]]);
        f *= (hi - lo).max(0.0);
    }
    f
}

#[inline]
fn norm_cdf_scaled(bound: f64, shift: f64, scale: f64) -> f64 {
    if bound == f64::INFINITY {
        1.0
    } else if bound == f64::NEG_INFINITY {
        0.0
    } else {
        normal::cdf((bound - shift) / scale)
    }
}

/// Rectangle probability with automatic method dispatch. The seed only
/// matters when the QMC path is taken.
pub fn mvn_rectangle(rect: &Rectangle, seed: u64) -> Result<f64> {
    let d = rect.dim();
    match d {
        1 => Ok((normal::cdf(rect.upper[0]) - normal::cdf(rect.lower[0])).max(0.0)),
        2 => Ok(bvn_rectangle(
            rect.lower[0],
            rect.upper[0],
            rect.lower[1],
            rect.upper[1],
            rect.corr[[0, 1]],
        )),
        _ => {
            if let Some(rho) = equicorrelation(&rect.corr) {
                if rho >= 0.0 {
                    return mvn_rectangle_exchangeable(&rect.lower, &rect.upper, rho);
                }
            }
            if d == 3 {
                Ok(tvn_rectangle(
                    &rect.lower,
                    &rect.upper,
                    rect.corr[[1, 0]],
                    rect.corr[[2, 0]],
                    rect.corr[[2, 1]],
                ))
            } else {
                Ok(mvn_rectangle_general(rect, seed, &QmcBudget::default())?.value)
            }
        }
    }
}

/// The common off-diagonal value if the matrix is equicorrelated.
fn equicorrelation(corr: &Array2<f64>) -> Option<f64> {
    let d = corr.nrows();
    let first = corr[[1, 0]];
    for i in 0..d {
        for j in 0..i {
            if (corr[[i, j]] - first).abs() > 1e-13 {
                return None;
            }
        }
    }
    Some(first)
}
