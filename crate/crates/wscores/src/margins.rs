//! Univariate GLM marginal models: Bernoulli (logit or probit link) and
//! Poisson (log link).
//!
//! Each family exposes the log-pmf, its derivative with respect to the
//! linear predictor (the score), the Fisher weight (negative expected second
//! derivative), the cdf, and the normal-scale cutpoints Phi^{-1}(F(y; nu))
//! that anchor latent rectangle probabilities.
//!
//! Means are clamped before logs and divisions: into [1e-12, 1 - 1e-12] for
//! Bernoulli and [1e-12, 1e12] for Poisson. Scores and weights are computed
//! from the clamped mean.

use crate::error::{Error, Result};
use crate::normal;
use crate::special::gamma_p_q;
use serde::{Deserialize, Serialize};

const MU_EPS: f64 = 1e-12;
const POISSON_MU_MAX: f64 = 1e12;

/// Default tail mass beyond which Poisson supports are truncated in
/// expectations: the support ends at the smallest y with F(y) >= 1 - tail.
pub const DEFAULT_POISSON_TAIL: f64 = 1e-9;

/// Marginal model family with its link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginFamily {
    /// Poisson counts with log link.
    PoissonLog,
    /// Bernoulli with logit link.
    BernoulliLogit,
    /// Bernoulli with probit link.
    BernoulliProbit,
}

impl MarginFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "poisson" | "poisson-log" => Ok(MarginFamily::PoissonLog),
            "logit" | "bernoulli-logit" => Ok(MarginFamily::BernoulliLogit),
            "probit" | "bernoulli-probit" => Ok(MarginFamily::BernoulliProbit),
            other => Err(Error::Config(format!(
                "unknown margin family '{other}' (expected poisson, logit, or probit)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MarginFamily::PoissonLog => "poisson",
            MarginFamily::BernoulliLogit => "logit",
            MarginFamily::BernoulliProbit => "probit",
        }
    }

    pub fn is_bernoulli(&self) -> bool {
        !matches!(self, MarginFamily::PoissonLog)
    }

    /// Whether y lies in the family's support.
    pub fn supports(&self, y: u64) -> bool {
        match self {
            MarginFamily::PoissonLog => true,
            _ => y <= 1,
        }
    }

    /// Mean mu = h^{-1}(nu), clamped away from the boundary.
    pub fn mean(&self, nu: f64) -> f64 {
        match self {
            MarginFamily::PoissonLog => nu.exp().clamp(MU_EPS, POISSON_MU_MAX),
            MarginFamily::BernoulliLogit => {
                let mu = if nu >= 0.0 {
                    1.0 / (1.0 + (-nu).exp())
                } else {
                    let e = nu.exp();
                    e / (1.0 + e)
                };
                mu.clamp(MU_EPS, 1.0 - MU_EPS)
            }
            MarginFamily::BernoulliProbit => normal::cdf(nu).clamp(MU_EPS, 1.0 - MU_EPS),
        }
    }

    /// Log-pmf at the observed response.
    pub fn log_pmf(&self, nu: f64, y: u64) -> Result<f64> {
        if !self.supports(y) {
            return Err(Error::UnsupportedResponse {
                y: y as i64,
                family: self.name().to_string(),
                row: 0,
            });
        }
        let mu = self.mean(nu);
        Ok(match self {
            MarginFamily::PoissonLog => {
                let yf = y as f64;
                yf * mu.ln() - mu - libm::lgamma(yf + 1.0)
            }
            _ => {
                if y == 1 {
                    mu.ln()
                } else {
                    (1.0 - mu).ln()
                }
            }
        })
    }

    /// Derivative of the log-pmf with respect to nu. Precondition: y in support.
    pub fn score(&self, nu: f64, y: u64) -> f64 {
        debug_assert!(self.supports(y));
        let mu = self.mean(nu);
        match self {
            MarginFamily::PoissonLog | MarginFamily::BernoulliLogit => y as f64 - mu,
            MarginFamily::BernoulliProbit => {
                let z = normal::inverse_cdf(mu);
                (y as f64 - mu) * normal::pdf(z) / (mu * (1.0 - mu))
            }
        }
    }

    /// Fisher weight: the negative expected second derivative of the log-pmf
    /// with respect to nu. Strictly positive.
    pub fn fisher_weight(&self, nu: f64) -> f64 {
        let mu = self.mean(nu);
        match self {
            MarginFamily::PoissonLog => mu,
            MarginFamily::BernoulliLogit => mu * (1.0 - mu),
            MarginFamily::BernoulliProbit => {
                let z = normal::inverse_cdf(mu);
                let phi = normal::pdf(z);
                phi * phi / (mu * (1.0 - mu))
            }
        }
    }

    /// Cdf F(y; nu); y < 0 returns 0.
    pub fn cdf(&self, y: i64, nu: f64) -> f64 {
        if y < 0 {
            return 0.0;
        }
        let mu = self.mean(nu);
        match self {
            MarginFamily::PoissonLog => gamma_p_q(y as f64 + 1.0, mu).1,
            _ => {
                if y >= 1 {
                    1.0
                } else {
                    1.0 - mu
                }
            }
        }
    }

    /// Normal-scale cutpoint z(y; nu) = Phi^{-1}(F(y; nu)).
    ///
    /// Returns -inf for y < 0. Both cdf branches are computed directly so the
    /// cutpoint stays accurate deep in either tail.
    pub fn cutpoint(&self, y: i64, nu: f64) -> f64 {
        if y < 0 {
            return f64::NEG_INFINITY;
        }
        let mu = self.mean(nu);
        match self {
            MarginFamily::PoissonLog => {
                let (upper_tail, f) = gamma_p_q(y as f64 + 1.0, mu);
                if f <= 0.5 {
                    normal::inverse_cdf(f)
                } else {
                    -normal::inverse_cdf(upper_tail)
                }
            }
            _ => {
                if y >= 1 {
                    f64::INFINITY
                } else if mu <= 0.5 {
                    -normal::inverse_cdf(mu)
                } else {
                    normal::inverse_cdf(1.0 - mu)
                }
            }
        }
    }

    /// Derivative of the cdf with respect to nu (closed form).
    ///
    /// Equals sum_{k <= y} f1(k; nu) * score(k; nu): the Poisson sum
    /// telescopes to -mu * f1(y; nu), and the Bernoulli case is the
    /// derivative of 1 - mu at y = 0 and zero at y >= 1.
    pub fn dcdf_dnu(&self, y: i64, nu: f64) -> f64 {
        if y < 0 {
            return 0.0;
        }
        let mu = self.mean(nu);
        match self {
            MarginFamily::PoissonLog => {
                let yf = y as f64;
                let log_pmf = yf * mu.ln() - mu - libm::lgamma(yf + 1.0);
                -mu * log_pmf.exp()
            }
            MarginFamily::BernoulliLogit => {
                if y >= 1 {
                    0.0
                } else {
                    -mu * (1.0 - mu)
                }
            }
            MarginFamily::BernoulliProbit => {
                if y >= 1 {
                    0.0
                } else {
                    -normal::pdf(normal::inverse_cdf(mu))
                }
            }
        }
    }

    /// Derivative of the cutpoint z(y; nu) with respect to nu; zero when the
    /// cutpoint is infinite (the cdf is flat there).
    pub fn dcutpoint_dnu(&self, y: i64, nu: f64) -> f64 {
        let z = self.cutpoint(y, nu);
        if !z.is_finite() {
            return 0.0;
        }
        self.dcdf_dnu(y, nu) / normal::pdf(z)
    }

    /// Largest support point kept in truncated expectations: the smallest y*
    /// with F(y*) >= 1 - tail. Bernoulli margins always return 1.
    pub fn support_upper(&self, nu: f64, tail: f64) -> u64 {
        match self {
            MarginFamily::PoissonLog => {
                let mu = self.mean(nu);
                if self.cdf(0, nu) >= 1.0 - tail {
                    return 0;
                }
                let mut hi = (mu + 10.0 * mu.sqrt() + 10.0).ceil() as u64;
                while self.cdf(hi as i64, nu) < 1.0 - tail {
                    hi = hi.saturating_mul(2).max(hi + 8);
                    if hi > 100_000_000 {
                        break;
                    }
                }
                let mut lo = 0u64;
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    if self.cdf(mid as i64, nu) >= 1.0 - tail {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                hi
            }
            _ => 1,
        }
    }
}

/// Precomputed per-margin tables used by outcome-enumeration sums:
/// pmf, score, and rectangle cutpoints over the (possibly truncated) support.
#[derive(Debug, Clone)]
pub struct MarginGrid {
    /// pmf[y] for y = 0..=max_y.
    pub pmf: Vec<f64>,
    /// score[y] for y = 0..=max_y.
    pub score: Vec<f64>,
    /// cut[k] = z(k - 1; nu) for k = 0..=max_y + 1, so the latent rectangle
    /// of outcome y is (cut[y], cut[y + 1]).
    pub cut: Vec<f64>,
    /// d cut[k] / d nu, zero at infinite cutpoints.
    pub dcut: Vec<f64>,
}

impl MarginGrid {
    pub fn new(family: MarginFamily, nu: f64, tail: f64) -> Self {
        let max_y = family.support_upper(nu, tail);
        let n = max_y as usize + 1;
        let mu = family.mean(nu);
        let mut pmf = Vec::with_capacity(n);
        match family {
            MarginFamily::PoissonLog => {
                let mut p = (-mu).exp();
                // Guard against underflow for large mu: fall back to log form.
                if p == 0.0 {
                    for y in 0..n {
                        let lf = y as f64 * mu.ln() - mu - libm::lgamma(y as f64 + 1.0);
                        pmf.push(lf.exp());
                    }
                } else {
                    for y in 0..n {
                        pmf.push(p);
                        p *= mu / (y as f64 + 1.0);
                    }
                }
            }
            _ => {
                pmf.push(1.0 - mu);
                pmf.push(mu);
            }
        }
        let score = (0..pmf.len() as u64).map(|y| family.score(nu, y)).collect();
        let mut cut = Vec::with_capacity(pmf.len() + 1);
        let mut dcut = Vec::with_capacity(pmf.len() + 1);
        for k in 0..=pmf.len() as i64 {
            cut.push(family.cutpoint(k - 1, nu));
            dcut.push(family.dcutpoint_dnu(k - 1, nu));
        }
        MarginGrid {
            pmf,
            score,
            cut,
            dcut,
        }
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }
}
