//! Parametric latent-correlation structures and their expansion to
//! per-cluster correlation matrices.
//!
//! Occasion indices are 1-based; AR(1) entries use the lag |j - k| of the
//! original occasion indices, so clusters with dropout keep the correct lags.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Margin of safety left between fitted parameters and their feasibility
/// boundary.
pub const BOUND_EPS: f64 = 1e-6;

/// Largest |rho| tolerated by the optimizers; bivariate probabilities degrade
/// numerically beyond this.
pub const RHO_CLAMP: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationStructure {
    Independence,
    Exchangeable,
    Ar1,
    Unstructured,
}

impl CorrelationStructure {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ind" => Ok(CorrelationStructure::Independence),
            "exch" => Ok(CorrelationStructure::Exchangeable),
            "ar1" => Ok(CorrelationStructure::Ar1),
            "unstr" => Ok(CorrelationStructure::Unstructured),
            other => Err(Error::Config(format!(
                "unknown correlation structure '{other}' (expected ind, exch, ar1, or unstr)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorrelationStructure::Independence => "ind",
            CorrelationStructure::Exchangeable => "exch",
            CorrelationStructure::Ar1 => "ar1",
            CorrelationStructure::Unstructured => "unstr",
        }
    }

    /// Number of dependence parameters for clusters of maximal size d.
    pub fn param_count(&self, d: usize) -> usize {
        match self {
            CorrelationStructure::Independence => 0,
            CorrelationStructure::Exchangeable | CorrelationStructure::Ar1 => 1,
            CorrelationStructure::Unstructured => d * (d - 1) / 2,
        }
    }
}

/// Index of the pair (j, k), 1 <= j < k <= d, in the flattened
/// upper-triangle ordering (1,2), (1,3), ..., (1,d), (2,3), ...
pub fn pair_index(j: usize, k: usize, d: usize) -> usize {
    debug_assert!(1 <= j && j < k && k <= d);
    (j - 1) * d - j * (j - 1) / 2 + (k - j) - 1
}

/// A correlation structure together with its parameter vector and the
/// maximal cluster size it serves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub structure: CorrelationStructure,
    pub params: Vec<f64>,
    pub d_max: usize,
}

impl CorrelationModel {
    pub fn new(structure: CorrelationStructure, params: Vec<f64>, d_max: usize) -> Result<Self> {
        let model = CorrelationModel {
            structure,
            params,
            d_max,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn independence(d_max: usize) -> Self {
        CorrelationModel {
            structure: CorrelationStructure::Independence,
            params: Vec::new(),
            d_max,
        }
    }

    /// Lower feasibility bound on the dependence parameter.
    pub fn lower_bound(&self) -> f64 {
        match self.structure {
            CorrelationStructure::Exchangeable => {
                if self.d_max > 1 {
                    -1.0 / (self.d_max as f64 - 1.0) + BOUND_EPS
                } else {
                    -RHO_CLAMP
                }
            }
            _ => -RHO_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.structure.param_count(self.d_max.max(2));
        if self.params.len() != expected {
            return Err(Error::Config(format!(
                "structure {} with d_max {} expects {} parameters, got {}",
                self.structure.name(),
                self.d_max,
                expected,
                self.params.len()
            )));
        }
        match self.structure {
            CorrelationStructure::Independence => Ok(()),
            CorrelationStructure::Exchangeable => {
                let rho = self.params[0];
                if rho >= 1.0 || rho <= self.lower_bound() - BOUND_EPS / 2.0 {
                    return Err(Error::InfeasibleCorrelation(format!(
                        "exchangeable rho {rho} outside ({:.6}, 1)",
                        self.lower_bound()
                    )));
                }
                Ok(())
            }
            CorrelationStructure::Ar1 => {
                let rho = self.params[0];
                if rho.abs() >= 1.0 {
                    return Err(Error::InfeasibleCorrelation(format!(
                        "ar1 rho {rho} outside (-1, 1)"
                    )));
                }
                Ok(())
            }
            CorrelationStructure::Unstructured => {
                if self.params.iter().any(|r| r.abs() >= 1.0) {
                    return Err(Error::InfeasibleCorrelation(
                        "unstructured entries must lie in (-1, 1)".into(),
                    ));
                }
                let full = self.expand_full();
                if linalg::cholesky(&full).is_none() {
                    return Err(Error::InfeasibleCorrelation(
                        "unstructured matrix is not positive definite".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Correlation between occasions j and k (1-based, j != k).
    pub fn rho(&self, j: usize, k: usize) -> f64 {
        debug_assert!(j != k);
        let (j, k) = if j < k { (j, k) } else { (k, j) };
        match self.structure {
            CorrelationStructure::Independence => 0.0,
            CorrelationStructure::Exchangeable => self.params[0],
            CorrelationStructure::Ar1 => self.params[0].powi((k - j) as i32),
            CorrelationStructure::Unstructured => self.params[pair_index(j, k, self.d_max)],
        }
    }

    /// Derivative of rho(j, k) with respect to each structure parameter;
    /// for the one-parameter structures this is the chain-rule factor of the
    /// structure map (1 for exchangeable, lag * rho^(lag-1) for AR(1)).
    pub fn drho_dparam(&self, j: usize, k: usize, param: usize) -> f64 {
        let (j, k) = if j < k { (j, k) } else { (k, j) };
        match self.structure {
            CorrelationStructure::Independence => 0.0,
            CorrelationStructure::Exchangeable => 1.0,
            CorrelationStructure::Ar1 => {
                let lag = (k - j) as f64;
                let rho = self.params[0];
                if lag == 1.0 {
                    1.0
                } else {
                    lag * rho.powi((k - j - 1) as i32)
                }
            }
            CorrelationStructure::Unstructured => {
                if pair_index(j, k, self.d_max) == param {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Full d_max x d_max matrix of the structure.
    pub fn expand_full(&self) -> Array2<f64> {
        let indices: Vec<usize> = (1..=self.d_max).collect();
        self.expand_unchecked(&indices)
    }

    /// Submatrix of the full-structure matrix for the given sorted, distinct,
    /// 1-based occasion indices.
    pub fn expand(&self, indices: &[usize]) -> Result<Array2<f64>> {
        if indices.windows(2).any(|w| w[0] >= w[1])
            || indices.iter().any(|&i| i == 0 || i > self.d_max)
        {
            return Err(Error::Config(format!(
                "occasion indices must be sorted, distinct, within 1..={}",
                self.d_max
            )));
        }
        self.validate()?;
        Ok(self.expand_unchecked(indices))
    }

    fn expand_unchecked(&self, indices: &[usize]) -> Array2<f64> {
        let m = indices.len();
        let mut r = Array2::eye(m);
        for a in 0..m {
            for b in a + 1..m {
                let v = self.rho(indices[a], indices[b]);
                r[[a, b]] = v;
                r[[b, a]] = v;
            }
        }
        r
    }

    /// Whether the matrix over the given occasions is equicorrelated with a
    /// common nonnegative parameter (enables the 1-D integral reduction).
    pub fn is_nonneg_equicorrelated(&self, indices: &[usize]) -> Option<f64> {
        match self.structure {
            CorrelationStructure::Independence => Some(0.0),
            CorrelationStructure::Exchangeable if self.params[0] >= 0.0 => Some(self.params[0]),
            CorrelationStructure::Ar1 | CorrelationStructure::Unstructured
                if indices.len() == 2 =>
            {
                let v = self.rho(indices[0], indices[1]);
                (v >= 0.0).then_some(v)
            }
            _ => None,
        }
    }
}

/// Shrink a symmetric matrix toward the identity by the smallest factor that
/// restores a minimum eigenvalue of at least `floor`. Returns the shrinkage
/// factor actually applied (0 when no projection was needed).
pub fn project_positive_definite(r: &mut Array2<f64>, floor: f64) -> f64 {
    if linalg::min_eig_at_least(r, floor) {
        return 0.0;
    }
    let n = r.nrows();
    let blend = |s: f64, r: &Array2<f64>| -> Array2<f64> {
        let mut out = r * (1.0 - s);
        for i in 0..n {
            out[[i, i]] += s;
        }
        out
    };
    // Bisection on the shrinkage factor.
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if linalg::min_eig_at_least(&blend(mid, r), floor) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    *r = blend(hi, r);
    hi
}
