//! The weighted-scores estimator.
//!
//! Univariate GLM scores are weighted per cluster by
//! W^{-1} = Delta * Omega^{-1}, where Delta holds the Fisher weights and
//! Omega is the covariance matrix of the score vector under the fitted
//! discretized-MVN working model. Solving the weighted equations gives the
//! final coefficients; their covariance is the sandwich built from the
//! empirical outer products of the score vectors.

use crate::cl1::{Cl1Fit, FitOptions};
use crate::corr::CorrelationModel;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::margins::{MarginFamily, MarginGrid};
use crate::normal;
use ndarray::{Array1, Array2};

/// Per-cluster working weight pieces.
#[derive(Debug, Clone)]
pub struct WorkingWeights {
    /// Fisher weights (the diagonal of Delta).
    pub delta: Vec<f64>,
    /// Covariance of the univariate scores under the working model.
    pub omega: Array2<f64>,
    /// Delta * Omega^{-1}.
    pub winv: Array2<f64>,
    /// Omega needed diagonal jitter before it factorized.
    pub jittered: bool,
}

/// Final weighted-scores estimates with the robust covariance.
#[derive(Debug, Clone)]
pub struct WeightedScoresFit {
    pub beta: Array1<f64>,
    /// Sandwich covariance of beta.
    pub cov: Array2<f64>,
    /// Square roots of the covariance diagonal.
    pub se: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// f2 cell probabilities of the product grid spanned by two cutpoint vectors:
/// cell (a, b) is the rectangle (cut_j[a], cut_j[a+1]) x (cut_k[b], cut_k[b+1]).
/// Built by differencing the bivariate cdf over the grid nodes.
pub(crate) fn bvn_cell_grid(cuts_j: &[f64], cuts_k: &[f64], rho: f64) -> Array2<f64> {
    let mj = cuts_j.len() - 1;
    let mk = cuts_k.len() - 1;
    let mut cdf = Array2::zeros((cuts_j.len(), cuts_k.len()));
    for (a, &zj) in cuts_j.iter().enumerate() {
        for (b, &zk) in cuts_k.iter().enumerate() {
            cdf[[a, b]] = normal::bvn_cdf(zj, zk, rho);
        }
    }
    let mut cells = Array2::zeros((mj, mk));
    for a in 0..mj {
        for b in 0..mk {
            let p = cdf[[a + 1, b + 1]] - cdf[[a, b + 1]] - cdf[[a + 1, b]] + cdf[[a, b]];
            cells[[a, b]] = p.max(0.0);
        }
    }
    cells
}

/// Covariance of the scores of two observations under the working model:
/// sum over both supports of s(y_j) s(y_k) f2(y_j, y_k). Means vanish because
/// the margins are the model's own.
pub fn score_cov_pair(
    family: MarginFamily,
    nu_j: f64,
    nu_k: f64,
    rho: f64,
    tail: f64,
) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let gj = MarginGrid::new(family, nu_j, tail);
    let gk = MarginGrid::new(family, nu_k, tail);
    let cells = bvn_cell_grid(&gj.cut, &gk.cut, rho);
    let mut acc = 0.0;
    for (a, &sa) in gj.score.iter().enumerate() {
        for (b, &sb) in gk.score.iter().enumerate() {
            acc += sa * sb * cells[[a, b]];
        }
    }
    acc
}

/// Score variance by support enumeration; equals the Fisher weight.
pub fn score_variance(family: MarginFamily, nu: f64, tail: f64) -> f64 {
    let g = MarginGrid::new(family, nu, tail);
    g.pmf
        .iter()
        .zip(&g.score)
        .map(|(p, s)| p * s * s)
        .sum()
}

/// Working weight matrices for every cluster at the given coefficients and
/// correlation model.
pub fn build_weights(
    data: &LongitudinalDataset,
    beta: &Array1<f64>,
    corr: &CorrelationModel,
    tail: f64,
) -> Result<Vec<WorkingWeights>> {
    let mut out = Vec::with_capacity(data.n());
    for (ci, cl) in data.clusters.iter().enumerate() {
        let nus = cl.linear_predictors(beta);
        let d = cl.len();
        let delta: Vec<f64> = nus.iter().map(|nu| data.family.fisher_weight(*nu)).collect();
        let mut omega = Array2::zeros((d, d));
        for j in 0..d {
            omega[[j, j]] = delta[j];
            for k in j + 1..d {
                let rho = corr.rho(cl.occasions[j], cl.occasions[k]);
                let cov = score_cov_pair(data.family, nus[j], nus[k], rho, tail);
                omega[[j, k]] = cov;
                omega[[k, j]] = cov;
            }
        }
        let mut jittered = false;
        let chol = match linalg::cholesky(&omega) {
            Some(c) => c,
            None => {
                let jitter = 1e-10 * omega.diag().sum() / d as f64;
                let mut fixed = omega.clone();
                for j in 0..d {
                    fixed[[j, j]] += jitter;
                }
                jittered = true;
                omega = fixed;
                linalg::cholesky(&omega).ok_or_else(|| Error::Singular {
                    context: format!("working score covariance of cluster {ci}"),
                })?
            }
        };
        let omega_inv = linalg::chol_inverse(&chol);
        let mut winv = omega_inv;
        for j in 0..d {
            for k in 0..d {
                winv[[j, k]] *= delta[j];
            }
        }
        out.push(WorkingWeights {
            delta,
            omega,
            winv,
            jittered,
        });
    }
    Ok(out)
}

/// The weighted score vector: sum over clusters of x' W^{-1} s(beta).
pub fn weighted_score(
    data: &LongitudinalDataset,
    beta: &Array1<f64>,
    weights: &[WorkingWeights],
) -> Array1<f64> {
    let mut g = Array1::zeros(data.p);
    for (cl, w) in data.clusters.iter().zip(weights) {
        g += &cluster_weighted_score(data, cl, beta, w);
    }
    g
}

fn cluster_weighted_score(
    data: &LongitudinalDataset,
    cl: &crate::data::Cluster,
    beta: &Array1<f64>,
    w: &WorkingWeights,
) -> Array1<f64> {
    let nus = cl.linear_predictors(beta);
    let s: Array1<f64> = nus
        .iter()
        .zip(&cl.y)
        .map(|(nu, &y)| data.family.score(*nu, y))
        .collect();
    let ws = w.winv.dot(&s);
    cl.x.t().dot(&ws)
}

/// Sensitivity matrix of the weighted equations: sum of x' W^{-1} Delta x.
fn weighted_sensitivity(
    data: &LongitudinalDataset,
    weights: &[WorkingWeights],
) -> Array2<f64> {
    let mut h = Array2::zeros((data.p, data.p));
    for (cl, w) in data.clusters.iter().zip(weights) {
        let d = cl.len();
        // B = W^{-1} Delta
        let mut b = w.winv.clone();
        for j in 0..d {
            for k in 0..d {
                b[[j, k]] *= w.delta[k];
            }
        }
        let xb = cl.x.t().dot(&b).dot(&cl.x);
        h += &xb;
    }
    linalg_symmetrized(h)
}

fn linalg_symmetrized(mut a: Array2<f64>) -> Array2<f64> {
    linalg::symmetrize(&mut a);
    a
}

/// Solve the weighted-scores equations starting from the stage-1 estimates,
/// then assemble the sandwich covariance.
///
/// In the default refresh mode, Delta and Omega are rebuilt from the current
/// coefficients at every iterate with the fitted correlation frozen; the
/// frozen mode keeps the weights built at the stage-1 coefficients.
pub fn solve_weighted_scores(
    data: &LongitudinalDataset,
    cl1fit: &Cl1Fit,
    options: &FitOptions,
) -> Result<WeightedScoresFit> {
    if !cl1fit.converged {
        return Err(Error::Config(
            "weighted scores requires a converged CL1 fit".into(),
        ));
    }
    let tol = options.tol_ws * (1.0 + data.n_obs() as f64).sqrt();
    let corr = &cl1fit.corr;
    let mut beta = cl1fit.beta.clone();
    let frozen = if options.refresh_weights {
        None
    } else {
        Some(build_weights(data, &beta, corr, options.poisson_tail)?)
    };
    let weights_at = |b: &Array1<f64>| -> Result<Vec<WorkingWeights>> {
        match &frozen {
            Some(w) => Ok(w.clone()),
            None => build_weights(data, b, corr, options.poisson_tail),
        }
    };

    let mut weights = weights_at(&beta)?;
    let mut g = weighted_score(data, &beta, &weights);
    let mut gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut iterations = 0;
    for iter in 0..options.max_iter_ws {
        if gnorm <= tol {
            iterations = iter;
            break;
        }
        let h = weighted_sensitivity(data, &weights);
        let chol = linalg::cholesky_with_tol(&h, 1e-12).ok_or_else(|| Error::Singular {
            context: "weighted-scores sensitivity matrix".into(),
        })?;
        let step = linalg::chol_solve(&chol, &g);
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &(&step * lambda);
            let w_trial = weights_at(&trial)?;
            let g_trial = weighted_score(data, &trial, &w_trial);
            let g_trial_norm = g_trial.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if g_trial_norm < gnorm || g_trial_norm <= tol {
                beta = trial;
                weights = w_trial;
                g = g_trial;
                gnorm = g_trial_norm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                stage: "weighted-scores Newton",
                iterations: iter,
                grad_norm: gnorm,
                last_iterate: beta.to_vec(),
            });
        }
        iterations = iter + 1;
    }
    if gnorm > tol {
        return Err(Error::NonConvergence {
            stage: "weighted-scores Newton",
            iterations: options.max_iter_ws,
            grad_norm: gnorm,
            last_iterate: beta.to_vec(),
        });
    }

    // Sandwich covariance at the solution: H^{-1} M H^{-T} with M built from
    // empirical outer products of the per-cluster weighted scores.
    let h = weighted_sensitivity(data, &weights);
    let chol = linalg::cholesky_with_tol(&h, 1e-12).ok_or_else(|| Error::Singular {
        context: "weighted-scores sensitivity matrix".into(),
    })?;
    let hinv = linalg::chol_inverse(&chol);
    let mut m = Array2::zeros((data.p, data.p));
    for (cl, w) in data.clusters.iter().zip(&weights) {
        let v = cluster_weighted_score(data, cl, &beta, w);
        for a in 0..data.p {
            for b in 0..data.p {
                m[[a, b]] += v[a] * v[b];
            }
        }
    }
    let mut cov = hinv.dot(&m).dot(&hinv.t());
    linalg::symmetrize(&mut cov);
    let se = cov.diag().mapv(|v| v.max(0.0).sqrt());
    Ok(WeightedScoresFit {
        beta,
        cov,
        se,
        iterations,
        converged: true,
    })
}
