//! Two-stage composite likelihood estimation.
//!
//! Stage 1 solves the independent estimating equations (the univariate
//! composite score) for the regression coefficients by Fisher-scoring
//! Newton steps. Stage 2 holds those coefficients fixed and maximizes the
//! sum of bivariate log-likelihoods of the discretized-MVN working model
//! over the latent correlation parameters, on an unconstrained tanh scale.

use crate::corr::{project_positive_definite, CorrelationModel, CorrelationStructure, RHO_CLAMP};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::margins::DEFAULT_POISSON_TAIL;
use crate::mvn;
use crate::normal;
use ndarray::{Array1, Array2};

const F2_FLOOR: f64 = 1e-300;

/// Solver settings shared by the fitting stages.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Stage-1 Newton iteration cap.
    pub max_iter_stage1: usize,
    /// Stage-1 gradient tolerance (scaled by sqrt(1 + number of observations)).
    pub tol_stage1: f64,
    /// Stage-2 iteration cap.
    pub max_iter_stage2: usize,
    /// Stage-2 gradient tolerance on the unconstrained scale.
    pub tol_stage2: f64,
    /// Weighted-scores solve iteration cap.
    pub max_iter_ws: usize,
    /// Weighted-scores gradient tolerance (same scaling as stage 1).
    pub tol_ws: f64,
    /// Tail mass at which Poisson supports are truncated in expectations.
    pub poisson_tail: f64,
    /// Refresh working weights at every weighted-scores iterate (true) or
    /// freeze them at the stage-1 estimates (false).
    pub refresh_weights: bool,
    /// Seed for any randomized integration inside criteria computations.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter_stage1: 100,
            tol_stage1: 1e-8,
            max_iter_stage2: 200,
            tol_stage2: 1e-6,
            max_iter_ws: 100,
            tol_ws: 1e-8,
            poisson_tail: DEFAULT_POISSON_TAIL,
            refresh_weights: true,
            seed: 0,
        }
    }
}

/// Stage-1 and stage-2 estimates with their composite log-likelihoods.
#[derive(Debug, Clone)]
pub struct Cl1Fit {
    pub beta: Array1<f64>,
    pub corr: CorrelationModel,
    pub l1: f64,
    pub l2: f64,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub converged: bool,
    /// A dependence parameter finished at its feasibility clamp.
    pub boundary: bool,
    /// The unstructured estimate needed shrinking toward the identity to
    /// restore positive definiteness.
    pub pd_projected: bool,
}

/// Sum of univariate log-likelihoods L1.
pub fn univariate_loglik(data: &LongitudinalDataset, beta: &Array1<f64>) -> f64 {
    let mut acc = 0.0;
    for cl in &data.clusters {
        for (nu, &y) in cl.linear_predictors(beta).iter().zip(&cl.y) {
            acc += data.family.log_pmf(*nu, y).expect("validated response");
        }
    }
    acc
}

/// Independent estimating equations: the gradient of L1 in beta.
pub fn iee_score(data: &LongitudinalDataset, beta: &Array1<f64>) -> Array1<f64> {
    let mut g = Array1::zeros(data.p);
    for cl in &data.clusters {
        for (r, (nu, &y)) in cl.linear_predictors(beta).iter().zip(&cl.y).enumerate() {
            let s = data.family.score(*nu, y);
            for c in 0..data.p {
                g[c] += cl.x[[r, c]] * s;
            }
        }
    }
    g
}

/// Fisher information of L1: sum of x' Delta x over clusters.
pub fn iee_information(data: &LongitudinalDataset, beta: &Array1<f64>) -> Array2<f64> {
    let mut info = Array2::zeros((data.p, data.p));
    for cl in &data.clusters {
        for (r, nu) in cl.linear_predictors(beta).iter().enumerate() {
            let w = data.family.fisher_weight(*nu);
            for a in 0..data.p {
                let xa = cl.x[[r, a]];
                for b in a..data.p {
                    info[[a, b]] += w * xa * cl.x[[r, b]];
                }
            }
        }
    }
    for a in 0..data.p {
        for b in 0..a {
            info[[a, b]] = info[[b, a]];
        }
    }
    info
}

fn grad_tolerance(base: f64, n_obs: usize) -> f64 {
    base * (1.0 + n_obs as f64).sqrt()
}

/// Newton solution of the independent estimating equations.
pub fn fit_univariate(
    data: &LongitudinalDataset,
    beta0: &Array1<f64>,
    options: &FitOptions,
) -> Result<(Array1<f64>, usize)> {
    let tol = grad_tolerance(options.tol_stage1, data.n_obs());
    let mut beta = beta0.clone();
    let mut g = iee_score(data, &beta);
    let mut gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for iter in 0..options.max_iter_stage1 {
        if gnorm <= tol {
            return Ok((beta, iter));
        }
        let info = iee_information(data, &beta);
        let chol = linalg::cholesky_with_tol(&info, 1e-12).ok_or_else(|| rank_error(&info))?;
        let step = linalg::chol_solve(&chol, &g);
        // Backtracking on the score norm.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &(&step * lambda);
            let gt = iee_score(data, &trial);
            let gt_norm = gt.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gt_norm < gnorm || gt_norm <= tol {
                beta = trial;
                g = gt;
                gnorm = gt_norm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                stage: "stage-1 Newton",
                iterations: iter,
                grad_norm: gnorm,
                last_iterate: beta.to_vec(),
            });
        }
    }
    if gnorm <= tol {
        Ok((beta, options.max_iter_stage1))
    } else {
        Err(Error::NonConvergence {
            stage: "stage-1 Newton",
            iterations: options.max_iter_stage1,
            grad_norm: gnorm,
            last_iterate: beta.to_vec(),
        })
    }
}

fn rank_error(info: &Array2<f64>) -> Error {
    // Report the first leading minor that fails to factorize.
    let p = info.nrows();
    for k in 1..=p {
        let sub = info.slice(ndarray::s![..k, ..k]).to_owned();
        if linalg::cholesky_with_tol(&sub, 1e-12).is_none() {
            return Error::RankDeficient { column: k - 1 };
        }
    }
    Error::RankDeficient { column: p - 1 }
}

/// Latent rectangle cutpoints of one observation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ObsCut {
    pub z_lo: f64,
    pub z_hi: f64,
}

pub(crate) fn cluster_cutpoints(
    data: &LongitudinalDataset,
    beta: &Array1<f64>,
    cluster: usize,
) -> Vec<ObsCut> {
    let cl = &data.clusters[cluster];
    cl.linear_predictors(beta)
        .iter()
        .zip(&cl.y)
        .map(|(nu, &y)| ObsCut {
            z_lo: data.family.cutpoint(y as i64 - 1, *nu),
            z_hi: data.family.cutpoint(y as i64, *nu),
        })
        .collect()
}

/// Sum of bivariate log-likelihoods L2 at the given coefficients and
/// correlation model. Clusters of size one contribute zero.
pub fn bivariate_loglik(
    data: &LongitudinalDataset,
    beta: &Array1<f64>,
    corr: &CorrelationModel,
) -> Result<f64> {
    corr.validate()?;
    let mut acc = 0.0;
    for (ci, cl) in data.clusters.iter().enumerate() {
        let cuts = cluster_cutpoints(data, beta, ci);
        for j in 0..cl.len() {
            for k in j + 1..cl.len() {
                let rho = corr.rho(cl.occasions[j], cl.occasions[k]);
                let f2 = mvn::bvn_rectangle(
                    cuts[j].z_lo,
                    cuts[j].z_hi,
                    cuts[k].z_lo,
                    cuts[k].z_hi,
                    rho,
                );
                acc += f2.max(F2_FLOOR).ln();
            }
        }
    }
    Ok(acc)
}

/// Gradient of L2 with respect to the structure parameters, assembled from
/// per-pair derivatives through the structure map.
pub fn bivariate_score(
    data: &LongitudinalDataset,
    beta: &Array1<f64>,
    corr: &CorrelationModel,
) -> Result<Array1<f64>> {
    corr.validate()?;
    let q = corr.structure.param_count(corr.d_max.max(2));
    let mut g = Array1::zeros(q);
    if q == 0 {
        return Ok(g);
    }
    for (ci, cl) in data.clusters.iter().enumerate() {
        let cuts = cluster_cutpoints(data, beta, ci);
        for j in 0..cl.len() {
            for k in j + 1..cl.len() {
                let (oj, ok) = (cl.occasions[j], cl.occasions[k]);
                let rho = corr.rho(oj, ok);
                let f2 = mvn::bvn_rectangle(
                    cuts[j].z_lo,
                    cuts[j].z_hi,
                    cuts[k].z_lo,
                    cuts[k].z_hi,
                    rho,
                )
                .max(F2_FLOOR);
                let df2 = mvn::bvn_rectangle_drho(
                    cuts[j].z_lo,
                    cuts[j].z_hi,
                    cuts[k].z_lo,
                    cuts[k].z_hi,
                    rho,
                );
                let dl_drho = df2 / f2;
                match corr.structure {
                    CorrelationStructure::Unstructured => {
                        let idx = crate::corr::pair_index(oj, ok, corr.d_max);
                        g[idx] += dl_drho;
                    }
                    _ => {
                        g[0] += dl_drho * corr.drho_dparam(oj, ok, 0);
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Result of a clamped 1-D ascent.
struct Ascent {
    rho: f64,
    iterations: usize,
    boundary: bool,
}

/// Damped Newton ascent of a 1-D objective over rho in [lo, hi], working on
/// the unconstrained scale theta = atanh(rho). The numerical second
/// derivative backs the Newton step; failed curvature falls back to a plain
/// gradient step, and backtracking keeps accepted steps strictly increasing.
fn maximize_rho<Obj, Grad>(
    obj: Obj,
    grad: Grad,
    rho0: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Ascent>
where
    Obj: Fn(f64) -> Result<f64>,
    Grad: Fn(f64) -> Result<f64>,
{
    let theta_lo = lo.atanh();
    let theta_hi = hi.atanh();
    let clamp = |t: f64| t.clamp(theta_lo, theta_hi);
    let mut theta = clamp(rho0.clamp(lo, hi).atanh());
    // Gradient on the theta scale: dL/dtheta = dL/drho * (1 - rho^2).
    let grad_theta = |t: f64| -> Result<f64> {
        let rho = t.tanh();
        Ok(grad(rho)? * (1.0 - rho * rho))
    };
    let mut f = obj(theta.tanh())?;
    let fd_step = 1e-4;
    for iter in 0..max_iter {
        let g = grad_theta(theta)?;
        let at_lo = theta <= theta_lo + 1e-9;
        let at_hi = theta >= theta_hi - 1e-9;
        if g.abs() <= tol || (at_lo && g < 0.0) || (at_hi && g > 0.0) {
            return Ok(Ascent {
                rho: theta.tanh(),
                iterations: iter,
                boundary: (at_lo && g < 0.0) || (at_hi && g > 0.0),
            });
        }
        let hess = (grad_theta(theta + fd_step)? - grad_theta(theta - fd_step)?) / (2.0 * fd_step);
        let mut step = if hess < -1e-12 {
            -g / hess
        } else {
            g.signum() * 0.5
        };
        if step.abs() > 4.0 {
            step = step.signum() * 4.0;
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = clamp(theta + lambda * step);
            let ft = obj(trial.tanh())?;
            if ft > f {
                theta = trial;
                f = ft;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // No increasing step left: treat the current point as stationary.
            return Ok(Ascent {
                rho: theta.tanh(),
                iterations: iter,
                boundary: at_lo || at_hi,
            });
        }
    }
    Err(Error::NonConvergence {
        stage: "stage-2 ascent",
        iterations: max_iter,
        grad_norm: grad_theta(theta)?.abs(),
        last_iterate: vec![theta.tanh()],
    })
}

/// Pairwise latent correlation start values: the sample correlation of
/// midpoint normal scores, clipped into (-0.95, 0.95).
fn normal_scores_start(data: &LongitudinalDataset, beta: &Array1<f64>, d_max: usize) -> Vec<f64> {
    let q = d_max * (d_max - 1) / 2;
    let mut stats = vec![(0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0); q];
    for cl in &data.clusters {
        let z: Vec<f64> = cl
            .linear_predictors(beta)
            .iter()
            .zip(&cl.y)
            .map(|(nu, &y)| {
                let mid = 0.5
                    * (data.family.cdf(y as i64 - 1, *nu) + data.family.cdf(y as i64, *nu));
                normal::inverse_cdf(mid.clamp(1e-12, 1.0 - 1e-12))
            })
            .collect();
        for j in 0..cl.len() {
            for k in j + 1..cl.len() {
                let idx = crate::corr::pair_index(cl.occasions[j], cl.occasions[k], d_max);
                let (n, sx, sy, sxy, sxx, syy) = &mut stats[idx];
                *n += 1.0;
                *sx += z[j];
                *sy += z[k];
                *sxy += z[j] * z[k];
                *sxx += z[j] * z[j];
                *syy += z[k] * z[k];
            }
        }
    }
    stats
        .iter()
        .map(|&(n, sx, sy, sxy, sxx, syy)| {
            if n < 3.0 {
                return 0.1;
            }
            let cov = sxy / n - (sx / n) * (sy / n);
            let vx = sxx / n - (sx / n) * (sx / n);
            let vy = syy / n - (sy / n) * (sy / n);
            if vx <= 0.0 || vy <= 0.0 {
                return 0.1;
            }
            (cov / (vx * vy).sqrt()).clamp(-0.95, 0.95)
        })
        .collect()
}

/// Two-stage CL1 fit: stage-1 coefficients from the independent estimating
/// equations, then the latent correlation structure maximizing L2 with the
/// coefficients frozen.
pub fn fit_cl1(
    data: &LongitudinalDataset,
    structure: CorrelationStructure,
    options: &FitOptions,
) -> Result<Cl1Fit> {
    let (beta, stage1_iterations) = fit_univariate(data, &Array1::zeros(data.p), options)?;
    let l1 = univariate_loglik(data, &beta);
    let d_max = data.d_max().max(2);

    let mut boundary = false;
    let mut pd_projected = false;
    let mut stage2_iterations = 0;

    let corr = match structure {
        CorrelationStructure::Independence => CorrelationModel::independence(d_max),
        CorrelationStructure::Exchangeable | CorrelationStructure::Ar1 => {
            let probe = CorrelationModel {
                structure,
                params: vec![0.0],
                d_max,
            };
            let lo = probe.lower_bound();
            let hi = RHO_CLAMP;
            let make = |rho: f64| CorrelationModel {
                structure,
                params: vec![rho],
                d_max,
            };
            let ascent = maximize_rho(
                |rho| bivariate_loglik(data, &beta, &make(rho)),
                |rho| Ok(bivariate_score(data, &beta, &make(rho))?[0]),
                0.1,
                lo,
                hi,
                options.tol_stage2,
                options.max_iter_stage2,
            )?;
            boundary = ascent.boundary;
            stage2_iterations = ascent.iterations;
            make(ascent.rho)
        }
        CorrelationStructure::Unstructured => {
            // Each pair parameter appears in exactly one term of L2, so the
            // joint maximization decouples into per-pair problems.
            let starts = normal_scores_start(data, &beta, d_max);
            let q = d_max * (d_max - 1) / 2;
            let mut params = vec![0.0; q];
            for j in 1..=d_max {
                for k in j + 1..=d_max {
                    let idx = crate::corr::pair_index(j, k, d_max);
                    let pair = pair_cutpoints(data, &beta, j, k);
                    if pair.len() < 3 {
                        // Too few clusters observe this pair to identify it.
                        params[idx] = 0.0;
                        continue;
                    }
                    let cuts = pair.clone();
                    let objective = move |rho: f64| -> Result<f64> {
                        let mut acc = 0.0;
                        for (a, b) in &cuts {
                            acc += mvn::bvn_rectangle(a.z_lo, a.z_hi, b.z_lo, b.z_hi, rho)
                                .max(F2_FLOOR)
                                .ln();
                        }
                        Ok(acc)
                    };
                    let gradient = move |rho: f64| -> Result<f64> {
                        let mut acc = 0.0;
                        for (a, b) in &pair {
                            let f2 = mvn::bvn_rectangle(a.z_lo, a.z_hi, b.z_lo, b.z_hi, rho)
                                .max(F2_FLOOR);
                            acc += mvn::bvn_rectangle_drho(a.z_lo, a.z_hi, b.z_lo, b.z_hi, rho)
                                / f2;
                        }
                        Ok(acc)
                    };
                    let ascent = maximize_rho(
                        objective,
                        gradient,
                        starts[idx],
                        -RHO_CLAMP,
                        RHO_CLAMP,
                        options.tol_stage2,
                        options.max_iter_stage2,
                    )?;
                    boundary |= ascent.boundary;
                    stage2_iterations = stage2_iterations.max(ascent.iterations);
                    params[idx] = ascent.rho;
                }
            }
            let mut model = CorrelationModel {
                structure,
                params,
                d_max,
            };
            let mut full = model.expand_full();
            let shrink = project_positive_definite(&mut full, 1e-6);
            if shrink > 0.0 {
                pd_projected = true;
                for j in 1..=d_max {
                    for k in j + 1..=d_max {
                        model.params[crate::corr::pair_index(j, k, d_max)] = full[[j - 1, k - 1]];
                    }
                }
            }
            model
        }
    };

    let l2 = bivariate_loglik(data, &beta, &corr)?;
    Ok(Cl1Fit {
        beta,
        corr,
        l1,
        l2,
        stage1_iterations,
        stage2_iterations,
        converged: true,
        boundary,
        pd_projected,
    })
}

/// Cutpoint pairs of every cluster containing both occasions j and k.
fn pair_cutpoints(
    data: &LongitudinalDataset,
    beta: &Array1<f64>,
    j: usize,
    k: usize,
) -> Vec<(ObsCut, ObsCut)> {
    let mut cuts = Vec::new();
    for (ci, cl) in data.clusters.iter().enumerate() {
        let pos_j = cl.occasions.iter().position(|&o| o == j);
        let pos_k = cl.occasions.iter().position(|&o| o == k);
        if let (Some(a), Some(b)) = (pos_j, pos_k) {
            let obs = cluster_cutpoints(data, beta, ci);
            cuts.push((obs[a], obs[b]));
        }
    }
    cuts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;
    use crate::margins::MarginFamily;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn bernoulli_intercept_data(ys: &[u64]) -> LongitudinalDataset {
        let clusters = ys
            .iter()
            .map(|&y| Cluster {
                occasions: vec![1],
                y: vec![y],
                x: array![[1.0]],
            })
            .collect();
        LongitudinalDataset::new(clusters, MarginFamily::BernoulliLogit, 1).unwrap()
    }

    /// Thresholded latent-normal clusters, used as a self-contained generator
    /// for solver tests (the full simulation module has its own).
    fn latent_binary_data(
        n: usize,
        rho: f64,
        beta: &[f64],
        seed: u64,
    ) -> LongitudinalDataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut clusters = Vec::with_capacity(n);
        for _ in 0..n {
            let d = 3usize;
            let mut x = Array2::zeros((d, beta.len()));
            for j in 0..d {
                x[[j, 0]] = 1.0;
                if beta.len() > 1 {
                    x[[j, 1]] = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
                if beta.len() > 2 {
                    x[[j, 2]] = j as f64;
                }
            }
            let shared: f64 = normal_draw(&mut rng);
            let mut y = Vec::with_capacity(d);
            for j in 0..d {
                let own: f64 = normal_draw(&mut rng);
                let z = rho.sqrt() * shared + (1.0 - rho).sqrt() * own;
                let nu: f64 = (0..beta.len()).map(|c| x[[j, c]] * beta[c]).sum();
                let mu = MarginFamily::BernoulliLogit.mean(nu);
                // y = 1 when the latent uniform exceeds 1 - mu.
                y.push(if normal::cdf(z) > 1.0 - mu { 1 } else { 0 });
            }
            clusters.push(Cluster {
                occasions: vec![1, 2, 3],
                y,
                x,
            });
        }
        LongitudinalDataset::new(clusters, MarginFamily::BernoulliLogit, beta.len()).unwrap()
    }

    fn latent_binary_data_d2(n: usize, rho: f64, seed: u64) -> LongitudinalDataset {
        let beta = [0.25, -0.25, -0.25];
        let mut rng = StdRng::seed_from_u64(seed);
        let clusters = (0..n)
            .map(|_| {
                let d = 2;
                let mut x = Array2::zeros((d, 3));
                let shared = normal_draw(&mut rng);
                let mut y = Vec::with_capacity(d);
                for j in 0..d {
                    x[[j, 0]] = 1.0;
                    x[[j, 1]] = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    x[[j, 2]] = j as f64;
                    let z = rho.sqrt() * shared + (1.0 - rho).sqrt() * normal_draw(&mut rng);
                    let nu: f64 = (0..3).map(|c| x[[j, c]] * beta[c]).sum();
                    let mu = MarginFamily::BernoulliLogit.mean(nu);
                    y.push(u64::from(normal::cdf(z) > 1.0 - mu));
                }
                Cluster {
                    occasions: vec![1, 2],
                    y,
                    x,
                }
            })
            .collect();
        LongitudinalDataset::new(clusters, MarginFamily::BernoulliLogit, 3).unwrap()
    }

    fn normal_draw(rng: &mut StdRng) -> f64 {
        // Box-Muller is plenty for test data.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn intercept_only_closed_forms() {
        let data = bernoulli_intercept_data(&[1, 1, 1, 0, 0, 1, 0, 1]);
        let opts = FitOptions::default();
        let (beta, _) = fit_univariate(&data, &array![0.0], &opts).unwrap();
        let mean = 5.0f64 / 8.0;
        assert_abs_diff_eq!(beta[0], (mean / (1.0 - mean)).ln(), epsilon = 1e-8);

        let counts = [3u64, 0, 2, 5, 1, 1];
        let clusters = counts
            .iter()
            .map(|&y| Cluster {
                occasions: vec![1],
                y: vec![y],
                x: array![[1.0]],
            })
            .collect();
        let data = LongitudinalDataset::new(clusters, MarginFamily::PoissonLog, 1).unwrap();
        let (beta, _) = fit_univariate(&data, &array![0.0], &opts).unwrap();
        assert_abs_diff_eq!(beta[0], 2.0f64.ln(), epsilon = 1e-8);
    }

    #[test]
    fn score_vanishes_at_solution() {
        let data = latent_binary_data(80, 0.4, &[0.25, -0.25, -0.25], 3);
        let opts = FitOptions::default();
        let (beta, _) = fit_univariate(&data, &Array1::zeros(3), &opts).unwrap();
        let g = iee_score(&data, &beta);
        for v in g.iter() {
            assert!(v.abs() < 1e-6, "residual score {v}");
        }
    }

    #[test]
    fn single_observation_score() {
        // One cluster, one observation, logit, x = (1), y = 1, beta = 0.
        let data = bernoulli_intercept_data(&[1]);
        let g = iee_score(&data, &array![0.0]);
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn exchangeable_score_single_pair() {
        // With d = 2 the exchangeable score is the lone pair derivative.
        let data = latent_binary_data_d2(30, 0.4, 51);
        let beta = array![0.1, -0.2, 0.0];
        let model =
            CorrelationModel::new(CorrelationStructure::Exchangeable, vec![0.3], 2).unwrap();
        let g = bivariate_score(&data, &beta, &model).unwrap();
        let mut direct = 0.0;
        for (ci, cl) in data.clusters.iter().enumerate() {
            let cuts = cluster_cutpoints(&data, &beta, ci);
            let f2 = mvn::bvn_rectangle(
                cuts[0].z_lo, cuts[0].z_hi, cuts[1].z_lo, cuts[1].z_hi, 0.3,
            );
            direct += mvn::bvn_rectangle_drho(
                cuts[0].z_lo, cuts[0].z_hi, cuts[1].z_lo, cuts[1].z_hi, 0.3,
            ) / f2;
            let _ = cl;
        }
        assert_abs_diff_eq!(g[0], direct, epsilon = 1e-12);
    }

    #[test]
    fn pairs_only_objective_matches_fine_grid() {
        // Binary d = 2 clusters: the fitted L2 matches a brute-force grid of
        // step 1e-4 to within 1e-6 in objective value.
        let data = latent_binary_data_d2(50, 0.5, 53);
        let fit = fit_cl1(&data, CorrelationStructure::Exchangeable, &FitOptions::default())
            .unwrap();
        let make = |r: f64| CorrelationModel {
            structure: CorrelationStructure::Exchangeable,
            params: vec![r],
            d_max: 2,
        };
        let mut best = f64::NEG_INFINITY;
        let mut rho = -0.95;
        while rho < 0.99 {
            best = best.max(bivariate_loglik(&data, &fit.beta, &make(rho)).unwrap());
            rho += 1e-4;
        }
        assert!(
            (fit.l2 - best).abs() < 1e-6,
            "ascent objective {} vs grid {}",
            fit.l2,
            best
        );
    }

    #[test]
    fn iee_score_matches_loglik_gradient() {
        let data = latent_binary_data(40, 0.3, &[0.25, -0.25, -0.25], 9);
        let beta = array![0.1, -0.2, 0.05];
        let g = iee_score(&data, &beta);
        let h = 1e-6;
        for c in 0..3 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[c] += h;
            bm[c] -= h;
            let fd = (univariate_loglik(&data, &bp) - univariate_loglik(&data, &bm)) / (2.0 * h);
            assert!(
                (g[c] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "component {c}: {} vs {}",
                g[c],
                fd
            );
        }
    }

    #[test]
    fn rank_deficiency_detected() {
        // Duplicate column makes the stacked design singular.
        let clusters = (0..6)
            .map(|i| Cluster {
                occasions: vec![1],
                y: vec![u64::from(i < 5)],
                x: array![[1.0, 1.0]],
            })
            .collect();
        let data = LongitudinalDataset::new(clusters, MarginFamily::BernoulliLogit, 2).unwrap();
        let r = fit_univariate(&data, &Array1::zeros(2), &FitOptions::default());
        assert!(matches!(r, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn bivariate_loglik_independence_reduces_to_univariate_sums() {
        let data = latent_binary_data(25, 0.5, &[0.25, -0.25, -0.25], 11);
        let beta = array![0.2, -0.3, -0.1];
        let corr = CorrelationModel::independence(3);
        let l2 = bivariate_loglik(&data, &beta, &corr).unwrap();
        // Direct pairwise sum of univariate log-pmfs.
        let mut expected = 0.0;
        for cl in &data.clusters {
            let nus = cl.linear_predictors(&beta);
            for j in 0..cl.len() {
                for k in j + 1..cl.len() {
                    expected += data.family.log_pmf(nus[j], cl.y[j]).unwrap()
                        + data.family.log_pmf(nus[k], cl.y[k]).unwrap();
                }
            }
        }
        assert_abs_diff_eq!(l2, expected, epsilon = 1e-9);
    }

    #[test]
    fn bivariate_loglik_matches_naive_double_loop() {
        let data = latent_binary_data(20, 0.5, &[0.25, -0.25, -0.25], 13);
        let beta = array![0.2, -0.2, -0.15];
        let corr =
            CorrelationModel::new(CorrelationStructure::Exchangeable, vec![0.35], 3).unwrap();
        let l2 = bivariate_loglik(&data, &beta, &corr).unwrap();
        let mut naive = 0.0;
        for cl in &data.clusters {
            let nus = cl.linear_predictors(&beta);
            for j in 0..cl.len() {
                for k in 0..cl.len() {
                    if j >= k {
                        continue;
                    }
                    let zl_j = data.family.cutpoint(cl.y[j] as i64 - 1, nus[j]);
                    let zh_j = data.family.cutpoint(cl.y[j] as i64, nus[j]);
                    let zl_k = data.family.cutpoint(cl.y[k] as i64 - 1, nus[k]);
                    let zh_k = data.family.cutpoint(cl.y[k] as i64, nus[k]);
                    naive += mvn::bvn_rectangle(zl_j, zh_j, zl_k, zh_k, 0.35).ln();
                }
            }
        }
        assert_abs_diff_eq!(l2, naive, epsilon = 1e-10);
    }

    #[test]
    fn bivariate_score_matches_finite_difference() {
        let data = latent_binary_data(30, 0.5, &[0.25, -0.25, -0.25], 17);
        let beta = array![0.2, -0.2, -0.15];
        let h = 1e-6;
        for structure in [
            CorrelationStructure::Exchangeable,
            CorrelationStructure::Ar1,
        ] {
            for &rho in &[-0.2, 0.1, 0.45] {
                let make = |r: f64| CorrelationModel {
                    structure,
                    params: vec![r],
                    d_max: 3,
                };
                let g = bivariate_score(&data, &beta, &make(rho)).unwrap();
                let fd = (bivariate_loglik(&data, &beta, &make(rho + h)).unwrap()
                    - bivariate_loglik(&data, &beta, &make(rho - h)).unwrap())
                    / (2.0 * h);
                assert!(
                    (g[0] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "{structure:?} rho={rho}: {} vs {}",
                    g[0],
                    fd
                );
            }
        }
        // Unstructured: component-wise.
        let make = |p: Vec<f64>| CorrelationModel {
            structure: CorrelationStructure::Unstructured,
            params: p,
            d_max: 3,
        };
        let base = vec![0.3, -0.1, 0.2];
        let g = bivariate_score(&data, &beta, &make(base.clone())).unwrap();
        for c in 0..3 {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[c] += h;
            dn[c] -= h;
            let fd = (bivariate_loglik(&data, &beta, &make(up)).unwrap()
                - bivariate_loglik(&data, &beta, &make(dn)).unwrap())
                / (2.0 * h);
            assert!((g[c] - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn exchangeable_fit_recovers_latent_correlation() {
        let data = latent_binary_data(400, 0.5, &[0.25, -0.25, -0.25], 23);
        let fit = fit_cl1(&data, CorrelationStructure::Exchangeable, &FitOptions::default())
            .unwrap();
        // Monte-Carlo tolerance: the CL1 estimator SE at n = 400 is well below 0.1.
        assert!(
            (fit.corr.params[0] - 0.5).abs() < 0.15,
            "fitted rho {}",
            fit.corr.params[0]
        );
        // Score at the optimum vanishes on the unconstrained scale.
        let g = bivariate_score(&data, &fit.beta, &fit.corr).unwrap();
        let rho = fit.corr.params[0];
        assert!((g[0] * (1.0 - rho * rho)).abs() <= 2e-6);
        assert!(fit.l2 <= 0.0);
        assert!(!fit.boundary);
    }

    #[test]
    fn fitted_rho_matches_grid_search() {
        let data = latent_binary_data(60, 0.5, &[0.25, -0.25, -0.25], 29);
        let fit = fit_cl1(&data, CorrelationStructure::Exchangeable, &FitOptions::default())
            .unwrap();
        let make = |r: f64| CorrelationModel {
            structure: CorrelationStructure::Exchangeable,
            params: vec![r],
            d_max: 3,
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut rho = -0.45;
        while rho < 0.95 {
            let l2 = bivariate_loglik(&data, &fit.beta, &make(rho)).unwrap();
            if l2 > best.0 {
                best = (l2, rho);
            }
            rho += 1e-3;
        }
        assert!(
            (fit.corr.params[0] - best.1).abs() < 2e-3,
            "ascent {} vs grid {}",
            fit.corr.params[0],
            best.1
        );
    }

    #[test]
    fn independence_stage2_is_noop() {
        let data = latent_binary_data(30, 0.5, &[0.25, -0.25, -0.25], 31);
        let fit =
            fit_cl1(&data, CorrelationStructure::Independence, &FitOptions::default()).unwrap();
        assert_eq!(fit.stage2_iterations, 0);
        assert!(fit.corr.params.is_empty());
        let expected =
            bivariate_loglik(&data, &fit.beta, &CorrelationModel::independence(3)).unwrap();
        assert_abs_diff_eq!(fit.l2, expected, epsilon = 1e-12);
    }

    #[test]
    fn ar1_dominates_independence_on_ar1_data() {
        // AR(1) latent data: z_j = rho z_{j-1} + sqrt(1 - rho^2) e_j.
        let mut rng = StdRng::seed_from_u64(37);
        let beta = [0.25, -0.25, -0.25];
        let mut clusters = Vec::new();
        for _ in 0..150 {
            let d = 3;
            let mut x = Array2::zeros((d, 3));
            let mut z = vec![0.0f64; d];
            for j in 0..d {
                x[[j, 0]] = 1.0;
                x[[j, 1]] = if rng.random::<bool>() { 1.0 } else { 0.0 };
                x[[j, 2]] = j as f64;
                z[j] = if j == 0 {
                    normal_draw(&mut rng)
                } else {
                    0.5 * z[j - 1] + (1.0f64 - 0.25).sqrt() * normal_draw(&mut rng)
                };
            }
            let y: Vec<u64> = (0..d)
                .map(|j| {
                    let nu: f64 = (0..3).map(|c| x[[j, c]] * beta[c]).sum();
                    let mu = MarginFamily::BernoulliLogit.mean(nu);
                    if normal::cdf(z[j]) > 1.0 - mu {
                        1
                    } else {
                        0
                    }
                })
                .collect();
            clusters.push(Cluster {
                occasions: vec![1, 2, 3],
                y,
                x,
            });
        }
        let data = LongitudinalDataset::new(clusters, MarginFamily::BernoulliLogit, 3).unwrap();
        let opts = FitOptions::default();
        let ar1 = fit_cl1(&data, CorrelationStructure::Ar1, &opts).unwrap();
        let ind = fit_cl1(&data, CorrelationStructure::Independence, &opts).unwrap();
        assert!(ar1.l2 >= ind.l2, "AR1 {} vs IN {}", ar1.l2, ind.l2);
    }

    #[test]
    fn stage1_invariant_to_cluster_ordering() {
        let data = latent_binary_data(50, 0.4, &[0.25, -0.25, -0.25], 41);
        let mut reversed = data.clone();
        reversed.clusters.reverse();
        let opts = FitOptions::default();
        let (b1, _) = fit_univariate(&data, &Array1::zeros(3), &opts).unwrap();
        let (b2, _) = fit_univariate(&reversed, &Array1::zeros(3), &opts).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(b1[c], b2[c], epsilon = 1e-9);
        }
    }

    #[test]
    fn unstructured_fit_is_feasible_and_stationary() {
        let data = latent_binary_data(200, 0.5, &[0.25, -0.25, -0.25], 43);
        let fit =
            fit_cl1(&data, CorrelationStructure::Unstructured, &FitOptions::default()).unwrap();
        assert!(fit.corr.validate().is_ok());
        let g = bivariate_score(&data, &fit.beta, &fit.corr).unwrap();
        for (i, v) in g.iter().enumerate() {
            let rho = fit.corr.params[i];
            assert!(
                (v * (1.0 - rho * rho)).abs() < 2e-6 || fit.pd_projected,
                "pair {i} gradient {v}"
            );
        }
    }
}
