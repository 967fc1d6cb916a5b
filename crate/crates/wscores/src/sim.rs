//! Data generation from the discretized MVN and the selection-frequency
//! study harnesses.
//!
//! Clusters are drawn by thresholding a latent multivariate normal vector:
//! y_j is the smallest value with F(y_j; nu_j) >= Phi(z_j). Randomness is
//! counter-based: each (replicate, cluster) owns an independent stream
//! derived from the design seed, so parallel execution is order-independent
//! and reproducible.

use crate::cl1::FitOptions;
use crate::corr::{CorrelationModel, CorrelationStructure};
use crate::data::{Cluster, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::godambe::{select, Candidate};
use crate::linalg;
use crate::margins::MarginFamily;
use crate::seeding::{mix_key, mix_seed};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Column generators for simulated designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CovariateSpec {
    /// Constant 1.
    Intercept,
    /// Bernoulli(1/2) per observation.
    Bernoulli,
    /// Occasion index minus one.
    TimeIndex,
    /// Uniform on [-1, 1] per observation.
    Uniform,
}

/// A complete simulation design.
#[derive(Debug, Clone)]
pub struct SimDesign {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub family: MarginFamily,
    pub beta_true: Vec<f64>,
    pub covariates: Vec<CovariateSpec>,
    pub corr_true: CorrelationModel,
    pub replicates: usize,
    pub seed: u64,
}

impl SimDesign {
    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicate count must be at least 1".into()));
        }
        if self.covariates.len() != self.beta_true.len() {
            return Err(Error::Config(
                "covariate generators and true coefficients disagree in length".into(),
            ));
        }
        self.corr_true.validate()
    }
}

fn structured_truth(structure: CorrelationStructure, d: usize) -> CorrelationModel {
    match structure {
        CorrelationStructure::Exchangeable => {
            CorrelationModel::new(structure, vec![0.5], d).unwrap()
        }
        CorrelationStructure::Ar1 => CorrelationModel::new(structure, vec![0.5], d).unwrap(),
        CorrelationStructure::Unstructured => {
            CorrelationModel::new(structure, vec![-0.5, -0.3, 0.3], d).unwrap()
        }
        CorrelationStructure::Independence => CorrelationModel::independence(d),
    }
}

/// The built-in study designs, addressable by name from the CLI:
/// `table3-{ex,ar1,un}` are the three-covariate structure-selection designs
/// and `table4-{ex,ar1,un}` the five-covariate variable-selection designs.
pub fn builtin_design(name: &str, n: usize, replicates: usize, seed: u64) -> Result<SimDesign> {
    let (covs, beta): (Vec<CovariateSpec>, Vec<f64>) = match name {
        "table3-ex" | "table3-ar1" | "table3-un" => (
            vec![
                CovariateSpec::Intercept,
                CovariateSpec::Bernoulli,
                CovariateSpec::TimeIndex,
            ],
            vec![0.25, -0.25, -0.25],
        ),
        "table4-ex" | "table4-ar1" | "table4-un" => (
            vec![
                CovariateSpec::Intercept,
                CovariateSpec::Bernoulli,
                CovariateSpec::TimeIndex,
                CovariateSpec::Uniform,
                CovariateSpec::Uniform,
            ],
            vec![0.25, -0.25, -0.25, 0.0, 0.0],
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown design '{other}' (expected table3-ex, table3-ar1, table3-un, table4-ex, table4-ar1, table4-un)"
            )))
        }
    };
    let structure = match name {
        n if n.ends_with("-ex") => CorrelationStructure::Exchangeable,
        n if n.ends_with("-ar1") => CorrelationStructure::Ar1,
        _ => CorrelationStructure::Unstructured,
    };
    Ok(SimDesign {
        name: name.to_string(),
        n,
        d: 3,
        family: MarginFamily::BernoulliLogit,
        beta_true: beta,
        covariates: covs,
        corr_true: structured_truth(structure, 3),
        replicates,
        seed,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the second draw is discarded for streaming simplicity.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smallest response value with F(y; nu) >= u.
fn margin_quantile(family: MarginFamily, u: f64, nu: f64) -> u64 {
    match family {
        MarginFamily::PoissonLog => {
            let mu = family.mean(nu);
            let mut k: u64 = 0;
            let mut pmf = (-mu).exp();
            let mut cum = pmf;
            while cum < u && k < 10_000_000 {
                k += 1;
                pmf *= mu / k as f64;
                cum += pmf;
            }
            k
        }
        _ => u64::from(u > family.cdf(0, nu)),
    }
}

/// Draw one cluster: covariates per the design generators, then responses by
/// thresholding the latent normal vector.
pub fn simulate_cluster(design: &SimDesign, replicate: usize, cluster: usize) -> Cluster {
    let mut rng = ChaCha8Rng::from_seed(mix_key(
        design.seed,
        &[replicate as u64, cluster as u64],
    ));
    let d = design.d;
    let p = design.p();
    let mut x = Array2::zeros((d, p));
    for j in 0..d {
        for (c, spec) in design.covariates.iter().enumerate() {
            x[[j, c]] = match spec {
                CovariateSpec::Intercept => 1.0,
                CovariateSpec::Bernoulli => f64::from(rng.random::<bool>()),
                CovariateSpec::TimeIndex => j as f64,
                CovariateSpec::Uniform => rng.random_range(-1.0..1.0),
            };
        }
    }
    let occasions: Vec<usize> = (1..=d).collect();
    let r = design
        .corr_true
        .expand(&occasions)
        .expect("validated truth");
    let chol = linalg::cholesky(&r).expect("positive definite truth");
    let e: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
    let y: Vec<u64> = (0..d)
        .map(|j| {
            let z: f64 = (0..=j).map(|m| chol[[j, m]] * e[m]).sum();
            let u = crate::normal::cdf(z);
            let nu: f64 = (0..p).map(|c| x[[j, c]] * design.beta_true[c]).sum();
            margin_quantile(design.family, u, nu)
        })
        .collect();
    Cluster { occasions, y, x }
}

/// Draw a full dataset for one replicate.
pub fn simulate_dataset(design: &SimDesign, replicate: usize) -> LongitudinalDataset {
    let clusters = (0..design.n)
        .map(|c| simulate_cluster(design, replicate, c))
        .collect();
    LongitudinalDataset::new(clusters, design.family, design.p()).expect("generated data valid")
}

/// Winner tallies for one selection study.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StudyTable {
    pub design: String,
    pub n: usize,
    pub d: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Candidate labels, one column per candidate.
    pub labels: Vec<String>,
    /// Winner counts by CL1AIC per candidate.
    pub aic_counts: Vec<usize>,
    /// Winner counts by CL1BIC per candidate.
    pub bic_counts: Vec<usize>,
    /// Replicates where every candidate failed to fit.
    pub failures: usize,
    /// Candidate fit failures across replicates (candidate excluded from
    /// that replicate's argmin).
    pub candidate_failures: Vec<usize>,
}

impl StudyTable {
    fn tally(
        design: &SimDesign,
        labels: Vec<String>,
        outcomes: Vec<Option<(usize, usize, Vec<bool>)>>,
    ) -> StudyTable {
        let k = labels.len();
        let mut aic_counts = vec![0usize; k];
        let mut bic_counts = vec![0usize; k];
        let mut candidate_failures = vec![0usize; k];
        let mut failures = 0usize;
        for o in outcomes {
            match o {
                Some((wa, wb, failed)) => {
                    aic_counts[wa] += 1;
                    bic_counts[wb] += 1;
                    for (c, f) in failed.iter().enumerate() {
                        if *f {
                            candidate_failures[c] += 1;
                        }
                    }
                }
                None => failures += 1,
            }
        }
        StudyTable {
            design: design.name.clone(),
            n: design.n,
            d: design.d,
            replicates: design.replicates,
            seed: design.seed,
            labels,
            aic_counts,
            bic_counts,
            failures,
            candidate_failures,
        }
    }

    /// Plain-text table: one row per criterion, one column per candidate.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "design {} (n = {}, d = {}, B = {}, seed = {})\n",
            self.design, self.n, self.d, self.replicates, self.seed
        ));
        out.push_str(&format!("{:<8}", "crit"));
        for l in &self.labels {
            out.push_str(&format!("{l:>8}"));
        }
        out.push_str(&format!("{:>8}\n", "fail"));
        for (name, counts) in [("CL1AIC", &self.aic_counts), ("CL1BIC", &self.bic_counts)] {
            out.push_str(&format!("{name:<8}"));
            for c in counts.iter() {
                out.push_str(&format!("{c:>8}"));
            }
            out.push_str(&format!("{:>8}\n", self.failures));
        }
        out
    }
}

fn run_study(
    design: &SimDesign,
    candidates: &[Candidate],
    options: &FitOptions,
) -> Result<StudyTable> {
    design.validate()?;
    let labels: Vec<String> = candidates.iter().map(|c| c.label.clone()).collect();
    let outcomes: Vec<Option<(usize, usize, Vec<bool>)>> = (0..design.replicates)
        .into_par_iter()
        .map(|rep| {
            let data = simulate_dataset(design, rep);
            let opts = FitOptions {
                seed: mix_seed(design.seed, &[rep as u64, u64::MAX]),
                ..options.clone()
            };
            match select(&data, candidates, &opts) {
                Ok(report) => {
                    let idx = |label: &str| labels.iter().position(|l| l == label).unwrap();
                    let failed: Vec<bool> = report
                        .candidates
                        .iter()
                        .map(|c| c.error.is_some())
                        .collect();
                    Some((idx(&report.winner_aic), idx(&report.winner_bic), failed))
                }
                Err(_) => None,
            }
        })
        .collect();
    Ok(StudyTable::tally(design, labels, outcomes))
}

/// Correlation-structure selection frequencies over replicated datasets.
pub fn run_structure_study(
    design: &SimDesign,
    structures: &[CorrelationStructure],
    options: &FitOptions,
) -> Result<StudyTable> {
    let candidates: Vec<Candidate> = structures
        .iter()
        .map(|s| Candidate::structure_only(*s))
        .collect();
    run_study(design, &candidates, options)
}

/// Covariate-subset selection frequencies; every subset is fitted under the
/// given correlation structure.
pub fn run_variable_study(
    design: &SimDesign,
    subsets: &[(String, Vec<usize>)],
    structure: CorrelationStructure,
    options: &FitOptions,
) -> Result<StudyTable> {
    let candidates: Vec<Candidate> = subsets
        .iter()
        .map(|(label, cols)| Candidate {
            label: label.clone(),
            structure,
            columns: Some(cols.clone()),
        })
        .collect();
    run_study(design, &candidates, options)
}

/// The five nested covariate subsets of the variable-selection designs, in
/// the usual order: x1, x12, x13, x123, x1234.
pub fn variable_subsets() -> Vec<(String, Vec<usize>)> {
    vec![
        ("x1".into(), vec![0, 1]),
        ("x12".into(), vec![0, 1, 2]),
        ("x13".into(), vec![0, 1, 3]),
        ("x123".into(), vec![0, 1, 2, 3]),
        ("x1234".into(), vec![0, 1, 2, 3, 4]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reproducible_datasets() {
        let design = builtin_design("table3-ex", 20, 1, 7).unwrap();
        let a = simulate_dataset(&design, 0);
        let b = simulate_dataset(&design, 0);
        for (ca, cb) in a.clusters.iter().zip(&b.clusters) {
            assert_eq!(ca.y, cb.y);
            assert_eq!(ca.x, cb.x);
        }
        let c = simulate_dataset(&design, 1);
        assert!(a.clusters.iter().zip(&c.clusters).any(|(x, y)| x.y != y.y));
    }

    #[test]
    fn marginal_frequencies_match_model() {
        // Independence truth: each margin is Bernoulli(mu(nu)).
        let design = SimDesign {
            name: "marginal-check".into(),
            n: 30_000,
            d: 2,
            family: MarginFamily::BernoulliLogit,
            beta_true: vec![0.4],
            covariates: vec![CovariateSpec::Intercept],
            corr_true: CorrelationModel::independence(2),
            replicates: 1,
            seed: 5,
        };
        let data = simulate_dataset(&design, 0);
        let mu = MarginFamily::BernoulliLogit.mean(0.4);
        for j in 0..2 {
            let hits: usize = data.clusters.iter().filter(|c| c.y[j] == 1).count();
            let phat = hits as f64 / design.n as f64;
            let se = (mu * (1.0 - mu) / design.n as f64).sqrt();
            assert!(
                (phat - mu).abs() < 3.5 * se,
                "margin {j}: {phat} vs {mu} (se {se})"
            );
        }
        // Pairwise sample correlation of the responses is near zero.
        let mean: f64 = data
            .clusters
            .iter()
            .map(|c| (c.y[0] as f64 - mu) * (c.y[1] as f64 - mu))
            .sum::<f64>()
            / design.n as f64;
        assert!(mean.abs() < 3.5 * mu * (1.0 - mu) / (design.n as f64).sqrt());
    }

    #[test]
    fn joint_orthant_probability_matches_closed_form() {
        // Binary d = 2, nu = (0, 0), latent rho = 0.5:
        // P(1, 1) = Phi2(0, 0; 0.5) = 1/3.
        let design = SimDesign {
            name: "orthant-check".into(),
            n: 60_000,
            d: 2,
            family: MarginFamily::BernoulliLogit,
            beta_true: vec![0.0],
            covariates: vec![CovariateSpec::Intercept],
            corr_true: CorrelationModel::new(CorrelationStructure::Exchangeable, vec![0.5], 2)
                .unwrap(),
            replicates: 1,
            seed: 11,
        };
        let data = simulate_dataset(&design, 0);
        let hits = data
            .clusters
            .iter()
            .filter(|c| c.y[0] == 1 && c.y[1] == 1)
            .count();
        let phat = hits as f64 / design.n as f64;
        let target = 1.0 / 3.0;
        let se = (target * (1.0 - target) / design.n as f64).sqrt();
        assert!((phat - target).abs() < 3.5 * se, "{phat} vs {target}");
    }

    #[test]
    fn latent_draws_reproduce_truth_correlation() {
        // Correlation of simulated responses' latent normals: check through
        // the model-implied binary moments instead of raw z (not exposed).
        
        let design = SimDesign {
            name: "latent-corr".into(),
            n: 50_000,
            d: 3,
            family: MarginFamily::BernoulliLogit,
            beta_true: vec![0.0],
            covariates: vec![CovariateSpec::Intercept],
            corr_true: CorrelationModel::new(
                CorrelationStructure::Unstructured,
                vec![-0.5, -0.3, 0.3],
                3,
            )
            .unwrap(),
            replicates: 1,
            seed: 13,
        };
        let data = simulate_dataset(&design, 0);
        for (j, k, r) in [(0usize, 1usize, -0.5f64), (0, 2, -0.3), (1, 2, 0.3)] {
            let p11 = data
                .clusters
                .iter()
                .filter(|c| c.y[j] == 1 && c.y[k] == 1)
                .count() as f64
                / design.n as f64;
            let expected = crate::normal::bvn_cdf(0.0, 0.0, r);
            let se = (expected * (1.0 - expected) / design.n as f64).sqrt();
            assert!(
                (p11 - expected).abs() < 3.5 * se,
                "pair ({j},{k}): {p11} vs {expected}"
            );
        }
    }

    #[test]
    fn single_replicate_table_sums_to_one() {
        let design = builtin_design("table3-ex", 40, 1, 3).unwrap();
        let table = run_structure_study(
            &design,
            &[
                CorrelationStructure::Independence,
                CorrelationStructure::Exchangeable,
            ],
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(table.aic_counts.iter().sum::<usize>() + table.failures, 1);
        assert_eq!(table.bic_counts.iter().sum::<usize>() + table.failures, 1);
    }

    #[test]
    fn study_tables_are_reproducible() {
        let design = builtin_design("table3-ex", 30, 4, 17).unwrap();
        let structures = [
            CorrelationStructure::Independence,
            CorrelationStructure::Exchangeable,
            CorrelationStructure::Ar1,
        ];
        let a = run_structure_study(&design, &structures, &FitOptions::default()).unwrap();
        let b = run_structure_study(&design, &structures, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trivial_subset_always_wins() {
        let design = builtin_design("table4-ex", 30, 2, 19).unwrap();
        let table = run_variable_study(
            &design,
            &[("x12".into(), vec![0, 1, 2])],
            CorrelationStructure::Exchangeable,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(table.aic_counts[0] + table.failures, 2);
    }

    #[test]
    fn unknown_design_rejected() {
        assert!(builtin_design("table9-zz", 10, 1, 1).is_err());
        assert!(builtin_design("table3-ex", 10, 0, 1)
            .unwrap()
            .validate()
            .is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        let f = MarginFamily::PoissonLog;
        for &nu in &[-0.5, 0.4, 1.3] {
            for &u in &[0.01, 0.3, 0.77, 0.999] {
                let y = margin_quantile(f, u, nu);
                assert!(f.cdf(y as i64, nu) >= u);
                if y > 0 {
                    assert!(f.cdf(y as i64 - 1, nu) < u);
                }
            }
        }
        assert_abs_diff_eq!(
            margin_quantile(MarginFamily::BernoulliLogit, 0.9, 0.0) as f64,
            1.0
        );
    }
}
