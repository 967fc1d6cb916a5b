//! Weighted-scores regression for longitudinal and clustered discrete data.
//!
//! Marginal generalized linear models (Bernoulli with logit or probit link,
//! Poisson with log link) are combined with a working discretized
//! multivariate-normal model: univariate score equations are weighted by the
//! inverse covariance of the scores under the working model, giving
//! population-averaged coefficient estimates with sandwich standard errors.
//! Latent correlation structures and covariate subsets are compared with the
//! composite-likelihood information criteria CL1AIC and CL1BIC.
//!
//! The narrative guide in `book/` walks through the model and the API; its
//! code snippets compile and run as doctests of this crate, so guide and
//! library cannot drift apart.
//!
//! ```
//! use wscores::{fit_weighted_scores, CorrelationStructure, FitOptions};
//! use wscores::sim::{builtin_design, simulate_dataset};
//!
//! let design = builtin_design("table3-ex", 50, 1, 9).unwrap();
//! let data = simulate_dataset(&design, 0);
//! let (cl1, ws) =
//!     fit_weighted_scores(&data, CorrelationStructure::Exchangeable, &FitOptions::default())
//!         .unwrap();
//! assert!(cl1.converged && ws.converged);
//! assert_eq!(ws.beta.len(), 3);
//! ```

pub mod cl1;
pub mod corr;
pub mod data;
pub mod error;
pub mod godambe;
pub mod io;
pub mod linalg;
pub mod margins;
pub mod mvn;
pub mod normal;
pub mod quad;
pub mod seeding;
pub mod sim;
pub mod special;
pub mod weights;

pub use cl1::{fit_cl1, Cl1Fit, FitOptions};
pub use corr::{CorrelationModel, CorrelationStructure};
pub use data::{Cluster, LongitudinalDataset};
pub use error::{Error, Result};
pub use godambe::{cl1_criteria, select, Candidate, GodambeMatrices, SelectionReport};
pub use margins::MarginFamily;
pub use weights::{solve_weighted_scores, WeightedScoresFit};

/// Run both estimation stages: the CL1 fit and the weighted-scores solve.
pub fn fit_weighted_scores(
    data: &LongitudinalDataset,
    structure: CorrelationStructure,
    options: &FitOptions,
) -> Result<(Cl1Fit, WeightedScoresFit)> {
    let cl1 = fit_cl1(data, structure, options)?;
    let ws = solve_weighted_scores(data, &cl1, options)?;
    Ok((cl1, ws))
}

// The guide's code blocks run as doctests of this crate.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Margins, "../../../book/src/margins.md");
    chapter!(LatentModel, "../../../book/src/latent-model.md");
    chapter!(Estimation, "../../../book/src/estimation.md");
    chapter!(ModelSelection, "../../../book/src/model-selection.md");
    chapter!(Simulation, "../../../book/src/simulation.md");
    chapter!(Cli, "../../../book/src/cli.md");
}
