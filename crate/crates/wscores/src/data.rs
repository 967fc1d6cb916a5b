//! Clustered/longitudinal data containers.

use crate::error::{Error, Result};
use crate::margins::MarginFamily;
use ndarray::{Array1, Array2};

/// Repeated measurements on one subject: sorted 1-based occasion indices,
/// responses, and the d_i x p covariate matrix.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub occasions: Vec<usize>,
    pub y: Vec<u64>,
    pub x: Array2<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Linear predictors x_ij' beta for every observation in the cluster.
    pub fn linear_predictors(&self, beta: &Array1<f64>) -> Vec<f64> {
        self.x.dot(beta).to_vec()
    }
}

/// A full dataset: clusters sharing one margin family and covariate layout.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    pub clusters: Vec<Cluster>,
    pub family: MarginFamily,
    pub p: usize,
}

impl LongitudinalDataset {
    pub fn new(clusters: Vec<Cluster>, family: MarginFamily, p: usize) -> Result<Self> {
        let data = LongitudinalDataset {
            clusters,
            family,
            p,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, cl) in self.clusters.iter().enumerate() {
            if cl.is_empty() {
                return Err(Error::Config(format!("cluster {i} is empty")));
            }
            if cl.y.len() != cl.occasions.len() || cl.x.nrows() != cl.y.len() {
                return Err(Error::Config(format!(
                    "cluster {i}: responses, occasions, and covariate rows disagree"
                )));
            }
            if cl.x.ncols() != self.p {
                return Err(Error::Config(format!(
                    "cluster {i}: expected {} covariate columns, got {}",
                    self.p,
                    cl.x.ncols()
                )));
            }
            if cl.occasions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "cluster {i}: occasion indices must be sorted and distinct"
                )));
            }
            if cl.occasions.first().is_some_and(|&o| o == 0) {
                return Err(Error::Config(format!(
                    "cluster {i}: occasion indices are 1-based"
                )));
            }
            for (k, &y) in cl.y.iter().enumerate() {
                if !self.family.supports(y) {
                    return Err(Error::UnsupportedResponse {
                        y: y as i64,
                        family: self.family.name().to_string(),
                        row: k,
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of clusters.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations.
    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    /// Largest occasion index present.
    pub fn d_max(&self) -> usize {
        self.clusters
            .iter()
            .filter_map(|c| c.occasions.last().copied())
            .max()
            .unwrap_or(0)
    }

    /// New dataset keeping only the given covariate columns (in the given
    /// order); used for covariate-subset candidates.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.iter().any(|&c| c >= self.p) {
            return Err(Error::Config(format!(
                "covariate column out of range (p = {})",
                self.p
            )));
        }
        let clusters = self
            .clusters
            .iter()
            .map(|cl| {
                let mut x = Array2::zeros((cl.len(), cols.len()));
                for (new_c, &old_c) in cols.iter().enumerate() {
                    for r in 0..cl.len() {
                        x[[r, new_c]] = cl.x[[r, old_c]];
                    }
                }
                Cluster {
                    occasions: cl.occasions.clone(),
                    y: cl.y.clone(),
                    x,
                }
            })
            .collect();
        LongitudinalDataset::new(clusters, self.family, cols.len())
    }
}
