//! Data ingestion and report emission.
//!
//! Input tables are comma-separated text with a header. Three columns are
//! role-tagged by name: `cluster` (subject id), `occasion` (1-based integer
//! index), and `y` (response); every other column is a numeric covariate.
//! Missing occasions are simply absent rows (dropout), never imputed.

use crate::corr::CorrelationModel;
use crate::data::{Cluster, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::margins::MarginFamily;
use crate::weights::WeightedScoresFit;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Parsed table: the dataset plus the covariate names actually used.
#[derive(Debug, Clone)]
pub struct ParsedTable {
    pub data: LongitudinalDataset,
    pub covariate_names: Vec<String>,
}

/// Read a dataset from a delimited file. When `covariates` is given, only
/// those columns are kept, in the given order; otherwise all non-role
/// columns are used in file order. `intercept` prepends a constant column.
pub fn parse_input(
    path: &Path,
    family: MarginFamily,
    covariates: Option<&[String]>,
    intercept: bool,
) -> Result<ParsedTable> {
    let text = std::fs::read_to_string(path)?;
    parse_input_str(&text, family, covariates, intercept)
}

pub fn parse_input_str(
    text: &str,
    family: MarginFamily,
    covariates: Option<&[String]>,
    intercept: bool,
) -> Result<ParsedTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        row: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter().position(|c| c == name).ok_or_else(|| Error::Parse {
            row: 1,
            msg: format!("header must contain a '{name}' column"),
        })
    };
    let c_cluster = find("cluster")?;
    let c_occasion = find("occasion")?;
    let c_y = find("y")?;
    let role = [c_cluster, c_occasion, c_y];
    let file_covs: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter(|(i, _)| !role.contains(i))
        .map(|(i, n)| (i, n.clone()))
        .collect();
    let selected: Vec<(usize, String)> = match covariates {
        None => file_covs.clone(),
        Some(wanted) => wanted
            .iter()
            .map(|w| {
                file_covs
                    .iter()
                    .find(|(_, n)| n == w)
                    .cloned()
                    .ok_or_else(|| Error::Parse {
                        row: 1,
                        msg: format!("covariate column '{w}' not found"),
                    })
            })
            .collect::<Result<_>>()?,
    };

    struct Row {
        occasion: usize,
        y: u64,
        covs: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    let mut seen: HashMap<(String, usize), usize> = HashMap::new();
    for (idx, line) in lines {
        let rowno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                row: rowno,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let id = fields[c_cluster].to_string();
        let occasion: usize = fields[c_occasion].parse().map_err(|_| Error::Parse {
            row: rowno,
            msg: format!("occasion '{}' is not a positive integer", fields[c_occasion]),
        })?;
        if occasion == 0 {
            return Err(Error::Parse {
                row: rowno,
                msg: "occasion indices are 1-based".into(),
            });
        }
        let y: i64 = fields[c_y].parse().map_err(|_| Error::Parse {
            row: rowno,
            msg: format!("response '{}' is not an integer", fields[c_y]),
        })?;
        if y < 0 || !family.supports(y as u64) {
            return Err(Error::UnsupportedResponse {
                y,
                family: family.name().to_string(),
                row: rowno,
            });
        }
        if let Some(prev) = seen.insert((id.clone(), occasion), rowno) {
            return Err(Error::Parse {
                row: rowno,
                msg: format!(
                    "duplicate (cluster, occasion) = ({id}, {occasion}); first seen at row {prev}"
                ),
            });
        }
        let covs: Vec<f64> = selected
            .iter()
            .map(|(i, name)| {
                fields[*i].parse::<f64>().map_err(|_| Error::Parse {
                    row: rowno,
                    msg: format!("covariate '{name}' value '{}' is not numeric", fields[*i]),
                })
            })
            .collect::<Result<_>>()?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row {
            occasion,
            y: y as u64,
            covs,
        });
    }
    if order.is_empty() {
        return Err(Error::Parse {
            row: 2,
            msg: "no data rows".into(),
        });
    }

    let mut names: Vec<String> = Vec::new();
    if intercept {
        names.push("(intercept)".into());
    }
    names.extend(selected.iter().map(|(_, n)| n.clone()));
    let p = names.len();

    let clusters: Vec<Cluster> = order
        .iter()
        .map(|id| {
            let mut rows = groups.remove(id).unwrap();
            rows.sort_by_key(|r| r.occasion);
            let d = rows.len();
            let mut x = Array2::zeros((d, p));
            for (r, row) in rows.iter().enumerate() {
                let mut c = 0;
                if intercept {
                    x[[r, 0]] = 1.0;
                    c = 1;
                }
                for v in &row.covs {
                    x[[r, c]] = *v;
                    c += 1;
                }
            }
            Cluster {
                occasions: rows.iter().map(|r| r.occasion).collect(),
                y: rows.iter().map(|r| r.y).collect(),
                x,
            }
        })
        .collect();
    let data = LongitudinalDataset::new(clusters, family, p)?;
    Ok(ParsedTable {
        data,
        covariate_names: names,
    })
}

/// Write a dataset back to the input format. Cluster ids are row indices;
/// the intercept column (if present in `names`) is not written.
pub fn write_dataset(
    path: &Path,
    data: &LongitudinalDataset,
    names: &[String],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("cluster,occasion,y");
    let skip_intercept = names.first().map(|n| n == "(intercept)").unwrap_or(false);
    let written: Vec<(usize, &String)> = names
        .iter()
        .enumerate()
        .skip(usize::from(skip_intercept))
        .collect();
    for (_, n) in &written {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (id, cl) in data.clusters.iter().enumerate() {
        for r in 0..cl.len() {
            out.push_str(&format!("{},{},{}", id, cl.occasions[r], cl.y[r]));
            for (c, _) in &written {
                out.push_str(&format!(",{}", fmt_full(cl.x[[r, *c]])));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Shortest representation that round-trips the f64 exactly.
fn fmt_full(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // Rust's float Display is shortest-round-trip already.
    format!("{v}")
}

/// Six-significant-digit formatting for human-readable tables.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).clamp(0, 17) as usize;
    format!("{v:.decimals$}")
}

/// Full fit report: stage-1/stage-2 estimates and the weighted-scores
/// solution with robust standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub family: String,
    pub structure: String,
    pub covariates: Vec<String>,
    pub beta_cl1: Vec<f64>,
    pub corr_params: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub ws_iterations: usize,
    pub converged: bool,
    pub boundary: bool,
}

impl FitRecord {
    pub fn new(
        family: MarginFamily,
        corr: &CorrelationModel,
        covariates: &[String],
        cl1: &crate::cl1::Cl1Fit,
        ws: &WeightedScoresFit,
    ) -> Self {
        FitRecord {
            family: family.name().to_string(),
            structure: corr.structure.name().to_string(),
            covariates: covariates.to_vec(),
            beta_cl1: cl1.beta.to_vec(),
            corr_params: corr.params.clone(),
            l1: cl1.l1,
            l2: cl1.l2,
            beta: ws.beta.to_vec(),
            se: ws.se.to_vec(),
            stage1_iterations: cl1.stage1_iterations,
            stage2_iterations: cl1.stage2_iterations,
            ws_iterations: ws.iterations,
            converged: ws.converged && cl1.converged,
            boundary: cl1.boundary,
        }
    }

    /// Human-readable table, 6 significant digits.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "weighted scores fit: family = {}, structure = {}\n",
            self.family, self.structure
        ));
        out.push_str(&format!("{:<16}{:>14}{:>14}\n", "covariate", "Est.", "SE"));
        for ((name, est), se) in self.covariates.iter().zip(&self.beta).zip(&self.se) {
            out.push_str(&format!(
                "{:<16}{:>14}{:>14}\n",
                name,
                sig6(*est),
                sig6(*se)
            ));
        }
        if !self.corr_params.is_empty() {
            let rhos: Vec<String> = self.corr_params.iter().map(|r| sig6(*r)).collect();
            out.push_str(&format!("rho             {}\n", rhos.join(", ")));
        }
        out.push_str(&format!(
            "L1 = {}, L2 = {}\n",
            sig6(self.l1),
            sig6(self.l2)
        ));
        out.push_str(&format!(
            "iterations: stage1 = {}, stage2 = {}, weighted = {}; converged = {}{}\n",
            self.stage1_iterations,
            self.stage2_iterations,
            self.ws_iterations,
            self.converged,
            if self.boundary {
                " (dependence parameter at boundary)"
            } else {
                ""
            }
        ));
        out
    }
}

/// Render a selection report as a criterion-by-candidate table with the
/// minimum flagged.
pub fn render_selection(report: &crate::godambe::SelectionReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "model selection over {} candidates (n = {})\n",
        report.candidates.len(),
        report.n_clusters
    ));
    out.push_str(&format!(
        "{:<10}{:>14}{:>14}{:>14}{:>10}\n",
        "candidate", "CL1AIC", "CL1BIC", "-2*L2", "trace"
    ));
    for c in &report.candidates {
        if let Some(err) = &c.error {
            out.push_str(&format!("{:<10}failed: {err}\n", c.label));
            continue;
        }
        let aic_flag = if c.label == report.winner_aic { "*" } else { " " };
        let bic_flag = if c.label == report.winner_bic { "*" } else { " " };
        out.push_str(&format!(
            "{:<10}{:>13}{aic_flag}{:>13}{bic_flag}{:>14}{:>10}\n",
            c.label,
            sig6(c.aic),
            sig6(c.bic),
            sig6(-2.0 * c.l2),
            sig6(c.trace),
        ));
    }
    out.push_str(&format!(
        "winner: CL1AIC -> {}, CL1BIC -> {}\n",
        report.winner_aic, report.winner_bic
    ));
    out
}

/// Append one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr::CorrelationStructure;
    use crate::sim::{builtin_design, simulate_dataset};

    const SAMPLE: &str = "cluster,occasion,y,treat,time\n\
        a,1,0,1,0\n\
        a,2,1,1,1\n\
        a,3,1,1,2\n\
        b,1,0,0,0\n\
        b,3,1,0,2\n";

    #[test]
    fn parses_clusters_and_dropout() {
        let t = parse_input_str(SAMPLE, MarginFamily::BernoulliLogit, None, true).unwrap();
        assert_eq!(t.data.n(), 2);
        assert_eq!(t.data.p, 3);
        assert_eq!(t.data.clusters[1].occasions, vec![1, 3]);
        assert_eq!(t.covariate_names[0], "(intercept)");
        // Single cluster file.
        let single = "cluster,occasion,y\nc,1,0\nc,2,1\nc,3,0\n";
        let t = parse_input_str(single, MarginFamily::BernoulliLogit, None, false).unwrap();
        assert_eq!(t.data.n(), 1);
        assert_eq!(t.data.clusters[0].len(), 3);
    }

    #[test]
    fn rejects_bad_rows_with_numbers() {
        let bad_y = "cluster,occasion,y\na,1,2\n";
        match parse_input_str(bad_y, MarginFamily::BernoulliLogit, None, false) {
            Err(Error::UnsupportedResponse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected unsupported response, got {other:?}"),
        }
        let dup = "cluster,occasion,y\na,1,0\na,1,1\n";
        match parse_input_str(dup, MarginFamily::BernoulliLogit, None, false) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let non_numeric = "cluster,occasion,y,x\na,1,0,oops\n";
        assert!(matches!(
            parse_input_str(non_numeric, MarginFamily::BernoulliLogit, None, false),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn covariate_selection_by_name() {
        let t = parse_input_str(
            SAMPLE,
            MarginFamily::BernoulliLogit,
            Some(&["time".to_string()]),
            true,
        )
        .unwrap();
        assert_eq!(t.covariate_names, vec!["(intercept)", "time"]);
        assert_eq!(t.data.p, 2);
        assert!(parse_input_str(
            SAMPLE,
            MarginFamily::BernoulliLogit,
            Some(&["nope".to_string()]),
            true
        )
        .is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let design = builtin_design("table4-ex", 12, 1, 23).unwrap();
        let data = simulate_dataset(&design, 0);
        let names: Vec<String> = (0..data.p).map(|i| format!("x{i}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset(&path, &data, &names).unwrap();
        let parsed = parse_input(&path, data.family, None, false).unwrap();
        assert_eq!(parsed.data.n(), data.n());
        for (a, b) in data.clusters.iter().zip(&parsed.data.clusters) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.occasions, b.occasions);
            for r in 0..a.len() {
                for c in 0..data.p {
                    assert_eq!(a.x[[r, c]], b.x[[r, c]], "bit-exact round trip");
                }
            }
        }
    }

    #[test]
    fn fit_record_json_round_trip_is_bit_exact() {
        let rec = FitRecord {
            family: "logit".into(),
            structure: "exch".into(),
            covariates: vec!["(intercept)".into()],
            beta_cl1: vec![0.123_456_789_012_345_68],
            corr_params: vec![0.5000000000000001],
            l1: -12.000000000000075,
            l2: -23.999999999999996,
            beta: vec![std::f64::consts::PI],
            se: vec![0.1],
            stage1_iterations: 3,
            stage2_iterations: 5,
            ws_iterations: 4,
            converged: true,
            boundary: false,
        };
        let line = serde_json::to_string(&rec).unwrap();
        let back: FitRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(rec.beta[0].to_bits(), back.beta[0].to_bits());
        assert_eq!(rec.l1.to_bits(), back.l1.to_bits());
        assert_eq!(rec.corr_params[0].to_bits(), back.corr_params[0].to_bits());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(1234.5678), "1234.57");
        assert_eq!(sig6(0.00123456789), "0.00123457");
        assert_eq!(sig6(-3.0), "-3.00000");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn selection_render_marks_winner() {
        let design = builtin_design("table3-ex", 40, 1, 29).unwrap();
        let data = simulate_dataset(&design, 0);
        let report = crate::godambe::select(
            &data,
            &[
                crate::godambe::Candidate::structure_only(CorrelationStructure::Independence),
                crate::godambe::Candidate::structure_only(CorrelationStructure::Exchangeable),
            ],
            &crate::cl1::FitOptions::default(),
        )
        .unwrap();
        let text = render_selection(&report);
        assert!(text.contains("winner"));
        assert!(text.contains('*'));
    }
}
