//! The `compare` command: marginal-by-marginal differences between two runs.

use std::collections::BTreeMap;
use std::path::Path;

use laplace_mh::bma::read_grid_json;
use laplace_mh::laplace::MarginalGrid;
use laplace_mh::oracle::total_variation;
use serde::Serialize;

use crate::CliError;

const TV_POINTS: usize = 2001;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub sd_a: f64,
    pub sd_b: f64,
    /// `mean_b − mean_a`.
    pub mean_delta: f64,
    /// `sd_b − sd_a`.
    pub sd_delta: f64,
    pub total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Marginals present in only one of the two runs.
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
}

fn load_marginals(dir: &Path) -> Result<BTreeMap<String, MarginalGrid>, CliError> {
    let marginals = dir.join("marginals");
    let entries = std::fs::read_dir(&marginals)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", marginals.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let grid = read_grid_json(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            out.insert(grid.name.clone(), grid);
        }
    }
    Ok(out)
}

pub fn compare_dirs(a: &Path, b: &Path) -> Result<Comparison, CliError> {
    let ga = load_marginals(a)?;
    let gb = load_marginals(b)?;
    let rows: Vec<ComparisonRow> = ga
        .iter()
        .filter_map(|(name, x)| gb.get(name).map(|y| (name, x, y)))
        .map(|(name, x, y)| ComparisonRow {
            name: name.clone(),
            mean_a: x.mean(),
            mean_b: y.mean(),
            sd_a: x.sd(),
            sd_b: y.sd(),
            mean_delta: y.mean() - x.mean(),
            sd_delta: y.sd() - x.sd(),
            total_variation: total_variation(x, y, TV_POINTS),
        })
        .collect();
    if rows.is_empty() {
        return Err(CliError::Data(
            laplace_mh::Error::NameMismatch(format!(
                "{} and {} share no marginal names",
                a.display(),
                b.display()
            ))
            .to_string(),
        ));
    }
    Ok(Comparison {
        rows,
        only_a: ga.keys().filter(|k| !gb.contains_key(*k)).cloned().collect(),
        only_b: gb.keys().filter(|k| !ga.contains_key(*k)).cloned().collect(),
    })
}

impl Comparison {
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<width$}  {:>11} {:>11} {:>10} {:>10} {:>11} {:>10} {:>8}\n",
            "name", "mean_a", "mean_b", "sd_a", "sd_b", "mean_delta", "sd_delta", "tv"
        );
        for r in &self.rows {
            s += &format!(
                "{:<width$}  {:>11.4} {:>11.4} {:>10.4} {:>10.4} {:>11.4} {:>10.4} {:>8.4}\n",
                r.name, r.mean_a, r.mean_b, r.sd_a, r.sd_b, r.mean_delta, r.sd_delta, r.total_variation
            );
        }
        if !self.only_a.is_empty() {
            s += &format!("only in A: {}\n", self.only_a.join(", "));
        }
        if !self.only_b.is_empty() {
            s += &format!("only in B: {}\n", self.only_b.join(", "));
        }
        s
    }
}
