//! Reading area-level data tables and writing result tables.

use std::collections::HashMap;
use std::path::Path;

use crate::bma::Summary;
use crate::error::{Error, Result};
use crate::graphs::Adjacency;

/// Numeric columns keyed by an area id column.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl DataTable {
    pub fn new(ids: Vec<String>, columns: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if columns.len() != values.len() || values.iter().any(|c| c.len() != ids.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} column names, {} columns, {} ids",
                columns.len(),
                values.len(),
                ids.len()
            )));
        }
        Ok(Self {
            ids,
            columns,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|i| self.values[i].as_slice())
            .ok_or_else(|| Error::CovariateNotFound(name.to_string()))
    }

    /// Rows reordered to follow the area order of `adjacency`.
    pub fn aligned_to(&self, adjacency: &Adjacency) -> Result<Self> {
        if adjacency.n() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} table rows for {} areas",
                self.n(),
                adjacency.n()
            )));
        }
        let pos: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let order: Vec<usize> = adjacency
            .ids()
            .iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::NameMismatch(format!("area {id} missing from table")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: adjacency.ids().to_vec(),
            columns: self.columns.clone(),
            values: self
                .values
                .iter()
                .map(|col| order.iter().map(|&i| col[i]).collect())
                .collect(),
        })
    }
}

fn parse_number(text: &str, line: usize, column: &str) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column {column}: {text:?} is not a number"),
    })
}

/// Reads a CSV whose `id_column` holds area ids and whose other columns are
/// numeric.
pub fn read_table(path: impl AsRef<Path>, id_column: &str) -> Result<DataTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let id_pos = header
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| Error::CovariateNotFound(id_column.to_string()))?;
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_pos)
        .map(|(_, h)| h.clone())
        .collect();
    let mut ids = Vec::new();
    let mut values = vec![Vec::new(); columns.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        ids.push(record.get(id_pos).unwrap_or("").trim().to_string());
        let mut k = 0;
        for (i, field) in record.iter().enumerate() {
            if i == id_pos {
                continue;
            }
            values[k].push(parse_number(field, line, &header[i])?);
            k += 1;
        }
    }
    DataTable::new(ids, columns, values)
}

/// Observed and expected counts in long format: one row per area and
/// disease.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub diseases: Vec<String>,
    pub ids: Vec<String>,
    /// `observed[d][i]` for disease `d` and area `i`.
    pub observed: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
}

/// Reads columns `id, disease, observed, expected`, arranging areas in the
/// order of `adjacency` and diseases in order of first appearance.
pub fn read_counts(path: impl AsRef<Path>, adjacency: &Adjacency) -> Result<CountTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::CovariateNotFound(name.to_string()))
    };
    let (ci, cd, co, ce) = (col("id")?, col("disease")?, col("observed")?, col("expected")?);
    let n = adjacency.n();
    let mut diseases: Vec<String> = Vec::new();
    let mut observed: Vec<Vec<Option<f64>>> = Vec::new();
    let mut expected: Vec<Vec<Option<f64>>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let id = field(ci);
        let area = adjacency
            .index_of(&id)
            .ok_or_else(|| Error::NameMismatch(format!("area {id} is not in the adjacency")))?;
        let disease = field(cd);
        let d = match diseases.iter().position(|x| *x == disease) {
            Some(d) => d,
            None => {
                diseases.push(disease);
                observed.push(vec![None; n]);
                expected.push(vec![None; n]);
                diseases.len() - 1
            }
        };
        if observed[d][area].is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for area {id}"),
            });
        }
        observed[d][area] = Some(parse_number(&field(co), line, "observed")?);
        expected[d][area] = Some(parse_number(&field(ce), line, "expected")?);
    }
    let complete = |m: Vec<Vec<Option<f64>>>| -> Result<Vec<Vec<f64>>> {
        m.into_iter()
            .enumerate()
            .map(|(d, col)| {
                col.into_iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.ok_or_else(|| {
                            Error::NameMismatch(format!(
                                "no row for area {} and disease {}",
                                adjacency.ids()[i],
                                diseases[d]
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    };
    let observed = complete(observed)?;
    let expected = complete(expected)?;
    Ok(CountTable {
        ids: adjacency.ids().to_vec(),
        diseases,
        observed,
        expected,
    })
}

pub fn write_counts(table: &CountTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "disease", "observed", "expected"])?;
    for (d, name) in table.diseases.iter().enumerate() {
        for (i, id) in table.ids.iter().enumerate() {
            w.write_record([
                id.clone(),
                name.clone(),
                table.observed[d][i].to_string(),
                table.expected[d][i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `name,mean,sd,q025,q50,q975` rows.
pub fn write_summaries(rows: &[Summary], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "mean", "sd", "q025", "q50", "q975"])?;
    for s in rows {
        w.write_record([
            s.name.clone(),
            s.mean.to_string(),
            s.sd.to_string(),
            s.q025.to_string(),
            s.q50.to_string(),
            s.q975.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries(path: impl AsRef<Path>) -> Result<Vec<Summary>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize, c: &str| parse_number(rec.get(i).unwrap_or(""), row + 2, c);
        out.push(Summary {
            name: rec.get(0).unwrap_or("").to_string(),
            mean: num(1, "mean")?,
            sd: num(2, "sd")?,
            q025: num(3, "q025")?,
            q50: num(4, "q50")?,
            q975: num(5, "q975")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "id,a,b\n2,1.5,3\n1,0.5,-1\n3,2,7\n").unwrap();
        let t = read_table(&p, "id").unwrap();
        assert_eq!(t.column("b").unwrap(), &[3.0, -1.0, 7.0]);
        let adj = Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let a = t.aligned_to(&adj).unwrap();
        assert_eq!(a.column("a").unwrap(), &[0.5, 1.5, 2.0]);
        assert!(matches!(t.column("c"), Err(Error::CovariateNotFound(_))));
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "id,a\n1,0.5\n2,x\n").unwrap();
        assert!(matches!(read_table(&p, "id"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn counts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let adj = Adjacency::from_edges(2, &[(0, 1)]).unwrap();
        let t = CountTable {
            diseases: vec!["a".into(), "b".into()],
            ids: adj.ids().to_vec(),
            observed: vec![vec![1.0, 4.0], vec![0.0, 2.0]],
            expected: vec![vec![1.25, 3.5], vec![0.5, 2.25]],
        };
        write_counts(&t, &p).unwrap();
        assert_eq!(read_counts(&p, &adj).unwrap(), t);
    }
}
