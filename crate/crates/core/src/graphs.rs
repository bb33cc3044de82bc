//! Lattice adjacency: GAL ingestion and spatial weights.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spmat::{eigenvalues_dense, EigenSet};

/// Symmetric neighbour structure over `n` labelled regions.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Validates symmetry, self-loops and index bounds. Neighbour lists are
    /// kept in the given order with duplicates removed.
    pub fn new(ids: Vec<String>, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = ids.len();
        if neighbors.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} neighbour lists for {} regions",
                neighbors.len(),
                n
            )));
        }
        let mut clean = Vec::with_capacity(n);
        for (i, nb) in neighbors.into_iter().enumerate() {
            let mut seen = Vec::with_capacity(nb.len());
            for j in nb {
                if j >= n {
                    return Err(Error::DimensionMismatch(format!(
                        "neighbour index {j} of region {} out of range",
                        ids[i]
                    )));
                }
                if j == i {
                    return Err(Error::Parse {
                        line: 0,
                        message: format!("region {} lists itself as a neighbour", ids[i]),
                    });
                }
                if !seen.contains(&j) {
                    seen.push(j);
                }
            }
            clean.push(seen);
        }
        for (i, nb) in clean.iter().enumerate() {
            for &j in nb {
                if !clean[j].contains(&i) {
                    return Err(Error::Asymmetry(ids[i].clone(), ids[j].clone()));
                }
            }
        }
        Ok(Self {
            ids,
            neighbors: clean,
        })
    }

    /// Builds from an undirected edge list with ids `"1".."n"`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut nb = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch(format!("edge ({i}, {j})")));
            }
            if !nb[i].contains(&j) {
                nb[i].push(j);
            }
            if !nb[j].contains(&i) {
                nb[j].push(i);
            }
        }
        Self::new((1..=n).map(|i| i.to_string()).collect(), nb)
    }

    /// Rook adjacency on a `rows × cols` regular lattice, row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges).expect("lattice edges are valid")
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// Connected components, each as a sorted index list, ordered by their
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut members = vec![start];
            label[start] = id;
            let mut head = 0;
            while head < members.len() {
                let v = members[head];
                head += 1;
                for &u in &self.neighbors[v] {
                    if label[u] == usize::MAX {
                        label[u] = id;
                        members.push(u);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }

    /// Binary adjacency as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                a[(i, j)] = 1.0;
            }
        }
        a
    }
}

/// Parses GAL text: a header whose last token is the region count, then per
/// region a line `id k` followed by a line with `k` neighbour ids. Lines
/// starting with `%` are comments.
pub fn parse_gal(text: &str) -> Result<Adjacency> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('%'));

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 0,
        message: "empty GAL file".into(),
    })?;
    let count_tok = header.split_whitespace().last().unwrap_or("");
    // Some writers emit "0 n shapefile key"; the count is then the second token.
    let toks: Vec<&str> = header.split_whitespace().collect();
    let count_tok = if toks.len() == 4 { toks[1] } else { count_tok };
    let n: usize = count_tok.parse().map_err(|_| Error::Parse {
        line: hline,
        message: format!("bad region count {count_tok:?}"),
    })?;

    let mut ids = Vec::with_capacity(n);
    let mut raw: Vec<(usize, Vec<String>)> = Vec::with_capacity(n);
    for _ in 0..n {
        let (lno, head) = lines.next().ok_or(Error::Parse {
            line: hline,
            message: format!("expected {n} regions, file ended after {}", ids.len()),
        })?;
        let mut it = head.split_whitespace();
        let id = it.next().unwrap().to_string();
        let k: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: lno,
                message: format!("expected '<id> <count>', got {head:?}"),
            })?;
        let nb: Vec<String> = if k == 0 {
            Vec::new()
        } else {
            let (nlno, body) = lines.next().ok_or(Error::Parse {
                line: lno,
                message: format!("missing neighbour line for region {id}"),
            })?;
            let nb: Vec<String> = body.split_whitespace().map(str::to_string).collect();
            if nb.len() != k {
                return Err(Error::Parse {
                    line: nlno,
                    message: format!("region {id} declares {k} neighbours, found {}", nb.len()),
                });
            }
            nb
        };
        if ids.contains(&id) {
            return Err(Error::Parse {
                line: lno,
                message: format!("duplicate region id {id}"),
            });
        }
        ids.push(id);
        raw.push((lno, nb));
    }

    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut neighbors = Vec::with_capacity(n);
    for (lno, nb) in &raw {
        let mut v = Vec::with_capacity(nb.len());
        for s in nb {
            let j = *index.get(s.as_str()).ok_or_else(|| Error::Parse {
                line: lno + 1,
                message: format!("unknown neighbour id {s}"),
            })?;
            v.push(j);
        }
        neighbors.push(v);
    }
    Adjacency::new(ids, neighbors)
}

pub fn read_gal(path: impl AsRef<Path>) -> Result<Adjacency> {
    parse_gal(&std::fs::read_to_string(path)?)
}

pub fn format_gal(a: &Adjacency) -> String {
    let mut s = format!("{}\n", a.n());
    for i in 0..a.n() {
        let _ = writeln!(s, "{} {}", a.ids[i], a.degree(i));
        if a.degree(i) > 0 {
            let nb: Vec<&str> = a.neighbors[i].iter().map(|&j| a.ids[j].as_str()).collect();
            let _ = writeln!(s, "{}", nb.join(" "));
        }
    }
    s
}

pub fn write_gal(a: &Adjacency, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_gal(a))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightStyle {
    Binary,
    RowStandardized,
}

/// Spatial weights with their spectrum cached.
#[derive(Debug, Clone)]
pub struct WeightsMatrix {
    style: WeightStyle,
    rows: Vec<Vec<(usize, f64)>>,
    eigs: EigenSet,
}

impl WeightsMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn style(&self) -> WeightStyle {
        self.style
    }

    pub fn eigenvalues(&self) -> &EigenSet {
        &self.eigs
    }

    /// Open interval `(1/λ_min, 1/λ_max)` on which `I − ρW` is nonsingular.
    pub fn support(&self) -> (f64, f64) {
        (1.0 / self.eigs.min(), 1.0 / self.eigs.max())
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                d[(i, j)] = w;
            }
        }
        d
    }
}

/// Row-standardised weights: `W[i][j] = 1/nᵢ` for neighbours. Islands keep a
/// zero row.
pub fn row_standardize(a: &Adjacency) -> Result<WeightsMatrix> {
    let rows: Vec<Vec<(usize, f64)>> = (0..a.n())
        .map(|i| {
            let k = a.degree(i) as f64;
            a.neighbors(i).iter().map(|&j| (j, 1.0 / k)).collect()
        })
        .collect();
    build_weights(rows, WeightStyle::RowStandardized)
}

pub fn binary_weights(a: &Adjacency) -> Result<WeightsMatrix> {
    let rows = (0..a.n())
        .map(|i| a.neighbors(i).iter().map(|&j| (j, 1.0)).collect())
        .collect();
    build_weights(rows, WeightStyle::Binary)
}

fn build_weights(rows: Vec<Vec<(usize, f64)>>, style: WeightStyle) -> Result<WeightsMatrix> {
    let mut w = WeightsMatrix {
        style,
        rows,
        eigs: EigenSet::new(Vec::new()),
    };
    w.eigs = eigenvalues_dense(&w.to_dense())?;
    Ok(w)
}
