//! Sparse symmetric matrices, Cholesky factorisation and the small dense
//! eigenvalue helpers used for spatial weights.
//!
//! The factorisation is a simplicial up-looking Cholesky over an upper
//! triangular CSC layout. Symbolic analysis (ordering, elimination tree,
//! column counts) is separated from the numeric phase so that callers which
//! refactor the same pattern many times, such as the Newton loop in
//! [`crate::laplace`], pay for it once.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative pivot tolerance: a pivot at or below `PIVOT_TOL * max(diag)` is
/// reported as [`Error::NotPositiveDefinite`].
pub const PIVOT_TOL: f64 = 1e-12;

/// Below this dimension [`cholesky`] factors densely.
pub const DENSE_FALLBACK: usize = 500;

/// Largest matrix accepted by [`eigenvalues_dense`] unless a limit is given.
pub const DENSE_EIGEN_LIMIT: usize = 2000;

const NONE: usize = usize::MAX;

/// Symmetric matrix stored as its upper triangle (`row <= col`).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl SparseSym {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::new(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.entries.insert((i, i), v);
        }
        m
    }

    /// Builds a matrix from triplets. Either triangle may be given; entries
    /// addressing the same unordered pair are summed.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut m = Self::new(n);
        for (i, j, v) in triplets {
            m.add(i, j, v)?;
        }
        Ok(m)
    }

    /// Upper triangle of a dense matrix; the lower triangle is ignored.
    pub fn from_dense(d: &DMatrix<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix is not square",
                d.nrows(),
                d.ncols()
            )));
        }
        let n = d.nrows();
        let mut m = Self::new(n);
        for j in 0..n {
            for i in 0..=j {
                let v = d[(i, j)];
                if v != 0.0 {
                    m.entries.insert((i, j), v);
                }
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored upper-triangle entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::DimensionMismatch(format!(
                "entry ({i}, {j}) outside {}x{}",
                self.n, self.n
            )));
        }
        let key = (i.min(j), i.max(j));
        *self.entries.entry(key).or_insert(0.0) += v;
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .get(&(i.min(j), i.max(j)))
            .copied()
            .unwrap_or(0.0)
    }

    /// Upper-triangle entries in column-major order of the key.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|(&k, &v)| (k, a * v)).collect(),
        }
    }

    /// `self + a * other`.
    pub fn add_scaled(&self, other: &SparseSym, a: f64) -> Result<Self> {
        if other.n != self.n {
            return Err(Error::DimensionMismatch(format!(
                "adding {}x{} to {}x{}",
                other.n, other.n, self.n, self.n
            )));
        }
        let mut out = self.clone();
        for (&k, &v) in &other.entries {
            *out.entries.entry(k).or_insert(0.0) += a * v;
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for (&(i, j), &v) in &self.entries {
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
        d
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against dimension {}",
                x.len(),
                self.n
            )));
        }
        let mut y = vec![0.0; self.n];
        for (&(i, j), &v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        Ok(y)
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|(&(i, j), &v)| {
                if i == j {
                    v * x[i] * x[i]
                } else {
                    2.0 * v * x[i] * x[j]
                }
            })
            .sum()
    }

    /// Largest absolute diagonal entry.
    pub fn max_diag(&self) -> f64 {
        (0..self.n)
            .map(|i| self.get(i, i).abs())
            .fold(0.0, f64::max)
    }
}

/// Fill-reducing ordering applied before factorisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Natural,
    MinimumDegree,
}

/// Pattern analysis shared by every numeric factorisation of one sparsity
/// structure.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    dense: bool,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    /// `iperm[old] = new`.
    iperm: Vec<usize>,
    // upper CSC layout of the permuted matrix
    a_colptr: Vec<usize>,
    a_rowidx: Vec<usize>,
    parent: Vec<usize>,
    l_colptr: Vec<usize>,
    slots: HashMap<(usize, usize), usize>,
}

impl SymbolicCholesky {
    /// Analyses the upper-triangle pattern `pattern` (original indices,
    /// either triangle). The diagonal is always included.
    pub fn analyze(
        n: usize,
        pattern: impl IntoIterator<Item = (usize, usize)>,
        ordering: Ordering,
        dense: bool,
    ) -> Result<Self> {
        let mut set: HashSet<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for (i, j) in pattern {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch(format!(
                    "pattern entry ({i}, {j}) outside dimension {n}"
                )));
            }
            set.insert((i.min(j), i.max(j)));
        }
        if dense {
            let mut slots = HashMap::with_capacity(set.len());
            for &(i, j) in &set {
                slots.insert((i, j), j * n + i);
            }
            return Ok(Self {
                n,
                dense: true,
                perm: (0..n).collect(),
                iperm: (0..n).collect(),
                a_colptr: Vec::new(),
                a_rowidx: Vec::new(),
                parent: Vec::new(),
                l_colptr: Vec::new(),
                slots,
            });
        }

        let perm = match ordering {
            Ordering::Natural => (0..n).collect::<Vec<_>>(),
            Ordering::MinimumDegree => minimum_degree(n, &set),
        };
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j) in &set {
            let (pi, pj) = (iperm[i], iperm[j]);
            cols[pi.max(pj)].push(pi.min(pj));
        }
        let mut a_colptr = Vec::with_capacity(n + 1);
        let mut a_rowidx = Vec::with_capacity(set.len());
        a_colptr.push(0);
        for c in cols.iter_mut() {
            c.sort_unstable();
            a_rowidx.extend_from_slice(c);
            a_colptr.push(a_rowidx.len());
        }
        let mut slots = HashMap::with_capacity(set.len());
        for j in 0..n {
            for p in a_colptr[j]..a_colptr[j + 1] {
                let (oi, oj) = (perm[a_rowidx[p]], perm[j]);
                slots.insert((oi.min(oj), oi.max(oj)), p);
            }
        }

        let parent = etree(n, &a_colptr, &a_rowidx);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(k, &a_colptr, &a_rowidx, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut l_colptr = Vec::with_capacity(n + 1);
        l_colptr.push(0);
        for c in counts {
            l_colptr.push(l_colptr.last().unwrap() + c);
        }

        Ok(Self {
            n,
            dense: false,
            perm,
            iperm,
            a_colptr,
            a_rowidx,
            parent,
            l_colptr,
            slots,
        })
    }

    /// Analysis suited to `m`: dense below [`DENSE_FALLBACK`], natural-order
    /// sparse above.
    pub fn for_matrix(m: &SparseSym) -> Result<Self> {
        Self::analyze(
            m.n(),
            m.iter().map(|(i, j, _)| (i, j)),
            Ordering::Natural,
            m.n() < DENSE_FALLBACK,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Length of the value buffer expected by [`Self::factor`].
    pub fn value_len(&self) -> usize {
        if self.dense {
            self.n * self.n
        } else {
            self.a_rowidx.len()
        }
    }

    /// Position of entry `(i, j)` in the value buffer, if it is in the pattern.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        self.slots.get(&(i.min(j), i.max(j))).copied()
    }

    /// Number of nonzeros in the factor (dense: full lower triangle).
    pub fn factor_nnz(&self) -> usize {
        if self.dense {
            self.n * (self.n + 1) / 2
        } else {
            *self.l_colptr.last().unwrap_or(&0)
        }
    }

    /// Value buffer populated from a matrix whose pattern is covered by this
    /// analysis.
    pub fn values_from(&self, m: &SparseSym) -> Result<Vec<f64>> {
        let mut values = vec![0.0; self.value_len()];
        for (i, j, v) in m.iter() {
            let s = self.slot(i, j).ok_or_else(|| {
                Error::DimensionMismatch(format!("entry ({i}, {j}) not in analysed pattern"))
            })?;
            values[s] += v;
        }
        Ok(values)
    }

    /// Numeric factorisation of the values laid out by [`Self::slot`].
    pub fn factor(&self, values: &[f64]) -> Result<CholFactor> {
        if values.len() != self.value_len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a pattern of {}",
                values.len(),
                self.value_len()
            )));
        }
        if self.dense {
            return self.factor_dense(values);
        }
        let n = self.n;
        let max_diag = (0..n)
            .map(|j| values[self.a_colptr[j + 1] - 1].abs())
            .fold(0.0, f64::max);
        let tol = PIVOT_TOL * max_diag;

        let nnz = self.factor_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = self.l_colptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];
        let mut logdet = 0.0;

        for k in 0..n {
            let top = ereach(
                k,
                &self.a_colptr,
                &self.a_rowidx,
                &self.parent,
                &mut stack,
                &mut mark,
            );
            for p in self.a_colptr[k]..self.a_colptr[k + 1] {
                x[self.a_rowidx[p]] = values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[self.l_colptr[i]];
                x[i] = 0.0;
                for p in (self.l_colptr[i] + 1)..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > tol) {
                return Err(Error::NotPositiveDefinite {
                    column: self.perm[k],
                    pivot: d,
                });
            }
            let lkk = d.sqrt();
            logdet += 2.0 * lkk.ln();
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = lkk;
        }

        Ok(CholFactor {
            n,
            storage: Storage::Sparse {
                colptr: self.l_colptr.clone(),
                rowidx: li,
                values: lx,
            },
            perm: self.perm.clone(),
            iperm: self.iperm.clone(),
            logdet,
        })
    }

    fn factor_dense(&self, values: &[f64]) -> Result<CholFactor> {
        let n = self.n;
        // values hold the upper triangle column-major at j*n+i; mirror it.
        let mut a = DMatrix::from_column_slice(n, n, values);
        for j in 0..n {
            for i in (j + 1)..n {
                a[(i, j)] = a[(j, i)];
            }
        }
        let l = dense_cholesky(&a)?;
        let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(CholFactor {
            n,
            storage: Storage::Dense(l),
            perm: (0..n).collect(),
            iperm: (0..n).collect(),
            logdet,
        })
    }
}

/// Lower-triangular Cholesky factor `P M Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    n: usize,
    storage: Storage,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    logdet: f64,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(DMatrix<f64>),
    Sparse {
        colptr: Vec<usize>,
        rowidx: Vec<usize>,
        values: Vec<f64>,
    },
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `log det M`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Permutation used, as `perm[new] = old`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side of length {} for dimension {}",
                b.len(),
                self.n
            )));
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.solve_lower(&mut y);
        self.solve_upper(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// `y = L⁻¹ P b`, useful for quadratic forms `bᵀ M⁻¹ b = |y|²`.
    pub fn half_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side of length {} for dimension {}",
                b.len(),
                self.n
            )));
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.solve_lower(&mut y);
        Ok(y)
    }

    fn solve_lower(&self, y: &mut [f64]) {
        match &self.storage {
            Storage::Dense(l) => {
                for j in 0..self.n {
                    y[j] /= l[(j, j)];
                    let yj = y[j];
                    for i in (j + 1)..self.n {
                        y[i] -= l[(i, j)] * yj;
                    }
                }
            }
            Storage::Sparse {
                colptr,
                rowidx,
                values,
            } => {
                for j in 0..self.n {
                    y[j] /= values[colptr[j]];
                    let yj = y[j];
                    for p in (colptr[j] + 1)..colptr[j + 1] {
                        y[rowidx[p]] -= values[p] * yj;
                    }
                }
            }
        }
    }

    fn solve_upper(&self, y: &mut [f64]) {
        match &self.storage {
            Storage::Dense(l) => {
                for j in (0..self.n).rev() {
                    let mut s = y[j];
                    for i in (j + 1)..self.n {
                        s -= l[(i, j)] * y[i];
                    }
                    y[j] = s / l[(j, j)];
                }
            }
            Storage::Sparse {
                colptr,
                rowidx,
                values,
            } => {
                for j in (0..self.n).rev() {
                    let mut s = y[j];
                    for p in (colptr[j] + 1)..colptr[j + 1] {
                        s -= values[p] * y[rowidx[p]];
                    }
                    y[j] = s / values[colptr[j]];
                }
            }
        }
    }

    /// Dense lower factor in the original ordering is not meaningful when a
    /// permutation is active; this returns `L` of the permuted system.
    pub fn lower_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(l) => l.clone(),
            Storage::Sparse {
                colptr,
                rowidx,
                values,
            } => {
                let mut l = DMatrix::zeros(self.n, self.n);
                for j in 0..self.n {
                    for p in colptr[j]..colptr[j + 1] {
                        l[(rowidx[p], j)] = values[p];
                    }
                }
                l
            }
        }
    }

    /// `P M Pᵀ` reassembled from the factor, mapped back to original order.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.lower_dense();
        let pm = &l * l.transpose();
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(self.perm[i], self.perm[j])] = pm[(i, j)];
            }
        }
        m
    }

    /// Diagonal of `M⁻¹` at the requested indices, by one solve per index.
    pub fn inverse_diagonal(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let mut e = vec![0.0; self.n];
        indices
            .iter()
            .map(|&i| {
                if i >= self.n {
                    return Err(Error::DimensionMismatch(format!(
                        "index {i} outside dimension {}",
                        self.n
                    )));
                }
                e[i] = 1.0;
                let y = self.half_solve(&e)?;
                e[i] = 0.0;
                Ok(y.iter().map(|v| v * v).sum())
            })
            .collect()
    }

    #[allow(dead_code)]
    pub(crate) fn iperm(&self) -> &[usize] {
        &self.iperm
    }
}

/// Factors `m`, densely below [`DENSE_FALLBACK`] and with natural-order
/// sparse Cholesky above it.
pub fn cholesky(m: &SparseSym) -> Result<CholFactor> {
    let sym = SymbolicCholesky::for_matrix(m)?;
    sym.factor(&sym.values_from(m)?)
}

/// Solves `M x = b` given the factor of `M`.
pub fn solve(f: &CholFactor, b: &[f64]) -> Result<Vec<f64>> {
    f.solve(b)
}

/// Dense Cholesky with the crate's pivot tolerance.
pub fn dense_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch("matrix is not square".into()));
    }
    let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = PIVOT_TOL * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return Err(Error::NotPositiveDefinite {
                column: j,
                pivot: d,
            });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

fn etree(n: usize, colptr: &[usize], rowidx: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &rowidx[colptr[k]..colptr[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L`, returned as `stack[top..]` in
/// topological order.
fn ereach(
    k: usize,
    colptr: &[usize],
    rowidx: &[usize],
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for &row in &rowidx[colptr[k]..colptr[k + 1]] {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Greedy minimum-degree ordering on the explicit elimination graph.
fn minimum_degree(n: usize, pattern: &HashSet<(usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for &(i, j) in pattern {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| !eliminated[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("node left to eliminate");
        eliminated[v] = true;
        order.push(v);
        let nb: Vec<usize> = adj[v].drain().collect();
        for &a in &nb {
            adj[a].remove(&v);
        }
        for (idx, &a) in nb.iter().enumerate() {
            for &b in &nb[idx + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
    }
    order
}

/// Real eigenvalues in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSet {
    values: Vec<f64>,
}

impl EigenSet {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| a.total_cmp(b));
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }
}

/// Eigenvalues of a square matrix that is symmetric or diagonally similar to
/// a symmetric one (`W = D⁻¹A` with `A` symmetric, as for row-standardised
/// weights). The similar matrix `D^{-1/2} A D^{-1/2}` has entries
/// `sqrt(w_ij w_ji)`.
pub fn eigenvalues_dense(m: &DMatrix<f64>) -> Result<EigenSet> {
    eigenvalues_dense_with_limit(m, DENSE_EIGEN_LIMIT)
}

pub fn eigenvalues_dense_with_limit(m: &DMatrix<f64>, limit: usize) -> Result<EigenSet> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix is not square",
            n,
            m.ncols()
        )));
    }
    if n > limit {
        return Err(Error::DimensionMismatch(format!(
            "dimension {n} exceeds dense eigenvalue limit {limit}"
        )));
    }
    let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let mut sym = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() <= 1e-14 * scale {
                sym[(i, j)] = 0.5 * (a + b);
            } else if a * b > 0.0 {
                sym[(i, j)] = a.signum() * (a * b).sqrt();
            } else {
                return Err(Error::NotSymmetrizable);
            }
        }
    }
    let eig = sym
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or(Error::NonConvergence)?;
    Ok(EigenSet::new(eig.eigenvalues.iter().copied().collect()))
}

/// `log |I − ρW| = Σ log(1 − ρ eᵢ)`.
pub fn logdet_shifted(eigs: &EigenSet, rho: f64) -> Result<f64> {
    let mut acc = 0.0;
    for &e in eigs.values() {
        let t = 1.0 - rho * e;
        if !(t > 0.0) {
            return Err(Error::OutOfSupport(format!(
                "1 - {rho}*{e} = {t} is not positive"
            )));
        }
        acc += t.ln();
    }
    Ok(acc)
}

/// `tr((I − ρW)⁻¹) = Σ 1/(1 − ρ eᵢ)`.
pub fn trace_inverse_shifted(eigs: &EigenSet, rho: f64) -> Result<f64> {
    check_shift(eigs, rho)?;
    Ok(eigs.values().iter().map(|&e| 1.0 / (1.0 - rho * e)).sum())
}

/// `tr((I − ρW)⁻¹ W) = Σ eᵢ/(1 − ρ eᵢ)`.
pub fn trace_inverse_shifted_times(eigs: &EigenSet, rho: f64) -> Result<f64> {
    check_shift(eigs, rho)?;
    Ok(eigs
        .values()
        .iter()
        .map(|&e| e / (1.0 - rho * e))
        .sum())
}

fn check_shift(eigs: &EigenSet, rho: f64) -> Result<()> {
    if eigs.values().iter().any(|&e| !(1.0 - rho * e > 0.0)) {
        return Err(Error::OutOfSupport(format!(
            "I - {rho} W is not positive on the spectrum"
        )));
    }
    Ok(())
}
