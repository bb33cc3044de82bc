//! Latent-effect precision structures for lattice data.
//!
//! Every block has prior precision `τ T` for a fixed structure matrix `T`.
//! Intrinsic (rank-deficient) structures use the density convention
//!
//! ```text
//! log π(x | τ) = (n − k)/2 · log τ + ½ log det*(T) − (n − k)/2 · log 2π − τ/2 · xᵀ T x
//! ```
//!
//! where `det*` is the product of the nonzero eigenvalues and `k` the rank
//! deficiency. Their linear constraints are imposed by conditioning on
//! `A x = e` after the Gaussian approximation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graphs::Adjacency;
use crate::spmat::{cholesky, SparseSym};

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

/// Linear constraint `Σ coeffs · x = value` over the entries of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub value: f64,
}

impl Constraint {
    pub fn sum_to_zero(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            coeffs: indices.into_iter().map(|i| (i, 1.0)).collect(),
            value: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmrfBlock {
    label: String,
    structure: SparseSym,
    rank_deficiency: usize,
    log_pdet: f64,
    constraints: Vec<Constraint>,
}

impl GmrfBlock {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn n(&self) -> usize {
        self.structure.n()
    }

    pub fn structure(&self) -> &SparseSym {
        &self.structure
    }

    pub fn rank_deficiency(&self) -> usize {
        self.rank_deficiency
    }

    /// `n − rank deficiency`.
    pub fn rank(&self) -> usize {
        self.n() - self.rank_deficiency
    }

    pub fn is_intrinsic(&self) -> bool {
        self.rank_deficiency > 0
    }

    /// `log det*(T)`: sum of logs of the nonzero eigenvalues.
    pub fn log_pdet(&self) -> f64 {
        self.log_pdet
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn with_constraint(mut self, c: Constraint) -> Result<Self> {
        if let Some(&(i, _)) = c.coeffs.iter().find(|(i, _)| *i >= self.n()) {
            return Err(Error::DimensionMismatch(format!(
                "constraint index {i} outside block of size {}",
                self.n()
            )));
        }
        self.constraints.push(c);
        Ok(self)
    }

    /// Log prior density of `x` at precision `tau` under the convention in
    /// the module docs.
    pub fn log_density(&self, x: &[f64], tau: f64) -> f64 {
        let r = self.rank() as f64;
        0.5 * r * tau.ln() + 0.5 * self.log_pdet
            - 0.5 * r * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * tau * self.structure.quad_form(x)
    }
}

/// Block with a fully specified structure `T`.
pub fn generic0(t: SparseSym) -> Result<GmrfBlock> {
    let (deficiency, log_pdet) = spectrum_summary(&t)?;
    Ok(GmrfBlock {
        label: "generic0".into(),
        structure: t,
        rank_deficiency: deficiency,
        log_pdet,
        constraints: Vec::new(),
    })
}

/// Independent effects with unit structure.
pub fn iid(n: usize) -> GmrfBlock {
    GmrfBlock {
        label: "iid".into(),
        structure: SparseSym::identity(n),
        rank_deficiency: 0,
        log_pdet: 0.0,
        constraints: Vec::new(),
    }
}

/// Besag structure: `nᵢ` on the diagonal, −1 between neighbours.
pub fn icar_structure(a: &Adjacency) -> SparseSym {
    let mut t = SparseSym::new(a.n());
    for i in 0..a.n() {
        t.add(i, i, a.degree(i) as f64).expect("in range");
        for &j in a.neighbors(i) {
            if i < j {
                t.add(i, j, -1.0).expect("in range");
            }
        }
    }
    t
}

/// Intrinsic CAR with one sum-to-zero constraint per connected component.
pub fn besag(a: &Adjacency) -> Result<GmrfBlock> {
    if let Some(i) = (0..a.n()).find(|&i| a.degree(i) == 0) {
        return Err(Error::Island(a.ids()[i].clone()));
    }
    let t = icar_structure(a);
    let comps = a.components();
    let log_pdet = log_pdet_known_rank(&t, comps.len())?;
    Ok(GmrfBlock {
        label: "besag".into(),
        structure: t,
        rank_deficiency: comps.len(),
        log_pdet,
        constraints: comps.into_iter().map(Constraint::sum_to_zero).collect(),
    })
}

/// Proper CAR: Besag structure plus `d·I`.
pub fn proper_besag(a: &Adjacency, d: f64) -> Result<GmrfBlock> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveD(d));
    }
    let t = icar_structure(a).add_scaled(&SparseSym::identity(a.n()), d)?;
    let log_pdet = cholesky(&t)?.logdet();
    Ok(GmrfBlock {
        label: "properbesag".into(),
        structure: t,
        rank_deficiency: 0,
        log_pdet,
        constraints: Vec::new(),
    })
}

/// Leroux structure `(1 − β) I + β Q`.
pub fn leroux(a: &Adjacency, beta: f64) -> Result<GmrfBlock> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::OutOfRange(format!("leroux beta {beta} not in (0, 1)")));
    }
    let t = icar_structure(a)
        .scaled(beta)
        .add_scaled(&SparseSym::identity(a.n()), 1.0 - beta)?;
    let log_pdet = cholesky(&t)?.logdet();
    Ok(GmrfBlock {
        label: "leroux".into(),
        structure: t,
        rank_deficiency: 0,
        log_pdet,
        constraints: Vec::new(),
    })
}

/// Besag-York-Mollié: an intrinsic CAR block and an iid block, each with its
/// own precision, both added to the same predictor entries.
pub fn bym(a: &Adjacency) -> Result<(GmrfBlock, GmrfBlock)> {
    Ok((
        besag(a)?.with_label("bym.icar"),
        iid(a.n()).with_label("bym.iid"),
    ))
}

fn eigen(t: &SparseSym) -> Result<Vec<f64>> {
    let d: DMatrix<f64> = t.to_dense();
    let e = d
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or(Error::NonConvergence)?;
    let mut v: Vec<f64> = e.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn spectrum_summary(t: &SparseSym) -> Result<(usize, f64)> {
    let ev = eigen(t)?;
    let scale = ev.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if let Some(&neg) = ev.iter().find(|&&v| v < -RANK_TOL * scale) {
        return Err(Error::IndefiniteStructure(neg));
    }
    let zero = ev.iter().filter(|&&v| v <= RANK_TOL * scale).count();
    let log_pdet = ev.iter().filter(|&&v| v > RANK_TOL * scale).map(|v| v.ln()).sum();
    Ok((zero, log_pdet))
}

fn log_pdet_known_rank(t: &SparseSym, deficiency: usize) -> Result<f64> {
    let ev = eigen(t)?;
    Ok(ev[deficiency..].iter().map(|v| v.ln()).sum())
}
