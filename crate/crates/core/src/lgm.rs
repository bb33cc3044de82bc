//! Latent Gaussian model assembly: likelihood family, predictor map, latent
//! blocks and hyperparameter priors.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmrf::{iid, Constraint, GmrfBlock};

/// Prior precision of fixed effects (intercept and covariate coefficients).
pub const FIXED_EFFECT_PRECISION: f64 = 0.001;

/// Shape and rate of the default Gamma prior on precisions.
pub const DEFAULT_PRECISION_PRIOR: (f64, f64) = (1.0, 5e-5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorDensity {
    /// Gamma on the natural scale, parameterised by shape and rate.
    Gamma { shape: f64, rate: f64 },
    /// `log θ ~ Normal(mean, 1/precision)`.
    LogNormal { mean: f64, precision: f64 },
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, precision: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Positive,
    Interval(f64, f64),
    Real,
}

/// Prior on one hyperparameter together with the unconstrained internal
/// scale used by the mode search (log, scaled logit or identity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperPrior {
    density: PriorDensity,
}

impl HyperPrior {
    pub fn new(density: PriorDensity) -> Result<Self> {
        let ok = match density {
            PriorDensity::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            PriorDensity::LogNormal { precision, mean } => precision > 0.0 && mean.is_finite(),
            PriorDensity::Uniform { lo, hi } => lo < hi && lo.is_finite() && hi.is_finite(),
            PriorDensity::Normal { precision, mean } => precision > 0.0 && mean.is_finite(),
        };
        if !ok {
            return Err(Error::OutOfRange(format!("invalid prior {density:?}")));
        }
        Ok(Self { density })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        Self::new(PriorDensity::Gamma { shape, rate })
    }

    pub fn log_normal(mean: f64, precision: f64) -> Result<Self> {
        Self::new(PriorDensity::LogNormal { mean, precision })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::new(PriorDensity::Uniform { lo, hi })
    }

    pub fn normal(mean: f64, precision: f64) -> Result<Self> {
        Self::new(PriorDensity::Normal { mean, precision })
    }

    pub fn default_precision() -> Self {
        Self::gamma(DEFAULT_PRECISION_PRIOR.0, DEFAULT_PRECISION_PRIOR.1).expect("valid")
    }

    pub fn density(&self) -> PriorDensity {
        self.density
    }

    pub fn support(&self) -> Support {
        match self.density {
            PriorDensity::Gamma { .. } | PriorDensity::LogNormal { .. } => Support::Positive,
            PriorDensity::Uniform { lo, hi } => Support::Interval(lo, hi),
            PriorDensity::Normal { .. } => Support::Real,
        }
    }

    pub fn in_support(&self, theta: f64) -> bool {
        match self.support() {
            Support::Positive => theta > 0.0 && theta.is_finite(),
            Support::Interval(a, b) => theta > a && theta < b,
            Support::Real => theta.is_finite(),
        }
    }

    pub fn log_density(&self, theta: f64) -> f64 {
        if !self.in_support(theta) {
            return f64::NEG_INFINITY;
        }
        match self.density {
            PriorDensity::Gamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * theta.ln() - rate * theta
            }
            PriorDensity::LogNormal { mean, precision } => {
                let l = theta.ln();
                0.5 * (precision / (2.0 * PI)).ln() - l - 0.5 * precision * (l - mean).powi(2)
            }
            PriorDensity::Uniform { lo, hi } => -(hi - lo).ln(),
            PriorDensity::Normal { mean, precision } => {
                0.5 * (precision / (2.0 * PI)).ln() - 0.5 * precision * (theta - mean).powi(2)
            }
        }
    }

    pub fn to_internal(&self, theta: f64) -> f64 {
        match self.support() {
            Support::Positive => theta.ln(),
            Support::Interval(a, b) => {
                let u = (theta - a) / (b - a);
                (u / (1.0 - u)).ln()
            }
            Support::Real => theta,
        }
    }

    pub fn from_internal(&self, phi: f64) -> f64 {
        match self.support() {
            Support::Positive => phi.exp(),
            Support::Interval(a, b) => a + (b - a) / (1.0 + (-phi).exp()),
            Support::Real => phi,
        }
    }

    /// `log |dθ/dφ|` at internal value `phi`.
    pub fn log_jacobian(&self, phi: f64) -> f64 {
        match self.support() {
            Support::Positive => phi,
            Support::Interval(a, b) => {
                // σ(φ)(1 − σ(φ)) computed stably
                (b - a).ln() - phi.abs() - 2.0 * (1.0 + (-phi.abs()).exp()).ln()
            }
            Support::Real => 0.0,
        }
    }

    pub fn median(&self) -> f64 {
        match self.density {
            PriorDensity::Gamma { shape, rate } => Gamma::new(shape, rate)
                .map(|g| g.inverse_cdf(0.5))
                .unwrap_or(shape / rate),
            PriorDensity::LogNormal { mean, .. } => mean.exp(),
            PriorDensity::Uniform { lo, hi } => 0.5 * (lo + hi),
            PriorDensity::Normal { mean, .. } => mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HyperId(pub usize);

#[derive(Debug, Clone)]
pub struct Hyper {
    pub name: String,
    pub prior: HyperPrior,
    /// A fixed hyperparameter is held at this value and excluded from the
    /// grid exploration and from the prior term.
    pub fixed: Option<f64>,
}

/// Source of a block's (or the Gaussian likelihood's) precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Precision {
    Fixed(f64),
    Hyper(HyperId),
}

#[derive(Debug, Clone)]
pub enum Family {
    Gaussian { precision: Precision },
    /// Poisson with log link and per-observation offset `log E`.
    Poisson { offset: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub block: GmrfBlock,
    pub precision: Precision,
    pub offset: usize,
}

impl LatentBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.block.n()
    }
}

/// A validated latent Gaussian model.
#[derive(Debug, Clone)]
pub struct LatentModel {
    y: Vec<Option<f64>>,
    family: Family,
    rows: Vec<Vec<(usize, f64)>>,
    blocks: Vec<LatentBlock>,
    hypers: Vec<Hyper>,
    constraints: Vec<Constraint>,
    dim: usize,
}

/// Log-likelihood with derivatives with respect to each linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl LatentModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn blocks(&self) -> &[LatentBlock] {
        &self.blocks
    }

    pub fn hypers(&self) -> &[Hyper] {
        &self.hypers
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Indices of hyperparameters that are not fixed.
    pub fn free_hypers(&self) -> Vec<usize> {
        (0..self.hypers.len())
            .filter(|&i| self.hypers[i].fixed.is_none())
            .collect()
    }

    /// Full hyper vector from values of the free hyperparameters.
    pub fn hyper_values(&self, free: &[f64]) -> Result<Vec<f64>> {
        let idx = self.free_hypers();
        if free.len() != idx.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} free hyper values for {} free hypers",
                free.len(),
                idx.len()
            )));
        }
        let mut out: Vec<f64> = self.hypers.iter().map(|h| h.fixed.unwrap_or(f64::NAN)).collect();
        for (&i, &v) in idx.iter().zip(free) {
            out[i] = v;
        }
        Ok(out)
    }

    pub fn precision_value(&self, p: Precision, theta: &[f64]) -> f64 {
        match p {
            Precision::Fixed(v) => v,
            Precision::Hyper(HyperId(i)) => theta[i],
        }
    }

    /// Sum of log prior densities of the free hyperparameters.
    pub fn log_prior_hypers(&self, theta: &[f64]) -> f64 {
        self.hypers
            .iter()
            .zip(theta)
            .filter(|(h, _)| h.fixed.is_none())
            .map(|(h, &t)| h.prior.log_density(t))
            .sum()
    }

    /// Log prior density of the latent field `x` at hypers `theta`.
    pub fn log_prior_latent(&self, x: &[f64], theta: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let tau = self.precision_value(b.precision, theta);
                b.block.log_density(&x[b.range()], tau)
            })
            .sum()
    }

    /// Linear predictor `η = A x`.
    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    /// `Aᵀ v`.
    pub fn eta_adjoint(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (r, &vi) in self.rows.iter().zip(v) {
            for &(j, w) in r {
                out[j] += w * vi;
            }
        }
        out
    }

    /// Observation log-likelihood at predictor values `eta`.
    pub fn log_likelihood_eta(&self, eta: &[f64], theta: &[f64]) -> Result<LikelihoodEval> {
        let n = self.y.len();
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        let mut curvature = vec![0.0; n];
        for i in 0..n {
            let Some(y) = self.y[i] else { continue };
            let e = eta[i];
            if !e.is_finite() {
                return Err(Error::NonFiniteEta(i));
            }
            match &self.family {
                Family::Gaussian { precision } => {
                    let tau = self.precision_value(*precision, theta);
                    let r = y - e;
                    value += 0.5 * (tau / (2.0 * PI)).ln() - 0.5 * tau * r * r;
                    grad[i] = tau * r;
                    curvature[i] = -tau;
                }
                Family::Poisson { offset } => {
                    let lin = offset[i] + e;
                    let mu = lin.exp();
                    if !mu.is_finite() {
                        return Err(Error::NonFiniteEta(i));
                    }
                    value += y * lin - mu - ln_gamma(y + 1.0);
                    grad[i] = y - mu;
                    curvature[i] = -mu;
                }
            }
        }
        Ok(LikelihoodEval {
            value,
            grad,
            curvature,
        })
    }
}

/// `Σ_{i∈I} log π(yᵢ | ηᵢ, θ)` with derivatives in each `ηᵢ`.
pub fn log_likelihood(model: &LatentModel, x: &[f64], theta: &[f64]) -> Result<LikelihoodEval> {
    if x.len() != model.dim {
        return Err(Error::DimensionMismatch(format!(
            "latent vector of length {} for dimension {}",
            x.len(),
            model.dim
        )));
    }
    model.log_likelihood_eta(&model.eta(x), theta)
}

/// Incremental constructor for [`LatentModel`].
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    y: Vec<Option<f64>>,
    family: Option<Family>,
    hypers: Vec<Hyper>,
    blocks: Vec<LatentBlock>,
    links: Vec<(usize, usize, f64)>,
    dim: usize,
}

impl ModelBuilder {
    pub fn new(y: Vec<Option<f64>>) -> Self {
        Self {
            y,
            family: None,
            hypers: Vec::new(),
            blocks: Vec::new(),
            links: Vec::new(),
            dim: 0,
        }
    }

    pub fn observed(y: &[f64]) -> Self {
        Self::new(y.iter().map(|&v| Some(v)).collect())
    }

    pub fn hyper(&mut self, name: impl Into<String>, prior: HyperPrior) -> HyperId {
        self.hypers.push(Hyper {
            name: name.into(),
            prior,
            fixed: None,
        });
        HyperId(self.hypers.len() - 1)
    }

    pub fn fixed_hyper(&mut self, name: impl Into<String>, prior: HyperPrior, value: f64) -> HyperId {
        self.hypers.push(Hyper {
            name: name.into(),
            prior,
            fixed: Some(value),
        });
        HyperId(self.hypers.len() - 1)
    }

    pub fn gaussian(&mut self, precision: Precision) -> &mut Self {
        self.family = Some(Family::Gaussian { precision });
        self
    }

    pub fn poisson(&mut self, offset: Vec<f64>) -> &mut Self {
        self.family = Some(Family::Poisson { offset });
        self
    }

    /// Adds a latent block and returns the index of its first entry.
    pub fn block(&mut self, block: GmrfBlock, precision: Precision) -> usize {
        let offset = self.dim;
        self.dim += block.n();
        self.blocks.push(LatentBlock {
            block,
            precision,
            offset,
        });
        offset
    }

    /// Fixed effect with a vague Normal prior, linked to every observation
    /// through `covariate`. Returns its latent index.
    pub fn fixed_effect(&mut self, name: impl Into<String>, covariate: &[f64]) -> Result<usize> {
        self.fixed_effect_with_precision(name, covariate, FIXED_EFFECT_PRECISION)
    }

    pub fn fixed_effect_with_precision(
        &mut self,
        name: impl Into<String>,
        covariate: &[f64],
        precision: f64,
    ) -> Result<usize> {
        if covariate.len() != self.y.len() {
            return Err(Error::DimensionMismatch(format!(
                "covariate of length {} for {} observations",
                covariate.len(),
                self.y.len()
            )));
        }
        let j = self.block(iid(1).with_label(name), Precision::Fixed(precision));
        for (i, &c) in covariate.iter().enumerate() {
            if c != 0.0 {
                self.links.push((i, j, c));
            }
        }
        Ok(j)
    }

    /// Adds `weight · x[latent]` to the predictor of observation `obs`.
    pub fn link(&mut self, obs: usize, latent: usize, weight: f64) -> &mut Self {
        self.links.push((obs, latent, weight));
        self
    }

    pub fn build(self) -> Result<LatentModel> {
        let family = self
            .family
            .ok_or_else(|| Error::UnsupportedFamily("no likelihood family given".into()))?;
        let n = self.y.len();
        let check_prec = |p: Precision| -> Result<()> {
            match p {
                Precision::Hyper(HyperId(i)) if i >= self.hypers.len() => Err(
                    Error::DimensionMismatch(format!("precision refers to unknown hyper {i}")),
                ),
                Precision::Fixed(v) if !(v >= 0.0) => {
                    Err(Error::OutOfRange(format!("fixed precision {v}")))
                }
                _ => Ok(()),
            }
        };
        match &family {
            Family::Gaussian { precision } => check_prec(*precision)?,
            Family::Poisson { offset } => {
                if offset.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "offset of length {} for {} observations",
                        offset.len(),
                        n
                    )));
                }
                if let Some(i) = offset.iter().position(|o| !o.is_finite()) {
                    return Err(Error::OutOfRange(format!("offset {i} is not finite")));
                }
                for (i, y) in self.y.iter().enumerate() {
                    if let Some(v) = y {
                        if *v < 0.0 || v.fract() != 0.0 {
                            return Err(Error::OutOfRange(format!(
                                "Poisson count {v} at observation {i}"
                            )));
                        }
                    }
                }
            }
        }
        for b in &self.blocks {
            check_prec(b.precision)?;
        }
        for h in &self.hypers {
            if let Some(v) = h.fixed {
                if !h.prior.in_support(v) {
                    return Err(Error::OutOfSupport(format!("fixed hyper {} = {v}", h.name)));
                }
            }
        }

        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, w) in self.links {
            if i >= n || j >= self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "link ({i}, {j}) outside {n} observations x {} latent",
                    self.dim
                )));
            }
            match rows[i].iter_mut().find(|e| e.0 == j) {
                Some(e) => e.1 += w,
                None => rows[i].push((j, w)),
            }
        }
        if let Some(i) = rows.iter().position(|r| r.iter().all(|e| e.1 == 0.0)) {
            return Err(Error::DimensionMismatch(format!(
                "observation {i} touches no latent entry"
            )));
        }

        let constraints = self
            .blocks
            .iter()
            .flat_map(|b| {
                b.block.constraints().iter().map(move |c| Constraint {
                    coeffs: c.coeffs.iter().map(|&(i, v)| (i + b.offset, v)).collect(),
                    value: c.value,
                })
            })
            .collect();

        Ok(LatentModel {
            y: self.y,
            family,
            rows,
            blocks: self.blocks,
            hypers: self.hypers,
            constraints,
            dim: self.dim,
        })
    }
}
