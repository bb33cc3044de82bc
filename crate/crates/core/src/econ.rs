//! Spatial econometric model with autoregression in the response (ρ) and in
//! the errors (λ), fitted by conditioning on (ρ, λ).
//!
//! Given (ρ, λ) the model `(I − ρW) y = X β + u`, `(I − λW) u = ε` becomes
//! the ordinary regression `ỹ = X̃ β + ε` with `ỹ = (I − λW)(I − ρW) y` and
//! `X̃ = (I − λW) X`. The Jacobian `log|I − ρW| + log|I − λW|` of the
//! transformation is added to the conditional log marginal likelihood.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bma::{mix_marginals, reciprocal_grid, summarize, transform_grid, Summary};
use crate::error::{Error, Result};
use crate::graphs::{row_standardize, Adjacency, WeightsMatrix};
use crate::io::DataTable;
use crate::laplace::{explore_hypers, FitConfig, FitResult, MarginalGrid, Target};
use crate::lgm::{HyperPrior, LatentModel, ModelBuilder, Precision, FIXED_EFFECT_PRECISION};
use crate::mh::{run_chain_with_progress, Chain, ChainConfig, ConditionalFit, ConditionedModelFamily, ProposalSpec, TraceRow};
use crate::spmat::{logdet_shifted, trace_inverse_shifted, trace_inverse_shifted_times};

pub const INTERCEPT: &str = "intercept";
pub const PRECISION_HYPER: &str = "precision";

#[derive(Debug, Clone)]
pub struct ManskiSpec {
    pub y: Vec<f64>,
    /// `n × p` design, first column the intercept.
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub w: WeightsMatrix,
    /// Adds spatially lagged covariates `W X` (all but the intercept).
    pub lagged: bool,
    pub beta_precision: f64,
    pub precision_prior: HyperPrior,
}

impl ManskiSpec {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, covariate_names: Vec<String>, w: WeightsMatrix) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || w.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} responses, {} design rows, {} weight rows",
                x.nrows(),
                w.n()
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} design columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            y,
            x,
            covariate_names,
            w,
            lagged: false,
            beta_precision: FIXED_EFFECT_PRECISION,
            precision_prior: HyperPrior::default_precision(),
        })
    }

    /// Row-standardised weights from `adjacency`, response and covariates
    /// from `table` (aligned to the adjacency), plus an intercept column.
    pub fn from_table(table: &DataTable, adjacency: &Adjacency, response: &str, covariates: &[&str]) -> Result<Self> {
        let t = table.aligned_to(adjacency)?;
        let y = t.column(response)?.to_vec();
        let n = y.len();
        let mut names = vec![INTERCEPT.to_string()];
        let mut cols = vec![vec![1.0; n]];
        for &c in covariates {
            cols.push(t.column(c)?.to_vec());
            names.push(c.to_string());
        }
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        Self::new(y, x, names, row_standardize(adjacency)?)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Open interval `(1/λ_min, 1/λ_max)` shared by ρ and λ.
    pub fn support(&self) -> (f64, f64) {
        self.w.support()
    }

    pub fn in_support(&self, rho: f64, lambda: f64) -> bool {
        let (lo, hi) = self.support();
        rho > lo && rho < hi && lambda > lo && lambda < hi
    }

    /// Names of the latent regression coefficients, lagged ones prefixed
    /// with `lag.`.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = self.covariate_names.clone();
        if self.lagged {
            names.extend(self.covariate_names[1..].iter().map(|c| format!("lag.{c}")));
        }
        names
    }

    fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .filter(|&j| j > 0)
            .ok_or_else(|| Error::CovariateNotFound(name.to_string()))
    }

    /// Settings used in the Columbus analysis: 500 burn-in, 5500
    /// iterations, one draw in five kept, random walk sd 0.25 from (0, 0).
    pub fn default_chain(seed: u64) -> ChainConfig {
        ChainConfig {
            burnin: 500,
            total: 5500,
            thin: 5,
            seed,
            proposal: ProposalSpec::identity(vec![0.25, 0.25]),
            init: vec![0.0, 0.0],
        }
    }
}

/// The regression obtained by conditioning on (ρ, λ).
#[derive(Debug, Clone)]
pub struct ConditionalModel {
    pub model: LatentModel,
    pub log_jacobian: f64,
    /// Latent index of each coefficient, in [`ManskiSpec::coefficient_names`]
    /// order.
    pub coefficients: Vec<usize>,
    pub y_tilde: Vec<f64>,
}

fn lag(w: &WeightsMatrix, a: f64, v: &[f64]) -> Vec<f64> {
    let wv = w.mul_vec(v);
    v.iter().zip(wv).map(|(x, z)| x - a * z).collect()
}

pub fn build_conditional(spec: &ManskiSpec, rho: f64, lambda: f64) -> Result<ConditionalModel> {
    if !spec.in_support(rho, lambda) {
        return Err(Error::OutOfSupport(format!("(rho, lambda) = ({rho}, {lambda})")));
    }
    let eigs = spec.w.eigenvalues();
    let log_jacobian = logdet_shifted(eigs, rho)? + logdet_shifted(eigs, lambda)?;
    let y_tilde = lag(&spec.w, lambda, &lag(&spec.w, rho, &spec.y));

    let mut columns: Vec<Vec<f64>> = (0..spec.x.ncols())
        .map(|j| lag(&spec.w, lambda, spec.x.column(j).as_slice()))
        .collect();
    if spec.lagged {
        for j in 1..spec.x.ncols() {
            let wx = spec.w.mul_vec(spec.x.column(j).as_slice());
            columns.push(lag(&spec.w, lambda, &wx));
        }
    }

    let mut b = ModelBuilder::observed(&y_tilde);
    let tau = b.hyper(PRECISION_HYPER, spec.precision_prior);
    b.gaussian(Precision::Hyper(tau));
    let coefficients = spec
        .coefficient_names()
        .iter()
        .zip(&columns)
        .map(|(name, col)| b.fixed_effect_with_precision(name.clone(), col, spec.beta_precision))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalModel {
        model: b.build()?,
        log_jacobian,
        coefficients,
        y_tilde,
    })
}

/// Impact multipliers at ρ for a row-standardised W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactScalars {
    pub total: f64,
    pub direct: f64,
    pub indirect: f64,
    /// `tr((I − ρW)⁻¹ W)/n`, multiplying a lagged coefficient in the direct
    /// impact.
    pub direct_lagged: f64,
}

pub fn impact_scalars(w: &WeightsMatrix, rho: f64) -> Result<ImpactScalars> {
    let n = w.n() as f64;
    let eigs = w.eigenvalues();
    let total = 1.0 / (1.0 - rho);
    let direct = trace_inverse_shifted(eigs, rho)? / n;
    Ok(ImpactScalars {
        total,
        direct,
        indirect: total - direct,
        direct_lagged: trace_inverse_shifted_times(eigs, rho)? / n,
    })
}

/// [`ConditionedModelFamily`] over (ρ, λ) with a uniform prior on the
/// square support.
pub struct ManskiFamily<'s> {
    spec: &'s ManskiSpec,
    workers: usize,
}

impl<'s> ManskiFamily<'s> {
    pub fn new(spec: &'s ManskiSpec, workers: usize) -> Self {
        Self { spec, workers }
    }

    fn targets(&self, cond: &ConditionalModel, rho: f64) -> Result<Vec<Target>> {
        let names = self.spec.coefficient_names();
        let mut targets: Vec<Target> = names
            .iter()
            .zip(&cond.coefficients)
            .map(|(n, &i)| Target::latent(n.clone(), i))
            .collect();
        if self.spec.lagged {
            let c = impact_scalars(&self.spec.w, rho)?;
            let p = self.spec.covariate_names.len();
            for r in 1..p {
                let name = &self.spec.covariate_names[r];
                let beta = cond.coefficients[r];
                let gamma = cond.coefficients[p + r - 1];
                let direct = vec![(beta, c.direct), (gamma, c.direct_lagged)];
                let total = vec![(beta, c.total), (gamma, c.total)];
                let indirect = vec![(beta, c.total - c.direct), (gamma, c.total - c.direct_lagged)];
                targets.push(Target::combination(format!("direct.{name}"), direct));
                targets.push(Target::combination(format!("indirect.{name}"), indirect));
                targets.push(Target::combination(format!("total.{name}"), total));
            }
        }
        Ok(targets)
    }
}

impl ConditionedModelFamily for ManskiFamily<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn names(&self) -> Vec<String> {
        vec!["rho".into(), "lambda".into()]
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        self.spec.in_support(theta[0], theta[1])
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if self.in_support(theta) {
            let (lo, hi) = self.spec.support();
            -2.0 * (hi - lo).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn fit(&self, theta: &[f64], warm: Option<&FitResult>) -> Result<ConditionalFit> {
        let cond = build_conditional(self.spec, theta[0], theta[1])?;
        let config = FitConfig {
            targets: self.targets(&cond, theta[0])?,
            workers: self.workers,
            start: warm.map(|w| w.mode_internal.clone()),
            latent_start: warm.map(|w| w.mode_latent.clone()),
            start_curvature: warm.map(|w| w.mode_curvature.clone()),
            ..Default::default()
        };
        let fit = explore_hypers(&cond.model, &config)?;
        Ok(ConditionalFit {
            log_ml: fit.log_ml + cond.log_jacobian,
            fit: Some(Arc::new(fit)),
        })
    }
}

/// Chain over (ρ, λ) together with model-averaged marginals.
#[derive(Debug, Clone)]
pub struct ManskiFit {
    pub chain: Chain,
    pub coefficient_names: Vec<String>,
    /// Averaged marginal of each regression coefficient.
    pub coefficients: Vec<MarginalGrid>,
    pub precision: MarginalGrid,
    pub sigma2: MarginalGrid,
}

impl ManskiFit {
    /// Kept (ρ, λ) draws.
    pub fn rho_lambda(&self) -> &[Vec<f64>] {
        &self.chain.draws
    }

    pub fn coefficient(&self, name: &str) -> Result<&MarginalGrid> {
        self.coefficient_names
            .iter()
            .position(|c| c == name)
            .map(|i| &self.coefficients[i])
            .ok_or_else(|| Error::CovariateNotFound(name.to_string()))
    }

    /// Summaries of ρ, λ (from the draws) and of the averaged marginals.
    pub fn summaries(&self) -> Result<Vec<Summary>> {
        let mut out = Vec::new();
        for (j, name) in self.chain.names.iter().enumerate() {
            let d = crate::mh::summarize_draws(name, &self.chain.coordinate(j))?;
            out.push(Summary {
                name: d.name,
                mean: d.mean,
                sd: d.sd,
                q025: d.q025,
                q50: d.q50,
                q975: d.q975,
            });
        }
        for g in self.coefficients.iter().chain([&self.precision, &self.sigma2]) {
            out.push(summarize(g)?);
        }
        Ok(out)
    }
}

/// Distinct fits among the kept draws with their multiplicities, in order
/// of first appearance.
pub(crate) fn unique_fits(chain: &Chain) -> Vec<(usize, Arc<FitResult>, f64)> {
    let mut seen: HashMap<*const FitResult, usize> = HashMap::new();
    let mut out: Vec<(usize, Arc<FitResult>, f64)> = Vec::new();
    for (j, f) in chain.fits.iter().enumerate() {
        let Some(f) = f else { continue };
        match seen.get(&Arc::as_ptr(f)) {
            Some(&k) => out[k].2 += 1.0,
            None => {
                seen.insert(Arc::as_ptr(f), out.len());
                out.push((j, f.clone(), 1.0));
            }
        }
    }
    out
}

/// Averages per-draw grids `make(fit)` over the kept draws.
pub(crate) fn average_over_draws<F>(chain: &Chain, name: &str, make: F) -> Result<MarginalGrid>
where
    F: Fn(usize, &FitResult) -> Result<MarginalGrid>,
{
    let unique = unique_fits(chain);
    let mut grids = Vec::with_capacity(unique.len());
    let mut weights = Vec::with_capacity(unique.len());
    for (j, f, count) in &unique {
        grids.push(make(*j, f)?);
        weights.push(*count);
    }
    Ok(mix_marginals(&grids, Some(&weights))?.renamed(name))
}

pub fn fit_manski(spec: &ManskiSpec, config: &ChainConfig, workers: usize) -> Result<ManskiFit> {
    fit_manski_with_progress(spec, config, workers, |_, _| {})
}

pub fn fit_manski_with_progress<P>(spec: &ManskiSpec, config: &ChainConfig, workers: usize, progress: P) -> Result<ManskiFit>
where
    P: FnMut(usize, &TraceRow),
{
    let family = ManskiFamily::new(spec, workers);
    let chain = run_chain_with_progress(&family, config, progress)?;
    let names = spec.coefficient_names();
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(k, name)| average_over_draws(&chain, name, |_, f| f.target_marginal(k)))
        .collect::<Result<Vec<_>>>()?;
    let precision = average_over_draws(&chain, PRECISION_HYPER, |_, f| {
        f.hyper_marginal(PRECISION_HYPER)
            .cloned()
            .ok_or_else(|| Error::CovariateNotFound(PRECISION_HYPER.into()))
    })?;
    let sigma2 = reciprocal_grid(&precision)?.renamed("sigma2");
    Ok(ManskiFit {
        chain,
        coefficient_names: names,
        coefficients,
        precision,
        sigma2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impacts {
    pub covariate: String,
    pub direct: MarginalGrid,
    pub indirect: MarginalGrid,
    pub total: MarginalGrid,
}

/// Density of `c·X`. A zero multiplier gives a narrow spike at zero whose
/// width is a tiny fraction of the input's spread.
fn scaled(grid: &MarginalGrid, c: f64, name: &str) -> Result<MarginalGrid> {
    if c == 0.0 {
        let width = 1e-9 * grid.sd().max(f64::MIN_POSITIVE);
        return Ok(MarginalGrid::gaussian(name, 0.0, width, grid.len())?);
    }
    Ok(transform_grid(grid, c, 0.0)?.renamed(name))
}

/// Direct, indirect and total impacts of covariate `covariate`, averaged
/// over the kept draws.
pub fn impacts(fit: &ManskiFit, spec: &ManskiSpec, covariate: &str) -> Result<Impacts> {
    let r = spec.covariate_index(covariate)?;
    let names = [
        format!("direct.{covariate}"),
        format!("indirect.{covariate}"),
        format!("total.{covariate}"),
    ];
    let chain = &fit.chain;
    let grid = |kind: usize| -> Result<MarginalGrid> {
        average_over_draws(chain, &names[kind], |j, f| {
            if spec.lagged {
                let k = f
                    .target_index(&names[kind])
                    .ok_or_else(|| Error::CovariateNotFound(names[kind].clone()))?;
                return f.target_marginal(k);
            }
            let c = impact_scalars(&spec.w, chain.draws[j][0])?;
            let beta = f.target_marginal(r)?;
            let m = [c.direct, c.indirect, c.total][kind];
            scaled(&beta, m, &names[kind])
        })
    };
    Ok(Impacts {
        covariate: covariate.to_string(),
        direct: grid(0)?,
        indirect: grid(1)?,
        total: grid(2)?,
    })
}
