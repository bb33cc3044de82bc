//! Shared-component model for several diseases observed on the same areas:
//!
//! ```text
//! O[d][i] ~ Poisson(E[d][i] · exp(α[d] + δ[d] · v[i] + s[d][i]))
//! ```
//!
//! with `v` an intrinsic CAR field shared by all diseases and `s[d]`
//! disease-specific intrinsic CAR fields with a common precision. Given the
//! weights `δ` the model is a latent Gaussian model; `δ` is sampled by the
//! outer chain on the log scale.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bma::{summarize, Summary};
use crate::econ::average_over_draws;
use crate::econ::unique_fits;
use crate::error::{Error, Result};
use crate::gmrf::{besag, icar_structure};
use crate::graphs::Adjacency;
use crate::io::CountTable;
use crate::laplace::{explore_hypers, FitConfig, FitResult, MarginalGrid, Target};
use crate::lgm::{HyperPrior, LatentModel, ModelBuilder, Precision, FIXED_EFFECT_PRECISION};
use crate::mh::{
    run_chain_with_progress, summarize_draws, Chain, ChainConfig, ConditionalFit,
    ConditionedModelFamily, ProposalSpec, TraceRow,
};

pub const TAU_V: &str = "tau_v";
pub const TAU_S: &str = "tau_s";

#[derive(Debug, Clone)]
pub struct DismapSpec {
    pub diseases: Vec<String>,
    pub adjacency: Adjacency,
    /// `observed[d][i]`, non-negative integer counts.
    pub observed: Vec<Vec<f64>>,
    /// `expected[d][i] > 0`.
    pub expected: Vec<Vec<f64>>,
    pub delta_prior: HyperPrior,
    pub tau_v_prior: HyperPrior,
    pub tau_s_prior: HyperPrior,
    pub alpha_precision: f64,
}

impl DismapSpec {
    pub fn new(
        diseases: Vec<String>,
        adjacency: Adjacency,
        observed: Vec<Vec<f64>>,
        expected: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = adjacency.n();
        let d = diseases.len();
        if d == 0 || observed.len() != d || expected.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "{d} diseases, {} observed and {} expected columns",
                observed.len(),
                expected.len()
            )));
        }
        for (o, e) in observed.iter().zip(&expected) {
            if o.len() != n || e.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "count columns must have {n} areas"
                )));
            }
            if let Some(v) = o.iter().find(|v| !(**v >= 0.0 && v.fract() == 0.0)) {
                return Err(Error::OutOfRange(format!("observed count {v}")));
            }
            if let Some(v) = e.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::OutOfRange(format!("expected count {v}")));
            }
        }
        Ok(Self {
            diseases,
            adjacency,
            observed,
            expected,
            delta_prior: HyperPrior::log_normal(0.0, 0.1)?,
            tau_v_prior: HyperPrior::default_precision(),
            tau_s_prior: HyperPrior::default_precision(),
            alpha_precision: FIXED_EFFECT_PRECISION,
        })
    }

    pub fn from_counts(table: &CountTable, adjacency: Adjacency) -> Result<Self> {
        Self::new(
            table.diseases.clone(),
            adjacency,
            table.observed.clone(),
            table.expected.clone(),
        )
    }

    pub fn to_counts(&self) -> CountTable {
        CountTable {
            diseases: self.diseases.clone(),
            ids: self.adjacency.ids().to_vec(),
            observed: self.observed.clone(),
            expected: self.expected.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    /// Expected counts scaled per disease so they add up to the observed
    /// total.
    pub fn rescaled(&self) -> Self {
        let mut out = self.clone();
        for (o, e) in out.observed.iter().zip(out.expected.iter_mut()) {
            let f = o.iter().sum::<f64>() / e.iter().sum::<f64>();
            if f > 0.0 {
                e.iter_mut().for_each(|v| *v *= f);
            }
        }
        out
    }

    /// Log-scale random walk with sd 0.1 from δ = 1.
    pub fn default_chain(&self, seed: u64) -> ChainConfig {
        let d = self.n_diseases();
        ChainConfig {
            burnin: 500,
            total: 5500,
            thin: 5,
            seed,
            proposal: ProposalSpec::log(vec![0.1; d]),
            init: vec![1.0; d],
        }
    }
}

/// Model at fixed δ, with the positions of each latent component.
#[derive(Debug, Clone)]
pub struct DismapConditional {
    pub model: LatentModel,
    pub alpha: Vec<usize>,
    pub shared: Range<usize>,
    pub specific: Vec<Range<usize>>,
}

/// Latent vector `[α (D), v (n), s (n·D)]`; observation `d·n + i` has
/// predictor `α[d] + δ[d]·v[i] + s[d][i]` and offset `log E[d][i]`.
pub fn build_conditional(spec: &DismapSpec, delta: &[f64]) -> Result<DismapConditional> {
    let (n, nd) = (spec.n(), spec.n_diseases());
    if delta.len() != nd {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {nd} diseases",
            delta.len()
        )));
    }
    if let Some(&d) = delta.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(Error::NonPositiveDelta(d));
    }
    let y: Vec<f64> = spec.observed.iter().flatten().copied().collect();
    let offset: Vec<f64> = spec.expected.iter().flatten().map(|e| e.ln()).collect();
    let mut b = ModelBuilder::observed(&y);
    b.poisson(offset);
    let tau_v = b.hyper(TAU_V, spec.tau_v_prior);
    let tau_s = b.hyper(TAU_S, spec.tau_s_prior);

    let alpha = (0..nd)
        .map(|d| {
            let indicator: Vec<f64> = (0..n * nd)
                .map(|k| if k / n == d { 1.0 } else { 0.0 })
                .collect();
            b.fixed_effect_with_precision(
                format!("alpha.{}", spec.diseases[d]),
                &indicator,
                spec.alpha_precision,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let icar = besag(&spec.adjacency)?;
    let v0 = b.block(icar.clone().with_label("shared"), Precision::Hyper(tau_v));
    let specific: Vec<Range<usize>> = (0..nd)
        .map(|d| {
            let s0 = b.block(
                icar.clone().with_label(format!("specific.{}", spec.diseases[d])),
                Precision::Hyper(tau_s),
            );
            s0..s0 + n
        })
        .collect();
    for d in 0..nd {
        for i in 0..n {
            let obs = d * n + i;
            b.link(obs, v0 + i, delta[d]);
            b.link(obs, specific[d].start + i, 1.0);
        }
    }
    Ok(DismapConditional {
        model: b.build()?,
        alpha,
        shared: v0..v0 + n,
        specific,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DismapOptions {
    pub workers: usize,
    /// Track the marginals of the shared field at every fit.
    pub track_shared: bool,
}

impl Default for DismapOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            track_shared: true,
        }
    }
}

/// [`ConditionedModelFamily`] over δ with independent log-Normal priors.
pub struct DismapFamily<'s> {
    spec: &'s DismapSpec,
    options: DismapOptions,
}

impl<'s> DismapFamily<'s> {
    pub fn new(spec: &'s DismapSpec, options: DismapOptions) -> Self {
        Self { spec, options }
    }
}

impl ConditionedModelFamily for DismapFamily<'_> {
    fn dim(&self) -> usize {
        self.spec.n_diseases()
    }

    fn names(&self) -> Vec<String> {
        self.spec.diseases.iter().map(|d| format!("delta.{d}")).collect()
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        theta.iter().all(|&d| d > 0.0 && d.is_finite())
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|&d| self.spec.delta_prior.log_density(d)).sum()
    }

    fn fit(&self, theta: &[f64], warm: Option<&FitResult>) -> Result<ConditionalFit> {
        let cond = build_conditional(self.spec, theta)?;
        let mut targets: Vec<Target> = cond
            .alpha
            .iter()
            .zip(&self.spec.diseases)
            .map(|(&i, d)| Target::latent(format!("alpha.{d}"), i))
            .collect();
        if self.options.track_shared {
            targets.extend(
                cond.shared
                    .clone()
                    .zip(self.spec.adjacency.ids())
                    .map(|(i, id)| Target::latent(format!("v.{id}"), i)),
            );
        }
        let config = FitConfig {
            targets,
            workers: self.options.workers,
            start: warm.map(|w| w.mode_internal.clone()),
            latent_start: warm.map(|w| w.mode_latent.clone()),
            start_curvature: warm.map(|w| w.mode_curvature.clone()),
            ..Default::default()
        };
        let fit = explore_hypers(&cond.model, &config)?;
        Ok(ConditionalFit {
            log_ml: fit.log_ml,
            fit: Some(Arc::new(fit)),
        })
    }
}

/// Posterior mean and sd of one area's shared effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedEffect {
    pub id: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct DismapFit {
    pub chain: Chain,
    pub alpha: Vec<MarginalGrid>,
    pub tau_v: MarginalGrid,
    pub tau_s: MarginalGrid,
    /// Empty unless the shared field was tracked.
    pub shared: Vec<SharedEffect>,
    /// Correlations between the δ draws.
    pub delta_correlation: DMatrix<f64>,
}

impl DismapFit {
    /// `ratio.<disease d>`, the name used for `δ[d]/δ[0]`.
    pub fn ratio_name(&self, d: usize) -> String {
        let name = &self.chain.names[d];
        format!("ratio.{}", name.strip_prefix("delta.").unwrap_or(name))
    }

    /// Draws of `δ[d]/δ[0]`.
    pub fn ratio_draws(&self, d: usize) -> Vec<f64> {
        self.chain.draws.iter().map(|t| t[d] / t[0]).collect()
    }

    pub fn summaries(&self) -> Result<Vec<Summary>> {
        let mut out = Vec::new();
        for (j, name) in self.chain.names.iter().enumerate() {
            out.push(draw_summary(name, &self.chain.coordinate(j))?);
        }
        for d in 1..self.chain.names.len() {
            out.push(draw_summary(&self.ratio_name(d), &self.ratio_draws(d))?);
        }
        for g in self.alpha.iter().chain([&self.tau_v, &self.tau_s]) {
            out.push(summarize(g)?);
        }
        Ok(out)
    }
}

fn draw_summary(name: &str, x: &[f64]) -> Result<Summary> {
    let d = summarize_draws(name, x)?;
    Ok(Summary {
        name: d.name,
        mean: d.mean,
        sd: d.sd,
        q025: d.q025,
        q50: d.q50,
        q975: d.q975,
    })
}

fn correlation(chain: &Chain) -> DMatrix<f64> {
    let k = chain.names.len();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| chain.coordinate(j)).collect();
    let n = chain.len() as f64;
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let cov = DMatrix::from_fn(k, k, |a, b| {
        cols[a]
            .iter()
            .zip(&cols[b])
            .map(|(x, y)| (x - means[a]) * (y - means[b]))
            .sum::<f64>()
            / n
    });
    DMatrix::from_fn(k, k, |a, b| {
        let s = (cov[(a, a)] * cov[(b, b)]).sqrt();
        if s > 0.0 {
            cov[(a, b)] / s
        } else if a == b {
            1.0
        } else {
            0.0
        }
    })
}

/// Rescales the expected counts, runs the chain over δ and averages the
/// conditional marginals over the kept draws.
pub fn fit_dismap(spec: &DismapSpec, config: &ChainConfig, options: DismapOptions) -> Result<DismapFit> {
    fit_dismap_with_progress(spec, config, options, |_, _| {})
}

pub fn fit_dismap_with_progress<P>(
    spec: &DismapSpec,
    config: &ChainConfig,
    options: DismapOptions,
    progress: P,
) -> Result<DismapFit>
where
    P: FnMut(usize, &TraceRow),
{
    let spec = spec.rescaled();
    let family = DismapFamily::new(&spec, options);
    let chain = run_chain_with_progress(&family, config, progress)?;
    let nd = spec.n_diseases();
    let alpha = (0..nd)
        .map(|d| {
            let name = format!("alpha.{}", spec.diseases[d]);
            average_over_draws(&chain, &name, |_, f| f.target_marginal(d))
        })
        .collect::<Result<Vec<_>>>()?;
    let hyper = |name: &'static str| {
        average_over_draws(&chain, name, move |_, f| {
            f.hyper_marginal(name)
                .cloned()
                .ok_or_else(|| Error::CovariateNotFound(name.into()))
        })
    };
    let tau_v = hyper(TAU_V)?;
    let tau_s = hyper(TAU_S)?;

    let mut shared = Vec::new();
    if options.track_shared {
        let unique = unique_fits(&chain);
        let total: f64 = unique.iter().map(|u| u.2).sum();
        for (i, id) in spec.adjacency.ids().iter().enumerate() {
            let k = nd + i;
            let (mut m1, mut m2) = (0.0, 0.0);
            for (_, f, count) in &unique {
                let (m, v) = f.target_moments(k);
                m1 += count * m;
                m2 += count * (v + m * m);
            }
            let mean = m1 / total;
            shared.push(SharedEffect {
                id: id.clone(),
                mean,
                sd: (m2 / total - mean * mean).max(0.0).sqrt(),
            });
        }
    }
    let delta_correlation = correlation(&chain);
    Ok(DismapFit {
        chain,
        alpha,
        tau_v,
        tau_s,
        shared,
        delta_correlation,
    })
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau_v: f64,
    pub tau_s: f64,
    /// Expected counts per area, shared by every disease.
    pub expected: Vec<f64>,
    pub seed: u64,
}

/// Draws from an intrinsic CAR prior: independent normals along the
/// non-null eigenvectors of the structure matrix, then each connected
/// component centred exactly.
pub struct IcarSampler {
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    components: Vec<Vec<usize>>,
}

impl IcarSampler {
    pub fn new(adjacency: &Adjacency) -> Self {
        let t = icar_structure(adjacency).to_dense();
        let eig = t.clone().symmetric_eigen();
        let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&k| eig.eigenvalues[k] > tol)
            .collect();
        let basis = DMatrix::from_fn(t.nrows(), keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
        let scales = DVector::from_iterator(
            keep.len(),
            keep.iter().map(|&k| eig.eigenvalues[k].recip().sqrt()),
        );
        Self {
            basis,
            scales,
            components: adjacency.components(),
        }
    }

    pub fn sample<R: rand::Rng>(&self, tau: f64, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.scales.len(),
            self.scales.iter().map(|s| {
                let e: f64 = rng.sample(StandardNormal);
                e * s / tau.sqrt()
            }),
        );
        let mut v: Vec<f64> = (&self.basis * z).iter().copied().collect();
        for comp in &self.components {
            let m = comp.iter().map(|&i| v[i]).sum::<f64>() / comp.len() as f64;
            comp.iter().for_each(|&i| v[i] -= m);
        }
        v
    }
}

/// Synthetic counts with a known shared field. Returns the spec and the
/// true shared field.
pub fn generate_synthetic(adjacency: &Adjacency, cfg: &SyntheticConfig) -> Result<(DismapSpec, Vec<f64>)> {
    let n = adjacency.n();
    let nd = cfg.delta.len();
    if cfg.alpha.len() != nd || cfg.expected.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{nd} weights, {} intercepts, {} expected counts for {n} areas",
            cfg.alpha.len(),
            cfg.expected.len()
        )));
    }
    if let Some(&d) = cfg.delta.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::NonPositiveDelta(d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = IcarSampler::new(adjacency);
    let v = sampler.sample(cfg.tau_v, &mut rng);
    let mut observed = Vec::with_capacity(nd);
    for d in 0..nd {
        let s = sampler.sample(cfg.tau_s, &mut rng);
        let col = (0..n)
            .map(|i| {
                let mu = cfg.expected[i] * (cfg.alpha[d] + cfg.delta[d] * v[i] + s[i]).exp();
                if mu > 0.0 {
                    Poisson::new(mu)
                        .map(|p| p.sample(&mut rng))
                        .map_err(|_| Error::OutOfRange(format!("Poisson mean {mu}")))
                } else {
                    Ok(0.0)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        observed.push(col);
    }
    let diseases = (1..=nd).map(|d| format!("d{d}")).collect();
    let spec = DismapSpec::new(
        diseases,
        adjacency.clone(),
        observed,
        vec![cfg.expected.clone(); nd],
    )?;
    Ok((spec, v))
}
