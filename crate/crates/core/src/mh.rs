//! Metropolis-Hastings over conditioning parameters, refitting the
//! conditional latent Gaussian model at every proposal.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::FitResult;

/// Conditional log marginal likelihood at one value of the conditioning
/// parameters, with the fit that produced it when one exists.
#[derive(Debug, Clone)]
pub struct ConditionalFit {
    /// Includes any additive correction (such as a Jacobian) that depends on
    /// the conditioning parameters.
    pub log_ml: f64,
    pub fit: Option<Arc<FitResult>>,
}

/// A family of latent Gaussian models indexed by conditioning parameters.
pub trait ConditionedModelFamily {
    fn dim(&self) -> usize;

    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta{i}")).collect()
    }

    fn in_support(&self, theta: &[f64]) -> bool;

    fn log_prior(&self, theta: &[f64]) -> f64;

    /// Fits the model conditioned on `theta`. `warm` is the fit at the
    /// chain's current state and may be used to start the inner searches.
    fn fit(&self, theta: &[f64], warm: Option<&FitResult>) -> Result<ConditionalFit>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    /// Normal random walk on the parameter itself.
    Identity,
    /// Normal random walk on the logarithm of a positive parameter.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub kinds: Vec<ProposalKind>,
    pub sd: Vec<f64>,
}

impl ProposalSpec {
    pub fn identity(sd: Vec<f64>) -> Self {
        Self {
            kinds: vec![ProposalKind::Identity; sd.len()],
            sd,
        }
    }

    pub fn log(sd: Vec<f64>) -> Self {
        Self {
            kinds: vec![ProposalKind::Log; sd.len()],
            sd,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.kinds.len() != dim || self.sd.len() != dim {
            return Err(Error::InvalidConfig(format!(
                "proposal has {} kinds and {} sds for dimension {dim}",
                self.kinds.len(),
                self.sd.len()
            )));
        }
        if let Some(s) = self.sd.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidConfig(format!("proposal sd {s} must be positive")));
        }
        Ok(())
    }

    pub fn propose<R: Rng>(&self, curr: &[f64], rng: &mut R) -> Vec<f64> {
        curr.iter()
            .zip(&self.kinds)
            .zip(&self.sd)
            .map(|((&c, kind), &sd)| {
                let z: f64 = rng.sample(StandardNormal);
                match kind {
                    ProposalKind::Identity => c + sd * z,
                    ProposalKind::Log => c * (sd * z).exp(),
                }
            })
            .collect()
    }

    /// `log q(to | from)` up to a constant shared by both directions.
    pub fn log_density(&self, from: &[f64], to: &[f64]) -> f64 {
        from.iter()
            .zip(to)
            .zip(&self.kinds)
            .zip(&self.sd)
            .map(|(((&f, &t), kind), &sd)| match kind {
                ProposalKind::Identity => -0.5 * ((t - f) / sd).powi(2),
                ProposalKind::Log => {
                    if f > 0.0 && t > 0.0 {
                        -0.5 * ((t.ln() - f.ln()) / sd).powi(2) - t.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
            })
            .sum()
    }
}

/// Log conditional marginal likelihood and log prior of one chain state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateScore {
    pub log_ml: f64,
    pub log_prior: f64,
}

/// `min(0, [ℓ' + p' + log q(curr|prop)] − [ℓ + p + log q(prop|curr)])`.
///
/// A proposal with log density −∞ yields −∞. Non-finite current states and
/// NaN or +∞ anywhere are errors.
pub fn acceptance_log_prob(
    curr: &StateScore,
    prop: &StateScore,
    log_q_forward: f64,
    log_q_backward: f64,
) -> Result<f64> {
    let finite_curr = curr.log_ml.is_finite() && curr.log_prior.is_finite() && log_q_forward.is_finite();
    let bad = |v: f64| v.is_nan() || v == f64::INFINITY;
    if !finite_curr || bad(prop.log_ml) || bad(prop.log_prior) || bad(log_q_backward) {
        return Err(Error::NonFinite);
    }
    let num = prop.log_ml + prop.log_prior + log_q_backward;
    let den = curr.log_ml + curr.log_prior + log_q_forward;
    Ok((num - den).min(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burnin: usize,
    pub total: usize,
    pub thin: usize,
    pub seed: u64,
    pub proposal: ProposalSpec,
    pub init: Vec<f64>,
}

impl ChainConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.proposal.validate(dim)?;
        if self.init.len() != dim {
            return Err(Error::InvalidConfig(format!(
                "initial state of length {} for dimension {dim}",
                self.init.len()
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        if self.total <= self.burnin {
            return Err(Error::InvalidConfig(format!(
                "total {} must exceed burn-in {}",
                self.total, self.burnin
            )));
        }
        Ok(())
    }

    pub fn kept_count(&self) -> usize {
        (self.total - self.burnin) / self.thin
    }

    fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burnin && (iteration - self.burnin) % self.thin == 0
    }
}

/// One iteration of the chain, kept or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub log_ml: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub names: Vec<String>,
    pub config: ChainConfig,
    /// Kept states.
    pub draws: Vec<Vec<f64>>,
    pub log_ml: Vec<f64>,
    pub fits: Vec<Option<Arc<FitResult>>>,
    /// Accepted proposals over all iterations.
    pub accepted: usize,
    pub trace: Vec<TraceRow>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.trace.is_empty() {
            0.0
        } else {
            self.accepted as f64 / self.trace.len() as f64
        }
    }

    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    /// Kept fits, skipping draws whose family produced none.
    pub fn kept_fits(&self) -> Vec<&FitResult> {
        self.fits.iter().filter_map(|f| f.as_deref()).collect()
    }

    /// Writes every iteration as `iteration,<names>,log_ml,accepted`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["iteration".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("log_ml".into());
        header.push("accepted".into());
        out.write_record(&header)?;
        for row in &self.trace {
            let mut rec = vec![row.iteration.to_string()];
            rec.extend(row.theta.iter().map(|v| v.to_string()));
            rec.push(row.log_ml.to_string());
            rec.push(u8::from(row.accepted).to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Runs the chain. Each proposal inside the support is fitted and accepted
/// with the usual Metropolis-Hastings probability; rejected proposals repeat
/// the current state together with its fit.
pub fn run_chain<F: ConditionedModelFamily + ?Sized>(family: &F, config: &ChainConfig) -> Result<Chain> {
    run_chain_with_progress(family, config, |_, _| {})
}

/// [`run_chain`] with a callback invoked after every iteration.
pub fn run_chain_with_progress<F, P>(family: &F, config: &ChainConfig, mut progress: P) -> Result<Chain>
where
    F: ConditionedModelFamily + ?Sized,
    P: FnMut(usize, &TraceRow),
{
    let dim = family.dim();
    config.validate(dim)?;
    if !family.in_support(&config.init) {
        return Err(Error::OutOfSupport(format!("initial state {:?}", config.init)));
    }
    let fail = |theta: &[f64], e: Error| Error::FitFailed {
        theta: theta.to_vec(),
        source: Box::new(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curr = config.init.clone();
    let mut curr_fit = family.fit(&curr, None).map_err(|e| fail(&curr, e))?;
    let mut curr_score = StateScore {
        log_ml: curr_fit.log_ml,
        log_prior: family.log_prior(&curr),
    };
    if !(curr_score.log_ml.is_finite() && curr_score.log_prior.is_finite()) {
        return Err(fail(&curr, Error::NonFinite));
    }

    let mut chain = Chain {
        names: family.names(),
        config: config.clone(),
        draws: Vec::with_capacity(config.kept_count()),
        log_ml: Vec::with_capacity(config.kept_count()),
        fits: Vec::with_capacity(config.kept_count()),
        accepted: 0,
        trace: Vec::with_capacity(config.total),
    };

    for iteration in 1..=config.total {
        let prop = config.proposal.propose(&curr, &mut rng);
        let u: f64 = rng.random();
        let mut accepted = false;
        if family.in_support(&prop) {
            let prop_fit = family
                .fit(&prop, curr_fit.fit.as_deref())
                .map_err(|e| fail(&prop, e))?;
            let prop_score = StateScore {
                log_ml: prop_fit.log_ml,
                log_prior: family.log_prior(&prop),
            };
            let alpha = acceptance_log_prob(
                &curr_score,
                &prop_score,
                config.proposal.log_density(&curr, &prop),
                config.proposal.log_density(&prop, &curr),
            )
            .map_err(|e| fail(&prop, e))?;
            if u.ln() < alpha {
                accepted = true;
                curr = prop;
                curr_fit = prop_fit;
                curr_score = prop_score;
            }
        }
        if accepted {
            chain.accepted += 1;
        }
        let row = TraceRow {
            iteration,
            theta: curr.clone(),
            log_ml: curr_score.log_ml,
            accepted,
        };
        progress(iteration, &row);
        if config.keeps(iteration) {
            chain.draws.push(curr.clone());
            chain.log_ml.push(curr_score.log_ml);
            chain.fits.push(curr_fit.fit.clone());
        }
        chain.trace.push(row);
    }
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// Autocorrelations at lags 1 through 50 (fewer for short chains).
    pub autocorr: Vec<f64>,
    pub ess: f64,
    /// The draws are all identical; `ess` is then reported as 1.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub acceptance_rate: f64,
    pub kept: usize,
    pub coordinates: Vec<CoordinateSummary>,
}

pub fn diagnostics(chain: &Chain) -> Result<Diagnostics> {
    if chain.is_empty() {
        return Err(Error::EmptyChain);
    }
    let coordinates = chain
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| summarize_draws(name, &chain.coordinate(j)))
        .collect::<Result<_>>()?;
    Ok(Diagnostics {
        acceptance_rate: chain.acceptance_rate(),
        kept: chain.len(),
        coordinates,
    })
}

pub fn summarize_draws(name: &str, x: &[f64]) -> Result<CoordinateSummary> {
    if x.is_empty() {
        return Err(Error::EmptyChain);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (ess, degenerate) = effective_sample_size(x);
    Ok(CoordinateSummary {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        q025: sample_quantile(&sorted, 0.025),
        q50: sample_quantile(&sorted, 0.5),
        q975: sample_quantile(&sorted, 0.975),
        autocorr: autocorrelations(x, 50),
        ess,
        degenerate,
    })
}

/// Linear interpolation between order statistics of sorted `x`.
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample autocorrelations at lags `1..=max_lag` (bounded by the length).
pub fn autocorrelations(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let gamma0 = c.iter().map(|v| v * v).sum::<f64>();
    (1..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            if gamma0 == 0.0 {
                0.0
            } else {
                c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / gamma0
            }
        })
        .collect()
}

/// Effective sample size by the initial positive sequence estimator.
/// Returns `(1, true)` for constant input.
pub fn effective_sample_size(x: &[f64]) -> (f64, bool) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let gamma0 = c.iter().map(|v| v * v).sum::<f64>();
    if n < 2 || gamma0 == 0.0 {
        return (1.0, true);
    }
    let rho = |k: usize| -> f64 {
        if k >= n {
            return 0.0;
        }
        c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / gamma0
    };
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    (n as f64 / tau, false)
}
