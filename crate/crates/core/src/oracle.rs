//! Reference samplers and brute-force integration used to check the Laplace
//! path: a Metropolis-within-Gibbs sampler for the spatial econometric
//! model, a single-site sampler for the shared-component model, and tensor
//! grid quadrature for tiny latent Gaussian models.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::dismap::DismapSpec;
use crate::econ::{impact_scalars, ManskiSpec, PRECISION_HYPER};
use crate::error::{Error, Result};
use crate::laplace::{linspace, MarginalGrid};
use crate::lgm::{Family, LatentModel, Precision, PriorDensity};
use crate::spmat::logdet_shifted;

/// Raw draws, one row per kept iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::NameMismatch(format!("no column {name}")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn mean(&self, name: &str) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(Error::EmptyChain);
        }
        let c = self.column(name)?;
        Ok(c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: k + 2,
                        message: format!("{f:?} is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { names, rows })
    }
}

/// Length and seed of an oracle chain. Iteration `i` (1-based) is kept when
/// `i > burnin` and `(i − burnin) % thin == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
}

impl OracleConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            burnin: iterations / 10,
            thin: 10,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.burnin >= self.iterations {
            return Err(Error::InvalidConfig(format!(
                "burnin {} must be below iterations {} and thin {} positive",
                self.burnin, self.iterations, self.thin
            )));
        }
        Ok(())
    }

    fn keeps(&self, i: usize) -> bool {
        i > self.burnin && (i - self.burnin) % self.thin == 0
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn accept<R: Rng>(rng: &mut R, log_ratio: f64) -> bool {
    let u: f64 = rng.random();
    log_ratio.is_finite() && u.ln() < log_ratio
}

// ---------------------------------------------------------------------------
// Spatial econometric model

struct ManskiState {
    y: Vec<f64>,
    wy: Vec<f64>,
    wwy: Vec<f64>,
    /// Design columns, including lagged covariates.
    x: Vec<Vec<f64>>,
    wx: Vec<Vec<f64>>,
}

impl ManskiState {
    fn new(spec: &ManskiSpec) -> Self {
        let w = &spec.w;
        let wy = w.mul_vec(&spec.y);
        let wwy = w.mul_vec(&wy);
        let mut x: Vec<Vec<f64>> = (0..spec.x.ncols())
            .map(|j| spec.x.column(j).iter().copied().collect())
            .collect();
        if spec.lagged {
            for j in 1..spec.x.ncols() {
                x.push(w.mul_vec(&x[j]));
            }
        }
        let wx = x.iter().map(|c| w.mul_vec(c)).collect();
        Self {
            y: spec.y.clone(),
            wy,
            wwy,
            x,
            wx,
        }
    }

    fn y_tilde(&self, rho: f64, lambda: f64) -> Vec<f64> {
        (0..self.y.len())
            .map(|i| self.y[i] - (rho + lambda) * self.wy[i] + rho * lambda * self.wwy[i])
            .collect()
    }

    fn x_tilde(&self, lambda: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.y.len(), self.x.len(), |i, j| {
            self.x[j][i] - lambda * self.wx[j][i]
        })
    }

    fn rss(&self, rho: f64, lambda: f64, beta: &DVector<f64>) -> f64 {
        let yt = DVector::from_vec(self.y_tilde(rho, lambda));
        (yt - self.x_tilde(lambda) * beta).norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManskiOracleOptions {
    /// Random-walk sd for ρ and λ.
    pub step: f64,
    /// Holds (ρ, λ) at these values instead of sampling them.
    pub fixed: Option<(f64, f64)>,
}

impl Default for ManskiOracleOptions {
    fn default() -> Self {
        Self {
            step: 0.15,
            fixed: None,
        }
    }
}

/// Metropolis-within-Gibbs for the spatial econometric model: β from its
/// Normal full conditional, the noise precision from its Gamma full
/// conditional (log-scale random walk for other priors) and ρ, λ by
/// single-site random walks under the uniform prior on the support.
/// Columns: `rho`, `lambda`, the coefficients and `precision`.
pub fn oracle_manski(
    spec: &ManskiSpec,
    config: &OracleConfig,
    options: &ManskiOracleOptions,
) -> Result<SampleTable> {
    config.validate()?;
    if spec.n() > 500 {
        return Err(Error::OutOfRange(format!("{} areas, at most 500", spec.n())));
    }
    let st = ManskiState::new(spec);
    let eigs = spec.w.eigenvalues();
    let n = spec.n() as f64;
    let p = st.x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (mut rho, mut lambda) = options.fixed.unwrap_or((0.0, 0.0));
    if !spec.in_support(rho, lambda) {
        return Err(Error::OutOfSupport(format!("(rho, lambda) = ({rho}, {lambda})")));
    }
    let step = options.step;
    let mut beta: DVector<f64>;
    let mut tau = 1.0;
    let log_target = |rho: f64, lambda: f64, beta: &DVector<f64>, tau: f64| -> f64 {
        if !spec.in_support(rho, lambda) {
            return f64::NEG_INFINITY;
        }
        let jac = logdet_shifted(eigs, rho).unwrap_or(f64::NEG_INFINITY)
            + logdet_shifted(eigs, lambda).unwrap_or(f64::NEG_INFINITY);
        jac - 0.5 * tau * st.rss(rho, lambda, beta)
    };

    let mut names = vec!["rho".to_string(), "lambda".to_string()];
    names.extend(spec.coefficient_names());
    names.push(PRECISION_HYPER.to_string());
    let mut rows = Vec::new();
    for it in 1..=config.iterations {
        // β | τ, ρ, λ
        let yt = DVector::from_vec(st.y_tilde(rho, lambda));
        let xt = st.x_tilde(lambda);
        let prec = tau * xt.transpose() * &xt + DMatrix::identity(p, p) * spec.beta_precision;
        let chol = prec
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { column: 0, pivot: 0.0 })?;
        let mean = chol.solve(&(tau * xt.transpose() * &yt));
        let z = DVector::from_fn(p, |_, _| normal(&mut rng));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or(Error::NonFinite)?;
        beta = mean + dev;

        // τ | β, ρ, λ
        let rss = (&yt - &xt * &beta).norm_squared();
        match spec.precision_prior.density() {
            PriorDensity::Gamma { shape, rate } => {
                let g = Gamma::new(shape + 0.5 * n, 1.0 / (rate + 0.5 * rss))
                    .map_err(|e| Error::OutOfRange(e.to_string()))?;
                tau = g.sample(&mut rng);
            }
            _ => {
                let prior = spec.precision_prior;
                let lt = |t: f64| 0.5 * n * t.ln() - 0.5 * t * rss + prior.log_density(t) + t.ln();
                let prop = tau * (0.3 * normal(&mut rng)).exp();
                if accept(&mut rng, lt(prop) - lt(tau)) {
                    tau = prop;
                }
            }
        }

        // ρ then λ
        if options.fixed.is_some() {
            if config.keeps(it) {
                let mut row = vec![rho, lambda];
                row.extend(beta.iter());
                row.push(tau);
                rows.push(row);
            }
            continue;
        }
        let current = log_target(rho, lambda, &beta, tau);
        let prop = rho + step * normal(&mut rng);
        let lp = log_target(prop, lambda, &beta, tau);
        let current = if accept(&mut rng, lp - current) {
            rho = prop;
            lp
        } else {
            current
        };
        let prop = lambda + step * normal(&mut rng);
        let lp = log_target(rho, prop, &beta, tau);
        if accept(&mut rng, lp - current) {
            lambda = prop;
        }

        if config.keeps(it) {
            let mut row = vec![rho, lambda];
            row.extend(beta.iter());
            row.push(tau);
            rows.push(row);
        }
    }
    Ok(SampleTable { names, rows })
}

/// Per-draw direct, indirect and total impacts of `covariate` from an
/// [`oracle_manski`] table.
pub fn impact_draws(
    table: &SampleTable,
    spec: &ManskiSpec,
    covariate: &str,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let jr = table.index("rho")?;
    let jb = table.index(covariate)?;
    let jg = if spec.lagged {
        Some(table.index(&format!("lag.{covariate}"))?)
    } else {
        None
    };
    let (mut dir, mut ind, mut tot) = (Vec::new(), Vec::new(), Vec::new());
    for r in &table.rows {
        let c = impact_scalars(&spec.w, r[jr])?;
        let b = r[jb];
        let g = jg.map_or(0.0, |j| r[j]);
        let d = c.direct * b + c.direct_lagged * g;
        let t = c.total * (b + g);
        dir.push(d);
        ind.push(t - d);
        tot.push(t);
    }
    Ok((dir, ind, tot))
}

// ---------------------------------------------------------------------------
// Shared-component disease mapping model

/// Settings for [`oracle_dismap`] beyond the chain length.
#[derive(Debug, Clone, PartialEq)]
pub struct DismapOracleOptions {
    /// Holds δ at these values instead of sampling it.
    pub fixed_delta: Option<Vec<f64>>,
    /// Log-scale random-walk sd for δ and the two precisions.
    pub log_step: f64,
    /// Record the shared field in the table.
    pub record_shared: bool,
}

impl Default for DismapOracleOptions {
    fn default() -> Self {
        Self {
            fixed_delta: None,
            log_step: 0.1,
            record_shared: true,
        }
    }
}

struct DismapOracle<'a> {
    spec: &'a DismapSpec,
    n: usize,
    nd: usize,
    neighbors: Vec<Vec<usize>>,
    rank: f64,
    alpha: Vec<f64>,
    v: Vec<f64>,
    s: Vec<Vec<f64>>,
    delta: Vec<f64>,
    tau_v: f64,
    tau_s: f64,
    /// `α[d] + δ[d] v[i] + s[d][i]`
    eta: Vec<Vec<f64>>,
}

impl DismapOracle<'_> {
    fn obs_loglik(&self, d: usize, i: usize, eta: f64) -> f64 {
        let e = self.spec.expected[d][i];
        self.spec.observed[d][i] * eta - e * eta.exp()
    }

    /// `xᵀ T x` for the intrinsic CAR structure.
    fn icar_quad(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..self.n {
            for &j in &self.neighbors[i] {
                if j > i {
                    q += (x[i] - x[j]).powi(2);
                }
            }
        }
        q
    }

    /// Change of `−τ/2 xᵀTx` when `x[i]` moves to `new`.
    fn icar_delta(&self, x: &[f64], i: usize, new: f64, tau: f64) -> f64 {
        let old = x[i];
        let mut change = 0.0;
        for &j in &self.neighbors[i] {
            change += (new - x[j]).powi(2) - (old - x[j]).powi(2);
        }
        -0.5 * tau * change
    }

    fn sweep<R: Rng>(&mut self, rng: &mut R, options: &DismapOracleOptions) {
        let (n, nd) = (self.n, self.nd);
        let prior_alpha = self.spec.alpha_precision;

        for d in 0..nd {
            let total: f64 = self.spec.observed[d].iter().sum();
            let sd = 1.5 / (total + 1.0).sqrt();
            let step = sd * normal(rng);
            let new = self.alpha[d] + step;
            let mut lr = -0.5 * prior_alpha * (new * new - self.alpha[d] * self.alpha[d]);
            for i in 0..n {
                lr += self.obs_loglik(d, i, self.eta[d][i] + step)
                    - self.obs_loglik(d, i, self.eta[d][i]);
            }
            if accept(rng, lr) {
                self.alpha[d] = new;
                self.eta[d].iter_mut().for_each(|e| *e += step);
            }
        }

        for i in 0..n {
            let info: f64 = (0..nd)
                .map(|d| self.delta[d].powi(2) * (self.spec.observed[d][i] + 0.5))
                .sum::<f64>()
                + self.tau_v * self.neighbors[i].len() as f64;
            let step = 1.5 / info.sqrt() * normal(rng);
            let new = self.v[i] + step;
            let mut lr = self.icar_delta(&self.v, i, new, self.tau_v);
            for d in 0..nd {
                let e = self.eta[d][i];
                lr += self.obs_loglik(d, i, e + self.delta[d] * step) - self.obs_loglik(d, i, e);
            }
            if accept(rng, lr) {
                self.v[i] = new;
                for d in 0..nd {
                    self.eta[d][i] += self.delta[d] * step;
                }
            }
        }

        for d in 0..nd {
            for i in 0..n {
                let info = self.spec.observed[d][i]
                    + 0.5
                    + self.tau_s * self.neighbors[i].len() as f64;
                let step = 1.5 / info.sqrt() * normal(rng);
                let new = self.s[d][i] + step;
                let e = self.eta[d][i];
                let lr = self.icar_delta(&self.s[d], i, new, self.tau_s)
                    + self.obs_loglik(d, i, e + step)
                    - self.obs_loglik(d, i, e);
                if accept(rng, lr) {
                    self.s[d][i] = new;
                    self.eta[d][i] += step;
                }
            }
        }

        let h = options.log_step;
        if options.fixed_delta.is_none() {
            for d in 0..nd {
                let new = self.delta[d] * (h * normal(rng)).exp();
                let prior = self.spec.delta_prior;
                let mut lr = prior.log_density(new) - prior.log_density(self.delta[d])
                    + (new / self.delta[d]).ln();
                let shift: Vec<f64> = self.v.iter().map(|v| (new - self.delta[d]) * v).collect();
                for i in 0..n {
                    lr += self.obs_loglik(d, i, self.eta[d][i] + shift[i])
                        - self.obs_loglik(d, i, self.eta[d][i]);
                }
                if accept(rng, lr) {
                    self.delta[d] = new;
                    for i in 0..n {
                        self.eta[d][i] += shift[i];
                    }
                }
            }
        }

        let qv = self.icar_quad(&self.v);
        let qs: f64 = self.s.iter().map(|s| self.icar_quad(s)).sum();
        let rank = self.rank;
        let precision_step = |tau: f64, q: f64, copies: f64, prior: crate::lgm::HyperPrior, rng: &mut R| {
            let new = tau * (h * normal(rng)).exp();
            let lt = |t: f64| 0.5 * copies * rank * t.ln() - 0.5 * t * q + prior.log_density(t) + t.ln();
            if accept(rng, lt(new) - lt(tau)) {
                new
            } else {
                tau
            }
        };
        self.tau_v = precision_step(self.tau_v, qv, 1.0, self.spec.tau_v_prior, rng);
        self.tau_s = precision_step(self.tau_s, qs, nd as f64, self.spec.tau_s_prior, rng);

        // Joint rescaling along the direction that leaves the likelihood
        // unchanged: δ → cδ, v → v/c, τ_v → c²τ_v.
        if options.fixed_delta.is_none() {
            let c = (h * normal(rng)).exp();
            let dp = self.spec.delta_prior;
            let tp = self.spec.tau_v_prior;
            let lr = self
                .delta
                .iter()
                .map(|&d| dp.log_density(c * d) - dp.log_density(d))
                .sum::<f64>()
                + tp.log_density(c * c * self.tau_v)
                - tp.log_density(self.tau_v)
                + (nd as f64 + 2.0) * c.ln();
            if accept(rng, lr) {
                self.delta.iter_mut().for_each(|d| *d *= c);
                self.v.iter_mut().for_each(|v| *v /= c);
                self.tau_v *= c * c;
            }
        }

        // Re-centre the fields, moving their means into the intercepts so
        // the linear predictor is unchanged.
        let mv = self.v.iter().sum::<f64>() / n as f64;
        self.v.iter_mut().for_each(|v| *v -= mv);
        for d in 0..nd {
            let ms = self.s[d].iter().sum::<f64>() / n as f64;
            self.s[d].iter_mut().for_each(|s| *s -= ms);
            self.alpha[d] += self.delta[d] * mv + ms;
        }
    }
}

/// Single-site random-walk sampler for the shared-component model on a
/// connected adjacency. Expected counts are rescaled as in
/// [`crate::dismap::fit_dismap`]. Columns: `delta.<d>`, `tau_v`, `tau_s`,
/// `alpha.<d>` and, if recorded, `v.<id>`.
pub fn oracle_dismap(
    spec: &DismapSpec,
    config: &OracleConfig,
    options: &DismapOracleOptions,
) -> Result<SampleTable> {
    config.validate()?;
    let (n, nd) = (spec.n(), spec.n_diseases());
    if n * nd > 2000 {
        return Err(Error::OutOfRange(format!("{} observations, at most 2000", n * nd)));
    }
    if spec.adjacency.components().len() != 1 {
        return Err(Error::OutOfRange(
            "the reference sampler needs a connected adjacency".into(),
        ));
    }
    let spec = spec.rescaled();
    let delta = match &options.fixed_delta {
        Some(d) if d.len() != nd => {
            return Err(Error::DimensionMismatch(format!("{} weights for {nd} diseases", d.len())))
        }
        Some(d) => {
            if let Some(&bad) = d.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::NonPositiveDelta(bad));
            }
            d.clone()
        }
        None => vec![1.0; nd],
    };
    let neighbors = (0..n).map(|i| spec.adjacency.neighbors(i).to_vec()).collect();
    let mut st = DismapOracle {
        spec: &spec,
        n,
        nd,
        neighbors,
        rank: (n - 1) as f64,
        alpha: vec![0.0; nd],
        v: vec![0.0; n],
        s: vec![vec![0.0; n]; nd],
        delta,
        tau_v: 1.0,
        tau_s: 1.0,
        eta: vec![vec![0.0; n]; nd],
    };
    let mut names: Vec<String> = spec.diseases.iter().map(|d| format!("delta.{d}")).collect();
    names.push("tau_v".into());
    names.push("tau_s".into());
    names.extend(spec.diseases.iter().map(|d| format!("alpha.{d}")));
    if options.record_shared {
        names.extend(spec.adjacency.ids().iter().map(|id| format!("v.{id}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::new();
    for it in 1..=config.iterations {
        st.sweep(&mut rng, options);
        if config.keeps(it) {
            let mut row = st.delta.clone();
            row.push(st.tau_v);
            row.push(st.tau_s);
            row.extend(&st.alpha);
            if options.record_shared {
                row.extend(&st.v);
            }
            rows.push(row);
        }
    }
    Ok(SampleTable { names, rows })
}

// ---------------------------------------------------------------------------
// Quadrature

/// Largest number of latent coordinates [`quadrature_oracle`] integrates.
pub const QUADRATURE_MAX_LATENT: usize = 2;
/// Points per dimension on the finest grid (`2^9 + 1`).
pub const QUADRATURE_POINTS: usize = 513;
const SCAN_POINTS: usize = 65;

#[derive(Debug, Clone)]
pub struct QuadratureResult {
    pub log_ml: f64,
    /// Posterior marginal of each latent coordinate.
    pub latent: Vec<MarginalGrid>,
    /// Posterior marginal of each free hyperparameter on the natural scale.
    pub hyper: Vec<MarginalGrid>,
    /// Posterior mean of each latent coordinate.
    pub latent_means: Vec<f64>,
}

/// Exact log posterior kernel on the integration coordinates: latent
/// values followed by free hypers on the internal scale.
struct Kernel<'m> {
    model: &'m LatentModel,
    free: Vec<usize>,
    lik_needs_theta: bool,
}

impl Kernel<'_> {
    fn theta(&self, phi: &[f64]) -> Option<Vec<f64>> {
        let nat: Vec<f64> = phi
            .iter()
            .zip(&self.free)
            .map(|(&p, &i)| self.model.hypers()[i].prior.from_internal(p))
            .collect();
        self.model.hyper_values(&nat).ok()
    }

    fn hyper_part(&self, phi: &[f64], theta: &[f64]) -> f64 {
        let jac: f64 = phi
            .iter()
            .zip(&self.free)
            .map(|(&p, &i)| self.model.hypers()[i].prior.log_jacobian(p))
            .sum();
        self.model.log_prior_hypers(theta) + jac
    }

    fn log_density(&self, x: &[f64], phi: &[f64]) -> f64 {
        let Some(theta) = self.theta(phi) else {
            return f64::NEG_INFINITY;
        };
        let lik = self
            .model
            .log_likelihood_eta(&self.model.eta(x), &theta)
            .map_or(f64::NEG_INFINITY, |l| l.value);
        let v = lik + self.model.log_prior_latent(x, &theta) + self.hyper_part(phi, &theta);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// Tensor grid over `dims` axes; calls `f` at every node with the node's
/// coordinates and returns the values in row-major order.
fn tensor<F: FnMut(&[f64]) -> f64>(axes: &[Vec<f64>], mut f: F) -> Vec<f64> {
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    for _ in 0..total {
        out.push(f(&point));
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                point[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            point[d] = axes[d][0];
        }
    }
    out
}

/// Box `[lo, hi]` per axis where the log density is within `drop` of its
/// maximum on a coarse scan of `axes`.
fn active_box(axes: &[Vec<f64>], values: &[f64], drop: f64) -> Option<Vec<(f64, f64)>> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let dims = axes.len();
    let mut lo = vec![usize::MAX; dims];
    let mut hi = vec![0usize; dims];
    let strides: Vec<usize> = (0..dims)
        .map(|d| axes[d + 1..].iter().map(Vec::len).product())
        .collect();
    for (k, &v) in values.iter().enumerate() {
        if v >= max - drop {
            for d in 0..dims {
                let i = (k / strides[d]) % axes[d].len();
                lo[d] = lo[d].min(i);
                hi[d] = hi[d].max(i);
            }
        }
    }
    Some(
        (0..dims)
            .map(|d| {
                let a = &axes[d];
                (a[lo[d].saturating_sub(1)], a[(hi[d] + 1).min(a.len() - 1)])
            })
            .collect(),
    )
}

/// Trapezoid weights for `n` equally spaced points with spacing `h`.
fn trapezoid(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] *= 0.5;
    w[n - 1] *= 0.5;
    w
}

/// Integrates the exact posterior of a model with at most
/// [`QUADRATURE_MAX_LATENT`] unconstrained latent coordinates and one free
/// hyperparameter on a tensor grid of [`QUADRATURE_POINTS`] per axis. The
/// box is located by two coarse scans. The log marginal likelihood is the
/// Romberg combination of the trapezoid rules on the finest grid and on
/// every other node; the two must agree within 1e-4.
pub fn quadrature_oracle(model: &LatentModel) -> Result<QuadratureResult> {
    let free = model.free_hypers();
    let m = model.dim();
    if m == 0 || m > QUADRATURE_MAX_LATENT || free.len() > 1 {
        return Err(Error::DimensionMismatch(format!(
            "quadrature needs 1..={QUADRATURE_MAX_LATENT} latent and at most 1 free hyper, got {m} and {}",
            free.len()
        )));
    }
    if !model.constraints().is_empty() {
        return Err(Error::DimensionMismatch("quadrature needs an unconstrained model".into()));
    }
    let lik_needs_theta = matches!(
        model.family(),
        Family::Gaussian {
            precision: Precision::Hyper(_)
        }
    );
    let kernel = Kernel {
        model,
        free: free.clone(),
        lik_needs_theta,
    };
    let dims = m + free.len();
    let eval = |p: &[f64]| kernel.log_density(&p[..m], &p[m..]);

    // Locate the posterior mass: a wide scan, then a tighter one.
    let mut bounds = vec![(-40.0, 40.0); dims];
    for _ in 0..3 {
        let axes: Vec<Vec<f64>> = bounds.iter().map(|&(a, b)| linspace(a, b, SCAN_POINTS)).collect();
        let vals = tensor(&axes, eval);
        bounds = active_box(&axes, &vals, 40.0)
            .ok_or_else(|| Error::OutOfRange("posterior kernel is not finite anywhere".into()))?;
    }

    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(a, b)| linspace(a, b, QUADRATURE_POINTS))
        .collect();
    let grid = FineGrid::new(&kernel, &axes, m);
    let f_max = (0..grid.len()).map(|k| grid.value(k)).fold(f64::NEG_INFINITY, f64::max);
    let sums = integrate(&grid, &axes, f_max);
    let romberg = sums.fine + (sums.fine - sums.coarse) / 3.0;
    let disagreement = (romberg.ln() - sums.fine.ln()).abs();
    if !(disagreement <= 1e-4) {
        return Err(Error::GridTooCoarse(disagreement));
    }
    let log_ml = f_max + romberg.ln();
    let marginal = |d: usize| sums.marginals[d].clone();

    let mut latent = Vec::with_capacity(m);
    let mut latent_means = Vec::with_capacity(m);
    for d in 0..m {
        let g = MarginalGrid::new(format!("x[{d}]"), axes[d].clone(), marginal(d))?;
        latent_means.push(g.mean());
        latent.push(g);
    }
    let mut hyper = Vec::new();
    for (k, &i) in free.iter().enumerate() {
        let h = &model.hypers()[i];
        let phi = &axes[m + k];
        let dphi = marginal(m + k);
        let mut pairs: Vec<(f64, f64)> = phi
            .iter()
            .zip(&dphi)
            .map(|(&p, &dp)| (h.prior.from_internal(p), dp / h.prior.log_jacobian(p).exp()))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 <= b.0);
        let (values, densities): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        hyper.push(MarginalGrid::new(h.name.clone(), values, densities)?);
    }
    Ok(QuadratureResult {
        log_ml,
        latent,
        hyper,
        latent_means,
    })
}

/// Log kernel on the fine grid, in row-major order with the hyper axis
/// last. When the likelihood does not depend on the hyperparameter, its
/// values are cached over the latent nodes and the Gaussian prior is split
/// into a normalising term and per-block quadratic forms, so nodes are
/// evaluated on demand instead of stored.
enum FineGrid {
    Stored(Vec<f64>),
    Split {
        lik: Vec<f64>,
        /// `quads[k · blocks + b]`: quadratic form of block `b` at latent
        /// node `k`.
        quads: Vec<f64>,
        blocks: usize,
        /// Normalising term and block precisions at each hyper node.
        per_phi: Vec<(f64, Vec<f64>)>,
    },
}

impl FineGrid {
    fn new(kernel: &Kernel<'_>, axes: &[Vec<f64>], m: usize) -> Self {
        let model = kernel.model;
        if kernel.lik_needs_theta || axes.len() == m {
            return FineGrid::Stored(tensor(axes, |p| kernel.log_density(&p[..m], &p[m..])));
        }
        let latent_axes = &axes[..m];
        let zero = vec![0.0; m];
        let lik = tensor(latent_axes, |x| {
            model
                .log_likelihood_eta(&model.eta(x), &vec![1.0; model.hypers().len()])
                .map_or(f64::NEG_INFINITY, |l| l.value)
        });
        let blocks = model.blocks().len();
        let mut quads = Vec::with_capacity(lik.len() * blocks);
        tensor(latent_axes, |x| {
            for b in model.blocks() {
                quads.push(b.block.structure().quad_form(&x[b.range()]));
            }
            0.0
        });
        let per_phi = axes[m]
            .iter()
            .map(|&p| match kernel.theta(&[p]) {
                Some(theta) => {
                    let base = model.log_prior_latent(&zero, &theta) + kernel.hyper_part(&[p], &theta);
                    let taus = model.blocks().iter().map(|b| model.precision_value(b.precision, &theta)).collect();
                    (base, taus)
                }
                None => (f64::NEG_INFINITY, vec![0.0; blocks]),
            })
            .collect();
        FineGrid::Split {
            lik,
            quads,
            blocks,
            per_phi,
        }
    }

    fn len(&self) -> usize {
        match self {
            FineGrid::Stored(v) => v.len(),
            FineGrid::Split { lik, per_phi, .. } => lik.len() * per_phi.len(),
        }
    }

    fn value(&self, k: usize) -> f64 {
        match self {
            FineGrid::Stored(v) => v[k],
            FineGrid::Split {
                lik,
                quads,
                blocks,
                per_phi,
            } => {
                let (node, j) = (k / per_phi.len(), k % per_phi.len());
                let (base, taus) = &per_phi[j];
                let q: f64 = taus.iter().zip(&quads[node * blocks..]).map(|(t, q)| t * q).sum();
                lik[node] + base - 0.5 * q
            }
        }
    }
}

struct GridSums {
    /// Trapezoid integral of `exp(value − shift)` on every node.
    fine: f64,
    /// The same on every other node along each axis.
    coarse: f64,
    /// Unnormalised marginal density along each axis.
    marginals: Vec<Vec<f64>>,
}

/// One pass over the grid accumulating the fine and coarse trapezoid sums
/// and the marginal along each axis.
fn integrate(grid: &FineGrid, axes: &[Vec<f64>], shift: f64) -> GridSums {
    let dims = axes.len();
    let fine_w: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid(a.len(), a[1] - a[0])).collect();
    let coarse_w: Vec<Vec<f64>> = axes
        .iter()
        .map(|a| trapezoid(a.len().div_ceil(2), 2.0 * (a[1] - a[0])))
        .collect();
    let mut sums = GridSums {
        fine: 0.0,
        coarse: 0.0,
        marginals: axes.iter().map(|a| vec![0.0; a.len()]).collect(),
    };
    let mut idx = vec![0usize; dims];
    for k in 0..grid.len() {
        let p = (grid.value(k) - shift).exp();
        if p > 0.0 {
            let w: f64 = (0..dims).map(|d| fine_w[d][idx[d]]).product();
            sums.fine += w * p;
            if idx.iter().all(|i| i % 2 == 0) {
                let wc: f64 = (0..dims).map(|d| coarse_w[d][idx[d] / 2]).product();
                sums.coarse += wc * p;
            }
            for d in 0..dims {
                sums.marginals[d][idx[d]] += w / fine_w[d][idx[d]] * p;
            }
        }
        for d in (0..dims).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    sums
}

// ---------------------------------------------------------------------------
// Comparisons

/// Density estimate of `samples` as a piecewise-linear grid through the
/// centres of `bins` equal-width bins.
pub fn histogram_grid(name: &str, samples: &[f64], bins: usize) -> Result<MarginalGrid> {
    if samples.is_empty() {
        return Err(Error::EmptyChain);
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1e-9_f64.max(lo.abs() * 1e-9) };
    let mut counts = vec![0.0; bins];
    for &x in samples {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1.0;
    }
    let values = (0..bins).map(|k| lo + (k as f64 + 0.5) * width).collect();
    MarginalGrid::new(name, values, counts)
}

/// `½ ∫ |p − q|` on `points` equally spaced nodes over the union of the two
/// spans, each density taken as zero outside its own span.
pub fn total_variation(a: &MarginalGrid, b: &MarginalGrid, points: usize) -> f64 {
    let lo = a.lo().min(b.lo());
    let hi = a.hi().max(b.hi());
    let xs = linspace(lo, hi, points);
    let (ma, mb) = (a.mass(), b.mass());
    let diff: Vec<f64> = xs
        .iter()
        .map(|&x| (a.density_at(x) / ma - b.density_at(x) / mb).abs())
        .collect();
    let h = xs[1] - xs[0];
    0.5 * h * (diff.iter().sum::<f64>() - 0.5 * (diff[0] + diff[points - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dismap::{generate_synthetic, SyntheticConfig};
    use crate::gmrf::iid;
    use crate::graphs::{row_standardize, Adjacency};
    use crate::lgm::{HyperPrior, ModelBuilder};
    use proptest::prelude::*;

    fn regression(n: usize, seed: u64) -> ManskiSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Adjacency::lattice(n / 10, 10);
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let y = (0..n).map(|i| 1.0 - x[(i, 1)] + 0.5 * normal(&mut rng)).collect();
        ManskiSpec::new(y, x, vec!["intercept".into(), "x".into()], row_standardize(&a).unwrap()).unwrap()
    }

    fn mean_sd(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    }

    #[test]
    fn manski_gibbs_matches_student_posterior() {
        let spec = regression(200, 3);
        let cfg = OracleConfig {
            iterations: 20_000,
            burnin: 500,
            thin: 1,
            seed: 9,
        };
        let opts = ManskiOracleOptions {
            fixed: Some((0.0, 0.0)),
            ..Default::default()
        };
        let t = oracle_manski(&spec, &cfg, &opts).unwrap();
        // With an almost flat Gamma(1, b) prior on τ, β is multivariate t
        // around the least-squares fit.
        let xtx = spec.x.transpose() * &spec.x;
        let y = DVector::from_vec(spec.y.clone());
        let bhat = xtx.clone().cholesky().unwrap().solve(&(spec.x.transpose() * &y));
        let rss = (&y - &spec.x * &bhat).norm_squared() + 2.0 * 5e-5;
        let nu = 200.0 + 2.0 - 2.0;
        let cov = xtx.try_inverse().unwrap() * (rss / (nu - 2.0));
        for (j, name) in ["intercept", "x"].iter().enumerate() {
            let (m, sd) = mean_sd(&t.column(name).unwrap());
            let exact_sd = cov[(j, j)].sqrt();
            let mc = exact_sd / (t.len() as f64).sqrt();
            assert!((m - bhat[j]).abs() < 3.0 * mc * 1.5, "{name}: {m} vs {}", bhat[j]);
            assert!((sd / exact_sd - 1.0).abs() < 0.05, "{name}: sd {sd} vs {exact_sd}");
        }
    }

    #[test]
    fn manski_oracle_is_deterministic() {
        let spec = regression(30, 1);
        let cfg = OracleConfig::new(400, 5);
        let a = oracle_manski(&spec, &cfg, &ManskiOracleOptions::default()).unwrap();
        let b = oracle_manski(&spec, &cfg, &ManskiOracleOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 36);
        assert_eq!(a.names, ["rho", "lambda", "intercept", "x", "precision"]);
        let (lo, hi) = spec.support();
        assert!(a.column("rho").unwrap().iter().all(|r| *r > lo && *r < hi));
        let bad = OracleConfig {
            burnin: 400,
            ..cfg
        };
        assert!(matches!(
            oracle_manski(&spec, &bad, &ManskiOracleOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn impact_draws_follow_multipliers() {
        let spec = regression(30, 2);
        let t = SampleTable {
            names: vec!["rho".into(), "lambda".into(), "intercept".into(), "x".into(), "precision".into()],
            rows: vec![vec![0.5, 0.0, 1.0, -2.0, 1.0]],
        };
        let (d, i, tot) = impact_draws(&t, &spec, "x").unwrap();
        assert!((tot[0] + 4.0).abs() < 1e-12);
        assert!((d[0] + i[0] - tot[0]).abs() < 1e-12);
    }

    fn flat_dismap(seed: u64) -> DismapSpec {
        let a = Adjacency::lattice(4, 5);
        let cfg = SyntheticConfig {
            delta: vec![1.0, 1.0, 1.0],
            alpha: vec![0.2, -0.1, 0.0],
            tau_v: 1e6,
            tau_s: 1e6,
            expected: vec![30.0; 20],
            seed,
        };
        generate_synthetic(&a, &cfg).unwrap().0
    }

    #[test]
    fn dismap_intercepts_match_rate_ratio() {
        let spec = flat_dismap(3);
        let cfg = OracleConfig {
            iterations: 6000,
            burnin: 1000,
            thin: 5,
            seed: 2,
        };
        let opts = DismapOracleOptions {
            fixed_delta: Some(vec![1.0; 3]),
            ..Default::default()
        };
        let t = oracle_dismap(&spec, &cfg, &opts).unwrap();
        let r = spec.rescaled();
        for (d, name) in spec.diseases.iter().enumerate() {
            let rate = (r.observed[d].iter().sum::<f64>() / r.expected[d].iter().sum::<f64>()).ln();
            let m = t.mean(&format!("alpha.{name}")).unwrap();
            assert!((m - rate).abs() < 0.05, "{name}: {m} vs {rate}");
        }
        for row in &t.rows {
            let v: f64 = row[3 + 2 + 3..].iter().sum();
            assert!(v.abs() < 1e-10);
        }
        assert!(t.column("delta.d1").unwrap().iter().all(|d| *d == 1.0));
    }

    #[test]
    fn dismap_oracle_is_deterministic() {
        let spec = flat_dismap(4);
        let cfg = OracleConfig::new(300, 11);
        let opts = DismapOracleOptions::default();
        let a = oracle_dismap(&spec, &cfg, &opts).unwrap();
        assert_eq!(a, oracle_dismap(&spec, &cfg, &opts).unwrap());
        assert!(a.rows.iter().all(|r| r[..3].iter().all(|d| *d > 0.0)));
        let split = Adjacency::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let o = vec![vec![1.0; 4]; 3];
        let s = DismapSpec::new(vec!["a".into(), "b".into(), "c".into()], split, o.clone(), o).unwrap();
        assert!(oracle_dismap(&s, &cfg, &opts).is_err());
    }

    #[test]
    fn sample_table_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = SampleTable {
            names: vec!["a".into(), "b".into()],
            rows: vec![vec![0.1, -2.5], vec![1e-12, 3.0]],
        };
        t.save_csv(&p).unwrap();
        assert_eq!(SampleTable::read_csv(&p).unwrap(), t);
    }

    fn conjugate_toy() -> LatentModel {
        let mut b = ModelBuilder::observed(&[1.0]);
        b.gaussian(Precision::Fixed(1.0));
        let x = b.block(iid(1), Precision::Fixed(1.0));
        b.link(0, x, 1.0);
        b.build().unwrap()
    }

    fn poisson_toy() -> LatentModel {
        let mut b = ModelBuilder::observed(&[3.0]);
        b.poisson(vec![0.0]);
        let x = b.block(iid(1), Precision::Fixed(1.0));
        b.link(0, x, 1.0);
        b.build().unwrap()
    }

    #[test]
    fn conjugate_evidence() {
        let q = quadrature_oracle(&conjugate_toy()).unwrap();
        let exact = -0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25;
        assert!((q.log_ml - exact).abs() < 1e-6, "{}", q.log_ml);
        assert!((q.latent_means[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn poisson_mode_by_quadrature() {
        let q = quadrature_oracle(&poisson_toy()).unwrap();
        let g = &q.latent[0];
        let k = (1..g.len() - 1)
            .max_by(|&a, &b| g.densities()[a].total_cmp(&g.densities()[b]))
            .unwrap();
        let (x, d) = (g.values(), g.densities());
        let h = x[1] - x[0];
        let curv = d[k - 1] - 2.0 * d[k] + d[k + 1];
        let mode = x[k] - 0.5 * h * (d[k + 1] - d[k - 1]) / curv;
        assert!((mode - 0.7922).abs() < 2e-3, "{mode}");
    }

    #[test]
    fn symmetric_model_has_symmetric_marginals() {
        let mut b = ModelBuilder::observed(&[0.0, 0.0]);
        b.gaussian(Precision::Fixed(2.0));
        let tau = b.hyper("tau", HyperPrior::gamma(2.0, 1.0).unwrap());
        let x = b.block(iid(2), Precision::Hyper(tau));
        b.link(0, x, 1.0).link(1, x + 1, 1.0);
        let q = quadrature_oracle(&b.build().unwrap()).unwrap();
        for g in &q.latent {
            let m = g.mean();
            let sd = g.sd();
            let skew: f64 = g
                .values()
                .iter()
                .zip(g.densities())
                .map(|(v, d)| (v - m).powi(3) * d)
                .sum::<f64>()
                * (g.values()[1] - g.values()[0])
                / sd.powi(3);
            assert!(skew.abs() < 1e-6 && m.abs() < 1e-9);
        }
        assert_eq!(q.hyper.len(), 1);
        assert!((q.hyper[0].mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quadrature_rejects_large_models() {
        let mut b = ModelBuilder::observed(&[0.0]);
        b.gaussian(Precision::Fixed(1.0));
        let x = b.block(iid(3), Precision::Fixed(1.0));
        b.link(0, x, 1.0);
        assert!(matches!(
            quadrature_oracle(&b.build().unwrap()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn total_variation_limits() {
        let a = MarginalGrid::gaussian("a", 0.0, 1.0, 101).unwrap();
        assert!(total_variation(&a, &a, 1000) < 1e-12);
        let far = MarginalGrid::gaussian("b", 100.0, 1.0, 101).unwrap();
        assert!((total_variation(&a, &far, 4000) - 1.0).abs() < 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..200_000).map(|_| normal(&mut rng)).collect();
        let h = histogram_grid("h", &draws, 60).unwrap();
        assert!(total_variation(&a, &h, 1000) < 0.03);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn total_variation_is_a_bounded_symmetric_distance(
            m1 in -2.0f64..2.0, s1 in 0.3f64..2.0, m2 in -2.0f64..2.0, s2 in 0.3f64..2.0
        ) {
            let a = MarginalGrid::gaussian("a", m1, s1, 81).unwrap();
            let b = MarginalGrid::gaussian("b", m2, s2, 81).unwrap();
            let ab = total_variation(&a, &b, 800);
            prop_assert!((0.0..=1.0 + 1e-9).contains(&ab));
            prop_assert!((ab - total_variation(&b, &a, 800)).abs() < 1e-12);
        }
    }
}
