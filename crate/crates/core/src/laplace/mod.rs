//! Gaussian approximation of the latent full conditional and numerical
//! integration over the hyperparameters.
//!
//! For fixed hyperparameters `θ` the latent field is approximated by the
//! Gaussian centred at the mode `x*(θ)` of `log π(x | θ) + Σ log π(yᵢ | x, θ)`
//! with precision `Q(θ) + Aᵀ D A`, `D` being minus the likelihood curvature.
//! Linear constraints are imposed by conditioning on `C x = e`. The
//! approximate joint of `θ` and `y` is then
//!
//! ```text
//! log π(θ) + log π(x* | θ) + log π(y | x*, θ) − log π_G(x* | θ, y)
//! ```
//!
//! which is explored on a regular grid in standardised coordinates around
//! its mode. Grid weights give the log marginal likelihood and mix the
//! per-point Gaussian marginals of tracked linear combinations.

pub mod marginal;
pub mod optim;

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::Constraint;
use crate::lgm::LatentModel;
use crate::spmat::{dense_cholesky, CholFactor, Ordering, SymbolicCholesky};

pub use marginal::{linspace, normal_pdf, MarginalGrid};
use optim::NelderMead;

/// Latent dimensions below this are factored densely.
pub const DENSE_BELOW: usize = 64;

/// Diagonal jitter, relative to the block precision, added to intrinsic
/// blocks inside factorisations.
pub const INTRINSIC_JITTER: f64 = 1e-8;

/// A linear combination `Σ cᵢ xᵢ` of latent entries whose marginal is
/// reported. A single latent entry is the combination with one unit
/// coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub coeffs: Vec<(usize, f64)>,
}

impl Target {
    pub fn latent(name: impl Into<String>, index: usize) -> Self {
        Self {
            name: name.into(),
            coeffs: vec![(index, 1.0)],
        }
    }

    pub fn combination(name: impl Into<String>, coeffs: Vec<(usize, f64)>) -> Self {
        Self {
            name: name.into(),
            coeffs,
        }
    }

    fn latent_index(&self) -> Option<usize> {
        match self.coeffs.as_slice() {
            [(i, c)] if *c == 1.0 => Some(*i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Converged when the projected gradient norm is below
    /// `tol · (1 + |objective|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// Settings for [`explore_hypers`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub targets: Vec<Target>,
    /// Grid spacing in standardised coordinates.
    pub grid_step: f64,
    /// Grid points whose log density falls this far below the mode are
    /// dropped.
    pub prune: f64,
    pub max_axis_steps: usize,
    pub workers: usize,
    /// Mode-search start on the internal scale; prior medians when absent.
    pub start: Option<Vec<f64>>,
    /// Initial latent vector for the Newton iterations.
    pub latent_start: Option<Vec<f64>>,
    /// Curvature (row-major, internal scale) of a nearby fit. With `start`
    /// it replaces the simplex search by damped Newton steps.
    pub start_curvature: Option<Vec<f64>>,
    pub mode_tol: f64,
    pub hessian_step: f64,
    pub latent_points: usize,
    pub hyper_points: usize,
    pub newton: NewtonOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            grid_step: 0.75,
            prune: 6.0,
            max_axis_steps: 12,
            workers: 1,
            start: None,
            latent_start: None,
            start_curvature: None,
            mode_tol: 1e-6,
            hessian_step: 0.02,
            latent_points: 75,
            hyper_points: 75,
            newton: NewtonOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn tracking(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            targets: indices
                .into_iter()
                .map(|i| Target::latent(format!("x[{i}]"), i))
                .collect(),
            ..Default::default()
        }
    }

    pub fn with_targets(mut self, targets: Vec<Target>) -> Self {
        self.targets = targets;
        self
    }
}

/// Gaussian approximation of `π(x | θ, y)` at its mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    pub factor: CholFactor,
    pub iterations: usize,
    log_lik: f64,
    /// Columns `H⁻¹ cᵢ` for each constraint row `cᵢ`.
    h_inv_ct: Vec<Vec<f64>>,
    /// Cholesky factor of `C H⁻¹ Cᵀ`.
    s_chol: DMatrix<f64>,
    log_det_s: f64,
    n_constraints: usize,
}

impl GaussianApprox {
    /// Log precision determinant of the (unconstrained) approximation.
    pub fn log_det_precision(&self) -> f64 {
        self.factor.logdet()
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_lik
    }

    /// Log density of the constrained approximation at its own mode, with
    /// respect to Lebesgue measure on the constraint subspace.
    fn log_density_at_mode(&self, log_det_cct: f64) -> f64 {
        let free = (self.mode.len() - self.n_constraints) as f64;
        -0.5 * free * (2.0 * PI).ln()
            + 0.5 * (self.factor.logdet() + self.log_det_s - log_det_cct)
    }

    /// Mean and variance of `Σ cᵢ xᵢ` under the constrained approximation.
    pub fn moments(&self, coeffs: &[(usize, f64)]) -> Result<(f64, f64)> {
        let n = self.mode.len();
        let mut w = vec![0.0; n];
        for &(i, c) in coeffs {
            if i >= n {
                return Err(Error::DimensionMismatch(format!(
                    "target index {i} outside latent dimension {n}"
                )));
            }
            w[i] += c;
        }
        let mean: f64 = coeffs.iter().map(|&(i, c)| c * self.mode[i]).sum();
        let y = self.factor.half_solve(&w)?;
        let mut var: f64 = y.iter().map(|v| v * v).sum();
        if self.n_constraints > 0 {
            let u = DVector::from_iterator(
                self.n_constraints,
                self.h_inv_ct
                    .iter()
                    .map(|col| coeffs.iter().map(|&(i, c)| c * col[i]).sum::<f64>()),
            );
            let z = self.s_chol.solve_lower_triangular(&u).expect("nonsingular");
            var -= z.norm_squared();
        }
        Ok((mean, var.max(0.0)))
    }

    pub fn marginal_variances(&self, indices: &[usize]) -> Result<Vec<f64>> {
        indices
            .iter()
            .map(|&i| self.moments(&[(i, 1.0)]).map(|m| m.1))
            .collect()
    }
}

/// Pattern analysis and assembly maps for one model, shared by every
/// Gaussian approximation of that model.
pub struct Engine<'m> {
    model: &'m LatentModel,
    sym: SymbolicCholesky,
    prior_slots: Vec<(usize, usize, f64)>,
    jitter_slots: Vec<(usize, usize)>,
    lik_slots: Vec<(usize, usize, f64)>,
    constraints: Vec<Constraint>,
    cct_chol: DMatrix<f64>,
    log_det_cct: f64,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m LatentModel) -> Result<Self> {
        let dim = model.dim();
        let mut pattern = Vec::new();
        for b in model.blocks() {
            for (i, j, _) in b.block.structure().iter() {
                pattern.push((b.offset + i, b.offset + j));
            }
        }
        for row in model.rows() {
            for (a, &(i, _)) in row.iter().enumerate() {
                for &(j, _) in &row[a..] {
                    pattern.push((i, j));
                }
            }
        }
        let sym = SymbolicCholesky::analyze(
            dim,
            pattern,
            Ordering::MinimumDegree,
            dim < DENSE_BELOW,
        )?;
        let slot = |i: usize, j: usize| sym.slot(i, j).expect("entry in analysed pattern");

        let mut prior_slots = Vec::new();
        let mut jitter_slots = Vec::new();
        for (bi, b) in model.blocks().iter().enumerate() {
            for (i, j, v) in b.block.structure().iter() {
                prior_slots.push((slot(b.offset + i, b.offset + j), bi, v));
            }
            if b.block.is_intrinsic() {
                for i in b.range() {
                    jitter_slots.push((slot(i, i), bi));
                }
            }
        }
        let mut lik_slots = Vec::new();
        for (obs, row) in model.rows().iter().enumerate() {
            if model.y()[obs].is_none() {
                continue;
            }
            for (a, &(i, wi)) in row.iter().enumerate() {
                for &(j, wj) in &row[a..] {
                    lik_slots.push((slot(i, j), obs, wi * wj));
                }
            }
        }

        let constraints = model.constraints().to_vec();
        let k = constraints.len();
        let (cct_chol, log_det_cct) = if k == 0 {
            (DMatrix::zeros(0, 0), 0.0)
        } else {
            let mut dense_rows = vec![vec![0.0; dim]; k];
            for (r, c) in constraints.iter().enumerate() {
                for &(i, v) in &c.coeffs {
                    dense_rows[r][i] += v;
                }
            }
            let cct = DMatrix::from_fn(k, k, |a, b| {
                dense_rows[a].iter().zip(&dense_rows[b]).map(|(x, y)| x * y).sum()
            });
            let l = dense_cholesky(&cct)
                .map_err(|_| Error::DimensionMismatch("linearly dependent constraints".into()))?;
            let ld = 2.0 * (0..k).map(|i| l[(i, i)].ln()).sum::<f64>();
            (l, ld)
        };

        Ok(Self {
            model,
            sym,
            prior_slots,
            jitter_slots,
            lik_slots,
            constraints,
            cct_chol,
            log_det_cct,
        })
    }

    pub fn model(&self) -> &LatentModel {
        self.model
    }

    fn block_precisions(&self, theta: &[f64]) -> Vec<f64> {
        self.model
            .blocks()
            .iter()
            .map(|b| self.model.precision_value(b.precision, theta))
            .collect()
    }

    /// `(Q(θ) + jitter) x`.
    fn prior_matvec(&self, taus: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (b, &tau) in self.model.blocks().iter().zip(taus) {
            let xb = &x[b.range()];
            let tx = b.block.structure().mul_vec(xb).expect("block dimension");
            let jitter = if b.block.is_intrinsic() {
                INTRINSIC_JITTER * tau
            } else {
                0.0
            };
            for (k, i) in b.range().enumerate() {
                out[i] = tau * tx[k] + jitter * xb[k];
            }
        }
        out
    }

    fn assemble(&self, taus: &[f64], curvature: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; self.sym.value_len()];
        for &(s, b, v) in &self.prior_slots {
            values[s] += taus[b] * v;
        }
        for &(s, b) in &self.jitter_slots {
            values[s] += INTRINSIC_JITTER * taus[b];
        }
        for &(s, obs, w) in &self.lik_slots {
            values[s] -= curvature[obs] * w;
        }
        values
    }

    fn constraint_residual(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.constraints.len(),
            self.constraints.iter().map(|c| {
                c.coeffs.iter().map(|&(i, v)| v * x[i]).sum::<f64>() - c.value
            }),
        )
    }

    /// Removes from `v` its component in the row space of `C` (in place),
    /// with `shift` the right-hand side, so `project(x, residual)` maps `x`
    /// onto `C x = e` and `project(g, C g)` projects a gradient.
    fn project_rows(&self, v: &mut [f64], rhs: &DVector<f64>) {
        if self.constraints.is_empty() {
            return;
        }
        let l = &self.cct_chol;
        let z = l.solve_lower_triangular(rhs).expect("nonsingular");
        let lam = l.transpose().solve_upper_triangular(&z).expect("nonsingular");
        for (c, &m) in self.constraints.iter().zip(lam.iter()) {
            for &(i, a) in &c.coeffs {
                v[i] -= a * m;
            }
        }
    }

    fn objective(&self, taus: &[f64], theta: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>, crate::lgm::LikelihoodEval)> {
        let eta = self.model.eta(x);
        let lik = self.model.log_likelihood_eta(&eta, theta)?;
        let qx = self.prior_matvec(taus, x);
        let obj = lik.value - 0.5 * x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>();
        Ok((obj, eta, lik))
    }

    /// Newton iteration to the constrained mode of the latent full
    /// conditional at hyperparameters `theta` (full hyper vector).
    pub fn gaussian_approx(
        &self,
        theta: &[f64],
        start: Option<&[f64]>,
        opts: &NewtonOptions,
    ) -> Result<GaussianApprox> {
        let dim = self.model.dim();
        let taus = self.block_precisions(theta);
        let mut x = match start {
            Some(s) if s.len() == dim && s.iter().all(|v| v.is_finite()) => s.to_vec(),
            _ => vec![0.0; dim],
        };
        let r = self.constraint_residual(&x);
        self.project_rows(&mut x, &r);

        let (mut obj, mut eta, mut lik) = self.objective(&taus, theta, &x)?;
        let mut iterations = 0;
        loop {
            let values = self.assemble(&taus, &lik.curvature);
            let approx = self.finish(self.sym.factor(&values)?, x, iterations, lik.value)?;

            let qx = self.prior_matvec(&taus, &approx.mode);
            let mut grad: Vec<f64> = self
                .model
                .eta_adjoint(&lik.grad)
                .iter()
                .zip(&qx)
                .map(|(a, b)| a - b)
                .collect();
            let cg = DVector::from_iterator(
                self.constraints.len(),
                self.constraints
                    .iter()
                    .map(|c| c.coeffs.iter().map(|&(i, v)| v * grad[i]).sum::<f64>()),
            );
            self.project_rows(&mut grad, &cg);
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm <= opts.tol * (1.0 + obj.abs()) {
                return Ok(approx);
            }
            if iterations >= opts.max_iter {
                return Err(Error::NewtonDivergence(iterations));
            }

            // Newton point of the quadratic model, then conditioned on C x = e.
            let rhs: Vec<f64> = lik
                .grad
                .iter()
                .zip(&lik.curvature)
                .zip(&eta)
                .map(|((g, c), e)| g - c * e)
                .collect();
            let mut xn = approx.factor.solve(&self.model.eta_adjoint(&rhs))?;
            if !self.constraints.is_empty() {
                let r = self.constraint_residual(&xn);
                let z = approx.s_chol.solve_lower_triangular(&r).expect("nonsingular");
                let m = approx
                    .s_chol
                    .transpose()
                    .solve_upper_triangular(&z)
                    .expect("nonsingular");
                for (col, &mi) in approx.h_inv_ct.iter().zip(m.iter()) {
                    for (v, c) in xn.iter_mut().zip(col) {
                        *v -= c * mi;
                    }
                }
            }
            let x_old = approx.mode;
            let step: Vec<f64> = xn.iter().zip(&x_old).map(|(a, b)| a - b).collect();
            let step_max = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let x_max = x_old.iter().fold(0.0f64, |m, v| m.max(v.abs()));

            let mut t = 1.0;
            loop {
                let xt: Vec<f64> = x_old.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                if let Ok((ot, et, lt)) = self.objective(&taus, theta, &xt) {
                    if ot.is_finite() && ot >= obj - 1e-12 * (1.0 + obj.abs()) {
                        x = xt;
                        obj = ot;
                        eta = et;
                        lik = lt;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-10 {
                    return Err(Error::NewtonDivergence(iterations));
                }
            }
            iterations += 1;
            if step_max * t <= 1e-13 * (1.0 + x_max) {
                // Stationary to working precision.
                let values = self.assemble(&taus, &lik.curvature);
                return self.finish(self.sym.factor(&values)?, x, iterations, lik.value);
            }
        }
    }

    fn finish(&self, factor: CholFactor, x: Vec<f64>, iterations: usize, log_lik: f64) -> Result<GaussianApprox> {
        let dim = x.len();
        let k = self.constraints.len();
        let h_inv_ct: Vec<Vec<f64>> = self
            .constraints
            .iter()
            .map(|c| {
                let mut e = vec![0.0; dim];
                for &(i, v) in &c.coeffs {
                    e[i] += v;
                }
                factor.solve(&e)
            })
            .collect::<Result<_>>()?;
        let s_mat = DMatrix::from_fn(k, k, |a, b| {
            self.constraints[a]
                .coeffs
                .iter()
                .map(|&(i, v)| v * h_inv_ct[b][i])
                .sum()
        });
        let s_chol = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            dense_cholesky(&(0.5 * (&s_mat + s_mat.transpose())))?
        };
        let log_det_s = 2.0 * (0..k).map(|i| s_chol[(i, i)].ln()).sum::<f64>();
        Ok(GaussianApprox {
            mode: x,
            factor,
            iterations,
            log_lik,
            h_inv_ct,
            s_chol,
            log_det_s,
            n_constraints: k,
        })
    }

    /// `log π(θ) + log π(x*|θ) + log π(y|x*,θ) − log π_G(x*|θ,y)`.
    pub fn log_joint(&self, theta: &[f64], approx: &GaussianApprox) -> f64 {
        self.model.log_prior_hypers(theta)
            + self.model.log_prior_latent(&approx.mode, theta)
            + approx.log_lik
            - approx.log_density_at_mode(self.log_det_cct)
    }
}

/// Gaussian approximation at hyperparameters `theta` (full hyper vector,
/// natural scale).
pub fn gaussian_approx(model: &LatentModel, theta: &[f64]) -> Result<GaussianApprox> {
    check_theta(model, theta)?;
    Engine::new(model)?.gaussian_approx(theta, None, &NewtonOptions::default())
}

/// Laplace approximation of `log π(θ, y)` up to the normalising constant of
/// `π(θ | y)`, evaluated at the mode of the latent full conditional.
pub fn log_joint_at_mode(model: &LatentModel, theta: &[f64]) -> Result<f64> {
    check_theta(model, theta)?;
    let engine = Engine::new(model)?;
    let approx = engine.gaussian_approx(theta, None, &NewtonOptions::default())?;
    Ok(engine.log_joint(theta, &approx))
}

fn check_theta(model: &LatentModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.hypers().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} hyper values for {} hypers",
            theta.len(),
            model.hypers().len()
        )));
    }
    for (h, &t) in model.hypers().iter().zip(theta) {
        // A zero precision is passed through so the factorisation reports it.
        let zero_precision = t == 0.0 && h.prior.support() == crate::lgm::Support::Positive;
        if !h.prior.in_support(t) && !zero_precision {
            return Err(Error::OutOfSupport(format!("{} = {t}", h.name)));
        }
    }
    Ok(())
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    /// Free hyperparameters on the internal scale.
    pub internal: Vec<f64>,
    /// Free hyperparameters on the natural scale.
    pub theta: Vec<f64>,
    pub log_density: f64,
    pub weight: f64,
    /// Mean and variance of each tracked target at this point.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Output of [`explore_hypers`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub log_ml: f64,
    pub hyper_names: Vec<String>,
    pub mode_internal: Vec<f64>,
    /// Latent mode at the hyperparameter mode.
    pub mode_latent: Vec<f64>,
    pub points: Vec<GridPoint>,
    pub targets: Vec<Target>,
    pub hyper_marginals: Vec<MarginalGrid>,
    /// Negative Hessian of the log hyper density at the mode on the
    /// internal scale, row-major.
    pub mode_curvature: Vec<f64>,
    pub evaluations: usize,
    latent_points: usize,
}

impl FitResult {
    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.name == name)
    }

    /// Mixture mean and variance of target `k` over the grid.
    pub fn target_moments(&self, k: usize) -> (f64, f64) {
        let mean: f64 = self.points.iter().map(|p| p.weight * p.means[k]).sum();
        let second: f64 = self
            .points
            .iter()
            .map(|p| p.weight * (p.variances[k] + p.means[k] * p.means[k]))
            .sum();
        (mean, (second - mean * mean).max(0.0))
    }

    /// Marginal of target `k`: mixture of the per-point Gaussians evaluated
    /// over mixture mean ± 5 sd.
    pub fn target_marginal(&self, k: usize) -> Result<MarginalGrid> {
        if k >= self.targets.len() {
            return Err(Error::IndexNotTracked(k));
        }
        let (mean, var) = self.target_moments(k);
        let sd = var.sqrt().max(1e-12 * mean.abs().max(1.0));
        let comps: Vec<(f64, f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.weight, p.means[k], p.variances[k].sqrt().max(sd * 1e-9)))
            .collect();
        MarginalGrid::from_fn(
            self.targets[k].name.clone(),
            mean - 5.0 * sd,
            mean + 5.0 * sd,
            self.latent_points,
            |x| comps.iter().map(|&(w, m, s)| w * normal_pdf(x, m, s)).sum(),
        )
    }

    pub fn latent_marginal(&self, index: usize) -> Result<MarginalGrid> {
        let k = self
            .targets
            .iter()
            .position(|t| t.latent_index() == Some(index))
            .ok_or(Error::IndexNotTracked(index))?;
        self.target_marginal(k)
    }

    pub fn latent_marginals(&self) -> Result<Vec<MarginalGrid>> {
        (0..self.targets.len()).map(|k| self.target_marginal(k)).collect()
    }

    pub fn hyper_marginal(&self, name: &str) -> Option<&MarginalGrid> {
        self.hyper_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.hyper_marginals[i])
    }

    /// Drops per-point target moments beyond the first `keep` targets.
    pub fn truncate_targets(&mut self, keep: usize) {
        self.targets.truncate(keep);
        for p in &mut self.points {
            p.means.truncate(keep);
            p.variances.truncate(keep);
        }
    }
}

/// Marginal of latent entry `index` from a fit that tracked it.
pub fn latent_marginal(fit: &FitResult, index: usize) -> Result<MarginalGrid> {
    fit.latent_marginal(index)
}

/// Maps `items` through `f` on up to `workers` threads, preserving order.
pub(crate) fn par_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if workers <= 1 || n < 2 {
        return items.into_iter().map(f).collect();
    }
    let workers = workers.min(n);
    let mut buckets: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, t) in items.into_iter().enumerate() {
        buckets[i % workers].push((i, t));
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|b| s.spawn(move || b.into_iter().map(|(i, t)| (i, f(t))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("filled")).collect()
}

struct Evaluated {
    log_density: f64,
    approx: GaussianApprox,
}

/// Finds the mode of the approximate hyper posterior, integrates it on a
/// regular grid and assembles the marginals.
pub fn explore_hypers(model: &LatentModel, config: &FitConfig) -> Result<FitResult> {
    let free = model.free_hypers();
    let m = free.len();
    if m > 3 {
        return Err(Error::GridOverflow(m));
    }
    for t in &config.targets {
        if let Some(&(i, _)) = t.coeffs.iter().find(|(i, _)| *i >= model.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "target {} refers to latent {i} of {}",
                t.name,
                model.dim()
            )));
        }
    }
    let engine = Engine::new(model)?;
    let priors: Vec<_> = free.iter().map(|&i| model.hypers()[i].prior).collect();
    let hyper_names: Vec<String> = free.iter().map(|&i| model.hypers()[i].name.clone()).collect();
    let to_theta = |phi: &[f64]| -> Result<Vec<f64>> {
        let nat: Vec<f64> = phi.iter().zip(&priors).map(|(&p, pr)| pr.from_internal(p)).collect();
        model.hyper_values(&nat)
    };
    let log_jac = |phi: &[f64]| -> f64 {
        phi.iter().zip(&priors).map(|(&p, pr)| pr.log_jacobian(p)).sum()
    };
    let evaluate = |phi: &[f64], start: Option<&[f64]>| -> Result<Evaluated> {
        let theta = to_theta(phi)?;
        let approx = engine.gaussian_approx(&theta, start, &config.newton)?;
        let ld = engine.log_joint(&theta, &approx) + log_jac(phi);
        if !ld.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Evaluated {
            log_density: ld,
            approx,
        })
    };
    let latent_start = config
        .latent_start
        .as_deref()
        .filter(|s| s.len() == model.dim());
    let mut evaluations = 0usize;

    if m == 0 {
        let ev = evaluate(&[], latent_start)?;
        evaluations += 1;
        let (means, variances) = target_moments(&ev.approx, &config.targets)?;
        return Ok(FitResult {
            log_ml: ev.log_density,
            hyper_names,
            mode_internal: Vec::new(),
            mode_latent: ev.approx.mode,
            points: vec![GridPoint {
                internal: Vec::new(),
                theta: Vec::new(),
                log_density: ev.log_density,
                weight: 1.0,
                means,
                variances,
            }],
            targets: config.targets.clone(),
            hyper_marginals: Vec::new(),
            mode_curvature: Vec::new(),
            evaluations,
            latent_points: config.latent_points,
        });
    }

    // Mode search.
    let start: Vec<f64> = match &config.start {
        Some(s) if s.len() == m && s.iter().all(|v| v.is_finite()) => s.clone(),
        _ => priors.iter().map(|p| p.to_internal(p.median())).collect(),
    };
    let h = config.hessian_step;
    let quasi = match (&config.start, &config.start_curvature) {
        (Some(_), Some(c)) if c.len() == m * m => {
            let c = DMatrix::from_row_slice(m, m, c);
            newton_mode(&evaluate, &start, latent_start, &c, h, &mut evaluations)
        }
        _ => None,
    };
    let (mode, at_mode, axis) = match quasi {
        Some(q) => q,
        None => {
            let warm: RefCell<Option<Vec<f64>>> = RefCell::new(latent_start.map(<[f64]>::to_vec));
            let nm = NelderMead {
                f_tol: config.mode_tol,
                ..Default::default()
            };
            let found = nm.minimize(&start, |phi| {
                let w = warm.borrow().clone();
                match evaluate(phi, w.as_deref()) {
                    Ok(ev) => {
                        *warm.borrow_mut() = Some(ev.approx.mode);
                        -ev.log_density
                    }
                    Err(_) => f64::INFINITY,
                }
            });
            evaluations += found.evals;
            if !found.f.is_finite() {
                return Err(Error::ModeSearchFailure(
                    "no finite log density found from the start point".into(),
                ));
            }
            let warm_x = warm.into_inner();
            let at_mode = evaluate(&found.x, warm_x.as_deref())
                .map_err(|e| Error::ModeSearchFailure(format!("evaluation at mode failed: {e}")))?;
            evaluations += 1;
            (found.x, at_mode, None)
        }
    };
    let f_mode = at_mode.log_density;
    let x_mode = at_mode.approx.mode.clone();

    // Numerical Hessian on the internal scale.
    let f_at = |phi: Vec<f64>| evaluate(&phi, Some(&x_mode)).map(|e| e.log_density);
    let shifted = |d: &[(usize, f64)]| {
        let mut p = mode.clone();
        for &(i, s) in d {
            p[i] += s;
        }
        p
    };
    let mut hess = DMatrix::<f64>::zeros(m, m);
    let hess_err = |e: Error| Error::ModeSearchFailure(format!("Hessian evaluation failed: {e}"));
    for i in 0..m {
        let (fp, fm) = match &axis {
            Some(a) => a[i],
            None => {
                evaluations += 2;
                (
                    f_at(shifted(&[(i, h)])).map_err(hess_err)?,
                    f_at(shifted(&[(i, -h)])).map_err(hess_err)?,
                )
            }
        };
        hess[(i, i)] = (fp - 2.0 * f_mode + fm) / (h * h);
        for j in 0..i {
            let fpp = f_at(shifted(&[(i, h), (j, h)])).map_err(hess_err)?;
            let fpm = f_at(shifted(&[(i, h), (j, -h)])).map_err(hess_err)?;
            let fmp = f_at(shifted(&[(i, -h), (j, h)])).map_err(hess_err)?;
            let fmm = f_at(shifted(&[(i, -h), (j, -h)])).map_err(hess_err)?;
            evaluations += 4;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let neg = -hess;
    let eig = neg.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::ModeSearchFailure(format!(
            "negative Hessian at the mode is not positive definite: {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    // φ = mode + B z with B = V Λ^{-1/2}
    let b = DMatrix::from_fn(m, m, |r, c| {
        eig.eigenvectors[(r, c)] / eig.eigenvalues[c].sqrt()
    });
    let log_det_b = -0.5 * eig.eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
    let cov_diag: Vec<f64> = (0..m)
        .map(|i| (0..m).map(|c| b[(i, c)] * b[(i, c)]).sum())
        .collect();
    let step = config.grid_step;
    let phi_of = |k: &[i32]| -> Vec<f64> {
        (0..m)
            .map(|r| mode[r] + (0..m).map(|c| b[(r, c)] * step * k[c] as f64).sum::<f64>())
            .collect()
    };

    let mut cache: HashMap<Vec<i32>, Option<Evaluated>> = HashMap::new();
    cache.insert(vec![0; m], Some(at_mode));
    let mut bounds = vec![(0i32, 0i32); m];
    for axis in 0..m {
        for dir in [1i32, -1] {
            let mut reach = config.max_axis_steps as i32;
            for s in 1..=config.max_axis_steps as i32 {
                let mut k = vec![0i32; m];
                k[axis] = dir * s;
                let ev = evaluate(&phi_of(&k), Some(&x_mode)).ok();
                evaluations += 1;
                let inside = ev
                    .as_ref()
                    .is_some_and(|e| f_mode - e.log_density <= config.prune);
                cache.insert(k, ev);
                if !inside {
                    reach = s - 1;
                    break;
                }
            }
            if dir > 0 {
                bounds[axis].1 = reach;
            } else {
                bounds[axis].0 = -reach;
            }
        }
    }

    let mut pending = Vec::new();
    let mut k = bounds.iter().map(|b| b.0).collect::<Vec<_>>();
    loop {
        if !cache.contains_key(&k) {
            let z2: f64 = k.iter().map(|&v| (v as f64 * step).powi(2)).sum();
            if 0.5 * z2 <= 2.0 * config.prune {
                pending.push(k.clone());
            }
        }
        let mut d = 0;
        loop {
            if d == m {
                break;
            }
            k[d] += 1;
            if k[d] <= bounds[d].1 {
                break;
            }
            k[d] = bounds[d].0;
            d += 1;
        }
        if d == m {
            break;
        }
    }
    evaluations += pending.len();
    let results = par_map(pending.clone(), config.workers, |k| {
        evaluate(&phi_of(&k), Some(&x_mode)).ok()
    });
    for (k, ev) in pending.into_iter().zip(results) {
        cache.insert(k, ev);
    }

    let f_max = cache
        .values()
        .flatten()
        .map(|e| e.log_density)
        .fold(f_mode, f64::max);
    let mut kept: Vec<(Vec<i32>, Evaluated)> = cache
        .into_iter()
        .filter_map(|(k, e)| e.map(|e| (k, e)))
        .filter(|(_, e)| f_max - e.log_density <= config.prune)
        .collect();
    kept.sort_by(|a, b| a.0.cmp(&b.0));

    let sum: f64 = kept.iter().map(|(_, e)| (e.log_density - f_max).exp()).sum();
    let log_ml = f_max + sum.ln() + m as f64 * step.ln() + log_det_b;

    let moments = par_map(
        kept.iter().map(|(_, e)| &e.approx).collect(),
        config.workers,
        |a| target_moments(a, &config.targets),
    );
    let mut points = Vec::with_capacity(kept.len());
    for ((k, e), mom) in kept.iter().zip(moments) {
        let (means, variances) = mom?;
        let internal = phi_of(k);
        let theta = internal.iter().zip(&priors).map(|(&p, pr)| pr.from_internal(p)).collect();
        points.push(GridPoint {
            internal,
            theta,
            log_density: e.log_density,
            weight: (e.log_density - f_max).exp() / sum,
            means,
            variances,
        });
    }

    let hyper_marginals = (0..m)
        .map(|i| {
            hyper_marginal(
                &hyper_names[i],
                &priors[i],
                &points,
                i,
                step * cov_diag[i].sqrt(),
                config.hyper_points,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FitResult {
        log_ml,
        hyper_names,
        mode_internal: mode,
        mode_latent: x_mode,
        points,
        targets: config.targets.clone(),
        hyper_marginals,
        mode_curvature: neg.as_slice().to_vec(),
        evaluations,
        latent_points: config.latent_points,
    })
}

/// Damped Newton ascent from `start` using a fixed curvature `c` and
/// central-difference gradients with step `h`. Returns the mode, its
/// evaluation and the axis values `f(mode ± h eᵢ)`, or `None` when a step
/// fails to improve.
fn newton_mode(
    evaluate: &dyn Fn(&[f64], Option<&[f64]>) -> Result<Evaluated>,
    start: &[f64],
    latent_start: Option<&[f64]>,
    c: &DMatrix<f64>,
    h: f64,
    evaluations: &mut usize,
) -> Option<(Vec<f64>, Evaluated, Option<Vec<(f64, f64)>>)> {
    let m = start.len();
    let chol = c.clone().cholesky()?;
    let mut phi = start.to_vec();
    *evaluations += 1;
    let mut ev = evaluate(&phi, latent_start).ok()?;
    for _ in 0..10 {
        let x0 = ev.approx.mode.clone();
        let mut axis = Vec::with_capacity(m);
        let mut grad = DVector::zeros(m);
        for i in 0..m {
            let mut p = phi.clone();
            p[i] += h;
            let fp = evaluate(&p, Some(&x0)).ok()?.log_density;
            p[i] -= 2.0 * h;
            let fm = evaluate(&p, Some(&x0)).ok()?.log_density;
            *evaluations += 2;
            grad[i] = (fp - fm) / (2.0 * h);
            axis.push((fp, fm));
        }
        let dir = chol.solve(&grad);
        // Squared distance to the predicted mode in standardised units.
        if grad.dot(&dir) < 1e-4 {
            return Some((phi, ev, Some(axis)));
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = phi.iter().zip(dir.iter()).map(|(p, d)| p + t * d).collect();
            *evaluations += 1;
            if let Ok(e) = evaluate(&cand, Some(&x0)) {
                if e.log_density > ev.log_density {
                    phi = cand;
                    ev = e;
                    break;
                }
            }
            t *= 0.5;
            if t < 0.1 {
                return None;
            }
        }
    }
    None
}

fn target_moments(a: &GaussianApprox, targets: &[Target]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut means = Vec::with_capacity(targets.len());
    let mut vars = Vec::with_capacity(targets.len());
    for t in targets {
        let (m, v) = a.moments(&t.coeffs)?;
        means.push(m);
        vars.push(v);
    }
    Ok((means, vars))
}

/// Marginal of one hyperparameter from the weighted grid. Each point
/// contributes a Gaussian kernel as wide as the grid spacing along that
/// coordinate; kernel centres are shrunk towards the weighted mean so the
/// mixture keeps the grid's variance. The density is built on the internal
/// scale and mapped to the natural scale with its Jacobian.
fn hyper_marginal(
    name: &str,
    prior: &crate::lgm::HyperPrior,
    points: &[GridPoint],
    i: usize,
    spacing: f64,
    n: usize,
) -> Result<MarginalGrid> {
    let mean: f64 = points.iter().map(|p| p.weight * p.internal[i]).sum();
    let var: f64 = points
        .iter()
        .map(|p| p.weight * (p.internal[i] - mean).powi(2))
        .sum();
    let (bw2, shrink) = if var > 0.0 {
        let bw2 = (spacing * spacing).min(0.75 * var);
        (bw2, (1.0 - bw2 / var).sqrt())
    } else {
        (spacing * spacing, 0.0)
    };
    let total_sd = (var.max(0.0) + if var > 0.0 { 0.0 } else { bw2 }).sqrt();
    let bw = bw2.sqrt();
    let comps: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.weight, mean + shrink * (p.internal[i] - mean)))
        .collect();
    let internal = linspace(mean - 5.0 * total_sd, mean + 5.0 * total_sd, n);
    let mut values = Vec::with_capacity(n);
    let mut dens = Vec::with_capacity(n);
    for &t in &internal {
        let d: f64 = comps.iter().map(|&(w, c)| w * normal_pdf(t, c, bw)).sum();
        let v = prior.from_internal(t);
        if values.last().is_some_and(|&last: &f64| !(v > last)) {
            continue;
        }
        values.push(v);
        dens.push(d * (-prior.log_jacobian(t)).exp());
    }
    MarginalGrid::new(name, values, dens)
}

#[cfg(test)]
mod tests;
