use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::gmrf::{besag, iid};
use crate::graphs::Adjacency;
use crate::lgm::{HyperPrior, ModelBuilder, Precision};

fn gaussian_log_density(y: &[f64], cov: &DMatrix<f64>) -> f64 {
    let n = y.len();
    let chol = cov.clone().cholesky().unwrap();
    let yv = DVector::from_column_slice(y);
    let z = chol.l().solve_lower_triangular(&yv).unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * z.norm_squared()
}

/// `y ~ N(x, 1/τ_y)`, `x ~ N(0, I/τ_x)` with both precisions fixed.
fn iid_model(y: &[f64], tau_x: f64, tau_y: f64) -> LatentModel {
    let mut b = ModelBuilder::observed(y);
    b.gaussian(Precision::Fixed(tau_y));
    let off = b.block(iid(y.len()), Precision::Fixed(tau_x));
    for i in 0..y.len() {
        b.link(i, off + i, 1.0);
    }
    b.build().unwrap()
}

fn lattice_model(y: &[f64], rows: usize, cols: usize, tau_x: f64, tau_y: f64) -> LatentModel {
    let a = Adjacency::lattice(rows, cols);
    let mut b = ModelBuilder::observed(y);
    b.gaussian(Precision::Fixed(tau_y));
    let off = b.block(besag(&a).unwrap(), Precision::Fixed(tau_x));
    for i in 0..y.len() {
        b.link(i, off + i, 1.0);
    }
    b.build().unwrap()
}

/// Exact log marginal likelihood of the lattice model: the ICAR field lives
/// on the orthogonal complement of the constant vector.
fn lattice_exact(y: &[f64], rows: usize, cols: usize, tau_x: f64, tau_y: f64) -> f64 {
    let n = rows * cols;
    let a = Adjacency::lattice(rows, cols);
    let t = crate::gmrf::icar_structure(&a).to_dense();
    let eig = t.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let v = DMatrix::from_fn(n, n - 1, |r, c| eig.eigenvectors[(r, order[c + 1])]);
    let prec = (v.transpose() * &t * &v) * tau_x;
    let cov_z = prec.try_inverse().unwrap();
    let cov = &v * cov_z * v.transpose() + DMatrix::identity(n, n) / tau_y;
    gaussian_log_density(y, &cov)
}

#[test]
fn gaussian_case_is_exact_in_one_step() {
    let y = [0.3, -1.2, 2.0, 0.7];
    let (tx, ty) = (2.0, 3.0);
    let model = iid_model(&y, tx, ty);
    let a = gaussian_approx(&model, &[]).unwrap();
    assert_eq!(a.iterations, 1);
    for (i, &yi) in y.iter().enumerate() {
        assert!((a.mode[i] - ty * yi / (tx + ty)).abs() < 1e-12);
        let (_, v) = a.moments(&[(i, 1.0)]).unwrap();
        assert!((v - 1.0 / (tx + ty)).abs() < 1e-12);
    }
    let exact = gaussian_log_density(&y, &(DMatrix::identity(4, 4) * (1.0 / tx + 1.0 / ty)));
    assert!((log_joint_at_mode(&model, &[]).unwrap() - exact).abs() < 1e-10);
}

#[test]
fn constrained_gaussian_matches_exact_marginal_likelihood() {
    let y = [0.5, -0.2, 1.1, -0.9, 0.3, 0.0, -0.4, 0.8, 0.1, -1.0, 0.6, 0.2];
    let (tx, ty) = (1.7, 4.0);
    let model = lattice_model(&y, 3, 4, tx, ty);
    let a = gaussian_approx(&model, &[]).unwrap();
    assert!(a.mode.iter().sum::<f64>().abs() < 1e-10);
    let got = log_joint_at_mode(&model, &[]).unwrap();
    let exact = lattice_exact(&y, 3, 4, tx, ty);
    assert!((got - exact).abs() < 1e-6, "{got} vs {exact}");
}

#[test]
fn linear_combination_variance_matches_dense() {
    let y = [0.5, -0.2, 1.1, -0.9, 0.3, 0.0];
    let (tx, ty) = (1.0, 2.0);
    let model = lattice_model(&y, 2, 3, tx, ty);
    let a = gaussian_approx(&model, &[]).unwrap();
    let n = 6;
    let t = crate::gmrf::icar_structure(&Adjacency::lattice(2, 3)).to_dense();
    let h = t * tx + DMatrix::identity(n, n) * (ty + INTRINSIC_JITTER * tx);
    let hinv = h.try_inverse().unwrap();
    let c = DVector::from_element(n, 1.0);
    let hc = &hinv * &c;
    let cond = &hinv - &hc * hc.transpose() / (c.dot(&hc));
    let w = DVector::from_vec(vec![1.0, -2.0, 0.0, 0.5, 0.0, 3.0]);
    let exact = (w.transpose() * &cond * &w)[(0, 0)];
    let coeffs = vec![(0, 1.0), (1, -2.0), (3, 0.5), (5, 3.0)];
    let (_, v) = a.moments(&coeffs).unwrap();
    assert!((v - exact).abs() < 1e-10 * exact.max(1.0));
}

#[test]
fn poisson_mode_solves_score_equation() {
    let y = [3.0, 0.0, 7.0, 1.0];
    let mut b = ModelBuilder::observed(&y);
    b.poisson(vec![0.0, 0.5, 1.0, -0.3]);
    let off = b.block(iid(4), Precision::Fixed(0.8));
    for i in 0..4 {
        b.link(i, off + i, 1.0);
    }
    let model = b.build().unwrap();
    let a = gaussian_approx(&model, &[]).unwrap();
    let offs = [0.0, 0.5, 1.0, -0.3];
    for i in 0..4 {
        let score = y[i] - (offs[i] + a.mode[i]).exp() - 0.8 * a.mode[i];
        assert!(score.abs() < 1e-7);
    }
}

fn poisson_scalar() -> LatentModel {
    let mut b = ModelBuilder::observed(&[3.0]);
    b.poisson(vec![0.0]);
    let off = b.block(iid(1), Precision::Fixed(1.0));
    b.link(0, off, 1.0);
    b.build().unwrap()
}

#[test]
fn poisson_scalar_mode() {
    let a = gaussian_approx(&poisson_scalar(), &[]).unwrap();
    // Bisection on 3 - e^x - x = 0.
    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 3.0 - mid.exp() - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Gradient tolerance 1e-8·(1+|objective|) over curvature e^x + 1.
    assert!((a.mode[0] - lo).abs() < 1e-8, "{} vs {lo}", a.mode[0]);
    assert!((a.mode[0] - 0.7922).abs() < 2e-4);
}

#[test]
fn poisson_scalar_log_joint_matches_quadrature() {
    let got = log_joint_at_mode(&poisson_scalar(), &[]).unwrap();
    let ln6 = 6f64.ln();
    let f = |x: f64| 3.0 * x - x.exp() - ln6 - 0.5 * x * x - 0.5 * (2.0 * PI).ln();
    let n = 40001;
    let h = 20.0 / (n - 1) as f64;
    let acc: f64 = (0..n).map(|k| f(-10.0 + h * k as f64).exp() * h).sum();
    assert!((got - acc.ln()).abs() < 0.02, "{got} vs {}", acc.ln());
}

#[test]
fn conjugate_toy_log_joint() {
    let model = iid_model(&[1.0], 1.0, 1.0);
    let got = log_joint_at_mode(&model, &[]).unwrap();
    let exact = -0.5 * (2.0 * PI * 2.0).ln() - 0.25;
    assert!((got - exact).abs() < 1e-12);
    assert!((got + 1.5155).abs() < 1e-4);
    let fit = explore_hypers(&model, &FitConfig::tracking([0])).unwrap();
    assert_eq!(fit.points.len(), 1);
    assert_eq!(fit.points[0].weight, 1.0);
    assert_eq!(fit.log_ml, got);
    let (mean, var) = fit.target_moments(0);
    assert!((mean - 0.5).abs() < 1e-12 && (var - 0.5).abs() < 1e-12);
    let m = fit.latent_marginal(0).unwrap();
    assert!((m.mean() - 0.5).abs() < 1e-9);
    // Piecewise-linear tabulation on 75 points inflates the variance slightly.
    assert!((m.variance() - 0.5).abs() < 2e-3);
}

#[test]
fn zero_precision_is_not_positive_definite() {
    let mut b = ModelBuilder::observed(&[1.0, 2.0]);
    let tau = b.hyper("tau", HyperPrior::default_precision());
    b.gaussian(Precision::Fixed(1.0));
    let off = b.block(iid(3), Precision::Hyper(tau));
    b.link(0, off, 1.0).link(1, off + 1, 1.0);
    let model = b.build().unwrap();
    assert!(matches!(
        gaussian_approx(&model, &[0.0]),
        Err(Error::NotPositiveDefinite { .. })
    ));
}

#[test]
fn hyper_integration_matches_quadrature() {
    // y ~ N(x, 1), x ~ N(0, 1/τ) with τ ~ Gamma(2, 1) integrated out.
    let y = [0.9, -1.4, 2.2, 0.3, -0.5, 1.7, -2.1, 0.4];
    let prior = HyperPrior::gamma(2.0, 1.0).unwrap();
    let mut b = ModelBuilder::observed(&y);
    let tau = b.hyper("tau", prior);
    b.gaussian(Precision::Fixed(1.0));
    let off = b.block(iid(y.len()), Precision::Hyper(tau));
    for i in 0..y.len() {
        b.link(i, off + i, 1.0);
    }
    let model = b.build().unwrap();
    let fit = explore_hypers(&model, &FitConfig::tracking([0, 2])).unwrap();

    let log_lik = |t: f64| -> f64 {
        let v = 1.0 + 1.0 / t;
        y.iter()
            .map(|yi| -0.5 * (2.0 * PI * v).ln() - 0.5 * yi * yi / v)
            .sum()
    };
    let (lo, hi, n) = (-8.0f64, 8.0f64, 20001);
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let phi = lo + h * k as f64;
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        acc += w * h * (prior.log_density(phi.exp()) + phi + log_lik(phi.exp())).exp();
    }
    assert!((fit.log_ml - acc.ln()).abs() < 0.01, "{} vs {}", fit.log_ml, acc.ln());

    let weights: f64 = fit.points.iter().map(|p| p.weight).sum();
    assert!((weights - 1.0).abs() < 1e-12);
    let m = fit.latent_marginal(2).unwrap();
    assert!((m.mass() - 1.0).abs() < 1e-9);
    assert!(m.mean() > 0.0 && m.mean() < 2.2);
    assert!(matches!(fit.latent_marginal(1), Err(Error::IndexNotTracked(1))));
    let hm = fit.hyper_marginal("tau").unwrap();
    assert!(hm.lo() > 0.0);
}

#[test]
fn too_many_free_hypers() {
    let y = [1.0, 2.0];
    let mut b = ModelBuilder::observed(&y);
    let hs: Vec<_> = (0..4)
        .map(|i| b.hyper(format!("h{i}"), HyperPrior::default_precision()))
        .collect();
    b.gaussian(Precision::Hyper(hs[0]));
    for h in &hs[1..] {
        let off = b.block(iid(2), Precision::Hyper(*h));
        b.link(0, off, 1.0).link(1, off + 1, 1.0);
    }
    let model = b.build().unwrap();
    assert!(matches!(
        explore_hypers(&model, &FitConfig::default()),
        Err(Error::GridOverflow(4))
    ));
}

#[test]
fn parallel_grid_is_deterministic() {
    let y = [0.9, -1.4, 2.2, 0.3, -0.5, 1.7];
    let mut b = ModelBuilder::observed(&y);
    let ty = b.hyper("tau_y", HyperPrior::gamma(2.0, 1.0).unwrap());
    let tx = b.hyper("tau_x", HyperPrior::gamma(2.0, 1.0).unwrap());
    b.gaussian(Precision::Hyper(ty));
    let off = b.block(iid(y.len()), Precision::Hyper(tx));
    for i in 0..y.len() {
        b.link(i, off + i, 1.0);
    }
    let model = b.build().unwrap();
    let serial = explore_hypers(&model, &FitConfig::tracking([0])).unwrap();
    let parallel = explore_hypers(
        &model,
        &FitConfig {
            workers: 3,
            ..FitConfig::tracking([0])
        },
    )
    .unwrap();
    assert_eq!(serial.log_ml.to_bits(), parallel.log_ml.to_bits());
    assert_eq!(serial.points.len(), parallel.points.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn laplace_exact_for_gaussian_icar(
        y in prop::collection::vec(-3.0f64..3.0, 9),
        tx in 0.2f64..5.0,
        ty in 0.2f64..5.0,
    ) {
        let model = lattice_model(&y, 3, 3, tx, ty);
        let got = log_joint_at_mode(&model, &[]).unwrap();
        let exact = lattice_exact(&y, 3, 3, tx, ty);
        prop_assert!((got - exact).abs() < 1e-6);
    }

    #[test]
    fn warm_start_reaches_same_mode(
        y in prop::collection::vec(0u32..12, 6),
        tau in 0.3f64..4.0,
        start in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let a = Adjacency::lattice(2, 3);
        let mut b = ModelBuilder::observed(&yf);
        b.poisson(vec![0.0; 6]);
        let off = b.block(besag(&a).unwrap(), Precision::Fixed(tau));
        for i in 0..6 {
            b.link(i, off + i, 1.0);
        }
        let model = b.build().unwrap();
        let engine = Engine::new(&model).unwrap();
        let opts = NewtonOptions::default();
        let cold = engine.gaussian_approx(&[], None, &opts).unwrap();
        let warm = engine.gaussian_approx(&[], Some(&start), &opts).unwrap();
        for (c, w) in cold.mode.iter().zip(&warm.mode) {
            prop_assert!((c - w).abs() < 1e-6);
        }
        prop_assert!((engine.log_joint(&[], &cold) - engine.log_joint(&[], &warm)).abs() < 1e-6);
    }
}
