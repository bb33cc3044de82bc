//! Nelder-Mead minimisation for the low-dimensional hyperparameter mode
//! search.

#[derive(Debug, Clone)]
pub struct NelderMead {
    pub initial_step: f64,
    /// Stop once the spread of function values in the simplex falls below
    /// this and the simplex diameter below `x_tol`.
    pub f_tol: f64,
    pub x_tol: f64,
    pub max_evals: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            initial_step: 0.5,
            f_tol: 1e-6,
            x_tol: 1e-3,
            max_evals: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    /// Minimises `f` from `start`. Non-finite values are treated as +∞.
    pub fn minimize(&self, start: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Minimum {
        let n = start.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };
        if n == 0 {
            let v = eval(start, &mut evals);
            return Minimum {
                x: Vec::new(),
                f: v,
                evals,
                converged: true,
            };
        }

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let f0 = eval(start, &mut evals);
        simplex.push((start.to_vec(), f0));
        for i in 0..n {
            let mut x = start.to_vec();
            x[i] += self.initial_step;
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut converged = false;
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if (worst - best).abs() <= self.f_tol && diameter <= self.x_tol {
                converged = true;
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };

            let xr = along(-alpha);
            let fr = eval(&xr, &mut evals);
            if fr < best {
                let xe = along(-gamma);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < worst {
                let xc = along(-rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < fr.min(worst) {
                simplex[n] = (xc, fc);
                continue;
            }
            let x0 = simplex[0].0.clone();
            for item in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = x0
                    .iter()
                    .zip(&item.0)
                    .map(|(b, v)| b + sigma * (v - b))
                    .collect();
                let v = eval(&x, &mut evals);
                *item = (x, v);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Minimum {
            x,
            f,
            evals,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let m = NelderMead::default().minimize(&[3.0, -2.0], |x| {
            (x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2) + 0.5 * x[0] * x[1]
        });
        assert!(m.converged);
        let g0 = 2.0 * (m.x[0] - 1.0) + 0.5 * m.x[1];
        let g1 = 4.0 * (m.x[1] + 0.5) + 0.5 * m.x[0];
        assert!(g0.abs() < 1e-2 && g1.abs() < 1e-2);
    }

    #[test]
    fn rosenbrock() {
        let m = NelderMead {
            x_tol: 1e-6,
            f_tol: 1e-12,
            ..Default::default()
        }
        .minimize(&[-1.2, 1.0], |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn infinite_region_avoided() {
        let m = NelderMead::default().minimize(&[0.5], |x| {
            if x[0] > 1.0 {
                f64::NAN
            } else {
                (x[0] - 0.9).powi(2)
            }
        });
        assert!((m.x[0] - 0.9).abs() < 2e-3);
    }
}
