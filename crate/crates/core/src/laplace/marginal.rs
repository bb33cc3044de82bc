use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fewest points a grid may carry.
pub const MIN_POINTS: usize = 33;

/// Univariate density tabulated on strictly increasing values and treated as
/// piecewise linear between them. Constructors normalise to unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalGrid {
    pub name: String,
    values: Vec<f64>,
    densities: Vec<f64>,
}

impl MarginalGrid {
    /// Validates and normalises.
    pub fn new(name: impl Into<String>, values: Vec<f64>, densities: Vec<f64>) -> Result<Self> {
        let mut g = Self::unnormalized(name, values, densities)?;
        let mass = g.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidGrid(format!("mass {mass} cannot be normalised")));
        }
        g.densities.iter_mut().for_each(|d| *d /= mass);
        Ok(g)
    }

    /// Validates without normalising.
    pub fn unnormalized(
        name: impl Into<String>,
        values: Vec<f64>,
        densities: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != densities.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values and {} densities",
                values.len(),
                densities.len()
            )));
        }
        if values.len() < MIN_POINTS {
            return Err(Error::InvalidGrid(format!(
                "{} points, at least {MIN_POINTS} required",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("values must be finite and strictly increasing".into()));
        }
        if densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidGrid("densities must be finite and non-negative".into()));
        }
        Ok(Self {
            name: name.into(),
            values,
            densities,
        })
    }

    /// Tabulates `f` on `n` equally spaced points over `[lo, hi]`.
    pub fn from_fn(
        name: impl Into<String>,
        lo: f64,
        hi: f64,
        n: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let values = linspace(lo, hi, n);
        let densities = values.iter().map(|&v| f(v)).collect();
        Self::new(name, values, densities)
    }

    /// Gaussian density tabulated over mean ± 5 sd.
    pub fn gaussian(name: impl Into<String>, mean: f64, sd: f64, n: usize) -> Result<Self> {
        Self::from_fn(name, mean - 5.0 * sd, mean + 5.0 * sd, n, |x| {
            normal_pdf(x, mean, sd)
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.values[0]
    }

    pub fn hi(&self) -> f64 {
        *self.values.last().unwrap()
    }

    fn segments(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.values
            .windows(2)
            .zip(self.densities.windows(2))
            .map(|(v, d)| (v[0], v[1], d[0], d[1]))
    }

    /// Trapezoid mass.
    pub fn mass(&self) -> f64 {
        self.segments().map(|(a, b, pa, pb)| 0.5 * (b - a) * (pa + pb)).sum()
    }

    /// Mean of the piecewise-linear density.
    pub fn mean(&self) -> f64 {
        let m1: f64 = self
            .segments()
            .map(|(a, b, pa, pb)| (b - a) / 6.0 * (pa * (2.0 * a + b) + pb * (a + 2.0 * b)))
            .sum();
        m1 / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let m2: f64 = self
            .segments()
            .map(|(a, b, pa, pb)| {
                (b - a) / 12.0
                    * (pa * (3.0 * a * a + 2.0 * a * b + b * b)
                        + pb * (a * a + 2.0 * a * b + 3.0 * b * b))
            })
            .sum();
        let mean = self.mean();
        (m2 / self.mass() - mean * mean).max(0.0)
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Linearly interpolated density; zero outside the tabulated span.
    pub fn density_at(&self, x: f64) -> f64 {
        if x < self.lo() || x > self.hi() {
            return 0.0;
        }
        let k = self.values.partition_point(|&v| v <= x);
        if k == 0 {
            return self.densities[0];
        }
        if k >= self.values.len() {
            return *self.densities.last().unwrap();
        }
        let (a, b) = (self.values[k - 1], self.values[k]);
        let t = (x - a) / (b - a);
        self.densities[k - 1] * (1.0 - t) + self.densities[k] * t
    }

    /// Cumulative mass at `x`, relative to the total mass.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo() {
            return 0.0;
        }
        if x >= self.hi() {
            return 1.0;
        }
        let total = self.mass();
        let mut acc = 0.0;
        for (a, b, pa, pb) in self.segments() {
            if x >= b {
                acc += 0.5 * (b - a) * (pa + pb);
            } else {
                let px = pa + (pb - pa) * (x - a) / (b - a);
                acc += 0.5 * (x - a) * (pa + px);
                break;
            }
        }
        acc / total
    }

    /// Inverse of [`Self::cdf`], exact for the piecewise-linear density.
    pub fn quantile(&self, p: f64) -> f64 {
        let total = self.mass();
        let target = p.clamp(0.0, 1.0) * total;
        let mut acc = 0.0;
        for (a, b, pa, pb) in self.segments() {
            let seg = 0.5 * (b - a) * (pa + pb);
            if acc + seg >= target && seg > 0.0 {
                let r = target - acc;
                let h = b - a;
                let slope = (pb - pa) / h;
                // solve pa t + slope t²/2 = r for t in [0, h]
                let t = if slope.abs() < 1e-300 {
                    r / pa
                } else {
                    let disc = (pa * pa + 2.0 * slope * r).max(0.0);
                    2.0 * r / (pa + disc.sqrt())
                };
                return a + t.clamp(0.0, h);
            }
            acc += seg;
        }
        self.hi()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + h * i as f64 }).collect()
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        let g = MarginalGrid::gaussian("x", 1.5, 2.0, 201).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!((g.mean() - 1.5).abs() < 1e-9);
        assert!((g.sd() - 2.0).abs() < 2e-3);
        assert!((g.quantile(0.5) - 1.5).abs() < 1e-9);
        assert!((g.cdf(g.quantile(0.9)) - 0.9).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let v = linspace(0.0, 1.0, 40);
        assert!(MarginalGrid::new("x", v.clone(), vec![0.0; 40]).is_err());
        assert!(MarginalGrid::new("x", v[..10].to_vec(), vec![1.0; 10]).is_err());
        let mut d = vec![1.0; 40];
        d[3] = -1.0;
        assert!(MarginalGrid::new("x", v.clone(), d).is_err());
        let mut w = v.clone();
        w.swap(3, 4);
        assert!(MarginalGrid::new("x", w, vec![1.0; 40]).is_err());
    }

    #[test]
    fn uniform_quantiles() {
        let g = MarginalGrid::from_fn("u", 0.0, 1.0, 50, |_| 1.0).unwrap();
        assert!((g.quantile(0.025) - 0.025).abs() < 1e-12);
        assert!((g.sd() - 1.0 / 12f64.sqrt()).abs() < 1e-12);
    }
}
