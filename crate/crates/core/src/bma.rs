//! Averaging conditional marginals across chain draws and summarising the
//! resulting grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{linspace, MarginalGrid};

/// Points in a mixed grid.
pub const MIX_POINTS: usize = 150;

/// Weighted average of densities on the union of their spans. Each input is
/// interpolated linearly and taken as zero outside its own span. Equal
/// weights are used when `weights` is `None`.
pub fn mix_marginals(grids: &[MarginalGrid], weights: Option<&[f64]>) -> Result<MarginalGrid> {
    mix_marginals_with(grids, weights, MIX_POINTS)
}

pub fn mix_marginals_with(
    grids: &[MarginalGrid],
    weights: Option<&[f64]>,
    points: usize,
) -> Result<MarginalGrid> {
    let first = grids.first().ok_or(Error::EmptyList)?;
    let equal = vec![1.0 / grids.len() as f64; grids.len()];
    let w = weights.unwrap_or(&equal);
    if w.len() != grids.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} grids",
            w.len(),
            grids.len()
        )));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
        return Err(Error::InvalidGrid("weights must be non-negative with positive sum".into()));
    }
    let lo = grids.iter().map(MarginalGrid::lo).fold(f64::INFINITY, f64::min);
    let hi = grids.iter().map(MarginalGrid::hi).fold(f64::NEG_INFINITY, f64::max);
    let values = linspace(lo, hi, points);
    let densities = values
        .iter()
        .map(|&x| {
            grids
                .iter()
                .zip(w)
                .map(|(g, &wi)| wi * g.density_at(x) / g.mass())
                .sum()
        })
        .collect();
    MarginalGrid::new(first.name.clone(), values, densities)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// Mean, sd and the 2.5%, 50% and 97.5% quantiles of a normalised grid.
pub fn summarize(grid: &MarginalGrid) -> Result<Summary> {
    let mass = grid.mass();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::Unnormalized(mass));
    }
    Ok(Summary {
        name: grid.name.clone(),
        mean: grid.mean(),
        sd: grid.sd(),
        q025: grid.quantile(0.025),
        q50: grid.quantile(0.5),
        q975: grid.quantile(0.975),
    })
}

/// Density of `a·X + b`.
pub fn transform_grid(grid: &MarginalGrid, a: f64, b: f64) -> Result<MarginalGrid> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::ZeroScale);
    }
    let mut pairs: Vec<(f64, f64)> = grid
        .values()
        .iter()
        .zip(grid.densities())
        .map(|(&v, &d)| (a * v + b, d / a.abs()))
        .collect();
    if a < 0.0 {
        pairs.reverse();
    }
    let (values, densities) = pairs.into_iter().unzip();
    MarginalGrid::new(grid.name.clone(), values, densities)
}

/// Density of `1/X` for a grid supported on positive values.
pub fn reciprocal_grid(grid: &MarginalGrid) -> Result<MarginalGrid> {
    if grid.lo() <= 0.0 {
        return Err(Error::InvalidGrid(
            "reciprocal needs a strictly positive support".into(),
        ));
    }
    let (values, densities) = grid
        .values()
        .iter()
        .zip(grid.densities())
        .rev()
        .map(|(&x, &d)| (1.0 / x, d * x * x))
        .unzip();
    MarginalGrid::new(grid.name.clone(), values, densities)
}

pub fn write_grid_json(grid: &MarginalGrid, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, grid)?;
    Ok(())
}

pub fn read_grid_json(path: impl AsRef<Path>) -> Result<MarginalGrid> {
    let text = std::fs::read_to_string(path)?;
    let raw: MarginalGrid = serde_json::from_str(&text)?;
    MarginalGrid::unnormalized(raw.name.clone(), raw.values().to_vec(), raw.densities().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normal(mean: f64, sd: f64) -> MarginalGrid {
        MarginalGrid::gaussian("x", mean, sd, 201).unwrap()
    }

    #[test]
    fn identical_grids_mix_to_themselves() {
        let g = normal(0.3, 1.2);
        let m = mix_marginals_with(&[g.clone(), g.clone(), g.clone()], None, g.len()).unwrap();
        for (a, b) in m.densities().iter().zip(g.densities()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn disjoint_lobes_split_mass() {
        let a = MarginalGrid::gaussian("x", -5.0, 0.2, 75).unwrap();
        let b = MarginalGrid::gaussian("x", 5.0, 0.2, 75).unwrap();
        let m = mix_marginals(&[a, b], None).unwrap();
        let left = m.cdf(0.0);
        assert!((left - 0.5).abs() < 1e-3);
    }

    #[test]
    fn mixture_moments() {
        let m = mix_marginals(&[normal(-1.0, 1.0), normal(1.0, 1.0)], None).unwrap();
        assert!(m.mean().abs() < 1e-3);
        assert!((m.variance() - 2.0).abs() < 1e-3 * 2.0 + 2e-3);
        assert!(matches!(mix_marginals(&[], None), Err(Error::EmptyList)));
    }

    #[test]
    fn summaries() {
        let s = summarize(&normal(0.0, 1.0)).unwrap();
        assert!(s.mean.abs() < 1e-3 && (s.sd - 1.0).abs() < 1e-3);
        assert!((s.q975 - 1.959964).abs() < 5e-3);
        let u = MarginalGrid::from_fn("u", 0.0, 1.0, 101, |_| 1.0).unwrap();
        let su = summarize(&u).unwrap();
        assert!((su.q50 - 0.5).abs() < 1e-12);
        assert!((su.sd - 0.2887).abs() < 1e-4);
        let spike = MarginalGrid::gaussian("s", 2.0, 1e-6, 75).unwrap();
        let ss = summarize(&spike).unwrap();
        let step = spike.values()[1] - spike.values()[0];
        for q in [ss.q025, ss.q50, ss.q975] {
            assert!((q - 2.0).abs() <= 5e-6 + step);
        }
        let raw = MarginalGrid::unnormalized("r", linspace(0.0, 1.0, 40), vec![2.0; 40]).unwrap();
        assert!(matches!(summarize(&raw), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn transforms() {
        let g = normal(0.0, 1.0);
        assert_eq!(transform_grid(&g, 1.0, 0.0).unwrap(), g);
        let t = transform_grid(&g, 2.0, 0.0).unwrap();
        for (&v, &d) in t.values().iter().zip(t.densities()) {
            assert!((d - crate::laplace::normal_pdf(v, 0.0, 2.0)).abs() < 1e-6);
        }
        let m = transform_grid(&normal(1.0, 0.5), -1.0, 0.0).unwrap();
        assert!(m.values().windows(2).all(|w| w[1] > w[0]));
        assert!((m.mean() + 1.0).abs() < 1e-9);
        assert!(matches!(transform_grid(&g, 0.0, 1.0), Err(Error::ZeroScale)));
    }

    #[test]
    fn reciprocal_of_gamma() {
        // X ~ Gamma(30, 10) so 1/X has mean 10/29.
        let shape = 30.0f64;
        let rate = 10.0f64;
        let ln_norm = shape * rate.ln() - statrs::function::gamma::ln_gamma(shape);
        let g = MarginalGrid::from_fn("p", 0.8, 6.0, 2001, |x| {
            (ln_norm + (shape - 1.0) * x.ln() - rate * x).exp()
        })
        .unwrap();
        let r = reciprocal_grid(&g).unwrap();
        assert!((r.mean() - rate / (shape - 1.0)).abs() < 1e-3);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        let g = normal(0.25, 0.75);
        write_grid_json(&g, &p).unwrap();
        assert_eq!(read_grid_json(&p).unwrap(), g);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"values\"") && text.contains("\"densities\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mixture_is_normalised_with_weighted_mean(
            comps in prop::collection::vec((-3.0f64..3.0, 0.3f64..2.0, 0.1f64..1.0), 1..5)
        ) {
            let grids: Vec<_> = comps.iter().map(|&(m, s, _)| normal(m, s)).collect();
            let w: Vec<f64> = comps.iter().map(|c| c.2).collect();
            let mix = mix_marginals(&grids, Some(&w)).unwrap();
            prop_assert!((mix.mass() - 1.0).abs() < 1e-6);
            let expect = comps.iter().map(|c| c.0 * c.2).sum::<f64>() / w.iter().sum::<f64>();
            prop_assert!((mix.mean() - expect).abs() < 1e-3);
        }

        #[test]
        fn affine_maps_quantiles(a in 0.1f64..5.0, b in -3.0f64..3.0, p in 0.05f64..0.95) {
            let g = normal(0.5, 1.3);
            let t = transform_grid(&g, a, b).unwrap();
            prop_assert!((t.mass() - 1.0).abs() < 1e-9);
            prop_assert!((t.quantile(p) - (a * g.quantile(p) + b)).abs() < 1e-9 * (1.0 + a));
        }
    }
}
