//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use laplace_mh::dismap::{self, generate_synthetic, DismapSpec, SyntheticConfig};
use laplace_mh::econ::ManskiSpec;
use laplace_mh::gmrf::icar_structure;
use laplace_mh::graphs::{read_gal, Adjacency};
use laplace_mh::io::read_table;
use laplace_mh::lgm::LatentModel;
use laplace_mh::spmat::SparseSym;

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// The Columbus crime regression with `INC` and `HOVAL`.
pub fn columbus() -> ManskiSpec {
    let adjacency = read_gal(data_path("columbus.gal")).expect("columbus.gal");
    let table = read_table(data_path("columbus.csv"), "id").expect("columbus.csv");
    ManskiSpec::from_table(&table, &adjacency, "CRIME", &["INC", "HOVAL"]).expect("columbus spec")
}

/// Three diseases on a `side × side` lattice with 100 expected cases per area.
pub fn dismap_synthetic(side: usize, seed: u64) -> DismapSpec {
    let adjacency = Adjacency::lattice(side, side);
    let cfg = SyntheticConfig {
        delta: vec![1.0, 1.3, 0.7],
        alpha: vec![0.0; 3],
        tau_v: 1.0,
        tau_s: 10.0,
        expected: vec![100.0; adjacency.n()],
        seed,
    };
    generate_synthetic(&adjacency, &cfg).expect("synthetic data").0
}

/// The disease-mapping model at δ = 1 together with the prior medians of its
/// hyperparameters.
pub fn dismap_conditional(side: usize) -> (LatentModel, Vec<f64>) {
    let spec = dismap_synthetic(side, 11);
    let cond = dismap::build_conditional(&spec, &vec![1.0; spec.n_diseases()]).expect("conditional");
    let theta = hyper_medians(&cond.model);
    (cond.model, theta)
}

pub fn hyper_medians(model: &LatentModel) -> Vec<f64> {
    model
        .hypers()
        .iter()
        .map(|h| h.fixed.unwrap_or_else(|| h.prior.median()))
        .collect()
}

/// ICAR structure of a `side × side` lattice plus a unit diagonal.
pub fn lattice_precision(side: usize) -> SparseSym {
    let q = icar_structure(&Adjacency::lattice(side, side));
    q.add_scaled(&SparseSym::identity(q.n()), 1.0).expect("same dimension")
}
