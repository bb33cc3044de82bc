//! Writes a synthetic three-disease dataset on a 7 × 7 lattice:
//! `<dir>/lattice7.gal` and `<dir>/dismap_synthetic.csv`.
//!
//! Usage: `cargo run -p laplace-mh --example simulate_dismap -- [dir] [seed]`

use laplace_mh::dismap::{generate_synthetic, SyntheticConfig};
use laplace_mh::graphs::{write_gal, Adjacency};
use laplace_mh::io::write_counts;

fn main() -> laplace_mh::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = std::path::PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(2024);
    let adjacency = Adjacency::lattice(7, 7);
    let cfg = SyntheticConfig {
        delta: vec![1.0, 1.3, 0.7],
        alpha: vec![0.0, 0.0, 0.0],
        tau_v: 1.0,
        tau_s: 10.0,
        expected: vec![100.0; adjacency.n()],
        seed,
    };
    let (spec, _) = generate_synthetic(&adjacency, &cfg)?;
    std::fs::create_dir_all(&dir)?;
    write_gal(&adjacency, dir.join("lattice7.gal"))?;
    write_counts(&spec.to_counts(), dir.join("dismap_synthetic.csv"))?;
    println!("wrote {} areas × {} diseases to {}", spec.n(), spec.n_diseases(), dir.display());
    Ok(())
}
