//! Runs one ablation sweep on the synthetic benchmark with the held-out
//! split recorded under the shifted acquisition profile.
//!
//! `cargo run --release -p esi-core --example ablation -- misalignment 0,0.5,1 0,1,2`

use esi_core::benchmark::{AcquisitionProfile, BenchmarkConfig};
use esi_core::downstream::{run_ablation, AblationKind, AblationSetup};
use esi_core::pretrainer::TrainConfig;

fn main() -> esi_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(String::as_str) {
        Some("datasize") => AblationKind::Datasize,
        Some("components") => AblationKind::Components,
        _ => AblationKind::Misalignment,
    };
    let grid = match args.get(2) {
        Some(g) => g.split(',').map(|v| v.parse().expect("numeric grid")).collect(),
        None => kind.default_grid(),
    };
    let seeds: Vec<u64> = match args.get(3) {
        Some(s) => s.split(',').map(|v| v.parse().expect("integer seed")).collect(),
        None => vec![0],
    };
    let benchmark = BenchmarkConfig {
        test_profile: AcquisitionProfile::shifted(),
        ..BenchmarkConfig::default()
    };
    let mut setup = AblationSetup::new(benchmark, TrainConfig::micro());
    setup.seeds = seeds;
    let table = run_ablation(kind, &grid, &setup)?;
    print!("{}", table.to_tsv());
    Ok(())
}
