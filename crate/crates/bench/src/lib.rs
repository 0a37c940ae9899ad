//! Benchmark fixtures shared by the bench targets.

use pidgraph_core::synth::{generate_synthetic_plan, random_layout, Perturbation, RandomLayoutParams, SyntheticPlan};

/// A clean random layout of `cols` x `rows` cells.
pub fn layout_plan(seed: u64, cols: u32, rows: u32) -> SyntheticPlan {
    let params = RandomLayoutParams { cols, rows, min_symbols: 8, max_symbols: 12, ..Default::default() };
    generate_synthetic_plan(&random_layout(seed, &params), seed, &Perturbation::default())
        .expect("random layouts are feasible")
}
