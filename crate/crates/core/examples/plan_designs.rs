//! Ranks factorizations of a 3x3 convolution over C channels and prints the
//! Jensen-optimal depth next to the best exact designs.
//!
//!     cargo run --example plan_designs -- [channels] [depth]

use igc::permutation::Regime;
use igc::planner::{enumerate_factorizations, format_design_table, optimal_depth, plan_igcv2_star};

fn main() -> igc::Result<()> {
    let mut args = std::env::args().skip(1);
    let channels: usize = args.next().map_or(144, |a| a.parse().expect("channels"));
    let best = optimal_depth(channels, 9)?;
    let depth: usize = args.next().map_or(3, |a| a.parse().expect("depth"));
    println!(
        "C = {channels}, S = 9: stationary depth {:.3}, best integer depth {}",
        best.stationary, best.best_depth
    );
    for regime in [Regime::Separated, Regime::Coupled] {
        let points = enumerate_factorizations(channels, depth, regime, 9);
        println!("\n{regime:?}, L = {depth}");
        print!("{}", format_design_table(&points[..points.len().min(5)]));
    }
    let star = plan_igcv2_star(channels, 8, 9)?;
    println!(
        "\nIGCV2* with K = 8: L = {}, Q = {}",
        star.depth, star.params
    );
    Ok(())
}
