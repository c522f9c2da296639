//! Times the Xception and IGCV2 blocks against their dense equivalents.
//!
//!     cargo run --release --example benchmark -- [reps]

use igc::engine::{benchmark, BlockKernel, Shape};
use igc::permutation::{build_chain, Regime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> igc::Result<()> {
    let reps = std::env::args()
        .nth(1)
        .map_or(5, |a| a.parse().expect("reps"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (c, widths) in [
        (64, vec![1, 64]),
        (64, vec![1, 8, 8]),
        (256, vec![1, 256]),
        (256, vec![1, 16, 16]),
    ] {
        let chain = build_chain(c, 9, &widths, Regime::Separated)?;
        let kernel = BlockKernel::<f32>::random(&chain, &mut rng)?;
        let r = benchmark(&chain, &kernel, Shape::new(1, c, 32, 32), 1, reps)?;
        println!(
            "C = {c:>3} K = {widths:?}: factorized {:.2} ms, dense {:.2} ms, time ratio {:.3}, flop ratio {}/{} = {:.4}",
            r.factorized_seconds * 1e3,
            r.dense_seconds * 1e3,
            r.time_ratio,
            r.theoretical_ratio[0],
            r.theoretical_ratio[1],
            r.theoretical_ratio_value
        );
    }
    Ok(())
}
