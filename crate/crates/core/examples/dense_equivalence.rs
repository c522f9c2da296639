//! Runs a random factorized block and the dense kernel it composes to on the
//! same input and reports the largest difference.
//!
//!     cargo run --example dense_equivalence -- [seed]

use igc::engine::{
    compose_dense_kernel, dense_conv, forward_block, BlockKernel, BlockMode, FeatureMap, Shape,
};
use igc::permutation::{build_chain, Regime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> igc::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map_or(0, |a| a.parse().expect("seed"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (widths, regime) in [
        (vec![1, 4, 6], Regime::Separated),
        (vec![2, 12], Regime::Coupled),
        (vec![1, 2, 3, 4], Regime::Separated),
    ] {
        let chain = build_chain(24, 9, &widths, regime)?;
        let kernel = BlockKernel::<f64>::random(&chain, &mut rng)?;
        let dense = compose_dense_kernel(&chain, &kernel)?;
        let x = FeatureMap::random(Shape::new(2, 24, 8, 8), &mut rng);
        for stride in [1, 2] {
            let a = forward_block(&x, &chain, &kernel, BlockMode::Linear, stride)?;
            let b = dense_conv(&x, &dense, stride)?;
            println!(
                "K = {widths:?} {regime:?} stride {stride}: {} nonzeros vs {} dense, max rel err {:.2e}",
                chain.nonzeros(),
                dense.data.len(),
                a.max_relative_error(&b)
            );
        }
    }
    Ok(())
}
