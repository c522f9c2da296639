//! Central-difference check of the reverse-mode gradients of a nonlinear
//! block with a random linear read-out.
//!
//!     cargo run --release --example gradient_check -- [seeds]

use igc::engine::{BlockMode, FactorWeights, FeatureMap, Shape};
use igc::permutation::{build_chain, Regime};
use igc::train::{column, finite_diff_check, record_block, BlockVars};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> igc::Result<()> {
    let seeds = std::env::args()
        .nth(1)
        .map_or(5, |a| a.parse().expect("seeds"));
    let chain = build_chain(8, 9, &[1, 2, 4], Regime::Separated)?;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMap::random(Shape::new(2, 8, 4, 4), &mut rng);
        let mut params = Vec::new();
        for f in chain.factors() {
            params.push(column(
                FactorWeights::<f64>::random(f.clone(), &mut rng, 0.5)?
                    .data()
                    .to_vec(),
            )?);
        }
        for f in chain.factors() {
            params.push(column(
                (0..f.channels_out)
                    .map(|_| rng.gen_range(0.5..1.5))
                    .collect(),
            )?);
            params.push(column(
                (0..f.channels_out)
                    .map(|_| rng.gen_range(-0.3..0.3))
                    .collect(),
            )?);
        }
        let probe = FeatureMap::random(Shape::new(2, 8, 4, 4), &mut rng);
        let depth = chain.depth();
        let report = finite_diff_check(
            &params,
            |t, v| {
                let xv = t.leaf(x.clone());
                let vars = BlockVars {
                    weights: v[..depth].to_vec(),
                    affine: Some(
                        (0..depth)
                            .map(|l| (v[depth + 2 * l], v[depth + 2 * l + 1]))
                            .collect(),
                    ),
                };
                let y = record_block(t, xv, &chain, &vars, BlockMode::NonlinearIgcv2, 1)?;
                t.dot(y, &probe)
            },
            1e-5,
        )?;
        println!(
            "seed {seed}: max relative error {:.2e} over {} evaluations, pass {}",
            report.max_relative_error, report.evaluations, report.pass
        );
    }
    Ok(())
}
