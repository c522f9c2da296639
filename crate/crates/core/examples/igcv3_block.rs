//! Expand, depthwise and project with channel shuffles, with and without
//! the identity skip.
//!
//!     cargo run --example igcv3_block

use igc::engine::{forward_igcv3_block, Affine, BlockKernel, FeatureMap, Igcv3Spec, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> igc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for spec in [
        Igcv3Spec {
            channels_in: 32,
            channels_out: 32,
            expansion: 6,
            g1: 2,
            g2: 2,
            stride: 1,
            skip: None,
        },
        Igcv3Spec {
            channels_in: 32,
            channels_out: 64,
            expansion: 6,
            g1: 2,
            g2: 2,
            stride: 2,
            skip: None,
        },
    ] {
        let chain = spec.chain()?;
        let affine = chain
            .factors()
            .iter()
            .map(|f| Affine::identity(f.channels_out))
            .collect();
        let kernel = BlockKernel::<f64>::random(&chain, &mut rng)?.with_affine(affine);
        let x = FeatureMap::random(Shape::new(1, spec.channels_in, 16, 16), &mut rng);
        let y = forward_igcv3_block(&x, &spec, &kernel)?;
        let s = y.shape();
        println!(
            "{} -> {} (x{} expansion, G1 = {}, G2 = {}, stride {}): {} weights, skip {}, output {}x{}x{}",
            spec.channels_in,
            spec.channels_out,
            spec.expansion,
            spec.g1,
            spec.g2,
            spec.stride,
            kernel.weight_count(),
            spec.has_skip()?,
            s.c,
            s.h,
            s.w
        );
    }
    Ok(())
}
