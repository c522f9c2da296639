use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::block::{compose_dense_kernel, forward_block, BlockMode};
use super::ops::group_conv;
use super::tensor::{BlockKernel, DenseKernel, FactorWeights, FeatureMap, Scalar, Shape};
use crate::error::{Error, Result};
use crate::planner::flop_count;
use crate::structure::{FactorChain, GroupConvSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input: Shape,
    pub stride: usize,
    pub repetitions: usize,
    pub dtype: String,
    pub factorized_seconds: f64,
    pub dense_seconds: f64,
    /// Factorized over dense median wall time.
    pub time_ratio: f64,
    pub factorized_flops: u64,
    pub dense_flops: u64,
    /// `factorized_flops / dense_flops` in lowest terms.
    pub theoretical_ratio: [u64; 2],
    pub theoretical_ratio_value: f64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn median_seconds(reps: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    run()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[reps / 2])
}

/// Dense kernel as a single-branch factor so both paths share one engine.
fn dense_factor<T: Scalar>(dense: DenseKernel<T>) -> Result<FactorWeights<T>> {
    let spec = GroupConvSpec::dense(dense.channels_in, dense.channels_out, dense.taps)?;
    FactorWeights::new(spec, dense.data)
}

/// Median wall time of the factorized block against its composed dense
/// kernel after one warmup run each.
pub fn benchmark<T: Scalar>(
    chain: &FactorChain,
    kernel: &BlockKernel<T>,
    input: Shape,
    stride: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::usage("benchmarks need at least 3 repetitions"));
    }
    if input.c != chain.channels_in() {
        return Err(Error::structural(format!(
            "input has {} channels, chain expects {}",
            input.c,
            chain.channels_in()
        )));
    }
    let x = FeatureMap::<T>::from_fn(input, |n, c, y, w| {
        T::from_f64((((n * 31 + c * 17 + y * 7 + w * 3) % 23) as f64 - 11.0) / 11.0)
    });
    let dense = dense_factor(compose_dense_kernel(chain, kernel)?)?;
    let factorized_seconds = median_seconds(repetitions, || {
        forward_block(&x, chain, kernel, BlockMode::Linear, stride).map(drop)
    })?;
    let dense_seconds = median_seconds(repetitions, || group_conv(&x, &dense, stride).map(drop))?;

    let factorized_flops = flop_count(chain, input.h, input.w, stride)? * input.n as u64;
    let dense_chain = FactorChain::single(dense.spec().clone())?;
    let dense_flops = flop_count(&dense_chain, input.h, input.w, stride)? * input.n as u64;
    let g = gcd(factorized_flops, dense_flops).max(1);
    Ok(BenchReport {
        input,
        stride,
        repetitions,
        dtype: T::DTYPE.into(),
        factorized_seconds,
        dense_seconds,
        time_ratio: factorized_seconds / dense_seconds,
        factorized_flops,
        dense_flops,
        theoretical_ratio: [factorized_flops / g, dense_flops / g],
        theoretical_ratio_value: factorized_flops as f64 / dense_flops as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permutation::{build_chain, Regime};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xception_ratio_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let chain = FactorChain::without_interleaves(vec![
            GroupConvSpec::depthwise(64, 9).unwrap(),
            GroupConvSpec::dense(64, 64, 1).unwrap(),
        ])
        .unwrap();
        let k = BlockKernel::<f32>::random(&chain, &mut r).unwrap();
        let rep = benchmark(&chain, &k, Shape::new(1, 64, 4, 4), 1, 3).unwrap();
        assert_eq!(rep.theoretical_ratio, [4672 / 64, 36864 / 64]);
        assert_eq!(rep.factorized_flops, 4672 * 16);
    }

    #[test]
    fn dense_against_itself_is_one() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let chain = FactorChain::single(GroupConvSpec::dense(8, 8, 9).unwrap()).unwrap();
        let k = BlockKernel::<f64>::random(&chain, &mut r).unwrap();
        let rep = benchmark(&chain, &k, Shape::new(1, 8, 4, 4), 2, 3).unwrap();
        assert_eq!(rep.theoretical_ratio, [1, 1]);
    }

    #[test]
    fn igcv2_ratio_matches_param_ratio() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let chain = build_chain(144, 9, &[1, 12, 12], Regime::Separated).unwrap();
        let k = BlockKernel::<f32>::random(&chain, &mut r).unwrap();
        let rep = benchmark(&chain, &k, Shape::new(1, 144, 3, 3), 1, 3).unwrap();
        assert_eq!(rep.theoretical_ratio_value, 4752.0 / (144.0 * 144.0 * 9.0));
    }

    #[test]
    fn too_few_repetitions_rejected() {
        let chain = FactorChain::single(GroupConvSpec::dense(2, 2, 1).unwrap()).unwrap();
        let k = BlockKernel::<f64>::identity(&chain).unwrap();
        assert!(benchmark(&chain, &k, Shape::new(1, 2, 2, 2), 1, 2).is_err());
    }
}
