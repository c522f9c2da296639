use serde::{Deserialize, Serialize};

use super::ops::{add, channel_affine, group_conv, permute_channels, relu};
use super::tensor::{BlockKernel, DenseKernel, FactorWeights, FeatureMap, Scalar};
use crate::error::{Error, Result};
use crate::planner::igcv3_chain;
use crate::structure::{FactorChain, GroupConvSpec, PermutationSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// Factors and permutations only.
    Linear,
    /// Every factor followed by its affine pair, ReLU after the first and
    /// last factor, then the interleave.
    NonlinearIgcv2,
}

/// Multiplies out the chain tap by tap. Affine pairs are not folded in, so
/// the result reproduces [`BlockMode::Linear`].
pub fn compose_dense_kernel<T: Scalar>(
    chain: &FactorChain,
    kernel: &BlockKernel<T>,
) -> Result<DenseKernel<T>> {
    if chain.factors().iter().filter(|f| f.is_spatial()).count() > 1 {
        return Err(Error::Unsupported(
            "composition needs at most one spatial factor".into(),
        ));
    }
    kernel.validate(chain)?;
    let taps = chain.spatial_taps();
    let (c_out, c_in) = (chain.channels_out(), chain.channels_in());
    let mut dense = DenseKernel::zeros(c_out, c_in, taps);
    for s in 0..taps {
        // Current product as a row-major rows x c_in matrix.
        let mut rows = c_in;
        let mut m: Vec<T> = (0..c_in * c_in)
            .map(|k| {
                if k / c_in == k % c_in {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        for (l, w) in kernel.factors.iter().enumerate() {
            let tap = if w.spec().is_spatial() { s } else { 0 };
            m = left_apply_factor(w, tap, &m, c_in);
            rows = w.spec().channels_out;
            if let Some(p) = chain.permutation_after(l) {
                m = left_apply_permutation(p, &m, c_in);
            }
        }
        debug_assert_eq!(rows, c_out);
        for o in 0..c_out {
            for i in 0..c_in {
                dense.set(o, i, s, m[o * c_in + i]);
            }
        }
    }
    Ok(dense)
}

fn left_apply_factor<T: Scalar>(w: &FactorWeights<T>, tap: usize, m: &[T], cols: usize) -> Vec<T> {
    let spec = w.spec();
    let mut out = vec![T::zero(); spec.channels_out * cols];
    for o in 0..spec.channels_out {
        let g = spec.output_branch(o);
        let r = o - spec.branch_outputs(g).start;
        let row = &mut out[o * cols..(o + 1) * cols];
        for (c, i) in spec.branch_inputs(g).enumerate() {
            let a = w.weight(g, r, c, tap);
            for (d, &v) in row.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
                *d = *d + a * v;
            }
        }
    }
    out
}

fn left_apply_permutation<T: Scalar>(p: &PermutationSpec, m: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for j in 0..p.len() {
        let d = p.dest(j);
        out[d * cols..(d + 1) * cols].copy_from_slice(&m[j * cols..(j + 1) * cols]);
    }
    out
}

/// Runs a chain; the spatial factor (or the first, if none) carries `stride`.
fn run_chain<T: Scalar>(
    x: &FeatureMap<T>,
    chain: &FactorChain,
    kernel: &BlockKernel<T>,
    stride: usize,
    relu_after: impl Fn(usize) -> bool,
    use_affine: bool,
) -> Result<FeatureMap<T>> {
    kernel.validate(chain)?;
    let affine = match (use_affine, &kernel.affine) {
        (false, _) => None,
        (true, Some(a)) => Some(a),
        (true, None) => {
            return Err(Error::structural(
                "nonlinear blocks need an affine pair for every factor",
            ))
        }
    };
    let strided = chain.spatial_factor().unwrap_or(0);
    let mut h = x.clone();
    for (l, w) in kernel.factors.iter().enumerate() {
        h = group_conv(&h, w, if l == strided { stride } else { 1 })?;
        if let Some(a) = affine {
            h = channel_affine(&h, &a[l].scale, &a[l].shift)?;
        }
        if use_affine && relu_after(l) {
            h = relu(&h);
        }
        if let Some(p) = chain.permutation_after(l) {
            h = permute_channels(&h, p)?;
        }
    }
    Ok(h)
}

pub fn forward_block<T: Scalar>(
    x: &FeatureMap<T>,
    chain: &FactorChain,
    kernel: &BlockKernel<T>,
    mode: BlockMode,
    stride: usize,
) -> Result<FeatureMap<T>> {
    let last = chain.depth() - 1;
    match mode {
        BlockMode::Linear => run_chain(x, chain, kernel, stride, |_| false, false),
        BlockMode::NonlinearIgcv2 => {
            run_chain(x, chain, kernel, stride, |l| l == 0 || l == last, true)
        }
    }
}

/// Bottleneck block configuration; `g1`, `g2` are branch counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Igcv3Spec {
    pub channels_in: usize,
    pub channels_out: usize,
    pub expansion: usize,
    pub g1: usize,
    pub g2: usize,
    pub stride: usize,
    /// `None` adds the skip whenever shapes allow.
    #[serde(default)]
    pub skip: Option<bool>,
}

impl Igcv3Spec {
    pub fn chain(&self) -> Result<FactorChain> {
        igcv3_chain(
            self.channels_in,
            self.channels_out,
            self.expansion,
            self.g1,
            self.g2,
        )
    }

    pub fn has_skip(&self) -> Result<bool> {
        let fits = self.stride == 1 && self.channels_in == self.channels_out;
        match self.skip {
            None => Ok(fits),
            Some(true) if !fits => Err(Error::structural(format!(
                "skip requested for a {} -> {} block at stride {}",
                self.channels_in, self.channels_out, self.stride
            ))),
            Some(s) => Ok(s),
        }
    }

    pub fn factor_specs(&self) -> Result<Vec<GroupConvSpec>> {
        Ok(self.chain()?.factors().to_vec())
    }
}

/// Expand, affine, ReLU, depthwise, affine, ReLU, shuffle, project, affine,
/// plus the identity skip.
pub fn forward_igcv3_block<T: Scalar>(
    x: &FeatureMap<T>,
    spec: &Igcv3Spec,
    kernel: &BlockKernel<T>,
) -> Result<FeatureMap<T>> {
    let chain = spec.chain()?;
    let skip = spec.has_skip()?;
    let y = run_chain(x, &chain, kernel, spec.stride, |l| l < 2, true)?;
    if skip {
        add(&y, x)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ops::dense_conv;
    use crate::engine::tensor::{Affine, Shape};
    use crate::permutation::{build_chain, build_loose_chain, Regime};
    use crate::structure::compose_structure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine_for<T: Scalar>(chain: &FactorChain, scale: f64, shift: f64) -> Vec<Affine<T>> {
        chain
            .factors()
            .iter()
            .map(|f| Affine {
                scale: vec![T::from_f64(scale); f.channels_out],
                shift: vec![T::from_f64(shift); f.channels_out],
            })
            .collect()
    }

    #[test]
    fn identity_factors_compose_to_center_tap() {
        let chain = build_chain(12, 9, &[1, 3, 4], Regime::Separated).unwrap();
        let k = BlockKernel::<f64>::identity(&chain).unwrap();
        let d = compose_dense_kernel(&chain, &k).unwrap();
        // The interleaves do not cancel, so the centre tap is a permutation.
        let mut total = 0.0;
        for o in 0..12 {
            for i in 0..12 {
                for s in 0..9 {
                    let v = d.get(o, i, s);
                    assert!(v == 0.0 || (v == 1.0 && s == 4));
                    total += v;
                }
            }
        }
        assert_eq!(total, 12.0);
        let no_mix = chain.with_identity_interleaves();
        let d = compose_dense_kernel(&no_mix, &k).unwrap();
        assert_eq!(d, DenseKernel::identity(12, 9));
    }

    #[test]
    fn linear_block_matches_dense_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for (widths, stride) in [(vec![1, 3, 4], 1), (vec![2, 2, 3], 2), (vec![3, 1, 4], 1)] {
            let chain = build_chain(12, 9, &widths, Regime::Coupled).unwrap();
            let k = BlockKernel::<f64>::random(&chain, &mut r).unwrap();
            let x = FeatureMap::<f64>::random(Shape::new(2, 12, 6, 5), &mut r);
            let y = forward_block(&x, &chain, &k, BlockMode::Linear, stride).unwrap();
            let d = dense_conv(&x, &compose_dense_kernel(&chain, &k).unwrap(), stride).unwrap();
            assert!(y.max_relative_error(&d) < 1e-10, "{widths:?}");
        }
    }

    #[test]
    fn zero_pattern_follows_structure_mask() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let (chain, _) = build_loose_chain(10, 9, 3, 3).unwrap();
        let k = BlockKernel::<f64>::random(&chain, &mut r).unwrap();
        let d = compose_dense_kernel(&chain, &k).unwrap();
        let mask = compose_structure(&chain, 1, chain.depth()).unwrap();
        for o in 0..10 {
            for i in 0..10 {
                assert_eq!(d.get(o, i, 0) != 0.0, mask.get(o, i) > 0);
            }
        }
    }

    #[test]
    fn nonlinear_with_unit_affine_and_positive_data_is_linear() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let chain = build_chain(8, 9, &[1, 2, 4], Regime::Separated).unwrap();
        let mut k = BlockKernel::<f64>::random(&chain, &mut r).unwrap();
        for f in &mut k.factors {
            f.data_mut().iter_mut().for_each(|v| *v = v.abs());
        }
        let k = k.with_affine(affine_for(&chain, 1.0, 0.0));
        let x = FeatureMap::<f64>::random(Shape::new(1, 8, 4, 4), &mut r).map(f64::abs);
        let a = forward_block(&x, &chain, &k, BlockMode::Linear, 1).unwrap();
        let b = forward_block(&x, &chain, &k, BlockMode::NonlinearIgcv2, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_gives_shift_constant() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let chain = build_chain(8, 9, &[1, 2, 4], Regime::Separated).unwrap();
        let k = BlockKernel::<f64>::random(&chain, &mut r)
            .unwrap()
            .with_affine(affine_for(&chain, 1.0, 0.0));
        let mut k_last = k.clone();
        let affine = k_last.affine.as_mut().unwrap();
        affine[2].shift = vec![0.75; 8];
        let x = FeatureMap::zeros(Shape::new(1, 8, 3, 3));
        let y = forward_block(&x, &chain, &k_last, BlockMode::NonlinearIgcv2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn nonlinear_needs_affine() {
        let chain = build_chain(4, 9, &[1, 2, 2], Regime::Separated).unwrap();
        let k = BlockKernel::<f64>::identity(&chain).unwrap();
        let x = FeatureMap::zeros(Shape::new(1, 4, 2, 2));
        assert!(forward_block(&x, &chain, &k, BlockMode::NonlinearIgcv2, 1).is_err());
    }

    #[test]
    fn igcv3_degenerates_to_separable_stack() {
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let spec = Igcv3Spec {
            channels_in: 6,
            channels_out: 6,
            expansion: 1,
            g1: 1,
            g2: 1,
            stride: 1,
            skip: Some(false),
        };
        let chain = spec.chain().unwrap();
        let k = BlockKernel::<f64>::random(&chain, &mut r)
            .unwrap()
            .with_affine(affine_for(&chain, 1.0, 0.0));
        let x = FeatureMap::<f64>::random(Shape::new(1, 6, 5, 5), &mut r);
        let y = forward_igcv3_block(&x, &spec, &k).unwrap();
        let mut h = relu(&group_conv(&x, &k.factors[0], 1).unwrap());
        h = relu(&group_conv(&h, &k.factors[1], 1).unwrap());
        h = group_conv(&h, &k.factors[2], 1).unwrap();
        assert_eq!(y, h);
    }

    #[test]
    fn igcv3_two_branch_keeps_spatial_dims() {
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let spec = Igcv3Spec {
            channels_in: 32,
            channels_out: 32,
            expansion: 6,
            g1: 2,
            g2: 2,
            stride: 1,
            skip: None,
        };
        let chain = spec.chain().unwrap();
        let k = BlockKernel::<f64>::random(&chain, &mut r)
            .unwrap()
            .with_affine(affine_for(&chain, 1.0, 0.0));
        let x = FeatureMap::<f64>::random(Shape::new(2, 32, 6, 6), &mut r);
        let y = forward_igcv3_block(&x, &spec, &k).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(spec.has_skip().unwrap());
    }

    #[test]
    fn igcv3_zero_residual_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let spec = Igcv3Spec {
            channels_in: 8,
            channels_out: 8,
            expansion: 2,
            g1: 2,
            g2: 2,
            stride: 1,
            skip: Some(true),
        };
        let chain = spec.chain().unwrap();
        let mut k = BlockKernel::<f64>::random(&chain, &mut r)
            .unwrap()
            .with_affine(affine_for(&chain, 1.0, 0.0));
        k.factors[2].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = FeatureMap::from_fn(Shape::new(1, 8, 3, 3), |_, _, _, _| r.gen_range(-1.0..1.0));
        assert_eq!(forward_igcv3_block(&x, &spec, &k).unwrap(), x);
    }

    #[test]
    fn igcv3_skip_with_mismatched_dims_is_error() {
        let spec = Igcv3Spec {
            channels_in: 8,
            channels_out: 16,
            expansion: 2,
            g1: 2,
            g2: 2,
            stride: 1,
            skip: Some(true),
        };
        assert_eq!(spec.has_skip().unwrap_err().kind(), "structural");
    }
}
