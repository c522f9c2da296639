//! Forward primitives on batched feature maps. Every output element is
//! accumulated tap-major, then by ascending input channel, so results do not
//! depend on how work is split across threads.

use rayon::prelude::*;

use super::tensor::{DenseKernel, FactorWeights, FeatureMap, Scalar, Shape};
use crate::error::{Error, Result};
use crate::planner::output_extent;
use crate::structure::{GroupConvSpec, PermutationSpec};

/// Row/column offset of each tap for a `k x k` window with same padding.
pub(crate) fn tap_offsets(taps: usize) -> Result<Vec<(isize, isize)>> {
    let k = crate::structure::kernel_side(taps)?;
    let pad = (k / 2) as isize;
    Ok((0..taps)
        .map(|s| ((s / k) as isize - pad, (s % k) as isize - pad))
        .collect())
}

pub(crate) fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::usage("stride must be at least 1"));
    }
    Ok(())
}

/// `acc[y, x] += w * plane[y * stride + dy, x * stride + dx]` over the valid window.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_shifted<T: Scalar>(
    acc: &mut [T],
    plane: &[T],
    w: T,
    (h, wd): (usize, usize),
    (ho, wo): (usize, usize),
    (dy, dx): (isize, isize),
    stride: usize,
) {
    for y in 0..ho {
        let iy = (y * stride) as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let src = &plane[iy as usize * wd..(iy as usize + 1) * wd];
        let dst = &mut acc[y * wo..(y + 1) * wo];
        if stride == 1 {
            let lo = (-dx).max(0) as usize;
            let hi = (wd as isize - dx).min(wo as isize).max(0) as usize;
            for x in lo..hi {
                dst[x] = dst[x] + w * src[(x as isize + dx) as usize];
            }
        } else {
            for (x, d) in dst.iter_mut().enumerate() {
                let ix = (x * stride) as isize + dx;
                if ix >= 0 && ix < wd as isize {
                    *d = *d + w * src[ix as usize];
                }
            }
        }
    }
}

/// Any group convolution: grouped pointwise, depthwise, group spatial or
/// dense, strict or loose, with same padding.
pub fn group_conv<T: Scalar>(
    x: &FeatureMap<T>,
    weights: &FactorWeights<T>,
    stride: usize,
) -> Result<FeatureMap<T>> {
    check_stride(stride)?;
    let spec = weights.spec();
    let shape = x.shape();
    if shape.c != spec.channels_in {
        return Err(Error::structural(format!(
            "input has {} channels, factor expects {}",
            shape.c, spec.channels_in
        )));
    }
    let offsets = tap_offsets(spec.spatial_taps)?;
    let (ho, wo) = (
        output_extent(shape.h, stride),
        output_extent(shape.w, stride),
    );
    let out_shape = Shape::new(shape.n, spec.channels_out, ho, wo);
    let mut out = FeatureMap::zeros(out_shape);
    let plane = ho * wo;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, acc)| {
            let (n, o) = (idx / spec.channels_out, idx % spec.channels_out);
            let g = spec.output_branch(o);
            let r = o - spec.branch_outputs(g).start;
            let inputs = spec.branch_inputs(g);
            for (s, &off) in offsets.iter().enumerate() {
                for (c, i) in inputs.clone().enumerate() {
                    let w = weights.weight(g, r, c, s);
                    accumulate_shifted(
                        acc,
                        x.plane(n, i),
                        w,
                        (shape.h, shape.w),
                        (ho, wo),
                        off,
                        stride,
                    );
                }
            }
        });
    Ok(out)
}

/// Group convolution restricted to `1 x 1` taps.
pub fn grouped_pointwise<T: Scalar>(
    x: &FeatureMap<T>,
    weights: &FactorWeights<T>,
) -> Result<FeatureMap<T>> {
    if weights.spec().spatial_taps != 1 {
        return Err(Error::structural("grouped_pointwise needs a 1x1 factor"));
    }
    group_conv(x, weights, 1)
}

/// Channel-wise spatial filtering; `weights` holds `C x S` taps.
pub fn depthwise_spatial<T: Scalar>(
    x: &FeatureMap<T>,
    weights: &[T],
    taps: usize,
    stride: usize,
) -> Result<FeatureMap<T>> {
    let spec = GroupConvSpec::depthwise(x.channels(), taps)?;
    group_conv(x, &FactorWeights::new(spec, weights.to_vec())?, stride)
}

pub fn group_spatial<T: Scalar>(
    x: &FeatureMap<T>,
    weights: &FactorWeights<T>,
    stride: usize,
) -> Result<FeatureMap<T>> {
    group_conv(x, weights, stride)
}

/// Output channel `perm.map()[j]` receives input channel `j`.
pub fn permute_channels<T: Scalar>(
    x: &FeatureMap<T>,
    perm: &PermutationSpec,
) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    if perm.len() != shape.c {
        return Err(Error::structural(format!(
            "permutation of length {} on {} channels",
            perm.len(),
            shape.c
        )));
    }
    let mut out = FeatureMap::zeros(shape);
    let p = shape.plane();
    for n in 0..shape.n {
        for j in 0..shape.c {
            let dst = (n * shape.c + perm.dest(j)) * p;
            out.data_mut()[dst..dst + p].copy_from_slice(x.plane(n, j));
        }
    }
    Ok(out)
}

/// Naive direct convolution used as the reference for every oracle test.
pub fn dense_conv<T: Scalar>(
    x: &FeatureMap<T>,
    kernel: &DenseKernel<T>,
    stride: usize,
) -> Result<FeatureMap<T>> {
    check_stride(stride)?;
    kernel.validate()?;
    let shape = x.shape();
    if shape.c != kernel.channels_in {
        return Err(Error::structural(format!(
            "input has {} channels, kernel expects {}",
            shape.c, kernel.channels_in
        )));
    }
    let offsets = tap_offsets(kernel.taps)?;
    let (ho, wo) = (
        output_extent(shape.h, stride),
        output_extent(shape.w, stride),
    );
    let mut out = FeatureMap::zeros(Shape::new(shape.n, kernel.channels_out, ho, wo));
    for n in 0..shape.n {
        for o in 0..kernel.channels_out {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = T::zero();
                    for (s, &(dy, dx)) in offsets.iter().enumerate() {
                        let iy = (y * stride) as isize + dy;
                        let ix = (xo * stride) as isize + dx;
                        if iy < 0 || ix < 0 || iy >= shape.h as isize || ix >= shape.w as isize {
                            continue;
                        }
                        for i in 0..kernel.channels_in {
                            acc = acc + kernel.get(o, i, s) * x.get(n, i, iy as usize, ix as usize);
                        }
                    }
                    out.set(n, o, y, xo, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| v.max(T::zero()))
}

/// `y[c] = scale[c] * x[c] + shift[c]`.
pub fn channel_affine<T: Scalar>(
    x: &FeatureMap<T>,
    scale: &[T],
    shift: &[T],
) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    if scale.len() != shape.c || shift.len() != shape.c {
        return Err(Error::structural(format!(
            "affine of {}/{} channels on {} channels",
            scale.len(),
            shift.len(),
            shape.c
        )));
    }
    let mut out = x.clone();
    let p = shape.plane();
    for (idx, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        let c = idx % shape.c;
        for v in chunk {
            *v = scale[c] * *v + shift[c];
        }
    }
    Ok(out)
}

pub fn add<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Mean over each spatial plane; returns `N x C` row-major.
pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Vec<T> {
    let shape = x.shape();
    let inv = T::from_f64(1.0 / shape.plane() as f64);
    x.data()
        .chunks(shape.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

/// `out[n, k] = bias[k] + sum_c weight[k, c] * x[n, c]`; `weight` is row-major `K x C`.
pub fn fully_connected<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: &[T],
) -> Result<Vec<T>> {
    let classes = bias.len();
    if batch == 0 || classes == 0 || !x.len().is_multiple_of(batch) {
        return Err(Error::structural("fully connected input is not N x C"));
    }
    let c = x.len() / batch;
    if weight.len() != classes * c {
        return Err(Error::structural(format!(
            "fully connected weight has {} entries, expected {}",
            weight.len(),
            classes * c
        )));
    }
    let mut out = Vec::with_capacity(batch * classes);
    for row in x.chunks(c) {
        for k in 0..classes {
            let w = &weight[k * c..(k + 1) * c];
            out.push(bias[k] + w.iter().zip(row).map(|(&a, &b)| a * b).sum::<T>());
        }
    }
    Ok(out)
}
