//! Vector-Jacobian products of the engine primitives.

use rayon::prelude::*;

use crate::engine::{
    accumulate_shifted, check_stride, tap_offsets, FactorWeights, FeatureMap, Shape,
};
use crate::error::{Error, Result};
use crate::planner::output_extent;
use crate::structure::PermutationSpec;

fn same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::structural(format!("{what}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `acc[y * stride + dy, x * stride + dx] += w * grad[y, x]`.
fn scatter_shifted(
    acc: &mut [f64],
    grad: &[f64],
    w: f64,
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
        let row = &mut acc[iy as usize * wd..(iy as usize + 1) * wd];
        for x in 0..wo {
            let ix = (x * stride) as isize + dx;
            if ix >= 0 && ix < wd as isize {
                row[ix as usize] += w * grad[y * wo + x];
            }
        }
    }
}

/// Input and weight cotangents of a group convolution.
pub fn vjp_group_conv(
    x: &FeatureMap<f64>,
    weights: &FactorWeights<f64>,
    grad: &FeatureMap<f64>,
    stride: usize,
) -> Result<(FeatureMap<f64>, FactorWeights<f64>)> {
    check_stride(stride)?;
    let spec = weights.spec().clone();
    let xs = x.shape();
    let (ho, wo) = (output_extent(xs.h, stride), output_extent(xs.w, stride));
    same_shape(
        grad.shape(),
        Shape::new(xs.n, spec.channels_out, ho, wo),
        "group conv cotangent",
    )?;
    if xs.c != spec.channels_in {
        return Err(Error::structural("group conv input channel mismatch"));
    }
    let offsets = tap_offsets(spec.spatial_taps)?;

    let mut dx = FeatureMap::zeros(xs);
    dx.data_mut()
        .par_chunks_mut(xs.plane())
        .enumerate()
        .for_each(|(idx, acc)| {
            let (n, i) = (idx / xs.c, idx % xs.c);
            let g = spec.input_branch(i);
            let c = i - spec.branch_inputs(g).start;
            for (s, &off) in offsets.iter().enumerate() {
                for (r, o) in spec.branch_outputs(g).enumerate() {
                    let w = weights.weight(g, r, c, s);
                    scatter_shifted(
                        acc,
                        grad.plane(n, o),
                        w,
                        (xs.h, xs.w),
                        (ho, wo),
                        off,
                        stride,
                    );
                }
            }
        });

    // Weight index -> (branch, row, col, tap) follows the storage layout.
    let mut index = Vec::with_capacity(weights.data().len());
    for g in 0..spec.branches {
        let (outs, ins) = (spec.branch_outputs(g), spec.branch_inputs(g));
        for o in outs {
            for i in ins.clone() {
                for s in 0..spec.spatial_taps {
                    index.push((o, i, s));
                }
            }
        }
    }
    let dw: Vec<f64> = index
        .par_iter()
        .map(|&(o, i, s)| {
            let mut acc = vec![0.0; ho * wo];
            let mut total = 0.0;
            for n in 0..xs.n {
                acc.iter_mut().for_each(|v| *v = 0.0);
                accumulate_shifted(
                    &mut acc,
                    x.plane(n, i),
                    1.0,
                    (xs.h, xs.w),
                    (ho, wo),
                    offsets[s],
                    stride,
                );
                total += acc
                    .iter()
                    .zip(grad.plane(n, o))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            total
        })
        .collect();
    Ok((dx, FactorWeights::new(spec, dw)?))
}

pub fn vjp_grouped_pointwise(
    x: &FeatureMap<f64>,
    weights: &FactorWeights<f64>,
    grad: &FeatureMap<f64>,
) -> Result<(FeatureMap<f64>, FactorWeights<f64>)> {
    vjp_group_conv(x, weights, grad, 1)
}

pub fn vjp_group_spatial(
    x: &FeatureMap<f64>,
    weights: &FactorWeights<f64>,
    grad: &FeatureMap<f64>,
    stride: usize,
) -> Result<(FeatureMap<f64>, FactorWeights<f64>)> {
    vjp_group_conv(x, weights, grad, stride)
}

/// Depthwise weights as a flat `C x S` slice.
pub fn vjp_depthwise_spatial(
    x: &FeatureMap<f64>,
    weights: &[f64],
    taps: usize,
    grad: &FeatureMap<f64>,
    stride: usize,
) -> Result<(FeatureMap<f64>, Vec<f64>)> {
    let spec = crate::structure::GroupConvSpec::depthwise(x.channels(), taps)?;
    let (dx, dw) = vjp_group_conv(
        x,
        &FactorWeights::new(spec, weights.to_vec())?,
        grad,
        stride,
    )?;
    Ok((dx, dw.data().to_vec()))
}

/// Cotangent of a permutation is the inverse permutation of the cotangent.
pub fn vjp_permute_channels(
    grad: &FeatureMap<f64>,
    perm: &PermutationSpec,
) -> Result<FeatureMap<f64>> {
    crate::engine::permute_channels(grad, &perm.inverse())
}

pub fn vjp_relu(x: &FeatureMap<f64>, grad: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
    grad.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 })
}

/// Returns `(dx, dscale, dshift)`.
pub fn vjp_channel_affine(
    x: &FeatureMap<f64>,
    scale: &[f64],
    grad: &FeatureMap<f64>,
) -> Result<(FeatureMap<f64>, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    same_shape(grad.shape(), s, "affine cotangent")?;
    if scale.len() != s.c {
        return Err(Error::structural("affine scale length mismatch"));
    }
    let mut dx = grad.clone();
    let (mut dscale, mut dshift) = (vec![0.0; s.c], vec![0.0; s.c]);
    for n in 0..s.n {
        for c in 0..s.c {
            let (xp, gp) = (x.plane(n, c), grad.plane(n, c));
            dscale[c] += xp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
            dshift[c] += gp.iter().sum::<f64>();
        }
    }
    for (idx, chunk) in dx.data_mut().chunks_mut(s.plane()).enumerate() {
        let k = scale[idx % s.c];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok((dx, dscale, dshift))
}

/// Cotangent of the per-plane mean; `grad` is `N x C` row-major.
pub fn vjp_global_avg_pool(shape: Shape, grad: &[f64]) -> Result<FeatureMap<f64>> {
    if grad.len() != shape.n * shape.c {
        return Err(Error::structural("pooling cotangent length mismatch"));
    }
    let inv = 1.0 / shape.plane() as f64;
    let mut dx = FeatureMap::zeros(shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(shape.plane()).zip(grad) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    Ok(dx)
}

/// Returns `(dx, dweight, dbias)` for `out = x weight^T + bias`.
pub fn vjp_fully_connected(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    classes: usize,
    grad: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let c = x.len() / batch.max(1);
    if grad.len() != batch * classes || weight.len() != classes * c {
        return Err(Error::structural(
            "fully connected cotangent shape mismatch",
        ));
    }
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; classes];
    for n in 0..batch {
        let row = &x[n * c..(n + 1) * c];
        for k in 0..classes {
            let g = grad[n * classes + k];
            db[k] += g;
            for j in 0..c {
                dx[n * c + j] += g * weight[k * c + j];
                dw[k * c + j] += g * row[j];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax of `N x K` logits.
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Mean cross entropy over the batch.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    check_labels(logits, classes, labels)?;
    let p = softmax(logits, classes);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| -p[n * classes + y].ln())
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(logits: &[f64], classes: usize, labels: &[usize]) -> Result<()> {
    if classes == 0 || logits.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::structural(
            "logits are not N x K for the given labels",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::structural(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Cotangent of the mean cross entropy, scaled by the upstream scalar.
pub fn vjp_softmax_cross_entropy(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    upstream: f64,
) -> Result<Vec<f64>> {
    check_labels(logits, classes, labels)?;
    let mut p = softmax(logits, classes);
    let scale = upstream / labels.len() as f64;
    for (n, &y) in labels.iter().enumerate() {
        p[n * classes + y] -= 1.0;
    }
    p.iter_mut().for_each(|v| *v *= scale);
    Ok(p)
}

/// Per-channel batch statistics: mean and biased variance over `N x H x W`.
pub fn channel_moments(x: &FeatureMap<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            mean[c] += x.plane(n, c).iter().sum::<f64>();
        }
        mean[c] /= m;
        for n in 0..s.n {
            var[c] += x
                .plane(n, c)
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
        var[c] /= m;
    }
    (mean, var)
}

/// Training-mode batch normalization cotangents `(dx, dgamma, dbeta)` given
/// the saved batch mean and inverse standard deviation.
pub fn vjp_batch_norm(
    x: &FeatureMap<f64>,
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    grad: &FeatureMap<f64>,
) -> Result<(FeatureMap<f64>, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    same_shape(grad.shape(), s, "batch norm cotangent")?;
    let m = (s.n * s.plane()) as f64;
    let (mut dgamma, mut dbeta) = (vec![0.0; s.c], vec![0.0; s.c]);
    for c in 0..s.c {
        for n in 0..s.n {
            for (&v, &g) in x.plane(n, c).iter().zip(grad.plane(n, c)) {
                dgamma[c] += g * (v - mean[c]) * inv_std[c];
                dbeta[c] += g;
            }
        }
    }
    let mut dx = FeatureMap::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma[c] * inv_std[c] / m;
            let start = (n * s.c + c) * p;
            for ((d, &v), &g) in dx.data_mut()[start..start + p]
                .iter_mut()
                .zip(x.plane(n, c))
                .zip(grad.plane(n, c))
            {
                let xhat = (v - mean[c]) * inv_std[c];
                *d = k * (m * g - dbeta[c] - xhat * dgamma[c]);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
