use crate::engine::{self, FactorWeights, FeatureMap, Shape};
use crate::error::{Error, Result};
use crate::structure::{GroupConvSpec, PermutationSpec};

use super::vjp;

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector stored as a `1 x len x 1 x 1` feature map.
pub fn column(data: Vec<f64>) -> Result<FeatureMap<f64>> {
    FeatureMap::from_vec(Shape::new(1, data.len(), 1, 1), data)
}

/// Batch statistics seen by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased estimate, as used for running averages.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        spec: GroupConvSpec,
        stride: usize,
    },
    Permute {
        x: Var,
        perm: PermutationSpec,
    },
    Relu {
        x: Var,
    },
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Pool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Dot {
        x: Var,
        r: Vec<f64>,
    },
    HalfSquaredNorm {
        x: Var,
    },
}

/// Records primitive applications with the values needed for their VJPs.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<FeatureMap<f64>>,
    params: Vec<Var>,
}

/// Cotangents indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<FeatureMap<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&FeatureMap<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn dense(&self, v: Var, shape: Shape) -> FeatureMap<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| FeatureMap::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: FeatureMap<f64>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &FeatureMap<f64> {
        &self.values[v.0]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Constant input.
    pub fn leaf(&mut self, value: FeatureMap<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf, listed in [`Tape::params`].
    pub fn param(&mut self, value: FeatureMap<f64>) -> Var {
        let v = self.leaf(value);
        self.params.push(v);
        v
    }

    pub fn conv(&mut self, x: Var, w: Var, spec: &GroupConvSpec, stride: usize) -> Result<Var> {
        let y = conv_value(self.value(x), self.value(w), spec, stride)?;
        Ok(self.push(
            Op::Conv {
                x,
                w,
                spec: spec.clone(),
                stride,
            },
            y,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &PermutationSpec) -> Result<Var> {
        let y = engine::permute_channels(self.value(x), perm)?;
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.clone(),
            },
            y,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = engine::relu(self.value(x));
        self.push(Op::Relu { x }, y)
    }

    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let y = engine::channel_affine(
            self.value(x),
            self.value(scale).data(),
            self.value(shift).data(),
        )?;
        Ok(self.push(Op::Affine { x, scale, shift }, y))
    }

    /// Normalizes with the statistics of the current batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (mean, var) = vjp::channel_moments(xv);
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let y = batch_norm_value(
            xv,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &inv_std,
        )?;
        let m = (xv.shape().n * xv.shape().plane()) as f64;
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * unbiased).collect(),
        };
        Ok((
            self.push(
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                },
                y,
            ),
            stats,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = engine::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    /// Global average pooling to `N x C x 1 x 1`.
    pub fn pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let y = FeatureMap::from_vec(
            Shape::new(s.n, s.c, 1, 1),
            engine::global_avg_pool(self.value(x)),
        )?;
        Ok(self.push(Op::Pool { x }, y))
    }

    /// `x` is `N x C x 1 x 1`, `w` holds `K x C` row-major, `b` holds `K`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = linear_value(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, y))
    }

    /// Mean softmax cross entropy; `logits` is `N x K x 1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let loss = vjp::softmax_cross_entropy(l.data(), l.shape().c, labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            column(vec![loss])?,
        ))
    }

    /// `sum(x * r)` for a fixed probe `r`.
    pub fn dot(&mut self, x: Var, r: &FeatureMap<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != r.shape() {
            return Err(Error::structural("probe shape differs from value shape"));
        }
        let s: f64 = xv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Op::Dot {
                x,
                r: r.data().to_vec(),
            },
            column(vec![s])?,
        ))
    }

    pub fn half_squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = 0.5 * self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        Ok(self.push(Op::HalfSquaredNorm { x }, column(vec![s])?))
    }

    fn recompute(&self, i: usize) -> Result<Option<FeatureMap<f64>>> {
        let v = |x: &Var| &self.values[x.0];
        Ok(Some(match &self.ops[i] {
            Op::Leaf => return Ok(None),
            Op::Conv { x, w, spec, stride } => conv_value(v(x), v(w), spec, *stride)?,
            Op::Permute { x, perm } => engine::permute_channels(v(x), perm)?,
            Op::Relu { x } => engine::relu(v(x)),
            Op::Affine { x, scale, shift } => {
                engine::channel_affine(v(x), v(scale).data(), v(shift).data())?
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => batch_norm_value(v(x), v(gamma).data(), v(beta).data(), mean, inv_std)?,
            Op::Add { a, b } => engine::add(v(a), v(b))?,
            Op::Pool { x } => {
                let s = v(x).shape();
                FeatureMap::from_vec(Shape::new(s.n, s.c, 1, 1), engine::global_avg_pool(v(x)))?
            }
            Op::Linear { x, w, b } => linear_value(v(x), v(w), v(b))?,
            Op::CrossEntropy { logits, labels } => {
                let l = v(logits);
                column(vec![vjp::softmax_cross_entropy(
                    l.data(),
                    l.shape().c,
                    labels,
                )?])?
            }
            Op::Dot { x, r } => column(vec![v(x).data().iter().zip(r).map(|(a, b)| a * b).sum()])?,
            Op::HalfSquaredNorm { x } => {
                column(vec![0.5 * v(x).data().iter().map(|a| a * a).sum::<f64>()])?
            }
        }))
    }

    /// Recomputes every recorded op from its saved inputs; true when all
    /// outputs match bit for bit.
    pub fn replay(&self) -> Result<bool> {
        for i in 0..self.ops.len() {
            if let Some(y) = self.recompute(i)? {
                let same = y.shape() == self.values[i].shape()
                    && y.data()
                        .iter()
                        .zip(self.values[i].data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].shape().len() != 1 {
            return Err(Error::structural("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<FeatureMap<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(column(vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let v = |x: &Var| &self.values[x.0];
            let send = |grads: &mut Vec<Option<FeatureMap<f64>>>,
                        to: Var,
                        d: FeatureMap<f64>|
             -> Result<()> {
                grads[to.0] = Some(match grads[to.0].take() {
                    Some(prev) => prev.zip_map(&d, |a, b| a + b)?,
                    None => d,
                });
                Ok(())
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv { x, w, spec, stride } => {
                    let weights = FactorWeights::new(spec.clone(), v(w).data().to_vec())?;
                    let (dx, dw) = vjp::vjp_group_conv(v(x), &weights, &g, *stride)?;
                    send(&mut grads, *x, dx)?;
                    send(&mut grads, *w, column(dw.data().to_vec())?)?;
                }
                Op::Permute { x, perm } => {
                    send(&mut grads, *x, vjp::vjp_permute_channels(&g, perm)?)?
                }
                Op::Relu { x } => send(&mut grads, *x, vjp::vjp_relu(v(x), &g)?)?,
                Op::Affine { x, scale, shift } => {
                    let (dx, ds, db) = vjp::vjp_channel_affine(v(x), v(scale).data(), &g)?;
                    send(&mut grads, *x, dx)?;
                    send(&mut grads, *scale, column(ds)?)?;
                    send(&mut grads, *shift, column(db)?)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (dx, dg, db) =
                        vjp::vjp_batch_norm(v(x), v(gamma).data(), mean, inv_std, &g)?;
                    send(&mut grads, *x, dx)?;
                    send(&mut grads, *gamma, column(dg)?)?;
                    send(&mut grads, *beta, column(db)?)?;
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone())?;
                    send(&mut grads, *b, g.clone())?;
                }
                Op::Pool { x } => send(
                    &mut grads,
                    *x,
                    vjp::vjp_global_avg_pool(v(x).shape(), g.data())?,
                )?,
                Op::Linear { x, w, b } => {
                    let s = v(x).shape();
                    let classes = v(b).shape().len();
                    let (dx, dw, db) =
                        vjp::vjp_fully_connected(v(x).data(), s.n, v(w).data(), classes, g.data())?;
                    send(&mut grads, *x, FeatureMap::from_vec(s, dx)?)?;
                    send(&mut grads, *w, column(dw)?)?;
                    send(&mut grads, *b, column(db)?)?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let l = v(logits);
                    let d =
                        vjp::vjp_softmax_cross_entropy(l.data(), l.shape().c, labels, g.data()[0])?;
                    send(&mut grads, *logits, FeatureMap::from_vec(l.shape(), d)?)?;
                }
                Op::Dot { x, r } => {
                    let k = g.data()[0];
                    let d = FeatureMap::from_vec(v(x).shape(), r.iter().map(|a| a * k).collect())?;
                    send(&mut grads, *x, d)?;
                }
                Op::HalfSquaredNorm { x } => {
                    let k = g.data()[0];
                    send(&mut grads, *x, v(x).map(|a| a * k))?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn conv_value(
    x: &FeatureMap<f64>,
    w: &FeatureMap<f64>,
    spec: &GroupConvSpec,
    stride: usize,
) -> Result<FeatureMap<f64>> {
    let weights = FactorWeights::new(spec.clone(), w.data().to_vec())?;
    engine::group_conv(x, &weights, stride)
}

fn batch_norm_value(
    x: &FeatureMap<f64>,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> Result<FeatureMap<f64>> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::structural("normalization parameter length mismatch"));
    }
    let mut y = x.clone();
    for (idx, chunk) in y.data_mut().chunks_mut(s.plane()).enumerate() {
        let c = idx % s.c;
        chunk
            .iter_mut()
            .for_each(|v| *v = gamma[c] * ((*v - mean[c]) * inv_std[c]) + beta[c]);
    }
    Ok(y)
}

fn linear_value(
    x: &FeatureMap<f64>,
    w: &FeatureMap<f64>,
    b: &FeatureMap<f64>,
) -> Result<FeatureMap<f64>> {
    let s = x.shape();
    if s.plane() != 1 {
        return Err(Error::structural(
            "linear layers take pooled N x C x 1 x 1 input",
        ));
    }
    let classes = b.shape().len();
    let out = engine::fully_connected(x.data(), s.n, w.data(), b.data())?;
    FeatureMap::from_vec(Shape::new(s.n, classes, 1, 1), out)
}
