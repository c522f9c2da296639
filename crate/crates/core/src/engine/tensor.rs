use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::{FactorChain, GroupConvSpec};

/// Element type of feature maps and kernels.
pub trait Scalar: Float + Sum + Default + Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::from_f64(z * std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Batch of feature maps, laid out batch, channel, row, column.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(shape: Shape) -> Self {
        FeatureMap {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::structural(format!(
                "empty feature map shape {shape:?}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::structural(format!(
                "{} elements for shape {shape:?}",
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        FeatureMap { shape, data }
    }

    pub fn random<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| gaussian(rng, 1.0)).collect();
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.c
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h x w` plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::structural(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(FeatureMap {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max |a - b| / max(max |b|, tiny)`.
    pub fn max_relative_error(&self, reference: &Self) -> f64 {
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()));
        diff / reference.max_abs().as_f64().max(f64::MIN_POSITIVE)
    }
}

/// Weights of one factor: for each branch a `K_out x (K_in * S)` row-major
/// block, column index `input * S + tap`, branches concatenated in order.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorWeights<T = f64> {
    spec: GroupConvSpec,
    data: Vec<T>,
    offsets: Vec<usize>,
}

impl<T: Scalar> FactorWeights<T> {
    pub fn new(spec: GroupConvSpec, data: Vec<T>) -> Result<Self> {
        spec.validate()?;
        let offsets = block_offsets(&spec);
        let expected = *offsets.last().expect("at least one offset");
        if data.len() != expected {
            return Err(Error::structural(format!(
                "factor needs {expected} weights, got {}",
                data.len()
            )));
        }
        Ok(FactorWeights {
            spec,
            data,
            offsets,
        })
    }

    pub fn from_fn(
        spec: GroupConvSpec,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::new();
        for g in 0..spec.branches {
            for r in 0..spec.branch_outputs(g).len() {
                for c in 0..spec.branch_inputs(g).len() {
                    for s in 0..spec.spatial_taps {
                        data.push(f(g, r, c, s));
                    }
                }
            }
        }
        Self::new(spec, data)
    }

    pub fn zeros(spec: GroupConvSpec) -> Result<Self> {
        Self::from_fn(spec, |_, _, _, _| T::zero())
    }

    pub fn random<R: Rng + ?Sized>(spec: GroupConvSpec, rng: &mut R, std: f64) -> Result<Self> {
        Self::from_fn(spec, |_, _, _, _| gaussian(rng, std))
    }

    /// Center-tap identity on square branches (`K_in == K_out`).
    pub fn identity(spec: GroupConvSpec) -> Result<Self> {
        let center = spec.spatial_taps / 2;
        Self::from_fn(spec, |_, r, c, s| {
            if r == c && s == center {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn spec(&self) -> &GroupConvSpec {
        &self.spec
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major block of branch `g`.
    pub fn block(&self, g: usize) -> &[T] {
        &self.data[self.offsets[g]..self.offsets[g + 1]]
    }

    /// Weight from branch-local input `c` to branch-local output `r` at tap `s`.
    pub fn weight(&self, g: usize, r: usize, c: usize, s: usize) -> T {
        let k_in = self.spec.branch_inputs(g).len();
        self.block(g)[(r * k_in + c) * self.spec.spatial_taps + s]
    }
}

fn block_offsets(spec: &GroupConvSpec) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(spec.branches + 1);
    let mut acc = 0;
    offsets.push(0);
    for g in 0..spec.branches {
        acc += spec.branch_inputs(g).len() * spec.branch_outputs(g).len() * spec.spatial_taps;
        offsets.push(acc);
    }
    offsets
}

/// Inference-time batch normalization: `y = scale * x + shift` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = f64> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn identity(channels: usize) -> Self {
        Affine {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scale.len() != channels || self.shift.len() != channels {
            return Err(Error::structural(format!(
                "affine has {}/{} entries for {channels} channels",
                self.scale.len(),
                self.shift.len()
            )));
        }
        if self.scale.iter().chain(&self.shift).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters".into()));
        }
        Ok(())
    }
}

/// Weights for every factor of a chain plus optional per-factor affine pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockKernel<T = f64> {
    pub factors: Vec<FactorWeights<T>>,
    pub affine: Option<Vec<Affine<T>>>,
}

impl<T: Scalar> BlockKernel<T> {
    pub fn new(factors: Vec<FactorWeights<T>>) -> Self {
        BlockKernel {
            factors,
            affine: None,
        }
    }

    pub fn with_affine(mut self, affine: Vec<Affine<T>>) -> Self {
        self.affine = Some(affine);
        self
    }

    /// Gaussian weights with variance `2 / fan_in` per factor.
    pub fn random<R: Rng + ?Sized>(chain: &FactorChain, rng: &mut R) -> Result<Self> {
        let factors = chain
            .factors()
            .iter()
            .map(|f| {
                let fan_in = (f.branch_width_in * f.spatial_taps) as f64;
                FactorWeights::random(f.clone(), rng, (2.0 / fan_in).sqrt())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockKernel::new(factors))
    }

    pub fn identity(chain: &FactorChain) -> Result<Self> {
        let factors = chain
            .factors()
            .iter()
            .map(|f| FactorWeights::identity(f.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockKernel::new(factors))
    }

    pub fn validate(&self, chain: &FactorChain) -> Result<()> {
        if self.factors.len() != chain.depth() {
            return Err(Error::structural(format!(
                "{} weight sets for a chain of depth {}",
                self.factors.len(),
                chain.depth()
            )));
        }
        for (l, (w, spec)) in self.factors.iter().zip(chain.factors()).enumerate() {
            if w.spec() != spec {
                return Err(Error::structural(format!(
                    "weights of factor {} were built for {:?}, chain has {spec:?}",
                    l + 1,
                    w.spec()
                )));
            }
        }
        if let Some(affine) = &self.affine {
            if affine.len() != chain.depth() {
                return Err(Error::structural("one affine pair per factor is required"));
            }
            for (a, spec) in affine.iter().zip(chain.factors()) {
                a.validate(spec.channels_out)?;
            }
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.factors.iter().map(|f| f.data().len()).sum()
    }
}

/// Dense kernel `C_out x C_in x S`, element `(o, i, s)` at `(o * C_in + i) * S + s`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseKernel<T = f64> {
    pub channels_out: usize,
    pub channels_in: usize,
    pub taps: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseKernel<T> {
    pub fn zeros(channels_out: usize, channels_in: usize, taps: usize) -> Self {
        DenseKernel {
            channels_out,
            channels_in,
            taps,
            data: vec![T::zero(); channels_out * channels_in * taps],
        }
    }

    pub fn identity(channels: usize, taps: usize) -> Self {
        let mut k = Self::zeros(channels, channels, taps);
        for c in 0..channels {
            k.set(c, c, taps / 2, T::one());
        }
        k
    }

    pub fn random<R: Rng + ?Sized>(
        channels_out: usize,
        channels_in: usize,
        taps: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / (channels_in * taps) as f64).sqrt();
        DenseKernel {
            channels_out,
            channels_in,
            taps,
            data: (0..channels_out * channels_in * taps)
                .map(|_| gaussian(rng, std))
                .collect(),
        }
    }

    pub fn get(&self, o: usize, i: usize, s: usize) -> T {
        self.data[(o * self.channels_in + i) * self.taps + s]
    }

    pub fn set(&mut self, o: usize, i: usize, s: usize, v: T) {
        self.data[(o * self.channels_in + i) * self.taps + s] = v;
    }

    pub fn validate(&self) -> Result<()> {
        crate::structure::kernel_side(self.taps)?;
        if self.data.len() != self.channels_out * self.channels_in * self.taps {
            return Err(Error::structural("dense kernel data length mismatch"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense kernel entries".into()));
        }
        Ok(())
    }
}
