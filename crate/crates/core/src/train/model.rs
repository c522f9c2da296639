use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment, Dataset};
use super::sgd::{sgd_step, ParamState, TrainConfig};
use super::tape::{column, BatchStats, Tape, Var, BATCH_NORM_EPS};
use crate::engine::io::encode_block_kernel;
use crate::engine::{Affine, BlockKernel, FactorWeights, FeatureMap};
use crate::error::{Error, Result};
use crate::planner::{AffinePlacement, BlockKind, NetworkRecipe};
use crate::structure::{FactorChain, GroupConvSpec, PermutationSpec};

const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Unit {
    spec: GroupConvSpec,
    weight: usize,
    stride: usize,
    norm: Option<Norm>,
    relu: bool,
    perm: Option<PermutationSpec>,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    chain: FactorChain,
    units: Vec<Unit>,
    skip: bool,
}

/// Trainable network built from a recipe: stem, blocks, pooling, classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    recipe: NetworkRecipe,
    params: Vec<ParamState>,
    stem: Unit,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<EpochMetrics>,
}

struct Builder<'a> {
    params: &'a mut Vec<ParamState>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, values: Vec<f64>, decay: bool) -> usize {
        self.params.push(ParamState::new(values, decay));
        self.params.len() - 1
    }

    fn unit(
        &mut self,
        spec: GroupConvSpec,
        stride: usize,
        norm: bool,
        relu: bool,
        perm: Option<PermutationSpec>,
    ) -> Result<Unit> {
        let fan_in = (spec.branch_width_in * spec.spatial_taps) as f64;
        let w = FactorWeights::<f64>::random(spec.clone(), self.rng, (2.0 / fan_in).sqrt())?;
        let weight = self.add(w.data().to_vec(), true);
        let norm = norm.then(|| {
            let c = spec.channels_out;
            Norm {
                gamma: self.add(vec![1.0; c], false),
                beta: self.add(vec![0.0; c], false),
                running_mean: vec![0.0; c],
                running_var: vec![1.0; c],
            }
        });
        Ok(Unit {
            spec,
            weight,
            stride,
            norm,
            relu,
            perm,
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Correct predictions among `N x K` logits.
pub fn count_correct(logits: &FeatureMap<f64>, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

impl Network {
    /// Conv weights are Gaussian with variance `2 / fan_in`, normalization
    /// starts at unit scale, the classifier at zero.
    pub fn new(recipe: &NetworkRecipe, seed: u64) -> Result<Self> {
        let chains = recipe.block_chains()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut b = Builder {
            params: &mut params,
            rng: &mut rng,
        };
        let taps = recipe.stem.kernel * recipe.stem.kernel;
        let stem_spec = GroupConvSpec::dense(recipe.input_channels, recipe.stem.width, taps)?;
        let stem = b.unit(stem_spec, recipe.stem.stride, true, true, None)?;

        let mut blocks = Vec::with_capacity(chains.len());
        for (stage, chain, stride) in chains {
            let spec = &recipe.stages[stage];
            let kind = spec.block_kind()?;
            let placement = spec.affine_placement()?;
            let last = chain.depth() - 1;
            let strided = chain.spatial_factor().unwrap_or(0);
            let mut units = Vec::with_capacity(chain.depth());
            for (l, f) in chain.factors().iter().enumerate() {
                let (norm, relu) = match placement {
                    AffinePlacement::EveryFactor if kind == BlockKind::Igcv3 => (true, l < 2),
                    AffinePlacement::EveryFactor => (true, l == 0 || l == last),
                    AffinePlacement::BlockOutput => (l == last, l == last),
                };
                units.push(b.unit(
                    f.clone(),
                    if l == strided { stride } else { 1 },
                    norm,
                    relu,
                    chain.permutation_after(l).cloned(),
                )?);
            }
            let skip =
                recipe.residual && stride == 1 && chain.channels_in() == chain.channels_out();
            blocks.push(Block { chain, units, skip });
        }
        let width = blocks
            .last()
            .map_or(recipe.stem.width, |b| b.chain.channels_out());
        let classes = recipe.head.classes;
        let fc_weight = b.add(vec![0.0; classes * width], true);
        let fc_bias = b.add(vec![0.0; classes], true);
        Ok(Network {
            recipe: recipe.clone(),
            params,
            stem,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn recipe(&self) -> &NetworkRecipe {
        &self.recipe
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn params(&self) -> &[ParamState] {
        &self.params
    }

    fn apply_unit(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        unit: &Unit,
        x: Var,
        train: bool,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let mut h = tape.conv(x, vars[unit.weight], &unit.spec, unit.stride)?;
        if let Some(n) = &unit.norm {
            h = if train {
                let (y, s) = tape.batch_norm(h, vars[n.gamma], vars[n.beta])?;
                stats.push(s);
                y
            } else {
                let a = self.folded(n);
                let scale = tape.leaf(column(a.scale)?);
                let shift = tape.leaf(column(a.shift)?);
                tape.affine(h, scale, shift)?
            };
        }
        if unit.relu {
            h = tape.relu(h);
        }
        if let Some(p) = &unit.perm {
            h = tape.permute(h, p)?;
        }
        Ok(h)
    }

    /// Inference affine pair of a normalization from its running statistics.
    fn folded(&self, n: &Norm) -> Affine<f64> {
        let gamma = &self.params[n.gamma].values;
        let beta = &self.params[n.beta].values;
        let scale: Vec<f64> = gamma
            .iter()
            .zip(&n.running_var)
            .map(|(g, v)| g / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let shift = beta
            .iter()
            .zip(&n.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Affine { scale, shift }
    }

    /// Records the forward pass; returns the parameter vars, the logits and
    /// the batch statistics of every normalization in order (train mode only).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        train: bool,
    ) -> Result<(Vec<Var>, Var, Vec<BatchStats>)> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| column(p.values.clone()).map(|v| tape.param(v)))
            .collect::<Result<_>>()?;
        let mut stats = Vec::new();
        let mut h = self.apply_unit(tape, &vars, &self.stem, x, train, &mut stats)?;
        for block in &self.blocks {
            let input = h;
            for unit in &block.units {
                h = self.apply_unit(tape, &vars, unit, h, train, &mut stats)?;
            }
            if block.skip {
                h = tape.add(h, input)?;
            }
        }
        let pooled = tape.pool(h)?;
        let logits = tape.linear(pooled, vars[self.fc_weight], vars[self.fc_bias])?;
        Ok((vars, logits, stats))
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut Norm> {
        std::iter::once(&mut self.stem)
            .chain(self.blocks.iter_mut().flat_map(|b| b.units.iter_mut()))
            .filter_map(|u| u.norm.as_mut())
    }

    fn update_running(&mut self, stats: &[BatchStats]) {
        for (n, s) in self.norms_mut().zip(stats) {
            for (r, &m) in n.running_mean.iter_mut().zip(&s.mean) {
                *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * m;
            }
            for (r, &v) in n.running_var.iter_mut().zip(&s.var) {
                *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * v;
            }
        }
    }

    /// Mean loss and accuracy in inference mode.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
        let (mut loss, mut correct) = (0.0, 0);
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(batch_size.max(1)) {
            let (x, labels) = data.batch(chunk, |_, img| img.to_vec())?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (_, logits, _) = self.forward(&mut tape, xv, false)?;
            let l = tape.cross_entropy(logits, &labels)?;
            loss += tape.value(l).data()[0] * chunk.len() as f64;
            correct += count_correct(tape.value(logits), &labels);
        }
        let n = data.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Per-layer kernels with normalization folded into affine pairs:
    /// `stem`, `block_NN`, then `head` (classifier as a 1x1 dense factor,
    /// bias as shift).
    pub fn export_kernels(&self) -> Result<Vec<(String, FactorChain, BlockKernel<f64>)>> {
        let unit_kernel = |units: &[&Unit]| -> Result<BlockKernel<f64>> {
            let factors = units
                .iter()
                .map(|u| FactorWeights::new(u.spec.clone(), self.params[u.weight].values.clone()))
                .collect::<Result<Vec<_>>>()?;
            let affine = units
                .iter()
                .map(|u| match &u.norm {
                    Some(n) => self.folded(n),
                    None => Affine::identity(u.spec.channels_out),
                })
                .collect();
            Ok(BlockKernel::new(factors).with_affine(affine))
        };
        let mut out = Vec::new();
        out.push((
            "stem".to_string(),
            FactorChain::single(self.stem.spec.clone())?,
            unit_kernel(&[&self.stem])?,
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            let units: Vec<&Unit> = b.units.iter().collect();
            out.push((
                format!("block_{i:02}"),
                b.chain.clone(),
                unit_kernel(&units)?,
            ));
        }
        let classes = self.params[self.fc_bias].values.len();
        let width = self.params[self.fc_weight].values.len() / classes;
        let spec = GroupConvSpec::dense(width, classes, 1)?;
        let head = BlockKernel::new(vec![FactorWeights::new(
            spec.clone(),
            self.params[self.fc_weight].values.clone(),
        )?])
        .with_affine(vec![Affine {
            scale: vec![1.0; classes],
            shift: self.params[self.fc_bias].values.clone(),
        }]);
        out.push(("head".to_string(), FactorChain::single(spec)?, head));
        Ok(out)
    }

    /// Writes one kernel manifest per layer plus `index.json`.
    pub fn save_checkpoint(&self, dir: &Path, epoch: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (name, chain, kernel) in self.export_kernels()? {
            let file = format!("{name}.kernel");
            fs::write(dir.join(&file), encode_block_kernel(&chain, &kernel)?)?;
            files.push(file);
        }
        let index = CheckpointIndex {
            format: "igc-checkpoint".into(),
            epoch,
            recipe: self.recipe.clone(),
            files,
        };
        fs::write(
            dir.join("index.json"),
            serde_json::to_string_pretty(&index)?,
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub epoch: usize,
    pub recipe: NetworkRecipe,
    pub files: Vec<String>,
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains with SGD, reporting a record before the first epoch (`epoch` 0)
/// and after each epoch. A checkpoint is written after every finite epoch;
/// a non-finite loss or gradient stops training with
/// [`Error::Diverged`].
pub fn train(
    recipe: &NetworkRecipe,
    data: &Dataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training data is empty"));
    }
    if data.channels != recipe.input_channels || data.classes != recipe.head.classes {
        return Err(Error::structural(format!(
            "data has {} channels / {} classes, recipe expects {} / {}",
            data.channels, data.classes, recipe.input_channels, recipe.head.classes
        )));
    }
    let n_eval = (data.len() as f64 * config.eval_fraction).round() as usize;
    let (train_set, eval_set) = data.split_tail(n_eval);
    if train_set.is_empty() {
        return Err(Error::usage("eval fraction leaves no training samples"));
    }
    let eval_acc = |net: &Network| -> Result<Option<f64>> {
        if eval_set.is_empty() {
            Ok(None)
        } else {
            Ok(Some(net.evaluate(&eval_set, config.batch_size)?.1))
        }
    };

    let mut net = Network::new(recipe, config.seed)?;
    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let (loss0, acc0) = net.evaluate(&train_set, config.batch_size)?;
    let first = EpochMetrics {
        epoch: 0,
        lr: config.learning_rate_at(0),
        train_loss: loss0,
        train_acc: acc0,
        eval_acc: eval_acc(&net)?,
    };
    on_epoch(&first)?;
    metrics.push(first);

    let mut last_good = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for e in 0..config.epochs {
        let lr = config.learning_rate_at(e);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + e as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let diverged = || Error::Diverged {
            epoch: e + 1,
            last_good_epoch: last_good,
        };
        for batch in order.chunks(config.batch_size) {
            let (x, labels) = train_set.batch(batch, |i, img| {
                if config.augment {
                    augment(
                        img,
                        train_set.channels,
                        train_set.height,
                        train_set.width,
                        sample_seed(config.seed, e, i),
                    )
                } else {
                    img.to_vec()
                }
            })?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (vars, logits, stats) = net.forward(&mut tape, xv, true)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(diverged());
            }
            loss_sum += value * batch.len() as f64;
            correct += count_correct(tape.value(logits), &labels);
            let grads = tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| grads.dense(v, tape.value(v).shape()).into_vec())
                .collect();
            match sgd_step(&mut net.params, &grads, config, e) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => return Err(diverged()),
                Err(other) => return Err(other),
            }
            net.update_running(&stats);
        }
        if net
            .params
            .iter()
            .any(|p| p.values.iter().any(|v| !v.is_finite()))
        {
            return Err(diverged());
        }
        let n = train_set.len() as f64;
        let m = EpochMetrics {
            epoch: e + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            eval_acc: eval_acc(&net)?,
        };
        on_epoch(&m)?;
        metrics.push(m);
        if let Some(dir) = checkpoint_dir {
            net.save_checkpoint(dir, e + 1)?;
        }
        last_good = e + 1;
        if config
            .target_accuracy
            .is_some_and(|t| metrics[e + 1].train_acc >= t)
        {
            break;
        }
    }
    Ok(TrainOutcome {
        network: net,
        metrics,
    })
}
