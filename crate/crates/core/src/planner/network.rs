//! Whole-network parameter and multiply-add accounting from stage recipes.
//!
//! Counting conventions: the stem is a dense `k x k` convolution followed by
//! a per-channel affine pair; every block contributes its factor weights
//! plus two affine parameters per normalized channel; the head is global
//! average pooling and a fully connected layer with bias. Skip connections
//! are identity (parameter free). Downsampling happens in the first block of
//! a strided stage, widening in that block's last factor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{flop_count, igcv2_star_depth_for, output_extent};
use crate::error::{Error, Result};
use crate::permutation::{build_chain, build_loose_chain, channel_shuffle, Regime};
use crate::structure::{FactorChain, GroupConvSpec, PermutationSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Xception,
    Igcv1,
    Igcv2,
    Igcv2Star,
    Igcv3,
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xception" => Ok(BlockKind::Xception),
            "igcv1" | "igc-v1" => Ok(BlockKind::Igcv1),
            "igcv2" | "igc-v2" => Ok(BlockKind::Igcv2),
            "igcv2*" | "igcv2-star" | "igcv2_star" => Ok(BlockKind::Igcv2Star),
            "igcv3" => Ok(BlockKind::Igcv3),
            other => Err(Error::usage(format!("unknown block kind `{other}`"))),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Xception => "xception",
            BlockKind::Igcv1 => "igcv1",
            BlockKind::Igcv2 => "igcv2",
            BlockKind::Igcv2Star => "igcv2*",
            BlockKind::Igcv3 => "igcv3",
        })
    }
}

/// Where per-channel affine (batch-norm) pairs sit inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinePlacement {
    /// One normalization + activation on the block output.
    BlockOutput,
    /// Normalization after every factor (nonlinear IGCV2 / IGCV3 blocks).
    EveryFactor,
}

fn default_stride() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

fn default_input_channels() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub width: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub kind: String,
    /// Channels per branch of the group convolutions (`K_s`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_width: Option<usize>,
    /// Explicit pointwise branch widths for IGCV2 blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_widths: Option<Vec<usize>>,
    /// Number of factors `L` (IGCV2) or `L*` (IGCV2*).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// IGCV3 expansion factor `t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<usize>,
    /// Branch counts of the two pointwise group convolutions (IGCV1/IGCV3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2: Option<usize>,
    #[serde(default)]
    pub nonlinear: bool,
}

impl StageSpec {
    pub fn new(kind: BlockKind, width: usize, blocks: usize, stride: usize) -> Self {
        StageSpec {
            width,
            blocks,
            kind: kind.to_string(),
            branch_width: None,
            branch_widths: None,
            depth: None,
            stride,
            expansion: None,
            g1: None,
            g2: None,
            nonlinear: false,
        }
    }

    pub fn with_branch_width(mut self, k: usize) -> Self {
        self.branch_width = Some(k);
        self
    }

    pub fn block_kind(&self) -> Result<BlockKind> {
        self.kind.parse()
    }

    pub fn affine_placement(&self) -> Result<AffinePlacement> {
        Ok(match self.block_kind()? {
            BlockKind::Igcv3 => AffinePlacement::EveryFactor,
            _ if self.nonlinear => AffinePlacement::EveryFactor,
            _ => AffinePlacement::BlockOutput,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecipe {
    pub name: String,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    /// Identity skip around each block whose shapes allow it.
    #[serde(default = "default_true")]
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCount {
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub index: usize,
    pub kind: String,
    pub width: usize,
    pub blocks: usize,
    pub output_size: [usize; 2],
    pub weight_params: u64,
    pub affine_params: u64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkReport {
    pub name: String,
    pub input_size: [usize; 2],
    pub stem: ItemCount,
    pub stages: Vec<StageCount>,
    pub head: ItemCount,
    pub total_params: u64,
    pub total_flops: u64,
}

/// `L* = ceil(log_K(x)) + 1` for the recipe's first-stage width `x`.
pub fn igcv2_star_depth(recipe: &NetworkRecipe) -> Result<Option<usize>> {
    let Some(stage) = recipe
        .stages
        .iter()
        .find(|s| s.block_kind().ok() == Some(BlockKind::Igcv2Star))
    else {
        return Ok(None);
    };
    let first = recipe.stages.first().map_or(stage.width, |s| s.width);
    igcv2_star_depth_for(first, stage.branch_width.unwrap_or(8)).map(Some)
}

/// Group convolution with `branches` branches, loose when the split is uneven.
fn group_by_count(
    c_in: usize,
    c_out: usize,
    branches: usize,
    taps: usize,
) -> Result<GroupConvSpec> {
    if branches == 0 {
        return Err(Error::usage("branch count must be positive"));
    }
    if c_in.is_multiple_of(branches) && c_out.is_multiple_of(branches) {
        GroupConvSpec::new(c_in, c_out, branches, taps)
    } else {
        GroupConvSpec::loose(
            c_in,
            c_out,
            c_in.div_ceil(branches),
            c_out.div_ceil(branches),
            taps,
        )
    }
}

/// Group convolution with input branch width `k`; the output side keeps the
/// same branch count.
fn group_by_width(c_in: usize, c_out: usize, k: usize, taps: usize) -> Result<GroupConvSpec> {
    group_by_count(c_in, c_out, c_in.div_ceil(k.clamp(1, c_in)), taps)
}

fn widen_last_factor(chain: FactorChain, c_out: usize) -> Result<FactorChain> {
    let mut factors = chain.factors().to_vec();
    let last = factors.pop().expect("nonempty chain");
    if last.channels_out == c_out {
        return Ok(chain);
    }
    factors.push(group_by_count(
        last.channels_in,
        c_out,
        last.branches,
        last.spatial_taps,
    )?);
    FactorChain::new(factors, chain.interleaves().to_vec(), None)
}

fn igcv2_chain(c_in: usize, c_out: usize, pointwise: &[usize]) -> Result<FactorChain> {
    let mut widths = vec![1];
    widths.extend_from_slice(pointwise);
    let exact = pointwise.iter().try_fold(1usize, |a, &k| a.checked_mul(k)) == Some(c_in);
    let chain = if exact {
        build_chain(c_in, 9, &widths, Regime::Separated)?
    } else {
        let k = pointwise[0];
        if pointwise.iter().any(|&w| w != k) {
            return Err(Error::usage(format!(
                "pointwise widths {pointwise:?} do not multiply to {c_in}; \
                 loose blocks need a uniform branch width"
            )));
        }
        build_loose_chain(c_in, 9, k, pointwise.len() + 1)?.0
    };
    widen_last_factor(chain, c_out)
}

/// Factor chain of one block mapping `c_in -> c_out` channels.
pub fn block_chain(
    stage: &StageSpec,
    c_in: usize,
    c_out: usize,
    star_depth: Option<usize>,
) -> Result<FactorChain> {
    match stage.block_kind()? {
        BlockKind::Xception => FactorChain::without_interleaves(vec![
            GroupConvSpec::depthwise(c_in, 9)?,
            GroupConvSpec::dense(c_in, c_out, 1)?,
        ]),
        BlockKind::Igcv1 => {
            let primary = group_by_width(c_in, c_in, stage.branch_width.unwrap_or(2), 9)?;
            let secondary = group_by_count(c_in, c_out, stage.g2.unwrap_or(2), 1)?;
            let shuffle = channel_shuffle(c_in, primary.branches)?;
            FactorChain::new(vec![primary, secondary], vec![shuffle], None)
        }
        BlockKind::Igcv2 => {
            let pointwise = match (&stage.branch_widths, stage.branch_width) {
                (Some(ws), _) if !ws.is_empty() => ws.clone(),
                (_, Some(k)) => vec![k; stage.depth.unwrap_or(3).max(2) - 1],
                _ => {
                    return Err(Error::usage(
                        "igcv2 stages need `branch_width` or `branch_widths`",
                    ))
                }
            };
            igcv2_chain(c_in, c_out, &pointwise)
        }
        BlockKind::Igcv2Star => {
            let k = stage.branch_width.unwrap_or(8);
            let depth = match stage.depth.or(star_depth) {
                Some(d) => d,
                None => igcv2_star_depth_for(c_in, k)?,
            };
            igcv2_chain(c_in, c_out, &vec![k; depth.max(2) - 1])
        }
        BlockKind::Igcv3 => igcv3_chain(
            c_in,
            c_out,
            stage.expansion.unwrap_or(6),
            stage.g1.unwrap_or(2),
            stage.g2.unwrap_or(2),
        ),
    }
}

/// Bottleneck block: group 1x1 expansion to `t * C_in` (`g1` branches),
/// channel-wise 3x3, shuffle, group 1x1 projection (`g2` branches).
pub fn igcv3_chain(
    c_in: usize,
    c_out: usize,
    expansion: usize,
    g1: usize,
    g2: usize,
) -> Result<FactorChain> {
    if expansion == 0 {
        return Err(Error::usage("expansion factor must be at least 1"));
    }
    let hidden = expansion * c_in;
    let expand = group_by_count(c_in, hidden, g1, 1)?;
    let depthwise = GroupConvSpec::depthwise(hidden, 9)?;
    let project = group_by_count(hidden, c_out, g2, 1)?;
    FactorChain::new(
        vec![expand, depthwise, project],
        vec![
            PermutationSpec::identity(hidden),
            channel_shuffle(hidden, g1)?,
        ],
        None,
    )
}

impl NetworkRecipe {
    pub fn from_json(text: &str) -> Result<Self> {
        let recipe: NetworkRecipe = serde_json::from_str(text)?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem.width == 0 || self.head.classes == 0 {
            return Err(Error::usage("stem, input and head sizes must be positive"));
        }
        if self.stem.stride == 0 || self.stem.kernel.is_multiple_of(2) {
            return Err(Error::usage("stem needs stride >= 1 and an odd kernel"));
        }
        let star = igcv2_star_depth(self)?;
        for (i, stage) in self.stages.iter().enumerate() {
            let kind = stage.block_kind()?;
            if stage.width == 0 || stage.stride == 0 {
                return Err(Error::usage(format!(
                    "stage {i}: width and stride must be positive"
                )));
            }
            if kind == BlockKind::Igcv2Star {
                if let (Some(d), Some(expected)) = (stage.depth, star) {
                    if d != expected {
                        return Err(Error::usage(format!(
                            "stage {i}: IGCV2* depth {d} differs from L* = {expected}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The CIFAR networks of the architecture table: stages of width
    /// `x, 2x, 4x` with `B = (depth - 2) / 3` blocks each, downsampling at
    /// the second and third stage.
    pub fn cifar(
        kind: BlockKind,
        x: usize,
        depth: usize,
        classes: usize,
        branch_width: Option<usize>,
    ) -> Result<Self> {
        if depth < 2 || !(depth - 2).is_multiple_of(3) {
            return Err(Error::usage(format!(
                "depth {depth} is not of the form 3B + 2"
            )));
        }
        let blocks = (depth - 2) / 3;
        let stem_width = if kind == BlockKind::Igcv2Star { 64 } else { x };
        let stages = [(x, 1), (2 * x, 2), (4 * x, 2)]
            .into_iter()
            .map(|(w, s)| {
                let stage = StageSpec::new(kind, w, blocks, s);
                match branch_width {
                    Some(k) => stage.with_branch_width(k),
                    None => stage,
                }
            })
            .collect();
        let recipe = NetworkRecipe {
            name: format!("{kind}-C{x}-D{depth}"),
            input_channels: 3,
            stem: StemSpec {
                width: stem_width,
                kernel: 3,
                stride: 1,
            },
            stages,
            head: HeadSpec { classes },
            residual: true,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    /// Stem, one stage of `blocks` blocks at constant width, pooling and a
    /// classifier; no downsampling.
    pub fn plain(stage: StageSpec, classes: usize, input_channels: usize) -> Self {
        NetworkRecipe {
            name: format!("{}-C{}-plain", stage.kind, stage.width),
            input_channels,
            stem: StemSpec {
                width: stage.width,
                kernel: 3,
                stride: 1,
            },
            stages: vec![stage],
            head: HeadSpec { classes },
            residual: false,
        }
    }

    /// Per-block chains in execution order as `(stage index, chain, stride)`.
    pub fn block_chains(&self) -> Result<Vec<(usize, FactorChain, usize)>> {
        self.validate()?;
        let star = igcv2_star_depth(self)?;
        let mut c_in = self.stem.width;
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                out.push((i, block_chain(stage, c_in, stage.width, star)?, stride));
                c_in = stage.width;
            }
        }
        Ok(out)
    }

    /// Itemized parameter and multiply-add totals for an input of `height x width`.
    pub fn count(&self, height: usize, width: usize) -> Result<NetworkReport> {
        if height == 0 || width == 0 {
            return Err(Error::usage("input size must be positive"));
        }
        self.validate()?;
        let star = igcv2_star_depth(self)?;
        let (mut h, mut w) = (
            output_extent(height, self.stem.stride),
            output_extent(width, self.stem.stride),
        );
        let taps = (self.stem.kernel * self.stem.kernel) as u64;
        let stem_weights = self.input_channels as u64 * taps * self.stem.width as u64;
        let stem = ItemCount {
            params: stem_weights + 2 * self.stem.width as u64,
            flops: stem_weights * (h * w) as u64,
        };

        let mut c_in = self.stem.width;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (index, stage) in self.stages.iter().enumerate() {
            let placement = stage.affine_placement()?;
            let (mut weight_params, mut affine_params, mut flops) = (0, 0, 0);
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let chain = block_chain(stage, c_in, stage.width, star)?;
                weight_params += chain.nonzeros();
                affine_params += 2 * match placement {
                    AffinePlacement::BlockOutput => chain.channels_out() as u64,
                    AffinePlacement::EveryFactor => chain
                        .factors()
                        .iter()
                        .map(|f| f.channels_out as u64)
                        .sum::<u64>(),
                };
                flops += flop_count(&chain, h, w, stride)?;
                h = output_extent(h, stride);
                w = output_extent(w, stride);
                c_in = stage.width;
            }
            stages.push(StageCount {
                index,
                kind: stage.kind.clone(),
                width: stage.width,
                blocks: stage.blocks,
                output_size: [h, w],
                weight_params,
                affine_params,
                params: weight_params + affine_params,
                flops,
            });
        }

        let fc = c_in as u64 * self.head.classes as u64;
        let head = ItemCount {
            params: fc + self.head.classes as u64,
            flops: fc,
        };
        let total_params = stem.params + stages.iter().map(|s| s.params).sum::<u64>() + head.params;
        let total_flops = stem.flops + stages.iter().map(|s| s.flops).sum::<u64>() + head.flops;
        Ok(NetworkReport {
            name: self.name.clone(),
            input_size: [height, width],
            stem,
            stages,
            head,
            total_params,
            total_flops,
        })
    }
}
