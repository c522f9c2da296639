//! Sparsity structure of group-convolution factor chains.
//!
//! A chain `y = P_L W_L ... P_1 W_1 x` is described purely by its branch
//! layout and interleaving permutations. Density and path uniqueness of the
//! composed kernel are decided by exact integer path counting over
//! [`StructureMask`]s, never by floating point.

mod document;
mod mask;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use document::{ChainDocument, FactorDocument, CHAIN_DOCUMENT_VERSION};
pub use mask::StructureMask;

/// How strictly a chain is held to the complementary condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Strict,
    Loose,
}

/// One block-diagonal factor: `branches` independent convolutions, branch `g`
/// reading input channels `[g*K_in, (g+1)*K_in)` and writing output channels
/// `[g*K_out, (g+1)*K_out)`. In a loose spec the last branch may be short.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupConvSpec {
    pub channels_in: usize,
    pub channels_out: usize,
    pub branch_width_in: usize,
    pub branch_width_out: usize,
    pub spatial_taps: usize,
    pub branches: usize,
}

impl GroupConvSpec {
    /// Strict spec with `branches` equal branches.
    pub fn new(
        channels_in: usize,
        channels_out: usize,
        branches: usize,
        spatial_taps: usize,
    ) -> Result<Self> {
        if branches == 0
            || !channels_in.is_multiple_of(branches)
            || !channels_out.is_multiple_of(branches)
        {
            return Err(Error::structural(format!(
                "{branches} branches do not divide {channels_in} -> {channels_out} channels"
            )));
        }
        let spec = GroupConvSpec {
            channels_in,
            channels_out,
            branch_width_in: channels_in / branches,
            branch_width_out: channels_out / branches,
            spatial_taps,
            branches,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Loose spec: `ceil(C_in / K_in)` branches, the last possibly narrower.
    pub fn loose(
        channels_in: usize,
        channels_out: usize,
        branch_width_in: usize,
        branch_width_out: usize,
        spatial_taps: usize,
    ) -> Result<Self> {
        if branch_width_in == 0 || branch_width_out == 0 {
            return Err(Error::structural("branch width must be positive"));
        }
        let spec = GroupConvSpec {
            channels_in,
            channels_out,
            branch_width_in,
            branch_width_out,
            spatial_taps,
            branches: channels_in.div_ceil(branch_width_in),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square pointwise group convolution with branch width `k`.
    pub fn pointwise(channels: usize, branch_width: usize) -> Result<Self> {
        if branch_width == 0 || !channels.is_multiple_of(branch_width) {
            return Err(Error::structural(format!(
                "branch width {branch_width} does not divide {channels} channels"
            )));
        }
        Self::new(channels, channels, channels / branch_width, 1)
    }

    /// Channel-wise spatial convolution.
    pub fn depthwise(channels: usize, spatial_taps: usize) -> Result<Self> {
        Self::new(channels, channels, channels, spatial_taps)
    }

    /// Ordinary (single-branch) convolution.
    pub fn dense(channels_in: usize, channels_out: usize, spatial_taps: usize) -> Result<Self> {
        Self::new(channels_in, channels_out, 1, spatial_taps)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.channels_in,
            self.channels_out,
            self.branch_width_in,
            self.branch_width_out,
            self.spatial_taps,
            self.branches,
        ];
        if counts.contains(&0) {
            return Err(Error::structural(format!("zero count in {self:?}")));
        }
        if self.channels_in.div_ceil(self.branch_width_in) != self.branches
            || self.channels_out.div_ceil(self.branch_width_out) != self.branches
        {
            return Err(Error::structural(format!(
                "branch layout mismatch: G={} K_in={} K_out={} for {} -> {} channels",
                self.branches,
                self.branch_width_in,
                self.branch_width_out,
                self.channels_in,
                self.channels_out
            )));
        }
        kernel_side(self.spatial_taps)?;
        Ok(())
    }

    /// Every branch holds exactly `K_in` inputs and `K_out` outputs.
    pub fn is_strict(&self) -> bool {
        self.branches * self.branch_width_in == self.channels_in
            && self.branches * self.branch_width_out == self.channels_out
    }

    pub fn is_spatial(&self) -> bool {
        self.spatial_taps > 1
    }

    pub fn branch_inputs(&self, g: usize) -> Range<usize> {
        let start = g * self.branch_width_in;
        start..(start + self.branch_width_in).min(self.channels_in)
    }

    pub fn branch_outputs(&self, g: usize) -> Range<usize> {
        let start = g * self.branch_width_out;
        start..(start + self.branch_width_out).min(self.channels_out)
    }

    pub fn input_branch(&self, channel: usize) -> usize {
        channel / self.branch_width_in
    }

    pub fn output_branch(&self, channel: usize) -> usize {
        channel / self.branch_width_out
    }

    /// Number of weights, i.e. structural nonzeros of the kernel matrix
    /// including spatial taps.
    pub fn nonzeros(&self) -> u64 {
        (0..self.branches)
            .map(|g| (self.branch_inputs(g).len() * self.branch_outputs(g).len()) as u64)
            .sum::<u64>()
            * self.spatial_taps as u64
    }

    /// Side length of the square spatial window.
    pub fn kernel_side(&self) -> usize {
        kernel_side(self.spatial_taps).expect("validated spec")
    }
}

/// Spatial taps must form an odd square window (1, 9, 25, ...).
pub(crate) fn kernel_side(taps: usize) -> Result<usize> {
    let side = (taps as f64).sqrt().round() as usize;
    if side * side != taps || side.is_multiple_of(2) {
        return Err(Error::structural(format!(
            "{taps} spatial taps do not form an odd square window"
        )));
    }
    Ok(side)
}

/// Channel permutation: output channel `map[j]` receives input channel `j`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PermutationSpec {
    map: Vec<usize>,
}

impl PermutationSpec {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &dst in &map {
            if dst >= map.len() || std::mem::replace(&mut seen[dst], true) {
                return Err(Error::structural(format!(
                    "permutation map is not a bijection on [0, {})",
                    map.len()
                )));
            }
        }
        Ok(PermutationSpec { map })
    }

    pub fn identity(len: usize) -> Self {
        PermutationSpec {
            map: (0..len).collect(),
        }
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(j, &d)| j == d)
    }

    /// Destination of source channel `j`.
    pub fn dest(&self, j: usize) -> usize {
        self.map[j]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (j, &d) in self.map.iter().enumerate() {
            inv[d] = j;
        }
        PermutationSpec { map: inv }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &PermutationSpec) -> Result<Self> {
        if self.len() != next.len() {
            return Err(Error::structural("permutation length mismatch"));
        }
        Ok(PermutationSpec {
            map: self.map.iter().map(|&d| next.map[d]).collect(),
        })
    }
}

/// Ordered product of group convolutions with interleaving permutations,
/// `interleaves[l]` applied after `factors[l]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorChain {
    factors: Vec<GroupConvSpec>,
    interleaves: Vec<PermutationSpec>,
    trailing: Option<PermutationSpec>,
}

impl FactorChain {
    pub fn new(
        factors: Vec<GroupConvSpec>,
        interleaves: Vec<PermutationSpec>,
        trailing: Option<PermutationSpec>,
    ) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::structural("a chain needs at least one factor"));
        }
        if interleaves.len() + 1 != factors.len() {
            return Err(Error::structural(format!(
                "{} factors need {} interleaves, got {}",
                factors.len(),
                factors.len() - 1,
                interleaves.len()
            )));
        }
        for f in &factors {
            f.validate()?;
        }
        for (l, perm) in interleaves.iter().enumerate() {
            let (out, next_in) = (factors[l].channels_out, factors[l + 1].channels_in);
            if out != perm.len() || perm.len() != next_in {
                return Err(Error::structural(format!(
                    "factor {} emits {out} channels, interleave has {}, factor {} expects {next_in}",
                    l + 1,
                    perm.len(),
                    l + 2
                )));
            }
        }
        let last_out = factors[factors.len() - 1].channels_out;
        if let Some(t) = &trailing {
            if t.len() != last_out {
                return Err(Error::structural(format!(
                    "trailing permutation has {} entries for {last_out} channels",
                    t.len()
                )));
            }
        }
        if factors.iter().filter(|f| f.is_spatial()).count() > 1 {
            return Err(Error::structural(
                "at most one factor may carry spatial taps",
            ));
        }
        Ok(FactorChain {
            factors,
            interleaves,
            trailing: trailing.filter(|t| !t.is_identity()),
        })
    }

    /// Chain with identity interleaves, i.e. no channel mixing between factors.
    pub fn without_interleaves(factors: Vec<GroupConvSpec>) -> Result<Self> {
        let interleaves = factors
            .iter()
            .take(factors.len().saturating_sub(1))
            .map(|f| PermutationSpec::identity(f.channels_out))
            .collect();
        Self::new(factors, interleaves, None)
    }

    pub fn single(factor: GroupConvSpec) -> Result<Self> {
        Self::new(vec![factor], Vec::new(), None)
    }

    pub fn factors(&self) -> &[GroupConvSpec] {
        &self.factors
    }

    pub fn interleaves(&self) -> &[PermutationSpec] {
        &self.interleaves
    }

    pub fn trailing(&self) -> Option<&PermutationSpec> {
        self.trailing.as_ref()
    }

    /// Permutation applied after factor `l` (0-based); the trailing one for the last factor.
    pub fn permutation_after(&self, l: usize) -> Option<&PermutationSpec> {
        if l + 1 < self.factors.len() {
            Some(&self.interleaves[l])
        } else {
            self.trailing.as_ref()
        }
    }

    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    pub fn channels_in(&self) -> usize {
        self.factors[0].channels_in
    }

    pub fn channels_out(&self) -> usize {
        self.factors[self.factors.len() - 1].channels_out
    }

    /// Index of the factor carrying spatial taps, if any.
    pub fn spatial_factor(&self) -> Option<usize> {
        self.factors.iter().position(GroupConvSpec::is_spatial)
    }

    pub fn spatial_taps(&self) -> usize {
        self.spatial_factor()
            .map_or(1, |l| self.factors[l].spatial_taps)
    }

    pub fn is_strict(&self) -> bool {
        self.factors.iter().all(GroupConvSpec::is_strict)
    }

    /// Square chain whose input branch widths multiply to the channel count.
    pub fn satisfies_product_rule(&self) -> bool {
        let c = self.channels_in();
        self.factors
            .iter()
            .all(|f| f.channels_in == c && f.channels_out == c)
            && self
                .factors
                .iter()
                .try_fold(1usize, |acc, f| acc.checked_mul(f.branch_width_in))
                == Some(c)
    }

    /// Total weights over all factors; permutations contribute nothing.
    pub fn nonzeros(&self) -> u64 {
        self.factors.iter().map(GroupConvSpec::nonzeros).sum()
    }

    /// Same chain with every interleave (and the trailing permutation) replaced by identity.
    pub fn with_identity_interleaves(&self) -> Self {
        Self::without_interleaves(self.factors.clone()).expect("factors already validated")
    }
}

/// 0/1 mask of a single group convolution under contiguous branch assignment.
pub fn structure_mask(spec: &GroupConvSpec) -> Result<StructureMask> {
    spec.validate()?;
    Ok(StructureMask::from_fn(
        spec.channels_out,
        spec.channels_in,
        |i, j| u64::from(spec.output_branch(i) == spec.input_branch(j)),
    ))
}

pub fn permutation_mask(perm: &PermutationSpec) -> StructureMask {
    let n = perm.len();
    let mut mask = StructureMask::zeros(n, n);
    for (j, &d) in perm.map().iter().enumerate() {
        mask.set(d, j, 1);
    }
    mask
}

/// Path-count matrix of `P_to W_to ... P_from W_from` (1-based, inclusive).
///
/// Each factor in the range is followed by its permutation; for the last
/// factor of the chain that is the trailing permutation.
pub fn compose_structure(chain: &FactorChain, from: usize, to: usize) -> Result<StructureMask> {
    if from == 0 || from > to || to > chain.depth() {
        return Err(Error::usage(format!(
            "factor range {from}..={to} invalid for a chain of depth {}",
            chain.depth()
        )));
    }
    let first = &chain.factors[from - 1];
    let mut acc = StructureMask::identity(first.channels_in);
    for l in (from - 1)..to {
        acc = acc.left_apply_group(&chain.factors[l])?;
        if let Some(p) = chain.permutation_after(l) {
            acc = acc.left_apply_permutation(p);
        }
    }
    Ok(acc)
}

pub fn is_dense(mask: &StructureMask) -> bool {
    mask.is_dense()
}

pub fn is_exactly_one_path(mask: &StructureMask) -> bool {
    mask.is_exactly_one_path()
}

/// Quantified complementarity of a full chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityReport {
    pub mode: Mode,
    pub channels_in: usize,
    pub channels_out: usize,
    pub min_paths: u64,
    pub max_paths: u64,
    /// Share of (output, input) pairs joined by at least one path.
    pub covered_fraction: f64,
    pub dense: bool,
    pub exactly_one_path: bool,
    pub pass: bool,
}

/// Strict mode passes iff the composed chain has exactly one path per
/// channel pair; loose mode always passes and only quantifies coverage.
pub fn verify_complementary(chain: &FactorChain, mode: Mode) -> Result<ComplementarityReport> {
    let mask = compose_structure(chain, 1, chain.depth())?;
    let exactly_one_path = mask.is_exactly_one_path();
    Ok(ComplementarityReport {
        mode,
        channels_in: mask.cols(),
        channels_out: mask.rows(),
        min_paths: mask.min_count(),
        max_paths: mask.max_count(),
        covered_fraction: mask.covered_fraction(),
        dense: mask.is_dense(),
        exactly_one_path,
        pass: match mode {
            Mode::Strict => exactly_one_path,
            Mode::Loose => true,
        },
    })
}
