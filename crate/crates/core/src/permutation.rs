//! Canonical interleaving permutations.
//!
//! Channels of a chain with branch widths `K_1..K_L` are labelled by
//! mixed-radix digit tuples `(d_1, ..., d_L)`. Factor `l` only mixes
//! channels that differ in digit `d_l`, so if the layout seen by factor `l`
//! has `d_l` as its fastest digit, contiguous branches are exactly the
//! channels that differ in `d_l` alone. The interleave after factor `l`
//! swaps the strides of digits `l` and `l+1`; every input/output pair is then
//! joined by exactly one path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::{
    verify_complementary, ComplementarityReport, FactorChain, GroupConvSpec, Mode, PermutationSpec,
};

/// Where the spatial taps live in a factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Channel-wise spatial factor (`K_1 = 1`) followed by pointwise group convolutions.
    Separated,
    /// Spatial taps attach to a group convolution with `K_1 >= 1`.
    Coupled,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separated" => Ok(Regime::Separated),
            "coupled" => Ok(Regime::Coupled),
            other => Err(Error::usage(format!("unknown regime `{other}`"))),
        }
    }
}

/// Group convolutions are parameterized either by channels per branch or by
/// number of branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchParam {
    Width(usize),
    Count(usize),
}

impl BranchParam {
    /// Channels per branch for a layer of `channels` channels.
    pub fn width(self, channels: usize) -> Result<usize> {
        match self {
            BranchParam::Width(0) | BranchParam::Count(0) => {
                Err(Error::usage("branch parameter must be positive"))
            }
            BranchParam::Width(k) => Ok(k.min(channels)),
            BranchParam::Count(g) => Ok(channels.div_ceil(g)),
        }
    }
}

/// Mixed-radix channel labelling with an explicit digit order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedRadixLayout {
    radices: Vec<usize>,
    /// Digit indices from fastest to slowest.
    order: Vec<usize>,
}

impl MixedRadixLayout {
    /// Standard layout: digit 0 fastest.
    pub fn new(radices: Vec<usize>) -> Result<Self> {
        if radices.is_empty() || radices.contains(&0) {
            return Err(Error::usage("radices must be nonempty and positive"));
        }
        radices
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .ok_or_else(|| Error::usage("mixed-radix space too large"))?;
        let order = (0..radices.len()).collect();
        Ok(MixedRadixLayout { radices, order })
    }

    /// Layout seen by factor `stage` (0-based): the standard layout after
    /// `stage` successive stride swaps, so digit `stage` is fastest.
    pub fn for_stage(radices: Vec<usize>, stage: usize) -> Result<Self> {
        let mut layout = Self::new(radices)?;
        if stage >= layout.radices.len() {
            return Err(Error::usage(format!(
                "stage {stage} out of range for {} digits",
                layout.radices.len()
            )));
        }
        for s in 1..=stage {
            layout = layout.with_swapped(s - 1, s);
        }
        Ok(layout)
    }

    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    pub fn size(&self) -> usize {
        self.radices.iter().product()
    }

    pub fn fastest_digit(&self) -> usize {
        self.order[0]
    }

    /// Exchange the positions (and hence strides) of two digits.
    pub fn with_swapped(&self, a: usize, b: usize) -> Self {
        let mut order = self.order.clone();
        let pa = order.iter().position(|&d| d == a).expect("digit exists");
        let pb = order.iter().position(|&d| d == b).expect("digit exists");
        order.swap(pa, pb);
        MixedRadixLayout {
            radices: self.radices.clone(),
            order,
        }
    }

    pub fn stride(&self, digit: usize) -> usize {
        self.order
            .iter()
            .take_while(|&&d| d != digit)
            .map(|&d| self.radices[d])
            .product()
    }

    /// Channel index of a digit tuple (digits indexed by digit id).
    pub fn encode(&self, digits: &[usize]) -> usize {
        let mut index = 0;
        let mut stride = 1;
        for &d in &self.order {
            index += digits[d] * stride;
            stride *= self.radices[d];
        }
        index
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut digits = vec![0; self.radices.len()];
        for &d in &self.order {
            digits[d] = index % self.radices[d];
            index /= self.radices[d];
        }
        digits
    }
}

/// Interleave after factor `after` (1-based) on the live prefix
/// `[0, channels)` of the standard layout. Positions are ranks among live
/// channels, so with `channels == prod(radices)` this is the exact stride swap.
fn compacted_interleave(
    radices: &[usize],
    after: usize,
    channels: usize,
) -> Result<PermutationSpec> {
    let base = MixedRadixLayout::new(radices.to_vec())?;
    if channels > base.size() {
        return Err(Error::structural(format!(
            "{channels} channels exceed the mixed-radix space of {}",
            base.size()
        )));
    }
    let before = MixedRadixLayout::for_stage(radices.to_vec(), after - 1)?;
    let next = MixedRadixLayout::for_stage(radices.to_vec(), after)?;
    let tuples: Vec<Vec<usize>> = (0..channels).map(|j| base.decode(j)).collect();
    let ranks = |layout: &MixedRadixLayout| {
        let mut keyed: Vec<(usize, usize)> = tuples
            .iter()
            .enumerate()
            .map(|(j, t)| (layout.encode(t), j))
            .collect();
        keyed.sort_unstable();
        let mut rank = vec![0; channels];
        for (r, &(_, j)) in keyed.iter().enumerate() {
            rank[j] = r;
        }
        rank
    };
    let (from, to) = (ranks(&before), ranks(&next));
    let mut map = vec![0; channels];
    for j in 0..channels {
        map[from[j]] = to[j];
    }
    PermutationSpec::new(map)
}

/// Stride-swap permutation placed after factor `after` (1-based) of a chain
/// with branch widths `branch_widths`.
pub fn build_interleave(branch_widths: &[usize], after: usize) -> Result<PermutationSpec> {
    let layout = MixedRadixLayout::new(branch_widths.to_vec())?;
    if branch_widths.len() == 1 {
        return Ok(PermutationSpec::identity(layout.size()));
    }
    if after == 0 || after >= branch_widths.len() {
        return Err(Error::usage(format!(
            "interleave index {after} outside 1..={}",
            branch_widths.len() - 1
        )));
    }
    compacted_interleave(branch_widths, after, layout.size())
}

/// Classic two-factor channel shuffle: `channels` split into `groups`
/// contiguous branches, regrouped so each new branch draws from every old one.
/// Uneven splits use the compacted stride swap.
pub fn channel_shuffle(channels: usize, groups: usize) -> Result<PermutationSpec> {
    if groups == 0 || channels == 0 {
        return Err(Error::usage(
            "channel shuffle needs positive channels and groups",
        ));
    }
    let width = channels.div_ceil(groups);
    let radices = [width, channels.div_ceil(width)];
    compacted_interleave(&radices, 1, channels)
}

/// Canonical strict chain: spatial taps on factor 1, stride-swap interleaves,
/// identity trailing permutation. Every returned chain has been checked to
/// be exactly-one-path.
pub fn build_chain(
    channels: usize,
    spatial_taps: usize,
    branch_widths: &[usize],
    regime: Regime,
) -> Result<FactorChain> {
    if branch_widths.is_empty() {
        return Err(Error::usage("at least one branch width is required"));
    }
    if regime == Regime::Separated && branch_widths[0] != 1 {
        return Err(Error::usage(format!(
            "separated regime needs a channel-wise first factor (K_1 = 1), got {}",
            branch_widths[0]
        )));
    }
    let product = branch_widths
        .iter()
        .try_fold(1usize, |acc, &k| acc.checked_mul(k));
    if product != Some(channels) {
        return Err(Error::structural(format!(
            "branch widths {branch_widths:?} multiply to {product:?}, not {channels}; \
             use a loose chain for non-exact factorizations"
        )));
    }
    let factors = branch_widths
        .iter()
        .enumerate()
        .map(|(l, &k)| {
            let taps = if l == 0 { spatial_taps } else { 1 };
            GroupConvSpec::new(channels, channels, channels / k, taps)
        })
        .collect::<Result<Vec<_>>>()?;
    let interleaves = (1..branch_widths.len())
        .map(|l| build_interleave(branch_widths, l))
        .collect::<Result<Vec<_>>>()?;
    let chain = FactorChain::new(factors, interleaves, None)?;
    let report = verify_complementary(&chain, Mode::Strict)?;
    if !report.pass {
        return Err(Error::structural(format!(
            "canonical chain for {branch_widths:?} failed path uniqueness: {report:?}"
        )));
    }
    Ok(chain)
}

/// Loose chain: a channel-wise spatial factor followed by `depth - 1`
/// pointwise group convolutions of branch width `branch_width` with
/// `ceil(C / K)` branches each. Interleaves apply the stride-swap rule on a
/// padded mixed-radix space and keep only live channels.
pub fn build_loose_chain(
    channels: usize,
    spatial_taps: usize,
    branch_width: usize,
    depth: usize,
) -> Result<(FactorChain, ComplementarityReport)> {
    if branch_width < 2 || depth < 2 || channels == 0 {
        return Err(Error::usage(format!(
            "loose chains need K >= 2 and L >= 2 (got K={branch_width}, L={depth})"
        )));
    }
    let k = branch_width.min(channels);
    let pointwise = depth - 1;
    let span = u32::try_from(pointwise)
        .ok()
        .and_then(|p| k.checked_pow(p))
        .ok_or_else(|| Error::usage("padded channel space overflows"))?;
    let mut radices = vec![1];
    radices.extend(std::iter::repeat_n(k, pointwise));
    // slowest digit is never mixed; it only pads the space up to C
    radices.push(channels.div_ceil(span));

    let mut factors = vec![GroupConvSpec::depthwise(channels, spatial_taps)?];
    for _ in 0..pointwise {
        factors.push(GroupConvSpec::loose(channels, channels, k, k, 1)?);
    }
    let interleaves = (1..depth)
        .map(|l| compacted_interleave(&radices, l, channels))
        .collect::<Result<Vec<_>>>()?;
    let chain = FactorChain::new(factors, interleaves, None)?;
    let report = verify_complementary(&chain, Mode::Loose)?;
    Ok((chain, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::compose_structure;

    // digit tuples (d1, d2) enumerated by hand and reordered d2-fastest
    #[test]
    fn perfect_shuffle_on_four_channels() {
        let p = build_interleave(&[2, 2], 1).unwrap();
        assert_eq!(p.map(), &[0, 2, 1, 3]);
    }

    #[test]
    fn six_channel_stride_permutation() {
        let p = build_interleave(&[2, 3], 1).unwrap();
        // j = d1 + 2*d2  ->  d2 + 3*d1
        let expected: Vec<usize> = (0..6).map(|j| (j / 2) + 3 * (j % 2)).collect();
        assert_eq!(p.map(), expected.as_slice());
        let chain = build_chain(6, 1, &[2, 3], Regime::Coupled).unwrap();
        assert!(verify_complementary(&chain, Mode::Strict).unwrap().pass);
    }

    #[test]
    fn single_factor_interleave_is_identity() {
        assert!(build_interleave(&[7], 1).unwrap().is_identity());
    }

    #[test]
    fn layout_round_trips() {
        let layout = MixedRadixLayout::for_stage(vec![2, 3, 4], 2).unwrap();
        assert_eq!(layout.fastest_digit(), 2);
        for j in 0..24 {
            assert_eq!(layout.encode(&layout.decode(j)), j);
        }
        assert_eq!(layout.stride(2), 1);
        assert_eq!(layout.stride(0), 4);
        assert_eq!(layout.stride(1), 8);
    }

    #[test]
    fn stage_layout_groups_channels_differing_in_one_digit() {
        let radices = vec![3, 2, 4];
        for stage in 0..3 {
            let layout = MixedRadixLayout::for_stage(radices.clone(), stage).unwrap();
            let k = radices[stage];
            for start in (0..24).step_by(k) {
                let base = layout.decode(start);
                for j in start..start + k {
                    let d = layout.decode(j);
                    for (digit, (&a, &b)) in d.iter().zip(&base).enumerate() {
                        if digit != stage {
                            assert_eq!(a, b);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn balanced_separated_design_passes() {
        let chain = build_chain(144, 9, &[1, 12, 12], Regime::Separated).unwrap();
        assert_eq!(chain.nonzeros(), 4752);
        let chain = build_chain(64, 9, &[1, 8, 8], Regime::Separated).unwrap();
        assert!(verify_complementary(&chain, Mode::Strict).unwrap().pass);
    }

    #[test]
    fn identity_interleaves_fail_strict() {
        let chain = build_chain(4, 1, &[2, 2], Regime::Coupled).unwrap();
        let plain = chain.with_identity_interleaves();
        assert!(!verify_complementary(&plain, Mode::Strict).unwrap().pass);
    }

    #[test]
    fn strict_chain_rejects_inexact_product() {
        assert!(matches!(
            build_chain(10, 9, &[1, 4, 4], Regime::Separated),
            Err(Error::Structural(_))
        ));
        assert!(matches!(
            build_chain(4, 9, &[2, 2], Regime::Separated),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn loose_chain_quantifies_coverage() {
        let (chain, report) = build_loose_chain(416, 9, 8, 4).unwrap();
        assert_eq!(chain.depth(), 4);
        assert!(report.pass);
        assert!(report.covered_fraction <= 1.0);
        assert!(report.max_paths >= 1);
    }

    #[test]
    fn loose_chain_degenerates_to_strict() {
        let (chain, report) = build_loose_chain(64, 9, 8, 3).unwrap();
        assert_eq!(report.covered_fraction, 1.0);
        assert_eq!(report.max_paths, 1);
        assert_eq!(
            chain,
            build_chain(64, 9, &[1, 8, 8], Regime::Separated).unwrap()
        );

        let (_, report) = build_loose_chain(8, 9, 8, 2).unwrap();
        assert_eq!(report.covered_fraction, 1.0);
    }

    #[test]
    fn channel_shuffle_matches_two_factor_interleave() {
        assert_eq!(
            channel_shuffle(12, 3).unwrap(),
            build_interleave(&[4, 3], 1).unwrap()
        );
        // uneven split still yields a bijection
        assert_eq!(channel_shuffle(10, 3).unwrap().len(), 10);
    }

    #[test]
    fn branch_parameterizations_convert() {
        assert_eq!(BranchParam::Count(8).width(416).unwrap(), 52);
        assert_eq!(BranchParam::Width(8).width(416).unwrap(), 8);
        assert!(BranchParam::Count(0).width(4).is_err());
    }

    #[test]
    fn interleave_then_inverse_is_identity() {
        let p = build_interleave(&[2, 3, 4], 2).unwrap();
        assert!(p.then(&p.inverse()).unwrap().is_identity());
    }

    #[test]
    fn exact_chains_have_row_sums_equal_channels() {
        let chain = build_chain(48, 1, &[4, 3, 4], Regime::Coupled).unwrap();
        let mask = compose_structure(&chain, 1, 3).unwrap();
        assert!(mask.row_sums().iter().all(|&s| s == 48));
    }
}
