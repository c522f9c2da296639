//! Parameter and multiply-add budgets of factorized convolutions.

mod network;
mod table;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permutation::{build_chain, build_loose_chain, Regime};
use crate::structure::{verify_complementary, ComplementarityReport, FactorChain, Mode};

pub use network::{
    block_chain, igcv2_star_depth, igcv3_chain, AffinePlacement, BlockKind, HeadSpec, ItemCount,
    NetworkRecipe, NetworkReport, StageCount, StageSpec, StemSpec,
};
pub use table::format_design_table;

/// Chains wider than this are not path-counted during enumeration.
pub const VERIFY_CHANNEL_LIMIT: usize = 512;

/// A scored candidate factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub channels: usize,
    pub spatial_taps: usize,
    pub depth: usize,
    pub regime: Regime,
    pub branch_widths: Vec<usize>,
    pub params: u64,
    pub flops_per_position: u64,
    pub width: usize,
    pub lower_bound: f64,
    pub balance_score: f64,
    pub balanced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<ComplementarityReport>,
}

/// `Q = C*S*K_1 + C*sum(K_2..K_L)`.
pub fn param_count(channels: usize, spatial_taps: usize, branch_widths: &[usize]) -> Result<u64> {
    let (first, rest) = branch_widths
        .split_first()
        .ok_or_else(|| Error::usage("param_count needs at least one branch width"))?;
    let c = channels as u64;
    Ok(c * spatial_taps as u64 * *first as u64 + c * rest.iter().map(|&k| k as u64).sum::<u64>())
}

/// Jensen lower bound `C * L * (S*C)^(1/L)` on `Q` when `prod K_l = C`.
pub fn param_lower_bound(channels: usize, spatial_taps: usize, depth: usize) -> f64 {
    let c = channels as f64;
    let l = depth as f64;
    c * l * (spatial_taps as f64 * c).powf(1.0 / l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub balanced: bool,
    /// max / min over the balanced quantities; 1 exactly at balance.
    pub score: f64,
}

/// Coupled: compares `S*K_1, K_2, ..., K_L`. Separated: the spatial factor is
/// channel-wise and only `K_2..K_L` are compared.
pub fn balance_check(spatial_taps: usize, branch_widths: &[usize], regime: Regime) -> Balance {
    let terms: Vec<usize> = match regime {
        Regime::Coupled => branch_widths
            .iter()
            .enumerate()
            .map(|(l, &k)| if l == 0 { spatial_taps * k } else { k })
            .collect(),
        Regime::Separated => branch_widths.iter().skip(1).copied().collect(),
    };
    let (Some(&lo), Some(&hi)) = (terms.iter().min(), terms.iter().max()) else {
        return Balance {
            balanced: true,
            score: 1.0,
        };
    };
    Balance {
        balanced: lo == hi,
        score: hi as f64 / lo as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalDepth {
    /// `ln(S*C)`, where `d log Q / dL` vanishes.
    pub stationary: f64,
    pub best_depth: usize,
}

/// Integer depth minimizing the Jensen bound among the neighbours of the
/// stationary point; ties go to the smaller depth.
pub fn optimal_depth(channels: usize, spatial_taps: usize) -> Result<OptimalDepth> {
    optimal_depth_for_product(channels as f64 * spatial_taps as f64)
}

/// Same as [`optimal_depth`] for a real product `S*C`; the argmin of
/// `C * L * (S*C)^(1/L)` over `L` does not depend on `C` alone.
pub fn optimal_depth_for_product(sc: f64) -> Result<OptimalDepth> {
    if sc.is_nan() || sc <= 1.0 || !sc.is_finite() {
        return Err(Error::usage("optimal depth needs a finite S*C > 1"));
    }
    let scaled = |l: usize| l as f64 * sc.powf(1.0 / l as f64);
    let stationary = sc.ln();
    let lo = (stationary.floor() as usize).max(1);
    let hi = (stationary.ceil() as usize).max(1);
    let best_depth = if scaled(hi) < scaled(lo) { hi } else { lo };
    Ok(OptimalDepth {
        stationary,
        best_depth,
    })
}

/// Output extent of a same-padded convolution.
pub fn output_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

/// Multiply-adds of one pass of `chain` over an `height x width` map.
///
/// Factors up to (excluding) the spatial one run at input resolution; the
/// spatial factor applies `stride` and everything after it runs at the
/// reduced resolution. A purely pointwise chain strides in its first factor.
pub fn flop_count(chain: &FactorChain, height: usize, width: usize, stride: usize) -> Result<u64> {
    if height == 0 || width == 0 {
        return Err(Error::usage("spatial dimensions must be positive"));
    }
    if stride == 0 {
        return Err(Error::usage("stride must be at least 1"));
    }
    let strided_from = chain.spatial_factor().unwrap_or(0);
    let full = (height * width) as u64;
    let reduced = (output_extent(height, stride) * output_extent(width, stride)) as u64;
    Ok(chain
        .factors()
        .iter()
        .enumerate()
        .map(|(l, f)| f.nonzeros() * if l < strided_from { full } else { reduced })
        .sum())
}

fn design_point(
    channels: usize,
    spatial_taps: usize,
    regime: Regime,
    branch_widths: Vec<usize>,
    density: Option<ComplementarityReport>,
    params: u64,
) -> DesignPoint {
    let balance = balance_check(spatial_taps, &branch_widths, regime);
    DesignPoint {
        channels,
        spatial_taps,
        depth: branch_widths.len(),
        regime,
        params,
        flops_per_position: params,
        width: channels,
        lower_bound: param_lower_bound(channels, spatial_taps, branch_widths.len()),
        balance_score: balance.score,
        balanced: balance.balanced,
        branch_widths,
        density,
    }
}

/// Every ordered `len`-tuple of positive integers whose product is `n`.
pub fn ordered_factorizations(n: usize, len: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, len: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if len == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for d in (1..=n).filter(|d| n.is_multiple_of(*d)) {
            prefix.push(d);
            go(n / d, len - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n >= 1 && len >= 1 {
        go(n, len, &mut Vec::with_capacity(len), &mut out);
    }
    out
}

/// All exact factorizations of `channels` into `depth` factors, sorted by
/// `Q`, then balance score, then branch widths.
pub fn enumerate_factorizations(
    channels: usize,
    depth: usize,
    regime: Regime,
    spatial_taps: usize,
) -> Vec<DesignPoint> {
    let tuples = match regime {
        Regime::Coupled => ordered_factorizations(channels, depth),
        Regime::Separated if depth == 1 => {
            if channels == 1 {
                vec![vec![1]]
            } else {
                Vec::new()
            }
        }
        Regime::Separated => ordered_factorizations(channels, depth - 1)
            .into_iter()
            .map(|rest| std::iter::once(1).chain(rest).collect())
            .collect(),
    };
    let mut points: Vec<DesignPoint> = tuples
        .into_iter()
        .map(|k| {
            let params = param_count(channels, spatial_taps, &k).expect("nonempty tuple");
            let density = (channels <= VERIFY_CHANNEL_LIMIT)
                .then(|| build_chain(channels, spatial_taps, &k, regime).ok())
                .flatten()
                .and_then(|chain| verify_complementary(&chain, Mode::Strict).ok());
            design_point(channels, spatial_taps, regime, k, density, params)
        })
        .collect();
    points.sort_by(|a, b| {
        a.params
            .cmp(&b.params)
            .then(a.balance_score.total_cmp(&b.balance_score))
            .then_with(|| a.branch_widths.cmp(&b.branch_widths))
    });
    points
}

/// Smallest `e >= 1` with `K^e >= C`, plus one.
pub fn igcv2_star_depth_for(channels: usize, branch_width: usize) -> Result<usize> {
    if channels < 2 || branch_width < 2 {
        return Err(Error::usage("IGCV2* planning needs C >= 2 and K >= 2"));
    }
    let mut e = 1;
    let mut span = branch_width;
    while span < channels {
        span = span.saturating_mul(branch_width);
        e += 1;
    }
    Ok(e + 1)
}

/// Channel-wise spatial factor plus `L* - 1` pointwise factors of width `K`;
/// loose when `K^(L*-1) != C`, with the coverage report attached.
pub fn plan_igcv2_star(
    channels: usize,
    branch_width: usize,
    spatial_taps: usize,
) -> Result<DesignPoint> {
    let depth = igcv2_star_depth_for(channels, branch_width)?;
    let mut widths = vec![1];
    widths.extend(std::iter::repeat_n(branch_width, depth - 1));
    let (chain, report) = match build_chain(channels, spatial_taps, &widths, Regime::Separated) {
        Ok(chain) => {
            let report = verify_complementary(&chain, Mode::Strict)?;
            (chain, report)
        }
        Err(Error::Structural(_)) => {
            build_loose_chain(channels, spatial_taps, branch_width, depth)?
        }
        Err(e) => return Err(e),
    };
    Ok(design_point(
        channels,
        spatial_taps,
        Regime::Separated,
        widths,
        Some(report),
        chain.nonzeros(),
    ))
}
