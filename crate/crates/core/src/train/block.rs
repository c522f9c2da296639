use crate::engine::BlockMode;
use crate::error::{Error, Result};
use crate::structure::FactorChain;

use super::tape::{Tape, Var};

/// Per-factor parameter vars of a block on a tape.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub weights: Vec<Var>,
    /// `(scale, shift)` per factor; required by the nonlinear mode.
    pub affine: Option<Vec<(Var, Var)>>,
}

/// Records the same computation as `engine::forward_block`.
pub fn record_block(
    tape: &mut Tape,
    x: Var,
    chain: &FactorChain,
    vars: &BlockVars,
    mode: BlockMode,
    stride: usize,
) -> Result<Var> {
    if vars.weights.len() != chain.depth() {
        return Err(Error::structural("one weight var per factor is required"));
    }
    let affine = match (mode, &vars.affine) {
        (BlockMode::Linear, _) => None,
        (BlockMode::NonlinearIgcv2, Some(a)) if a.len() == chain.depth() => Some(a),
        (BlockMode::NonlinearIgcv2, _) => {
            return Err(Error::structural(
                "nonlinear blocks need an affine pair for every factor",
            ))
        }
    };
    let strided = chain.spatial_factor().unwrap_or(0);
    let last = chain.depth() - 1;
    let mut h = x;
    for (l, spec) in chain.factors().iter().enumerate() {
        h = tape.conv(
            h,
            vars.weights[l],
            spec,
            if l == strided { stride } else { 1 },
        )?;
        if let Some(a) = affine {
            h = tape.affine(h, a[l].0, a[l].1)?;
            if l == 0 || l == last {
                h = tape.relu(h);
            }
        }
        if let Some(p) = chain.permutation_after(l) {
            h = tape.permute(h, p)?;
        }
    }
    Ok(h)
}
