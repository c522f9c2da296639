//! Builds a strict chain, checks it has exactly one path per channel pair,
//! then shows what replacing the interleaves by identities does.
//!
//!     cargo run --example verify_chain

use igc::permutation::{build_chain, build_loose_chain, Regime};
use igc::structure::{verify_complementary, Mode};

fn main() -> igc::Result<()> {
    let chain = build_chain(64, 9, &[1, 8, 8], Regime::Separated)?;
    let r = verify_complementary(&chain, Mode::Strict)?;
    println!(
        "K = (1,8,8): pass {}, paths {}..{}",
        r.pass, r.min_paths, r.max_paths
    );

    let broken = chain.with_identity_interleaves();
    let r = verify_complementary(&broken, Mode::Strict)?;
    println!(
        "identity interleaves: pass {}, covered fraction {:.4}",
        r.pass, r.covered_fraction
    );

    let (_, r) = build_loose_chain(48, 9, 8, 3)?;
    println!(
        "loose C = 48, K = 8: covered fraction {:.4}, paths {}..{}",
        r.covered_fraction, r.min_paths, r.max_paths
    );
    Ok(())
}
