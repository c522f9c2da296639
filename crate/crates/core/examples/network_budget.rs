//! Parameter and multiply-add budgets of CIFAR-style networks.
//!
//!     cargo run --example network_budget

use igc::planner::{BlockKind, NetworkRecipe};

fn main() -> igc::Result<()> {
    let recipes = [
        NetworkRecipe::cifar(BlockKind::Xception, 35, 8, 100, None)?,
        NetworkRecipe::cifar(BlockKind::Igcv1, 24, 8, 100, None)?,
        NetworkRecipe::cifar(BlockKind::Igcv2Star, 416, 20, 10, Some(8))?,
        NetworkRecipe::cifar(BlockKind::Igcv2Star, 64, 20, 10, Some(8))?,
    ];
    for recipe in &recipes {
        let r = recipe.count(32, 32)?;
        println!(
            "{:<28} {:>10} params {:>14} flops",
            r.name, r.total_params, r.total_flops
        );
        for s in &r.stages {
            println!(
                "    stage {} {:<10} width {:>4} x{} -> {:?}: {} params",
                s.index, s.kind, s.width, s.blocks, s.output_size, s.params
            );
        }
    }
    Ok(())
}
