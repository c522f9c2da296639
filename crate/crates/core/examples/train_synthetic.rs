//! Trains the 8-layer IGCV2 network (stem, six blocks with K = (1, 4, 4) at
//! C = 16, pooling and classifier) on separable synthetic data.
//!
//!     cargo run --release --example train_synthetic -- [epochs] [seed]

use std::time::Instant;

use igc::planner::{BlockKind, NetworkRecipe, StageSpec};
use igc::train::{synth_dataset, train, TrainConfig};

fn main() -> igc::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(30, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));

    let mut stage = StageSpec::new(BlockKind::Igcv2, 16, 6, 1);
    stage.branch_widths = Some(vec![4, 4]);
    stage.nonlinear = true;
    let recipe = NetworkRecipe::plain(stage, 2, 3);
    let data = synth_dataset(2, 2000, seed)?;
    let config = TrainConfig {
        epochs,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let out = train(&recipe, &data, &config, None, |m| {
        println!(
            "epoch {:>2}  lr {:.3}  loss {:.4}  acc {:.3}",
            m.epoch, m.lr, m.train_loss, m.train_acc
        );
        Ok(())
    })?;
    println!(
        "{} parameters, {:.1}s",
        out.network.parameter_count(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
