//! Train a small masked autoencoder on synthetic cutouts, print the loss
//! curve and save a checkpoint.
//!
//! cargo run --release --example train_small -- [epochs] [out.enkp]

use std::path::PathBuf;

use enki::data::{generate_cutouts, FieldSpec};
use enki::model::ModelConfig;
use enki::training::{save_checkpoint, Checkpoint, TrainConfig, Trainer};

fn main() -> enki::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("enki_small.enkp"));

    // 32×32 cutouts keep this under a minute on one core
    let model_config = ModelConfig::toy(32, 4, 32);
    let spec = FieldSpec {
        size: 32,
        ..FieldSpec::default()
    };
    let data = generate_cutouts(&spec, 11, 0..64)?;
    let config = TrainConfig {
        base_learning_rate: 3e-3,
        warmup_epochs: 2.min(epochs),
        total_epochs: epochs,
        batch_size: 16,
        micro_batch_size: 0,
        seed: 11,
        ..TrainConfig::desk(30.0)
    };

    let (params, log) = Trainer::new(&data, &model_config, &config)
        .on_epoch(|r| println!("epoch {:>3}/{} loss {:.5}", r.record.epoch, r.total_epochs, r.record.loss))
        .run()?;
    let smooth = log.smoothed_epoch_losses(5);
    println!("smoothed loss {:.5} -> {:.5}", smooth[0], smooth[smooth.len() - 1]);

    let mut ckpt = Checkpoint::from_params(&model_config, params);
    ckpt.train_config = Some(config);
    ckpt.epoch = epochs;
    save_checkpoint(&ckpt, &out)?;
    println!("checkpoint at {}", out.display());
    Ok(())
}
