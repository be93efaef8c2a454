//! Train a small model on generated scenes and write checkpoints and the
//! step log.
//!
//! cargo run --release --example train_synthetic -- [out_dir] [scenes] [epochs]

use std::path::PathBuf;

use dvpnet::model::{DvpNet, ModelConfig};
use dvpnet::synth::{scene_at, SceneConfig};
use dvpnet::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "train_run".into()));
    let count: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(256);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);

    let scenes = SceneConfig::with_size(128, 11);
    let data = (0..count)
        .map(|i| scene_at(&scenes, i))
        .collect::<Result<Vec<_>, _>>()?;
    let net = DvpNet::<f32>::build(&ModelConfig::desk(128, 0.25, 7))?;
    let config = TrainConfig {
        epochs,
        lr_decay_every: (epochs / 3).max(1),
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, config)?.with_output(&out);
    while trainer.epoch() < epochs {
        trainer.run_epoch(&data)?;
        let rows = trainer.log();
        let epoch_rows: Vec<_> = rows.iter().filter(|r| r.epoch + 1 == trainer.epoch()).collect();
        let mean = epoch_rows.iter().map(|r| r.loss.total).sum::<f64>() / epoch_rows.len() as f64;
        println!("epoch {:>3}  mean loss {mean:.4}", trainer.epoch());
    }
    trainer.save(&out.join("final.ckpt"))?;
    println!("log and checkpoints in {}", out.display());
    Ok(())
}
