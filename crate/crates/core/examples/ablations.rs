//! Slice-count and scale-subset ablations under one small training budget.
//!
//! cargo run --release --example ablations -- [train_scenes] [epochs]

use dvpnet::eval::{ablate_s, ablate_scales, ablation_csv, AblationBudget};
use dvpnet::model::ModelConfig;
use dvpnet::synth::{scene_at, SceneConfig};
use dvpnet::trainer::TrainConfig;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let scenes = SceneConfig::with_size(96, 3);
    let all = (0..count + 32)
        .map(|i| scene_at(&scenes, i))
        .collect::<Result<Vec<_>, _>>()?;
    let (train, test) = all.split_at(count as usize);
    let budget = AblationBudget {
        train,
        test,
        train_config: TrainConfig {
            epochs,
            lr_decay_every: epochs.max(1),
            ..TrainConfig::default()
        },
    };
    let base = ModelConfig::desk(96, 0.25, 7);
    println!("{}", ablation_csv(&ablate_s(&base, &[3, 7, 11], &budget)?));
    println!("{}", ablation_csv(&ablate_scales(&base, &[vec![1], vec![1, 2], vec![1, 2, 3]], &budget)?));
    Ok(())
}
