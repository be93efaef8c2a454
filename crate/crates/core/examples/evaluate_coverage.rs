//! Score a checkpoint (or an untrained model) on generated test scenes and
//! print the coverage table next to the center-prediction baseline.
//!
//! cargo run --release --example evaluate_coverage -- [checkpoint] [scenes]

use dvpnet::codec::Codec;
use dvpnet::eval::{center_baseline, coverage_curve, evaluate, REPORT_THRESHOLDS};
use dvpnet::model::{load_checkpoint, DvpNet, ModelConfig};
use dvpnet::synth::{scene_at, SceneConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let net = match args.next() {
        Some(path) => load_checkpoint::<f32>(path.as_ref())?.0,
        None => DvpNet::build(&ModelConfig::desk(128, 0.25, 7))?,
    };
    let count: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let size = net.config().input_size;
    let scenes = SceneConfig::with_size(size, 99);
    let test = (0..count)
        .map(|i| scene_at(&scenes, i))
        .collect::<Result<Vec<_>, _>>()?;

    let records = evaluate(&net, &Codec::for_model(net.config()), &test)?;
    let ces: Vec<f64> = records.iter().map(|r| r.ce).collect();
    let model = coverage_curve(&ces, &REPORT_THRESHOLDS)?;
    let center = coverage_curve(&center_baseline(&test)?, &REPORT_THRESHOLDS)?;
    println!("{:>8} {:>8} {:>8}", "CE <=", "model", "center");
    for (i, t) in REPORT_THRESHOLDS.iter().enumerate() {
        println!("{t:>8} {:>8.3} {:>8.3}", model.coverage[i], center.coverage[i]);
    }
    Ok(())
}
