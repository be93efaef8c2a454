//! Single-image forward latency at a few width multipliers.
//!
//! cargo run --release --example bench_latency -- [input_size] [reps]

use dvpnet::eval::bench_latency;
use dvpnet::model::{DvpNet, ModelConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(128);
    let reps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    println!("input {size}, 20 warmup + {reps} timed passes, f32");
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>8}", "width", "params", "median_ms", "p5_ms", "p95_ms", "fps");
    for width in [0.25, 0.5, 1.0] {
        let net = DvpNet::<f32>::build(&ModelConfig::desk(size, width, 23))?;
        let r = bench_latency(&net, 20, reps)?;
        println!(
            "{width:>6} {:>10} {:>10.3} {:>10.3} {:>10.3} {:>8.1}",
            net.params().numel(),
            r.median_ms,
            r.p5_ms,
            r.p95_ms,
            r.fps
        );
    }
    Ok(())
}
