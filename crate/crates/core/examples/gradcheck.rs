//! Finite-difference verification of every differentiable op and of the
//! full detection loss on the micro model.
//!
//! cargo run --release --example gradcheck -- [seeds]

use dvpnet::loss::grad_check_loss;
use dvpnet::model::ModelConfig;
use dvpnet::nn::gradcheck::{op_suite, GRAD_TOLERANCE};

fn main() -> anyhow::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let mut worst: f64 = 0.0;
    for c in op_suite(seeds)? {
        println!("{:<24} seed {}  max rel err {:.2e}", c.name, c.seed, c.max_rel_err);
        worst = worst.max(c.max_rel_err);
    }
    let config = ModelConfig::micro();
    let start = std::time::Instant::now();
    let e = grad_check_loss(&config, 0)?;
    println!(
        "{:<24} {} params, max rel err {e:.2e} ({:.1}s)",
        "total loss",
        dvpnet::model::DvpNet::<f64>::build(&config)?.params().numel(),
        start.elapsed().as_secs_f64()
    );
    worst = worst.max(e);
    println!("worst {worst:.2e}, tolerance {GRAD_TOLERANCE:.0e}: {}", if worst <= GRAD_TOLERANCE { "pass" } else { "FAIL" });
    if worst > GRAD_TOLERANCE {
        std::process::exit(1);
    }
    Ok(())
}
