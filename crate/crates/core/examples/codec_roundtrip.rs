//! Encode a scene's labels into grid targets, build the ideal prediction
//! maps and decode them back.
//!
//! cargo run --example codec_roundtrip -- [S]

use dvpnet::codec::Codec;
use dvpnet::synth::{scene_at, SceneConfig};

fn main() -> anyhow::Result<()> {
    let slices: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let codec = Codec::new(416, slices);
    println!(
        "S = {slices}: {} channels per cell, grids {:?}",
        codec.layout.channels(),
        codec.grids.map(|g| g.n)
    );
    let scene = scene_at(&SceneConfig::with_size(416, 1), 0)?;
    let labels = scene.labels();
    let targets = codec.encode_targets(&labels)?;
    for (k, t) in targets.scales.iter().enumerate() {
        println!("scale {}: cell {:?}, vp offset {:?}", k + 1, t.cell, t.vp_offset);
    }
    let preds = codec.ideal_logits(&targets);
    let det = codec.decode(&preds, 0)?;
    println!("label vp   ({:.6}, {:.6})", labels.vp.x, labels.vp.y);
    println!("decoded vp ({:.6}, {:.6}) from scale {}", det.vp.x, det.vp.y, det.scale + 1);
    let canon = labels.canonical_lines();
    let worst = det
        .left
        .points()
        .iter()
        .chain(det.right.points())
        .zip(
            dvpnet::geometry::discretize(&canon[0], slices)?
                .points()
                .iter()
                .chain(dvpnet::geometry::discretize(&canon[1], slices)?.points()),
        )
        .map(|(a, b)| a.distance(b))
        .fold(0.0, f64::max);
    println!("largest line point deviation {worst:.2e} px");
    Ok(())
}
