//! Render a handful of synthetic scenes with their labels drawn on top.
//!
//! cargo run --example synth_scenes -- [out_dir] [count]

use std::path::PathBuf;

use dvpnet::synth::{augment, scene_at, SceneConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_scenes".into()));
    let count: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);
    let config = SceneConfig::with_size(128, 7);

    for i in 0..count {
        let scene = scene_at(&config, i)?;
        scene.image.save_png(&out.join(format!("scene_{i}.png")))?;

        let mut rng = config.rng_for(10_000 + i);
        let aug = augment(&scene, &mut rng, 0.5, 10.0);
        let mut labeled = aug.image.clone();
        for l in &aug.main_lines {
            labeled.draw_segment(l.a, aug.vp, 1.0, [1.0, 0.2, 0.2], 0.6);
        }
        labeled.draw_cross(aug.vp, 4.0, 1.5, [0.1, 1.0, 0.1]);
        labeled.save_png(&out.join(format!("scene_{i}_augmented.png")))?;
        println!("scene {i}: vp ({:.2}, {:.2})", scene.vp.x, scene.vp.y);
    }
    println!("wrote {} images to {}", 2 * count, out.display());
    Ok(())
}
