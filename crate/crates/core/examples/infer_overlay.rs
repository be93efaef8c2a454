//! Run one image through a model and save the detection overlay.
//!
//! cargo run --release --example infer_overlay -- <checkpoint> [image.png] [overlay.png]
//!
//! Without an image a synthetic scene is used and its labels are drawn too.

use std::path::PathBuf;

use dvpnet::codec::Codec;
use dvpnet::eval::{save_overlay, scene_ce};
use dvpnet::image::RgbImage;
use dvpnet::model::load_checkpoint;
use dvpnet::synth::{scene_at, SceneConfig};
use dvpnet::trainer::batch_tensor;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().ok_or_else(|| anyhow::anyhow!("usage: infer_overlay <checkpoint> [image] [overlay]"))?);
    let (net, meta) = load_checkpoint::<f32>(&ckpt)?;
    let size = net.config().input_size;
    let (image, truth) = match args.next() {
        Some(p) => (RgbImage::load_png(p.as_ref())?.resized(size, size), None),
        None => {
            let s = scene_at(&SceneConfig::with_size(size, 5), 0)?;
            (s.image.clone(), Some(s))
        }
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "overlay.png".into()));

    let preds = net.predict(&batch_tensor([&image], size))?;
    let det = Codec::for_model(net.config()).decode(&preds, 0)?;
    println!("model trained {} epochs", meta.epoch);
    println!("vp ({:.2}, {:.2}) confidence {:.3} from scale {} cell {:?}", det.vp.x, det.vp.y, det.confidence, det.scale + 1, det.cell);
    if let Some(t) = &truth {
        println!("label vp ({:.2}, {:.2}), consistency error {:.3}", t.vp.x, t.vp.y, scene_ce(t, det.vp)?);
    }
    save_overlay(&out, &image, &det, truth.as_ref())?;
    println!("overlay written to {}", out.display());
    Ok(())
}
