//! Loads a checkpoint and writes the probability map and overlay for one
//! image.
//!
//!     cargo run --release --example infer -- <checkpoint> <image> [out_prefix]

use promptpix::backbone::Segmenter;
use promptpix::checkpoint;
use promptpix::image::{draw_overlay, load_image, save_gray_png, save_png, BinaryMask, Overlay};

fn main() -> promptpix::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, image, rest @ ..] = args.as_slice() else {
        eprintln!("usage: infer <checkpoint> <image> [out_prefix]");
        std::process::exit(2);
    };
    let prefix = rest.first().map(String::as_str).unwrap_or("infer");
    let (cfg, params) = checkpoint::load(ckpt)?;
    let img = load_image(image)?;
    let prob = Segmenter::new(cfg.backbone)?.predict(&params, &img)?;
    let gray: Vec<u8> = prob.iter().map(|p| (p * 255.0).round() as u8).collect();
    save_gray_png(img.height, img.width, &gray, format!("{prefix}_prob.png"))?;
    let mask = BinaryMask::new(img.height, img.width, prob.iter().map(|&p| u8::from(p >= 0.5)).collect())?;
    save_png(&draw_overlay(&img, Overlay::Mask(&mask))?, format!("{prefix}_overlay.png"))?;
    println!("foreground fraction {:.3}", mask.foreground_fraction());
    Ok(())
}
