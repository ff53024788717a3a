//! Soft-SLIC on a synthetic blob image: prints the column-sum check and
//! writes the label overlay.
//!
//!     cargo run --example superpixels -- [m] [out.png]

use promptpix::image::{build_xylab, draw_overlay, save_png, Overlay};
use promptpix::superpixel;
use promptpix::train::{synth_dataset, SynthConfig};

fn main() -> promptpix::Result<()> {
    let mut args = std::env::args().skip(1);
    let m: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    let out = args.next().unwrap_or_else(|| "superpixels.png".into());
    let sample = synth_dataset(1, &SynthConfig::default(), 3)?.remove(0);
    let feats = build_xylab(&sample.image, 1.0)?;
    for iters in [1, 3, 10] {
        let (assoc, centers) = superpixel::iterate(&feats, m, iters, superpixel::DEFAULT_TEMP)?;
        let labels = superpixel::hard_assign(&feats, &centers).labels;
        let mut used = labels.clone();
        used.sort_unstable();
        used.dedup();
        println!("iters {iters:>2}: {} labels in use, column-sum error {:.2e}", used.len(), assoc.column_sum_error());
        if iters == 10 {
            save_png(&draw_overlay(&sample.image, Overlay::Labels(&labels))?, &out)?;
        }
    }
    println!("overlay written to {out}");
    Ok(())
}
