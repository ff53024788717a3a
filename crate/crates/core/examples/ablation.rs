//! Trains the decoder-only baseline and every prompt variant on a synthetic
//! blob corpus and prints test metrics side by side.
//!
//!     cargo run --release --example ablation -- [epochs] [seed]

use std::time::Instant;

use promptpix::backbone::BackboneConfig;
use promptpix::prompting::AblationVariant;
use promptpix::train::{run_variant, synth_dataset, SynthConfig, TrainConfig};

fn main() -> promptpix::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let only: Vec<AblationVariant> = args.filter_map(|a| a.parse().ok()).collect();
    let data = synth_dataset(200, &SynthConfig::default(), seed)?;
    let (train, test) = data.split_at(160);
    let backbone = BackboneConfig {
        seed,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        max_epochs: epochs,
        seed,
        ..Default::default()
    };
    let variants = if only.is_empty() { AblationVariant::ALL.to_vec() } else { only };
    println!("{:<14} {:>8} {:>7} {:>7} {:>7} {:>7} {:>9} {:>7}", "variant", "params", "dice", "miou", "mae", "s_m", "last_loss", "secs");
    for v in variants {
        let t = Instant::now();
        let (r, _) = run_variant(&backbone, &train_cfg, v, train, test)?;
        let s = r.summary;
        println!(
            "{:<14} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9.5} {:>7.1}",
            v.name(),
            r.tunable_params,
            s.dice,
            s.miou,
            s.mae,
            s.s_measure,
            r.epoch_losses.last().copied().unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
