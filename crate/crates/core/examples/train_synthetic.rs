//! Trains the full prompted model on synthetic blobs, saves a checkpoint and
//! reports test metrics.
//!
//!     cargo run --release --example train_synthetic -- [epochs] [checkpoint]

use promptpix::backbone::{build_model, BackboneConfig, Segmenter};
use promptpix::checkpoint;
use promptpix::config::RunConfig;
use promptpix::metrics::MetricReport;
use promptpix::train::{evaluate_dataset, synth_dataset, train, SynthConfig, TrainConfig};

fn main() -> promptpix::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let path = args.next().unwrap_or_else(|| "synthetic.ckpt".into());
    let data = synth_dataset(80, &SynthConfig::default(), 1)?;
    let (train_set, test_set) = data.split_at(64);
    let cfg = RunConfig {
        backbone: BackboneConfig::default(),
        train: TrainConfig { max_epochs: epochs, ..Default::default() },
    };
    let model = Segmenter::new(cfg.backbone.clone())?;
    let mut params = build_model(&cfg.backbone)?;
    let before = MetricReport::mean(&evaluate_dataset(&model, &params, test_set)?);
    train(&model, &mut params, train_set, &cfg.train, |e, loss| println!("epoch {:>3} loss {loss:.5}", e + 1))?;
    let after = MetricReport::mean(&evaluate_dataset(&model, &params, test_set)?);
    println!("dice {:.4} -> {:.4}, mae {:.4} -> {:.4}", before.dice, after.dice, before.mae, after.mae);
    checkpoint::save(&path, &cfg, &params)?;
    println!("checkpoint written to {path}");
    Ok(())
}
