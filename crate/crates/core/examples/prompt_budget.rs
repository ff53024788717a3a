//! Tunable parameter counts per variant and tuned-stage set.

use promptpix::backbone::{build_model, count_params, BackboneConfig, Role};
use promptpix::prompting::AblationVariant;

fn main() -> promptpix::Result<()> {
    let base = BackboneConfig::default();
    let full = build_model(&base)?;
    let total = count_params(&full, &full.names(Role::Frozen)) + count_params(&full, &full.names(Role::Tunable));
    println!("backbone + decoder + prompts: {total} parameters");
    println!("{:<14} {:>10} {:>8}", "variant", "tunable", "share");
    for v in AblationVariant::ALL {
        let cfg = BackboneConfig { ablation_variant: v, ..base.clone() };
        let p = build_model(&cfg)?;
        let n = count_params(&p, &p.names(Role::Tunable));
        println!("{:<14} {:>10} {:>7.2}%", v.name(), n, 100.0 * n as f64 / total as f64);
    }
    println!();
    for k in 0..=4 {
        let cfg = BackboneConfig { tuned_stages: (1..=k).collect(), ..base.clone() };
        let p = build_model(&cfg)?;
        println!("stages 1..={k}: {} tunable", count_params(&p, &p.names(Role::Tunable)));
    }
    Ok(())
}
