//! Scores a few hand-made predictions against one mask.

use promptpix::image::BinaryMask;
use promptpix::metrics::evaluate;

fn main() -> promptpix::Result<()> {
    let (h, w) = (8, 8);
    let gt: Vec<u8> = (0..h * w).map(|p| u8::from((2..6).contains(&(p / w)) && (2..6).contains(&(p % w)))).collect();
    let mask = BinaryMask::new(h, w, gt.clone())?;
    let exact: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    let soft: Vec<f64> = exact.iter().map(|v| 0.2 + 0.6 * v).collect();
    let shifted: Vec<f64> = (0..h * w).map(|p| if p % w > 0 { exact[p - 1] } else { 0.0 }).collect();
    let empty = vec![0.0; h * w];
    println!("{:<8} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "pred", "dice", "miou", "mae", "acc", "s_m", "e_m");
    for (name, pred) in [("exact", &exact), ("soft", &soft), ("shifted", &shifted), ("empty", &empty)] {
        let r = evaluate(pred, &mask)?;
        println!(
            "{name:<8} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
            r.dice, r.miou, r.mae, r.accuracy, r.s_measure, r.e_measure
        );
    }
    Ok(())
}
