//! Finite-difference checks of a few tape operations.

use std::sync::Arc;

use promptpix::tensor::{grad_check, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Op = fn(&mut Tape, Var) -> promptpix::tensor::Result<Var>;

fn main() -> promptpix::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0));
    let w = Arc::new(Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0)));
    let ops: [(&str, Op); 4] = [
        ("softmax_rows", |t, x| t.softmax_rows(x)),
        ("gelu", |t, x| Ok(t.gelu(x))),
        ("layer_norm", |t, x| {
            let g = t.constant(Tensor::from_fn(&[6], |k| 1.0 + 0.1 * k as f64));
            let b = t.constant(Tensor::zeros(&[6]));
            t.layer_norm(x, g, b, 1e-6)
        }),
        ("matmul(x, x^T)", |t, x| {
            let xt = t.transpose(x)?;
            t.matmul(x, xt)
        }),
    ];
    for (name, op) in ops {
        let w = w.clone();
        let err = grad_check(
            |t, x| {
                let y = op(t, x)?;
                let n = t.value(y).len();
                let proj = Arc::new(Tensor::new(t.value(y).shape().to_vec(), w.data().iter().cycle().take(n).copied().collect())?);
                t.weighted_sum(y, proj)
            },
            &x,
            1e-5,
        )?;
        println!("{name:<16} max relative error {err:.2e}");
    }
    Ok(())
}
