//! Randomized invariants.

mod common;

use proptest::prelude::*;
use promptpix::image::{build_xylab, ImageRGB};
use promptpix::superpixel;
use promptpix::tensor::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn small_image() -> impl Strategy<Value = ImageRGB> {
    (2usize..7, 2usize..7).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), h * w * 3).prop_map(move |d| ImageRGB::new(h, w, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(3, 5)) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax_rows(v).unwrap();
        let out = t.value(s);
        for r in 0..3 {
            let sum: f64 = out.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(out.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let mut t = Tape::new();
        let (av, bv, cv) = (t.constant(a), t.constant(b), t.constant(c));
        let ab = t.matmul(av, bv).unwrap();
        let left = t.matmul(ab, cv).unwrap();
        let bc = t.matmul(bv, cv).unwrap();
        let right = t.matmul(av, bc).unwrap();
        let scale = t.value(left).data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(t.value(left).max_abs_diff(t.value(right)) <= 1e-12 * scale);
    }

    #[test]
    fn soft_slic_columns_and_hull(img in small_image(), m in 1usize..5, temp in 0.05f64..2.0) {
        let m = m.min(img.height * img.width);
        let feats = build_xylab(&img, 1.0).unwrap();
        // some counts have no grid tiling on tiny images; those are rejected
        let result = superpixel::iterate(&feats, m, 3, temp);
        prop_assume!(!matches!(result, Err(promptpix::Error::InvalidCount { .. })));
        let (assoc, centers) = result.unwrap();
        prop_assert!(assoc.column_sum_error() < 1e-12);
        // centers are convex combinations of pixel features
        for d in 0..5 {
            let col: Vec<f64> = (0..feats.n()).map(|p| feats.matrix.get(p, d)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..m {
                let v = centers.s.get(i, d);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
