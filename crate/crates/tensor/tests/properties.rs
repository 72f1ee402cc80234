use imp_tensor::{top_k, Tape32, Tape64, Tensor32, Tensor64};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor64> {
    prop::collection::vec(-range..range, rows * cols)
        .prop_map(move |v| Tensor64::new(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(3, 7, 1e4)) {
        let mut tape = Tape64::new();
        let v = tape.constant(x);
        let p = tape.softmax(v, 1).unwrap();
        for row in tape.value(p).unwrap().data().chunks(7) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn gather_scatter_are_adjoint(
        x in matrix(6, 3, 2.0),
        y in matrix(5, 3, 2.0),
        idx in prop::collection::vec(0usize..6, 5),
    ) {
        let mut tape = Tape64::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let g = tape.gather_rows(xv, &idx).unwrap();
        let s = tape.scatter_add_rows(yv, &idx, 6).unwrap();
        let lhs: f64 = tape.value(g).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(s).unwrap().data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn top_k_matches_sort_oracle(x in matrix(4, 8, 1.0), k in 1usize..=8) {
        let got = top_k(&x, k, 1).unwrap();
        for r in 0..4 {
            let row = x.row(r);
            let mut order: Vec<usize> = (0..8).collect();
            // stable sort on descending score keeps lower indices first on ties
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            prop_assert_eq!(&got.indices[r * k..(r + 1) * k], &order[..k]);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(data in prop::collection::vec(-3.0f32..3.0, 24)) {
        let run = || {
            let mut tape = Tape32::new();
            let x = tape.constant(Tensor32::new(&[2, 3, 4], data.clone()).unwrap());
            let w = tape.constant(Tensor32::from_fn(&[4, 4], |i| (i as f32).sin()).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h).unwrap();
            let s = tape.softmax(h, 2).unwrap();
            let m = tape.mean_pool(s, 1).unwrap();
            tape.value(m).unwrap().clone()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.data(), b.data());
    }
}

#[test]
fn top_k_ties_on_random_grid_match_oracle() {
    // coarse values force plenty of ties
    let x = Tensor64::from_fn(&[4, 8], |i| ((i * 7919) % 3) as f64).unwrap();
    let got = top_k(&x, 3, 1).unwrap();
    for r in 0..4 {
        let row = x.row(r);
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        assert_eq!(&got.indices[r * 3..r * 3 + 3], &order[..3]);
    }
}
