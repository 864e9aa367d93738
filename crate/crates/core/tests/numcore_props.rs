mod common;

use common::grad_suite::op_errors;
use pianoflow::numcore::rng;
use pianoflow::numcore::{attention_forward, Graph};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        for (name, err) in op_errors(seed) {
            prop_assert!(err <= 1e-4, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..6, d in 1usize..5) {
        let mut r = rng::seeded(seed);
        let q = rng::normal(&mut r, &[nq, d]).map(|v| 3.0 * v);
        let k = rng::normal(&mut r, &[nk, d]);
        let v = rng::normal(&mut r, &[nk, 2]);
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let (_, w) = pianoflow::numcore::nn::attention_with_weights(&mut g, q, k, v, 1).unwrap();
        for row in g.value(w).chunks(nk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(attention_forward(&mut g, q, k, v).is_ok());
    }
}
