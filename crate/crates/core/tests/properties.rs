//! Property tests over the numeric contracts.

use proptest::prelude::*;
use rgf::autodiff::Tape;
use rgf::eval::{edit_distance, rerr, wer};
use rgf::router::{interpolate, local_gate, GateVariant, ReliabilityScores};
use rgf::Tensor;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, 1..24)
}

proptest! {
    #[test]
    fn gate_stays_in_range(s in scores(), n in 1usize..40) {
        let g = local_gate(&ReliabilityScores::from_sv(s), n, GateVariant::Sv).unwrap();
        prop_assert_eq!(g.data().len(), n);
        for &x in g.data() {
            prop_assert!((0.0..=2f64.tanh()).contains(&x), "{x}");
        }
    }

    #[test]
    fn interpolation_keeps_endpoints_and_hull(s in scores(), n in 2usize..40) {
        let out = interpolate(&s, n);
        prop_assert_eq!(out[0], s[0]);
        prop_assert!((out[n - 1] - s[s.len() - 1]).abs() <= 1e-9);
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for x in out {
            prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
        }
    }

    #[test]
    fn perfect_agreement_closes_the_gate(len in 1usize..24, n in 1usize..40) {
        let g = local_gate(&ReliabilityScores::from_sv(vec![1.0; len]), n, GateVariant::Sv).unwrap();
        prop_assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wer_ignores_symbol_names(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..4, 1..7), prop::collection::vec(0u8..4, 0..7)),
            1..6,
        )
    ) {
        let (refs, hyps): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let relabel = |v: &Vec<Vec<u8>>| v.iter().map(|s| s.iter().map(|&t| (3 - t) * 10).collect::<Vec<u8>>()).collect::<Vec<_>>();
        prop_assert_eq!(wer(&refs, &hyps).unwrap(), wer(&relabel(&refs), &relabel(&hyps)).unwrap());
    }

    #[test]
    fn edit_distance_is_symmetric_and_bounded(a in prop::collection::vec(0u8..3, 0..8), b in prop::collection::vec(0u8..3, 0..8)) {
        let ab = edit_distance(&a, &b).total();
        prop_assert_eq!(ab, edit_distance(&b, &a).total());
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn rerr_sign_follows_improvement(base in 0.01f64..100.0, ours in 0.0f64..100.0) {
        let r = rerr(base, ours).unwrap();
        if ours < base - 1e-6 * base {
            prop_assert!(r >= 0.0);
        } else if ours > base + 1e-6 * base {
            prop_assert!(r <= 0.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = rgf::seed::rng(seed);
        let x = Tensor::randn([rows, cols], 5.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let p = tape.softmax(v, 1).unwrap();
        for r in 0..rows {
            let row = tape.value(p).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn cosine_lies_in_unit_interval(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = rgf::seed::rng(seed);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn([rows, cols], 3.0, &mut rng));
        let b = tape.constant(Tensor::randn([rows, cols], 3.0, &mut rng));
        let c = tape.cosine_similarity(a, b).unwrap();
        for &x in tape.value(c).data() {
            prop_assert!((-1.0..=1.0).contains(&x));
        }
        // Self-similarity is |a|^2 / (|a|^2 + eps).
        let same = tape.cosine_similarity(a, a).unwrap();
        for (r, &x) in tape.value(same).data().iter().enumerate() {
            let sq = tape.value(a).row(r).iter().map(|v| v * v).sum::<f64>();
            prop_assert!((x - sq / (sq + 1e-8)).abs() < 1e-12);
        }
    }
}
