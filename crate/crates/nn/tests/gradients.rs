use epigraph_nn::gradcheck::{run_graph_layer_check, run_primitive_suite};
use epigraph_nn::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_finite_differences() {
    let results = run_primitive_suite(50, 11).unwrap();
    for (name, report) in &results {
        assert!(
            report.passed(),
            "{name}: {} of {} entries off (max rel {:.2e}, max abs {:.2e})",
            report.failures,
            report.entries,
            report.max_rel_err,
            report.max_abs_err
        );
    }
}

#[test]
fn graph_layer_matches_finite_differences() {
    let report = run_graph_layer_check(50, 5).unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #[test]
    fn segment_softmax_groups_sum_to_one(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..20),
        n_seg in 1usize..4,
    ) {
        let seg: Vec<usize> = (0..logits.len()).map(|i| (i * 7 + 3) % n_seg).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(&logits));
        let y = tape.segment_softmax(x, seg.clone().into(), n_seg).unwrap();
        let mut sums = vec![0.0; n_seg];
        for (i, &s) in seg.iter().enumerate() {
            sums[s] += tape.value(y).data()[i];
        }
        for (s, total) in sums.iter().enumerate() {
            if seg.contains(&s) {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
