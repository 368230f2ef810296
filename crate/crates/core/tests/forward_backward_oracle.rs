//! Scaled recursions against the dense and enumeration references.

use lfseq::criteria::{compute, AccuracyModel, CriterionConfig, CriterionKind};
use lfseq::forward_backward::{
    backward, forward, numerator_forward_backward, occupancies, smbr_backward, smbr_forward, BoostTable,
};
use lfseq::oracle::{dense_forward_backward, enumerate_paths, random_instance, seeded_rng, InstanceShape, DEFAULT_PATH_CAP};
use lfseq::relative_error;
use proptest::prelude::*;

fn shape(leaky: bool) -> InstanceShape {
    if leaky {
        InstanceShape::leaky()
    } else {
        InstanceShape::plain()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_backward_matches_dense(seed in any::<u64>(), leaky in any::<bool>(), boost in 0.0f64..0.5) {
        let leak = if leaky { 0.1 } else { 0.0 };
        let inst = random_instance(&mut seeded_rng(seed), &shape(leaky), leak);
        let num = numerator_forward_backward(&inst.sup, &inst.ll).unwrap();
        let table = BoostTable::new(&num.gamma, boost);
        let fwd = forward(&inst.den, &inst.ll, Some(&table)).unwrap();
        let ab = backward(&inst.den, &inst.ll, Some(&table), fwd).unwrap();
        let gamma = occupancies(&inst.den, &inst.ll, Some(&table), &ab).unwrap();
        let dense = dense_forward_backward(&inst.den, inst.ll.values(), Some(table.offsets()), leak);

        prop_assert!(relative_error(ab.total_logprob, dense.total.ln()) < 1e-12);
        for (a, b) in gamma.values().iter().zip(&dense.gamma) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let z0 = ab.frame_product(0);
        for t in 0..=inst.ll.num_frames() {
            prop_assert!(relative_error(ab.frame_product(t), z0) < 1e-10);
            let dense_row = dense.alpha.row(t);
            let s: f64 = dense_row.sum();
            for (a, b) in ab.alpha.row(t).iter().zip(dense_row) {
                prop_assert!((a - b / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smbr_quantities_match_enumeration(seed in any::<u64>(), leaky in any::<bool>()) {
        let leak = if leaky { 0.1 } else { 0.0 };
        let inst = random_instance(&mut seeded_rng(seed), &shape(leaky), leak);
        let num = numerator_forward_backward(&inst.sup, &inst.ll).unwrap();
        let acc = AccuracyModel::new(num.gamma.clone(), &inst.silence_pdfs, 0.013).unwrap();
        let fwd = smbr_forward(&inst.den, &inst.ll, &acc).unwrap();
        let (_, q, gamma) = smbr_backward(&inst.den, &inst.ll, &acc, fwd).unwrap();
        let paths = enumerate_paths(&inst.den, inst.ll.num_frames(), leak, DEFAULT_PATH_CAP).unwrap();
        let frame_acc = acc.frame_accuracy();
        let x = inst.ll.values();
        prop_assert!(relative_error(q.avg_accuracy, paths.expected_accuracy(x, &frame_acc)) < 1e-10);
        for (a, b) in gamma.values().iter().zip(&paths.occupancies(x, None)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in q.cond_accuracy.iter().zip(&paths.conditional_accuracy(x, &frame_acc)) {
            prop_assert!(relative_error(*a, *b) < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn gradients_are_row_neutral(seed in any::<u64>(), kind in prop_oneof![
        Just(CriterionKind::Mmi), Just(CriterionKind::Bmmi), Just(CriterionKind::Smbr)
    ]) {
        let inst = random_instance(&mut seeded_rng(seed), &InstanceShape::plain(), 0.1);
        let cfg = CriterionConfig { silence_pdfs: inst.silence_pdfs.clone(), ..CriterionConfig::defaults(kind) };
        let out = compute(&inst.den, &inst.sup, &inst.ll, &cfg).unwrap();
        let tol = if kind == CriterionKind::Smbr { 1e-8 } else { 1e-10 };
        for row in out.grad.rows() {
            prop_assert!(row.sum().abs() < tol);
        }
    }
}

#[test]
fn boosting_never_increases_denominator() {
    // Boost offsets are non-positive, so the boosted denominator sum cannot grow.
    let mut rng = seeded_rng(11);
    for _ in 0..50 {
        let inst = random_instance(&mut rng, &InstanceShape::plain(), 0.0);
        let num = numerator_forward_backward(&inst.sup, &inst.ll).unwrap();
        let plain = forward(&inst.den, &inst.ll, None).unwrap().total_logprob;
        let boosted = forward(&inst.den, &inst.ll, Some(&BoostTable::new(&num.gamma, 0.3))).unwrap().total_logprob;
        assert!(boosted <= plain + 1e-12);
    }
}
