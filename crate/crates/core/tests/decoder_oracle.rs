use lfseq::decoder::viterbi;
use lfseq::forward_backward::forward;
use lfseq::graphs::HmmTopology;
use lfseq::oracle::{enumerate_paths, random_instance, seeded_rng, InstanceShape, DEFAULT_PATH_CAP};

#[test]
fn viterbi_matches_exhaustive_max() {
    let mut rng = seeded_rng(21);
    for _ in 0..200 {
        let inst = random_instance(&mut rng, &InstanceShape::plain(), 0.0);
        let topo = HmmTopology::uniform(inst.den.num_pdfs(), 1, 0.5).unwrap();
        let got = viterbi(&inst.den, &inst.ll, &topo).unwrap();
        let paths = enumerate_paths(&inst.den, inst.ll.num_frames(), 0.0, DEFAULT_PATH_CAP).unwrap();
        let (best, score) = paths.best(inst.ll.values()).unwrap();
        assert!((got.score - score).abs() < 1e-12);
        // Continuous random scores make exact ties impossible in practice.
        assert_eq!(got.pdfs, best.pdfs);
        let total = forward(&inst.den, &inst.ll, None).unwrap().total_logprob;
        assert!(got.score <= total + 1e-12);
    }
}

#[test]
fn viterbi_ignores_leak() {
    let mut rng = seeded_rng(5);
    let inst = random_instance(&mut rng, &InstanceShape::plain(), 0.3);
    let topo = HmmTopology::uniform(inst.den.num_pdfs(), 1, 0.5).unwrap();
    let plain = inst.den.clone().with_leaky_coeff(0.0).unwrap();
    assert_eq!(viterbi(&inst.den, &inst.ll, &topo).unwrap(), viterbi(&plain, &inst.ll, &topo).unwrap());
}
