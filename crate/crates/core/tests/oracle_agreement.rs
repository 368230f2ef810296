use lfseq::oracle::{oracle_check, OracleCheckConfig};

#[test]
fn recursions_agree_with_enumeration() {
    let results = oracle_check(&OracleCheckConfig::default()).unwrap();
    for r in &results {
        println!("{:?} lambda={} obj_err={:.3e} grad_err={:.3e}", r.kind, r.leaky_coeff, r.max_objective_err, r.max_grad_err);
    }
    assert!(results.iter().all(|r| r.passed));
}
