use vsod_core::gradsuite::{mutant_op, registered_ops, EPS};

#[test]
fn registered_ops_pass() {
    for op in registered_ops(3) {
        let r = op.run(EPS).unwrap();
        println!("{:<20} {:>6} {:.3e}", r.name, r.checked, r.max_rel_error);
        assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn mutant_fails() {
    let r = mutant_op().run(EPS).unwrap();
    assert!(!r.passed());
}
