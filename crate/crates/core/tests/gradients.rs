use dgnam::gradcheck::{adjoint_suite, composite_suite, op_suite, DEFAULT_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for r in op_suite(100, DEFAULT_TOLERANCE, 11).unwrap() {
        eprintln!("{r:?}");
        assert!(r.passed(100), "{r:?}");
    }
}

#[test]
fn generator_encoder_chain_matches_finite_differences() {
    let r = composite_suite(100, DEFAULT_TOLERANCE, 12).unwrap();
    eprintln!("{r:?}");
    assert!(r.passed(100), "{r:?}");
}

#[test]
fn transpose_is_adjoint_of_convolution() {
    let r = adjoint_suite(100, 1e-4, 13).unwrap();
    assert_eq!(r.failures, 0, "{r:?}");
}
