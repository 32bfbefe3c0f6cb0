mod common;

use common::{monte_carlo_expectations, random_expectation_config};
use fpgp::rng::substream;

#[test]
fn eq_closed_forms_match_monte_carlo() {
    let mut rng = substream(11, "eq-oracle");
    let (mut ok, mut total) = (0, 0);
    for _ in 0..10 {
        let (k, b, basis) = random_expectation_config(&mut rng, false);
        let t = monte_carlo_expectations(&k, &b, &basis, 50_000, &mut rng);
        assert!(t.diag_ok);
        ok += t.vec_ok + t.outer_ok;
        total += t.vec_total + t.outer_total;
    }
    assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total} within 3 standard errors");
}

#[test]
fn linear_closed_forms_match_monte_carlo() {
    let mut rng = substream(12, "linear-oracle");
    let (mut ok, mut total) = (0, 0);
    for _ in 0..10 {
        let (k, b, basis) = random_expectation_config(&mut rng, true);
        let t = monte_carlo_expectations(&k, &b, &basis, 50_000, &mut rng);
        assert!(t.diag_ok);
        ok += t.vec_ok + t.outer_ok;
        total += t.vec_total + t.outer_total;
    }
    assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total} within 3 standard errors");
}

#[test]
fn eq_value_feature_1d_against_monte_carlo() {
    use fpgp::belief::GaussianBelief;
    use fpgp::kernels::{AugmentedBasisPoint, KernelHyperparams};
    let (ell, s2) = (0.7f64, 0.5f64);
    let k = KernelHyperparams::exponentiated_quadratic(1.0, &[ell]);
    let b = GaussianBelief::diagonal(vec![0.0], &[s2]).unwrap();
    let basis = [AugmentedBasisPoint::value(vec![0.0])];
    let t = monte_carlo_expectations(&k, &b, &basis, 100_000, &mut substream(3, "mc"));
    assert!(t.all_ok(), "{t:?}");
}
