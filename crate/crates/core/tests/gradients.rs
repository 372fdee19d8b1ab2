//! Analytic gradients against central finite differences.

mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn generation_loss_gradients() {
    for seed in [1, 2] {
        let (mse, kl, n) = dagm_gradient_errors(seed);
        assert!(n <= 1000, "{n} parameters");
        assert!(mse < TOL, "mse gradient error {mse}");
        assert!(kl < TOL, "kl gradient error {kl}");
    }
}

#[test]
fn discrimination_loss_gradients() {
    let e = ddm_gradient_errors(3);
    assert!(e.params <= 1000, "{} parameters", e.params);
    assert!(e.student < TOL, "student {}", e.student);
    assert!(e.classifier < TOL, "classifier {}", e.classifier);
    assert!(e.nll_only < TOL, "nll {}", e.nll_only);
    assert!(e.distance < TOL, "distance {}", e.distance);
}

#[test]
fn margin_loss_gradients() {
    for seed in 0..5 {
        let e = pom_gradient_error(seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn classifier_gradients() {
    let (ce, guide) = classifier_gradient_errors(4);
    assert!(ce < TOL, "cross-entropy {ce}");
    assert!(guide < TOL, "image logit input gradient {guide}");
}
