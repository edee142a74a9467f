//! Finite-difference verification of the recorded gradients, from single
//! primitives up to the full two-stage loss, plus adjoint-structure checks.

use graphdet::checks;
use graphdet::gam::{bind_gam, gam_forward, GamConfig, GamParams};
use graphdet::geometry::Box;
use graphdet::graphs::{build_skeleton, NodeGeometry};
use graphdet::tensor::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes_gradient_check() {
    for row in checks::primitive_checks().unwrap() {
        assert!(
            row.passed(),
            "{}: rel err {} above {}",
            row.name,
            row.max_rel_err,
            row.threshold
        );
    }
}

#[test]
fn each_gam_kind_passes_gradient_check() {
    for row in checks::gam_checks().unwrap() {
        assert!(
            row.passed(),
            "{}: rel err {} above {}",
            row.name,
            row.max_rel_err,
            row.threshold
        );
    }
}

#[test]
fn full_detector_loss_passes_gradient_check() {
    let err = checks::detector_loss_check().unwrap();
    assert!(err <= checks::DETECTOR_TOL, "detector rel err {err}");
}

#[test]
fn quadratic_example_is_tight() {
    // f(θ) = θ² at θ = 3: analytic 6, central differences agree to ~1e-9.
    let theta = Tensor::vector(&[3.0]);
    let err = grad_check(&[theta], 1e-5, |tape, v| {
        let sq = tape.mul(v[0], v[0])?;
        tape.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-9, "rel err {err}");
}

#[test]
fn backward_of_sum_equals_sum_of_backwards() {
    // Linearity of adjoints over a shared GAM computation, to 1e-12.
    let mut rng = ChaCha8Rng::seed_from_u64(0x11ea);
    let d = 6;
    let cfg = GamConfig::new(d);
    let params = GamParams::init(&cfg, cfg.metric.groups + 4, &mut rng).unwrap();
    let boxes = vec![
        Box::new(8.0, 9.0, 5.0, 4.0).unwrap(),
        Box::new(15.0, 11.0, 6.0, 7.0).unwrap(),
        Box::new(11.0, 17.0, 4.0, 4.0).unwrap(),
    ];
    let skel = build_skeleton(&NodeGeometry::Roi { boxes }).unwrap();
    let features = Tensor::new(
        vec![3, d],
        (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
    .with_grad();

    // Two separate scalar losses from one forward structure.
    let run = |mode: u8| -> Vec<f64> {
        let mut tape = Tape::new();
        let f = tape.leaf(&features);
        let gam = bind_gam(&mut tape, "g", &params);
        let out = gam_forward(&mut tape, f, &skel, &gam, &cfg).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let l1 = tape.sum(sq).unwrap();
        let l2 = tape.sum(out).unwrap();
        let loss = match mode {
            0 => l1,
            1 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        let grads = tape.backward(loss).unwrap();
        grads.wrt(f).unwrap().to_vec()
    };
    let g1 = run(0);
    let g2 = run(1);
    let gsum = run(2);
    for ((a, b), s) in g1.iter().zip(&g2).zip(&gsum) {
        assert!((a + b - s).abs() < 1e-12, "adjoint linearity violated");
    }
}

#[test]
fn backward_twice_is_an_error_and_recording_after_backward_fails() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1.0, 2.0], vec![2]);
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.backward(y).is_err());
    assert!(tape.sum(x).is_err());
}

#[test]
fn nonfinite_evaluation_is_reported() {
    let theta = Tensor::vector(&[1.0e308]);
    let result = grad_check(&[theta], 1e-5, |tape, v| {
        let sq = tape.mul(v[0], v[0])?; // overflows to +inf
        tape.sum(sq)
    });
    assert!(result.is_err());
}
