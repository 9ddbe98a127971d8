mod common;

use calilab::calinet::{attach, set_adapter_state, AdapterConfig, AdapterState};
use calilab::numerics::Tensor;
use common::{examples, fd, two_layer};
use rand::SeedableRng;

#[test]
fn matmul_three_by_four_times_four_by_two() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn([4, 2], 1.0, &mut rng);
    let w = Tensor::<f64>::randn([3, 2], 1.0, &mut rng);
    let err = fd::max_gradient_error(&[a, b], &move |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        g.weighted_sum(y, &w).unwrap()
    });
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn cross_entropy_gradient_within_1e_5() {
    for probe in fd::probes(40, 7).into_iter().filter(|p| p.op == "cross_entropy") {
        let err = fd::max_gradient_error(&probe.inputs, &*probe.build);
        assert!(err <= 1e-5, "relative error {err}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (i, probe) in fd::probes(100, 1).into_iter().enumerate() {
        let err = fd::max_gradient_error(&probe.inputs, &*probe.build);
        assert!(err <= 1e-4, "probe {i} ({}) relative error {err}", probe.op);
    }
}

#[test]
fn full_model_gradient() {
    let err = fd::model_gradient_error(&two_layer(), &examples(), 100, 11);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn adapter_gradient_with_frozen_base() {
    let mut m = two_layer();
    attach(&mut m, AdapterConfig::new(4, 1)).unwrap();
    // nonzero values so the key gradient is not identically zero
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    set_adapter_state(
        &mut m,
        &AdapterState {
            keys: Tensor::randn([4, 8], 0.5, &mut rng),
            values: Tensor::randn([4, 8], 0.5, &mut rng),
        },
    )
    .unwrap();
    let err = fd::model_gradient_error(&m, &examples(), 60, 12);
    assert!(err <= 1e-4, "relative error {err}");
}
