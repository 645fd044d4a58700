mod common;

use dynprune_core::model::{
    batch_gradient, init_params, per_sample_gradient, Activation, ModelSpec, ParameterVector,
    Sample, Target, Task,
};
use dynprune_core::theory::{finite_difference_oracle, relative_error};
use proptest::prelude::*;

fn arb_case() -> impl Strategy<Value = (ModelSpec, ParameterVector, Sample)> {
    (
        1usize..5,
        prop::collection::vec(1usize..5, 0..3),
        2usize..4,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_flat_map(|(d, hidden, k, classify, seed)| {
            let task = if classify {
                Task::Classification
            } else {
                Task::Regression
            };
            let out = if classify { k } else { 1 };
            let spec = ModelSpec::new(d, hidden, out, task, Activation::Tanh).unwrap();
            let params = init_params(&spec, seed);
            (
                Just(spec),
                Just(params),
                prop::collection::vec(-2.0f64..2.0, d),
                0..k,
                -2.0f64..2.0,
            )
        })
        .prop_map(|(spec, params, x, class, value)| {
            let target = match spec.task {
                Task::Classification => Target::Class(class),
                Task::Regression => Target::Value(value),
            };
            (spec, params, Sample::new(0, x, target))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_gradient_matches_central_differences((spec, params, sample) in arb_case()) {
        let analytic = per_sample_gradient(&params, &sample, &spec).unwrap();
        let numeric = finite_difference_oracle(&params, &sample, &spec, 1e-5).unwrap();
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            prop_assert!(relative_error(*a, *n) <= 1e-5, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample(seed in any::<u64>(), n in 1usize..6) {
        let spec = ModelSpec::new(3, vec![4], 2, Task::Classification, Activation::Tanh).unwrap();
        let params = init_params(&spec, seed);
        let batch: Vec<Sample> = (0..n)
            .map(|i| Sample::new(i, vec![i as f64 * 0.3, -0.5, 1.0 - i as f64 * 0.1], Target::Class(i % 2)))
            .collect();
        let mean = batch_gradient(&params, &batch, &spec).unwrap();
        let mut scratch = vec![0.0; params.len()];
        for s in &batch {
            for (acc, g) in scratch.iter_mut().zip(per_sample_gradient(&params, s, &spec).unwrap().as_slice()) {
                *acc += g / n as f64;
            }
        }
        for (a, b) in mean.as_slice().iter().zip(&scratch) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn linear_regression_gradient_is_exact() {
    let spec = ModelSpec::new(3, vec![], 1, Task::Regression, Activation::Tanh).unwrap();
    let params = ParameterVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
    let s = Sample::new(0, vec![1.0, 2.0, -1.0], Target::Value(0.75));
    let analytic = per_sample_gradient(&params, &s, &spec).unwrap();
    let numeric = finite_difference_oracle(&params, &s, &spec, 1e-3).unwrap();
    for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
        assert!((a - n).abs() < 1e-8);
    }
}

#[test]
fn halving_step_shrinks_disagreement_on_tanh() {
    let spec = common::tanh_mlp();
    let params = common::init(&spec, 3);
    let s = Sample::new(0, vec![0.4, -1.1, 0.9, 0.2, -0.3, 1.5], Target::Class(2));
    let analytic = per_sample_gradient(&params, &s, &spec).unwrap();
    let err = |h: f64| {
        let fd = finite_difference_oracle(&params, &s, &spec, h).unwrap();
        analytic.sub(&fd).norm()
    };
    assert!(err(5e-3) < err(1e-2));
    assert!(finite_difference_oracle(&params, &s, &spec, 0.0).is_err());
}
