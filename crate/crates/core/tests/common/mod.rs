#![allow(dead_code)]

use dynprune_core::data::{
    generate_gaussian_mixture, random_class_means, split_dataset, Dataset, GaussianMixtureConfig,
};
use dynprune_core::model::{init_params, Activation, ModelSpec, ParameterVector, Task};

/// 3-class, 6-feature mixture split 80/10/10.
pub fn small_mixture(n: usize, seed: u64) -> Dataset {
    let cfg = GaussianMixtureConfig {
        seed,
        n_samples: n,
        n_features: 6,
        n_classes: 3,
        class_means: random_class_means(seed + 100, 3, 6, 1.0),
        class_cov_scale: 1.0,
    };
    split_dataset(
        &generate_gaussian_mixture(&cfg).unwrap(),
        (0.8, 0.1, 0.1),
        seed,
    )
    .unwrap()
}

pub fn tanh_mlp() -> ModelSpec {
    ModelSpec::new(6, vec![8], 3, Task::Classification, Activation::Tanh).unwrap()
}

pub fn init(spec: &ModelSpec, seed: u64) -> ParameterVector {
    init_params(spec, seed)
}
