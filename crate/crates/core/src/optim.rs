//! Plain SGD and bias-corrected Adam over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::ParameterVector;

/// `params - alpha * gradient`. A zero step size is accepted and leaves the
/// parameters untouched.
pub fn sgd_step(
    params: &ParameterVector,
    gradient: &ParameterVector,
    alpha: f64,
) -> Result<ParameterVector> {
    check_len("gradient", params.len(), gradient.len())?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::precondition(format!(
            "learning rate must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(ParameterVector::from_vec(
        params
            .as_slice()
            .iter()
            .zip(gradient.as_slice())
            .map(|(p, g)| p - alpha * g)
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &ParameterVector,
    gradient: &ParameterVector,
    config: &AdamConfig,
) -> Result<ParameterVector> {
    check_len("gradient", params.len(), gradient.len())?;
    check_len("adam state", params.len(), state.first_moment.len())?;
    let (b1, b2) = config.betas;
    state.step += 1;
    let correction1 = 1.0 - b1.powi(state.step as i32);
    let correction2 = 1.0 - b2.powi(state.step as i32);

    let mut out = params.as_slice().to_vec();
    for (i, p) in out.iter_mut().enumerate() {
        let g = gradient.as_slice()[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(ParameterVector::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_cases() {
        let p = ParameterVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(sgd_step(&p, &ParameterVector::zeros(2), 0.3).unwrap(), p);
        let out = sgd_step(&p, &vec![1.0, -1.0].into(), 0.1).unwrap();
        assert_eq!(out.as_slice(), &[0.9, 1.1]);
        assert!(sgd_step(&p, &vec![1.0].into(), 0.1).is_err());
        assert!(sgd_step(&p, &p, -0.1).is_err());
    }

    #[test]
    fn two_sgd_steps_equal_one_summed_step() {
        let p = ParameterVector::from_vec(vec![0.5, -2.0, 3.25]);
        let g1 = ParameterVector::from_vec(vec![0.25, 1.0, -0.5]);
        let g2 = ParameterVector::from_vec(vec![-0.75, 0.5, 2.0]);
        let two = sgd_step(&sgd_step(&p, &g1, 0.5).unwrap(), &g2, 0.5).unwrap();
        let mut summed = g1.clone();
        summed.add_scaled(1.0, &g2);
        let one = sgd_step(&p, &summed, 0.5).unwrap();
        for (a, b) in two.as_slice().iter().zip(one.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_about_lr_per_coordinate() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let p = ParameterVector::from_vec(vec![1.0, -3.0, 0.0, 2.0]);
        let g = ParameterVector::from_vec(vec![0.5, -2.0, 1e-3, 40.0]);
        let mut state = AdamState::new(4);
        let out = adam_step(&mut state, &p, &g, &cfg).unwrap();
        for i in 0..4 {
            let delta = out.as_slice()[i] - p.as_slice()[i];
            assert!(delta.abs() > 0.9 * cfg.learning_rate && delta.abs() <= cfg.learning_rate);
            assert_eq!(delta.signum(), -g.as_slice()[i].signum());
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = AdamConfig::default();
        let mut p = ParameterVector::from_vec(vec![1.0, -3.0]);
        let start = p.clone();
        let mut state = AdamState::new(2);
        for _ in 0..10 {
            p = adam_step(&mut state, &p, &ParameterVector::zeros(2), &cfg).unwrap();
        }
        assert_eq!(p, start);
    }

    #[test]
    fn adam_matches_scratch_on_quadratic() {
        // f(x) = 0.5 * k * (x - c)^2, gradient k (x - c).
        let (k, c) = (3.0, 1.5);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
        };
        let mut x = ParameterVector::from_vec(vec![-2.0]);
        let mut state = AdamState::new(1);

        let (mut sx, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = k * (x.as_slice()[0] - c);
            x = adam_step(&mut state, &x, &vec![g].into(), &cfg).unwrap();

            let sg = k * (sx - c);
            m = 0.9 * m + 0.1 * sg;
            v = 0.999 * v + 0.001 * sg * sg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            sx -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((x.as_slice()[0] - sx).abs() < 1e-12);
        }
    }
}
