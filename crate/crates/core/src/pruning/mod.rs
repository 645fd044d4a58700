//! Online/reference model pair, loss-discrepancy scoring and rank selection.
//!
//! The online parameters follow gradient descent on the selected subset; the
//! reference parameters trail them through an exponential moving average
//! with pace `beta`. A sample's score is the absolute difference between its
//! loss under the two parameter sets, and each step keeps the highest-scoring
//! fraction of the batch.

mod history;
mod scorers;
mod select;

pub use history::{GradientHistory, DEFAULT_TRUNCATION_TOL};
pub use scorers::{score_baseline, ForgettingState, Scorer, ScorerKind};
pub use select::{keep_count, select_topk, PruneDecision};

use crate::error::{check_len, Error, Result};
use crate::model::{forward_loss, ModelSpec, ParameterVector, Sample};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    online: ParameterVector,
    reference: ParameterVector,
    beta: f64,
    step: u64,
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::precondition(format!(
            "beta must lie in [0, 1], got {beta}"
        )))
    }
}

impl ModelPair {
    /// Both models start from the same (pretrained) parameters.
    pub fn new(init: ParameterVector, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self {
            reference: init.clone(),
            online: init,
            beta,
            step: 0,
        })
    }

    pub fn from_parts(
        online: ParameterVector,
        reference: ParameterVector,
        beta: f64,
    ) -> Result<Self> {
        check_beta(beta)?;
        check_len("reference parameters", online.len(), reference.len())?;
        Ok(Self {
            online,
            reference,
            beta,
            step: 0,
        })
    }

    pub fn online(&self) -> &ParameterVector {
        &self.online
    }

    pub fn reference(&self) -> &ParameterVector {
        &self.reference
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_online(&mut self, online: ParameterVector) -> Result<()> {
        check_len("online parameters", self.reference.len(), online.len())?;
        self.online = online;
        Ok(())
    }

    pub fn advance_step(&mut self) {
        self.step += 1;
    }

    /// `reference - online`.
    pub fn displacement(&self) -> ParameterVector {
        self.reference.sub(&self.online)
    }

    /// `reference <- beta * online + (1 - beta) * reference`, evaluated as
    /// `reference + beta * (online - reference)` so that coinciding models
    /// stay bit-identical.
    pub fn ema_update(&mut self) -> Result<()> {
        check_beta(self.beta)?;
        check_len(
            "reference parameters",
            self.online.len(),
            self.reference.len(),
        )?;
        if self.beta == 1.0 {
            self.reference.clone_from(&self.online);
            return Ok(());
        }
        let b = self.beta;
        for (r, o) in self
            .reference
            .as_mut_slice()
            .iter_mut()
            .zip(self.online.as_slice())
        {
            *r += b * (o - *r);
        }
        Ok(())
    }

    /// Swaps the roles of the two parameter sets.
    pub fn swapped(&self) -> Self {
        Self {
            online: self.reference.clone(),
            reference: self.online.clone(),
            beta: self.beta,
            step: self.step,
        }
    }
}

/// Losses of `sample` under the online and reference parameters.
pub fn pair_losses(sample: &Sample, pair: &ModelPair, spec: &ModelSpec) -> Result<(f64, f64)> {
    Ok((
        forward_loss(pair.online(), sample, spec)?,
        forward_loss(pair.reference(), sample, spec)?,
    ))
}

/// `|L(x, online) - L(x, reference)|`.
pub fn score_molpeg(sample: &Sample, pair: &ModelPair, spec: &ModelSpec) -> Result<f64> {
    let (online, reference) = pair_losses(sample, pair, spec)?;
    Ok((online - reference).abs())
}
