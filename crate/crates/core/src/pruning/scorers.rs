use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{score_molpeg, ModelPair};
use crate::error::{Error, Result};
use crate::model::{
    argmax, forward_loss, loss_and_gradient, predict, softmax, ModelSpec, Sample, Target, Task,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Molpeg,
    SoftRandom,
    LossMagnitude,
    Grand,
    El2n,
    Forgetting,
    Entropy,
    LeastConfidence,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 8] = [
        ScorerKind::Molpeg,
        ScorerKind::SoftRandom,
        ScorerKind::LossMagnitude,
        ScorerKind::Grand,
        ScorerKind::El2n,
        ScorerKind::Forgetting,
        ScorerKind::Entropy,
        ScorerKind::LeastConfidence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Molpeg => "molpeg",
            ScorerKind::SoftRandom => "soft_random",
            ScorerKind::LossMagnitude => "loss_magnitude",
            ScorerKind::Grand => "grand",
            ScorerKind::El2n => "el2n",
            ScorerKind::Forgetting => "forgetting",
            ScorerKind::Entropy => "entropy",
            ScorerKind::LeastConfidence => "least_confidence",
        }
    }

    /// Whether the score depends on anything beyond `(sample, pair, spec)`.
    pub fn is_stateful(self) -> bool {
        matches!(self, ScorerKind::SoftRandom | ScorerKind::Forgetting)
    }

    pub fn supports(self, task: Task) -> bool {
        !(task == Task::Regression
            && matches!(
                self,
                ScorerKind::El2n
                    | ScorerKind::Entropy
                    | ScorerKind::LeastConfidence
                    | ScorerKind::Forgetting
            ))
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ScorerKind::ALL.iter().map(|k| k.as_str()).collect();
                format!(
                    "unknown scorer `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Per-sample prediction correctness history for the forgetting scorer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForgettingState {
    last_correct: HashMap<usize, bool>,
    events: HashMap<usize, u32>,
}

impl ForgettingState {
    /// Records the current correctness of `id` and returns its cumulative
    /// number of correct-to-incorrect transitions.
    pub fn observe(&mut self, id: usize, correct: bool) -> u32 {
        let previous = self.last_correct.insert(id, correct);
        let count = self.events.entry(id).or_insert(0);
        if previous == Some(true) && !correct {
            *count += 1;
        }
        *count
    }

    pub fn events(&self, id: usize) -> u32 {
        self.events.get(&id).copied().unwrap_or(0)
    }
}

fn unsupported(kind: ScorerKind, task: Task) -> Error {
    Error::UnsupportedTask {
        scorer: kind.to_string(),
        task: task.to_string(),
    }
}

fn class_probabilities(
    kind: ScorerKind,
    sample: &Sample,
    pair: &ModelPair,
    spec: &ModelSpec,
) -> Result<(Vec<f64>, usize)> {
    match sample.target {
        Target::Class(c) if spec.task == Task::Classification => {
            let logits = predict(pair.online(), &sample.features, spec)?;
            Ok((softmax(&logits), c))
        }
        _ => Err(unsupported(kind, spec.task)),
    }
}

/// Scores one sample with any scorer kind, using the online parameters for
/// every single-model criterion.
///
/// `rng` feeds `soft_random`; `forgetting` is required for `forgetting` and
/// ignored otherwise.
pub fn score_baseline<R: Rng + ?Sized>(
    kind: ScorerKind,
    sample: &Sample,
    pair: &ModelPair,
    spec: &ModelSpec,
    rng: &mut R,
    forgetting: Option<&mut ForgettingState>,
) -> Result<f64> {
    match kind {
        ScorerKind::Molpeg => score_molpeg(sample, pair, spec),
        ScorerKind::SoftRandom => Ok(rng.gen::<f64>()),
        ScorerKind::LossMagnitude => forward_loss(pair.online(), sample, spec),
        ScorerKind::Grand => Ok(loss_and_gradient(pair.online(), sample, spec)?.1.norm()),
        ScorerKind::El2n => {
            let (probs, c) = class_probabilities(kind, sample, pair, spec)?;
            let sq: f64 = probs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let e = if i == c { p - 1.0 } else { *p };
                    e * e
                })
                .sum();
            Ok(sq.sqrt())
        }
        ScorerKind::Entropy => {
            let (probs, _) = class_probabilities(kind, sample, pair, spec)?;
            Ok(-probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>())
        }
        ScorerKind::LeastConfidence => {
            let (probs, _) = class_probabilities(kind, sample, pair, spec)?;
            Ok(1.0 - probs.iter().copied().fold(0.0, f64::max))
        }
        ScorerKind::Forgetting => {
            let state = forgetting.ok_or_else(|| {
                Error::precondition("forgetting scorer requires a forgetting state")
            })?;
            let (probs, c) = class_probabilities(kind, sample, pair, spec)?;
            Ok(state.observe(sample.id, argmax(&probs) == c) as f64)
        }
    }
}

/// A scorer kind bundled with the state its criterion needs.
#[derive(Debug, Clone)]
pub struct Scorer {
    kind: ScorerKind,
    rng: ChaCha8Rng,
    forgetting: ForgettingState,
}

impl Scorer {
    pub fn new(kind: ScorerKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep the random-score stream apart from any shuffling stream
        // derived from the same seed.
        rng.set_stream(1);
        Self {
            kind,
            rng,
            forgetting: ForgettingState::default(),
        }
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    pub fn score(&mut self, sample: &Sample, pair: &ModelPair, spec: &ModelSpec) -> Result<f64> {
        score_baseline(
            self.kind,
            sample,
            pair,
            spec,
            &mut self.rng,
            Some(&mut self.forgetting),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation, ParameterVector};

    fn classifier() -> ModelSpec {
        ModelSpec::new(1, vec![], 2, Task::Classification, Activation::Tanh).unwrap()
    }

    fn pair_with(params: Vec<f64>) -> ModelPair {
        ModelPair::new(ParameterVector::from_vec(params), 0.5).unwrap()
    }

    fn score(kind: ScorerKind, s: &Sample, pair: &ModelPair, spec: &ModelSpec) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = ForgettingState::default();
        score_baseline(kind, s, pair, spec, &mut rng, Some(&mut state))
    }

    #[test]
    fn names_round_trip() {
        for k in ScorerKind::ALL {
            assert_eq!(k.as_str().parse::<ScorerKind>().unwrap(), k);
        }
        assert!("momentum".parse::<ScorerKind>().is_err());
    }

    #[test]
    fn uniform_prediction_entropy_and_confidence() {
        let spec = classifier();
        let pair = pair_with(vec![0.0; 4]);
        let s = Sample::new(0, vec![1.0], Target::Class(0));
        let h = score(ScorerKind::Entropy, &s, &pair, &spec).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(
            score(ScorerKind::LeastConfidence, &s, &pair, &spec).unwrap(),
            0.5
        );
    }

    #[test]
    fn confident_correct_prediction_scores_vanish() {
        let spec = classifier();
        // logits (gap, 0) for x = 1
        let pair = pair_with(vec![800.0, 0.0, 0.0, 0.0]);
        let s = Sample::new(0, vec![1.0], Target::Class(0));
        assert_eq!(score(ScorerKind::El2n, &s, &pair, &spec).unwrap(), 0.0);
        assert_eq!(score(ScorerKind::Grand, &s, &pair, &spec).unwrap(), 0.0);
        assert_eq!(
            score(ScorerKind::LossMagnitude, &s, &pair, &spec).unwrap(),
            0.0
        );
    }

    #[test]
    fn classification_only_scorers_reject_regression() {
        let spec = ModelSpec::new(2, vec![], 1, Task::Regression, Activation::Tanh).unwrap();
        let pair = pair_with(vec![0.0; 3]);
        let s = Sample::new(0, vec![1.0, 1.0], Target::Value(1.0));
        for k in [
            ScorerKind::El2n,
            ScorerKind::Entropy,
            ScorerKind::LeastConfidence,
            ScorerKind::Forgetting,
        ] {
            assert!(!k.supports(Task::Regression));
            assert!(matches!(
                score(k, &s, &pair, &spec),
                Err(Error::UnsupportedTask { .. })
            ));
        }
        assert!(score(ScorerKind::Grand, &s, &pair, &spec).unwrap() > 0.0);
    }

    #[test]
    fn forgetting_counts_correct_to_incorrect_transitions() {
        let spec = classifier();
        let right = pair_with(vec![5.0, 0.0, 0.0, 0.0]);
        let wrong = pair_with(vec![-5.0, 0.0, 0.0, 0.0]);
        let s = Sample::new(3, vec![1.0], Target::Class(0));
        let mut scorer = Scorer::new(ScorerKind::Forgetting, 0);
        let seq = [&wrong, &right, &wrong, &wrong, &right, &wrong];
        let counts: Vec<f64> = seq
            .iter()
            .map(|p| scorer.score(&s, p, &spec).unwrap())
            .collect();
        assert_eq!(counts, vec![0.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(score_baseline(
            ScorerKind::Forgetting,
            &s,
            &right,
            &spec,
            &mut ChaCha8Rng::seed_from_u64(0),
            None
        )
        .is_err());
    }

    #[test]
    fn soft_random_is_seeded_uniform() {
        let spec = classifier();
        let pair = pair_with(vec![0.0; 4]);
        let s = Sample::new(0, vec![1.0], Target::Class(0));
        let mut a = Scorer::new(ScorerKind::SoftRandom, 42);
        let mut b = Scorer::new(ScorerKind::SoftRandom, 42);
        for _ in 0..100 {
            let x = a.score(&s, &pair, &spec).unwrap();
            assert_eq!(x, b.score(&s, &pair, &spec).unwrap());
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn deterministic_scorers_are_pure() {
        let spec = ModelSpec::new(3, vec![5], 3, Task::Classification, Activation::Tanh).unwrap();
        let pair =
            ModelPair::from_parts(init_params(&spec, 1), init_params(&spec, 2), 0.5).unwrap();
        let s = Sample::new(4, vec![0.3, -1.2, 0.8], Target::Class(1));
        for k in ScorerKind::ALL
            .into_iter()
            .filter(|k| *k != ScorerKind::SoftRandom)
        {
            let mut scorer = Scorer::new(k, 0);
            let a = scorer.score(&s, &pair, &spec).unwrap();
            let b = scorer.score(&s, &pair, &spec).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{k}");
            assert!(a >= 0.0);
        }
    }
}
