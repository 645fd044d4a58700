//! Datasets, synthetic source/target generation and CSV ingestion.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Sample, Target, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Samples with contiguous ids `0..n`; `split[id]` is the partition of
/// sample `id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub task: Task,
    /// Number of classes (classification) or 0 (regression).
    pub num_classes: usize,
    pub split: Vec<Split>,
}

impl Dataset {
    /// Builds a dataset, renumbering ids in order; every sample starts in
    /// the train split.
    pub fn new(samples: Vec<Sample>, task: Task, num_classes: usize) -> Result<Self> {
        let mut samples = samples;
        let dim = samples.first().map_or(0, |s| s.features.len());
        for (id, s) in samples.iter_mut().enumerate() {
            s.id = id;
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "sample features",
                    expected: dim,
                    actual: s.features.len(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::precondition(format!(
                    "sample {id} has non-finite features"
                )));
            }
            match (task, s.target) {
                (Task::Classification, Target::Class(c)) if c < num_classes => {}
                (Task::Regression, Target::Value(v)) if v.is_finite() => {}
                (_, t) => {
                    return Err(Error::precondition(format!(
                        "sample {id}: target {t:?} invalid for {task} with {num_classes} classes"
                    )))
                }
            }
        }
        let split = vec![Split::Train; samples.len()];
        Ok(Self {
            samples,
            task,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn part(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.part(Split::Train)
    }

    pub fn val(&self) -> Vec<&Sample> {
        self.part(Split::Val)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.part(Split::Test)
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |w| self.split.iter().filter(|s| **s == w).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// `n_classes` rows of `n_features` means.
    pub class_means: Vec<Vec<f64>>,
    /// Standard deviation of every spherical component.
    pub class_cov_scale: f64,
}

/// Class `c` receives `n / k` samples plus one if `c < n % k`; samples are
/// shuffled before ids are assigned.
pub fn generate_gaussian_mixture(config: &GaussianMixtureConfig) -> Result<Dataset> {
    let GaussianMixtureConfig {
        seed,
        n_samples,
        n_features,
        n_classes,
        ref class_means,
        class_cov_scale,
    } = *config;
    if n_samples == 0 || n_features == 0 || n_classes < 2 {
        return Err(Error::precondition(
            "gaussian mixture needs n_samples > 0, n_features > 0 and n_classes >= 2",
        ));
    }
    if class_means.len() != n_classes || class_means.iter().any(|m| m.len() != n_features) {
        return Err(Error::precondition(format!(
            "class_means must be {n_classes} rows of {n_features} values"
        )));
    }
    if !(class_cov_scale >= 0.0 && class_cov_scale.is_finite()) {
        return Err(Error::precondition(
            "class_cov_scale must be finite and non-negative",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for (class, mean) in class_means.iter().enumerate() {
        let count = n_samples / n_classes + usize::from(class < n_samples % n_classes);
        for _ in 0..count {
            let features = mean
                .iter()
                .map(|m| m + class_cov_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample::new(0, features, Target::Class(class)));
        }
    }
    samples.shuffle(&mut rng);
    Dataset::new(samples, Task::Classification, n_classes)
}

/// Class means drawn i.i.d. from `N(0, separation^2)` per coordinate.
pub fn random_class_means(
    seed: u64,
    n_classes: usize,
    n_features: usize,
    separation: f64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_classes)
        .map(|_| {
            (0..n_features)
                .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub mean_shift: Vec<f64>,
    pub scale_shift: f64,
    pub label_noise: f64,
    #[serde(default)]
    pub class_prior_target: Option<Vec<f64>>,
}

impl ShiftSpec {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean_shift: vec![0.0; n_features],
            scale_shift: 1.0,
            label_noise: 0.0,
            class_prior_target: None,
        }
    }
}

/// Applies `x -> scale_shift * x + mean_shift`, flips each class label to a
/// uniformly chosen other class with probability `label_noise`, then
/// optionally rejection-samples towards `class_prior_target`. Label noise
/// and priors only affect classification datasets. Surviving samples keep
/// their split and receive fresh contiguous ids.
pub fn apply_shift(dataset: &Dataset, shift: &ShiftSpec, seed: u64) -> Result<Dataset> {
    let n_features = dataset.n_features();
    if shift.mean_shift.len() != n_features {
        return Err(Error::DimensionMismatch {
            what: "mean_shift",
            expected: n_features,
            actual: shift.mean_shift.len(),
        });
    }
    if !(shift.scale_shift > 0.0 && shift.scale_shift.is_finite()) {
        return Err(Error::precondition(
            "scale_shift must be positive and finite",
        ));
    }
    if !(0.0..0.5).contains(&shift.label_noise) {
        return Err(Error::precondition(format!(
            "label_noise must lie in [0, 0.5), got {}",
            shift.label_noise
        )));
    }
    let acceptance = match &shift.class_prior_target {
        Some(prior) => Some(acceptance_rates(dataset, prior)?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(dataset.len());
    let mut split = Vec::with_capacity(dataset.len());
    for (s, part) in dataset.samples.iter().zip(&dataset.split) {
        let features = s
            .features
            .iter()
            .zip(&shift.mean_shift)
            .map(|(x, m)| shift.scale_shift * x + m)
            .collect();
        let target = match s.target {
            Target::Class(c) if dataset.num_classes > 1 && rng.gen::<f64>() < shift.label_noise => {
                let other = rng.gen_range(0..dataset.num_classes - 1);
                Target::Class(if other >= c { other + 1 } else { other })
            }
            t => t,
        };
        if let (Some(rates), Target::Class(c)) = (&acceptance, target) {
            if rng.gen::<f64>() >= rates[c] {
                continue;
            }
        }
        samples.push(Sample::new(0, features, target));
        split.push(*part);
    }
    let mut out = Dataset::new(samples, dataset.task, dataset.num_classes)?;
    out.split = split;
    Ok(out)
}

fn acceptance_rates(dataset: &Dataset, prior: &[f64]) -> Result<Vec<f64>> {
    if dataset.task != Task::Classification || prior.len() != dataset.num_classes {
        return Err(Error::precondition(
            "class_prior_target needs one probability per class of a classification dataset",
        ));
    }
    if prior.iter().any(|p| !(*p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::precondition(
            "class_prior_target must be probabilities summing to 1",
        ));
    }
    let mut counts = vec![0usize; dataset.num_classes];
    for s in &dataset.samples {
        if let Target::Class(c) = s.target {
            counts[c] += 1;
        }
    }
    let n = dataset.len() as f64;
    let ratios: Vec<f64> = prior
        .iter()
        .zip(&counts)
        .map(|(p, &c)| if c == 0 { 0.0 } else { p / (c as f64 / n) })
        .collect();
    let max = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ratios.into_iter().map(|r| r / max).collect())
}

/// Seeded shuffle, then contiguous train/val/test assignment. Validation and
/// test sizes are `round(fraction * n)`; train takes the remainder.
pub fn split_dataset(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (train, val, test) = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::precondition(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.len();
    let n_val = (val * n as f64).round() as usize;
    let n_test = (test * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::precondition(format!(
            "split of {n} samples leaves an empty partition ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; n];
    for (rank, &id) in order.iter().enumerate() {
        split[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut out = dataset.clone();
    out.split = split;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub task: Task,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Class names in index order. Without it, classification labels must
    /// be non-negative integers.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>, task: Task) -> Self {
        Self {
            label_column: label_column.into(),
            task,
            delimiter: ',',
            classes: None,
        }
    }
}

fn delimiter_byte(schema: &CsvSchema) -> Result<u8> {
    u8::try_from(schema.delimiter)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| Error::precondition("csv delimiter must be a single ASCII character"))
}

/// One sample per data row; ids follow row order and scores start at 1.
/// Row numbers in errors count the header as row 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_byte(schema)?)
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::CsvCell {
            path: path.to_path_buf(),
            row: 1,
            column: schema.label_column.clone(),
            message: "label column not found in header".into(),
        })?;

    let mut samples = Vec::new();
    let mut seen_labels: Vec<String> = Vec::new();
    let mut max_class = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(csv_err)?;
        let cell_err = |column: usize, message: String| Error::CsvCell {
            path: path.to_path_buf(),
            row,
            column: headers.get(column).unwrap_or("?").to_string(),
            message,
        };
        let mut features = Vec::with_capacity(headers.len().saturating_sub(1));
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                continue;
            }
            let value: f64 = cell
                .trim()
                .parse()
                .map_err(|_| cell_err(col, format!("non-numeric value `{cell}`")))?;
            if !value.is_finite() {
                return Err(cell_err(col, format!("non-finite value `{cell}`")));
            }
            features.push(value);
        }
        let label = record
            .get(label_idx)
            .ok_or_else(|| cell_err(label_idx, "missing label".into()))?
            .trim();
        let target = match schema.task {
            Task::Regression => Target::Value(
                label
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| cell_err(label_idx, format!("non-numeric target `{label}`")))?,
            ),
            Task::Classification => {
                let class = match &schema.classes {
                    Some(classes) => classes.iter().position(|c| c == label),
                    None => label.parse::<usize>().ok(),
                };
                match class {
                    Some(c) => {
                        if !seen_labels.iter().any(|l| l == label) {
                            seen_labels.push(label.to_string());
                        }
                        max_class = max_class.max(c);
                        Target::Class(c)
                    }
                    None => {
                        return Err(Error::UnknownLabel {
                            path: path.to_path_buf(),
                            row,
                            label: label.to_string(),
                            seen: schema.classes.clone().unwrap_or(seen_labels),
                        })
                    }
                }
            }
        };
        samples.push(Sample::new(samples.len(), features, target));
    }
    let num_classes = match (schema.task, &schema.classes) {
        (Task::Regression, _) => 0,
        (Task::Classification, Some(classes)) => classes.len(),
        (Task::Classification, None) => (max_class + 1).max(2),
    };
    Dataset::new(samples, schema.task, num_classes)
}

/// Writes features as `f0..f{d-1}` followed by the label column; floats use
/// 17 significant digits so a reload is lossless.
pub fn write_csv(dataset: &Dataset, path: &Path, schema: &CsvSchema) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    write_csv_to(dataset, std::io::BufWriter::new(file), schema).map_err(|e| match e {
        Error::Csv { source, .. } => Error::Csv {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, out: W, schema: &CsvSchema) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: Default::default(),
        source,
    };
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter_byte(schema)?)
        .from_writer(out);
    let mut header: Vec<String> = (0..dataset.n_features()).map(|i| format!("f{i}")).collect();
    header.push(schema.label_column.clone());
    writer.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:.16e}")).collect();
        row.push(match s.target {
            Target::Class(c) => match &schema.classes {
                Some(classes) => classes
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::precondition(format!("no class name for index {c}")))?,
                None => c.to_string(),
            },
            Target::Value(v) => format!("{v:.16e}"),
        });
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: Default::default(),
        source,
    })
}
