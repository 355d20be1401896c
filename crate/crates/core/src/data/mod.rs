//! Datasets, batching, synthetic generators and file formats.

mod generate;
mod ndjson;
mod standardize;

pub use generate::{generate, los_bucket, split_counts, step_labels_from, DatasetManifest, GenSpec, Generator, Splits};
pub use ndjson::{load_ndjson, read_ndjson, write_csv, write_ndjson, NDJSON_FORMAT, NDJSON_VERSION};
pub use standardize::{standardize, ChannelStats, STD_FLOOR};

use crate::encoder::TaskKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Binary (0/1) or multiclass index.
    Class(usize),
    /// Multilabel indicator vector.
    Multi(Vec<u8>),
    /// One target per step.
    Steps(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Row-major `len × input_dim`.
    pub x: Vec<f64>,
    pub len: usize,
    pub label: Label,
    /// Per-step label validity, for per-step tasks with gaps.
    pub step_mask: Option<Vec<bool>>,
    /// Continuous target behind a bucketed class label.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub input_dim: usize,
    /// First missing-value indicator channel, if indicator channels are present.
    pub indicator_from: Option<usize>,
    pub samples: Vec<Sample>,
}

/// Padded targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Class(Vec<usize>),
    /// Row-major `B × k`.
    Multi { k: usize, values: Vec<f64> },
    /// Row-major `B × T`, with `mask` 1.0 on steps that count.
    Steps { values: Vec<f64>, mask: Vec<f64> },
}

/// `B × T × R` inputs zero-padded to the longest sequence in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub x: Tensor,
    pub lengths: Vec<usize>,
    pub targets: Targets,
}

impl SequenceBatch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.x.shape()[1]
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.samples.iter().map(|s| s.len).max().unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            input_dim: self.input_dim,
            indicator_from: self.indicator_from,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Checks every sample against the task kind and input width.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            check_sample(self.task, self.input_dim, s)?;
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<SequenceBatch> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch("no samples selected".into()));
        }
        let r = self.input_dim;
        let t = indices.iter().map(|&i| self.samples[i].len).max().unwrap_or(0);
        let b = indices.len();
        let mut x = vec![0.0; b * t * r];
        let mut lengths = Vec::with_capacity(b);
        for (row, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            x[row * t * r..row * t * r + s.len * r].copy_from_slice(&s.x);
            lengths.push(s.len);
        }
        let samples = indices.iter().map(|&i| &self.samples[i]);
        let targets = match self.task {
            TaskKind::Binary | TaskKind::Multiclass(_) => Targets::Class(
                samples
                    .map(|s| match &s.label {
                        Label::Class(c) => Ok(*c),
                        _ => Err(label_mismatch(self.task, s)),
                    })
                    .collect::<Result<_>>()?,
            ),
            TaskKind::Multilabel(k) => {
                let mut values = Vec::with_capacity(b * k);
                for s in samples {
                    match &s.label {
                        Label::Multi(v) if v.len() == k => values.extend(v.iter().map(|&y| f64::from(y))),
                        _ => return Err(label_mismatch(self.task, s)),
                    }
                }
                Targets::Multi { k, values }
            }
            TaskKind::StepBinary | TaskKind::StepRegression => {
                let mut values = vec![0.0; b * t];
                let mut mask = vec![0.0; b * t];
                for (row, s) in samples.enumerate() {
                    let Label::Steps(v) = &s.label else {
                        return Err(label_mismatch(self.task, s));
                    };
                    for step in 0..s.len {
                        values[row * t + step] = v[step];
                        if s.step_mask.as_ref().is_none_or(|m| m[step]) {
                            mask[row * t + step] = 1.0;
                        }
                    }
                }
                Targets::Steps { values, mask }
            }
        };
        Ok(SequenceBatch {
            x: Tensor::new(vec![b, t, r], x)?,
            lengths,
            targets,
        })
    }
}

fn label_mismatch(task: TaskKind, s: &Sample) -> Error {
    Error::Label(format!("sample `{}` has a label incompatible with task {task}", s.id))
}

fn check_sample(task: TaskKind, input_dim: usize, s: &Sample) -> Result<()> {
    if s.len == 0 || s.x.len() != s.len * input_dim {
        return Err(Error::Shape(format!(
            "sample `{}`: {} values for {} steps of width {input_dim}",
            s.id,
            s.x.len(),
            s.len
        )));
    }
    let ok = match (&s.label, task) {
        (Label::Class(c), TaskKind::Binary) => *c < 2,
        (Label::Class(c), TaskKind::Multiclass(n)) => *c < n,
        (Label::Multi(v), TaskKind::Multilabel(k)) => v.len() == k && v.iter().all(|&y| y <= 1),
        (Label::Steps(v), TaskKind::StepBinary) => {
            v.len() == s.len && v.iter().all(|&y| y == 0.0 || y == 1.0)
        }
        (Label::Steps(v), TaskKind::StepRegression) => v.len() == s.len && v.iter().all(|y| y.is_finite()),
        _ => false,
    };
    if !ok {
        return Err(label_mismatch(task, s));
    }
    if let Some(m) = &s.step_mask {
        if m.len() != s.len {
            return Err(Error::Shape(format!("sample `{}`: step mask length", s.id)));
        }
    }
    Ok(())
}
