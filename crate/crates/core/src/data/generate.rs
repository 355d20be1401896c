//! Synthetic stand-ins for the four clinical task shapes.
//!
//! Every label follows a closed-form rule of the generated series, so ground
//! truth can be recomputed from the data alone:
//!
//! * `windowed-binary`: channel 0 is `μ + 0.5ε_t` with `μ ~ N(0,1)` per
//!   sample. Label is 1 when the mean of channel 0 over the last `w` steps
//!   exceeds `τ = z(1 - skew) · sqrt(1 + 0.25/w)`, so about `skew` of the
//!   samples are positive.
//! * `long-range`: channel 0 flags the motif step `p`, channels `1..=K` hold
//!   `±1` motif bits at `p`, channels `K+1..=2K` hold `±1` cue bits at the
//!   last step. Label `k` is 1 when motif and cue bit `k` differ. Only a
//!   representation at the last step that also sees step `p` can solve it.
//! * `step-binary`: channel 0 is white noise `ε_t`, `a_t = 0.8·a_{t-1} + ε_t`
//!   and `label_t = a_t > z(1 - skew) / sqrt(1 - 0.64)`.
//! * `length-of-stay`: the stay lasts `S = len + rem` steps and channel 0 is
//!   the elapsed fraction `t / S`. The class buckets the remaining steps
//!   `rem` (24 steps per day): under one day, one bucket per day for days
//!   1 to 7, one for 8 to 14 days, one beyond 14 days.
//!
//! Unused channels carry standard normal noise. Lengths are uniform in
//! `min_len..=len`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Dataset, Label, Sample};
use crate::encoder::TaskKind;
use crate::error::{Error, Result};
use crate::kv::{exact, KvMap};

pub const LEAK: f64 = 0.8;
pub const LOS_BUCKETS: usize = 10;
/// Longest remaining stay the length-of-stay generator draws, in steps.
pub const LOS_MAX_REMAINING: f64 = 720.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    WindowedBinary,
    LongRange,
    StepBinary,
    LengthOfStay,
}

impl Generator {
    pub const ALL: [Generator; 4] = [
        Generator::WindowedBinary,
        Generator::LongRange,
        Generator::StepBinary,
        Generator::LengthOfStay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::WindowedBinary => "windowed-binary",
            Generator::LongRange => "long-range",
            Generator::StepBinary => "step-binary",
            Generator::LengthOfStay => "length-of-stay",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Generator::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::UnknownGenerator(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub generator: Generator,
    pub n: usize,
    /// Longest sequence length.
    pub len: usize,
    /// Shortest sequence length; equal to `len` for fixed windows.
    pub min_len: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Target positive rate for the thresholded generators.
    pub skew: f64,
    /// Trailing window `w` of `windowed-binary`.
    pub window: usize,
    /// Number of labels `K` of `long-range`.
    pub labels: usize,
    /// 1-based motif step of `long-range`.
    pub motif_pos: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

impl GenSpec {
    pub fn new(generator: Generator, n: usize, len: usize, input_dim: usize, seed: u64) -> Self {
        GenSpec {
            generator,
            n,
            len,
            min_len: len,
            input_dim,
            seed,
            skew: 0.5,
            window: 8,
            labels: 3,
            motif_pos: 1,
            splits: [0.7, 0.15, 0.15],
        }
    }

    pub fn task(&self) -> TaskKind {
        match self.generator {
            Generator::WindowedBinary => TaskKind::Binary,
            Generator::LongRange => TaskKind::Multilabel(self.labels),
            Generator::StepBinary => TaskKind::StepBinary,
            Generator::LengthOfStay => TaskKind::Multiclass(LOS_BUCKETS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.len == 0 || self.min_len == 0 || self.min_len > self.len {
            return bad(format!("need 1 <= min_len <= len, got {} and {}", self.min_len, self.len));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if !(self.skew > 0.0 && self.skew < 1.0) {
            return bad(format!("skew must lie in (0, 1), got {}", self.skew));
        }
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f)) || self.splits.iter().sum::<f64>() > 1.0 + 1e-9 {
            return bad(format!("split fractions {:?} must be in [0, 1] and sum to at most 1", self.splits));
        }
        match self.generator {
            Generator::WindowedBinary if self.window == 0 => bad("window must be >= 1".into()),
            Generator::LongRange => {
                if self.labels == 0 {
                    return bad("labels must be >= 1".into());
                }
                if self.input_dim < 2 * self.labels + 1 {
                    return bad(format!(
                        "long-range with {} labels needs input_dim >= {}",
                        self.labels,
                        2 * self.labels + 1
                    ));
                }
                if self.motif_pos == 0 || self.motif_pos >= self.min_len {
                    return bad(format!(
                        "motif_pos must lie in 1..{} (before the last step)",
                        self.min_len
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("generator", self.generator);
        kv.set("task", self.task());
        kv.set("n", self.n);
        kv.set("len", self.len);
        kv.set("min_len", self.min_len);
        kv.set("input_dim", self.input_dim);
        kv.set("seed", self.seed);
        kv.set("skew", exact(self.skew));
        kv.set("window", self.window);
        kv.set("labels", self.labels);
        kv.set("motif_pos", self.motif_pos);
        kv.set("split.train", exact(self.splits[0]));
        kv.set("split.val", exact(self.splits[1]));
        kv.set("split.test", exact(self.splits[2]));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let generator: Generator = kv.require("generator")?;
        let len = kv.require("len")?;
        let mut spec = GenSpec::new(generator, kv.require("n")?, len, kv.require("input_dim")?, kv.require("seed")?);
        spec.min_len = kv.parse_or("min_len", len)?;
        spec.skew = kv.parse_or("skew", spec.skew)?;
        spec.window = kv.parse_or("window", spec.window)?;
        spec.labels = kv.parse_or("labels", spec.labels)?;
        spec.motif_pos = kv.parse_or("motif_pos", spec.motif_pos)?;
        spec.splits = [
            kv.parse_or("split.train", spec.splits[0])?,
            kv.parse_or("split.val", spec.splits[1])?,
            kv.parse_or("split.test", spec.splits[2])?,
        ];
        Ok(spec)
    }
}

fn upper_quantile(skew: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - skew)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Bucket of a remaining stay measured in steps (hours).
pub fn los_bucket(remaining: f64) -> usize {
    let days = remaining / 24.0;
    if days < 1.0 {
        0
    } else if days < 8.0 {
        days.floor() as usize
    } else if days < 15.0 {
        8
    } else {
        9
    }
}

/// Produces the dataset described by `spec`, plus a manifest whose split
/// counts follow [`split_counts`].
pub fn generate(spec: &GenSpec) -> Result<(Dataset, DatasetManifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = spec.input_dim;
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let len = rng.random_range(spec.min_len..=spec.len);
        let mut x: Vec<f64> = (0..len * r).map(|_| normal(&mut rng)).collect();
        let mut value = None;
        let label = match spec.generator {
            Generator::WindowedBinary => {
                let mu = normal(&mut rng);
                for t in 0..len {
                    x[t * r] = mu + 0.5 * normal(&mut rng);
                }
                let w = spec.window.min(len);
                let tau = upper_quantile(spec.skew) * (1.0 + 0.25 / w as f64).sqrt();
                let mean = (len - w..len).map(|t| x[t * r]).sum::<f64>() / w as f64;
                Label::Class((mean > tau) as usize)
            }
            Generator::LongRange => {
                let k = spec.labels;
                let p = spec.motif_pos - 1;
                for t in 0..len {
                    for c in 0..=2 * k {
                        x[t * r + c] = 0.0;
                    }
                }
                x[p * r] = 1.0;
                let mut bits = Vec::with_capacity(k);
                for j in 0..k {
                    let motif = rng.random_bool(0.5);
                    let cue = rng.random_bool(0.5);
                    x[p * r + 1 + j] = if motif { 1.0 } else { -1.0 };
                    x[(len - 1) * r + 1 + k + j] = if cue { 1.0 } else { -1.0 };
                    bits.push((motif != cue) as u8);
                }
                Label::Multi(bits)
            }
            Generator::StepBinary => {
                let tau = upper_quantile(spec.skew) / (1.0 - LEAK * LEAK).sqrt();
                let mut acc = 0.0;
                let mut steps = Vec::with_capacity(len);
                for t in 0..len {
                    acc = LEAK * acc + x[t * r];
                    steps.push(if acc > tau { 1.0 } else { 0.0 });
                }
                Label::Steps(steps)
            }
            Generator::LengthOfStay => {
                let u: f64 = rng.random();
                let rem = (u * LOS_MAX_REMAINING.ln()).exp().floor().max(1.0);
                let stay = len as f64 + rem;
                for t in 0..len {
                    x[t * r] = (t + 1) as f64 / stay;
                }
                value = Some(rem);
                Label::Class(los_bucket(rem))
            }
        };
        samples.push(Sample {
            id: format!("s{i:06}"),
            x,
            len,
            label,
            step_mask: None,
            value,
        });
    }
    let dataset = Dataset {
        task: spec.task(),
        input_dim: r,
        indicator_from: None,
        samples,
    };
    let manifest = DatasetManifest::describe(spec, &dataset);
    Ok((dataset, manifest))
}

/// Relabels `ds` with the `step-binary` rule applied to `channel`, keeping
/// ids and inputs. Pairs with a sequence-level dataset for multi-task runs:
/// a noise channel of `windowed-binary` gives an independent step task.
pub fn step_labels_from(ds: &Dataset, channel: usize, skew: f64) -> Result<Dataset> {
    if channel >= ds.input_dim {
        return Err(Error::Config(format!("channel {channel} out of range for {} inputs", ds.input_dim)));
    }
    if !(skew > 0.0 && skew < 1.0) {
        return Err(Error::Config(format!("skew must lie in (0, 1), got {skew}")));
    }
    let r = ds.input_dim;
    let tau = upper_quantile(skew) / (1.0 - LEAK * LEAK).sqrt();
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            let steps = (0..s.len)
                .map(|t| {
                    acc = LEAK * acc + s.x[t * r + channel];
                    if acc > tau { 1.0 } else { 0.0 }
                })
                .collect();
            Sample {
                label: Label::Steps(steps),
                step_mask: None,
                value: None,
                ..s.clone()
            }
        })
        .collect();
    Ok(Dataset {
        task: TaskKind::StepBinary,
        input_dim: ds.input_dim,
        indicator_from: ds.indicator_from,
        samples,
    })
}

/// Train and validation counts are rounded; the test split takes the rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Contiguous split in generation order; samples are i.i.d. so no
    /// shuffle is needed.
    pub fn from_counts(ds: &Dataset, counts: [usize; 3]) -> Splits {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (a, rest) = idx.split_at(counts[0].min(ds.len()));
        let (b, c) = rest.split_at(counts[1].min(rest.len()));
        Splits {
            train: ds.subset(a),
            val: ds.subset(b),
            test: ds.subset(&c[..counts[2].min(c.len())]),
        }
    }
}

/// Everything needed to regenerate a dataset, plus summary facts.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec: GenSpec,
    pub counts: [usize; 3],
    /// Fraction of positive labels (all labels for multilabel and per-step
    /// tasks); the modal class share for multiclass.
    pub class_balance: f64,
}

impl DatasetManifest {
    fn describe(spec: &GenSpec, ds: &Dataset) -> Self {
        DatasetManifest {
            spec: spec.clone(),
            counts: split_counts(ds.len(), spec.splits),
            class_balance: class_balance(ds),
        }
    }

    pub fn regenerate(&self) -> Result<Splits> {
        let (ds, _) = generate(&self.spec)?;
        Ok(Splits::from_counts(&ds, self.counts))
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.spec.to_kv();
        kv.set("count.train", self.counts[0]);
        kv.set("count.val", self.counts[1]);
        kv.set("count.test", self.counts[2]);
        kv.set("class_balance", exact(self.class_balance));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let spec = GenSpec::from_kv(kv)?;
        let counts = [kv.require("count.train")?, kv.require("count.val")?, kv.require("count.test")?];
        if counts.iter().sum::<usize>() != spec.n {
            return Err(Error::Config(format!("split counts {counts:?} do not add up to n = {}", spec.n)));
        }
        Ok(DatasetManifest {
            spec,
            counts,
            class_balance: kv.parse_or("class_balance", f64::NAN)?,
        })
    }
}

impl FromStr for DatasetManifest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetManifest::from_kv(&KvMap::parse(s)?)
    }
}

fn class_balance(ds: &Dataset) -> f64 {
    let mut pos = 0.0;
    let mut total = 0.0;
    let mut counts = vec![0usize; ds.task.logits()];
    for s in &ds.samples {
        match &s.label {
            Label::Class(c) => {
                counts[*c] += 1;
                pos += (*c == 1) as usize as f64;
                total += 1.0;
            }
            Label::Multi(v) => {
                pos += v.iter().map(|&b| f64::from(b)).sum::<f64>();
                total += v.len() as f64;
            }
            Label::Steps(v) => {
                pos += v.iter().sum::<f64>();
                total += v.len() as f64;
            }
        }
    }
    if let TaskKind::Multiclass(_) = ds.task {
        return *counts.iter().max().unwrap_or(&0) as f64 / ds.len().max(1) as f64;
    }
    pos / total.max(1.0)
}
