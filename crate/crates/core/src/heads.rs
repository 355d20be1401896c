//! Loss functions over head outputs, and the weighted multi-task objective.
//!
//! Each loss comes in two forms: `*_sum` returns the un-normalized sum and
//! the number of terms it averages over, and the plain form divides. The
//! sum form lets a batch split across several tapes be normalized by the
//! batch-wide count.

use crate::data::Targets;
use crate::encoder::TaskKind;
use crate::error::{Error, Result};
use crate::kv::{exact, KvMap};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

fn weighted_log(tape: &mut Tape, p: Var, weights: Vec<f64>) -> Result<Var> {
    let w = Tensor::new(tape.shape(p).to_vec(), weights)?;
    let lp = tape.clamp_log(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let terms = tape.mask_mul(lp, w)?;
    Ok(tape.sum(terms))
}

/// Sum of `-(y ln p + (1 - y) ln(1 - p))` over all entries of `p` whose
/// `weight` is nonzero.
fn bce_sum(tape: &mut Tape, p: Var, y: &[f64], weight: &[f64]) -> Result<Var> {
    let pos = weighted_log(tape, p, y.iter().zip(weight).map(|(y, w)| -y * w).collect())?;
    let q = tape.affine(p, -1.0, 1.0);
    let neg = weighted_log(tape, q, y.iter().zip(weight).map(|(y, w)| -(1.0 - y) * w).collect())?;
    tape.add(pos, neg)
}

fn check_binary(y: &[f64]) -> Result<()> {
    match y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Label(format!("binary target {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

fn mean_of(tape: &mut Tape, (sum, count): (Var, f64)) -> Var {
    tape.scale(sum, 1.0 / count)
}

/// `probs` is `B × 2` from a two-way softmax; column 1 is `P(y = 1)`.
pub fn binary_loss_sum(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<(Var, f64)> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::dim("binary_loss", &shape, &[labels.len(), 2]));
    }
    let y: Vec<f64> = labels.iter().map(|&c| c as f64).collect();
    check_binary(&y)?;
    let p1 = tape.slice(probs, 1, 1, 1)?;
    let p1 = tape.reshape(p1, &[labels.len()])?;
    Ok((bce_sum(tape, p1, &y, &vec![1.0; y.len()])?, labels.len() as f64))
}

pub fn binary_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = binary_loss_sum(tape, probs, labels)?;
    Ok(mean_of(tape, s))
}

/// `probs` is `B × K` of independent sigmoids; `labels` is row-major
/// `B × K`. Averages over both labels and samples.
pub fn multilabel_loss_sum(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<(Var, f64)> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] * shape[1] != labels.len() {
        return Err(Error::dim("multilabel_loss", &shape, &[labels.len()]));
    }
    check_binary(labels)?;
    Ok((bce_sum(tape, probs, labels, &vec![1.0; labels.len()])?, labels.len() as f64))
}

pub fn multilabel_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    let s = multilabel_loss_sum(tape, probs, labels)?;
    Ok(mean_of(tape, s))
}

/// `probs` is `B × C` from a softmax; loss is `-ln p[y]`.
pub fn multiclass_loss_sum(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<(Var, f64)> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("multiclass_loss", &shape, &[labels.len()]));
    }
    let c = shape[1];
    let mut w = vec![0.0; labels.len() * c];
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label(format!("class {y} out of range for {c} classes")));
        }
        w[b * c + y] = -1.0;
    }
    Ok((weighted_log(tape, probs, w)?, labels.len() as f64))
}

pub fn multiclass_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = multiclass_loss_sum(tape, probs, labels)?;
    Ok(mean_of(tape, s))
}

fn valid_count(mask: &[f64]) -> Result<f64> {
    let n = mask.iter().filter(|&&m| m != 0.0).count();
    if n == 0 {
        return Err(Error::EmptyBatch("no valid steps".into()));
    }
    Ok(n as f64)
}

/// `probs` is `B × T × 2`; targets and mask are row-major `B × T`.
pub fn step_binary_loss_sum(tape: &mut Tape, probs: Var, targets: &[f64], mask: &[f64]) -> Result<(Var, f64)> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 3 || shape[2] != 2 || shape[0] * shape[1] != targets.len() || mask.len() != targets.len() {
        return Err(Error::dim("step_binary_loss", &shape, &[targets.len(), 2]));
    }
    let count = valid_count(mask)?;
    let y: Vec<f64> = targets.iter().zip(mask).map(|(y, m)| if *m != 0.0 { *y } else { 0.0 }).collect();
    check_binary(&y)?;
    let p1 = tape.slice(probs, 2, 1, 1)?;
    let p1 = tape.reshape(p1, &shape[..2])?;
    Ok((bce_sum(tape, p1, &y, mask)?, count))
}

pub fn step_binary_loss(tape: &mut Tape, probs: Var, targets: &[f64], mask: &[f64]) -> Result<Var> {
    let s = step_binary_loss_sum(tape, probs, targets, mask)?;
    Ok(mean_of(tape, s))
}

/// Squared error over valid steps of a `B × T` prediction.
pub fn regression_loss_sum(tape: &mut Tape, pred: Var, targets: &[f64], mask: &[f64]) -> Result<(Var, f64)> {
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != targets.len() || mask.len() != targets.len() {
        return Err(Error::dim("regression_loss", &shape, &[targets.len()]));
    }
    let count = valid_count(mask)?;
    let y = tape.constant(Tensor::new(shape, targets.to_vec())?);
    let d = tape.sub(pred, y)?;
    let d = tape.mask_mul(d, Tensor::new(tape.shape(pred).to_vec(), mask.to_vec())?)?;
    let sq = tape.mul(d, d)?;
    Ok((tape.sum(sq), count))
}

pub fn regression_loss(tape: &mut Tape, pred: Var, targets: &[f64], mask: &[f64]) -> Result<Var> {
    let s = regression_loss_sum(tape, pred, targets, mask)?;
    Ok(mean_of(tape, s))
}

/// Dispatches on the head kind. `output` is the head's forward output.
pub fn task_loss_sum(tape: &mut Tape, kind: TaskKind, output: Var, targets: &Targets) -> Result<(Var, f64)> {
    match (kind, targets) {
        (TaskKind::Binary, Targets::Class(y)) => binary_loss_sum(tape, output, y),
        (TaskKind::Multiclass(_), Targets::Class(y)) => multiclass_loss_sum(tape, output, y),
        (TaskKind::Multilabel(k), Targets::Multi { k: tk, values }) if k == *tk => {
            multilabel_loss_sum(tape, output, values)
        }
        (TaskKind::StepBinary, Targets::Steps { values, mask }) => step_binary_loss_sum(tape, output, values, mask),
        (TaskKind::StepRegression, Targets::Steps { values, mask }) => {
            regression_loss_sum(tape, output, values, mask)
        }
        _ => Err(Error::Label(format!("targets do not fit a {kind} head"))),
    }
}

pub fn task_loss(tape: &mut Tape, kind: TaskKind, output: Var, targets: &Targets) -> Result<Var> {
    let s = task_loss_sum(tape, kind, output, targets)?;
    Ok(mean_of(tape, s))
}

/// Loss weights of the four benchmark tasks: phenotyping, in-hospital
/// mortality, decompensation and length of stay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiTaskWeights {
    pub phenotype: f64,
    pub mortality: f64,
    pub decompensation: f64,
    pub length_of_stay: f64,
}

impl Default for MultiTaskWeights {
    fn default() -> Self {
        MultiTaskWeights {
            phenotype: 0.8,
            mortality: 0.5,
            decompensation: 1.1,
            length_of_stay: 0.8,
        }
    }
}

impl MultiTaskWeights {
    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.phenotype, self.mortality, self.decompensation, self.length_of_stay]
    }

    /// The weight a head of this kind takes: multilabel heads play the
    /// phenotyping role, binary heads mortality, per-step binary heads
    /// decompensation, and multiclass or per-step regression heads length
    /// of stay.
    pub fn for_kind(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Multilabel(_) => self.phenotype,
            TaskKind::Binary => self.mortality,
            TaskKind::StepBinary => self.decompensation,
            TaskKind::Multiclass(_) | TaskKind::StepRegression => self.length_of_stay,
        }
    }

    /// `λ_p ℓ_ph + λ_i ℓ_ihm + λ_d ℓ_dc + λ_l ℓ_los` over whichever task
    /// losses are present.
    pub fn combine(
        &self,
        tape: &mut Tape,
        phenotype: Option<Var>,
        mortality: Option<Var>,
        decompensation: Option<Var>,
        length_of_stay: Option<Var>,
    ) -> Result<Var> {
        let terms: Vec<(f64, Var)> = self
            .as_array()
            .into_iter()
            .zip([phenotype, mortality, decompensation, length_of_stay])
            .filter_map(|(w, l)| l.map(|l| (w, l)))
            .collect();
        multitask_loss(tape, &terms)
    }

    const KEYS: [&'static str; 4] = [
        "lambda.phenotype",
        "lambda.mortality",
        "lambda.decompensation",
        "lambda.length_of_stay",
    ];

    pub fn is_known_key(key: &str) -> bool {
        Self::KEYS.contains(&key)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        for (k, v) in Self::KEYS.iter().zip(self.as_array()) {
            kv.set(*k, exact(v));
        }
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default().as_array();
        let mut w = [0.0; 4];
        for ((slot, key), default) in w.iter_mut().zip(Self::KEYS).zip(d) {
            *slot = kv.parse_or(key, default)?;
        }
        let weights = MultiTaskWeights {
            phenotype: w[0],
            mortality: w[1],
            decompensation: w[2],
            length_of_stay: w[3],
        };
        weights.validate()?;
        Ok(weights)
    }
}

/// Weighted sum `Σ λ_i ℓ_i` of scalar losses.
pub fn multitask_loss(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut iter = terms.iter();
    let &(w, l) = iter
        .next()
        .ok_or_else(|| Error::EmptyBatch("multi-task loss needs at least one task".into()))?;
    let mut total = tape.scale(l, w);
    for &(w, l) in iter {
        let t = tape.scale(l, w);
        total = tape.add(total, t)?;
    }
    Ok(total)
}
