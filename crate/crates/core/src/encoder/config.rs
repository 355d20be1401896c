use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{exact, KvMap};

pub const CONFIG_VERSION: u32 = 1;

/// What a prediction head outputs and which loss trains it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// One probability per sequence from a 2-way softmax.
    Binary,
    /// `K` independent sigmoid probabilities per sequence.
    Multilabel(usize),
    /// A `C`-way softmax per sequence.
    Multiclass(usize),
    /// One nonnegative value per step.
    StepRegression,
    /// One probability per step from a 2-way softmax.
    StepBinary,
}

impl TaskKind {
    pub fn is_per_step(self) -> bool {
        matches!(self, TaskKind::StepRegression | TaskKind::StepBinary)
    }

    /// Width of the head's linear output.
    pub fn logits(self) -> usize {
        match self {
            TaskKind::Binary | TaskKind::StepBinary => 2,
            TaskKind::Multilabel(k) => k,
            TaskKind::Multiclass(c) => c,
            TaskKind::StepRegression => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Binary => write!(f, "binary"),
            TaskKind::Multilabel(k) => write!(f, "multilabel:{k}"),
            TaskKind::Multiclass(c) => write!(f, "multiclass:{c}"),
            TaskKind::StepRegression => write!(f, "step-regression"),
            TaskKind::StepBinary => write!(f, "step-binary"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |v: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(Error::Config(format!("bad class count in task kind `{s}`"))),
            }
        };
        match s.split_once(':') {
            None if s == "binary" => Ok(TaskKind::Binary),
            None if s == "step-regression" => Ok(TaskKind::StepRegression),
            None if s == "step-binary" => Ok(TaskKind::StepBinary),
            Some(("multilabel", k)) => Ok(TaskKind::Multilabel(count(k)?)),
            Some(("multiclass", c)) => {
                let c = count(c)?;
                if c < 2 {
                    return Err(Error::Config("multiclass needs at least 2 classes".into()));
                }
                Ok(TaskKind::Multiclass(c))
            }
            _ => Err(Error::Config(format!("unknown task kind `{s}`"))),
        }
    }
}

/// One prediction head on the shared encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    /// Task name; in multi-task runs one of `ph`, `ihm`, `dc`, `los`.
    pub name: String,
    pub kind: TaskKind,
    /// Dense interpolation factor `M`; unused by per-step heads.
    pub interp_factor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input variables per step (`R`).
    pub input_dim: usize,
    /// Embedding width (`d`).
    pub d_model: usize,
    /// Input embedding kernel size (`h`), odd.
    pub kernel_size: usize,
    /// Stacked attention modules (`N`).
    pub layers: usize,
    pub heads: usize,
    /// Past positions each step may attend to (`r`).
    pub mask_window: usize,
    /// Attend to the current position as well as the `r` before it.
    pub include_self: bool,
    /// When false, attention spans the whole sequence with no mask at all.
    pub masked: bool,
    pub dropout_residue: f64,
    pub dropout_attention: f64,
    pub dropout_input: f64,
    pub learn_positional: bool,
    pub t_max: usize,
    pub seed: u64,
    pub tasks: Vec<HeadSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            d_model: 64,
            kernel_size: 1,
            layers: 2,
            heads: 8,
            mask_window: 16,
            include_self: true,
            masked: true,
            dropout_residue: 0.0,
            dropout_attention: 0.0,
            dropout_input: 0.0,
            learn_positional: false,
            t_max: 512,
            seed: 0,
            tasks: vec![HeadSpec {
                name: "main".into(),
                kind: TaskKind::Binary,
                interp_factor: 12,
            }],
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model={} must be divisible by heads={}",
                self.d_model, self.heads
            ));
        }
        if self.d_model <= self.input_dim {
            return fail(format!(
                "d_model={} must exceed input_dim={}",
                self.d_model, self.input_dim
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size={} must be odd", self.kernel_size));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.mask_window == 0 || self.mask_window > self.t_max {
            return fail(format!(
                "mask_window={} must lie in [1, t_max={}]",
                self.mask_window, self.t_max
            ));
        }
        if !self.include_self {
            return fail("include_self=false leaves the first step with nothing to attend to".into());
        }
        for (name, p) in [
            ("dropout_residue", self.dropout_residue),
            ("dropout_attention", self.dropout_attention),
            ("dropout_input", self.dropout_input),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name}={p} must lie in [0, 1)"));
            }
        }
        if self.tasks.is_empty() {
            return fail("at least one task head is required".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return fail(format!("duplicate task name `{}`", t.name));
            }
            if !t.kind.is_per_step() && (t.interp_factor == 0 || t.interp_factor > self.t_max) {
                return fail(format!(
                    "task `{}`: interp_factor={} must lie in [1, t_max={}]",
                    t.name, t.interp_factor, self.t_max
                ));
            }
        }
        Ok(())
    }

    /// Keys understood by [`ModelConfig::from_kv`].
    pub fn is_known_key(key: &str) -> bool {
        const KEYS: &[&str] = &[
            "version",
            "input_dim",
            "d_model",
            "kernel_size",
            "layers",
            "heads",
            "mask_window",
            "include_self",
            "masked",
            "dropout_residue",
            "dropout_attention",
            "dropout_input",
            "learn_positional",
            "t_max",
            "seed",
            "head_kind",
            "interp_factor",
            "tasks",
        ];
        KEYS.contains(&key)
            || key
                .strip_prefix("task.")
                .and_then(|rest| rest.rsplit_once('.'))
                .is_some_and(|(_, field)| matches!(field, "kind" | "interp_factor"))
    }

    /// Reads model keys from a flat config. Unknown keys are left for the caller.
    ///
    /// A single task is described by `head_kind` + `interp_factor`; several by
    /// `tasks = a,b` with `task.<name>.kind` and `task.<name>.interp_factor`.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let version: u32 = kv.parse_or("version", CONFIG_VERSION)?;
        if version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {version}")));
        }
        let d = Self::default();
        let interp_factor = kv.parse_or("interp_factor", 12usize)?;
        let tasks = match kv.get("tasks") {
            Some(list) => list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|name| {
                    Ok(HeadSpec {
                        name: name.to_string(),
                        kind: kv.require(&format!("task.{name}.kind"))?,
                        interp_factor: kv
                            .parse_or(&format!("task.{name}.interp_factor"), interp_factor)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![HeadSpec {
                name: "main".into(),
                kind: kv.parse_or("head_kind", TaskKind::Binary)?,
                interp_factor,
            }],
        };
        Ok(Self {
            input_dim: kv.parse_or("input_dim", d.input_dim)?,
            d_model: kv.parse_or("d_model", d.d_model)?,
            kernel_size: kv.parse_or("kernel_size", d.kernel_size)?,
            layers: kv.parse_or("layers", d.layers)?,
            heads: kv.parse_or("heads", d.heads)?,
            mask_window: kv.parse_or("mask_window", d.mask_window)?,
            include_self: kv.parse_or("include_self", d.include_self)?,
            masked: kv.parse_or("masked", d.masked)?,
            dropout_residue: kv.parse_or("dropout_residue", d.dropout_residue)?,
            dropout_attention: kv.parse_or("dropout_attention", d.dropout_attention)?,
            dropout_input: kv.parse_or("dropout_input", d.dropout_input)?,
            learn_positional: kv.parse_or("learn_positional", d.learn_positional)?,
            t_max: kv.parse_or("t_max", d.t_max)?,
            seed: kv.parse_or("seed", d.seed)?,
            tasks,
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("version", CONFIG_VERSION);
        kv.set("input_dim", self.input_dim);
        kv.set("d_model", self.d_model);
        kv.set("kernel_size", self.kernel_size);
        kv.set("layers", self.layers);
        kv.set("heads", self.heads);
        kv.set("mask_window", self.mask_window);
        kv.set("include_self", self.include_self);
        kv.set("masked", self.masked);
        kv.set("dropout_residue", exact(self.dropout_residue));
        kv.set("dropout_attention", exact(self.dropout_attention));
        kv.set("dropout_input", exact(self.dropout_input));
        kv.set("learn_positional", self.learn_positional);
        kv.set("t_max", self.t_max);
        kv.set("seed", self.seed);
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        kv.set("tasks", names.join(","));
        for t in &self.tasks {
            kv.set(format!("task.{}.kind", t.name), t.kind);
            kv.set(format!("task.{}.interp_factor", t.name), t.interp_factor);
        }
        kv
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(s)?)
    }
}
