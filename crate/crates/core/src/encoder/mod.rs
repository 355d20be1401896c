//! The encoder stack and the model that owns all parameters.
//!
//! Input `[B, T, R]` is embedded by a same-length 1-D convolution, a frozen
//! random positional row is added per step, and `N` attention modules follow.
//! Each module is masked multi-head self-attention then a kernel-size-1
//! convolutional feed-forward pair, each with dropout, a residual add and
//! post-layer-norm.

mod attention;
pub mod checkpoint;
mod config;

pub use attention::{build_mask, scaled_dot_attention};
pub use config::{HeadSpec, ModelConfig, TaskKind, CONFIG_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::interp::dense_interpolate_normalized;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Parameters bound as leaves on one tape, indexed like the [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swaps in `var` for the parameter at store position `index`, e.g. to
    /// differentiate with respect to one parameter in isolation.
    pub fn replace(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }
}

/// How attention is evaluated in a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionPath {
    /// Fused banded kernel, `O(T·r·d)`.
    #[default]
    Banded,
    /// Dense `T × T` scores plus the additive mask, `O(T²·d)`.
    Dense,
}

/// Per-pass options. Dropout is active only when an RNG is supplied.
#[derive(Default)]
pub struct Forward<'a> {
    pub dropout: Option<&'a mut ChaCha8Rng>,
    pub path: AttentionPath,
}

impl<'a> Forward<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout: Some(rng),
            path: AttentionPath::Banded,
        }
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self.dropout.as_deref_mut() {
            Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub spec: HeadSpec,
    weight: ParamId,
    bias: ParamId,
    /// Representative value per class, for tasks evaluated as regression
    /// through buckets.
    pub bucket_values: Option<Vec<f64>>,
}

/// Where each module's attention weights can be read back from the tape.
#[derive(Clone, Copy, Debug)]
pub enum AttentionRecord {
    Banded(Var),
    /// Weights var of shape `[B, heads, T, T]`.
    Dense(Var),
}

pub struct Encoded {
    pub output: Var,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct SandModel {
    config: ModelConfig,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    positional: ParamId,
    blocks: Vec<BlockParams>,
    heads: Vec<TaskHead>,
    /// Standardization applied to raw inputs before the forward pass.
    pub input_stats: Option<ChannelStats>,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-limit..limit)).collect())
        .expect("shape matches data")
}

impl SandModel {
    /// Validates `config` and draws all parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let (r, d, h, ff) = (
            config.input_dim,
            config.d_model,
            config.kernel_size,
            config.ff_width(),
        );

        let embed_w = store.add(
            "embed.conv.weight".into(),
            xavier(&mut rng, &[d, r, h], r * h, d * h),
            true,
        );
        let embed_b = store.add("embed.conv.bias".into(), Tensor::zeros(&[d]), true);
        let table = Tensor::new(
            vec![config.t_max, d],
            (0..config.t_max * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let positional = store.add("embed.positional".into(), table, config.learn_positional);

        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = |store: &mut ParamStore, name: &str, t: Tensor| {
                store.add(format!("block{i}.{name}"), t, true)
            };
            blocks.push(BlockParams {
                wq: p(&mut store, "attn.wq", xavier(&mut rng, &[d, d], d, d)),
                wk: p(&mut store, "attn.wk", xavier(&mut rng, &[d, d], d, d)),
                wv: p(&mut store, "attn.wv", xavier(&mut rng, &[d, d], d, d)),
                wo: p(&mut store, "attn.wo", xavier(&mut rng, &[d, d], d, d)),
                ln1_gamma: p(&mut store, "ln1.gamma", Tensor::ones(&[d])),
                ln1_beta: p(&mut store, "ln1.beta", Tensor::zeros(&[d])),
                ff1_w: p(&mut store, "ff1.weight", xavier(&mut rng, &[ff, d, 1], d, ff)),
                ff1_b: p(&mut store, "ff1.bias", Tensor::zeros(&[ff])),
                ff2_w: p(&mut store, "ff2.weight", xavier(&mut rng, &[d, ff, 1], ff, d)),
                ff2_b: p(&mut store, "ff2.bias", Tensor::zeros(&[d])),
                ln2_gamma: p(&mut store, "ln2.gamma", Tensor::ones(&[d])),
                ln2_beta: p(&mut store, "ln2.beta", Tensor::zeros(&[d])),
            });
        }

        let heads = config
            .tasks
            .iter()
            .map(|spec| {
                let fan_in = if spec.kind.is_per_step() {
                    d
                } else {
                    d * spec.interp_factor
                };
                let out = spec.kind.logits();
                TaskHead {
                    weight: store.add(
                        format!("head.{}.weight", spec.name),
                        xavier(&mut rng, &[fan_in, out], fan_in, out),
                        true,
                    ),
                    bias: store.add(format!("head.{}.bias", spec.name), Tensor::zeros(&[out]), true),
                    spec: spec.clone(),
                    bucket_values: None,
                }
            })
            .collect();

        Ok(Self {
            config,
            store,
            embed_w,
            embed_b,
            positional,
            blocks,
            heads,
            input_stats: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [TaskHead] {
        &mut self.heads
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.spec.name == name)
    }

    /// Binds every parameter to `tape`; frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .store
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Convolutional embedding plus positional rows, then input dropout.
    pub fn embed_input(&self, tape: &mut Tape, bound: &Bound, x: Var, fwd: &mut Forward) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_dim {
            return Err(Error::dim("embed_input", &shape, &[self.config.input_dim]));
        }
        let t = shape[1];
        if t > self.config.t_max {
            return Err(Error::Capacity {
                len: t,
                t_max: self.config.t_max,
            });
        }
        let e = tape.conv1d(x, bound.var(self.embed_w), bound.var(self.embed_b))?;
        let pos = tape.slice(bound.var(self.positional), 0, 0, t)?;
        let e = tape.add(e, pos)?;
        fwd.dropout(tape, e, self.config.dropout_input)
    }

    /// One attention module over `[B, T, d]`.
    pub fn attention_module(
        &self,
        layer: usize,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        fwd: &mut Forward,
    ) -> Result<(Var, AttentionRecord)> {
        let p = &self.blocks[layer];
        let c = &self.config;
        let q = tape.matmul(x, bound.var(p.wq))?;
        let k = tape.matmul(x, bound.var(p.wk))?;
        let v = tape.matmul(x, bound.var(p.wv))?;
        let (attended, record) = if c.masked && fwd.path == AttentionPath::Banded {
            let drop = match fwd.dropout.as_deref_mut() {
                Some(rng) if c.dropout_attention > 0.0 => Some((c.dropout_attention, rng)),
                _ => None,
            };
            let a = tape.banded_attention(q, k, v, c.heads, c.mask_window, c.include_self, drop)?;
            (a, AttentionRecord::Banded(a))
        } else {
            self.dense_attention(tape, q, k, v, fwd)?
        };
        let o = tape.matmul(attended, bound.var(p.wo))?;
        let o = fwd.dropout(tape, o, c.dropout_residue)?;
        let y = tape.add(x, o)?;
        let y = tape.layer_norm(y, bound.var(p.ln1_gamma), bound.var(p.ln1_beta))?;

        let f = tape.conv1d(y, bound.var(p.ff1_w), bound.var(p.ff1_b))?;
        let f = tape.relu(f);
        let f = tape.conv1d(f, bound.var(p.ff2_w), bound.var(p.ff2_b))?;
        let f = fwd.dropout(tape, f, c.dropout_residue)?;
        let z = tape.add(y, f)?;
        let z = tape.layer_norm(z, bound.var(p.ln2_gamma), bound.var(p.ln2_beta))?;
        Ok((z, record))
    }

    fn dense_attention(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        fwd: &mut Forward,
    ) -> Result<(Var, AttentionRecord)> {
        let c = &self.config;
        let shape = tape.shape(q).to_vec();
        let (bsz, t, d) = (shape[0], shape[1], shape[2]);
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[bsz, t, c.heads, c.head_dim()])?;
            tape.transpose(x, 1, 2)
        };
        let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let mask = if c.masked {
            Some(tape.constant(build_mask(t, c.mask_window, c.include_self)?))
        } else {
            None
        };
        let drop = match fwd.dropout.as_deref_mut() {
            Some(rng) if c.dropout_attention > 0.0 => Some((c.dropout_attention, rng)),
            _ => None,
        };
        let (out, weights) = scaled_dot_attention(tape, qh, kh, vh, mask, drop)?;
        let out = tape.transpose(out, 1, 2)?;
        let out = tape.reshape(out, &[bsz, t, d])?;
        Ok((out, AttentionRecord::Dense(weights)))
    }

    /// Embedding followed by all attention modules: `[B, T, R] → [B, T, d]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, fwd: &mut Forward) -> Result<Encoded> {
        let xv = tape.constant(x.clone());
        self.encode_var(tape, bound, xv, fwd)
    }

    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, x: Var, fwd: &mut Forward) -> Result<Encoded> {
        let mut h = self.embed_input(tape, bound, x, fwd)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for layer in 0..self.blocks.len() {
            let (next, rec) = self.attention_module(layer, tape, bound, h, fwd)?;
            attention.push(rec);
            h = next;
        }
        Ok(Encoded {
            output: h,
            attention,
        })
    }

    /// Dense `[B, heads, T, T]` attention weights recorded during `encode`.
    pub fn attention_weights(tape: &Tape, record: AttentionRecord) -> Result<Tensor> {
        match record {
            AttentionRecord::Banded(v) => tape.attention_weights(v),
            AttentionRecord::Dense(v) => Ok(tape.value(v).clone()),
        }
    }

    /// Task head `index` on top of encoder output `[B, T, d]`.
    ///
    /// Returns probabilities: `[B, 2]` (binary), `[B, K]` (multilabel),
    /// `[B, C]` (multiclass), `[B, T, 2]` (per-step binary) or `[B, T]`
    /// nonnegative values (per-step regression).
    pub fn head_forward(
        &self,
        index: usize,
        tape: &mut Tape,
        bound: &Bound,
        encoded: Var,
        lengths: &[usize],
    ) -> Result<Var> {
        let head = &self.heads[index];
        let (w, b) = (bound.var(head.weight), bound.var(head.bias));
        let kind = head.spec.kind;
        let logits = if kind.is_per_step() {
            tape.matmul(encoded, w)?
        } else {
            let u = dense_interpolate_normalized(tape, encoded, lengths, head.spec.interp_factor)?;
            tape.matmul(u, w)?
        };
        let logits = tape.add(logits, b)?;
        match kind {
            TaskKind::Binary | TaskKind::Multiclass(_) | TaskKind::StepBinary => tape.softmax_last(logits),
            TaskKind::Multilabel(_) => Ok(tape.sigmoid(logits)),
            TaskKind::StepRegression => {
                let shape = tape.shape(logits).to_vec();
                let r = tape.relu(logits);
                tape.reshape(r, &shape[..2])
            }
        }
    }

    /// Eval-mode probabilities for one head on a raw batch (standardized with
    /// `input_stats` when present).
    pub fn predict(&self, index: usize, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        match &self.input_stats {
            Some(stats) => self.predict_prepared(index, &stats.apply_tensor(x, lengths)?, lengths),
            None => self.predict_prepared(index, x, lengths),
        }
    }

    /// Like [`SandModel::predict`] for inputs that are already standardized.
    pub fn predict_prepared(&self, index: usize, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let enc = self.encode(&mut tape, &bound, x, &mut Forward::eval())?;
        let out = self.head_forward(index, &mut tape, &bound, enc.output, lengths)?;
        Ok(tape.value(out).clone())
    }
}
