//! The stacked continuous-time transformer and its discrete counterpart.
//!
//! A layer is LN(CT-MHA(X,X,X)(t) + x(t)) followed by LN(FFN + residual),
//! where x(t) is the spline through the layer inputs, so the whole layer is a
//! continuous function of time. Stacking samples that function at reference
//! points (the input times by default); any other query grid gives the
//! continuous readout.

use crate::attention::CtMha;
use crate::autodiff::optim::{Binding, Optimizer, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::interp::{basis_matrix, SplineKind};
use crate::ode::{Activation, FieldNorm, NfeCounter, SolverConfig};
use crate::quadrature::QuadratureRule;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub causal: bool,
    /// Interval normalization of scores and expected values.
    pub normalize: bool,
    /// Map observation times affinely onto [0, 1] before modeling.
    pub time_normalize: bool,
    pub rule: QuadratureRule,
    pub solver: SolverConfig,
    pub query_kind: SplineKind,
    pub shared_fields: bool,
    pub activation: Activation,
    pub field_norm: FieldNorm,
}

impl ModelConfig {
    pub fn desk(d_model: usize, heads: usize, layers: usize) -> Self {
        ModelConfig {
            d_model,
            heads,
            layers,
            ffn_hidden: 4 * d_model,
            dropout: 0.1,
            causal: false,
            normalize: true,
            time_normalize: true,
            rule: QuadratureRule::linear(),
            solver: SolverConfig::default(),
            query_kind: SplineKind::Cubic,
            shared_fields: false,
            activation: Activation::Tanh,
            field_norm: FieldNorm::ConcatNorm,
        }
    }

    fn check(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model: d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::invalid(
                "model: d_model must be even for the temporal encoding",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "model: dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn mha(&self, layer: usize) -> CtMha {
        CtMha {
            d_model: self.d_model,
            heads: self.heads,
            causal: self.causal,
            normalize: self.normalize,
            rule: self.rule.clone(),
            solver: self.solver,
            query_kind: self.query_kind,
            shared_fields: self.shared_fields,
            activation: self.activation,
            field_norm: self.field_norm,
            prefix: format!("l{layer}.attn"),
        }
    }
}

/// Affine map of times onto [0, 1] (shift-and-scale by the observation
/// window). A single observation maps to 0.
pub fn normalize_times(times: &[f64]) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Err(Error::invalid("normalize_times: empty"));
    }
    let t0 = times[0];
    let tn = times[times.len() - 1];
    if times.len() == 1 {
        return Ok(vec![0.0]);
    }
    if tn <= t0 {
        return Err(Error::invalid("normalize_times: window has no extent"));
    }
    Ok(times.iter().map(|&t| (t - t0) / (tn - t0)).collect())
}

fn normalize_with(window: (f64, f64), times: &[f64]) -> Vec<f64> {
    let (t0, tn) = window;
    if tn <= t0 {
        return times.iter().map(|&t| t - t0).collect();
    }
    times.iter().map(|&t| (t - t0) / (tn - t0)).collect()
}

/// Sinusoidal encoding: entry (i, 2k) = sin(t_i / 10000^(2k/d)),
/// entry (i, 2k+1) the matching cosine.
pub fn temporal_encoding(times: &[f64], d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::invalid(format!(
            "temporal_encoding: d_model {d_model} must be even"
        )));
    }
    let n = times.len();
    let mut out = Tensor::zeros(&[n, d_model]);
    for (i, &t) in times.iter().enumerate() {
        for k in 0..d_model / 2 {
            let freq = 10_000f64.powf(2.0 * k as f64 / d_model as f64);
            out.set(i, 2 * k, (t / freq).sin());
            out.set(i, 2 * k + 1, (t / freq).cos());
        }
    }
    Ok(out)
}

/// How raw observations become d_model vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Embedding {
    /// Linear map of feature vectors; rows not marked observed use a learned
    /// mask token instead.
    Linear { in_dim: usize },
    /// Event-type embedding table lookup.
    EventType { num_types: usize },
}

/// One observation sequence presented to a model.
pub struct ModelInputs<'a> {
    pub times: &'a [f64],
    pub kind: InputKind<'a>,
}

pub enum InputKind<'a> {
    Features {
        values: &'a Tensor,
        /// None means every row is observed.
        observed: Option<&'a [bool]>,
    },
    Events {
        types: &'a [usize],
    },
}

fn embed_inputs(
    tape: &Tape,
    binding: &mut Binding<'_>,
    embed: &Embedding,
    inputs: &ModelInputs<'_>,
    order: &[usize],
    enc: &Tensor,
) -> Result<Var> {
    let x = match (&inputs.kind, embed) {
        (InputKind::Features { values, observed }, Embedding::Linear { in_dim }) => {
            if values.cols() != *in_dim {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    lhs: values.shape.clone(),
                    rhs: vec![*in_dim],
                });
            }
            let w = binding.bind("embed.w")?;
            let b = binding.bind("embed.b")?;
            let sorted = tape.leaf(select_rows_tensor(values, order));
            let emb = tape.add_bias(tape.matmul(sorted, w)?, b)?;
            match observed {
                None => emb,
                Some(obs) => {
                    let n = order.len();
                    let obs_col: Vec<f64> = order
                        .iter()
                        .map(|&i| if obs[i] { 1.0 } else { 0.0 })
                        .collect();
                    let unobs_col: Vec<f64> = obs_col.iter().map(|&v| 1.0 - v).collect();
                    let mask = binding.bind("embed.mask")?;
                    let kept = tape.mul_col(emb, tape.leaf(Tensor::col(&obs_col)))?;
                    let filled =
                        tape.matmul(tape.leaf(Tensor::new(vec![n, 1], unobs_col)?), mask)?;
                    tape.add(kept, filled)?
                }
            }
        }
        (InputKind::Events { types }, Embedding::EventType { num_types }) => {
            for &k in types.iter() {
                if k >= *num_types {
                    return Err(Error::invalid(format!(
                        "embed: event type {k} out of range (K = {num_types})"
                    )));
                }
            }
            let table = binding.bind("embed.table")?;
            let sorted: Vec<usize> = order.iter().map(|&i| types[i]).collect();
            tape.select_rows(table, &sorted)?
        }
        _ => return Err(Error::invalid("embed: inputs do not match embedding kind")),
    };
    tape.add(x, tape.leaf(enc.clone()))
}

fn select_rows_tensor(t: &Tensor, order: &[usize]) -> Tensor {
    let n = t.cols();
    let mut data = Vec::with_capacity(order.len() * n);
    for &i in order {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(vec![order.len(), n], data).expect("row selection preserves layout")
}

fn sort_order(times: &[f64]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    for w in order.windows(2) {
        if times[w[1]] <= times[w[0]] {
            return Err(Error::invalid("model: observation times must be distinct"));
        }
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Continuous-time transformer.
// ---------------------------------------------------------------------------

pub struct ContiFormer {
    pub config: ModelConfig,
    pub embed: Embedding,
}

impl ContiFormer {
    pub fn new(config: ModelConfig, embed: Embedding) -> Result<Self> {
        config.check()?;
        Ok(ContiFormer { config, embed })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.config.d_model;
        init_embedding(&self.embed, d, store, rng);
        for l in 0..self.config.layers {
            self.config.mha(l).init_params(store, rng);
            init_layer_tail(l, d, self.config.ffn_hidden, store, rng);
        }
    }

    /// Outputs at `queries` (raw time units; normalization is internal).
    /// Observations may arrive in any order; they are sorted by time.
    pub fn forward(
        &self,
        tape: &Tape,
        binding: &mut Binding<'_>,
        inputs: &ModelInputs<'_>,
        queries: &[f64],
        nfe: &NfeCounter,
    ) -> Result<Var> {
        let order = sort_order(inputs.times)?;
        let sorted_times: Vec<f64> = order.iter().map(|&i| inputs.times[i]).collect();
        let window = (sorted_times[0], *sorted_times.last().unwrap());
        let (omega, tau) = if self.config.time_normalize {
            (
                normalize_with(window, &sorted_times),
                normalize_with(window, queries),
            )
        } else {
            (sorted_times.clone(), queries.to_vec())
        };
        let enc = temporal_encoding(&omega, self.config.d_model)?;
        let mut x = embed_inputs(tape, binding, &self.embed, inputs, &order, &enc)?;

        if self.config.layers == 0 {
            // Continuous readout of the embedded input itself.
            let basis = basis_matrix(self.config.query_kind, &omega, &tau)?;
            return tape.matmul(tape.leaf(basis), x);
        }
        for l in 0..self.config.layers {
            let is_last = l + 1 == self.config.layers;
            let layer_queries: &[f64] = if is_last { &tau } else { &omega };
            x = self.layer_forward(tape, binding, l, x, &omega, layer_queries, nfe)?;
        }
        Ok(x)
    }

    /// One ContiFormer layer evaluated at `tau`.
    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &Tape,
        binding: &mut Binding<'_>,
        layer: usize,
        x: Var,
        omega: &[f64],
        tau: &[f64],
        nfe: &NfeCounter,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (attn_out, _) = cfg.mha(layer).forward(tape, binding, x, omega, tau, nfe)?;
        let attn_out = tape.dropout(attn_out, cfg.dropout)?;
        // The residual path is the interpolant of the layer input.
        let basis = basis_matrix(cfg.query_kind, omega, tau)?;
        let x_tau = tape.matmul(tape.leaf(basis), x)?;
        let g1 = binding.bind(&format!("l{layer}.ln1.g"))?;
        let b1 = binding.bind(&format!("l{layer}.ln1.b"))?;
        let z1 = tape.layer_norm(tape.add(attn_out, x_tau)?, g1, b1, 1e-5)?;

        let w1 = binding.bind(&format!("l{layer}.ffn.w1"))?;
        let c1 = binding.bind(&format!("l{layer}.ffn.b1"))?;
        let w2 = binding.bind(&format!("l{layer}.ffn.w2"))?;
        let c2 = binding.bind(&format!("l{layer}.ffn.b2"))?;
        let h = tape.add_bias(tape.matmul(z1, w1)?, c1)?;
        let h = match cfg.activation {
            Activation::Tanh => tape.tanh(h)?,
            Activation::Sigmoid => tape.sigmoid(h)?,
        };
        let f = tape.add_bias(tape.matmul(h, w2)?, c2)?;
        let f = tape.dropout(f, cfg.dropout)?;
        let g2 = binding.bind(&format!("l{layer}.ln2.g"))?;
        let b2 = binding.bind(&format!("l{layer}.ln2.b"))?;
        tape.layer_norm(tape.add(f, z1)?, g2, b2, 1e-5)
    }
}

// ---------------------------------------------------------------------------
// Discrete-attention baseline with the same layer skeleton.
// ---------------------------------------------------------------------------

pub struct VanillaTransformer {
    pub config: ModelConfig,
    pub embed: Embedding,
}

impl VanillaTransformer {
    pub fn new(config: ModelConfig, embed: Embedding) -> Result<Self> {
        config.check()?;
        Ok(VanillaTransformer { config, embed })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.config.d_model;
        init_embedding(&self.embed, d, store, rng);
        for l in 0..self.config.layers {
            let dk = d / self.config.heads;
            for h in 0..self.config.heads {
                for w in ["wq", "wk", "wv"] {
                    store.insert(
                        format!("l{l}.attn.h{h}.{w}"),
                        Tensor::xavier(d, dk, &[d, dk], rng),
                    );
                }
            }
            store.insert(format!("l{l}.attn.wo"), Tensor::xavier(d, d, &[d, d], rng));
            store.insert(format!("l{l}.attn.bo"), Tensor::zeros(&[d]));
            init_layer_tail(l, d, self.config.ffn_hidden, store, rng);
        }
    }

    /// Per-position outputs at the observation times (sorted by time).
    pub fn forward(
        &self,
        tape: &Tape,
        binding: &mut Binding<'_>,
        inputs: &ModelInputs<'_>,
    ) -> Result<Var> {
        let order = sort_order(inputs.times)?;
        let sorted_times: Vec<f64> = order.iter().map(|&i| inputs.times[i]).collect();
        let omega = if self.config.time_normalize {
            normalize_times(&sorted_times)?
        } else {
            sorted_times.clone()
        };
        let enc = temporal_encoding(&omega, self.config.d_model)?;
        let mut x = embed_inputs(tape, binding, &self.embed, inputs, &order, &enc)?;
        for l in 0..self.config.layers {
            x = self.layer_forward(tape, binding, l, x)?;
        }
        Ok(x)
    }

    fn layer_forward(
        &self,
        tape: &Tape,
        binding: &mut Binding<'_>,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let attn = discrete_mha(
            tape,
            binding,
            &format!("l{layer}.attn"),
            x,
            cfg.heads,
            cfg.causal,
        )?;
        let attn = tape.dropout(attn, cfg.dropout)?;
        let g1 = binding.bind(&format!("l{layer}.ln1.g"))?;
        let b1 = binding.bind(&format!("l{layer}.ln1.b"))?;
        let z1 = tape.layer_norm(tape.add(attn, x)?, g1, b1, 1e-5)?;

        let w1 = binding.bind(&format!("l{layer}.ffn.w1"))?;
        let c1 = binding.bind(&format!("l{layer}.ffn.b1"))?;
        let w2 = binding.bind(&format!("l{layer}.ffn.w2"))?;
        let c2 = binding.bind(&format!("l{layer}.ffn.b2"))?;
        let h = tape.add_bias(tape.matmul(z1, w1)?, c1)?;
        let h = match cfg.activation {
            Activation::Tanh => tape.tanh(h)?,
            Activation::Sigmoid => tape.sigmoid(h)?,
        };
        let f = tape.add_bias(tape.matmul(h, w2)?, c2)?;
        let f = tape.dropout(f, cfg.dropout)?;
        let g2 = binding.bind(&format!("l{layer}.ln2.g"))?;
        let b2 = binding.bind(&format!("l{layer}.ln2.b"))?;
        tape.layer_norm(tape.add(f, z1)?, g2, b2, 1e-5)
    }
}

/// Standard discrete scaled-dot-product multi-head self-attention.
pub fn discrete_mha(
    tape: &Tape,
    binding: &mut Binding<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let n = tape.shape_of(x)[0];
    let d = tape.shape_of(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "attention: d_model {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let mask = if causal {
        let mut m = Tensor::zeros(&[n, n]);
        for j in 0..n {
            for i in j + 1..n {
                m.set(j, i, MASK_NEG);
            }
        }
        Some(m)
    } else {
        None
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = binding.bind(&format!("{prefix}.h{h}.wq"))?;
        let wk = binding.bind(&format!("{prefix}.h{h}.wk"))?;
        let wv = binding.bind(&format!("{prefix}.h{h}.wv"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut scores = tape.matmul(q, tape.transpose(k)?)?;
        scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        if let Some(m) = &mask {
            scores = tape.add(scores, tape.leaf(m.clone()))?;
        }
        let w = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(w, v)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let wo = binding.bind(&format!("{prefix}.wo"))?;
    let bo = binding.bind(&format!("{prefix}.bo"))?;
    tape.add_bias(tape.matmul(cat, wo)?, bo)
}

fn init_embedding(embed: &Embedding, d: usize, store: &mut ParamStore, rng: &mut impl Rng) {
    match embed {
        Embedding::Linear { in_dim } => {
            store.insert("embed.w", Tensor::xavier(*in_dim, d, &[*in_dim, d], rng));
            store.insert("embed.b", Tensor::zeros(&[d]));
            store.insert("embed.mask", Tensor::randn(&[1, d], 0.02, rng));
        }
        Embedding::EventType { num_types } => {
            store.insert(
                "embed.table",
                Tensor::xavier(*num_types, d, &[*num_types, d], rng),
            );
        }
    }
}

fn init_layer_tail(l: usize, d: usize, hidden: usize, store: &mut ParamStore, rng: &mut impl Rng) {
    store.insert(format!("l{l}.ln1.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("l{l}.ln1.b"), Tensor::zeros(&[d]));
    store.insert(format!("l{l}.ln2.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("l{l}.ln2.b"), Tensor::zeros(&[d]));
    store.insert(
        format!("l{l}.ffn.w1"),
        Tensor::xavier(d, hidden, &[d, hidden], rng),
    );
    store.insert(format!("l{l}.ffn.b1"), Tensor::zeros(&[hidden]));
    store.insert(
        format!("l{l}.ffn.w2"),
        Tensor::xavier(hidden, d, &[hidden, d], rng),
    );
    store.insert(format!("l{l}.ffn.b2"), Tensor::zeros(&[d]));
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

/// Self-describing snapshot: parameters, optimizer state, config and seed.
/// Written as JSON; f64 values round-trip exactly.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<Optimizer>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(
        seed: u64,
        config: serde_json::Value,
        params: ParamStore,
        optimizer: Option<Optimizer>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            config,
            params,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = serde_json::to_vec(self)
            .map_err(|e| Error::invalid(format!("checkpoint encode: {e}")))?;
        std::fs::write(path, data)
            .map_err(|e| Error::invalid(format!("checkpoint write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)
            .map_err(|e| Error::invalid(format!("checkpoint read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&data)
            .map_err(|e| Error::invalid(format!("checkpoint decode: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}
