//! Fixed-step RK4 solving for the learned vector fields, plus the
//! dummy-variable reparameterization that maps every pair interval
//! [t_i, t_j] onto [-1, 1] so one solver sweep advances all pair systems
//! at once.
//!
//! Two parallel code paths cover the two uses: a tape path that records onto
//! the autodiff graph for training (discretize-then-optimize: gradients flow
//! through the unrolled steps), and a numeric path for inference and
//! benchmarking that allocates nothing on a tape. Both share the same step
//! plan, so their function-evaluation counts are identical.

use crate::autodiff::optim::ParamStore;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::str::FromStr;

/// Fixed-step RK4 is the only solver.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { step: 0.1 }
    }
}

impl SolverConfig {
    pub fn new(step: f64) -> Result<Self> {
        if step.is_nan() || step <= 0.0 || !step.is_finite() {
            return Err(Error::invalid(format!(
                "solver: step size must be positive, got {step}"
            )));
        }
        Ok(SolverConfig { step })
    }
}

/// Counts vector-field evaluations. One evaluation advances every system in
/// the batch, matching the per-sweep cost the complexity table tracks.
#[derive(Debug, Default)]
pub struct NfeCounter(Cell<u64>);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&self) {
        self.0.set(0);
    }

    pub fn count(&self) -> u64 {
        self.0.get()
    }

    fn bump(&self) {
        self.0.set(self.0.get() + 1);
    }
}

/// Step sizes that cross `span` in full steps of `h` with a shortened final
/// step, so the sweep lands exactly on each checkpoint.
fn segment_steps(span: f64, h: f64) -> Vec<f64> {
    if span <= 0.0 {
        return Vec::new();
    }
    let n = (span / h + 1e-9).floor() as usize;
    let mut steps = vec![h; n];
    let rem = span - n as f64 * h;
    if rem > 1e-12 {
        steps.push(rem);
    }
    steps
}

// ---------------------------------------------------------------------------
// Numeric solving over closure fields (oracles, the theorem verifier, tests).
// ---------------------------------------------------------------------------

/// Classical RK4 over a scalar-time field, recording the state at each grid
/// point. `grid` must be ascending and start at or after `t0`.
pub fn rk4_solve_fn(
    f: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    x0: &[f64],
    t0: f64,
    grid: &[f64],
    cfg: &SolverConfig,
    nfe: &NfeCounter,
) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut out = Vec::with_capacity(grid.len());
    let mut step_index = 0usize;
    for &target in grid {
        if target < t - 1e-12 {
            return Err(Error::invalid(format!(
                "rk4_solve: grid point {target} precedes current time {t}"
            )));
        }
        for h in segment_steps(target - t, cfg.step) {
            x = rk4_step_fn(f, t, &x, h, nfe);
            t += h;
            step_index += 1;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolverDiverged { step: step_index });
            }
        }
        t = target;
        out.push(x.clone());
    }
    Ok(out)
}

fn rk4_step_fn(
    f: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    t: f64,
    x: &[f64],
    h: f64,
    nfe: &NfeCounter,
) -> Vec<f64> {
    let ax = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        x.iter().zip(k.iter()).map(|(&x, &k)| x + c * k).collect()
    };
    nfe.bump();
    let k1 = f(t, x);
    nfe.bump();
    let k2 = f(t + h / 2.0, &ax(x, &k1, h / 2.0));
    nfe.bump();
    let k3 = f(t + h / 2.0, &ax(x, &k2, h / 2.0));
    nfe.bump();
    let k4 = f(t + h, &ax(x, &k3, h));
    x.iter()
        .enumerate()
        .map(|(i, &xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Change of variables mapping [t0, t1] onto the dummy interval [-1, 1]:
/// solving the returned field from -1 to 1 with x(t0) as the initial state
/// yields x(t1). A zero-length interval gives the identically-zero field.
pub fn reparameterize<'a>(
    f: &'a dyn Fn(f64, &[f64]) -> Vec<f64>,
    t0: f64,
    t1: f64,
) -> Result<impl Fn(f64, &[f64]) -> Vec<f64> + 'a> {
    if t1 < t0 {
        return Err(Error::invalid(format!(
            "reparameterize: interval end {t1} precedes start {t0}"
        )));
    }
    let scale = (t1 - t0) / 2.0;
    let mid = (t0 + t1) / 2.0;
    Ok(move |s: f64, x: &[f64]| -> Vec<f64> {
        let t = s * scale + mid;
        f(t, x).into_iter().map(|v| v * scale).collect()
    })
}

// ---------------------------------------------------------------------------
// The learned vector field f(t, x) shared by key and value trajectories.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::autodiff::sigmoid(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!(
                "activation: expected `tanh` or `sigmoid`, got `{other}`"
            ))),
        }
    }
}

/// Whether layer normalization sits before the activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldNorm {
    Concat,
    ConcatNorm,
}

impl FromStr for FieldNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FieldNorm::Concat),
            "concatnorm" => Ok(FieldNorm::ConcatNorm),
            other => Err(Error::invalid(format!(
                "vector field: expected `concat` or `concatnorm`, got `{other}`"
            ))),
        }
    }
}

/// f(t, x) = Actfn(LN(Linear(Linear(x) + Linear(t)))), with the LN step
/// dropped for the `Concat` variant. Owns only its parameter names; values
/// live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VectorField {
    pub dim: usize,
    pub act: Activation,
    pub norm: FieldNorm,
    pub prefix: String,
}

const FIELD_SUFFIXES: [&str; 7] = ["w1", "b1", "wt", "w2", "b2", "ln_g", "ln_b"];

impl VectorField {
    pub fn new(dim: usize, act: Activation, norm: FieldNorm, prefix: impl Into<String>) -> Self {
        VectorField {
            dim,
            act,
            norm,
            prefix: prefix.into(),
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    pub fn param_names(&self) -> Vec<String> {
        FIELD_SUFFIXES.iter().map(|s| self.name(s)).collect()
    }

    /// Xavier init for the input maps; the final linear map starts near zero
    /// so initial trajectories are almost constant.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        store.insert(self.name("w1"), Tensor::xavier(d, d, &[d, d], rng));
        store.insert(self.name("b1"), Tensor::zeros(&[d]));
        store.insert(self.name("wt"), Tensor::xavier(1, d, &[1, d], rng));
        let mut w2 = Tensor::xavier(d, d, &[d, d], rng);
        for v in w2.data.iter_mut() {
            *v *= 0.01;
        }
        store.insert(self.name("w2"), w2);
        store.insert(self.name("b2"), Tensor::zeros(&[d]));
        store.insert(self.name("ln_g"), Tensor::full(&[d], 1.0));
        store.insert(self.name("ln_b"), Tensor::zeros(&[d]));
    }

    /// Collect parameter tensors for the numeric path.
    pub fn params_ref<'a>(&self, store: &'a ParamStore) -> Result<FieldParamsRef<'a>> {
        let get = |suffix: &str| -> Result<&'a Tensor> {
            store
                .get(&self.name(suffix))
                .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", self.name(suffix))))
        };
        Ok(FieldParamsRef {
            w1: get("w1")?,
            b1: get("b1")?,
            wt: get("wt")?,
            w2: get("w2")?,
            b2: get("b2")?,
            ln_g: get("ln_g")?,
            ln_b: get("ln_b")?,
        })
    }

    /// Bind parameters onto a tape via `bind` so gradients can be collected.
    pub fn bind(&self, binding: &mut crate::autodiff::optim::Binding<'_>) -> Result<FieldVars> {
        Ok(FieldVars {
            w1: binding.bind(&self.name("w1"))?,
            b1: binding.bind(&self.name("b1"))?,
            wt: binding.bind(&self.name("wt"))?,
            w2: binding.bind(&self.name("w2"))?,
            b2: binding.bind(&self.name("b2"))?,
            ln_g: binding.bind(&self.name("ln_g"))?,
            ln_b: binding.bind(&self.name("ln_b"))?,
        })
    }

    /// Tape evaluation on a batch: `t_col` is a constant [P,1] column of
    /// per-system times, `x` is [P,d].
    pub fn eval_tape(&self, tape: &Tape, fv: &FieldVars, t_col: Var, x: Var) -> Result<Var> {
        let u = tape.matmul(x, fv.w1)?;
        let u = tape.add_bias(u, fv.b1)?;
        let tm = tape.matmul(t_col, fv.wt)?;
        let u = tape.add(u, tm)?;
        let v = tape.matmul(u, fv.w2)?;
        let v = tape.add_bias(v, fv.b2)?;
        let v = match self.norm {
            FieldNorm::ConcatNorm => tape.layer_norm(v, fv.ln_g, fv.ln_b, 1e-5)?,
            FieldNorm::Concat => v,
        };
        match self.act {
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }

    /// Numeric evaluation mirroring `eval_tape`.
    pub fn eval_numeric(&self, p: &FieldParamsRef<'_>, t_col: &[f64], x: &Tensor) -> Tensor {
        let (rows, d) = (x.rows(), self.dim);
        let mut u = x.matmul(p.w1).expect("field shapes fixed at init");
        for i in 0..rows {
            let ti = t_col[i];
            let urow = &mut u.data[i * d..(i + 1) * d];
            for j in 0..d {
                urow[j] += p.b1.data[j] + ti * p.wt.data[j];
            }
        }
        let mut v = u.matmul(p.w2).expect("field shapes fixed at init");
        for i in 0..rows {
            let vrow = &mut v.data[i * d..(i + 1) * d];
            for j in 0..d {
                vrow[j] += p.b2.data[j];
            }
        }
        if self.norm == FieldNorm::ConcatNorm {
            for i in 0..rows {
                let vrow = &mut v.data[i * d..(i + 1) * d];
                let n = d as f64;
                let mu = vrow.iter().sum::<f64>() / n;
                let var = vrow.iter().map(|&y| (y - mu) * (y - mu)).sum::<f64>() / n;
                let istd = 1.0 / (var + 1e-5).sqrt();
                for j in 0..d {
                    vrow[j] = (vrow[j] - mu) * istd * p.ln_g.data[j] + p.ln_b.data[j];
                }
            }
        }
        for y in v.data.iter_mut() {
            *y = self.act.apply(*y);
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub w1: Var,
    pub b1: Var,
    pub wt: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FieldParamsRef<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub wt: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
    pub ln_g: &'a Tensor,
    pub ln_b: &'a Tensor,
}

// ---------------------------------------------------------------------------
// Batched pair systems on the dummy interval.
// ---------------------------------------------------------------------------

/// Interval endpoints of each pair system. `t1` may precede `t0`: the dummy
/// variable still runs forward from -1 to 1 while real time runs backward,
/// which is how scores for queries before a key's anchor are obtained.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub t0: Vec<f64>,
    pub t1: Vec<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.t0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t0.is_empty()
    }

    /// Per-system scale (t1 - t0)/2 of the change of variables.
    pub fn scales(&self) -> Vec<f64> {
        self.t0
            .iter()
            .zip(self.t1.iter())
            .map(|(&a, &b)| (b - a) / 2.0)
            .collect()
    }

    /// Per-system midpoint (t0 + t1)/2.
    pub fn mids(&self) -> Vec<f64> {
        self.t0
            .iter()
            .zip(self.t1.iter())
            .map(|(&a, &b)| (a + b) / 2.0)
            .collect()
    }

    /// Real time of every system at dummy position s.
    pub fn times_at(&self, s: f64) -> Vec<f64> {
        self.t0
            .iter()
            .zip(self.t1.iter())
            .map(|(&a, &b)| (s * (b - a) + a + b) / 2.0)
            .collect()
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("batched_solve: empty checkpoint grid"));
    }
    for w in grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid("batched_solve: grid must be ascending"));
        }
    }
    if grid[0] < -1.0 - 1e-12 || grid[grid.len() - 1] > 1.0 + 1e-12 {
        return Err(Error::invalid("batched_solve: grid must lie in [-1, 1]"));
    }
    Ok(())
}

/// One RK4 sweep of the dummy interval advancing all pair systems at once,
/// recorded on the tape. Returns the stacked [P,d] state at each checkpoint;
/// a checkpoint at -1 is the initial state itself.
#[allow(clippy::too_many_arguments)]
pub fn batched_solve_tape(
    tape: &Tape,
    field: &VectorField,
    fv: &FieldVars,
    inits: Var,
    pairs: &PairSet,
    grid: &[f64],
    cfg: &SolverConfig,
    nfe: &NfeCounter,
) -> Result<Vec<Var>> {
    check_grid(grid)?;
    let scales = pairs.scales();
    let scale_col = tape.leaf(Tensor::col(&scales));
    let eval = |tape: &Tape, s: f64, x: Var| -> Result<Var> {
        let t_col = tape.leaf(Tensor::col(&pairs.times_at(s)));
        let y = field.eval_tape(tape, fv, t_col, x)?;
        tape.mul_col(y, scale_col)
    };
    sweep_tape(tape, &eval, inits, -1.0, grid, cfg, nfe)
}

/// Numeric twin of [`batched_solve_tape`].
pub fn batched_solve_numeric(
    field: &VectorField,
    params: &FieldParamsRef<'_>,
    inits: &Tensor,
    pairs: &PairSet,
    grid: &[f64],
    cfg: &SolverConfig,
    nfe: &NfeCounter,
) -> Result<Vec<Tensor>> {
    check_grid(grid)?;
    let scales = pairs.scales();
    let eval = |s: f64, x: &Tensor| -> Tensor {
        let mut y = field.eval_numeric(params, &pairs.times_at(s), x);
        let n = y.cols();
        for (i, v) in y.data.iter_mut().enumerate() {
            *v *= scales[i / n];
        }
        y
    };
    sweep_numeric(&eval, inits, -1.0, grid, cfg, nfe)
}

/// Differentiable RK4 over raw time for a batch sharing one clock.
#[allow(clippy::too_many_arguments)]
pub fn rk4_solve_tape(
    tape: &Tape,
    field: &VectorField,
    fv: &FieldVars,
    x0: Var,
    t0: f64,
    grid: &[f64],
    cfg: &SolverConfig,
    nfe: &NfeCounter,
) -> Result<Vec<Var>> {
    let rows = tape.shape_of(x0)[0];
    let eval = |tape: &Tape, t: f64, x: Var| -> Result<Var> {
        let t_col = tape.leaf(Tensor::full(&[rows, 1], t));
        field.eval_tape(tape, fv, t_col, x)
    };
    sweep_tape(tape, &eval, x0, t0, grid, cfg, nfe)
}

fn sweep_tape(
    tape: &Tape,
    eval: &dyn Fn(&Tape, f64, Var) -> Result<Var>,
    x0: Var,
    s0: f64,
    grid: &[f64],
    cfg: &SolverConfig,
    nfe: &NfeCounter,
) -> Result<Vec<Var>> {
    let mut x = x0;
    let mut s = s0;
    let mut out = Vec::with_capacity(grid.len());
    let mut step_index = 0usize;
    for &target in grid {
        if target < s - 1e-12 {
            return Err(Error::invalid(format!(
                "sweep: checkpoint {target} precedes current position {s}"
            )));
        }
        for h in segment_steps(target - s, cfg.step) {
            nfe.bump();
            let k1 = eval(tape, s, x)?;
            let x1 = tape.add(x, tape.scale(k1, h / 2.0)?)?;
            nfe.bump();
            let k2 = eval(tape, s + h / 2.0, x1)?;
            let x2 = tape.add(x, tape.scale(k2, h / 2.0)?)?;
            nfe.bump();
            let k3 = eval(tape, s + h / 2.0, x2)?;
            let x3 = tape.add(x, tape.scale(k3, h)?)?;
            nfe.bump();
            let k4 = eval(tape, s + h, x3)?;
            let k23 = tape.add(k2, k3)?;
            let sum = tape.add(tape.add(k1, k4)?, tape.scale(k23, 2.0)?)?;
            x = tape.add(x, tape.scale(sum, h / 6.0)?)?;
            s += h;
            step_index += 1;
            if !tape.with_value(x, |t| t.all_finite()) {
                return Err(Error::SolverDiverged { step: step_index });
            }
        }
        s = target;
        out.push(x);
    }
    Ok(out)
}

fn sweep_numeric(
    eval: &dyn Fn(f64, &Tensor) -> Tensor,
    x0: &Tensor,
    s0: f64,
    grid: &[f64],
    cfg: &SolverConfig,
    nfe: &NfeCounter,
) -> Result<Vec<Tensor>> {
    let axpy = |x: &Tensor, k: &Tensor, c: f64| -> Tensor {
        let mut out = x.clone();
        for (o, &kv) in out.data.iter_mut().zip(k.data.iter()) {
            *o += c * kv;
        }
        out
    };
    let mut x = x0.clone();
    let mut s = s0;
    let mut out = Vec::with_capacity(grid.len());
    let mut step_index = 0usize;
    for &target in grid {
        if target < s - 1e-12 {
            return Err(Error::invalid(format!(
                "sweep: checkpoint {target} precedes current position {s}"
            )));
        }
        for h in segment_steps(target - s, cfg.step) {
            nfe.bump();
            let k1 = eval(s, &x);
            nfe.bump();
            let k2 = eval(s + h / 2.0, &axpy(&x, &k1, h / 2.0));
            nfe.bump();
            let k3 = eval(s + h / 2.0, &axpy(&x, &k2, h / 2.0));
            nfe.bump();
            let k4 = eval(s + h, &axpy(&x, &k3, h));
            for i in 0..x.data.len() {
                x.data[i] +=
                    h / 6.0 * (k1.data[i] + 2.0 * k2.data[i] + 2.0 * k3.data[i] + k4.data[i]);
            }
            s += h;
            step_index += 1;
            if !x.all_finite() {
                return Err(Error::SolverDiverged { step: step_index });
            }
        }
        s = target;
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
