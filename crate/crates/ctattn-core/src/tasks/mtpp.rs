//! Synthetic marked temporal point process: the time-aware dynamic-kernel
//! generator, the closed-form softplus intensity head on top of the encoder,
//! the Monte-Carlo log-likelihood, and the multi-task training loss.

use crate::autodiff::optim::{Binding, GradMap, Optimizer, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ContiFormer, Embedding, InputKind, ModelConfig, ModelInputs};
use crate::ode::NfeCounter;
use crate::rng;
use crate::tasks::spiral::run_parallel;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_TYPES: usize = 10;
pub const TMAX: f64 = 20.0;
/// Variance of the per-event attribute noise around the type means.
pub const MARK_VAR: f64 = 0.01;

/// Per-type mark attributes of the generator.
pub const X_MARKS: [f64; 10] = [0.78, 0.11, -1.0, -0.56, -0.78, 1.0, 0.56, -0.33, 0.3, -0.11];
pub const V_MARKS: [f64; 10] = [
    -0.17, 0.5, -0.28, 0.28, 0.17, 0.39, -0.05, 0.05, -0.39, -0.5,
];
pub const D_MARKS: [f64; 10] = [0.5, 0.0, 0.28, 0.17, 0.22, 0.44, 0.33, 0.11, 0.05, 0.39];

/// One event: time, type (1-based, in 1..=NUM_TYPES), and mark attributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub k: usize,
    pub x: f64,
    pub v: f64,
    pub d: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EventSequence {
    pub seq: Vec<Event>,
}

impl EventSequence {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.seq.iter().map(|e| e.t).collect()
    }

    /// 0-based type ids for the embedding table.
    pub fn type_ids(&self) -> Vec<usize> {
        self.seq.iter().map(|e| e.k - 1).collect()
    }
}

/// The fixed type-transition matrix P(k | k_prev). The reference experiment
/// leaves its values unstated, so this artifact pins it to a seeded
/// row-stochastic draw: row entries are uniform variates normalized to sum 1,
/// from a dedicated stream of seed 0. An artifact constant, not a paper value.
pub fn transition_matrix() -> [[f64; NUM_TYPES]; NUM_TYPES] {
    let mut r = rng::stream(0, "mtpp-transition");
    let mut p = [[0.0; NUM_TYPES]; NUM_TYPES];
    for row in p.iter_mut() {
        let mut sum = 0.0;
        for cell in row.iter_mut() {
            *cell = r.gen_range(0.0..1.0);
            sum += *cell;
        }
        for cell in row.iter_mut() {
            *cell /= sum;
        }
    }
    p
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sample mark attributes for a (1-based) event type.
pub fn sample_mark_attrs(k: usize, rng: &mut impl Rng) -> (f64, f64, f64) {
    let std = MARK_VAR.sqrt();
    let x = X_MARKS[k - 1] + Tensor::randn(&[1], std, rng).data[0];
    let v = V_MARKS[k - 1] + Tensor::randn(&[1], std, rng).data[0];
    // One decay constant is printed as zero; clamp keeps d > 0 with the same
    // instantly-vanishing influence in the kernel.
    let d = D_MARKS[k - 1].max(1e-6);
    (x, v, d)
}

/// Generator intensity at time t given the history and its last event:
/// softplus of the decayed pairwise weights against the last event.
fn generator_intensity(history: &[Event], t: f64) -> f64 {
    let last = history.last().expect("nonempty history");
    let mut acc = 0.0;
    for e in history {
        let w = (e.t - last.t) * (e.x * last.v - last.x * e.v);
        acc += w * (-(t - e.t) / e.d).exp();
    }
    softplus(acc)
}

/// Expected next event time t_hat = integral of t p(t|H) dt, where
/// p(t|H) = lambda(t) exp(-integral of lambda). Accumulated through the
/// survivor function on a fine grid, stopping once the remaining mass is
/// negligible.
fn expected_next_time(lambda: impl Fn(f64) -> f64, t_start: f64) -> f64 {
    let dt = 0.005;
    let cap = t_start + 300.0;
    let mut t = t_start;
    let mut lam = lambda(t);
    let mut cum = 0.0;
    let mut surv_prev = 1.0;
    let mut integral = 0.0;
    loop {
        let t_next = t + dt;
        let lam_next = lambda(t_next);
        cum += dt * (lam + lam_next) / 2.0;
        let surv_next = (-cum).exp();
        integral += (surv_prev - surv_next) * (t + t_next) / 2.0;
        if surv_next < 1e-12 || t_next >= cap {
            // Assign the leftover tail mass to the cutoff point.
            return integral + surv_next * t_next;
        }
        t = t_next;
        lam = lam_next;
        surv_prev = surv_next;
    }
}

/// One synthetic event sequence; fully determined by the seed. Events whose
/// predicted time exceeds TMAX are discarded and generation stops.
pub fn gen_mtpp(seed: u64) -> EventSequence {
    let mut r = rng::stream(seed, "mtpp-data");
    let p = transition_matrix();
    let mut events: Vec<Event> = Vec::new();

    // First event: uniform type; its time is the expected time under the
    // empty-history intensity softplus(0), keeping every timestamp positive.
    let k0 = r.gen_range(1..=NUM_TYPES);
    let (x, v, d) = sample_mark_attrs(k0, &mut r);
    let t0 = 1.0 / softplus(0.0);
    events.push(Event {
        t: t0,
        k: k0,
        x,
        v,
        d,
    });

    // Guard against pathological self-excitation; never reached for the
    // printed mark constants.
    while events.len() < 2000 {
        let t_last = events.last().unwrap().t;
        let that = {
            let hist = &events;
            expected_next_time(|t| generator_intensity(hist, t), t_last)
        };
        if that > TMAX {
            break;
        }
        // Sample the next type from the transition row of the last type.
        let row = &p[events.last().unwrap().k - 1];
        let u: f64 = r.gen_range(0.0..1.0);
        let mut k_next = NUM_TYPES;
        let mut acc = 0.0;
        for (k, &pk) in row.iter().enumerate() {
            acc += pk;
            if u <= acc {
                k_next = k + 1;
                break;
            }
        }
        let (x, v, d) = sample_mark_attrs(k_next, &mut r);
        events.push(Event {
            t: that,
            k: k_next,
            x,
            v,
            d,
        });
    }
    EventSequence { seq: events }
}

// ---------------------------------------------------------------------------
// Intensity head and losses on top of the encoder.
// ---------------------------------------------------------------------------

/// Closed-form conditional intensity per type on (t_j, t_{j+1}]:
/// lambda_k(t) = softplus(alpha_k (t - t_j)/t_j + w_k . h(t_j) + b_k).
#[derive(Clone, Copy, Debug)]
pub struct IntensityHead {
    pub d_model: usize,
    pub num_types: usize,
}

impl IntensityHead {
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            "intensity.w",
            Tensor::xavier(
                self.d_model,
                self.num_types,
                &[self.d_model, self.num_types],
                rng,
            ),
        );
        store.insert("intensity.b", Tensor::zeros(&[self.num_types]));
        store.insert("intensity.alpha", Tensor::zeros(&[1, self.num_types]));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MtppLossConfig {
    /// Weight of the next-time regression term.
    pub alpha1: f64,
    /// Weight of the type cross-entropy term.
    pub alpha2: f64,
    /// Monte-Carlo samples per inter-event interval for the compensator.
    pub mc_samples: usize,
    /// Prediction integral horizon, in units of the mean inter-event gap.
    pub horizon_gaps: f64,
    /// Trapezoid points of the prediction integral.
    pub pred_grid: usize,
}

impl Default for MtppLossConfig {
    fn default() -> Self {
        MtppLossConfig {
            alpha1: 0.01,
            alpha2: 1.0,
            mc_samples: 20,
            horizon_gaps: 10.0,
            pred_grid: 100,
        }
    }
}

/// Per-sequence losses and prediction metrics.
pub struct MtppSeqResult {
    /// Scalar node to minimize: -ll + alpha1 * reg + alpha2 * pred.
    pub objective: Var,
    pub ll: f64,
    pub reg: f64,
    pub pred: f64,
    /// Predicted next-event times, one per interval.
    pub that: Vec<f64>,
    pub n_predicted: usize,
    pub correct_types: usize,
    pub time_sq_err: f64,
}

/// Event log-likelihood (exact) minus the Monte-Carlo compensator, plus the
/// prediction losses, differentiable end to end (including through the
/// predicted times).
pub fn mtpp_losses(
    tape: &Tape,
    binding: &mut Binding<'_>,
    head: &IntensityHead,
    h: Var,
    seq: &EventSequence,
    cfg: &MtppLossConfig,
    mc_rng: &mut ChaCha8Rng,
) -> Result<MtppSeqResult> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "mtpp losses: need at least 2 events, got {n}"
        )));
    }
    let times = seq.times();
    if times[0] <= 0.0 {
        return Err(Error::invalid(
            "mtpp losses: event times must be positive (the head divides by t_j)",
        ));
    }
    let w = binding.bind("intensity.w")?;
    let b = binding.bind("intensity.b")?;
    let alpha = binding.bind("intensity.alpha")?;
    let base = tape.add_bias(tape.matmul(h, w)?, b)?; // [n, K]
    let k = head.num_types;
    let intervals = n - 1;
    let interval_rows: Vec<usize> = (0..intervals).collect();

    // lambda over a batch of (interval, time) rows.
    let lam_at = |tape: &Tape, rows: &[usize], elapsed: Var| -> Result<(Var, Var)> {
        let sel = tape.select_rows(base, rows)?;
        let mix = tape.matmul(elapsed, alpha)?;
        let typed = tape.softplus(tape.add(sel, mix)?, 1.0)?;
        let total = tape.sum_axis1(typed)?;
        Ok((typed, total))
    };

    // Exact event term: log of the total intensity at each event time,
    // evaluated on the preceding interval.
    let elapsed_events: Vec<f64> = (0..intervals)
        .map(|j| (times[j + 1] - times[j]) / times[j])
        .collect();
    let (_, lam_events) = lam_at(
        tape,
        &interval_rows,
        tape.leaf(Tensor::col(&elapsed_events)),
    )?;
    {
        let vals = tape.get(lam_events);
        for (j, &l) in vals.data.iter().enumerate() {
            if l.is_nan() || l <= 0.0 || !l.is_finite() {
                return Err(Error::invalid(format!(
                    "mtpp losses: non-positive intensity {l} at event {}",
                    j + 1
                )));
            }
        }
    }
    let event_term = tape.sum_all(tape.log(tape.add_scalar(lam_events, 1e-30)?)?)?;

    // Monte-Carlo compensator: uniform samples per interval; zero-length
    // intervals contribute exactly nothing.
    let mut mc_rows = Vec::new();
    let mut mc_elapsed = Vec::new();
    let mut mc_weight = Vec::new();
    for j in 0..intervals {
        let len = times[j + 1] - times[j];
        if len <= 0.0 {
            continue;
        }
        for _ in 0..cfg.mc_samples {
            let u = times[j] + mc_rng.gen_range(0.0..1.0) * len;
            mc_rows.push(j);
            mc_elapsed.push((u - times[j]) / times[j]);
            mc_weight.push(len / cfg.mc_samples as f64);
        }
    }
    let compensator = if mc_rows.is_empty() {
        tape.scalar(0.0)
    } else {
        let (_, lam_mc) = lam_at(tape, &mc_rows, tape.leaf(Tensor::col(&mc_elapsed)))?;
        let weighted = tape.mul(lam_mc, tape.leaf(Tensor::col(&mc_weight)))?;
        tape.sum_all(weighted)?
    };
    let ll = tape.sub(event_term, compensator)?;

    // Predicted next-event times: t_hat = integral t lambda exp(-Lambda) dt
    // over a truncated horizon, trapezoid cumulative integral, shared grid
    // geometry across intervals.
    let g = cfg.pred_grid;
    let mean_gap = (times[n - 1] - times[0]) / intervals as f64;
    let horizon = cfg.horizon_gaps * mean_gap;
    let delta = horizon / (g - 1) as f64;
    // Lower-triangular trapezoid cumulative weights (row m: integral to u_m).
    let mut wcum = Tensor::zeros(&[g, g]);
    for m in 1..g {
        for i in 0..=m {
            let wgt = if i == 0 || i == m { 0.5 } else { 1.0 };
            wcum.set(m, i, wgt * delta);
        }
    }
    let wcum = tape.leaf(wcum);
    // Row vector of final trapezoid weights for the outer integral.
    let mut trap = vec![delta; g];
    trap[0] = delta / 2.0;
    trap[g - 1] = delta / 2.0;
    let trap_row = tape.leaf(Tensor::row(&trap));

    let mut that_parts = Vec::with_capacity(intervals);
    for j in 0..intervals {
        let grid_rows = vec![j; g];
        let offsets: Vec<f64> = (0..g).map(|m| m as f64 * delta).collect();
        let elapsed: Vec<f64> = offsets.iter().map(|&o| o / times[j]).collect();
        let (_, lam) = lam_at(tape, &grid_rows, tape.leaf(Tensor::col(&elapsed)))?;
        let cum = tape.matmul(wcum, lam)?;
        let surv = tape.exp(tape.neg(cum)?)?;
        let p = tape.mul(lam, surv)?;
        let tcol: Vec<f64> = offsets.iter().map(|&o| times[j] + o).collect();
        let integrand = tape.mul(p, tape.leaf(Tensor::col(&tcol)))?;
        that_parts.push(tape.matmul(trap_row, integrand)?); // [1,1]
    }
    let that_row = if that_parts.len() == 1 {
        that_parts[0]
    } else {
        tape.concat_cols(&that_parts)?
    };
    let that_col = tape.reshape(that_row, &[intervals, 1])?;
    let that_vals = tape.get(that_col);

    // Regression on the true next times.
    let targets: Vec<f64> = (1..n).map(|j| times[j]).collect();
    let diff = tape.sub(that_col, tape.leaf(Tensor::col(&targets)))?;
    let reg = tape.sum_all(tape.mul(diff, diff)?)?;

    // Type cross-entropy at the predicted times (differentiable through
    // t_hat as well).
    let inv_tj: Vec<f64> = (0..intervals).map(|j| 1.0 / times[j]).collect();
    let tj_col: Vec<f64> = (0..intervals).map(|j| times[j]).collect();
    let elapsed_hat = tape.mul(
        tape.sub(that_col, tape.leaf(Tensor::col(&tj_col)))?,
        tape.leaf(Tensor::col(&inv_tj)),
    )?;
    let (typed_hat, total_hat) = lam_at(tape, &interval_rows, elapsed_hat)?;
    let true_pos: Vec<usize> = (0..intervals)
        .map(|j| j * k + (seq.seq[j + 1].k - 1))
        .collect();
    let lam_true = tape.select_entries(typed_hat, &true_pos)?;
    let pred = tape.sum_all(tape.sub(
        tape.log(tape.add_scalar(total_hat, 1e-30)?)?,
        tape.log(tape.add_scalar(lam_true, 1e-30)?)?,
    )?)?;

    let objective = tape.add(
        tape.add(tape.neg(ll)?, tape.scale(reg, cfg.alpha1)?)?,
        tape.scale(pred, cfg.alpha2)?,
    )?;

    // Prediction metrics from the extracted values.
    let typed_vals = tape.get(typed_hat);
    let mut correct = 0usize;
    let mut sq = 0.0;
    let mut that = Vec::with_capacity(intervals);
    for j in 0..intervals {
        let row = typed_vals.row_slice(j);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if argmax == seq.seq[j + 1].k - 1 {
            correct += 1;
        }
        let t_hat = that_vals.data[j];
        that.push(t_hat);
        sq += (t_hat - times[j + 1]).powi(2);
    }
    Ok(MtppSeqResult {
        objective,
        ll: tape.get(ll).item(),
        reg: tape.get(reg).item(),
        pred: tape.get(pred).item(),
        that,
        n_predicted: intervals,
        correct_types: correct,
        time_sq_err: sq,
    })
}

// ---------------------------------------------------------------------------
// Training and evaluation.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MtppTrainConfig {
    pub model: ModelConfig,
    pub loss: MtppLossConfig,
    pub num_types: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MtppMetrics {
    /// Mean log-likelihood per scored event.
    pub ll: f64,
    /// Next-type accuracy; suppressed for single-type data.
    pub accuracy: Option<f64>,
    /// RMSE of the predicted next-event times.
    pub time_rmse: f64,
}

pub struct MtppTrained {
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub losses: Vec<(usize, f64)>,
}

fn mtpp_model(cfg: &MtppTrainConfig) -> Result<ContiFormer> {
    ContiFormer::new(
        cfg.model.clone(),
        Embedding::EventType {
            num_types: cfg.num_types,
        },
    )
}

pub fn init_mtpp_params(cfg: &MtppTrainConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.seed, "mtpp-init");
    mtpp_model(cfg)?.init_params(&mut store, &mut r);
    IntensityHead {
        d_model: cfg.model.d_model,
        num_types: cfg.num_types,
    }
    .init_params(&mut store, &mut r);
    Ok(store)
}

/// Forward one sequence and compute its losses.
fn mtpp_step(
    cfg: &MtppTrainConfig,
    store: &ParamStore,
    seq: &EventSequence,
    mc_seed: u64,
    dropout_seed: u64,
    want_grads: bool,
) -> Result<(MtppStats, Option<GradMap>)> {
    let tape = if want_grads && cfg.model.dropout > 0.0 {
        Tape::for_training(ChaCha8Rng::seed_from_u64(dropout_seed))
    } else {
        Tape::new()
    };
    let mut binding = Binding::new(&tape, store);
    let model = mtpp_model(cfg)?;
    let times = seq.times();
    let types = seq.type_ids();
    let inputs = ModelInputs {
        times: &times,
        kind: InputKind::Events { types: &types },
    };
    let h = model.forward(&tape, &mut binding, &inputs, &times, &NfeCounter::new())?;
    let head = IntensityHead {
        d_model: cfg.model.d_model,
        num_types: cfg.num_types,
    };
    let mut mc_rng = ChaCha8Rng::seed_from_u64(mc_seed);
    let result = mtpp_losses(&tape, &mut binding, &head, h, seq, &cfg.loss, &mut mc_rng)?;
    let stats = MtppStats {
        objective: tape.get(result.objective).item(),
        ll: result.ll,
        n_predicted: result.n_predicted,
        correct: result.correct_types,
        time_sq_err: result.time_sq_err,
    };
    if !want_grads {
        return Ok((stats, None));
    }
    let grads = tape.backward(result.objective)?;
    Ok((stats, Some(binding.grad_map(&grads))))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MtppStats {
    pub objective: f64,
    pub ll: f64,
    pub n_predicted: usize,
    pub correct: usize,
    pub time_sq_err: f64,
}

pub fn train_mtpp(train: &[EventSequence], cfg: &MtppTrainConfig) -> Result<MtppTrained> {
    let usable: Vec<&EventSequence> = train.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("mtpp train: no sequences with >= 2 events"));
    }
    let mut store = init_mtpp_params(cfg)?;
    let mut opt = Optimizer::adam();
    let mut batch_rng = rng::stream(cfg.seed, "mtpp-batches");
    let mut losses = Vec::new();
    for iter in 0..cfg.iters {
        let mut plan = Vec::with_capacity(cfg.batch);
        for bi in 0..cfg.batch {
            let idx = batch_rng.gen_range(0..usable.len());
            let salt = (iter * cfg.batch + bi) as u64;
            let mc_seed = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(salt);
            let dropout_seed = cfg
                .seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(salt);
            plan.push((idx, mc_seed, dropout_seed));
        }
        let results = run_parallel(cfg.workers, &plan, |(idx, mc, ds)| {
            mtpp_step(cfg, &store, usable[*idx], *mc, *ds, true)
        })?;
        let mut obj_sum = 0.0;
        let mut maps = Vec::with_capacity(results.len());
        for (stats, g) in results {
            obj_sum += stats.objective;
            maps.push(g.expect("training step returns gradients"));
        }
        let mut total = ParamStore::sum_grads(maps);
        for g in total.values_mut() {
            for v in g.data.iter_mut() {
                *v /= cfg.batch as f64;
            }
        }
        opt.step(&mut store, &total, cfg.lr)?;
        if iter % 10 == 0 || iter + 1 == cfg.iters {
            losses.push((iter, obj_sum / cfg.batch as f64));
        }
    }
    Ok(MtppTrained {
        params: store,
        optimizer: opt,
        losses,
    })
}

/// Held-out metrics; the Monte-Carlo stream is fixed per sequence index so
/// evaluation is reproducible.
pub fn eval_mtpp(
    seqs: &[EventSequence],
    cfg: &MtppTrainConfig,
    store: &ParamStore,
) -> Result<MtppMetrics> {
    let usable: Vec<(usize, &EventSequence)> = seqs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("mtpp eval: no sequences with >= 2 events"));
    }
    let stats = run_parallel(cfg.workers, &usable, |(i, seq)| {
        mtpp_step(cfg, store, seq, 1_000_000 + *i as u64, 0, false).map(|(s, _)| s)
    })?;
    let mut ll = 0.0;
    let mut events = 0usize;
    let mut correct = 0usize;
    let mut sq = 0.0;
    for s in stats {
        ll += s.ll;
        events += s.n_predicted;
        correct += s.correct;
        sq += s.time_sq_err;
    }
    Ok(MtppMetrics {
        ll: ll / events as f64,
        accuracy: if cfg.num_types > 1 {
            Some(correct as f64 / events as f64)
        } else {
            None
        },
        time_rmse: (sq / events as f64).sqrt(),
    })
}
