//! The 2-d spiral interpolation/extrapolation experiment: data generation,
//! observation masking, the training loops for the continuous-time model and
//! the discrete baseline, and RMSE/MAE evaluation.
//!
//! Each trajectory has 150 equally spaced samples; a sparse subset of the
//! first half is observed. Models train on noisy copies of first-half
//! targets; the second half stays unseen until extrapolation scoring.

use crate::autodiff::optim::{Binding, GradMap, Optimizer, ParamStore};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::interp::{SplineFunction, SplineKind};
use crate::model::{
    ContiFormer, Embedding, InputKind, ModelConfig, ModelInputs, VanillaTransformer,
};
use crate::ode::NfeCounter;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SPIRAL_POINTS: usize = 150;
const SPIRAL_END: f64 = 6.0 * std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpiralKind {
    Clockwise,
    CounterClockwise,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpiralRecord {
    pub times: Vec<f64>,
    /// Clean trajectory, one [x, y] per time.
    pub values: Vec<[f64; 2]>,
    /// Sorted observed indices, drawn from the first half.
    pub observed: Vec<usize>,
    pub kind: SpiralKind,
}

#[derive(Clone, Debug)]
pub struct SpiralDataset {
    pub records: Vec<SpiralRecord>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

/// Spiral of the given kind sampled at 150 equally spaced times on
/// [0, 6*pi]. The clockwise kind runs its phase backwards from e = 6*pi + 1,
/// which also keeps its radius denominator away from zero.
pub fn spiral_points(kind: SpiralKind, a: f64, b: f64) -> (Vec<f64>, Vec<[f64; 2]>) {
    let times: Vec<f64> = (0..SPIRAL_POINTS)
        .map(|i| SPIRAL_END * i as f64 / (SPIRAL_POINTS - 1) as f64)
        .collect();
    let e = SPIRAL_END + 1.0;
    let values = times
        .iter()
        .map(|&t| match kind {
            SpiralKind::CounterClockwise => {
                let r = a + b * t;
                [r * t.cos(), r * t.sin()]
            }
            SpiralKind::Clockwise => {
                let z = e - t;
                let r = a + 50.0 * b / z;
                [r * z.cos(), r * z.sin()]
            }
        })
        .collect();
    (times, values)
}

/// Sorted unique observation indices from the first half of the grid.
pub fn sample_observed(n_obs: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let half = SPIRAL_POINTS / 2;
    if n_obs == 0 || n_obs > half {
        return Err(Error::invalid(format!(
            "spiral mask: need 1..={half} observed points, got {n_obs}"
        )));
    }
    let mut idx: Vec<usize> = (0..half).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx[..n_obs].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Deterministic dataset of `count` spirals: kind uniform, a ~ N(0, alpha),
/// b ~ N(0.3, alpha) with alpha as the standard deviation.
pub fn gen_spirals(
    count: usize,
    alpha: f64,
    beta: f64,
    n_obs: usize,
    seed: u64,
) -> Result<SpiralDataset> {
    if count < 2 {
        return Err(Error::invalid("spiral: need at least 2 trajectories"));
    }
    let mut r = rng::stream(seed, "spiral-data");
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = if r.gen::<bool>() {
            SpiralKind::Clockwise
        } else {
            SpiralKind::CounterClockwise
        };
        let a = Tensor::randn(&[1], alpha, &mut r).data[0];
        let b = 0.3 + Tensor::randn(&[1], alpha, &mut r).data[0];
        let (times, values) = spiral_points(kind, a, b);
        let observed = sample_observed(n_obs, &mut r)?;
        records.push(SpiralRecord {
            times,
            values,
            observed,
            kind,
        });
    }
    Ok(SpiralDataset {
        records,
        alpha,
        beta,
        seed,
    })
}

/// Gaussian noise (std `beta`) over a whole trajectory, one draw per
/// coordinate; training copies only.
pub fn noisy_values(record: &SpiralRecord, beta: f64, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    record
        .values
        .iter()
        .map(|&[x, y]| {
            let nx: f64 = Tensor::randn(&[1], beta, rng).data[0];
            let ny: f64 = Tensor::randn(&[1], beta, rng).data[0];
            [x + nx, y + ny]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub rmse: f64,
    pub mae: f64,
}

/// RMSE and MAE over aligned point lists (all coordinates pooled).
pub fn spiral_metrics(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<SplitMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "spiral metrics: {} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let n = (pred.len() * 2) as f64;
    for (p, t) in pred.iter().zip(truth.iter()) {
        for m in 0..2 {
            let d = p[m] - t[m];
            se += d * d;
            ae += d.abs();
        }
    }
    Ok(SplitMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhichModel {
    Contiformer,
    Transformer,
}

impl std::str::FromStr for WhichModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiformer" => Ok(WhichModel::Contiformer),
            "transformer" => Ok(WhichModel::Transformer),
            other => Err(Error::invalid(format!(
                "model: expected `contiformer` or `transformer`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpiralTrainConfig {
    pub model: ModelConfig,
    pub which: WhichModel,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Target points sampled per trajectory per iteration.
    pub queries_per_iter: usize,
    /// Unseen grid positions become extra anchor tokens at this stride, with
    /// values filled by linear interpolation of the observations; 0 disables
    /// filling and anchors sit at the observed points only.
    pub anchor_stride: usize,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpiralEval {
    pub interpolation: SplitMetrics,
    pub extrapolation: SplitMetrics,
}

pub struct SpiralTrained {
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub losses: Vec<(usize, f64)>,
    /// Standard deviation of the training values; models see values divided
    /// by it and predictions are mapped back before scoring.
    pub value_scale: f64,
}

/// Pooled standard deviation of all coordinates in the records.
pub fn value_std(records: &[SpiralRecord]) -> f64 {
    let mut n = 0usize;
    let mut mean = 0.0;
    for r in records {
        for &[x, y] in &r.values {
            mean += x + y;
            n += 2;
        }
    }
    mean /= n as f64;
    let mut var = 0.0;
    for r in records {
        for &[x, y] in &r.values {
            var += (x - mean) * (x - mean) + (y - mean) * (y - mean);
        }
    }
    (var / n as f64).sqrt().max(1e-9)
}

struct SpiralItem {
    record: SpiralRecord,
    noisy: Vec<[f64; 2]>,
}

fn prepare_items(ds: &SpiralDataset, noise_seed: u64) -> Vec<SpiralItem> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let mut r = rng::stream(
                noise_seed ^ (i as u64).wrapping_mul(0x9e37_79b9),
                "spiral-noise",
            );
            let noisy = noisy_values(record, ds.beta, &mut r);
            SpiralItem {
                record: record.clone(),
                noisy,
            }
        })
        .collect()
}

fn init_spiral_params(cfg: &SpiralTrainConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.seed, "spiral-init");
    match cfg.which {
        WhichModel::Contiformer => {
            let model = ContiFormer::new(cfg.model.clone(), Embedding::Linear { in_dim: 2 })?;
            model.init_params(&mut store, &mut r);
        }
        WhichModel::Transformer => {
            let model =
                VanillaTransformer::new(cfg.model.clone(), Embedding::Linear { in_dim: 2 })?;
            model.init_params(&mut store, &mut r);
        }
    }
    store.insert(
        "head.w",
        Tensor::xavier(cfg.model.d_model, 2, &[cfg.model.d_model, 2], &mut r),
    );
    store.insert("head.b", Tensor::zeros(&[2]));
    Ok(store)
}

/// Anchor tokens of the continuous-time model: the observed points plus,
/// at the configured stride, unseen grid positions whose values come from
/// linear interpolation of the observations.
fn contiformer_anchors(
    record: &SpiralRecord,
    source: &[[f64; 2]],
    stride: usize,
) -> Result<(Vec<f64>, Tensor)> {
    let obs_times: Vec<f64> = record.observed.iter().map(|&i| record.times[i]).collect();
    let obs_vals: Vec<f64> = record.observed.iter().flat_map(|&i| source[i]).collect();
    if stride == 0 {
        return Ok((
            obs_times,
            Tensor::matrix(record.observed.len(), 2, obs_vals)?,
        ));
    }
    let observed: std::collections::BTreeSet<usize> = record.observed.iter().copied().collect();
    let fill = SplineFunction::fit(
        SplineKind::Linear,
        &obs_times,
        &Tensor::matrix(record.observed.len(), 2, obs_vals)?,
    )?;
    let mut times = Vec::new();
    let mut vals = Vec::new();
    for i in 0..SPIRAL_POINTS {
        if observed.contains(&i) {
            times.push(record.times[i]);
            vals.extend_from_slice(&source[i]);
        } else if i % stride == 0 {
            times.push(record.times[i]);
            vals.extend(fill.eval(record.times[i]));
        }
    }
    let n = times.len();
    Ok((times, Tensor::matrix(n, 2, vals)?))
}

/// Forward one spiral and return (loss node value, gradient map).
/// `targets` are (grid index, [x,y]) supervision pairs.
#[allow(clippy::too_many_arguments)]
fn spiral_step(
    cfg: &SpiralTrainConfig,
    store: &ParamStore,
    item: &SpiralItem,
    target_idx: &[usize],
    scale: f64,
    dropout_seed: u64,
    want_grads: bool,
) -> Result<(f64, Option<GradMap>)> {
    let tape = if want_grads && cfg.model.dropout > 0.0 {
        Tape::for_training(ChaCha8Rng::seed_from_u64(dropout_seed))
    } else {
        Tape::new()
    };
    let mut binding = Binding::new(&tape, store);
    let record = &item.record;
    let query_times: Vec<f64> = target_idx.iter().map(|&i| record.times[i]).collect();

    let scaled: Vec<[f64; 2]> = item
        .noisy
        .iter()
        .map(|&[x, y]| [x / scale, y / scale])
        .collect();
    let out = match cfg.which {
        WhichModel::Contiformer => {
            let (anchor_times, values) = contiformer_anchors(record, &scaled, cfg.anchor_stride)?;
            let model = ContiFormer::new(cfg.model.clone(), Embedding::Linear { in_dim: 2 })?;
            let inputs = ModelInputs {
                times: &anchor_times,
                kind: InputKind::Features {
                    values: &values,
                    observed: None,
                },
            };
            model.forward(
                &tape,
                &mut binding,
                &inputs,
                &query_times,
                &NfeCounter::new(),
            )?
        }
        WhichModel::Transformer => {
            // Every grid position is a token; unobserved ones use the mask
            // embedding. Inputs at unobserved positions are zero-filled and
            // never reach the model thanks to the mask gating.
            let mut values = Tensor::zeros(&[SPIRAL_POINTS, 2]);
            let mut observed = vec![false; SPIRAL_POINTS];
            for &i in &record.observed {
                observed[i] = true;
                values.set(i, 0, scaled[i][0]);
                values.set(i, 1, scaled[i][1]);
            }
            let model =
                VanillaTransformer::new(cfg.model.clone(), Embedding::Linear { in_dim: 2 })?;
            let inputs = ModelInputs {
                times: &record.times,
                kind: InputKind::Features {
                    values: &values,
                    observed: Some(&observed),
                },
            };
            let all = model.forward(&tape, &mut binding, &inputs)?;
            tape.select_rows(all, target_idx)?
        }
    };

    let w = binding.bind("head.w")?;
    let b = binding.bind("head.b")?;
    let pred = tape.add_bias(tape.matmul(out, w)?, b)?;
    let tvals: Vec<f64> = target_idx.iter().flat_map(|&i| scaled[i]).collect();
    let target = tape.leaf(Tensor::matrix(target_idx.len(), 2, tvals)?);
    let diff = tape.sub(pred, target)?;
    let loss = tape.mean_all(tape.mul(diff, diff)?)?;
    let loss_val = tape.get(loss).item();
    if !want_grads {
        return Ok((loss_val, None));
    }
    let grads = tape.backward(loss)?;
    Ok((loss_val, Some(binding.grad_map(&grads))))
}

/// Train on the given dataset. Deterministic for a fixed config and seed,
/// independent of the worker count.
pub fn train_spiral(ds: &SpiralDataset, cfg: &SpiralTrainConfig) -> Result<SpiralTrained> {
    let items = prepare_items(ds, cfg.seed);
    let scale = value_std(&ds.records);
    let mut store = init_spiral_params(cfg)?;
    let mut opt = Optimizer::adam();
    let mut batch_rng = rng::stream(cfg.seed, "spiral-batches");
    let mut losses = Vec::new();

    let half = SPIRAL_POINTS / 2;
    for iter in 0..cfg.iters {
        // Pre-draw all per-iteration randomness on one thread. Supervision
        // covers the whole window of a training trajectory (the second half
        // is never an input but is a regression target); targets are
        // stratified so both halves get equal coverage every iteration.
        let mut plan = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let idx = batch_rng.gen_range(0..items.len());
            let per_half = (cfg.queries_per_iter / 2).max(1).min(half);
            let mut pool = Vec::with_capacity(2 * per_half);
            for lo in [0, half] {
                let mut side: Vec<usize> = (lo..lo + half).collect();
                side.shuffle(&mut batch_rng);
                pool.extend_from_slice(&side[..per_half]);
            }
            pool.sort_unstable();
            let dropout_seed = cfg
                .seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add((iter * cfg.batch + b) as u64);
            plan.push((idx, pool, dropout_seed));
        }

        let results = run_parallel(cfg.workers, &plan, |(idx, pool, dseed)| {
            spiral_step(cfg, &store, &items[*idx], pool, scale, *dseed, true)
        })?;

        let mut loss_sum = 0.0;
        let mut grad_maps = Vec::with_capacity(results.len());
        for (l, g) in results {
            loss_sum += l;
            grad_maps.push(g.expect("training step returns gradients"));
        }
        let mut total = ParamStore::sum_grads(grad_maps);
        for g in total.values_mut() {
            for v in g.data.iter_mut() {
                *v /= cfg.batch as f64;
            }
        }
        opt.step(&mut store, &total, cosine_lr(cfg.lr, iter, cfg.iters))?;
        if iter % 50 == 0 || iter + 1 == cfg.iters {
            losses.push((iter, loss_sum / cfg.batch as f64));
        }
    }
    Ok(SpiralTrained {
        params: store,
        optimizer: opt,
        losses,
        value_scale: scale,
    })
}

/// Predictions at every grid time for one record (clean inputs).
pub fn predict_spiral(
    cfg: &SpiralTrainConfig,
    store: &ParamStore,
    record: &SpiralRecord,
    scale: f64,
) -> Result<Vec<[f64; 2]>> {
    let mut preds = Vec::with_capacity(SPIRAL_POINTS);
    let scaled: Vec<[f64; 2]> = record
        .values
        .iter()
        .map(|&[x, y]| [x / scale, y / scale])
        .collect();
    match cfg.which {
        WhichModel::Contiformer => {
            // Chunk the query grid to bound tape memory.
            let (anchor_times, values) = contiformer_anchors(record, &scaled, cfg.anchor_stride)?;
            let model = ContiFormer::new(cfg.model.clone(), Embedding::Linear { in_dim: 2 })?;
            for chunk in (0..SPIRAL_POINTS).collect::<Vec<_>>().chunks(25) {
                let tape = Tape::new();
                let mut binding = Binding::new(&tape, store);
                let queries: Vec<f64> = chunk.iter().map(|&i| record.times[i]).collect();
                let inputs = ModelInputs {
                    times: &anchor_times,
                    kind: InputKind::Features {
                        values: &values,
                        observed: None,
                    },
                };
                let out =
                    model.forward(&tape, &mut binding, &inputs, &queries, &NfeCounter::new())?;
                let w = binding.bind("head.w")?;
                let b = binding.bind("head.b")?;
                let pred = tape.get(tape.add_bias(tape.matmul(out, w)?, b)?);
                for r in 0..pred.rows() {
                    preds.push([pred.at(r, 0) * scale, pred.at(r, 1) * scale]);
                }
            }
        }
        WhichModel::Transformer => {
            let tape = Tape::new();
            let mut binding = Binding::new(&tape, store);
            let mut values = Tensor::zeros(&[SPIRAL_POINTS, 2]);
            let mut observed = vec![false; SPIRAL_POINTS];
            for &i in &record.observed {
                observed[i] = true;
                values.set(i, 0, scaled[i][0]);
                values.set(i, 1, scaled[i][1]);
            }
            let model =
                VanillaTransformer::new(cfg.model.clone(), Embedding::Linear { in_dim: 2 })?;
            let inputs = ModelInputs {
                times: &record.times,
                kind: InputKind::Features {
                    values: &values,
                    observed: Some(&observed),
                },
            };
            let out = model.forward(&tape, &mut binding, &inputs)?;
            let w = binding.bind("head.w")?;
            let b = binding.bind("head.b")?;
            let pred = tape.get(tape.add_bias(tape.matmul(out, w)?, b)?);
            for r in 0..pred.rows() {
                preds.push([pred.at(r, 0) * scale, pred.at(r, 1) * scale]);
            }
        }
    }
    Ok(preds)
}

/// Interpolation metrics over the first half, extrapolation over the second,
/// pooled across trajectories, against clean values.
pub fn eval_spiral(
    cfg: &SpiralTrainConfig,
    store: &ParamStore,
    records: &[SpiralRecord],
    scale: f64,
    workers: usize,
) -> Result<SpiralEval> {
    let preds = run_parallel(workers, records, |record| {
        predict_spiral(cfg, store, record, scale)
    })?;
    let half = SPIRAL_POINTS / 2;
    let mut ip = Vec::new();
    let mut it = Vec::new();
    let mut ep = Vec::new();
    let mut et = Vec::new();
    for (record, pred) in records.iter().zip(preds.iter()) {
        for i in 0..SPIRAL_POINTS {
            if i < half {
                ip.push(pred[i]);
                it.push(record.values[i]);
            } else {
                ep.push(pred[i]);
                et.push(record.values[i]);
            }
        }
    }
    Ok(SpiralEval {
        interpolation: spiral_metrics(&ip, &it)?,
        extrapolation: spiral_metrics(&ep, &et)?,
    })
}

/// Cosine decay from the base rate to a tenth of it.
pub fn cosine_lr(base: f64, iter: usize, total: usize) -> f64 {
    let progress = iter as f64 / total.max(1) as f64;
    let shape = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (0.1 + 0.9 * shape)
}

/// Map items across a bounded pool of scoped threads, preserving order.
pub fn run_parallel<T: Sync, R: Send>(
    workers: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.max(1);
    if workers == 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk.iter()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    out.into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}
