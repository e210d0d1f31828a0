//! Wall-time and function-evaluation measurements of the attention forward
//! pass versus sequence length, backing the complexity claims.

use crate::attention::CtMha;
use crate::autodiff::optim::{Binding, ParamStore};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::ode::NfeCounter;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub seconds: f64,
    /// Field evaluations of one solver sweep of the dummy interval.
    pub nfe_per_sweep: f64,
    /// Coarse peak-memory estimate of the largest recorded chunk.
    pub approx_bytes: usize,
}

/// Random self-attention instance: sorted times on [0, 1] and inputs.
fn instance(n: usize, d_model: usize, seed: u64) -> (Vec<f64>, Tensor) {
    let mut r = rng::stream(seed, "bench");
    let mut times: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    times.sort_by(f64::total_cmp);
    for i in 1..n {
        if times[i] <= times[i - 1] {
            times[i] = times[i - 1] + 1e-6;
        }
    }
    let x = Tensor::randn(&[n, d_model], 1.0, &mut r);
    (times, x)
}

/// Median wall time of a full CT-MHA forward at length `n`, queries equal to
/// the observation times, chunked to bound tape memory.
pub fn time_ct_mha(config: &ModelConfig, n: usize, repeats: usize, seed: u64) -> Result<BenchRow> {
    let (times, x) = instance(n, config.d_model, seed);
    let mut store = ParamStore::new();
    let mha = CtMha {
        d_model: config.d_model,
        heads: config.heads,
        causal: config.causal,
        normalize: config.normalize,
        rule: config.rule.clone(),
        solver: config.solver,
        query_kind: config.query_kind,
        shared_fields: config.shared_fields,
        activation: config.activation,
        field_norm: config.field_norm,
        prefix: "attn".into(),
    };
    mha.init_params(&mut store, &mut rng::stream(seed, "bench-init"));

    let chunk_q = (4096 / n).max(1);
    let mut secs = Vec::with_capacity(repeats);
    let mut nfe_per_sweep = 0.0;
    let mut approx_bytes = 0usize;
    for _ in 0..repeats.max(1) {
        let nfe = NfeCounter::new();
        let mut sweeps = 0u64;
        let t0 = Instant::now();
        for chunk in times.chunks(chunk_q) {
            let tape = Tape::new();
            let mut binding = Binding::new(&tape, &store);
            let xv = tape.leaf(x.clone());
            let (out, _) = mha.forward(&tape, &mut binding, xv, &times, chunk, &nfe)?;
            std::hint::black_box(tape.get(out));
            // Two trajectory sweeps (keys, values) per head per chunk.
            sweeps += 2 * mha.heads as u64;
            approx_bytes = approx_bytes.max(tape.approx_bytes());
        }
        secs.push(t0.elapsed().as_secs_f64());
        nfe_per_sweep = nfe.count() as f64 / sweeps as f64;
    }
    secs.sort_by(f64::total_cmp);
    Ok(BenchRow {
        n,
        seconds: secs[secs.len() / 2],
        nfe_per_sweep,
        approx_bytes,
    })
}

/// Median wall time of the discrete baseline attention at length `n`.
pub fn time_discrete_mha(
    config: &ModelConfig,
    n: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRow> {
    let (_, x) = instance(n, config.d_model, seed);
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "bench-init");
    let d = config.d_model;
    let dk = d / config.heads;
    for h in 0..config.heads {
        for w in ["wq", "wk", "wv"] {
            store.insert(
                format!("attn.h{h}.{w}"),
                Tensor::xavier(d, dk, &[d, dk], &mut r),
            );
        }
    }
    store.insert("attn.wo", Tensor::xavier(d, d, &[d, d], &mut r));
    store.insert("attn.bo", Tensor::zeros(&[d]));
    let mut secs = Vec::with_capacity(repeats);
    let mut approx_bytes = 0usize;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let tape = Tape::new();
        let mut binding = Binding::new(&tape, &store);
        let xv = tape.leaf(x.clone());
        let out = crate::model::discrete_mha(
            &tape,
            &mut binding,
            "attn",
            xv,
            config.heads,
            config.causal,
        )?;
        std::hint::black_box(tape.get(out));
        secs.push(t0.elapsed().as_secs_f64());
        approx_bytes = approx_bytes.max(tape.approx_bytes());
    }
    secs.sort_by(f64::total_cmp);
    Ok(BenchRow {
        n,
        seconds: secs[secs.len() / 2],
        nfe_per_sweep: 0.0,
        approx_bytes,
    })
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(xs: &[usize], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|&x| (x as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|&a| (a - mx) * (a - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [16usize, 32, 64, 128];
        let ys: Vec<f64> = xs.iter().map(|&x| 3.0 * (x as f64).powi(2)).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ct_mha_bench_runs_and_counts_sweeps() {
        let mut cfg = ModelConfig::desk(8, 2, 1);
        cfg.solver = crate::ode::SolverConfig::new(0.1).unwrap();
        let row = time_ct_mha(&cfg, 12, 1, 3).unwrap();
        assert_eq!(row.nfe_per_sweep, 80.0);
        assert!(row.seconds > 0.0);
        assert!(row.approx_bytes > 0);
    }
}
