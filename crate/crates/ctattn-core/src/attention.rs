//! Continuous-time attention.
//!
//! Keys and values are ODE trajectories anchored at the observations, the
//! query is a spline through the projected inputs, and the score between
//! query time t and key i is the inner-product integral over [t_i, t]
//! divided by the interval length. After the change of variables onto
//! [-1, 1] that normalization cancels, so a quadrature sum over the shared
//! dummy grid yields every score in one batched solver sweep; the diagonal
//! (zero-length interval) is the limit value q(t_i) . k_i(t_i) and is taken
//! directly rather than through 0/0.

use crate::autodiff::optim::{Binding, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::interp::{basis_matrix, SplineKind};
use crate::ode::{
    batched_solve_tape, Activation, FieldNorm, NfeCounter, PairSet, SolverConfig, VectorField,
};
use crate::quadrature::QuadratureRule;
use crate::tensor::Tensor;
use rand::Rng;

const MASK_NEG: f64 = -1e30;
const DEGENERATE_EPS: f64 = 1e-9;

/// Which pair systems exist between a query grid and the key anchors, and
/// where each lands in the [n_queries, n_keys] score matrix. Shared by every
/// head of a layer.
#[derive(Clone, Debug)]
pub struct PairPlan {
    pub n_queries: usize,
    pub n_keys: usize,
    /// Solved pairs: interval endpoints (t_i -> query time).
    pub pairs: PairSet,
    /// Per solved pair: flat position q * n_keys + i, key index, query index.
    pub pair_pos: Vec<usize>,
    pub pair_key: Vec<usize>,
    pub pair_query: Vec<usize>,
    /// Degenerate pairs |t - t_i| below the epsilon, routed to the limit.
    pub diag_pos: Vec<usize>,
    pub diag_key: Vec<usize>,
    pub diag_query: Vec<usize>,
    /// Causally masked positions (key strictly after the query time).
    pub masked_pos: Vec<usize>,
}

/// Enumerate pairs between `key_times` (strictly increasing) and arbitrary
/// `query_times`. With `causal` set, keys strictly after a query are masked
/// and never solved.
pub fn plan_pairs(key_times: &[f64], query_times: &[f64], causal: bool) -> Result<PairPlan> {
    let n = key_times.len();
    if n == 0 {
        return Err(Error::invalid("attention: no keys"));
    }
    for w in key_times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid(
                "attention: key times must be strictly increasing",
            ));
        }
    }
    let mut plan = PairPlan {
        n_queries: query_times.len(),
        n_keys: n,
        pairs: PairSet::default(),
        pair_pos: Vec::new(),
        pair_key: Vec::new(),
        pair_query: Vec::new(),
        diag_pos: Vec::new(),
        diag_key: Vec::new(),
        diag_query: Vec::new(),
        masked_pos: Vec::new(),
    };
    for (q, &tq) in query_times.iter().enumerate() {
        let mut live = 0usize;
        for (i, &ti) in key_times.iter().enumerate() {
            let pos = q * n + i;
            if causal && ti > tq + DEGENERATE_EPS {
                plan.masked_pos.push(pos);
                continue;
            }
            live += 1;
            if (tq - ti).abs() < DEGENERATE_EPS {
                plan.diag_pos.push(pos);
                plan.diag_key.push(i);
                plan.diag_query.push(q);
            } else {
                plan.pairs.t0.push(ti);
                plan.pairs.t1.push(tq);
                plan.pair_pos.push(pos);
                plan.pair_key.push(i);
                plan.pair_query.push(q);
            }
        }
        if live == 0 {
            return Err(Error::invalid(format!(
                "attention: query time {tq} has every key masked"
            )));
        }
    }
    Ok(plan)
}

/// Settings of one continuous-time multi-head attention block.
#[derive(Clone, Debug)]
pub struct CtMha {
    pub d_model: usize,
    pub heads: usize,
    pub causal: bool,
    /// Divide the integrals by the interval length (on by default); when off,
    /// scores and expected values are the raw integrals.
    pub normalize: bool,
    pub rule: QuadratureRule,
    pub solver: SolverConfig,
    pub query_kind: SplineKind,
    /// One key/value field pair shared by all heads instead of per-head fields.
    pub shared_fields: bool,
    pub activation: Activation,
    pub field_norm: FieldNorm,
    pub prefix: String,
}

impl CtMha {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn check(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "attention: d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn field(&self, which: &str, head: usize) -> VectorField {
        let prefix = if self.shared_fields {
            format!("{}.{which}", self.prefix)
        } else {
            format!("{}.h{head}.{which}", self.prefix)
        };
        VectorField::new(self.d_k(), self.activation, self.field_norm, prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.d_model;
        let dk = self.d_k();
        for h in 0..self.heads {
            for w in ["wq", "wk", "wv"] {
                store.insert(
                    format!("{}.h{h}.{w}", self.prefix),
                    Tensor::xavier(d, dk, &[d, dk], rng),
                );
            }
            if !self.shared_fields || h == 0 {
                self.field("kfield", h).init_params(store, rng);
                self.field("vfield", h).init_params(store, rng);
            }
        }
        store.insert(
            format!("{}.wo", self.prefix),
            Tensor::xavier(d, d, &[d, d], rng),
        );
        store.insert(format!("{}.bo", self.prefix), Tensor::zeros(&[d]));
    }

    pub fn settings(&self) -> AttnSettings {
        AttnSettings {
            causal: self.causal,
            normalize: self.normalize,
            rule: self.rule.clone(),
            solver: self.solver,
            query_kind: self.query_kind,
        }
    }

    /// Full CT-MHA forward: project per head, run the continuous attention of
    /// each head at the query times, concatenate and apply the output map.
    ///
    /// `x` is [N, d_model] at the key anchor times `omega`; the output is
    /// [n_queries, d_model] at `queries`.
    pub fn forward(
        &self,
        tape: &Tape,
        binding: &mut Binding<'_>,
        x: Var,
        omega: &[f64],
        queries: &[f64],
        nfe: &NfeCounter,
    ) -> Result<(Var, Vec<CtAttnParts>)> {
        self.check()?;
        let settings = self.settings();
        let plan = plan_pairs(omega, queries, self.causal)?;
        let bases = query_bases(&plan, self.query_kind, omega, &self.rule)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut views = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = binding.bind(&format!("{}.h{h}.wq", self.prefix))?;
            let wk = binding.bind(&format!("{}.h{h}.wk", self.prefix))?;
            let wv = binding.bind(&format!("{}.h{h}.wv", self.prefix))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let parts = ct_attn_planned(
                tape,
                binding,
                &settings,
                &self.field("kfield", h),
                &self.field("vfield", h),
                q,
                k,
                v,
                &plan,
                &bases,
                nfe,
            )?;
            heads.push(parts.output);
            views.push(parts);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let wo = binding.bind(&format!("{}.wo", self.prefix))?;
        let bo = binding.bind(&format!("{}.bo", self.prefix))?;
        let out = tape.add_bias(tape.matmul(cat, wo)?, bo)?;
        Ok((out, views))
    }
}

/// Settings shared by scores, expected values and the combined attention.
#[derive(Clone, Debug)]
pub struct AttnSettings {
    pub causal: bool,
    pub normalize: bool,
    pub rule: QuadratureRule,
    pub solver: SolverConfig,
    pub query_kind: SplineKind,
}

/// Output of a single continuous-time attention head.
#[derive(Clone, Copy, Debug)]
pub struct CtAttnParts {
    /// [n_queries, d_k] attention output.
    pub output: Var,
    /// [n_queries, n_keys] raw score matrix (entry (j,i) approximates the
    /// normalized integral over [t_i, t_j]); masked positions hold zero here.
    pub scores: Var,
    /// [n_queries, n_keys] row-stochastic softmax weights after masking.
    pub weights: Var,
}

/// Single-head continuous-time attention over already-projected Q, K, V
/// ([n_keys, d_k] each, anchored at `omega`), evaluated at `queries`.
#[allow(clippy::too_many_arguments)]
pub fn ct_attn(
    tape: &Tape,
    binding: &mut Binding<'_>,
    settings: &AttnSettings,
    kfield: &VectorField,
    vfield: &VectorField,
    q: Var,
    k: Var,
    v: Var,
    omega: &[f64],
    queries: &[f64],
    nfe: &NfeCounter,
) -> Result<CtAttnParts> {
    let plan = plan_pairs(omega, queries, settings.causal)?;
    let bases = query_bases(&plan, settings.query_kind, omega, &settings.rule)?;
    ct_attn_planned(
        tape, binding, settings, kfield, vfield, q, k, v, &plan, &bases, nfe,
    )
}

#[allow(clippy::too_many_arguments)]
fn ct_attn_planned(
    tape: &Tape,
    binding: &mut Binding<'_>,
    settings: &AttnSettings,
    kfield: &VectorField,
    vfield: &VectorField,
    q: Var,
    k: Var,
    v: Var,
    plan: &PairPlan,
    bases: &[Tensor],
    nfe: &NfeCounter,
) -> Result<CtAttnParts> {
    let kf = kfield.bind(binding)?;
    let vf = vfield.bind(binding)?;
    let d_k = tape.shape_of(q)[1];
    let rule = &settings.rule;
    let shape = [plan.n_queries, plan.n_keys];

    // Scores of the solved pairs: half the weighted node sum of q~ . k~.
    // The 1/(t - t_i) normalization cancels against the change of variables,
    // so the same expression covers intervals running either direction.
    let mut scores = tape.leaf(Tensor::zeros(&shape));
    let mut vhat: Option<Var> = None;
    if !plan.pairs.is_empty() {
        let k_init = tape.select_rows(k, &plan.pair_key)?;
        let k_states = batched_solve_tape(
            tape,
            kfield,
            &kf,
            k_init,
            &plan.pairs,
            &rule.nodes,
            &settings.solver,
            nfe,
        )?;
        let v_init = tape.select_rows(v, &plan.pair_key)?;
        let v_states = batched_solve_tape(
            tape,
            vfield,
            &vf,
            v_init,
            &plan.pairs,
            &rule.nodes,
            &settings.solver,
            nfe,
        )?;

        let mut score_acc: Option<Var> = None;
        let mut value_acc: Option<Var> = None;
        for (p, &w) in rule.weights.iter().enumerate() {
            let q_nodes = tape.matmul(tape.leaf(bases[p].clone()), q)?;
            let dot = tape.sum_axis1(tape.mul(q_nodes, k_states[p])?)?;
            let dot = tape.scale(dot, w)?;
            score_acc = Some(match score_acc {
                Some(acc) => tape.add(acc, dot)?,
                None => dot,
            });
            let vw = tape.scale(v_states[p], w)?;
            value_acc = Some(match value_acc {
                Some(acc) => tape.add(acc, vw)?,
                None => vw,
            });
        }
        let mut pair_scores = tape.scale(score_acc.expect("nonempty rule"), 0.5)?;
        let mut pair_values = tape.scale(value_acc.expect("nonempty rule"), 0.5)?;
        if !settings.normalize {
            // Raw integrals: multiply the normalized form back by (t - t_i).
            let lengths: Vec<f64> = plan
                .pairs
                .t0
                .iter()
                .zip(plan.pairs.t1.iter())
                .map(|(&a, &b)| b - a)
                .collect();
            let len_col = tape.leaf(Tensor::col(&lengths));
            pair_scores = tape.mul_col(pair_scores, len_col)?;
            pair_values = tape.mul_col(pair_values, len_col)?;
        }
        scores = tape.scatter_entries(pair_scores, &plan.pair_pos, &shape)?;
        vhat = Some(pair_values);
    }

    // Degenerate intervals take the limit value q(t_i) . k_i(t_i) directly.
    // Without normalization the raw integral over a zero-length interval is
    // zero, so those positions keep score zero and contribute no value mass.
    if settings.normalize && !plan.diag_pos.is_empty() {
        let qd = tape.select_rows(q, &plan.diag_key)?;
        let kd = tape.select_rows(k, &plan.diag_key)?;
        let dot = tape.sum_axis1(tape.mul(qd, kd)?)?;
        let diag = tape.scatter_entries(dot, &plan.diag_pos, &shape)?;
        scores = tape.add(scores, diag)?;
    }

    // Mask, temperature, softmax over keys.
    let mut masked = scores;
    if !plan.masked_pos.is_empty() {
        let mut m = Tensor::zeros(&shape);
        for &p in &plan.masked_pos {
            m.data[p] = MASK_NEG;
        }
        masked = tape.add(masked, tape.leaf(m))?;
    }
    let scaled = tape.scale(masked, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;

    // Output rows: sum_i weight(q,i) * vhat_i(t_q).
    let mut out = tape.leaf(Tensor::zeros(&[plan.n_queries, d_k]));
    if let Some(pair_values) = vhat {
        let w_live = tape.select_entries(weights, &plan.pair_pos)?;
        let contrib = tape.mul_col(pair_values, w_live)?;
        let summed = tape.segment_sum(contrib, &plan.pair_query, plan.n_queries)?;
        out = tape.add(out, summed)?;
    }
    if settings.normalize && !plan.diag_pos.is_empty() {
        let w_diag = tape.select_entries(weights, &plan.diag_pos)?;
        let v_diag = tape.select_rows(v, &plan.diag_key)?;
        let contrib = tape.mul_col(v_diag, w_diag)?;
        let summed = tape.segment_sum(contrib, &plan.diag_query, plan.n_queries)?;
        out = tape.add(out, summed)?;
    }
    Ok(CtAttnParts {
        output: out,
        scores,
        weights,
    })
}

/// Spline-evaluation matrices of the query function at the mapped node times:
/// one [n_pairs, n_keys] matrix per quadrature node, shared across heads.
fn query_bases(
    plan: &PairPlan,
    kind: SplineKind,
    omega: &[f64],
    rule: &QuadratureRule,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(rule.nodes.len());
    for &node in &rule.nodes {
        let times = plan.pairs.times_at(node);
        out.push(basis_matrix(kind, omega, &times)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Constructive attention-approximation verifier.
// ---------------------------------------------------------------------------

/// Closed-form key function of one column of the construction.
pub struct KeyFunction {
    q: crate::interp::SplineFunction,
    h: crate::interp::SplineFunction,
    t_anchor: f64,
    correction: Vec<f64>,
}

impl KeyFunction {
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let qv = self.q.eval(t);
        let h = self.h.eval(t)[0];
        let hp = self.h.eval_deriv(t)[0];
        let g = hp * (t - self.t_anchor) + h;
        let norm2: f64 = qv.iter().map(|&x| x * x).sum();
        qv.iter()
            .zip(self.correction.iter())
            .map(|(&qm, &cm)| qm / norm2 * g + cm / qm)
            .collect()
    }
}

/// Build key functions k_1..k_N whose continuous-time score matrix reproduces
/// `target`. Requires every coordinate of the query spline to stay away from
/// zero on the window and the target diagonal to equal q(t_i) . K_i.
pub fn construct_universal_keys(
    target: &Tensor,
    q: &crate::interp::SplineFunction,
    keys: &Tensor,
    omega: &[f64],
) -> Result<Vec<KeyFunction>> {
    let n = omega.len();
    let d = keys.cols();
    if target.rows() != n || target.cols() != n || keys.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "construct_universal_keys",
            lhs: target.shape.clone(),
            rhs: keys.shape.clone(),
        });
    }
    // The construction divides by each query coordinate; scan the window.
    let (lo, hi) = (omega[0], omega[n - 1]);
    for step in 0..=1000 {
        let t = lo + (hi - lo) * step as f64 / 1000.0;
        let qv = q.eval(t);
        for (m, &x) in qv.iter().enumerate() {
            if x.abs() < 1e-6 {
                return Err(Error::invalid(format!(
                    "universal construction: query coordinate {m} vanishes near t={t}"
                )));
            }
        }
    }
    for i in 0..n {
        let qv = q.eval(omega[i]);
        let dot: f64 = qv.iter().zip(keys.row_slice(i)).map(|(&a, &b)| a * b).sum();
        if (dot - target.at(i, i)).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "universal construction: target diagonal ({i},{i}) = {} but q(t_i).K_i = {dot}",
                target.at(i, i)
            )));
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Cubic spline h_i through column i of the target.
        let col: Vec<f64> = (0..n).map(|j| target.at(j, i)).collect();
        let h = crate::interp::SplineFunction::fit(SplineKind::Cubic, omega, &Tensor::col(&col))?;
        let t_anchor = omega[i];
        let qv = q.eval(t_anchor);
        let norm2: f64 = qv.iter().map(|&x| x * x).sum();
        let g0 = h.eval(t_anchor)[0]; // g(t_i) = h(t_i), the diagonal value
                                      // Fixed-point correction c_m = k(t_i)[m] * q(t_i)[m] with
                                      // k(t_i) = K_i - q(t_i) g(t_i) / |q(t_i)|^2; the c_m sum to zero.
        let correction: Vec<f64> = (0..d)
            .map(|m| (keys.at(i, m) - qv[m] / norm2 * g0) * qv[m])
            .collect();
        out.push(KeyFunction {
            q: q.clone(),
            h,
            t_anchor,
            correction,
        });
    }
    Ok(out)
}

/// Random verification instance for the construction: equally spaced times
/// on [0, 1], positive query knots (the construction divides by query
/// coordinates), random keys, and a random target whose diagonal is forced
/// to the admissible value q(t_i) . K_i.
pub fn random_target_instance(
    n: usize,
    d: usize,
    seed: u64,
) -> Result<(Tensor, crate::interp::SplineFunction, Tensor, Vec<f64>)> {
    use rand::Rng;
    let mut r = crate::rng::stream(seed, "universal");
    let omega: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
    let qdata: Vec<f64> = (0..n * d).map(|_| r.gen_range(0.5..1.5)).collect();
    let qm = Tensor::matrix(n, d, qdata)?;
    let q = crate::interp::SplineFunction::fit(SplineKind::Cubic, &omega, &qm)?;
    let kdata: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let keys = Tensor::matrix(n, d, kdata)?;
    let mut target = Tensor::zeros(&[n, n]);
    for j in 0..n {
        for i in 0..n {
            target.set(j, i, r.gen_range(-0.5..0.5));
        }
    }
    for i in 0..n {
        let qv = q.eval(omega[i]);
        let dot: f64 = qv.iter().zip(keys.row_slice(i)).map(|(&a, &b)| a * b).sum();
        target.set(i, i, dot);
    }
    Ok((target, q, keys, omega))
}

/// Evaluate the discretized continuous-time attention matrix for closed-form
/// key functions: entry (j, i) is the normalized inner-product integral over
/// [t_i, t_j]; the diagonal is the limit value.
///
/// The constructed integrand q . k_i is piecewise cubic with derivative
/// breaks at the knots, so the rule is applied composite over the knot
/// partition of each interval, where it integrates the pieces exactly.
pub fn attn_matrix_from_key_fns(
    q: &crate::interp::SplineFunction,
    key_fns: &[KeyFunction],
    omega: &[f64],
    rule: &QuadratureRule,
) -> Result<Tensor> {
    let n = omega.len();
    if key_fns.len() != n {
        return Err(Error::invalid(format!(
            "attn matrix: {} key functions for {} times",
            key_fns.len(),
            n
        )));
    }
    let mut out = Tensor::zeros(&[n, n]);
    for j in 0..n {
        for (i, kf) in key_fns.iter().enumerate() {
            let ti = omega[i];
            let tj = omega[j];
            let val = if (tj - ti).abs() < DEGENERATE_EPS {
                let qv = q.eval(ti);
                let kv = kf.eval(ti);
                qv.iter().zip(kv.iter()).map(|(&a, &b)| a * b).sum()
            } else {
                let (lo, hi) = (ti.min(tj), ti.max(tj));
                let mut cuts = vec![lo];
                cuts.extend(omega.iter().copied().filter(|&t| t > lo && t < hi));
                cuts.push(hi);
                let mut integral = 0.0;
                for seg in cuts.windows(2) {
                    let (a, b) = (seg[0], seg[1]);
                    let half = (b - a) / 2.0;
                    let mid = (a + b) / 2.0;
                    for (&node, &w) in rule.nodes.iter().zip(rule.weights.iter()) {
                        let t = node * half + mid;
                        let qv = q.eval(t);
                        let kv = kf.eval(t);
                        let dot: f64 = qv.iter().zip(kv.iter()).map(|(&a, &b)| a * b).sum();
                        integral += w * half * dot;
                    }
                }
                integral / (hi - lo)
            };
            out.set(j, i, val);
        }
    }
    Ok(out)
}
