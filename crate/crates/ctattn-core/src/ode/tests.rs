use super::*;
use crate::autodiff::optim::Binding;
use crate::rng;

fn cfg(step: f64) -> SolverConfig {
    SolverConfig::new(step).unwrap()
}

fn small_field(seed: u64, dim: usize) -> (VectorField, ParamStore) {
    let field = VectorField::new(dim, Activation::Tanh, FieldNorm::ConcatNorm, "f");
    let mut store = ParamStore::new();
    field.init_params(&mut store, &mut rng::stream(seed, "field-init"));
    // Wake up the final linear map so trajectories actually move.
    for name in ["f.w2", "f.b2"] {
        let t = store.get_mut(name).unwrap();
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = 0.3 * ((i as f64 * 0.7).sin());
        }
    }
    (field, store)
}

fn zero_field(dim: usize) -> (VectorField, ParamStore) {
    // Zero parameters with tanh give an identically zero field.
    let field = VectorField::new(dim, Activation::Tanh, FieldNorm::ConcatNorm, "z");
    let mut store = ParamStore::new();
    field.init_params(&mut store, &mut rng::stream(0, "field-init"));
    for suffix in ["w1", "wt", "w2", "ln_g"] {
        let t = store.get_mut(&format!("z.{suffix}")).unwrap();
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    (field, store)
}

#[test]
fn zero_closure_field_keeps_state_constant() {
    let f = |_t: f64, x: &[f64]| vec![0.0; x.len()];
    let nfe = NfeCounter::new();
    let states = rk4_solve_fn(&f, &[2.5, -1.0], 0.0, &[0.3, 0.9, 1.7], &cfg(0.1), &nfe).unwrap();
    for s in states {
        assert_eq!(s, vec![2.5, -1.0]);
    }
}

#[test]
fn exponential_growth_matches_closed_form() {
    // f(t,x) = x from x(0)=1: RK4 with h=0.1 multiplies the state by the
    // degree-4 Taylor factor per step; ten steps land near e.
    let f = |_t: f64, x: &[f64]| x.to_vec();
    let nfe = NfeCounter::new();
    let states = rk4_solve_fn(&f, &[1.0], 0.0, &[1.0], &cfg(0.1), &nfe).unwrap();
    let got = states[0][0];
    let h: f64 = 0.1;
    let factor = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
    let oracle = factor.powi(10);
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    assert!((got - std::f64::consts::E).abs() < 1e-5);
    assert!((got - 2.7182797).abs() < 1e-6);
}

#[test]
fn polynomial_field_is_integrated_exactly() {
    // f(t,x) = t gives x(T) = T^2/2 for any step size.
    let f = |t: f64, _x: &[f64]| vec![t];
    for h in [0.3, 0.17, 1.0] {
        let nfe = NfeCounter::new();
        let states = rk4_solve_fn(&f, &[0.0], 0.0, &[2.0], &cfg(h), &nfe).unwrap();
        assert!((states[0][0] - 2.0).abs() < 1e-12, "h={h}");
    }
}

#[test]
fn reparameterized_decay_hits_closed_form() {
    // f(t,x) = -x on [2,4] from x(2)=1: x(4) = e^{-2}.
    let f = |_t: f64, x: &[f64]| x.iter().map(|&v| -v).collect::<Vec<_>>();
    let tf = reparameterize(&f, 2.0, 4.0).unwrap();
    let nfe = NfeCounter::new();
    let states = rk4_solve_fn(&tf, &[1.0], -1.0, &[1.0], &cfg(0.01), &nfe).unwrap();
    assert!((states[0][0] - (-2.0_f64).exp()).abs() < 1e-6);
    assert!((states[0][0] - 0.135335).abs() < 1e-6);
}

#[test]
fn degenerate_interval_is_identity() {
    let f = |t: f64, x: &[f64]| x.iter().map(|&v| v * t.cos()).collect::<Vec<_>>();
    let tf = reparameterize(&f, 1.5, 1.5).unwrap();
    let nfe = NfeCounter::new();
    let states = rk4_solve_fn(&tf, &[3.0], -1.0, &[0.0, 1.0], &cfg(0.1), &nfe).unwrap();
    assert_eq!(states[0][0], 3.0);
    assert_eq!(states[1][0], 3.0);
}

#[test]
fn reparameterize_rejects_reversed_interval() {
    let f = |_t: f64, x: &[f64]| x.to_vec();
    assert!(reparameterize(&f, 1.0, 0.5).is_err());
}

#[test]
fn reparameterized_equals_direct_solve() {
    // Time-independent linear field: both routes to x(t1) agree closely.
    let a = [[0.3, -0.8], [0.5, 0.1]];
    let f = move |_t: f64, x: &[f64]| {
        vec![
            a[0][0] * x[0] + a[0][1] * x[1],
            a[1][0] * x[0] + a[1][1] * x[1],
        ]
    };
    let (t0, t1) = (0.4, 2.1);
    let nfe = NfeCounter::new();
    let direct = rk4_solve_fn(&f, &[1.0, -0.5], t0, &[t1], &cfg(0.001), &nfe).unwrap();
    let tf = reparameterize(&f, t0, t1).unwrap();
    let dummy = rk4_solve_fn(&tf, &[1.0, -0.5], -1.0, &[1.0], &cfg(0.001), &nfe).unwrap();
    for j in 0..2 {
        assert!((direct[0][j] - dummy[0][j]).abs() < 1e-10);
    }
}

#[test]
fn fourth_order_convergence() {
    // Halving h cuts the endpoint error by at least 8x on a nonlinear field.
    let f = |t: f64, x: &[f64]| vec![t.sin() * x[0]];
    let exact = (1.0 - 2.0_f64.cos()).exp();
    let err_at = |h: f64| {
        let nfe = NfeCounter::new();
        let states = rk4_solve_fn(&f, &[1.0], 0.0, &[2.0], &cfg(h), &nfe).unwrap();
        (states[0][0] - exact).abs()
    };
    let (e1, e2) = (err_at(0.2), err_at(0.1));
    assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
}

#[test]
fn nfe_counts_stages() {
    let f = |_t: f64, x: &[f64]| x.to_vec();
    let nfe = NfeCounter::new();
    assert_eq!(nfe.count(), 0);
    // One step of h lands exactly on the single grid point.
    rk4_solve_fn(&f, &[1.0], 0.0, &[0.1], &cfg(0.1), &nfe).unwrap();
    assert_eq!(nfe.count(), 4);
    nfe.reset();
    assert_eq!(nfe.count(), 0);
    // Full dummy-interval sweep at step 0.1: 20 steps, 80 evaluations.
    rk4_solve_fn(&f, &[1.0], -1.0, &[1.0], &cfg(0.1), &nfe).unwrap();
    assert_eq!(nfe.count(), 80);
}

#[test]
fn batched_zero_field_keeps_initial_keys() {
    let (field, store) = zero_field(3);
    let pref = field.params_ref(&store).unwrap();
    let inits = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
    let pairs = PairSet {
        t0: vec![0.0, 0.0, 0.7, 0.7],
        t1: vec![0.0, 0.7, 0.0, 1.0],
    };
    let nfe = NfeCounter::new();
    let states = batched_solve_numeric(
        &field,
        &pref,
        &inits,
        &pairs,
        &[-1.0, -0.2, 1.0],
        &cfg(0.1),
        &nfe,
    )
    .unwrap();
    for s in &states {
        assert_eq!(s.data, inits.data);
    }
}

#[test]
fn batched_matches_per_pair_direct_solve() {
    let (field, store) = small_field(5, 2);
    let pref = field.params_ref(&store).unwrap();
    let keys = Tensor::matrix(2, 2, vec![0.8, -0.3, 0.2, 0.9]).unwrap();
    let times = [0.2, 0.9];
    // All four (i, j) systems, pair-major.
    let mut pairs = PairSet::default();
    let mut inits = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            pairs.t0.push(times[i]);
            pairs.t1.push(times[j]);
            inits.extend_from_slice(keys.row_slice(i));
        }
    }
    let inits = Tensor::matrix(4, 2, inits).unwrap();
    let grid = [-0.5, 0.3, 1.0];
    let nfe = NfeCounter::new();
    let states =
        batched_solve_numeric(&field, &pref, &inits, &pairs, &grid, &cfg(0.1), &nfe).unwrap();

    // Oracle: one reparameterized single-system solve per pair.
    let f = |t: f64, x: &[f64]| field.eval_numeric(&pref, &[t], &Tensor::row(x)).data;
    for (p, (&t0, &t1)) in pairs.t0.iter().zip(pairs.t1.iter()).enumerate() {
        let scale = (t1 - t0) / 2.0;
        let mid = (t0 + t1) / 2.0;
        let tf = move |s: f64, x: &[f64]| -> Vec<f64> {
            f(s * scale + mid, x).iter().map(|v| v * scale).collect()
        };
        let single = rk4_solve_fn(
            &tf,
            inits.row_slice(p),
            -1.0,
            &grid,
            &cfg(0.1),
            &NfeCounter::new(),
        )
        .unwrap();
        for (g, state) in states.iter().enumerate() {
            for d in 0..2 {
                let diff = (state.at(p, d) - single[g][d]).abs();
                assert!(diff < 1e-8, "pair {p} grid {g} dim {d}: {diff}");
            }
        }
    }
    // Degenerate pairs stay constant across the whole grid.
    for (p, (&t0, &t1)) in pairs.t0.iter().zip(pairs.t1.iter()).enumerate() {
        if t0 == t1 {
            for state in &states {
                assert_eq!(state.row_slice(p), inits.row_slice(p));
            }
        }
    }
}

#[test]
fn tape_and_numeric_sweeps_agree() {
    let (field, store) = small_field(9, 3);
    let pref = field.params_ref(&store).unwrap();
    let inits = Tensor::randn(&[5, 3], 1.0, &mut rng::stream(1, "ode-test"));
    let pairs = PairSet {
        t0: vec![0.1, 0.1, 0.5, 0.9, 0.3],
        t1: vec![0.1, 0.8, 0.2, 1.0, 0.35],
    };
    let grid = [-1.0, 0.0, 1.0];
    let numeric = batched_solve_numeric(
        &field,
        &pref,
        &inits,
        &pairs,
        &grid,
        &cfg(0.25),
        &NfeCounter::new(),
    )
    .unwrap();

    let tape = Tape::new();
    let mut binding = Binding::new(&tape, &store);
    let fv = field.bind(&mut binding).unwrap();
    let init_var = tape.leaf(inits.clone());
    let taped = batched_solve_tape(
        &tape,
        &field,
        &fv,
        init_var,
        &pairs,
        &grid,
        &cfg(0.25),
        &NfeCounter::new(),
    )
    .unwrap();
    for (a, b) in numeric.iter().zip(taped.iter()) {
        let bt = tape.get(*b);
        for (x, y) in a.data.iter().zip(bt.data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn solve_gradients_match_finite_differences() {
    // d(sum of endpoint states)/d(theta) via the tape versus central FD on
    // the numeric path.
    let (field, store) = small_field(13, 2);
    let inits = Tensor::matrix(3, 2, vec![0.4, -0.2, 0.1, 0.8, -0.5, 0.3]).unwrap();
    let pairs = PairSet {
        t0: vec![0.0, 0.2, 0.6],
        t1: vec![0.5, 0.9, 0.1],
    };
    let grid = [1.0];
    let solver = cfg(0.25);

    let loss_of = |store: &ParamStore| -> f64 {
        let pref = field.params_ref(store).unwrap();
        let states = batched_solve_numeric(
            &field,
            &pref,
            &inits,
            &pairs,
            &grid,
            &solver,
            &NfeCounter::new(),
        )
        .unwrap();
        states[0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (1.0 + 0.3 * i as f64))
            .sum()
    };

    let tape = Tape::new();
    let mut binding = Binding::new(&tape, &store);
    let fv = field.bind(&mut binding).unwrap();
    let init_var = tape.leaf(inits.clone());
    let states = batched_solve_tape(
        &tape,
        &field,
        &fv,
        init_var,
        &pairs,
        &grid,
        &solver,
        &NfeCounter::new(),
    )
    .unwrap();
    let probe: Vec<f64> = (0..6).map(|i| 1.0 + 0.3 * i as f64).collect();
    let w = tape.leaf(Tensor::matrix(3, 2, probe).unwrap());
    let loss = tape.sum_all(tape.mul(states[0], w).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let grad_map = binding.grad_map(&grads);

    let h = 1e-5;
    for name in field.param_names() {
        let base = store.get(&name).unwrap().clone();
        let ad = grad_map.get(&name).unwrap();
        let mut fd = Tensor::zeros(&base.shape);
        for i in 0..base.numel() {
            let mut s = store.clone();
            s.get_mut(&name).unwrap().data[i] = base.data[i] + h;
            let fp = loss_of(&s);
            s.get_mut(&name).unwrap().data[i] = base.data[i] - h;
            let fm = loss_of(&s);
            fd.data[i] = (fp - fm) / (2.0 * h);
        }
        let err = crate::fdcheck::rel_error(ad, &fd);
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}
