use crate::config::RunConfig;
use crate::outputs::{metrics_json, obj, write_metrics};
use crate::CliError;
use ctattn_core::attention::{
    attn_matrix_from_key_fns, construct_universal_keys, random_target_instance,
};
use ctattn_core::quadrature::QuadratureRule;
use serde_json::json;

/// Build key functions for random admissible targets and measure how closely
/// the reconstructed score matrix matches each target.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let rule: QuadratureRule = cfg
        .quadrature
        .parse()
        .map_err(|e| CliError::config(format!("quadrature: {e}")))?;
    if cfg.verify_n.iter().any(|&n| n < 2) {
        return Err(CliError::config("n: sizes must be at least 2".into()));
    }
    if cfg.verify_d.is_empty() || cfg.verify_n.is_empty() || cfg.trials == 0 {
        return Err(CliError::config("n/d/trials: must be nonempty".into()));
    }

    let mut rows = Vec::new();
    let mut max_err = 0.0f64;
    let mut max_diag_err = 0.0f64;
    for trial in 0..cfg.trials {
        let n = cfg.verify_n[trial % cfg.verify_n.len()];
        let d = cfg.verify_d[(trial / cfg.verify_n.len()) % cfg.verify_d.len()];
        let (target, q, keys, omega) =
            random_target_instance(n, d, cfg.seed.wrapping_add(trial as u64))?;
        let kfns = construct_universal_keys(&target, &q, &keys, &omega)?;
        let approx = attn_matrix_from_key_fns(&q, &kfns, &omega, &rule)?;
        let mut err = 0.0f64;
        let mut diag = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let e = (approx.at(j, i) - target.at(j, i)).abs();
                err = err.max(e);
                if i == j {
                    diag = diag.max(e);
                }
            }
        }
        max_err = max_err.max(err);
        max_diag_err = max_diag_err.max(diag);
        rows.push(format!("{trial},{n},{d},{err:e},{diag:e}"));
    }

    let doc = metrics_json(
        "verify-theorem",
        cfg.seed,
        obj(&[
            ("trials", json!(cfg.trials)),
            ("quadrature", json!(rule.to_string())),
            ("max_abs_error", json!(max_err)),
            ("max_diag_error", json!(max_diag_err)),
            ("within_1e3", json!(max_err < 1e-3)),
        ]),
    );
    write_metrics(&cfg.out, &doc, "trial,n,d,max_abs_error,diag_error", &rows)
}
