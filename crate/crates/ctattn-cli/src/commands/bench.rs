use crate::config::RunConfig;
use crate::outputs::{metrics_json, obj, write_metrics};
use crate::CliError;
use ctattn_core::bench::{loglog_slope, time_ct_mha, time_discrete_mha};
use serde_json::json;

/// Wall time and per-sweep solver evaluations of the continuous attention
/// forward versus sequence length, against the discrete baseline, with a
/// fitted log-log slope.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.lengths.len() < 2 {
        return Err(CliError::config(
            "lengths: need at least two sequence lengths".into(),
        ));
    }
    let model = cfg.model_config()?;
    let mut rows = Vec::new();
    let mut ct_secs = Vec::new();
    let mut base_secs = Vec::new();
    for &n in &cfg.lengths {
        let ct = time_ct_mha(&model, n, cfg.repeats, cfg.seed)?;
        let base = time_discrete_mha(&model, n, cfg.repeats, cfg.seed)?;
        rows.push(format!(
            "contiformer,{n},{:.6},{},{}",
            ct.seconds, ct.nfe_per_sweep, ct.approx_bytes
        ));
        rows.push(format!(
            "transformer,{n},{:.6},{},{}",
            base.seconds, base.nfe_per_sweep, base.approx_bytes
        ));
        ct_secs.push(ct.seconds);
        base_secs.push(base.seconds);
        println!(
            "n={n}: ct {:.4}s (nfe/sweep {}), discrete {:.6}s",
            ct.seconds, ct.nfe_per_sweep, base.seconds
        );
    }
    let slope_ct = loglog_slope(&cfg.lengths, &ct_secs);
    let slope_base = loglog_slope(&cfg.lengths, &base_secs);
    let ratio = ct_secs.last().unwrap() / base_secs.last().unwrap();
    let doc = metrics_json(
        "bench",
        cfg.seed,
        obj(&[
            ("lengths", json!(cfg.lengths)),
            ("ct_seconds", json!(ct_secs)),
            ("transformer_seconds", json!(base_secs)),
            ("ct_loglog_slope", json!(slope_ct)),
            ("transformer_loglog_slope", json!(slope_base)),
            ("ct_over_transformer_at_max_n", json!(ratio)),
            ("step_size", json!(cfg.step_size)),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "model,n,seconds,nfe_per_sweep,approx_bytes",
        &rows,
    )
}
