use crate::config::RunConfig;
use crate::outputs::{metrics_json, obj, write_metrics};
use crate::CliError;
use ctattn_core::model::Checkpoint;
use ctattn_core::tasks::spiral::{
    eval_spiral, gen_spirals, train_spiral, SpiralDataset, SpiralRecord, SpiralTrainConfig,
    WhichModel,
};
use ctattn_core::tasks::{read_jsonl, write_jsonl};
use serde_json::json;

fn train_config(cfg: &RunConfig) -> Result<SpiralTrainConfig, CliError> {
    Ok(SpiralTrainConfig {
        model: cfg.model_config()?,
        which: cfg.model,
        iters: cfg.iters,
        batch: cfg.batch,
        lr: cfg.lr,
        queries_per_iter: cfg.queries_per_iter,
        anchor_stride: cfg.anchor_stride,
        workers: cfg.workers,
        seed: cfg.seed,
    })
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = gen_spirals(cfg.count, cfg.alpha, cfg.beta, cfg.n_obs, cfg.seed)?;
    let path = cfg.out.join("spirals.jsonl");
    write_jsonl(&path, &ds.records)?;
    let doc = metrics_json(
        "gen-spiral",
        cfg.seed,
        obj(&[
            ("count", json!(cfg.count)),
            ("alpha", json!(cfg.alpha)),
            ("beta", json!(cfg.beta)),
            ("n_obs", json!(cfg.n_obs)),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "count,alpha,beta,n_obs",
        &[format!(
            "{},{},{},{}",
            cfg.count, cfg.alpha, cfg.beta, cfg.n_obs
        )],
    )
}

fn load_or_gen(
    cfg: &RunConfig,
    which: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<SpiralRecord>, CliError> {
    match (&cfg.data, which) {
        (Some(path), "train") => Ok(read_jsonl(path)?),
        _ => Ok(gen_spirals(count, cfg.alpha, cfg.beta, cfg.n_obs, seed)?.records),
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = train_config(cfg)?;
    let train_records = load_or_gen(cfg, "train", cfg.train_count, cfg.seed)?;
    let test_records = load_or_gen(cfg, "test", cfg.test_count, cfg.seed + 1)?;
    let ds = SpiralDataset {
        records: train_records,
        alpha: cfg.alpha,
        beta: cfg.beta,
        seed: cfg.seed,
    };
    let trained = train_spiral(&ds, &tc)?;
    let eval = eval_spiral(
        &tc,
        &trained.params,
        &test_records,
        trained.value_scale,
        cfg.workers,
    )?;

    let ck_config = json!({
        "task": "spiral",
        "which": tc.which,
        "model_config": tc.model,
        "anchor_stride": tc.anchor_stride,
        "value_scale": trained.value_scale,
    });
    let ck = Checkpoint::new(cfg.seed, ck_config, trained.params, Some(trained.optimizer));
    let ck_path = cfg.out.join("checkpoint.json");
    ck.save(&ck_path)?;

    let final_loss = trained.losses.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    let doc = metrics_json(
        "train-spiral",
        cfg.seed,
        obj(&[
            ("model", json!(model_name(tc.which))),
            ("interp_rmse", json!(eval.interpolation.rmse)),
            ("interp_mae", json!(eval.interpolation.mae)),
            ("extrap_rmse", json!(eval.extrapolation.rmse)),
            ("extrap_mae", json!(eval.extrapolation.mae)),
            ("final_train_loss", json!(final_loss)),
            ("checkpoint", json!(ck_path.display().to_string())),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "model,split,rmse,mae",
        &[
            format!(
                "{},interpolation,{},{}",
                model_name(tc.which),
                eval.interpolation.rmse,
                eval.interpolation.mae
            ),
            format!(
                "{},extrapolation,{},{}",
                model_name(tc.which),
                eval.extrapolation.rmse,
                eval.extrapolation.mae
            ),
        ],
    )
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::config("checkpoint: required for eval-spiral".into()))?;
    let ck = Checkpoint::load(&path)?;
    let which: WhichModel = serde_json::from_value(ck.config["which"].clone())
        .map_err(|e| CliError::Runtime(format!("checkpoint config: {e}")))?;
    let model = serde_json::from_value(ck.config["model_config"].clone())
        .map_err(|e| CliError::Runtime(format!("checkpoint config: {e}")))?;
    let anchor_stride = ck.config["anchor_stride"]
        .as_u64()
        .map(|v| v as usize)
        .unwrap_or(cfg.anchor_stride);
    let value_scale = ck.config["value_scale"].as_f64().unwrap_or(1.0);
    let tc = SpiralTrainConfig {
        model,
        which,
        iters: 0,
        batch: 1,
        lr: 0.0,
        queries_per_iter: 0,
        anchor_stride,
        workers: cfg.workers,
        seed: ck.seed,
    };
    let test_records: Vec<SpiralRecord> = match &cfg.data {
        Some(p) => read_jsonl(p)?,
        None => gen_spirals(cfg.test_count, cfg.alpha, cfg.beta, cfg.n_obs, cfg.seed + 1)?.records,
    };
    let eval = eval_spiral(&tc, &ck.params, &test_records, value_scale, cfg.workers)?;
    let doc = metrics_json(
        "eval-spiral",
        cfg.seed,
        obj(&[
            ("model", json!(model_name(which))),
            ("interp_rmse", json!(eval.interpolation.rmse)),
            ("interp_mae", json!(eval.interpolation.mae)),
            ("extrap_rmse", json!(eval.extrapolation.rmse)),
            ("extrap_mae", json!(eval.extrapolation.mae)),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "model,split,rmse,mae",
        &[
            format!(
                "{},interpolation,{},{}",
                model_name(which),
                eval.interpolation.rmse,
                eval.interpolation.mae
            ),
            format!(
                "{},extrapolation,{},{}",
                model_name(which),
                eval.extrapolation.rmse,
                eval.extrapolation.mae
            ),
        ],
    )
}

fn model_name(which: WhichModel) -> &'static str {
    match which {
        WhichModel::Contiformer => "contiformer",
        WhichModel::Transformer => "transformer",
    }
}
