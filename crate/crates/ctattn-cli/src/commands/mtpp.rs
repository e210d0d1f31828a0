use crate::config::RunConfig;
use crate::outputs::{metrics_json, obj, write_metrics};
use crate::CliError;
use ctattn_core::model::Checkpoint;
use ctattn_core::tasks::mtpp::{
    eval_mtpp, gen_mtpp, init_mtpp_params, train_mtpp, EventSequence, MtppLossConfig,
    MtppTrainConfig, NUM_TYPES,
};
use ctattn_core::tasks::{read_jsonl, write_jsonl};
use serde_json::json;

fn train_config(cfg: &RunConfig) -> Result<MtppTrainConfig, CliError> {
    let mut model = cfg.model_config()?;
    model.causal = true; // event prediction conditions on history only
    Ok(MtppTrainConfig {
        model,
        loss: MtppLossConfig {
            mc_samples: cfg.mc_samples,
            ..Default::default()
        },
        num_types: NUM_TYPES,
        iters: cfg.iters,
        batch: cfg.batch,
        lr: cfg.lr,
        workers: cfg.workers,
        seed: cfg.seed,
    })
}

fn sequences(base: u64, count: usize) -> Vec<EventSequence> {
    (0..count).map(|i| gen_mtpp(base + i as u64)).collect()
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let seqs = sequences(cfg.seed, cfg.count);
    let path = cfg.out.join("events.jsonl");
    write_jsonl(&path, &seqs)?;
    let events: usize = seqs.iter().map(|s| s.len()).sum();
    let doc = metrics_json(
        "gen-mtpp",
        cfg.seed,
        obj(&[
            ("count", json!(cfg.count)),
            ("total_events", json!(events)),
            ("mean_length", json!(events as f64 / cfg.count as f64)),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "count,total_events,mean_length",
        &[format!(
            "{},{},{}",
            cfg.count,
            events,
            events as f64 / cfg.count as f64
        )],
    )
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = train_config(cfg)?;
    let (train_seqs, test_seqs) = match &cfg.data {
        Some(path) => {
            let all: Vec<EventSequence> = read_jsonl(path)?;
            if all.len() < cfg.train_count + 1 {
                return Err(CliError::config(format!(
                    "data: file holds {} sequences, train_count is {}",
                    all.len(),
                    cfg.train_count
                )));
            }
            let (a, b) = all.split_at(cfg.train_count);
            (a.to_vec(), b.to_vec())
        }
        None => (
            sequences(cfg.seed, cfg.train_count),
            sequences(cfg.seed + cfg.train_count as u64, cfg.test_count),
        ),
    };

    // Held-out likelihood at initialization, for the improvement check.
    let init_params = init_mtpp_params(&tc)?;
    let init_eval = eval_mtpp(&test_seqs, &tc, &init_params)?;

    let trained = train_mtpp(&train_seqs, &tc)?;
    let eval = eval_mtpp(&test_seqs, &tc, &trained.params)?;

    let ck_config = json!({
        "task": "mtpp",
        "num_types": tc.num_types,
        "model_config": tc.model,
    });
    let ck = Checkpoint::new(cfg.seed, ck_config, trained.params, Some(trained.optimizer));
    let ck_path = cfg.out.join("checkpoint.json");
    ck.save(&ck_path)?;

    let doc = metrics_json(
        "train-mtpp",
        cfg.seed,
        obj(&[
            ("ll", json!(eval.ll)),
            ("ll_init", json!(init_eval.ll)),
            ("accuracy", json!(eval.accuracy)),
            ("time_rmse", json!(eval.time_rmse)),
            ("train_sequences", json!(train_seqs.len())),
            ("test_sequences", json!(test_seqs.len())),
            ("checkpoint", json!(ck_path.display().to_string())),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "phase,ll,accuracy,time_rmse",
        &[
            format!(
                "init,{},{},{}",
                init_eval.ll,
                opt_str(init_eval.accuracy),
                init_eval.time_rmse
            ),
            format!(
                "trained,{},{},{}",
                eval.ll,
                opt_str(eval.accuracy),
                eval.time_rmse
            ),
        ],
    )
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::config("checkpoint: required for eval-mtpp".into()))?;
    let ck = Checkpoint::load(&path)?;
    let model = serde_json::from_value(ck.config["model_config"].clone())
        .map_err(|e| CliError::Runtime(format!("checkpoint config: {e}")))?;
    let num_types = ck.config["num_types"].as_u64().unwrap_or(NUM_TYPES as u64) as usize;
    let tc = MtppTrainConfig {
        model,
        loss: MtppLossConfig {
            mc_samples: cfg.mc_samples,
            ..Default::default()
        },
        num_types,
        iters: 0,
        batch: 1,
        lr: 0.0,
        workers: cfg.workers,
        seed: ck.seed,
    };
    let test_seqs: Vec<EventSequence> = match &cfg.data {
        Some(p) => read_jsonl(p)?,
        None => sequences(cfg.seed + cfg.train_count as u64, cfg.test_count),
    };
    let eval = eval_mtpp(&test_seqs, &tc, &ck.params)?;
    let doc = metrics_json(
        "eval-mtpp",
        cfg.seed,
        obj(&[
            ("ll", json!(eval.ll)),
            ("accuracy", json!(eval.accuracy)),
            ("time_rmse", json!(eval.time_rmse)),
            ("test_sequences", json!(test_seqs.len())),
        ]),
    );
    write_metrics(
        &cfg.out,
        &doc,
        "ll,accuracy,time_rmse",
        &[format!(
            "{},{},{}",
            eval.ll,
            opt_str(eval.accuracy),
            eval.time_rmse
        )],
    )
}

fn opt_str(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "--".to_string(),
    }
}
