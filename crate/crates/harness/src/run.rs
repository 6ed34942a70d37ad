//! One training run from a config and a seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use c2f_core::optim::Sgd;
use c2f_core::rng::{Rng, StreamKind};
use c2f_core::tasks::{BatchStream, Dataset, Split};
use c2f_core::train::{encoding_for, evaluate, train_run, CoarseFinePair, Evaluation, StepTrace};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;

/// Result of one (config, seed) run. Carries its own config copy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub traces: Vec<StepTrace>,
    pub eval: Evaluation,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Mean fine loss over the last tenth of training.
    pub fn final_fine_loss(&self) -> f64 {
        let window = (self.traces.len() / 10).max(1);
        let tail = &self.traces[self.traces.len().saturating_sub(window)..];
        tail.iter().map(|t| t.loss_fine).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Train and test splits of a config.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), HarnessError> {
    let tc = cfg.task_config();
    Ok((
        Dataset::generate(&tc, cfg.data_seed, Split::Train)?,
        Dataset::generate(&tc, cfg.data_seed, Split::Test)?,
    ))
}

/// A fresh, untrained pair for `cfg` and `seed`.
pub fn new_pair(cfg: &ExperimentConfig, seed: u64) -> Result<CoarseFinePair, HarnessError> {
    let spec = cfg.model_spec();
    let enc = encoding_for(&spec, cfg.box_raster())?;
    Ok(CoarseFinePair::new(&spec, enc, seed)?)
}

/// Trains and evaluates one pair. Only `seed` is taken from outside the config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &(Dataset, Dataset),
) -> Result<(RunRecord, CoarseFinePair), HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let strategy = cfg.build_strategy()?;
    let mut pair = new_pair(cfg, seed)?;
    let mut stream = BatchStream::new(&data.0, cfg.batch_size, seed)?;
    let mut sgd = Sgd::new(cfg.sgd());
    let mut rng = Rng::for_kind(seed, StreamKind::Sampling, 0);
    let traces = train_run(
        &mut pair,
        &strategy,
        &mut stream,
        &mut sgd,
        cfg.total_iters,
        &mut rng,
        &cfg.train_options(),
    )?;
    let eval = evaluate(&pair, &strategy, &data.1, &cfg.infer_options())?;
    let mut single = cfg.clone();
    single.seeds = vec![seed];
    Ok((
        RunRecord {
            fingerprint: single.fingerprint(),
            seed,
            config: single,
            traces,
            eval,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        pair,
    ))
}
