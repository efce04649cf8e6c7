//! Training loop for the point-cloud testbed: warmup-plus-cosine
//! schedule, per-mini-batch optimizer steps, early stopping on test MSE,
//! and a serializable run record.
//!
//! A run is fully determined by its config. Three independent random
//! streams are derived from the seed — `"dataset"`, `"init"`,
//! `"shuffle"` — so two runs with the same seed but different optimizers
//! see identical data, identical initial parameters, and identical batch
//! orders: exactly the paired-seed setup the optimizer comparison needs.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{derive_seed, Rng};
use crate::optim::{
    adamw_step, muon_matrix_step, polaradamw_matrix_step, AdamWState, LrSchedule, MuonState,
    ParamOptState, PolarAdamWState,
};
use crate::so3::{backward_batch, forward_batch, generate_dataset, mse_loss, PointCloud, So3Model};

/// Which update rule drives the matrix-shaped parameters. Auxiliary
/// parameters (biases, gains) always take AdamW steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Muon,
    PolarAdamW,
}

impl OptimizerKind {
    pub fn label(self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Muon => "muon",
            OptimizerKind::PolarAdamW => "polaradamw",
        }
    }

    /// Matrix-group learning rate used when no explicit rate is given:
    /// 1e-3 for the elementwise rule, 0.02 for the orthogonalized ones.
    pub fn default_base_lr(self) -> f64 {
        match self {
            OptimizerKind::AdamW => 1e-3,
            OptimizerKind::Muon => 0.02,
            OptimizerKind::PolarAdamW => 0.02,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::AdamW),
            "muon" => Ok(OptimizerKind::Muon),
            "polaradamw" => Ok(OptimizerKind::PolarAdamW),
            other => Err(Error::BadFlag(format!(
                "unknown optimizer {other:?} (expected adamw, muon, or polaradamw)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_channels: usize,
    pub n_layers: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    /// Matrix-group learning rate (peak of the schedule).
    pub base_lr: f64,
    /// Auxiliary-group AdamW rate; follows the same schedule shape.
    pub aux_lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    pub batch_size: usize,
}

impl TrainConfig {
    /// The standard recipe: 3 layers, 100 epochs with 10-epoch warmup,
    /// patience 30, weight decay 0, 2048/512 clouds of 32 points,
    /// batches of 64, auxiliary rate 1e-3.
    pub fn new(hidden_channels: usize, optimizer: OptimizerKind, base_lr: f64, seed: u64) -> Self {
        TrainConfig {
            hidden_channels,
            n_layers: 3,
            epochs: 100,
            warmup_epochs: 10,
            patience: 30,
            base_lr,
            aux_lr: 1e-3,
            optimizer,
            weight_decay: 0.0,
            seed,
            n_train: 2048,
            n_test: 512,
            n_points: 32,
            batch_size: 64,
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub lr: f64,
}

/// The artifact of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Test MSE at the best epoch.
    pub final_test_mse: f64,
    pub best_epoch: usize,
    /// Number of epochs actually run (equals `epochs` without early stop).
    pub stopped_epoch: usize,
    pub wall_seconds: f64,
}

/// Mean squared error of the model over a dataset, in fixed-size batches.
pub fn evaluate(model: &So3Model, clouds: &[PointCloud], batch_size: usize) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::BadFlag("cannot evaluate on an empty dataset".into()));
    }
    let mut sum = 0.0;
    for chunk in clouds.chunks(batch_size.max(1)) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let (preds, _) = forward_batch(model, &refs)?;
        for (&p, c) in preds.iter().zip(&refs) {
            sum += mse_loss(p, c.target).0;
        }
    }
    Ok(sum / clouds.len() as f64)
}

fn fisher_yates(order: &mut [usize], rng: &mut Rng) {
    for i in (1..order.len()).rev() {
        let j = (rng.gen_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
}

/// Runs one full training job described by `config`.
///
/// Early-stops once the test MSE has not improved for `patience`
/// consecutive epochs; the reported `final_test_mse` is the best epoch's
/// value. A non-finite train loss aborts with [`Error::Divergence`].
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    let t0 = Instant::now();
    if config.batch_size == 0 {
        return Err(Error::BadFlag("batch_size must be positive".into()));
    }
    if !(config.base_lr > 0.0) || !(config.aux_lr > 0.0) {
        return Err(Error::BadFlag("learning rates must be positive".into()));
    }

    let mut data_rng = Rng::from_seed(derive_seed(config.seed, "dataset"));
    let train_set = generate_dataset(config.n_train, config.n_points, &mut data_rng)?;
    let test_set = generate_dataset(config.n_test, config.n_points, &mut data_rng)?;
    let mut init_rng = Rng::from_seed(derive_seed(config.seed, "init"));
    let mut model = So3Model::new(config.hidden_channels, config.n_layers, &mut init_rng)?;
    let mut shuffle_rng = Rng::from_seed(derive_seed(config.seed, "shuffle"));

    let mut states: BTreeMap<String, ParamOptState> = BTreeMap::new();
    for (id, is_matrix, w) in model.params() {
        let (rows, cols) = w.shape();
        let state = if is_matrix {
            match config.optimizer {
                OptimizerKind::AdamW => ParamOptState::AdamW(AdamWState::new(
                    rows,
                    cols,
                    config.base_lr,
                    config.weight_decay,
                )),
                OptimizerKind::Muon => {
                    ParamOptState::Muon(MuonState::new(rows, cols, config.base_lr))
                }
                OptimizerKind::PolarAdamW => ParamOptState::PolarAdamW(PolarAdamWState::new(
                    rows,
                    cols,
                    config.base_lr,
                    config.weight_decay,
                )),
            }
        } else {
            ParamOptState::AdamW(AdamWState::new(rows, cols, config.aux_lr, 0.0))
        };
        states.insert(id, state);
    }

    if config.epochs == 0 {
        let final_test_mse = evaluate(&model, &test_set, config.batch_size)?;
        return Ok(RunRecord {
            config: config.clone(),
            history: Vec::new(),
            final_test_mse,
            best_epoch: 0,
            stopped_epoch: 0,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    // keep the schedule valid for very short runs
    let warmup = config.warmup_epochs.min(config.epochs - 1);
    let schedule = LrSchedule::new(config.base_lr, warmup, config.epochs, 1e-3)?;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut stopped_epoch = config.epochs;
    let mut order: Vec<usize> = (0..config.n_train).collect();

    for epoch in 0..config.epochs {
        let eta_matrix = schedule.lr_at(epoch)?;
        let eta_aux = config.aux_lr * (eta_matrix / config.base_lr);
        fisher_yates(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&PointCloud> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (preds, cache) = forward_batch(&model, &refs)?;
            let k = refs.len() as f64;
            let mut d_preds = Vec::with_capacity(refs.len());
            for (&p, c) in preds.iter().zip(&refs) {
                let (loss, d_pred) = mse_loss(p, c.target);
                loss_sum += loss;
                d_preds.push(d_pred / k);
            }
            let grads = backward_batch(&model, &cache, &d_preds)?;
            for (id, is_matrix, w) in model.params_mut() {
                let g = &grads[&id];
                match states.get_mut(&id).expect("one state per parameter") {
                    ParamOptState::AdamW(st) => {
                        adamw_step(st, w, g, if is_matrix { eta_matrix } else { eta_aux })?
                    }
                    ParamOptState::Muon(st) => muon_matrix_step(st, w, g, eta_matrix)?,
                    ParamOptState::PolarAdamW(st) => {
                        polaradamw_matrix_step(st, w, g, eta_matrix)?
                    }
                }
            }
        }
        let train_mse = loss_sum / config.n_train as f64;
        if !train_mse.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let test_mse = evaluate(&model, &test_set, config.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_mse,
            test_mse,
            lr: eta_matrix,
        });
        if test_mse < best {
            best = test_mse;
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_epoch = epoch + 1;
                break;
            }
        }
    }

    Ok(RunRecord {
        config: config.clone(),
        history,
        final_test_mse: best,
        best_epoch,
        stopped_epoch,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(optimizer: OptimizerKind) -> TrainConfig {
        let mut cfg = TrainConfig::new(4, optimizer, optimizer.default_base_lr(), 7);
        cfg.n_layers = 2;
        cfg.epochs = 3;
        cfg.warmup_epochs = 1;
        cfg.n_train = 64;
        cfg.n_test = 32;
        cfg.n_points = 8;
        cfg.batch_size = 32;
        cfg
    }

    #[test]
    fn zero_epochs_returns_the_untrained_test_mse() {
        let mut cfg = tiny_config(OptimizerKind::AdamW);
        cfg.epochs = 0;
        let record = train(&cfg).unwrap();
        assert!(record.history.is_empty());
        assert_eq!(record.stopped_epoch, 0);
        assert!(record.final_test_mse.is_finite());

        // must equal a fresh model evaluated on the same data
        let mut data_rng = Rng::from_seed(derive_seed(cfg.seed, "dataset"));
        let _train = generate_dataset(cfg.n_train, cfg.n_points, &mut data_rng).unwrap();
        let test = generate_dataset(cfg.n_test, cfg.n_points, &mut data_rng).unwrap();
        let mut init_rng = Rng::from_seed(derive_seed(cfg.seed, "init"));
        let model = So3Model::new(cfg.hidden_channels, cfg.n_layers, &mut init_rng).unwrap();
        let direct = evaluate(&model, &test, cfg.batch_size).unwrap();
        assert_eq!(record.final_test_mse, direct);
    }

    #[test]
    fn short_runs_follow_the_schedule_and_reduce_train_loss() {
        for kind in [
            OptimizerKind::AdamW,
            OptimizerKind::Muon,
            OptimizerKind::PolarAdamW,
        ] {
            let cfg = tiny_config(kind);
            let record = train(&cfg).unwrap();
            assert_eq!(record.history.len(), 3, "{kind}");
            let schedule = LrSchedule::new(cfg.base_lr, 1, cfg.epochs, 1e-3).unwrap();
            for rec in &record.history {
                assert_eq!(rec.lr, schedule.lr_at(rec.epoch).unwrap());
                assert!(rec.train_mse.is_finite() && rec.test_mse.is_finite());
            }
            assert!(
                record.history[2].train_mse < record.history[0].train_mse,
                "{kind}: train MSE should drop over 3 epochs ({} -> {})",
                record.history[0].train_mse,
                record.history[2].train_mse
            );
        }
    }

    #[test]
    fn identical_configs_produce_identical_histories() {
        let cfg = tiny_config(OptimizerKind::Muon);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_test_mse, b.final_test_mse);
        assert_eq!(a.stopped_epoch, b.stopped_epoch);
    }

    #[test]
    fn early_stopping_fires_when_nothing_improves() {
        // learning rates far below one ulp of any weight: parameters stay
        // bitwise constant, so the test MSE never improves after epoch 0
        let mut cfg = tiny_config(OptimizerKind::Muon);
        cfg.base_lr = 1e-30;
        cfg.aux_lr = 1e-30;
        cfg.epochs = 40;
        cfg.patience = 2;
        let record = train(&cfg).unwrap();
        assert_eq!(record.best_epoch, 0);
        assert_eq!(record.history.len(), 1 + cfg.patience);
        assert_eq!(record.stopped_epoch, 1 + cfg.patience);
        assert_eq!(record.final_test_mse, record.history[0].test_mse);
    }

    #[test]
    fn enormous_learning_rate_is_reported_as_divergence() {
        let mut cfg = tiny_config(OptimizerKind::Muon);
        cfg.base_lr = 1e200;
        cfg.aux_lr = 1e200;
        cfg.epochs = 6;
        cfg.warmup_epochs = 0;
        match train(&cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn optimizer_kind_parses_and_prints() {
        for kind in [
            OptimizerKind::AdamW,
            OptimizerKind::Muon,
            OptimizerKind::PolarAdamW,
        ] {
            let parsed: OptimizerKind = kind.label().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("sgd".parse::<OptimizerKind>().is_err());
        assert_eq!(
            serde_json::to_string(&OptimizerKind::PolarAdamW).unwrap(),
            "\"polaradamw\""
        );
    }

    #[test]
    fn run_record_serializes_and_round_trips() {
        let mut cfg = tiny_config(OptimizerKind::AdamW);
        cfg.epochs = 1;
        let record = train(&cfg).unwrap();
        let json = serde_json::to_string_pretty(&record).unwrap();
        let back: RunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record);
    }
}
