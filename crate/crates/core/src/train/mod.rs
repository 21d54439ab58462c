//! Relative-L2 training with AdamW, cosine annealing and global-norm
//! clipping; scratch, freeze-S and transfer-all modes; channel sweeps.

mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::container::write_atomic;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::generator::{spectrum, PATH_P};
use crate::model::{
    batch_grads, init_model, is_generator_path, load_checkpoint, propagators, sample_loss, save_checkpoint,
    Checkpoint, ModelConfig, ModelParams,
};
use crate::numkern::Tensor;

pub use optim::{clip_global_norm, cosine_lr, global_norm, AdamW, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Scratch,
    FreezeS,
    TransferAll,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TrainMode::Scratch),
            "freeze_s" => Ok(TrainMode::FreezeS),
            "transfer_all" => Ok(TrainMode::TransferAll),
            other => Err(Error::Config(format!(
                "unknown mode {:?} (expected scratch, freeze_s, transfer_all)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mode: TrainMode,
    pub init_checkpoint: Option<PathBuf>,
    pub seed: u64,
    #[serde(rename = "N_train")]
    pub n_train: usize,
    #[serde(rename = "N_test")]
    pub n_test: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 10,
            lr0: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            mode: TrainMode::Scratch,
            init_checkpoint: None,
            seed: 0,
            n_train: 1000,
            n_test: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("N_train and N_test must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr0 and clip_norm must be positive, lr_min and weight_decay non-negative".into()));
        }
        if self.mode != TrainMode::Scratch && self.init_checkpoint.is_none() {
            return Err(Error::Config("freeze_s and transfer_all require init_checkpoint".into()));
        }
        Ok(())
    }
}

/// `||pred - truth||_F / ||truth||_F` over the whole volume.
pub fn relative_l2(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let tn = truth.norm();
    if tn == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let diff: f64 = pred
        .re()
        .iter()
        .zip(truth.re())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(diff.sqrt() / tn)
}

/// Mean per-sample relative L2 error over the given trajectories.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let cfg = &params.config;
    let props = propagators(params, &cfg.times())?;
    let losses: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let (x, y) = dataset.sample(i, cfg.t_in, cfg.t_out)?;
            sample_loss(params, &props, &x, &y)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_l2: f64,
    pub lr: f64,
    pub wall_ms: f64,
    pub max_re_lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,test_l2,lr,wall_ms,max_re_lambda";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:.3},{:e}",
                r.epoch, r.train_loss, r.test_l2, r.lr, r.wall_ms, r.max_re_lambda
            );
        }
        s
    }

    pub fn best(&self) -> Option<&LogRow> {
        self.rows.iter().min_by(|a, b| a.test_l2.total_cmp(&b.test_l2))
    }

    /// First epoch whose test error is at or below `threshold`.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.test_l2 <= threshold).map(|r| r.epoch)
    }
}

/// Largest real part over the full generator spectrum.
pub fn max_re_lambda(params: &ModelParams) -> Result<f64> {
    Ok(spectrum(&params.generator(), &params.config.grid())?
        .iter()
        .map(|p| p.lambda.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_test_l2: f64,
    /// Files written under the output directory.
    pub files: Vec<PathBuf>,
}

fn check_dataset(model: &ModelConfig, train: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if dataset.n() != model.n {
        return Err(Error::Config(format!("dataset grid {} differs from model n = {}", dataset.n(), model.n)));
    }
    if dataset.snapshots() < model.t_in + model.t_out {
        return Err(Error::Config(format!(
            "trajectories have {} snapshots, T_in + T_out = {}",
            dataset.snapshots(),
            model.t_in + model.t_out
        )));
    }
    if dataset.manifest.train.len() < train.n_train || dataset.manifest.test.len() < train.n_test {
        return Err(Error::Config(format!(
            "dataset has {} train / {} test trajectories, config asks for {} / {}",
            dataset.manifest.train.len(),
            dataset.manifest.test.len(),
            train.n_train,
            train.n_test
        )));
    }
    if train.n_train < train.batch_size {
        return Err(Error::Config(format!(
            "N_train = {} is smaller than batch_size = {}",
            train.n_train, train.batch_size
        )));
    }
    Ok(())
}

/// Fields of two configurations that must agree for weight transfer.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut cmp = |name: &str, x: String, y: String| {
        if x != y {
            out.push(format!("{}: {} vs {}", name, x, y));
        }
    };
    cmp("n", a.n.to_string(), b.n.to_string());
    cmp("T_in", a.t_in.to_string(), b.t_in.to_string());
    cmp("T_out", a.t_out.to_string(), b.t_out.to_string());
    cmp("r", a.r.to_string(), b.r.to_string());
    cmp("M", a.m.to_string(), b.m.to_string());
    cmp("w", a.w.to_string(), b.w.to_string());
    cmp("hidden", a.hidden.to_string(), b.hidden.to_string());
    cmp("variant", a.variant.name().into(), b.variant.name().into());
    out
}

/// Trains from scratch or from `train.init_checkpoint`, per `train.mode`.
pub fn train_loop(
    model: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train.validate()?;
    model.validate()?;
    let initial = match (&train.mode, &train.init_checkpoint) {
        (TrainMode::Scratch, _) => init_model(model)?,
        (_, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let diffs = config_differences(model, &ckpt.params.config);
            if !diffs.is_empty() {
                return Err(Error::Incompatible(format!(
                    "pretrained checkpoint differs in {}",
                    diffs.join(", ")
                )));
            }
            ckpt.params
        }
        (_, None) => unreachable!("validated"),
    };
    run(initial, train, dataset, out_dir)
}

/// Fine-tunes `pretrained` on `dataset`; `freeze_s` never updates `generator.P`.
pub fn transfer_finetune(
    pretrained: &ModelParams,
    mode: TrainMode,
    dataset: &Dataset,
    train: &TrainConfig,
    target_config: Option<&ModelConfig>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(cfg) = target_config {
        let diffs = config_differences(cfg, &pretrained.config);
        if !diffs.is_empty() {
            return Err(Error::Incompatible(format!("pretrained model differs in {}", diffs.join(", "))));
        }
    }
    let mut train = train.clone();
    train.mode = mode;
    run(pretrained.clone(), &train, dataset, out_dir)
}

fn run(mut params: ModelParams, train: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = params.config.clone();
    check_dataset(&cfg, train, dataset)?;
    let train_idx: Vec<usize> = dataset.manifest.train[..train.n_train].to_vec();
    let test_idx: Vec<usize> = dataset.manifest.test[..train.n_test].to_vec();
    let samples: Vec<(Tensor, Tensor)> = train_idx
        .iter()
        .map(|&i| dataset.sample(i, cfg.t_in, cfg.t_out))
        .collect::<Result<_>>()?;
    let times = cfg.times();
    let frozen = |path: &str| train.mode == TrainMode::FreezeS && path == PATH_P;

    let mut opt = AdamW::new(train.weight_decay);
    let mut log = TrainLog::default();
    let mut files = Vec::new();
    let mut best = (usize::MAX, f64::INFINITY);
    let mut rng = crate::datagen::trajectory_rng(train.seed, 0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let log_path = out_dir.map(|d| d.join("train_log.csv"));
    let best_path = out_dir.map(|d| d.join("best.lgnk"));

    for epoch in 0..train.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, train.epochs, train.lr0, train.lr_min);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(train.batch_size).enumerate() {
            let props = propagators(&params, &times)?;
            let batch: Vec<(&Tensor, &Tensor)> = chunk.iter().map(|&i| (&samples[i].0, &samples[i].1)).collect();
            let (loss, mut grads) = batch_grads(&params, &props, &batch)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            grads.retain(|path, _| !frozen(path));
            clip_global_norm(&mut grads, train.clip_norm);
            opt.step(&mut params, &grads, lr, |path| !is_generator_path(path));
            loss_sum += loss;
            batches += 1;
        }
        let test_l2 = evaluate(&params, dataset, &test_idx)?;
        if !test_l2.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: batches });
        }
        let max_re = max_re_lambda(&params)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log.rows.push(LogRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_l2,
            lr,
            wall_ms,
            max_re_lambda: max_re,
        });
        if test_l2 < best.1 {
            best = (epoch, test_l2);
            if let Some(path) = &best_path {
                let ckpt = Checkpoint {
                    params: params.clone(),
                    epoch,
                    optimizer: Some(opt.state.clone()),
                };
                for f in save_checkpoint(path, &ckpt)? {
                    if !files.contains(&f) {
                        files.push(f);
                    }
                }
            }
        }
        if let Some(path) = &log_path {
            write_atomic(path, log.to_csv().as_bytes())?;
        }
    }
    if let Some(dir) = out_dir {
        let ckpt = Checkpoint {
            params: params.clone(),
            epoch: train.epochs,
            optimizer: Some(opt.state.clone()),
        };
        files.extend(save_checkpoint(&dir.join("final.lgnk"), &ckpt)?);
        if let Some(p) = log_path {
            files.push(p);
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        best_epoch: best.0,
        best_test_l2: best.1,
        files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub test_l2: f64,
    pub best_test_l2: f64,
    pub fit_r2: f64,
}

/// One model per channel count, all other settings fixed.
pub fn sweep_channels(
    r_list: &[usize],
    template: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Vec<SweepRow>, Vec<PathBuf>)> {
    let mut rows = Vec::with_capacity(r_list.len());
    let mut files = Vec::new();
    for &r in r_list {
        let cfg = ModelConfig { r, ..template.clone() };
        let dir = match out_dir {
            Some(d) => {
                let sub = d.join(format!("r{}", r));
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                Some(sub)
            }
            None => None,
        };
        let outcome = train_loop(&cfg, train, dataset, dir.as_deref())?;
        let fit = crate::physics::fit_dissipation(&outcome.params)?;
        files.extend(outcome.files);
        rows.push(SweepRow {
            r,
            test_l2: outcome.log.rows.last().map_or(f64::NAN, |row| row.test_l2),
            best_test_l2: outcome.best_test_l2,
            fit_r2: fit.dominant.r_squared,
        });
    }
    Ok((rows, files))
}
