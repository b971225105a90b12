use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{OptimConfig, TrainConfig};
use crate::autodiff::{Graph, ParamMap};
use crate::checkpoint::{Checkpoint, Normalization};
use crate::dataset::{build_dataset, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{fsl, LossBreakdown, LossWeights};
use crate::net::{to_channels_first, FsaHeatNet};
use crate::tensor::Tensor;
use crate::thermal::NUM_LAYERS;

/// Network-ready tensors: standardized channels-first inputs
/// `[8, 4, R, C]` and normalized targets `[4, R, C]`.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

impl Prepared {
    pub fn new(samples: &[Sample], norm: &Normalization) -> Result<Self> {
        let mut inputs = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            let d = s.inputs.dims();
            if d[1] != norm.rows || d[2] != norm.cols {
                return Err(Error::InvalidArgument(format!(
                    "sample grid {}x{} does not match the network grid {}x{}",
                    d[1], d[2], norm.rows, norm.cols
                )));
            }
            inputs.push(to_channels_first(&norm.stats.standardize(&s.inputs)?)?);
            targets.push(
                s.target
                    .scale(1.0 / norm.theta_max)
                    .reshape(&[NUM_LAYERS, norm.rows, norm.cols])?,
            );
        }
        Ok(Prepared { inputs, targets, seeds: samples.iter().map(|s| s.meta.seed).collect() })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Normalization taken from a training set manifest.
pub fn normalization_of(ds: &Dataset) -> Result<Normalization> {
    let m = &ds.manifest;
    if !(m.theta_max > 0.0) {
        return Err(Error::Dataset("training set has no temperature rise to normalize by".into()));
    }
    Ok(Normalization {
        stats: m.stats.clone(),
        theta_max: m.theta_max,
        rows: m.rows,
        cols: m.cols,
        dataset_digest: m.data_digest.clone(),
    })
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: ParamMap,
    v: ParamMap,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamMap, cfg: &OptimConfig) -> Self {
        let zeros: ParamMap = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.dims()))).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moments track every parameter");
            let v = self.v.get_mut(name).expect("moments track every parameter");
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `lr` at step 0 to `lr_min` at `total` steps.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    net: &FsaHeatNet,
    params: &ParamMap,
    input: &Tensor,
    target: &Tensor,
    weights: LossWeights,
) -> Result<(LossBreakdown, ParamMap)> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = net.forward(&mut g, params, x)?;
    let y = g.reshape(y, target.dims())?;
    let (loss, parts) = fsl(&mut g, y, target, weights)?;
    let grads = g.backward(loss)?.params(&g);
    Ok((parts, grads))
}

/// Forward pass on channels-first inputs, returning `[4, R, C]`.
pub fn forward_value(net: &FsaHeatNet, params: &ParamMap, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = net.forward(&mut g, params, x)?;
    let d = g.dims(y).to_vec();
    g.value(y).clone().reshape(&d[1..])
}

/// Root mean squared error of `net` over a prepared set, normalized units.
pub fn rmse(net: &FsaHeatNet, params: &ParamMap, set: &Prepared) -> Result<f64> {
    let sq: Vec<f64> = set
        .inputs
        .par_iter()
        .zip(&set.targets)
        .map(|(x, t)| {
            let y = forward_value(net, params, x)?;
            Ok(y.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum())
        })
        .collect::<Result<_>>()?;
    let n: usize = set.targets.iter().map(Tensor::numel).sum();
    Ok((sq.iter().sum::<f64>() / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Training-set means of the loss parts.
    pub spatial: f64,
    pub magnitude: f64,
    pub phase: f64,
    pub frequency: f64,
    pub fsl: f64,
    pub val_rmse: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParamMap,
    pub best_params: ParamMap,
    /// 1-based epoch of `best_params`.
    pub best_epoch: usize,
    pub best_val_rmse: Option<f64>,
    pub log: Vec<EpochLog>,
}

fn add_into(acc: &mut ParamMap, g: &ParamMap) {
    for (k, t) in g {
        match acc.get_mut(k) {
            Some(a) => a.add_assign(t),
            None => {
                acc.insert(k.clone(), t.clone());
            }
        }
    }
}

/// Optimizes fresh parameters for `net` on `train`. Batches visit the
/// samples in a seeded shuffle; per-sample gradients are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count. The best epoch is chosen by validation RMSE, or by
/// training loss when there is no validation set. `on_epoch` sees every
/// epoch's log and the current parameters.
pub fn fit(
    net: &FsaHeatNet,
    cfg: &TrainConfig,
    train: &Prepared,
    val: Option<&Prepared>,
    mut on_epoch: impl FnMut(&EpochLog, &ParamMap) -> Result<()>,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let weights = cfg.loss_weights();
    let o = &cfg.optim;
    let mut params = net.init_params(cfg.seed);
    let mut adam = Adam::new(&params, o);
    let batches_per_epoch = train.len().div_ceil(o.batch_size);
    let total_steps = batches_per_epoch * o.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut log = Vec::with_capacity(o.epochs);
    let mut best: Option<(f64, usize, ParamMap)> = None;
    let mut best_val = None;

    for epoch in 1..=o.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut lr = o.lr;
        for batch in order.chunks(o.batch_size) {
            let results: Vec<Result<(LossBreakdown, ParamMap)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(net, &params, &train.inputs[i], &train.targets[i], weights))
                .collect();
            let mut acc = ParamMap::new();
            for (&i, r) in batch.iter().zip(results) {
                let non_finite = Error::NonFiniteLoss { epoch, batch_seed: train.seeds[i] };
                let (parts, grads) = match r {
                    Err(Error::NonFinite(_) | Error::NonFiniteWeight { .. }) => return Err(non_finite),
                    other => other?,
                };
                if !parts.total.is_finite() || !grads.values().all(Tensor::all_finite) {
                    return Err(non_finite);
                }
                sums.spatial += parts.spatial;
                sums.magnitude += parts.magnitude;
                sums.phase += parts.phase;
                sums.frequency += parts.frequency;
                sums.total += parts.total;
                add_into(&mut acc, &grads);
            }
            let inv = 1.0 / batch.len() as f64;
            for t in acc.values_mut() {
                *t = t.scale(inv);
            }
            lr = cosine_lr(o, step, total_steps);
            adam.step(&mut params, &acc, lr);
            step += 1;
        }
        let n = train.len() as f64;
        let val_rmse = match val {
            Some(v) if !v.is_empty() => Some(rmse(net, &params, v)?),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            spatial: sums.spatial / n,
            magnitude: sums.magnitude / n,
            phase: sums.phase / n,
            frequency: sums.frequency / n,
            fsl: sums.total / n,
            val_rmse,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L_s {:.6e} L_f {:.6e} fsl {:.6e} val_rmse {} ({:.1}s)",
            entry.spatial,
            entry.frequency,
            entry.fsl,
            val_rmse.map_or("-".to_string(), |v| format!("{v:.6e}")),
            entry.seconds
        );
        let score = val_rmse.unwrap_or(entry.fsl);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, params.clone()));
            best_val = val_rmse;
        }
        on_epoch(&entry, &params)?;
        log.push(entry);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(FitResult { params, best_params, best_epoch, best_val_rmse: best_val, log })
}

/// Files and figures of a finished training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_rmse: Option<f64>,
    pub dataset_dir: PathBuf,
    pub dataset_digest: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub log: Vec<EpochLog>,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RUN_MANIFEST: &str = "run.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Opens the configured training set, or generates it under
/// `<out>/data/train`.
pub fn training_set(cfg: &TrainConfig, out: &Path) -> Result<(PathBuf, Dataset)> {
    let dir = match &cfg.data.train_dir {
        Some(d) => d.clone(),
        None => {
            let dir = out.join("data").join("train");
            build_dataset(&cfg.dataset, cfg.data.n_train, cfg.seed, "train", &dir, cfg.data.thread_count())?;
            dir
        }
    };
    let ds = Dataset::open(&dir)?;
    Ok((dir, ds))
}

/// Full training run: data, optimization, log, checkpoints and a run
/// manifest, all under `out`.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let (dataset_dir, ds) = training_set(cfg, out)?;
    let norm = normalization_of(&ds)?;
    cfg.net.check_grid(norm.rows, norm.cols)?;
    let n_val = (ds.len() as f64 * cfg.data.val_fraction).floor() as usize;
    let split = ds.len() - n_val;
    let train_set = Prepared::new(&ds.samples[..split], &norm)?;
    let val_set = Prepared::new(&ds.samples[split..], &norm)?;
    let net = FsaHeatNet::new(cfg.net.clone())?;
    log::info!(
        "training {} parameters on {} samples ({} held out)",
        net.param_count(),
        train_set.len(),
        val_set.len()
    );

    let mut log_file = BufWriter::new(File::create(out.join(TRAIN_LOG))?);
    let result = fit(&net, cfg, &train_set, Some(&val_set), |entry, params| {
        serde_json::to_writer(&mut log_file, entry)?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;
        if cfg.checkpoint_every > 0 && entry.epoch % cfg.checkpoint_every == 0 {
            Checkpoint::new(&net, params.clone(), entry.epoch, entry.val_rmse, norm.clone())?
                .save(&out.join(format!("epoch{:04}.ckpt", entry.epoch)))?;
        }
        Ok(())
    })?;

    let best_path = out.join(BEST_CHECKPOINT);
    let last_path = out.join(LAST_CHECKPOINT);
    Checkpoint::new(&net, result.best_params, result.best_epoch, result.best_val_rmse, norm.clone())?
        .save(&best_path)?;
    let last_val = result.log.last().and_then(|e| e.val_rmse);
    Checkpoint::new(&net, result.params, cfg.optim.epochs, last_val, norm.clone())?.save(&last_path)?;

    let summary = TrainSummary {
        out_dir: out.to_path_buf(),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch: result.best_epoch,
        best_val_rmse: result.best_val_rmse,
        dataset_dir,
        dataset_digest: norm.dataset_digest,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        log: result.log,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(out.join(RUN_MANIFEST), json + "\n")?;
    Ok(summary)
}
