use std::sync::{Arc, OnceLock};
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model_io::encode_model;
use super::network::{NetDims, Network, Params, ShardMasks};
use super::{ForecastError, Hyperparams, Result, ScalerParams, WindowSample};
use crate::autodiff::Session;
use crate::exec::Execution;

/// Mean per-element loss above which training counts as diverged even when
/// the arithmetic stays finite. Targets live on the unit scale, so a sane
/// model is several orders of magnitude below this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Weighted mean GNLL over the epoch's minibatches (dropout on). Epoch 0
    /// is the untrained model evaluated with dropout off.
    pub train_gnll: f64,
    pub validation_gnll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn initial(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// First and last hour covered by training targets.
    pub data_start: DateTime<Utc>,
    pub data_end: DateTime<Utc>,
    pub seed: u64,
    pub parent: Option<String>,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// Samples carrying a weight other than one (acquired by active learning).
    pub weighted_samples: usize,
    /// Not written to the model file, which must be reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Immutable after training; cheap to share behind an `Arc`.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub hyperparams: Hyperparams,
    pub scaler: ScalerParams,
    pub dims: NetDims,
    pub params: Params,
    pub log: TrainingLog,
    pub provenance: Provenance,
    id: String,
    network: OnceLock<Arc<Network>>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("dims", &self.dims)
            .field("nodes", &self.tape.len())
            .finish()
    }
}

impl TrainedModel {
    pub fn new(
        hyperparams: Hyperparams,
        scaler: ScalerParams,
        dims: NetDims,
        params: Params,
        log: TrainingLog,
        provenance: Provenance,
    ) -> Result<Self> {
        let shapes = dims.param_shapes();
        if params.tensors.len() != shapes.len()
            || params.tensors.iter().zip(shapes).any(|(t, s)| t.dim() != s)
        {
            return Err(ForecastError::Shape(
                "weights do not match network dimensions".into(),
            ));
        }
        let mut m = Self {
            hyperparams,
            scaler,
            dims,
            params,
            log,
            provenance,
            id: String::new(),
            network: OnceLock::new(),
        };
        let digest = Sha256::digest(encode_model(&m)?);
        m.id = format!("m-{}", &hex::encode(digest)[..16]);
        Ok(m)
    }

    /// Content hash of the model file.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn network(&self) -> Arc<Network> {
        self.network
            .get_or_init(|| Arc::new(Network::build(self.dims)))
            .clone()
    }
}

/// Progress callback, invoked with every finished epoch (epoch 0 included).
#[derive(Clone)]
pub struct EpochHook(pub Arc<dyn Fn(&EpochRecord) + Send + Sync>);

impl EpochHook {
    pub fn new(f: impl Fn(&EpochRecord) + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl std::fmt::Debug for EpochHook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EpochHook")
    }
}

impl PartialEq for EpochHook {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub execution: Execution,
    /// Continue from these weights instead of a fresh initialization.
    pub warm_start: Option<&'a TrainedModel>,
    /// Overrides `hp.max_epochs`.
    pub max_epochs: Option<usize>,
    /// Overrides `hp.seed` for shuffling, dropout and initialization.
    pub seed: Option<u64>,
    pub on_epoch: Option<EpochHook>,
}

/// Trains a fresh model on `train`, checkpointing on `validation`.
pub fn train(
    train: &[WindowSample],
    validation: &[WindowSample],
    scaler: &ScalerParams,
    hp: &Hyperparams,
) -> Result<TrainedModel> {
    train_with(train, validation, scaler, hp, &TrainOptions::default())
}

/// Warm-start retrain from `parent` for `epochs` epochs.
pub fn fine_tune(
    parent: &TrainedModel,
    train: &[WindowSample],
    validation: &[WindowSample],
    epochs: usize,
    execution: Execution,
) -> Result<TrainedModel> {
    train_with(
        train,
        validation,
        &parent.scaler,
        &parent.hyperparams,
        &fine_tune_options(parent, epochs, execution),
    )
}

/// Options used by [`fine_tune`]. The seed is derived from the parent so a
/// child's shuffling and masks differ from the parent's run.
pub fn fine_tune_options(
    parent: &TrainedModel,
    epochs: usize,
    execution: Execution,
) -> TrainOptions<'_> {
    TrainOptions {
        execution,
        warm_start: Some(parent),
        max_epochs: Some(epochs),
        seed: Some(
            parent
                .hyperparams
                .seed
                .wrapping_add(parent.provenance.train_samples as u64 + 1),
        ),
        on_epoch: None,
    }
}

pub fn train_with(
    train: &[WindowSample],
    validation: &[WindowSample],
    scaler: &ScalerParams,
    hp: &Hyperparams,
    opts: &TrainOptions<'_>,
) -> Result<TrainedModel> {
    hp.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(ForecastError::EmptyData);
    }
    let enc_f = train[0].encoder.ncols();
    let dec_f = train[0].decoder.ncols();
    let dims = hp.dims(enc_f, dec_f);
    for s in train.iter().chain(validation) {
        check_sample(s, &dims)?;
    }
    if let Some(parent) = opts.warm_start {
        if parent.dims != dims {
            return Err(ForecastError::Shape(
                "warm start network dimensions differ".into(),
            ));
        }
    }

    let started = Instant::now();
    let seed = opts.seed.unwrap_or(hp.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match opts.warm_start {
        Some(p) => p.network(),
        None => Arc::new(Network::build(dims)),
    };
    let mut params = match opts.warm_start {
        Some(p) => p.params.clone(),
        None => Params::init(&dims, &mut rng),
    };
    let exec = opts.execution;
    let epochs = opts.max_epochs.unwrap_or(hp.max_epochs);

    let mut log = TrainingLog::default();
    let train0 = evaluate_weighted(&net, &params, train, hp.shard_size, true, exec)?;
    let val0 = evaluate_weighted(&net, &params, validation, hp.shard_size, false, exec)?;
    if !train0.is_finite() || !val0.is_finite() {
        return Err(ForecastError::Divergence { epoch: 0 });
    }
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_gnll: train0,
        validation_gnll: val0,
    });
    let notify = |r: &EpochRecord| {
        if let Some(h) = &opts.on_epoch {
            (h.0)(r)
        }
    };
    notify(&log.epochs[0]);
    let mut best = (val0, params.clone());
    let mut since_best = 0;

    let mut adam = Adam::new(&params, hp.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for batch_idx in order.chunks(hp.batch_size) {
            let batch: Vec<&WindowSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let total: f64 = batch.iter().map(|s| s.weight).sum::<f64>() * dims.horizon as f64;
            let shards: Vec<(Vec<&WindowSample>, ShardMasks)> = batch
                .chunks(hp.shard_size)
                .map(|c| (c.to_vec(), ShardMasks::sample(&dims, c.len(), &mut rng)))
                .collect();
            let results = exec.map(&shards, |(shard, masks)| {
                shard_gradients(&net, &params, shard, masks.clone(), total)
            });
            let mut grads = params.zeros_like().tensors;
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc += &gi;
                }
            }
            if !loss.is_finite()
                || loss > DIVERGENCE_LOSS
                || grads.iter().any(|g| g.iter().any(|v| !v.is_finite()))
            {
                log::warn!("training diverged at epoch {epoch} (loss {loss})");
                return Err(ForecastError::Divergence { epoch });
            }
            clip_global_norm(&mut grads, hp.grad_clip_norm);
            adam.step(&mut params, &grads);
            if !params.all_finite() {
                return Err(ForecastError::Divergence { epoch });
            }
            loss_sum += loss * total;
            weight_sum += total;
        }
        let train_gnll = loss_sum / weight_sum;
        let val = evaluate_weighted(&net, &params, validation, hp.shard_size, false, exec)?;
        if !val.is_finite() || val > DIVERGENCE_LOSS {
            log::warn!("validation loss diverged at epoch {epoch}");
            return Err(ForecastError::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: train {train_gnll:.4} validation {val:.4}");
        log.epochs.push(EpochRecord {
            epoch,
            train_gnll,
            validation_gnll: val,
        });
        notify(&log.epochs[epoch]);
        if val < best.0 {
            best = (val, params.clone());
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hp.early_stop_patience {
                log.stopped_early = epoch < epochs;
                break;
            }
        }
    }

    let first = train
        .iter()
        .map(|s| s.target_start)
        .min()
        .expect("non-empty");
    let last = train
        .iter()
        .map(|s| s.target_start)
        .max()
        .expect("non-empty");
    let provenance = Provenance {
        data_start: first,
        data_end: last + Duration::hours(dims.horizon as i64 - 1),
        seed,
        parent: opts.warm_start.map(|p| p.id().to_string()),
        train_samples: train.len(),
        validation_samples: validation.len(),
        weighted_samples: train.iter().filter(|s| s.weight != 1.0).count(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let model = TrainedModel::new(hp.clone(), scaler.clone(), dims, best.1, log, provenance)?;
    model.network.set(net).ok();
    Ok(model)
}

fn check_sample(s: &WindowSample, dims: &NetDims) -> Result<()> {
    if s.encoder.dim() != (dims.history, dims.enc_features)
        || s.decoder.dim() != (dims.horizon, dims.dec_features)
    {
        return Err(ForecastError::Shape(format!(
            "sample at {} has encoder {:?} / decoder {:?}",
            s.target_start,
            s.encoder.dim(),
            s.decoder.dim()
        )));
    }
    if s.target.len() != dims.horizon {
        return Err(ForecastError::Shape(format!(
            "target length {} != {}",
            s.target.len(),
            dims.horizon
        )));
    }
    let finite = s
        .encoder
        .iter()
        .chain(s.decoder.iter())
        .chain(s.target.iter())
        .all(|v| v.is_finite());
    if !finite || s.weight.is_nan() || s.weight <= 0.0 {
        return Err(ForecastError::Shape(format!(
            "sample at {} has non-finite values",
            s.target_start
        )));
    }
    Ok(())
}

fn shard_gradients(
    net: &Network,
    params: &Params,
    shard: &[&WindowSample],
    masks: ShardMasks,
    total: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let b = net.bind(params, shard, masks, true, total);
    let mut s = Session::new(&net.tape, &b);
    let loss = s.forward()?.ok_or(crate::autodiff::AutodiffError::NoLoss)?;
    let g = s.backward()?;
    let grads = net
        .param_nodes()
        .iter()
        .map(|&id| g.get(id).cloned().expect("gradient for every parameter"))
        .collect();
    Ok((loss, grads))
}

/// Mean GNLL of `samples` in scaled units, dropout off, every sample weighted
/// equally.
pub fn evaluate_gnll(
    model: &TrainedModel,
    samples: &[WindowSample],
    execution: Execution,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(ForecastError::EmptyData);
    }
    for s in samples {
        check_sample(s, &model.dims)?;
    }
    evaluate_weighted(
        &model.network(),
        &model.params,
        samples,
        model.hyperparams.shard_size,
        false,
        execution,
    )
}

fn evaluate_weighted(
    net: &Network,
    params: &Params,
    samples: &[WindowSample],
    shard_size: usize,
    use_weights: bool,
    exec: Execution,
) -> Result<f64> {
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let weight: f64 = if use_weights {
        samples.iter().map(|s| s.weight).sum()
    } else {
        samples.len() as f64
    };
    let total = weight * net.dims.horizon as f64;
    let shards: Vec<&[&WindowSample]> = refs.chunks(shard_size).collect();
    let losses = exec.map(&shards, |shard| -> Result<f64> {
        let b = net.bind(
            params,
            shard,
            ShardMasks::inference(&net.dims, shard.len()),
            use_weights,
            total,
        );
        let mut s = Session::new(&net.tape, &b);
        Ok(s.forward()?.unwrap_or(f64::NAN))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum)
}

fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            g.mapv_inplace(|v| v * k);
        }
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(params: &Params, lr: f64) -> Self {
        let z = params.zeros_like().tensors;
        Self {
            m: z.clone(),
            v: z,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        }
    }
}
