//! Noise-prediction objective, momentum SGD, checkpoints and gradient checks.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BitemporalPair, TensorBatch};
use crate::error::{Error, Result};
use crate::metrics::{score, Pooling};
use crate::predictor::{CadmModel, NoisePredictor, PredictorConfig};
use crate::rng::{normals, stream};
use crate::sampler::{predict_pairs, score_maps, SamplerConfig};
use crate::schedule::{q_sample_batch, NoiseSchedule, ScheduleConfig};

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reverse steps of the sampler used for validation F1.
    pub val_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.99,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            val_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 || self.val_steps == 0 {
            return Err(Error::InvalidArgument(
                "weight_decay must be non-negative; batch_size and val_steps positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`, decaying linearly to zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (1.0 - epoch as f64 / self.epochs as f64)
    }
}

/// Timesteps and noise drawn for one batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

/// Per-example `t ~ U{1..T}` and `eps ~ N(0, I)` shaped `(B, 1, H, W)`.
pub fn draw_noise(rng: &mut ChaCha8Rng, b: usize, shape: (usize, usize), steps: usize, dtype: DType) -> Result<NoiseDraw> {
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
    let eps = normals(rng, b * shape.0 * shape.1);
    let eps = Tensor::from_vec(eps, (b, 1, shape.0, shape.1), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(NoiseDraw { ts, eps })
}

/// Mean squared error between the drawn noise and its prediction.
pub fn loss_from_draws<P: NoisePredictor>(
    model: &P,
    batch: &TensorBatch,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let x_t = q_sample_batch(&batch.x0, &draw.ts, &draw.eps, sched)?;
    let cond = model.condition(&batch.image_a, &batch.image_b)?;
    let eps_hat = model.predict(&x_t, &cond, &draw.ts)?;
    Ok((eps_hat - &draw.eps)?.sqr()?.mean_all()?)
}

pub fn diffusion_loss<P: NoisePredictor>(
    model: &P,
    batch: &TensorBatch,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (_, _, h, w) = batch.x0.dims4()?;
    let draw = draw_noise(rng, batch.len(), (h, w), sched.num_steps(), batch.x0.dtype())?;
    loss_from_draws(model, batch, &draw, sched)
}

/// Momentum SGD with coupled weight decay:
/// `g += wd * p; buf = mu * buf + g; p -= lr * buf`, with `buf = g` on the
/// first update of a parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }

    /// Updates every variable that received a gradient.
    pub fn step(&mut self, vars: &BTreeMap<String, Var>, grads: &GradStore) -> Result<()> {
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + w.affine(self.weight_decay, 0.0)?)?;
            }
            let buf = match self.buffers.get(name) {
                Some(b) if self.momentum != 0.0 => (b.affine(self.momentum, 0.0)? + g)?,
                _ => g,
            };
            if self.lr != 0.0 {
                var.set(&(w - buf.affine(self.lr, 0.0)?)?)?;
            }
            self.buffers.insert(name.clone(), buf);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_loss_median: f64,
    pub val_f1: Option<f64>,
    pub lr: f64,
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    train_loss: f64,
    val_f1: Option<f64>,
    lr: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub predictor: PredictorConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub epochs_done: usize,
    pub params: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    predictor: PredictorConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    epochs_done: usize,
    /// Noise and shuffling streams are derived from this seed and the epoch.
    rng_seed: u64,
}

const META_KEY: &str = "cadm";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            predictor: self.predictor.clone(),
            schedule: self.schedule,
            train: self.train.clone(),
            epochs_done: self.epochs_done,
            rng_seed: self.train.seed,
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (format!("param.{k}"), v))
            .chain(self.momentum.iter().map(|(k, v)| (format!("momentum.{k}"), v)))
            .collect();
        let bytes = safetensors::serialize(tensors, Some(HashMap::from([(META_KEY.to_string(), json)])))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (k, v) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            if let Some(n) = k.strip_prefix("param.") {
                params.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("momentum.") {
                momentum.insert(n.to_string(), v);
            } else {
                return Err(bad(format!("unexpected tensor {k}")));
            }
        }
        Ok(Self {
            predictor: meta.predictor,
            schedule: meta.schedule,
            train: meta.train,
            epochs_done: meta.epochs_done,
            params,
            momentum,
        })
    }

    /// Rebuilds the model with the stored weights.
    pub fn model(&self) -> Result<CadmModel> {
        let dtype = self
            .params
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Checkpoint("no parameters".into()))?;
        let model = CadmModel::new(&self.predictor, self.schedule.steps, dtype, 0)?;
        model.params().load(&self.params)?;
        Ok(model)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

pub struct Trainer {
    model: CadmModel,
    schedule_cfg: ScheduleConfig,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    opt: Sgd,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: CadmModel, schedule_cfg: ScheduleConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = schedule_cfg.build()?;
        if schedule.num_steps() != model.num_timesteps() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} timesteps, schedule has {}",
                model.num_timesteps(),
                schedule.num_steps()
            )));
        }
        let opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            model,
            schedule_cfg,
            schedule,
            cfg,
            opt,
            epochs_done: 0,
        })
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.model()?, ckpt.schedule, ckpt.train.clone())?;
        t.opt.set_buffers(ckpt.momentum.clone());
        t.epochs_done = ckpt.epochs_done;
        Ok(t)
    }

    pub fn model(&self) -> &CadmModel {
        &self.model
    }

    pub fn into_model(self) -> CadmModel {
        self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            predictor: self.model.config().clone(),
            schedule: self.schedule_cfg,
            train: self.cfg.clone(),
            epochs_done: self.epochs_done,
            params: self.model.params().snapshot(),
            momentum: self.opt.buffers().clone(),
        }
    }

    /// One pass over `train` followed by validation on `val` (skipped when empty).
    pub fn run_epoch(&mut self, train: &[BitemporalPair], val: &[BitemporalPair]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let epoch = self.epochs_done;
        let lr = self.cfg.lr_at(epoch);
        self.opt.lr = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let dtype = self.model.dtype();
        let mut losses = Vec::new();
        let mut weighted = 0.0;
        for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let pairs: Vec<&BitemporalPair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = TensorBatch::from_pairs(&pairs, dtype)?;
            let mut rng = stream(self.cfg.seed, &[NOISE_STREAM, epoch as u64, bi as u64]);
            let loss = diffusion_loss(&self.model, &batch, &self.schedule, &mut rng)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    loss: value,
                });
            }
            let grads = loss.backward()?;
            self.opt.step(self.model.params().vars(), &grads)?;
            losses.push(value);
            weighted += value * pairs.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;
        self.epochs_done += 1;
        let val_f1 = if val.is_empty() { None } else { Some(self.validate(val)?) };
        Ok(EpochLog {
            epoch: self.epochs_done,
            train_loss,
            train_loss_median: median(&mut losses),
            val_f1,
            lr,
        })
    }

    /// Pooled F1 of single-sample predictions from the short validation chain.
    pub fn validate(&self, val: &[BitemporalPair]) -> Result<f64> {
        let cfg = SamplerConfig {
            steps: self.cfg.val_steps.min(self.schedule.num_steps()),
            ensemble_size: 1,
            threshold: 0.5,
            seed: self.cfg.seed,
            pair_batch: self.cfg.batch_size,
        };
        let pairs: Vec<&BitemporalPair> = val.iter().collect();
        let maps = predict_pairs(&self.model, &self.schedule, &pairs, &cfg, self.model.dtype())?;
        Ok(score(&score_maps(&maps, &pairs)?, Pooling::Micro).f1)
    }

    /// Trains until the configured epoch count, writing a checkpoint and a
    /// log row after every epoch when `out_dir` is given.
    pub fn fit(
        &mut self,
        train: &[BitemporalPair],
        val: &[BitemporalPair],
        out_dir: Option<&Path>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epochs_done < self.cfg.epochs {
            let log = self.run_epoch(train, val)?;
            log::info!(
                "epoch {} loss {:.5} (median {:.5}) val_f1 {:?} lr {:.3e}",
                log.epoch,
                log.train_loss,
                log.train_loss_median,
                log.val_f1,
                log.lr
            );
            if let Some(dir) = out_dir {
                self.checkpoint().save(&checkpoint_path(&dir.join("checkpoints"), log.epoch))?;
                crate::metrics::append_csv(
                    &dir.join("train_log.csv"),
                    &[LogRow {
                        epoch: log.epoch,
                        train_loss: log.train_loss,
                        val_f1: log.val_f1,
                        lr: log.lr,
                    }],
                )?;
            }
            logs.push(log);
        }
        Ok(logs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares analytic gradients of `loss` with central differences on `n`
/// coordinates: a tensor chosen uniformly, then an element within it.
/// Every perturbed value is restored before returning.
pub fn grad_check(
    vars: &BTreeMap<String, Var>,
    loss: impl Fn() -> Result<Tensor>,
    n: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if vars.is_empty() {
        return Err(Error::InvalidArgument("no parameters to check".into()));
    }
    let grads = loss()?.backward()?;
    let names: Vec<&String> = vars.keys().collect();
    let mut rng = stream(seed, &[]);
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = names[rng.random_range(0..names.len())];
        let var = &vars[name];
        let original = var.as_tensor().copy()?;
        let shape = original.shape().clone();
        let dtype = original.dtype();
        let values: Vec<f64> = original.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let index = rng.random_range(0..values.len());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let eval_at = |delta: f64| -> Result<f64> {
            let mut v = values.clone();
            v[index] += delta;
            var.set(&Tensor::from_vec(v, &shape, &Device::Cpu)?.to_dtype(dtype)?)?;
            scalar(&loss()?)
        };
        let plus = eval_at(step);
        let minus = eval_at(-step);
        var.set(&original)?;
        let numeric = (plus? - minus?) / (2.0 * step);
        let rel_err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        entries.push(GradCheckEntry {
            param: name.clone(),
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err })
}

/// Gradient check of the diffusion loss of `model` on one batch with fixed draws.
pub fn grad_check_model(
    model: &CadmModel,
    batch: &TensorBatch,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
    n: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check(model.params().vars(), || loss_from_draws(model, batch, draw, sched), n, step, seed)
}
