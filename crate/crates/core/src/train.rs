//! Optimizer, training loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore, Tensor};
use crate::config::{diff_keys, OptimConfig, RunConfig};
use crate::error::{Error, Result};
use crate::loss::{frame_loss, match_frame, FrameTargets, LossValues};
use crate::model::{image_tensor, LaneModel, QueryPrior};
use crate::runner::{image_size, SequenceRunner};
use crate::synth::FrameSample;
use crate::temporal::FusionVariant;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub t: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg: cfg.clone(),
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate for the next update.
    pub fn lr(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        if w > 0 && self.t < w {
            self.cfg.lr * (self.t + 1) as f64 / w as f64
        } else {
            self.cfg.lr
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.lr();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
                p.data[i] -= lr * (upd + self.cfg.weight_decay * p.data[i]);
            }
        }
        norm
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub total_loss: f64,
    #[serde(rename = "L_curve")]
    pub l_curve: f64,
    #[serde(rename = "L_query")]
    pub l_query: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub config: serde_json::Value,
    pub params: Vec<ParamInfo>,
}

const FORMAT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.bin";
const OPTIM_FILE: &str = "optimizer.bin";
const MANIFEST_FILE: &str = "manifest.json";

/// Config keys that may change when resuming.
const RESUMABLE_KEYS: &[&str] = &[
    "train.max_steps",
    "train.epochs",
    "train.checkpoint_every",
    "eval.",
    "out_dir",
];

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::CheckpointMismatch(vec![format!(
            "{} is truncated",
            path.display()
        )]));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, store: &ParamStore, opt: &AdamW, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_f64s(&dir.join(PARAMS_FILE), store.iter().flat_map(|(_, t)| t.data.clone()))?;
    let optim = std::iter::once(opt.t as f64)
        .chain(opt.m.iter().flatten().copied())
        .chain(opt.v.iter().flatten().copied());
    write_f64s(&dir.join(OPTIM_FILE), optim)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step,
        config: cfg.to_json(),
        params: store
            .iter()
            .map(|(n, t)| ParamInfo {
                name: n.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(vec![format!(
            "format_version {} (expected {FORMAT_VERSION})",
            m.format_version
        )]));
    }
    Ok(m)
}

/// The configuration a checkpoint was trained with.
pub fn checkpoint_config(dir: &Path) -> Result<RunConfig> {
    let m = read_manifest(dir)?;
    let cfg: RunConfig = serde_path_to_error::deserialize(m.config).map_err(|e| Error::Schema {
        path: format!("{}:config.{}", dir.join(MANIFEST_FILE).display(), e.path()),
        message: e.inner().to_string(),
    })?;
    Ok(cfg)
}

/// Loads parameter values into `store`, whose layout must match the checkpoint.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let m = read_manifest(dir)?;
    let mut bad: Vec<String> = Vec::new();
    if m.params.len() != store.len() {
        bad.push(format!(
            "checkpoint has {} parameters, model has {}",
            m.params.len(),
            store.len()
        ));
    }
    for (info, (name, t)) in m.params.iter().zip(store.iter()) {
        if info.name != name || info.shape != t.shape {
            bad.push(format!("{} {:?} vs {} {:?}", info.name, info.shape, name, t.shape));
        }
    }
    if !bad.is_empty() {
        return Err(Error::CheckpointMismatch(bad));
    }
    let values = read_f64s(&dir.join(PARAMS_FILE))?;
    if values.len() != store.num_scalars() {
        return Err(Error::CheckpointMismatch(vec![format!(
            "{} holds {} values, model needs {}",
            PARAMS_FILE,
            values.len(),
            store.num_scalars()
        )]));
    }
    let mut off = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let n = t.data.len();
        t.data.copy_from_slice(&values[off..off + n]);
        off += n;
    }
    Ok(m)
}

fn load_optimizer(dir: &Path, opt: &mut AdamW) -> Result<()> {
    let values = read_f64s(&dir.join(OPTIM_FILE))?;
    let total: usize = opt.m.iter().map(Vec::len).sum();
    if values.len() != 1 + 2 * total {
        return Err(Error::CheckpointMismatch(vec![format!(
            "{OPTIM_FILE} does not match the parameter layout"
        )]));
    }
    opt.t = values[0] as usize;
    let mut off = 1;
    for buf in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        let n = buf.len();
        buf.copy_from_slice(&values[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Checks that `cfg` builds the same network as the checkpoint's configuration.
pub fn check_model_compatible(saved: &RunConfig, cfg: &RunConfig) -> Result<()> {
    let a = saved.to_json();
    let b = cfg.to_json();
    let keys: Vec<String> = diff_keys(&a["model"], &b["model"], "model")
        .into_iter()
        .chain(diff_keys(
            &a["data"]["scene"]["world"],
            &b["data"]["scene"]["world"],
            "data.scene.world",
        ))
        .collect();
    if keys.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(keys))
    }
}

/// Builds the model described by `cfg` for images of `size`, optionally loading a checkpoint.
pub fn build_model(
    cfg: &RunConfig,
    size: (usize, usize),
    checkpoint: Option<&Path>,
) -> Result<(LaneModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = LaneModel::new(cfg.model.clone(), cfg.data.scene.world, size, &mut store, cfg.seed)?;
    if let Some(dir) = checkpoint {
        check_model_compatible(&checkpoint_config(dir)?, cfg)?;
        load_params(dir, &mut store)?;
    }
    Ok((model, store))
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: LaneModel,
    pub store: ParamStore,
    pub opt: AdamW,
    /// Completed optimizer steps.
    pub step: usize,
    data: Vec<Vec<FrameSample>>,
    /// `(sequence, frame)` of every training sample.
    samples: Vec<(usize, usize)>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: Vec<Vec<FrameSample>>) -> Result<Self> {
        cfg.validate()?;
        let size = image_size(&data)?;
        let (model, store) = build_model(&cfg, size, None)?;
        let opt = AdamW::new(&store, &cfg.optim);
        let samples = data
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |f| (s, f)))
            .collect();
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            step: 0,
            data,
            samples,
        })
    }

    /// Continues from a checkpoint. Only step limits, checkpoint period and evaluation
    /// settings may differ from the checkpoint's configuration.
    pub fn resume(cfg: RunConfig, data: Vec<Vec<FrameSample>>, dir: &Path) -> Result<Self> {
        let saved = checkpoint_config(dir)?;
        let changed: Vec<String> = diff_keys(&saved.to_json(), &cfg.to_json(), "")
            .into_iter()
            .filter(|k| {
                !RESUMABLE_KEYS
                    .iter()
                    .any(|r| k == r || (r.ends_with('.') && k.starts_with(r)))
            })
            .collect();
        if !changed.is_empty() {
            return Err(Error::CheckpointMismatch(changed));
        }
        let mut t = Self::new(cfg, data)?;
        let m = load_params(dir, &mut t.store)?;
        load_optimizer(dir, &mut t.opt)?;
        t.step = m.step;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg
            .train
            .max_steps
            .unwrap_or(self.cfg.train.epochs * self.steps_per_epoch())
    }

    /// Samples of the batch at global step `step`; the order of each epoch depends only
    /// on the seed and the epoch number.
    pub fn batch(&self, step: usize) -> Vec<(usize, usize)> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let mut order = self.samples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let bs = self.cfg.train.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    /// Prior for a training frame, built by running the preceding frames of its clip.
    fn clip_prior(&self, seq: usize, frame: usize) -> Result<QueryPrior> {
        let frames = &self.data[seq];
        if self.cfg.fusion.variant == FusionVariant::None || self.cfg.train.clip_len < 2 {
            return Ok(QueryPrior::default());
        }
        let mut runner = SequenceRunner::new(&self.model, &self.store, &self.cfg.fusion);
        for f in &frames[(frame + 1).saturating_sub(self.cfg.train.clip_len)..frame] {
            runner.step(f)?;
        }
        Ok(runner.prior(&frames[frame]))
    }

    /// Loss of a batch and its gradients, without updating anything.
    pub fn batch_loss(&self, batch: &[(usize, usize)]) -> Result<(LossValues, Gradients)> {
        let priors = batch
            .iter()
            .map(|&(s, f)| self.clip_prior(s, f))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&self.store);
        let mut values = LossValues::default();
        let mut total = g.constant(Tensor::scalar(0.0));
        for (&(s, f), prior) in batch.iter().zip(&priors) {
            let frame = &self.data[s][f];
            let out = self
                .model
                .forward(&mut g, &image_tensor(&frame.image), &frame.rig, prior)?;
            let targets = FrameTargets::new(&self.model, frame);
            let m = match_frame(&g, &self.model, &out, &targets, &self.cfg.loss)?;
            let terms = frame_loss(&mut g, &out, &targets, &m, &self.cfg.loss)?;
            values.add(&LossValues::read(&g, &terms));
            total = g.add(total, terms.total);
        }
        let k = 1.0 / batch.len() as f64;
        let loss = g.scale(total, k);
        values.scale(k);
        Ok((values, g.backward(loss)))
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let batch = self.batch(self.step);
        let (values, grads) = self.batch_loss(&batch)?;
        let lr = self.opt.lr();
        let grad_norm = self.opt.step(&mut self.store, &grads);
        let epoch = self.step / self.steps_per_epoch();
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch,
            total_loss: values.total,
            l_curve: values.curve,
            l_query: values.query,
            l_seg: values.seg,
            grad_norm,
            lr,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.cfg, &self.store, &self.opt, self.step)
    }

    pub fn data(&self) -> &[Vec<FrameSample>] {
        &self.data
    }

    /// Trains to the configured step count, appending to `out/train_log.jsonl` and writing
    /// checkpoints under `out/checkpoints/`. Returns the final checkpoint directory.
    pub fn run(&mut self, out: &Path, mut on_step: impl FnMut(&StepLog)) -> Result<PathBuf> {
        fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
        let log_path = out.join("train_log.jsonl");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
        let ckpt_root = out.join("checkpoints");
        let total = self.total_steps();
        while self.step < total {
            let entry = self.train_step()?;
            if !entry.total_loss.is_finite() {
                return Err(Error::Config(format!("loss became non-finite at step {}", entry.step)));
            }
            writeln!(log, "{}", serde_json::to_string(&entry)?)
                .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
            on_step(&entry);
            let every = self.cfg.train.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                self.save(&ckpt_root.join(format!("step_{:06}", self.step)))?;
            }
        }
        let last = ckpt_root.join("final");
        self.save(&last)?;
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![2], vec![1.0, -1.0]));
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        let grads = Gradients {
            grads: vec![Some(Tensor::new(vec![2], vec![3.0, -0.5]))],
        };
        opt.step(&mut store, &grads);
        let p = &store.get(id).data;
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p[0] - (1.0 - 2e-4)).abs() < 1e-10);
        assert!((p[1] - (-1.0 + 2e-4)).abs() < 1e-10);
    }

    #[test]
    fn decoupled_decay_without_gradient_signal() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![2.0]));
        let mut opt = AdamW::new(&store, &OptimConfig::default());
        let grads = Gradients {
            grads: vec![Some(Tensor::new(vec![1], vec![0.0]))],
        };
        opt.step(&mut store, &grads);
        assert!((store.get(id).data[0] - 2.0 * (1.0 - 2e-4 * 1e-4)).abs() < 1e-15);
    }
}
