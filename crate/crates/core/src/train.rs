//! AdamW with a one-cycle schedule and global-norm clipping, a resumable
//! training loop with checkpoints, and the communication ablation.

use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bpc, evaluate, Batcher, CorpusSplit, Vocab};
use crate::error::{Error, Result};
use crate::graph::CommunicationMode;
use crate::model::{ForwardOptions, InnConfig, InnModel};
use crate::param::Param;
use crate::tensor::{read_archive, write_archive, Element, NamedTensor};

/// Adam moments and hyperparameters, one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Element = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Param<T>], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Decoupled weight decay on `decay` parameters, then a bias-corrected Adam
/// update. Every parameter must hold a gradient.
pub fn adamw_step<T: Element>(params: &[Param<T>], state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let grads = params
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    state.step += 1;
    let (b1, b2) = state.betas;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
        let decay = if p.decay { lr * state.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.tensor.update_data(|theta| {
            for j in 0..theta.len() {
                let gj = g[j].f64();
                let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let mut th = theta[j].f64();
                th -= decay * th;
                th -= lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
                theta[j] = T::of(th);
            }
        });
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(params: &[Param<T>], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.tensor.with_grad_mut(|g| g.iter().map(|x| x.f64() * x.f64()).sum::<f64>()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in params {
            p.tensor.with_grad_mut(|g| g.iter_mut().for_each(|x| *x *= s));
        }
    }
    norm
}

fn default_warmup() -> f64 {
    0.3
}
fn default_div() -> f64 {
    25.0
}
fn default_final_div() -> f64 {
    1e4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_div")]
    pub div_factor: f64,
    #[serde(default = "default_final_div")]
    pub final_div_factor: f64,
}

impl SchedulerConfig {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        SchedulerConfig {
            max_lr,
            total_steps,
            warmup_frac: default_warmup(),
            div_factor: default_div(),
            final_div_factor: default_final_div(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!("warmup_frac {} outside (0, 1)", self.warmup_frac)));
        }
        if !(self.div_factor > 1.0 && self.final_div_factor > 1.0) {
            return Err(Error::Config("div_factor and final_div_factor must exceed 1".into()));
        }
        if self.total_steps == 0 || self.max_lr.is_nan() || self.max_lr < 0.0 {
            return Err(Error::Config("need total_steps >= 1 and max_lr >= 0".into()));
        }
        Ok(())
    }
}

/// Linear ramp from `max_lr / div_factor` to `max_lr` over the warmup
/// fraction, then cosine annealing to `max_lr / final_div_factor`. Steps past
/// the end return the final value.
pub fn onecycle_lr(step: usize, cfg: &SchedulerConfig) -> f64 {
    let start = cfg.max_lr / cfg.div_factor;
    let end = cfg.max_lr / cfg.final_div_factor;
    let total = cfg.total_steps as f64;
    let warm = cfg.warmup_frac * total;
    let s = step as f64;
    if s >= total {
        end
    } else if s <= warm {
        start + (cfg.max_lr - start) * s / warm
    } else {
        let p = (s - warm) / (total - warm);
        end + (cfg.max_lr - end) * 0.5 * (1.0 + (PI * p).cos())
    }
}

fn default_batch() -> usize {
    16
}
fn default_seq() -> usize {
    128
}
fn default_steps() -> usize {
    3000
}
fn default_lr() -> f64 {
    4e-4
}
fn default_wd() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_eval_interval() -> usize {
    250
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seq")]
    pub seq_len: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub max_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_div")]
    pub div_factor: f64,
    #[serde(default = "default_final_div")]
    pub final_div_factor: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Steps between validation passes; 0 disables them.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Caps each validation pass to this many batches.
    #[serde(default)]
    pub eval_batches: Option<usize>,
    /// Steps between checkpoints when an output directory is set.
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
    /// Seeds batch order and dropout.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Stop once full-train-set BPC, checked at each eval, falls below this.
    #[serde(default)]
    pub stop_at_train_bpc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            max_lr: self.max_lr,
            total_steps: self.steps,
            warmup_frac: self.warmup_frac,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }
}

/// Contents of a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: InnConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub train_bpc: f64,
    pub valid_bpc: Option<f64>,
    pub grad_norm: f64,
    /// BPC over the whole training split, when an early-stop target is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_train_bpc: Option<f64>,
}

/// Non-tensor checkpoint contents, stored as a JSON byte tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub config_hash: String,
    pub step: usize,
    pub optimizer_step: u64,
    pub vocab: Vocab,
    pub history: Vec<MetricRecord>,
}

pub const META_TENSOR: &str = "meta.json";

/// A parsed checkpoint archive.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let tensors = read_archive(path)?;
        let meta = tensors
            .iter()
            .find(|t| t.name == META_TENSOR)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {META_TENSOR} entry")))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta.to_bytes()?)?;
        if meta.config_hash != meta.config.model.hash() {
            return Err(Error::Format("stored config hash does not match stored config".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Refuses a checkpoint built for a different architecture unless
    /// `allow_mismatch` is set.
    pub fn check_config(&self, expected: &InnConfig, allow_mismatch: bool) -> Result<()> {
        if !allow_mismatch && self.meta.config_hash != expected.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} differs from expected {}",
                self.meta.config_hash,
                expected.hash()
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<InnModel<f32>> {
        let model = InnModel::new(self.meta.config.model.clone())?;
        model.load_named(&self.tensors)?;
        Ok(model)
    }
}

/// Loads the model stored in a checkpoint file.
pub fn load_model(path: impl AsRef<Path>) -> Result<(InnModel<f32>, Vocab)> {
    let ckpt = Checkpoint::read(path)?;
    Ok((ckpt.model()?, ckpt.meta.vocab))
}

/// Owns the model, optimizer and data order of one training run. Batch
/// selection and dropout are pure functions of the step index, so a run
/// restored from a checkpoint continues exactly as the uninterrupted run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: InnModel<f32>,
    pub params: Vec<Param<f32>>,
    pub optimizer: OptimizerState<f32>,
    pub step: usize,
    pub history: Vec<MetricRecord>,
    pub vocab: Vocab,
    train: Batcher,
    train_ids: Vec<usize>,
    valid_ids: Vec<usize>,
    out_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_train_bpc: f64,
    pub final_valid_bpc: Option<f64>,
    pub stopped_early: bool,
    pub seconds: f64,
}

impl Trainer {
    pub fn new(config: RunConfig, corpus: &CorpusSplit) -> Result<Self> {
        if config.model.vocab_size != corpus.vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} but corpus has {} symbols",
                config.model.vocab_size,
                corpus.vocab.len()
            )));
        }
        config.train.scheduler().validate()?;
        let model = InnModel::new(config.model.clone())?;
        let params = model.params();
        let optimizer = OptimizerState::new(&params, config.train.weight_decay);
        let t = &config.train;
        let train = Batcher::new(corpus.train.clone(), t.batch_size, t.seq_len, t.shuffle.then_some(t.seed))?;
        Ok(Trainer {
            model,
            params,
            optimizer,
            step: 0,
            history: Vec::new(),
            vocab: corpus.vocab.clone(),
            train,
            train_ids: corpus.train.clone(),
            valid_ids: corpus.valid.clone(),
            out_dir: None,
            last_checkpoint: None,
            config,
        })
    }

    /// Restores a run from a checkpoint. The corpus must be the one the run
    /// was started on.
    pub fn resume(path: impl AsRef<Path>, corpus: &CorpusSplit, expected: Option<&InnConfig>, allow_mismatch: bool) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::read(path)?;
        if let Some(cfg) = expected {
            ckpt.check_config(cfg, allow_mismatch)?;
        }
        if ckpt.meta.vocab != corpus.vocab {
            return Err(Error::Input("corpus vocabulary differs from the checkpoint's".into()));
        }
        let mut trainer = Trainer::new(ckpt.meta.config.clone(), corpus)?;
        trainer.model.load_named(&ckpt.tensors)?;
        for (i, p) in trainer.params.iter().enumerate() {
            for (prefix, dst) in [("opt.m.", &mut trainer.optimizer.m[i]), ("opt.v.", &mut trainer.optimizer.v[i])] {
                let key = format!("{prefix}{}", p.name);
                let t = ckpt
                    .tensors
                    .iter()
                    .find(|t| t.name == key)
                    .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                if t.data.len() != dst.len() {
                    return Err(Error::Format(format!("{key} has {} values, expected {}", t.data.len(), dst.len())));
                }
                dst.copy_from_slice(&t.data);
            }
        }
        trainer.optimizer.step = ckpt.meta.optimizer_step;
        trainer.step = ckpt.meta.step;
        trainer.history = ckpt.meta.history;
        trainer.last_checkpoint = Some(path.to_path_buf());
        Ok(trainer)
    }

    /// Directory for `metrics.jsonl`, `summary.csv` and checkpoints.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    pub fn checkpoint_tensors(&self) -> Result<Vec<NamedTensor>> {
        let mut tensors = self.model.named_tensors();
        for (i, p) in self.params.iter().enumerate() {
            let shape = p.tensor.shape().to_vec();
            tensors.push(NamedTensor::new(format!("opt.m.{}", p.name), shape.clone(), self.optimizer.m[i].clone()));
            tensors.push(NamedTensor::new(format!("opt.v.{}", p.name), shape, self.optimizer.v[i].clone()));
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config.model.hash(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            vocab: self.vocab.clone(),
            history: self.history.clone(),
        };
        tensors.push(NamedTensor::from_bytes(META_TENSOR, &serde_json::to_vec(&meta)?));
        Ok(tensors)
    }

    pub fn save_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_archive(path, &self.checkpoint_tensors()?)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// One optimization step; returns its metric record.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        let t = &self.config.train;
        let step = self.step;
        let batch = self.train.batch_at(step);
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(step as u64);
        let out = self
            .model
            .forward(&batch.inputs, batch.batch, batch.len, ForwardOptions::train(&mut rng))?;
        let v = self.model.config.vocab_size;
        let loss = out
            .logits
            .reshape(&[batch.batch * batch.len, v])?
            .cross_entropy(&batch.targets)?;
        let nll = loss.item() as f64;
        if !nll.is_finite() {
            return Err(self.non_finite(step, nll, f64::NAN));
        }
        loss.backward()?;
        drop((loss, out));
        // a non-positive clip norm disables clipping
        let max_norm = if t.clip_norm > 0.0 { t.clip_norm } else { f64::INFINITY };
        let grad_norm = clip_grad_norm(&self.params, max_norm);
        if !grad_norm.is_finite() {
            // stop before the update poisons the parameters
            for p in &self.params {
                p.tensor.zero_grad();
            }
            return Err(self.non_finite(step, nll, grad_norm));
        }
        let lr = onecycle_lr(step, &t.scheduler());
        adamw_step(&self.params, &mut self.optimizer, lr)?;
        for p in &self.params {
            p.tensor.zero_grad();
        }
        self.step += 1;
        Ok(MetricRecord {
            step,
            lr,
            train_bpc: bpc(nll),
            valid_bpc: None,
            grad_norm,
            full_train_bpc: None,
        })
    }

    fn non_finite(&self, step: usize, loss: f64, grad_norm: f64) -> Error {
        Error::NonFinite {
            step,
            loss,
            grad_norm,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    pub fn valid_bpc(&self) -> Result<f64> {
        let t = &self.config.train;
        Ok(evaluate(&self.model, &self.valid_ids, t.batch_size, t.seq_len, t.eval_batches)?.bpc)
    }

    pub fn full_train_bpc(&self) -> Result<f64> {
        let t = &self.config.train;
        Ok(evaluate(&self.model, &self.train_ids, t.batch_size, t.seq_len, None)?.bpc)
    }

    fn append_metrics(&self, rec: &MetricRecord) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join("metrics.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))
    }

    /// Trains until the configured step budget or the early-stop target.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.run_until(self.config.train.steps)
    }

    /// Trains up to (not including) global step `until`.
    pub fn run_until(&mut self, until: usize) -> Result<RunSummary> {
        let started = Instant::now();
        let until = until.min(self.config.train.steps);
        let mut stopped_early = false;
        while self.step < until {
            let mut rec = self.train_step()?;
            let t = &self.config.train;
            let done = self.step == t.steps;
            let eval_due = t.eval_interval > 0 && (self.step.is_multiple_of(t.eval_interval) || done);
            if eval_due {
                if !self.valid_ids.is_empty() {
                    rec.valid_bpc = Some(self.valid_bpc()?);
                }
                if let Some(target) = t.stop_at_train_bpc {
                    let full = self.full_train_bpc()?;
                    rec.full_train_bpc = Some(full);
                    stopped_early = full < target;
                }
            }
            self.append_metrics(&rec)?;
            self.history.push(rec);
            let ckpt_due = self.config.train.checkpoint_interval.is_some_and(|k| k > 0 && self.step.is_multiple_of(k));
            if let (true, Some(dir)) = (ckpt_due, self.out_dir.clone()) {
                self.save_checkpoint(dir.join(format!("step{:06}.innt", self.step)))?;
            }
            if stopped_early {
                break;
            }
        }
        let last = self.history.last();
        let summary = RunSummary {
            steps: self.step,
            final_train_bpc: last.map_or(f64::NAN, |r| r.full_train_bpc.unwrap_or(r.train_bpc)),
            final_valid_bpc: self.history.iter().rev().find_map(|r| r.valid_bpc),
            stopped_early,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(dir.join("final.innt"))?;
            write_summary_csv(&dir.join("summary.csv"), &summary)?;
        }
        Ok(summary)
    }
}

fn write_summary_csv(path: &Path, s: &RunSummary) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let body = format!(
        "steps,final_train_bpc,final_valid_bpc,stopped_early,seconds\n{},{:.6},{},{},{:.1}\n",
        s.steps,
        s.final_train_bpc,
        fmt(s.final_valid_bpc),
        s.stopped_early,
        s.seconds
    );
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// One ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Static,
    NoComm,
    MambaStack,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Static, Variant::NoComm, Variant::MambaStack];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "INN Standard (Full)",
            Variant::Static => "Static-Communication",
            Variant::NoComm => "No-Communication",
            Variant::MambaStack => "Mamba Stack (Baseline)",
        }
    }

    pub fn apply(self, base: &InnConfig) -> InnConfig {
        match self {
            Variant::Full => InnConfig {
                comm_mode: CommunicationMode::Learned,
                ..base.clone()
            },
            Variant::Static => InnConfig {
                comm_mode: CommunicationMode::Static,
                ..base.clone()
            },
            Variant::NoComm => InnConfig {
                comm_mode: CommunicationMode::None,
                ..base.clone()
            },
            Variant::MambaStack => base.mamba_stack(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub seeds: Vec<u64>,
    /// NaN marks a seed whose training diverged.
    pub train_bpc: Vec<f64>,
    pub valid_bpc: Vec<f64>,
    pub median_train_bpc: f64,
    pub median_valid_bpc: f64,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

/// Median of the finite values; NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,params,median_train_bpc,median_valid_bpc,diverged,valid_bpc_per_seed\n");
        for r in &self.rows {
            let per_seed: Vec<String> = r.valid_bpc.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!(
                "\"{}\",{},{:.4},{:.4},{},{}\n",
                r.variant,
                r.params,
                r.median_train_bpc,
                r.median_valid_bpc,
                r.diverged,
                per_seed.join(";")
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out =
            String::from("| Variant | Params | Train BPC (median) | Valid BPC (median) | Diverged |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.3} | {:.3} | {}/{} |\n",
                r.variant,
                r.params,
                r.median_train_bpc,
                r.median_valid_bpc,
                r.diverged,
                r.seeds.len()
            ));
        }
        out
    }
}

/// Trains every variant under the same budget for each seed. Divergence
/// (non-finite loss) is recorded in the table rather than aborting the
/// comparison; other errors propagate. `progress` is called after each run.
pub fn run_ablation(
    corpus: &CorpusSplit,
    base: &RunConfig,
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, &Result<RunSummary>),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let model_cfg = variant.apply(&base.model);
        let (mut train_bpc, mut valid_bpc, mut diverged) = (Vec::new(), Vec::new(), 0);
        for &seed in seeds {
            let cfg = RunConfig {
                model: InnConfig {
                    seed,
                    ..model_cfg.clone()
                },
                train: TrainConfig {
                    seed,
                    ..base.train.clone()
                },
            };
            let mut trainer = Trainer::new(cfg, corpus)?;
            let result = trainer.run();
            progress(variant, seed, &result);
            match result {
                Ok(s) => {
                    train_bpc.push(s.final_train_bpc);
                    valid_bpc.push(s.final_valid_bpc.unwrap_or(f64::NAN));
                }
                Err(Error::NonFinite { .. }) => {
                    diverged += 1;
                    train_bpc.push(f64::NAN);
                    valid_bpc.push(f64::NAN);
                }
                Err(e) => return Err(e),
            }
        }
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            params: model_cfg.param_count(),
            seeds: seeds.to_vec(),
            median_train_bpc: median(&train_bpc),
            median_valid_bpc: median(&valid_bpc),
            train_bpc,
            valid_bpc,
            diverged,
        });
    }
    Ok(AblationTable {
        steps: base.train.steps,
        rows,
    })
}

/// Writes `ablation.csv` and `ablation.md` into `dir`.
pub fn write_ablation(table: &AblationTable, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [("ablation.csv", table.to_csv()), ("ablation.md", table.to_markdown())] {
        let path = dir.join(name);
        let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub max_lr: f64,
    pub weight_decay: f64,
    /// NaN when the run diverged.
    pub final_train_bpc: f64,
    pub final_valid_bpc: f64,
    pub diverged: bool,
}

/// Grid over peak learning rate and weight decay with everything else taken
/// from `base`. Diverged runs are recorded, not fatal.
pub fn run_sweep(
    corpus: &CorpusSplit,
    base: &RunConfig,
    max_lrs: &[f64],
    weight_decays: &[f64],
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &max_lr in max_lrs {
        for &weight_decay in weight_decays {
            let cfg = RunConfig {
                model: base.model.clone(),
                train: TrainConfig {
                    max_lr,
                    weight_decay,
                    ..base.train.clone()
                },
            };
            let row = match Trainer::new(cfg, corpus)?.run() {
                Ok(s) => SweepRow {
                    max_lr,
                    weight_decay,
                    final_train_bpc: s.final_train_bpc,
                    final_valid_bpc: s.final_valid_bpc.unwrap_or(f64::NAN),
                    diverged: false,
                },
                Err(Error::NonFinite { .. }) => SweepRow {
                    max_lr,
                    weight_decay,
                    final_train_bpc: f64::NAN,
                    final_valid_bpc: f64::NAN,
                    diverged: true,
                },
                Err(e) => return Err(e),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("max_lr,weight_decay,final_train_bpc,final_valid_bpc,diverged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{}\n",
            r.max_lr, r.weight_decay, r.final_train_bpc, r.final_valid_bpc, r.diverged
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: &[f64], decay: bool) -> Param<f64> {
        Param::new("w", &Tensor::from_f64(v, &[v.len()]).unwrap().into_param(), decay)
    }

    fn set_grad(p: &Param<f64>, g: &[f64]) {
        p.tensor.zero_grad();
        p.tensor.accumulate_grad(g);
    }

    #[test]
    fn adamw_first_step() {
        let p = param(&[1.0], false);
        let params = vec![p.clone()];
        let mut st = OptimizerState::new(&params, 0.0);
        set_grad(&p, &[1.0]);
        adamw_step(&params, &mut st, 0.1).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        assert!((p.tensor.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_and_decay_only() {
        let p = param(&[2.0, -3.0], false);
        let params = vec![p.clone()];
        let mut st = OptimizerState::new(&params, 0.0);
        set_grad(&p, &[0.0, 0.0]);
        adamw_step(&params, &mut st, 0.1).unwrap();
        assert_eq!(p.tensor.to_vec(), vec![2.0, -3.0]);

        let p = param(&[2.0, -3.0], true);
        let params = vec![p.clone()];
        let mut st = OptimizerState::new(&params, 0.1);
        set_grad(&p, &[0.0, 0.0]);
        adamw_step(&params, &mut st, 0.1).unwrap();
        let got = p.tensor.to_vec();
        assert!((got[0] - 1.98).abs() < 1e-15 && (got[1] + 2.97).abs() < 1e-15);
    }

    #[test]
    fn adamw_missing_grad_names_parameter() {
        let p = Param::new("layers.0.w", &Tensor::<f64>::zeros(&[2]).into_param(), true);
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.1);
        let err = adamw_step(&[p], &mut st, 0.1).unwrap_err().to_string();
        assert!(err.contains("layers.0.w"), "{err}");
    }

    #[test]
    fn onecycle_examples() {
        let cfg = SchedulerConfig::new(4e-4, 1000);
        assert!((onecycle_lr(0, &cfg) - 1.6e-5).abs() < 1e-18);
        assert!((onecycle_lr(300, &cfg) - 4e-4).abs() < 1e-18);
        assert!((onecycle_lr(1000, &cfg) - 4e-8).abs() < 1e-20);
        assert_eq!(onecycle_lr(5000, &cfg), onecycle_lr(1000, &cfg));
        // continuity at the junction: both one-sided neighbours approach max_lr
        let big = SchedulerConfig::new(4e-4, 10_000_000);
        let j = 3_000_000;
        assert!((onecycle_lr(j - 1, &big) - 4e-4).abs() < 1e-9);
        assert!((onecycle_lr(j + 1, &big) - 4e-4).abs() < 1e-9);
    }

    #[test]
    fn clip_examples() {
        let p = param(&[0.0, 0.0], false);
        set_grad(&p, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(std::slice::from_ref(&p), 1.0), 5.0);
        let g = p.tensor.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        set_grad(&p, &[0.3, 0.4]);
        assert!((clip_grad_norm(std::slice::from_ref(&p), 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(p.tensor.grad().unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn median_skips_nan() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, f64::NAN, 1.0]), 2.5);
        assert!(median(&[f64::NAN]).is_nan());
    }

    #[test]
    fn variant_names_and_configs() {
        let base = InnConfig::desk(27);
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        assert_eq!(
            names,
            ["INN Standard (Full)", "Static-Communication", "No-Communication", "Mamba Stack (Baseline)"]
        );
        assert!(Variant::MambaStack.apply(&base).is_mamba_stack());
        assert_eq!(Variant::Static.apply(&base).comm_mode, CommunicationMode::Static);
    }
}
