//! Episodic training: loss assembly, Adam over episode batches, early
//! stopping on validation accuracy and checkpointing.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBuffer, ParameterStore, ParamsFile, Tape, Tensor, Var};
use crate::embedder::EmbedderConfig;
use crate::episodes::{episode_at, ClassSplit, Episode, EpisodeCounts, EpisodeSpec, Phase};
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::model::{accuracy, forward_episode, EpisodeOutput, ForwardOptions, ModelConfig, Variant};
use crate::parallel::ordered_map;
use crate::proto::Metric;
use crate::rng::derive_key;

pub const CHECKPOINT_FORMAT: &str = "protoglyph.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,seconds";

const TRAIN_KEY: u64 = 0x74_7261_696e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_episodes: usize,
    pub lambda_mixup: f64,
    pub lambda_reg: f64,
    pub variant: Variant,
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    pub spec: EpisodeSpec,
    pub counts: EpisodeCounts,
    pub embedder: EmbedderConfig,
    pub metric: Metric,
    pub alpha_init: f64,
    pub gamma0_init: f64,
    pub beta0_init: f64,
    /// Threads per batch; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_episodes: 32,
            lambda_mixup: 0.1,
            lambda_reg: 0.1,
            variant: Variant::PnTaeMu,
            epochs_max: 100,
            patience: 30,
            seed: 0,
            spec: EpisodeSpec {
                n_way: 2,
                k_shot: 5,
                n_query: 15,
                seed: 0,
            },
            counts: EpisodeCounts::default(),
            embedder: EmbedderConfig::default(),
            metric: Metric::SquaredL2,
            alpha_init: 7.5,
            gamma0_init: 0.0,
            beta0_init: 1.0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        for (name, v) in [("lambda_mixup", self.lambda_mixup), ("lambda_reg", self.lambda_reg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.counts.train == 0 || self.counts.val == 0 {
            return Err(Error::Config("train and val episode counts must be positive".into()));
        }
        self.spec.validate()?;
        self.embedder.validate()
    }

    pub fn model_config(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            embedder: self.embedder,
            variant: self.variant,
            metric: self.metric,
            alpha_init: self.alpha_init,
            gamma0_init: self.gamma0_init,
            beta0_init: self.beta0_init,
        }
    }
}

/// `NLL + λ_mixup·L_MU + λ_reg·penalty`, with only the terms the variant
/// enables.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &TrainConfig,
    model: &ModelConfig,
    dataset: &GraphDataset,
    episode: &Episode,
    opts: ForwardOptions<'_>,
) -> Result<(Var, EpisodeOutput)> {
    let out = forward_episode(tape, store, model, dataset, episode, opts)?;
    let loss = combine_loss(tape, &out, cfg.lambda_mixup, cfg.lambda_reg)?;
    Ok((loss, out))
}

pub fn combine_loss(tape: &mut Tape, out: &EpisodeOutput, lambda_mixup: f64, lambda_reg: f64) -> Result<Var> {
    let mut loss = out.nll;
    if let Some(mu) = out.mixup {
        let t = tape.scale(mu, lambda_mixup)?;
        loss = tape.add(loss, t)?;
    }
    if let Some(p) = out.penalty {
        let t = tape.scale(p, lambda_reg)?;
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let t = store.value(id);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update from `grads`.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.value_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= upd;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam: Adam,
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_since_best: usize,
    pub best_params: Option<ParameterStore>,
    pub root_key: u64,
}

impl TrainState {
    pub fn new(params: ParameterStore, seed: u64) -> Self {
        TrainState {
            adam: Adam::new(&params),
            params,
            epoch: 0,
            best_val_accuracy: f64::NEG_INFINITY,
            epochs_since_best: 0,
            best_params: None,
            root_key: seed,
        }
    }

    pub fn init(cfg: &TrainConfig, d_in: usize) -> Result<Self> {
        let params = cfg.model_config(d_in).init_params(cfg.seed)?;
        Ok(TrainState::new(params, cfg.seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc, self.seconds
        )
    }
}

struct EpisodeStep {
    grads: GradBuffer,
    loss: f64,
    acc: f64,
}

fn episode_step(
    state: &TrainState,
    cfg: &TrainConfig,
    model: &ModelConfig,
    dataset: &GraphDataset,
    split: &ClassSplit,
    epoch: u64,
    index: u64,
) -> Result<EpisodeStep> {
    let tag = |e: Error| match e {
        Error::NumericFault(m) => Error::NumericFault(format!("train episode (epoch {epoch}, index {index}): {m}")),
        other => other,
    };
    let ep = episode_at(split, Phase::Train, &cfg.spec, epoch, index)?;
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        train: true,
        key: derive_key(state.root_key, &[TRAIN_KEY, epoch, index]),
        mixup_plan: None,
        mixup_targets: None,
    };
    let (loss, out) = total_loss(&mut tape, &state.params, cfg, model, dataset, &ep, opts).map_err(tag)?;
    let l = tape.value(loss).item();
    if !l.is_finite() {
        return Err(tag(Error::NumericFault(format!("loss is {l}"))));
    }
    let acc = accuracy(tape.value(out.log_probs), &ep.query_labels);
    let mut grads = GradBuffer::zeros_like(&state.params);
    tape.backward_into(loss, &mut grads).map_err(tag)?;
    Ok(EpisodeStep { grads, loss: l, acc })
}

/// One pass over the train episode stream. Each batch's gradient is the
/// mean of its episodes' gradients, reduced in episode order.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &GraphDataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let model = cfg.model_config(dataset.d_in);
    let epoch = state.epoch as u64;
    let n = cfg.counts.train;
    let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + cfg.batch_episodes).min(n);
        let st: &TrainState = state;
        let steps = ordered_map(end - start, cfg.workers, |i| {
            episode_step(st, cfg, &model, dataset, split, epoch, (start + i) as u64)
        })?;
        let mut total = GradBuffer::zeros_like(&state.params);
        for s in &steps {
            total.add_assign(&s.grads);
            loss_sum += s.loss;
            acc_sum += s.acc;
        }
        total.scale(1.0 / steps.len() as f64);
        if !total.is_finite() {
            return Err(Error::NumericFault(format!(
                "non-finite gradient in batch starting at episode {start} of epoch {epoch}"
            )));
        }
        state.adam.update(&mut state.params, &total, cfg.lr);
        start = end;
    }
    Ok((loss_sum / n as f64, acc_sum / n as f64))
}

/// Accuracy of each of `n` episodes of `phase`, sampled at `epoch`, with
/// dropout and MixUp disabled.
#[allow(clippy::too_many_arguments)]
pub fn episode_accuracies(
    params: &ParameterStore,
    model: &ModelConfig,
    dataset: &GraphDataset,
    split: &ClassSplit,
    phase: Phase,
    spec: &EpisodeSpec,
    epoch: u64,
    n: usize,
    workers: usize,
) -> Result<Vec<f64>> {
    ordered_map(n, workers, |i| {
        let ep = episode_at(split, phase, spec, epoch, i as u64)?;
        let mut tape = Tape::new();
        let out = forward_episode(&mut tape, params, model, dataset, &ep, ForwardOptions::default())?;
        Ok(accuracy(tape.value(out.log_probs), &ep.query_labels))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Records `val_accuracy`; returns whether it improved on the best so far
/// and whether training should stop.
pub fn early_stopping_check(state: &mut TrainState, val_accuracy: f64, patience: usize) -> (bool, StopDecision) {
    let improved = val_accuracy > state.best_val_accuracy;
    if improved {
        state.best_val_accuracy = val_accuracy;
        state.epochs_since_best = 0;
        state.best_params = Some(state.params.clone());
    } else {
        state.epochs_since_best += 1;
    }
    let decision = if state.epochs_since_best >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    };
    (improved, decision)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointState {
    pub epoch: usize,
    pub step: u64,
    /// `None` before the first validation pass.
    pub best_val_accuracy: Option<f64>,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: CheckpointState,
    pub params: ParamsFile,
}

impl Checkpoint {
    pub fn new(train: &TrainConfig, model: &ModelConfig, state: &TrainState, params: &ParameterStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: *model,
            train: *train,
            state: CheckpointState {
                epoch: state.epoch,
                step: state.adam.step,
                best_val_accuracy: state.best_val_accuracy.is_finite().then_some(state.best_val_accuracy),
                epochs_since_best: state.epochs_since_best,
            },
            params: params.to_checkpoint(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn params(&self) -> Result<ParameterStore> {
        ParameterStore::from_checkpoint(self.params.clone())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_params: ParameterStore,
    pub best_val_accuracy: f64,
    pub state: TrainState,
}

/// Where [`fit`] writes artifacts.
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub dir: PathBuf,
}

impl FitOutputs {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

/// Trains until `epochs_max` or early stop. Validation uses the same
/// `counts.val` episodes every epoch.
pub fn fit(
    dataset: &GraphDataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
    outputs: Option<&FitOutputs>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    cfg.validate()?;
    split.check_capacity(dataset, &cfg.spec)?;
    let model = cfg.model_config(dataset.d_in);
    let mut state = TrainState::init(cfg, dataset.d_in)?;
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        let p = o.metrics_csv();
        std::fs::write(&p, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&p, e))?;
    }
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs_max {
        state.epoch = epoch;
        let t0 = Instant::now();
        let (train_loss, train_acc) = train_epoch(&mut state, dataset, split, cfg)?;
        let accs = episode_accuracies(
            &state.params,
            &model,
            dataset,
            split,
            Phase::Val,
            &cfg.spec,
            0,
            cfg.counts.val,
            cfg.workers,
        )?;
        let val_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        let (improved, decision) = early_stopping_check(&mut state, val_acc, cfg.patience);
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_acc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(o) = outputs {
            let p = o.metrics_csv();
            let mut f = OpenOptions::new().append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&p, e))?;
            if improved {
                Checkpoint::new(cfg, &model, &state, &state.params).save(&o.best_checkpoint())?;
            }
        }
        on_epoch(&m);
        history.push(m);
        if decision == StopDecision::Stop {
            break;
        }
    }
    let best_params = state.best_params.clone().unwrap_or_else(|| state.params.clone());
    Ok(FitOutcome {
        history,
        best_params,
        best_val_accuracy: state.best_val_accuracy,
        state,
    })
}
