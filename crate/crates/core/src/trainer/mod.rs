//! Adam training loops for pretraining on shards and NMT fine-tuning.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    backward, forward, label_smoothed_loss, Batch, Checkpoint, Example, ModelConfig, ModelError, ModelParams, RunMode,
    Scalar,
};
use crate::samplegen::PretrainSample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no pretraining samples")]
    EmptyShards,
    #[error("no usable sentence pairs")]
    EmptyCorpus,
    #[error("loss became {loss} at step {step}; try a lower learning rate")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("checkpoint architecture does not match the model config: {0}")]
    ConfigMismatch(String),
    #[error("parameter and gradient shapes differ at tensor {0}")]
    ShapeMismatch(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between evaluations; 0 evaluates once per epoch.
    pub eval_interval: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 50,
            max_steps: None,
            patience: 5,
            eval_interval: 0,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    let gs = grads.tensors();
    {
        let ps = params.tensors();
        let ms = state.m.tensors();
        if ps.len() != gs.len() || ms.len() != gs.len() {
            return Err(TrainError::ShapeMismatch(ps.len().min(gs.len())));
        }
        for (i, ((p, g), m)) in ps.iter().zip(&gs).zip(&ms).enumerate() {
            if p.shape != g.shape || p.shape != m.shape {
                return Err(TrainError::ShapeMismatch(i));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = T::c(1.0 / (1.0 - beta1.powi(t)));
    let c2 = T::c(1.0 / (1.0 - beta2.powi(t)));
    let (b1, b2) = (T::c(beta1), T::c(beta2));
    let (lr, eps) = (T::c(lr), T::c(eps));
    let one = T::one();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(gs)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            let mh = m.data[i] * c1;
            let vh = v.data[i] * c2;
            p.data[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Teacher-forced statistics over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub token_accuracy: f64,
    pub perplexity: f64,
    pub n_tokens: usize,
}

const EVAL_BATCH: usize = 64;

pub fn evaluate_examples<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    examples: &[Example],
    use_soft: bool,
) -> Result<EvalStats, ModelError> {
    let (mut nll, mut correct, mut n) = (0.0, 0usize, 0usize);
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::new(&refs);
        let cache = forward(params, cfg, &batch, RunMode::eval(use_soft))?;
        match label_smoothed_loss(cache.logits(), cfg.vocab_size, &batch.targets, 0.0) {
            Ok(out) => {
                nll += out.nll_sum;
                correct += out.correct;
                n += out.n_tokens;
            }
            Err(ModelError::AllPositionsPadded) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(ModelError::AllPositionsPadded);
    }
    Ok(EvalStats {
        token_accuracy: correct as f64 / n as f64,
        perplexity: (nll / n as f64).exp(),
        n_tokens: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
    },
    Eval {
        step: usize,
        epoch: usize,
        token_accuracy: f64,
        perplexity: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        dev_bleu: Option<f64>,
        improved: bool,
    },
    Stop {
        step: usize,
        epochs: usize,
        reason: StopReason,
        best_accuracy: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn evals(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Eval { .. }))
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Stop { reason, .. } => Some(*reason),
            _ => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best evaluation (or the final ones if none ran).
    pub params: ModelParams<f32>,
    pub log: TrainLog,
    pub best_accuracy: Option<f64>,
    pub steps: usize,
}

/// Extra metric computed on a parameter snapshot at every evaluation.
pub type DevMetric<'a> = &'a mut dyn FnMut(&ModelParams<f32>) -> f64;

#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut params: ModelParams<f32>,
    cfg: &ModelConfig,
    train: &[Example],
    valid: &[Example],
    tcfg: &TrainConfig,
    use_soft: bool,
    shuffle: bool,
    mut dev_metric: Option<DevMetric<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let mut state = AdamState::<f32>::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_d50f);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let valid = if valid.is_empty() { train } else { valid };
    let mut reason = StopReason::MaxEpochs;
    let mut epochs_done = 0;

    let mut evaluate = |params: &ModelParams<f32>,
                        step: usize,
                        epoch: usize,
                        log: &mut TrainLog,
                        best: &mut Option<(f64, ModelParams<f32>)>,
                        stale: &mut usize|
     -> Result<(), TrainError> {
        let stats = evaluate_examples(params, cfg, valid, use_soft)?;
        let dev_bleu = dev_metric.as_mut().map(|f| f(params));
        let improved = best.as_ref().is_none_or(|(acc, _)| stats.token_accuracy > *acc);
        if improved {
            *best = Some((stats.token_accuracy, params.clone()));
            *stale = 0;
        } else {
            *stale += 1;
        }
        log.records.push(LogRecord::Eval {
            step,
            epoch,
            token_accuracy: stats.token_accuracy,
            perplexity: stats.perplexity,
            dev_bleu,
            improved,
        });
        Ok(())
    };

    'outer: for epoch in 0..tcfg.max_epochs {
        if shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(tcfg.batch_size) {
            if tcfg.max_steps.is_some_and(|m| step >= m) {
                reason = StopReason::MaxSteps;
                break 'outer;
            }
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&refs);
            let mode = if cfg.dropout > 0.0 {
                RunMode::train(use_soft, &mut drop_rng)
            } else {
                RunMode::eval(use_soft)
            };
            let cache = forward(&params, cfg, &batch, mode)?;
            let out = match label_smoothed_loss(cache.logits(), cfg.vocab_size, &batch.targets, cfg.label_smoothing) {
                Ok(o) => o,
                Err(ModelError::AllPositionsPadded) => continue,
                Err(e) => return Err(e.into()),
            };
            if !out.loss.is_finite() {
                return Err(TrainError::DivergedLoss { step, loss: out.loss });
            }
            let grads = backward(&params, cfg, &batch, &cache, &out.dlogits, use_soft);
            adam_step(
                &mut params,
                &grads,
                &mut state,
                tcfg.learning_rate,
                tcfg.beta1,
                tcfg.beta2,
                tcfg.adam_eps,
            )?;
            if !params.all_finite() {
                return Err(TrainError::DivergedLoss { step, loss: f64::NAN });
            }
            step += 1;
            log.records.push(LogRecord::Step {
                step,
                epoch,
                loss: out.loss,
            });
            if tcfg.eval_interval > 0 && step.is_multiple_of(tcfg.eval_interval) {
                evaluate(&params, step, epoch, &mut log, &mut best, &mut stale)?;
                if stale >= tcfg.patience {
                    reason = StopReason::EarlyStopping;
                    epochs_done = epoch + 1;
                    break 'outer;
                }
            }
        }
        epochs_done = epoch + 1;
        if tcfg.eval_interval == 0 {
            evaluate(&params, step, epoch, &mut log, &mut best, &mut stale)?;
            if stale >= tcfg.patience {
                reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let best_accuracy = best.as_ref().map(|(a, _)| *a);
    log.records.push(LogRecord::Stop {
        step,
        epochs: epochs_done,
        reason,
        best_accuracy,
    });
    Ok(TrainOutcome {
        params: best.map(|(_, p)| p).unwrap_or(params),
        log,
        best_accuracy,
        steps: step,
    })
}

/// Splits off the last `fraction` of `items` (at least one item when
/// `fraction > 0` and more than one item is available) for validation.
pub fn split_validation<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let mut n_val = (items.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && items.len() > 1 {
        n_val = n_val.max(1);
    }
    let n_val = n_val.min(items.len().saturating_sub(1));
    let cut = items.len() - n_val;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Multi-objective pretraining with soft positions enabled. Samples are
/// consumed in the given (already shuffled) order every epoch.
pub fn pretrain(
    train: &[PretrainSample],
    valid: &[PretrainSample],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init_seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyShards);
    }
    let train: Vec<Example> = train.iter().map(Example::from).collect();
    let valid: Vec<Example> = valid.iter().map(Example::from).collect();
    let params = ModelParams::init(cfg, init_seed);
    train_loop(params, cfg, &train, &valid, tcfg, true, false, None)
}

/// Tokenized sentence pairs for fine-tuning.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NmtData {
    pub src_type: u32,
    pub tgt_type: u32,
    pub train: Vec<(Vec<u32>, Vec<u32>)>,
    pub valid: Vec<(Vec<u32>, Vec<u32>)>,
}

impl NmtData {
    /// Pairs that fit `max_len` after adding `[bos]`/`[eos]`, as examples.
    pub fn examples(&self, pairs: &[(Vec<u32>, Vec<u32>)], max_len: usize) -> Vec<Example> {
        pairs
            .iter()
            .filter(|(s, t)| s.len() + 2 <= max_len && t.len() < max_len && !t.is_empty())
            .map(|(s, t)| Example::translation(s, self.src_type, t, self.tgt_type))
            .collect()
    }
}

/// NMT fine-tuning. With a checkpoint every tensor is copied from it
/// (the soft table stays but is unused); otherwise parameters are freshly
/// initialized from `tcfg.seed`.
pub fn finetune(
    init: Option<&Checkpoint>,
    data: &NmtData,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    dev_metric: Option<DevMetric<'_>>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    tcfg.validate()?;
    let params = match init {
        Some(ck) => {
            if !ck.config.same_shapes(cfg) {
                return Err(TrainError::ConfigMismatch(format!(
                    "checkpoint has d_model={} layers={}/{} vocab={} types={}, config has d_model={} layers={}/{} vocab={} types={}",
                    ck.config.d_model,
                    ck.config.enc_layers,
                    ck.config.dec_layers,
                    ck.config.vocab_size,
                    ck.config.n_types,
                    cfg.d_model,
                    cfg.enc_layers,
                    cfg.dec_layers,
                    cfg.vocab_size,
                    cfg.n_types
                )));
            }
            ck.params.clone()
        }
        None => ModelParams::init(cfg, tcfg.seed),
    };
    let train = data.examples(&data.train, cfg.max_len);
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let valid = data.examples(&data.valid, cfg.max_len);
    train_loop(params, cfg, &train, &valid, tcfg, false, true, dev_metric)
}
