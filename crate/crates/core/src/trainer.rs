//! Mini-batch training with Adam, linear warmup and early stopping on dev
//! WER@3.
//!
//! The batch and dropout masks of a step are pure functions of the master
//! seed and the step index, so a run resumed from a [`TrainCheckpoint`]
//! continues exactly as the uninterrupted run would have.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cast, Float};
use crate::decoder::{suggest_sessions, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::wer_at_k;
use crate::model::{Example, Model, ModelState, ParamBlob};
use crate::session::SessionRecord;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between dev evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub patience_steps: usize,
    pub eval_beam_width: usize,
    pub eval_k: usize,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 16,
            max_epochs: 3,
            max_steps: None,
            learning_rate: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            eval_interval: 500,
            patience_steps: 2000,
            eval_beam_width: 8,
            eval_k: 3,
            max_decode_len: 24,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(Error::Config(
                "Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into(),
            ));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.beam().validate()
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig::new(self.eval_beam_width, self.max_decode_len, self.eval_k)
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// splitmix64 finalizer; derives independent seeds from the master seed.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts.iter().chain(std::iter::once(&0x5eed)) {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const SHUFFLE_TAG: u64 = 1;
const DROPOUT_TAG: u64 = 2;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based count of optimizer steps taken.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_wer3: Option<f64>,
}

pub fn log_to_jsonl(log: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub model: ModelState,
    pub adam_m: Vec<ParamBlob>,
    pub adam_v: Vec<ParamBlob>,
    pub step: usize,
    pub best_step: Option<usize>,
    pub best_dev_wer3: Option<f64>,
    pub best_model: Option<ModelState>,
    pub stopped: bool,
    pub log: Vec<StepRecord>,
    /// (step, dev WER@3) of every saved best checkpoint.
    pub saved: Vec<(usize, f64)>,
}

const CHECKPOINT_FORMAT: &str = "meshquery-train";
const CHECKPOINT_VERSION: u32 = 1;

fn to_blobs<F: Float>(names: &[String], arrays: &[Array2<F>]) -> Vec<ParamBlob> {
    names
        .iter()
        .zip(arrays)
        .map(|(name, a)| ParamBlob {
            name: name.clone(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        })
        .collect()
}

fn from_blobs<F: Float>(blobs: &[ParamBlob], like: &[Array2<F>]) -> Result<Vec<Array2<F>>> {
    if blobs.len() != like.len() {
        return Err(Error::Config(
            "optimizer state does not match the model".into(),
        ));
    }
    blobs
        .iter()
        .zip(like)
        .map(|(b, p)| {
            if p.dim() != (b.rows, b.cols) || b.data.len() != b.rows * b.cols {
                return Err(Error::Config(format!(
                    "optimizer state {} has the wrong shape",
                    b.name
                )));
            }
            Ok(Array2::from_shape_fn((b.rows, b.cols), |(i, j)| {
                cast(b.data[i * b.cols + j])
            }))
        })
        .collect()
}

/// Final products of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Float> {
    /// Best model by dev WER@3, or the last model when nothing was evaluated.
    pub model: Model<F>,
    pub log: Vec<StepRecord>,
    pub best_step: Option<usize>,
    pub best_dev_wer3: Option<f64>,
    pub stopped_early: bool,
    pub steps: usize,
    pub saved: Vec<(usize, f64)>,
}

pub struct Trainer<'a, F: Float> {
    config: TrainConfig,
    model: Model<F>,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    step: usize,
    best_step: Option<usize>,
    best_wer: Option<f64>,
    best_model: Option<Model<F>>,
    stopped: bool,
    log: Vec<StepRecord>,
    saved: Vec<(usize, f64)>,
    train: Vec<Example>,
    dev: &'a [SessionRecord],
    vocab: &'a Vocab,
}

impl<'a, F: Float> Trainer<'a, F> {
    pub fn new(
        config: TrainConfig,
        model: Model<F>,
        train: &[SessionRecord],
        dev: &'a [SessionRecord],
        vocab: &'a Vocab,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Precondition("training set is empty".into()));
        }
        let examples = train
            .iter()
            .map(|s| model.example(s, vocab))
            .collect::<Result<Vec<_>>>()?;
        let zeros: Vec<Array2<F>> = model
            .params()
            .iter()
            .map(|p| Array2::zeros(p.dim()))
            .collect();
        Ok(Trainer {
            config,
            m: zeros.clone(),
            v: zeros,
            model,
            step: 0,
            best_step: None,
            best_wer: None,
            best_model: None,
            stopped: false,
            log: Vec::new(),
            saved: Vec::new(),
            train: examples,
            dev,
            vocab,
        })
    }

    pub fn resume(
        checkpoint: &TrainCheckpoint,
        train: &[SessionRecord],
        dev: &'a [SessionRecord],
        vocab: &'a Vocab,
    ) -> Result<Self> {
        if checkpoint.format != CHECKPOINT_FORMAT || checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported training checkpoint {} v{}",
                checkpoint.format, checkpoint.version
            )));
        }
        let model = Model::from_state(&checkpoint.model)?;
        let mut t = Trainer::new(checkpoint.config.clone(), model, train, dev, vocab)?;
        t.m = from_blobs(&checkpoint.adam_m, t.model.params())?;
        t.v = from_blobs(&checkpoint.adam_v, t.model.params())?;
        t.step = checkpoint.step;
        t.best_step = checkpoint.best_step;
        t.best_wer = checkpoint.best_dev_wer3;
        t.best_model = checkpoint
            .best_model
            .as_ref()
            .map(Model::from_state)
            .transpose()?;
        t.stopped = checkpoint.stopped;
        t.log = checkpoint.log.clone();
        t.saved = checkpoint.saved.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.state(),
            adam_m: to_blobs(self.model.param_names(), &self.m),
            adam_v: to_blobs(self.model.param_names(), &self.v),
            step: self.step,
            best_step: self.best_step,
            best_dev_wer3: self.best_wer,
            best_model: self.best_model.as_ref().map(Model::state),
            stopped: self.stopped,
            log: self.log.clone(),
            saved: self.saved.clone(),
        }
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let by_epochs = self.config.max_epochs * self.steps_per_epoch();
        self.config
            .max_steps
            .map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.step >= self.total_steps()
    }

    /// Example indices of the batch taken at 0-based step `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            self.config.seed,
            &[SHUFFLE_TAG, epoch as u64],
        )));
        let start = (step % spe) * self.config.batch_size;
        let end = (start + self.config.batch_size).min(order.len());
        order[start..end].to_vec()
    }

    /// One optimizer step; evaluates on dev when the interval is reached.
    pub fn train_step(&mut self) -> Result<&StepRecord> {
        if self.is_done() {
            return Err(Error::Precondition("training already finished".into()));
        }
        let s = self.step;
        let idx = self.batch_indices(s);
        let batch: Vec<Example> = idx.iter().map(|&i| self.train[i].clone()).collect();
        let seeds: Vec<u64> = (0..batch.len())
            .map(|i| mix_seed(self.config.seed, &[DROPOUT_TAG, s as u64, i as u64]))
            .collect();
        let (loss, mut grads) = self.model.loss_and_grads(&batch, Some(&seeds))?;
        let loss64 = loss.to_f64().unwrap_or(f64::NAN);
        if !loss64.is_finite() {
            return Err(Error::Divergence {
                step: s + 1,
                loss: loss64,
            });
        }
        let norm = grads
            .iter()
            .map(|g| {
                g.iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: s + 1,
                loss: norm,
            });
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let f: F = cast(self.config.grad_clip / norm);
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * f));
        }
        self.adam_update(&grads, s);
        self.step += 1;
        let lr = self.config.learning_rate_at(s);
        self.log.push(StepRecord {
            step: self.step,
            epoch: s / self.steps_per_epoch(),
            loss: loss64,
            lr,
            dev_wer3: None,
        });
        if self.config.eval_interval > 0 && self.step % self.config.eval_interval == 0 {
            self.evaluate_and_track()?;
        }
        Ok(self.log.last().expect("just pushed"))
    }

    fn adam_update(&mut self, grads: &[Array2<F>], s: usize) {
        let c = &self.config;
        let t = (s + 1) as i32;
        let (b1, b2): (F, F) = (cast(c.beta1), cast(c.beta2));
        let one = F::one();
        let bc1: F = cast(1.0 - c.beta1.powi(t));
        let bc2: F = cast(1.0 - c.beta2.powi(t));
        let lr: F = cast(c.learning_rate_at(s));
        let eps: F = cast(c.epsilon);
        for (((p, g), m), v) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }

    /// Mean dev WER@3 of the current model under beam search.
    pub fn dev_wer3(&self) -> Result<Option<f64>> {
        if self.dev.is_empty() {
            return Ok(None);
        }
        let lists = suggest_sessions(&self.model, self.vocab, self.dev, &self.config.beam())?;
        let mut total = 0.0;
        for (s, l) in self.dev.iter().zip(&lists) {
            total += wer_at_k(s.ground_truth()?, &l.texts(), 3)?;
        }
        Ok(Some(total / self.dev.len() as f64))
    }

    fn evaluate_and_track(&mut self) -> Result<()> {
        let Some(wer) = self.dev_wer3()? else {
            return Ok(());
        };
        if let Some(last) = self.log.last_mut() {
            last.dev_wer3 = Some(wer);
        }
        if self.best_wer.is_none_or(|b| wer < b) {
            self.best_wer = Some(wer);
            self.best_step = Some(self.step);
            self.best_model = Some(self.model.clone());
            self.saved.push((self.step, wer));
            log::info!("step {}: dev WER@3 {wer:.4} (new best)", self.step);
        } else {
            let since = self.step - self.best_step.unwrap_or(0);
            log::info!(
                "step {}: dev WER@3 {wer:.4} ({since} steps since best)",
                self.step
            );
            if since >= self.config.patience_steps {
                self.stopped = true;
            }
        }
        Ok(())
    }

    /// Trains until `until` steps have been taken (or the run ends).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while !self.is_done() && self.step < until {
            self.train_step()?;
        }
        Ok(())
    }

    /// Runs to completion, evaluating once more at the end if the last step
    /// was not evaluated.
    pub fn finish(mut self) -> Result<TrainOutcome<F>> {
        self.run_until(usize::MAX)?;
        let evaluated = self.log.last().is_none_or(|r| r.dev_wer3.is_some());
        if !self.stopped && !evaluated {
            self.evaluate_and_track()?;
        }
        Ok(TrainOutcome {
            model: self.best_model.unwrap_or(self.model),
            log: self.log,
            best_step: self.best_step,
            best_dev_wer3: self.best_wer,
            stopped_early: self.stopped,
            steps: self.step,
            saved: self.saved,
        })
    }
}

/// Trains `model` on `train`, early-stopping on dev WER@3.
pub fn train<F: Float>(
    config: TrainConfig,
    model: Model<F>,
    train: &[SessionRecord],
    dev: &[SessionRecord],
    vocab: &Vocab,
) -> Result<TrainOutcome<F>> {
    Trainer::new(config, model, train, dev, vocab)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_constant() {
        let c = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| c.learning_rate_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn seeds_differ_by_part() {
        let a = mix_seed(7, &[1, 0]);
        assert_eq!(a, mix_seed(7, &[1, 0]));
        assert_ne!(a, mix_seed(7, &[1, 1]));
        assert_ne!(a, mix_seed(8, &[1, 0]));
        assert_ne!(mix_seed(7, &[1, 0]), mix_seed(7, &[0, 1]));
    }

    #[test]
    fn bad_config_rejected() {
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..Default::default()
            },
            TrainConfig {
                eval_k: 9,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(
                matches!(
                    c.validate(),
                    Err(Error::Config(_)) | Err(Error::Precondition(_))
                ),
                "{c:?}"
            );
        }
    }
}
