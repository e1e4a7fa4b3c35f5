//! Mini-batch training with Adam and an initial encoder freeze.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::gradcheck::accumulate;
use super::params::{is_encoder, Params};
use super::MetricModel;
use crate::error::{io_err, Error, Result};
use crate::mining::PairRecord;
use crate::stats::{pearson, spearman};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: usize,
    /// 1-based epoch.
    pub epoch: usize,
    pub mse: f64,
    pub encoder_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub dev_pearson: Option<f64>,
    pub dev_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub steps_per_epoch: usize,
    pub freeze_steps: usize,
    m: Params,
    v: Params,
    head_t: i32,
    encoder_t: i32,
    pub history: Vec<LogRecord>,
}

impl TrainState {
    fn new(cfg: &ModelConfig, n_train: usize) -> Self {
        let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
        Self {
            step: 0,
            epoch: 0,
            steps_per_epoch,
            freeze_steps: (cfg.freeze_frac * steps_per_epoch as f64).floor() as usize,
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            head_t: 0,
            encoder_t: 0,
            history: Vec::new(),
        }
    }

    /// Whether the encoder is frozen for the 0-based step `step_in_epoch`
    /// of 0-based epoch `epoch`.
    pub fn encoder_frozen(&self, epoch: usize, step_in_epoch: usize) -> bool {
        epoch == 0 && step_in_epoch < self.freeze_steps
    }

    fn adam(&mut self, params: &mut Params, grads: &Params, lr: f64, update_encoder: bool) {
        self.head_t += 1;
        if update_encoder {
            self.encoder_t += 1;
        }
        let bc = |t: i32| (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let (h1, h2) = bc(self.head_t);
        let (e1, e2) = bc(self.encoder_t.max(1));
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            let enc = is_encoder(&p.name);
            if enc && !update_encoder {
                continue;
            }
            let (c1, c2) = if enc { (e1, e2) } else { (h1, h2) };
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

pub struct TrainOutcome {
    pub model: MetricModel,
    /// Checkpoint with the highest dev Pearson, when a dev set was given.
    pub best: Option<MetricModel>,
    pub best_dev_pearson: Option<f64>,
    pub state: TrainState,
}

fn check_pairs(pairs: &[PairRecord], k: u32) -> Result<()> {
    for p in pairs {
        let t = p.target.ok_or_else(|| Error::MissingTarget(p.pair_id.clone()))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("pair `{}` has target {t} outside [0, 1]", p.pair_id)));
        }
        for u in [&p.h_units, &p.r_units] {
            if !u.is_deduplicated() {
                return Err(Error::NotDeduplicated(p.pair_id.clone()));
            }
            if let Some(&unit) = u.units().iter().find(|&&x| x >= k) {
                return Err(Error::UnitOutOfRange { unit, vocab_size: k });
            }
        }
    }
    Ok(())
}

fn dev_scores(model: &MetricModel, dev: &[PairRecord]) -> Result<(Option<f64>, Option<f64>)> {
    let preds = dev.par_iter().map(|p| model.predict(p)).collect::<Result<Vec<_>>>()?;
    let gold: Vec<f64> = dev.iter().map(|p| p.target.unwrap_or(f64::NAN)).collect();
    Ok((pearson(&preds, &gold).ok(), spearman(&preds, &gold).ok()))
}

/// Trains a model from `config` (initialised with `config.seed`).
pub fn train(
    config: &ModelConfig,
    train_pairs: &[PairRecord],
    dev_pairs: Option<&[PairRecord]>,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    train_with(MetricModel::new(config.clone())?, train_pairs, dev_pairs, log, |_, _| {})
}

/// Like [`train`] but starts from `model` and calls `observe` after every step.
pub fn train_with(
    mut model: MetricModel,
    train_pairs: &[PairRecord],
    dev_pairs: Option<&[PairRecord]>,
    mut log: Option<&mut dyn Write>,
    mut observe: impl FnMut(&StepRecord, &MetricModel),
) -> Result<TrainOutcome> {
    let cfg = model.config().clone();
    if train_pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    check_pairs(train_pairs, cfg.vocab_size)?;
    if let Some(dev) = dev_pairs {
        check_pairs(dev, cfg.vocab_size)?;
    }
    let mut state = TrainState::new(&cfg, train_pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut best: Option<(f64, MetricModel)> = None;
    let mut emit = |rec: LogRecord, state: &mut TrainState| -> Result<()> {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(io_err("training log"))?;
        }
        state.history.push(rec);
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        state.epoch = epoch + 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (si, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen = state.encoder_frozen(epoch, si);
            let scale = 1.0 / batch.len() as f64;
            // fixed chunks summed in order: the result does not depend on the thread count
            let partial = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = Params::zeros(&cfg);
                    let mut l = 0.0;
                    for &i in chunk {
                        let p = &train_pairs[i];
                        l += accumulate(&model, p, p.target.unwrap_or_default(), scale, &mut g)?;
                    }
                    Ok((l, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut partial = partial.into_iter();
            let (mut loss, mut grads) = partial.next().expect("non-empty batch");
            for (l, g) in partial {
                loss += l;
                grads.add_scaled(&g, 1.0);
            }
            loss *= scale;
            state.step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(state.step));
            }
            state.adam(&mut model.params, &grads, cfg.lr, !frozen);
            if !model.params.all_finite() {
                return Err(Error::NonFiniteLoss(state.step));
            }
            epoch_loss += loss * batch.len() as f64;
            let rec = StepRecord {
                step: state.step,
                epoch: epoch + 1,
                mse: loss,
                encoder_frozen: frozen,
            };
            observe(&rec, &model);
            emit(LogRecord::Step(rec), &mut state)?;
        }
        let (dev_pearson, dev_spearman) = match dev_pairs {
            Some(dev) if !dev.is_empty() => dev_scores(&model, dev)?,
            _ => (None, None),
        };
        if let Some(r) = dev_pearson {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, model.clone()));
            }
        }
        emit(
            LogRecord::Epoch(EpochRecord {
                epoch: epoch + 1,
                train_mse: epoch_loss / train_pairs.len() as f64,
                dev_pearson,
                dev_spearman,
            }),
            &mut state,
        )?;
    }
    let (best_dev_pearson, best) = match best {
        Some((r, m)) => (Some(r), Some(m)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        best,
        best_dev_pearson,
        state,
    })
}
