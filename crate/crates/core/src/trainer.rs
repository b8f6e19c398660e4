//! Mini-batch training with Adam and patience-based early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{loss_from_logits, LossKind};
use crate::tensor::{center_crop, Tensor};
use crate::unet::{Gradients, ModelError, UNetModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub patience: usize,
    /// Relative improvement of the best validation loss that counts as significant.
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-5,
            loss: LossKind::Bce,
            patience: 10,
            min_delta: 1e-3,
            max_epochs: 200,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad("min_delta must be non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }
}

/// One training example: a `[1, H, W]` image in `[0, 1]` and its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, flat in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update over a flat parameter slice. Advances `moments.t`.
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, lr: f64, hp: AdamHyper) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), moments.m.len());
    moments.t += 1;
    let corr = AdamCorrection::new(hp, moments.t);
    adam_update(params, grads, &mut moments.m, &mut moments.v, lr, hp, corr);
}

#[derive(Clone, Copy)]
struct AdamCorrection {
    first: f64,
    second: f64,
}

impl AdamCorrection {
    fn new(hp: AdamHyper, t: u64) -> Self {
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        Self {
            first: 1.0 - hp.beta1.powi(t),
            second: 1.0 - hp.beta2.powi(t),
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    hp: AdamHyper,
    corr: AdamCorrection,
) {
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / corr.first;
        let v_hat = *v / corr.second;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam(AdamMoments),
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &UNetModel) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam(AdamMoments::zeros(model.parameter_count())),
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }

    pub fn step(&mut self, model: &mut UNetModel, grads: &Gradients, lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
                    for (p, d) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
                        *p -= lr * d;
                    }
                    for (p, d) in layer.bias.data_mut().iter_mut().zip(g.bias.data()) {
                        *p -= lr * d;
                    }
                }
            }
            OptimizerState::Adam(moments) => {
                let hp = AdamHyper::default();
                moments.t += 1;
                let corr = AdamCorrection::new(hp, moments.t);
                let mut offset = 0;
                for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
                    for (p, d) in [
                        (layer.weights.data_mut(), g.weights.data()),
                        (layer.bias.data_mut(), g.bias.data()),
                    ] {
                        let end = offset + p.len();
                        adam_update(
                            p,
                            d,
                            &mut moments.m[offset..end],
                            &mut moments.v[offset..end],
                            lr,
                            hp,
                            corr,
                        );
                        offset = end;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: UNetModel,
    pub optimizer: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub best_model: Option<UNetModel>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: UNetModel, config: &TrainConfig) -> Self {
        let optimizer = OptimizerState::new(config.optimizer, &model);
        Self {
            model,
            optimizer,
            epoch: 0,
            best_val_loss: None,
            best_epoch: 0,
            best_model: None,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }

    /// Records the validation loss for the current epoch.
    ///
    /// The best loss always tracks the minimum seen; the patience counter only
    /// resets when the loss beats the previous best by at least `min_delta`
    /// relative to it.
    pub fn record_validation(&mut self, val_loss: f64, min_delta: f64) {
        if let Some(rec) = self.history.last_mut() {
            rec.val_loss = Some(val_loss);
        }
        match self.best_val_loss {
            None => {
                self.best_val_loss = Some(val_loss);
                self.best_epoch = self.epoch;
                self.best_model = Some(self.model.clone());
                self.epochs_since_improvement = 0;
            }
            Some(best) => {
                if val_loss < best * (1.0 - min_delta) {
                    self.epochs_since_improvement = 0;
                } else {
                    self.epochs_since_improvement += 1;
                }
                if val_loss < best {
                    self.best_val_loss = Some(val_loss);
                    self.best_epoch = self.epoch;
                    self.best_model = Some(self.model.clone());
                }
            }
        }
    }
}

pub fn should_stop(state: &TrainState, config: &TrainConfig) -> bool {
    state.epochs_since_improvement >= config.patience || state.epoch >= config.max_epochs
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (epoch as u64).wrapping_add(0x9E37_79B9_7F4A_7C15)
}

/// Target mask matched to the network's output extent (a no-op with same padding).
fn target_for(mask: &Tensor, output_shape: &[usize]) -> Result<Tensor> {
    if mask.shape() == output_shape {
        return Ok(mask.clone());
    }
    Ok(center_crop(mask, output_shape[1], output_shape[2]).map_err(ModelError::from)?)
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(model: &UNetModel, sample: &Sample, kind: LossKind) -> Result<(f64, Gradients)> {
    let (_, cache) = model.forward(&sample.image)?;
    let logits = cache.logits();
    let target = target_for(&sample.mask, logits.shape())?;
    let lv = loss_from_logits(logits, &target, kind).map_err(ModelError::from)?;
    let grads = model.backward_from_logits(&cache, &lv.grad)?;
    Ok((lv.value, grads))
}

/// One pass over `train_set` in a seeded shuffled order. Returns the mean
/// per-sample training loss, which is also appended to the history.
pub fn train_epoch(state: &mut TrainState, train_set: &[Sample], config: &TrainConfig) -> Result<f64> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = Pcg64::seed_from_u64(epoch_seed(config.seed, state.epoch));
    order.shuffle(&mut rng);

    let mut total = 0.0;
    for batch in order.chunks(config.batch_size) {
        let model = &state.model;
        let results: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|&i| sample_gradients(model, &train_set[i], config.loss))
            .collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (first_loss, mut grads) = iter.next().expect("chunks are non-empty");
        total += first_loss;
        for (l, g) in iter {
            total += l;
            grads.add_assign(&g)?;
        }
        grads.scale(1.0 / batch.len() as f64);
        state.optimizer.step(&mut state.model, &grads, config.learning_rate);
    }
    let mean = total / train_set.len() as f64;
    state.epoch += 1;
    if !mean.is_finite() {
        return Err(TrainError::NonFinite { epoch: state.epoch });
    }
    state.history.push(EpochRecord {
        epoch: state.epoch,
        train_loss: mean,
        val_loss: None,
        stopped: false,
    });
    Ok(mean)
}

/// Mean per-sample loss. Never mutates the model.
pub fn evaluate_loss(model: &UNetModel, dataset: &[Sample], kind: LossKind) -> Result<f64> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let losses: Vec<f64> = dataset
        .par_iter()
        .map(|s| -> Result<f64> {
            let (_, cache) = model.forward(&s.image)?;
            let logits = cache.logits();
            let target = target_for(&s.mask, logits.shape())?;
            Ok(loss_from_logits(logits, &target, kind).map_err(ModelError::from)?.value)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / dataset.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the lowest validation loss; this is what evaluation consumes.
    pub best_model: UNetModel,
    pub final_model: UNetModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains until [`should_stop`] fires, calling `on_epoch` after each epoch.
pub fn fit(
    model: UNetModel,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut state = TrainState::new(model, config);
    loop {
        train_epoch(&mut state, train_set, config)?;
        let val = evaluate_loss(&state.model, val_set, config.loss)?;
        if !val.is_finite() {
            return Err(TrainError::NonFinite { epoch: state.epoch });
        }
        state.record_validation(val, config.min_delta);
        let stop = should_stop(&state, config);
        let rec = state.history.last_mut().expect("train_epoch pushed a record");
        rec.stopped = stop;
        log::debug!(
            "epoch {} train {:.6} val {:.6}{}",
            rec.epoch,
            rec.train_loss,
            val,
            if stop { " (stop)" } else { "" }
        );
        on_epoch(rec);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best_model: state.best_model.expect("at least one validated epoch"),
        final_model: state.model,
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss.expect("at least one validated epoch"),
        history: state.history,
    })
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_loss,stopped_flag";

pub fn write_epoch_csv(history: &[EpochRecord], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{EPOCH_CSV_HEADER}")?;
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        writeln!(f, "{},{:.9},{},{}", r.epoch, r.train_loss, val, u8::from(r.stopped))?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build_unet, UNetConfig};

    fn state_with(config: &TrainConfig) -> TrainState {
        let model = build_unet(
            UNetConfig {
                base_channels: 1,
                depth: 1,
                ..UNetConfig::default()
            },
            0,
        )
        .unwrap();
        TrainState::new(model, config)
    }

    fn push_epoch(state: &mut TrainState, val: f64, min_delta: f64) {
        state.epoch += 1;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            train_loss: val,
            val_loss: None,
            stopped: false,
        });
        state.record_validation(val, min_delta);
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut m = AdamMoments::zeros(3);
        adam_step(&mut p, &[0.0; 3], &mut m, 1e-3, AdamHyper::default());
        assert_eq!(p, before);
        assert_eq!(m.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.3, -7.0, 1e-3] {
            let mut p = vec![0.0];
            let mut m = AdamMoments::zeros(1);
            adam_step(&mut p, &[g], &mut m, 1e-2, AdamHyper::default());
            let expected = -1e-2 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {}", p[0], expected);
            assert!((p[0] + 1e-2 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn flat_validation_stops_at_patience() {
        let config = TrainConfig {
            max_epochs: 1000,
            ..TrainConfig::default()
        };
        let mut state = state_with(&config);
        push_epoch(&mut state, 1.0, config.min_delta);
        push_epoch(&mut state, 0.5, config.min_delta);
        let best = state.epoch;
        for _ in 0..9 {
            push_epoch(&mut state, 0.5, config.min_delta);
            assert!(!should_stop(&state, &config));
        }
        push_epoch(&mut state, 0.5, config.min_delta);
        assert!(should_stop(&state, &config));
        assert_eq!(state.epoch, best + 10);
    }

    #[test]
    fn steady_improvement_runs_to_max_epochs() {
        let config = TrainConfig {
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let mut state = state_with(&config);
        let mut v = 1.0;
        for e in 1..=30 {
            push_epoch(&mut state, v, config.min_delta);
            v *= 0.99;
            assert_eq!(should_stop(&state, &config), e == 30);
        }
    }

    #[test]
    fn sub_threshold_improvements_count_as_flat() {
        let config = TrainConfig {
            max_epochs: 1000,
            ..TrainConfig::default()
        };
        let mut state = state_with(&config);
        let mut v = 1.0;
        push_epoch(&mut state, v, config.min_delta);
        for k in 1..=10 {
            v *= 1.0 - config.min_delta / 2.0;
            push_epoch(&mut state, v, config.min_delta);
            assert_eq!(should_stop(&state, &config), k == 10);
            assert_eq!(state.best_val_loss, Some(v));
        }
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn empty_training_set_errors() {
        let config = TrainConfig::default();
        let mut state = state_with(&config);
        assert!(matches!(
            train_epoch(&mut state, &[], &config),
            Err(TrainError::EmptyDataset("training"))
        ));
    }
}
