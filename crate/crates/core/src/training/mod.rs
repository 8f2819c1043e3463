//! Mini-batch training with an MAE objective, Adam and a stepped schedule.

mod model_file;

use chrono::NaiveDateTime;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, Graph, LrSchedule, NodeId, ParameterStore, Tensor};
use crate::data::{BundleSet, NormStats};
use crate::error::{Error, Result};
use crate::layers::{InitConfig, ModelInputs, ModelSpec, Network};

pub use model_file::{load_model, save_model, MODEL_FILE_VERSION};

/// Records `mean(|pred − target|)` on the graph.
pub fn mae_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

/// Mean absolute difference of two same-shaped tensors.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mae",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Parameters after the last epoch.
    Final,
    /// Parameters from the epoch with the lowest validation loss.
    BestValidation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_divisor: f64,
    pub lr_step: usize,
    /// Seed for mini-batch shuffling.
    pub seed: u64,
    pub init_sd: f64,
    pub init_truncation: f64,
    pub checkpoint: CheckpointPolicy,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1200,
            initial_lr: 1e-3,
            lr_divisor: 10.0,
            lr_step: 600,
            seed: 0,
            init_sd: 1.0,
            init_truncation: crate::autodiff::DEFAULT_TRUNCATION,
            checkpoint: CheckpointPolicy::Final,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("train.epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be at least 1".to_string());
        }
        if !(self.initial_lr > 0.0) {
            p.push("train.initial_lr must be positive".to_string());
        }
        if !(self.lr_divisor > 0.0) {
            p.push("train.lr_divisor must be positive".to_string());
        }
        if self.lr_step == 0 {
            p.push("train.lr_step must be at least 1".to_string());
        }
        if !(self.init_sd > 0.0) {
            p.push("train.init_sd must be positive".to_string());
        }
        if !(self.init_truncation > 0.0) {
            p.push("train.init_truncation must be positive".to_string());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            p.push("train.adam needs betas in [0,1) and positive epsilon".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_rate: self.initial_lr,
            decay_divisor: self.lr_divisor,
            step_epochs: self.lr_step,
        }
    }

    pub fn init(&self) -> InitConfig {
        InitConfig {
            sd: self.init_sd,
            truncation: self.init_truncation,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub config: TrainConfig,
    pub train_bundles: usize,
    pub validation_bundles: usize,
    pub train_first: Option<NaiveDateTime>,
    pub train_last: Option<NaiveDateTime>,
    /// Mean mini-batch MAE per epoch, normalized units.
    pub train_losses: Vec<f64>,
    /// Validation MAE per epoch, normalized units; empty without validation.
    pub validation_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub checkpoint_epoch: usize,
}

impl TrainingManifest {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_losses.last().copied()
    }

    pub fn final_validation_loss(&self) -> Option<f64> {
        self.validation_losses.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParameterStore,
    pub stats: NormStats,
    pub manifest: TrainingManifest,
}

impl ModelInputs {
    /// Rows `indices` of a larger batch.
    fn gather(&self, indices: &[usize]) -> Result<ModelInputs> {
        fn rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
            let stride = t.len() / t.shape()[0];
            let mut data = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)
        }
        Ok(ModelInputs {
            load_slope: rows(&self.load_slope, indices)?,
            temperature: rows(&self.temperature, indices)?,
            calendar: rows(&self.calendar, indices)?,
            target: rows(&self.target, indices)?,
        })
    }
}

fn check_fingerprint(set: &BundleSet, stats: &NormStats, what: &str) -> Result<()> {
    if set.stats_fingerprint != stats.fingerprint() {
        return Err(Error::contract(format!(
            "{what} bundles were built with different normalization statistics \
             (fingerprint {:016x}, model {:016x})",
            set.stats_fingerprint,
            stats.fingerprint()
        )));
    }
    Ok(())
}

/// Fit `spec` to `train`, monitoring `validation` when given.
pub fn train(
    train: &BundleSet,
    validation: Option<&BundleSet>,
    stats: &NormStats,
    config: &TrainConfig,
    spec: &ModelSpec,
) -> Result<TrainedModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("no training bundles"));
    }
    check_fingerprint(train, stats, "training")?;
    if let Some(v) = validation {
        check_fingerprint(v, stats, "validation")?;
    }
    let validation = validation.filter(|v| !v.is_empty());

    let net = Network::new(spec.clone())?;
    let mut store = net.init(&config.init())?;
    let schedule = config.schedule();
    let all = ModelInputs::from_bundles(&train.bundles)?;
    let val_targets: Option<Tensor> = validation
        .map(|v| {
            Tensor::new(
                vec![v.len(), 1],
                v.bundles.iter().map(|b| b.target).collect(),
            )
        })
        .transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut manifest = TrainingManifest {
        config: config.clone(),
        train_bundles: train.len(),
        validation_bundles: validation.map_or(0, |v| v.len()),
        train_first: train.bundles.first().map(|b| b.timestamp),
        train_last: train.bundles.last().map(|b| b.timestamp),
        train_losses: Vec::with_capacity(config.epochs),
        validation_losses: Vec::new(),
        learning_rates: Vec::with_capacity(config.epochs),
        checkpoint_epoch: config.epochs - 1,
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let rate = schedule.rate(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = all.gather(chunk)?;
            let mut g = Graph::new();
            let pred = net.forward(&mut g, &store, &batch)?;
            let target = g.constant(batch.target.clone())?;
            let loss = mae_loss(&mut g, pred, target)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("mini-batch loss is {value}"),
                });
            }
            let grads = g.backward(loss, &store)?;
            if !grads.global_norm().is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: "non-finite gradient".into(),
                });
            }
            adam_step(&mut store, &grads, rate, &config.adam)?;
            loss_sum += value * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        manifest.train_losses.push(train_loss);
        manifest.learning_rates.push(rate);

        if let (Some(v), Some(targets)) = (validation, &val_targets) {
            let pred = net.predict_normalized(&store, &v.bundles)?;
            let pred = Tensor::new(vec![pred.len(), 1], pred)?;
            let val_loss = mae(&pred, targets)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("validation loss is {val_loss}"),
                });
            }
            manifest.validation_losses.push(val_loss);
            if config.checkpoint == CheckpointPolicy::BestValidation
                && best.as_ref().is_none_or(|(b, _)| val_loss < *b)
            {
                best = Some((val_loss, store.values()));
                manifest.checkpoint_epoch = epoch;
            }
            debug!("epoch {epoch}: lr {rate:e} train {train_loss:.5} validation {val_loss:.5}");
        } else {
            debug!("epoch {epoch}: lr {rate:e} train {train_loss:.5}");
        }
    }

    if let Some((_, values)) = best {
        store.set_values(&values)?;
    } else {
        manifest.checkpoint_epoch = config.epochs - 1;
    }
    store.reset_optimizer();
    info!(
        "trained {} epochs on {} bundles; final train MAE {:.5}",
        config.epochs,
        train.len(),
        manifest.train_losses.last().unwrap()
    );
    Ok(TrainedModel {
        spec: spec.clone(),
        params: store,
        stats: *stats,
        manifest,
    })
}

/// Forecasts in megawatts, one per bundle.
pub fn predict(model: &TrainedModel, bundles: &BundleSet) -> Result<Vec<f64>> {
    check_fingerprint(bundles, &model.stats, "prediction")?;
    let net = Network::new(model.spec.clone())?;
    Ok(net
        .predict_normalized(&model.params, &bundles.bundles)?
        .into_iter()
        .map(|z| model.stats.denormalize_load(z))
        .collect())
}
