//! Mini-batch training with best-checkpointing on validation loss,
//! learning-rate reduction on plateau and early stopping.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, AugmentationConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{LossKind, PixelPartition};
use crate::metrics::{self, EvalReport};
use crate::model::{Model, ModelConfig, Section};
use crate::optim::{Nadam, NadamConfig};
use crate::rng;
use crate::weights::{self, WeightFile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Model initialisation seed.
    pub seed: u64,
    pub shuffle_seed: u64,
    pub augmentation_seed: u64,
    pub loss: LossKind,
    pub use_transfer_learning: bool,
    pub use_augmentation: bool,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 4,
            learning_rate: 1e-4,
            plateau_patience: 25,
            plateau_factor: 0.5,
            early_stop_patience: 100,
            max_epochs: 1000,
            seed: 0,
            shuffle_seed: 1,
            augmentation_seed: 2,
            loss: LossKind::Combined,
            use_transfer_learning: false,
            use_augmentation: false,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Parameter("patience values must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Parameter("plateau factor must lie in (0, 1)".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Parameter("max epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        self.augmentation.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of any serialisable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serialises");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// What the callbacks decided at the end of an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochDecision {
    pub improved: bool,
    /// Learning rate for the next epoch, if it changed.
    pub new_learning_rate: Option<f64>,
    pub stop: bool,
}

/// Checkpoint, plateau and early-stop bookkeeping. Improvement means a
/// strictly smaller validation loss; the plateau and early-stop counters
/// are independent and both reset on improvement.
#[derive(Clone, Debug)]
pub struct Callbacks {
    best: f64,
    best_epoch: Option<usize>,
    plateau_wait: usize,
    stop_wait: usize,
    learning_rate: f64,
    plateau_patience: usize,
    plateau_factor: f64,
    early_stop_patience: usize,
}

impl Callbacks {
    pub fn new(config: &TrainingConfig) -> Self {
        Callbacks {
            best: f64::INFINITY,
            best_epoch: None,
            plateau_wait: 0,
            stop_wait: 0,
            learning_rate: config.learning_rate,
            plateau_patience: config.plateau_patience,
            plateau_factor: config.plateau_factor,
            early_stop_patience: config.early_stop_patience,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }

    pub fn on_epoch_end(&mut self, epoch: usize, val_loss: f64) -> EpochDecision {
        let mut d = EpochDecision {
            improved: false,
            new_learning_rate: None,
            stop: false,
        };
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.plateau_wait = 0;
            self.stop_wait = 0;
            d.improved = true;
            return d;
        }
        self.plateau_wait += 1;
        self.stop_wait += 1;
        if self.plateau_wait >= self.plateau_patience {
            self.learning_rate *= self.plateau_factor;
            self.plateau_wait = 0;
            d.new_learning_rate = Some(self.learning_rate);
        }
        if self.stop_wait >= self.early_stop_patience {
            d.stop = true;
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
    pub best_epoch: Option<usize>,
}

impl TrainingHistory {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:e},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
            );
        }
        out
    }

    /// Best validation loss, i.e. the minimum of the val column.
    pub fn best_val_loss(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_loss).min_by(f64::total_cmp)
    }
}

/// Checkpoint sidecar contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub config_hash: String,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        format!(
            "epoch={}\nval_loss={:.9}\nconfig_hash={}\nheight={}\nwidth={}\nwidth_multiplier={}\n",
            self.epoch,
            self.val_loss,
            self.config_hash,
            self.model.height,
            self.model.width,
            self.model.width_multiplier
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{key}'")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint metadata '{key}' is not a number")))
        };
        Ok(CheckpointMeta {
            epoch: num("epoch")? as usize,
            val_loss: num("val_loss")?,
            config_hash: get("config_hash")?.to_string(),
            model: ModelConfig::new(
                num("height")? as usize,
                num("width")? as usize,
                num("width_multiplier")?,
            )?,
        })
    }
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub const CHECKPOINT_FILE: &str = "best.odsw";
pub const HISTORY_FILE: &str = "history.csv";

pub struct TrainOutcome {
    /// The model from the best validation epoch.
    pub model: Model,
    pub history: TrainingHistory,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

/// Loads an encoder-only (or full) weight file into `model`; every encoder
/// tensor must be provided.
pub fn apply_transfer_weights(model: &mut Model, file: &WeightFile) -> Result<()> {
    let report = weights::apply(model, file, false)?;
    let encoder_missing: Vec<&String> = report
        .missing
        .iter()
        .filter(|n| {
            let layer = n.rsplit_once('.').map_or(n.as_str(), |(l, _)| l);
            model.layer(layer).is_some_and(|l| l.section == Section::Encoder)
        })
        .collect();
    if !encoder_missing.is_empty() {
        return Err(Error::Format(format!(
            "transfer weights lack encoder tensors: {encoder_missing:?}"
        )));
    }
    if !report.skipped.is_empty() {
        log::warn!("transfer weights: ignored {:?}", report.skipped);
    }
    Ok(())
}

/// Training loop driver. `val_hook` sees `(epoch, val_loss)` and returns the
/// value the callbacks act on; the identity in normal use.
pub struct Trainer<'a> {
    pub config: &'a TrainingConfig,
    pub out_dir: Option<&'a Path>,
    pub val_hook: Option<Box<dyn FnMut(usize, f64) -> f64 + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainingConfig) -> Self {
        Trainer {
            config,
            out_dir: None,
            val_hook: None,
        }
    }

    pub fn out_dir(mut self, dir: &'a Path) -> Self {
        self.out_dir = Some(dir);
        self
    }

    pub fn val_hook(mut self, hook: impl FnMut(usize, f64) -> f64 + 'a) -> Self {
        self.val_hook = Some(Box::new(hook));
        self
    }

    pub fn run(mut self, mut model: Model, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
        let config = self.config;
        config.validate()?;
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::Parameter("train and validation sets must be nonempty".into()));
        }
        let mc = model.config();
        for s in train_set.samples.iter().chain(&val_set.samples) {
            if (s.height(), s.width()) != (mc.height, mc.width) {
                return Err(crate::error::shape_err!(
                    "sample {} is {}x{} but the model expects {}x{}",
                    s.source_id,
                    s.height(),
                    s.width(),
                    mc.height,
                    mc.width
                ));
            }
        }
        if let Some(dir) = self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let checkpoint = self.out_dir.map(|d| d.join(CHECKPOINT_FILE));
        let hash = config.hash();

        let mut optimizer = Nadam::new(NadamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        })?;
        let mut callbacks = Callbacks::new(config);
        let mut history = TrainingHistory::default();
        let mut best_model = model.clone();
        let mut stopped_early = false;

        for epoch in 1..=config.max_epochs {
            let start = Instant::now();
            let lr = callbacks.learning_rate();
            optimizer.set_learning_rate(lr)?;

            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng::stream(config.shuffle_seed, &[epoch as u64]));
            let mut loss_sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let samples = chunk
                    .iter()
                    .map(|&i| self.training_sample(train_set, i, epoch))
                    .collect::<Result<Vec<Sample>>>()?;
                let (images, masks) = data::stack(&samples)?;
                let (pred, trace) = model.forward(&images)?;
                let part = PixelPartition::new(&masks, &pred)?;
                let loss = config.loss.loss(&part);
                if !loss.is_finite() {
                    self.save_history(&history)?;
                    return Err(Error::NonFinite(format!(
                        "training loss became {loss} in epoch {epoch}; best checkpoint kept"
                    )));
                }
                let grad = config.loss.grad(&part);
                let grads = model.backward(trace, &grad)?;
                optimizer.step(&mut model.parameters_mut(), &grads.tensors())?;
                loss_sum += loss * chunk.len() as f64;
            }
            let train_loss = loss_sum / train_set.len() as f64;
            let mut val_loss = validation_loss(&model, val_set, config)?;
            if let Some(hook) = self.val_hook.as_mut() {
                val_loss = hook(epoch, val_loss);
            }
            if !val_loss.is_finite() {
                self.save_history(&history)?;
                return Err(Error::NonFinite(format!(
                    "validation loss became {val_loss} in epoch {epoch}; best checkpoint kept"
                )));
            }

            let decision = callbacks.on_epoch_end(epoch, val_loss);
            if decision.improved {
                best_model = model.clone();
                history.best_epoch = Some(epoch);
                if let Some(path) = &checkpoint {
                    weights::save_weights(&model, path)?;
                    let meta = CheckpointMeta {
                        epoch,
                        val_loss,
                        config_hash: hash.clone(),
                        model: mc,
                    };
                    let mp = meta_path(path);
                    fs::write(&mp, meta.to_text()).map_err(|e| Error::io(&mp, e))?;
                }
            }
            if let Some(new_lr) = decision.new_learning_rate {
                log::info!("epoch {epoch}: validation loss plateaued, learning rate -> {new_lr:e}");
            }
            history.rows.push(HistoryRow {
                epoch,
                train_loss,
                val_loss,
                lr,
                seconds: start.elapsed().as_secs_f64(),
            });
            log::info!(
                "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:e}{}",
                if decision.improved { " (best)" } else { "" }
            );
            self.save_history(&history)?;
            if decision.stop {
                stopped_early = true;
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }

        Ok(TrainOutcome {
            model: best_model,
            history,
            stopped_early,
            checkpoint,
        })
    }

    fn training_sample(&self, set: &Dataset, index: usize, epoch: usize) -> Result<Sample> {
        let s = &set.samples[index];
        if !self.config.use_augmentation {
            return Ok(s.clone());
        }
        let mut r = rng::stream(self.config.augmentation_seed, &[index as u64, epoch as u64]);
        data::augment(s, &self.config.augmentation, &mut r)
    }

    fn save_history(&self, history: &TrainingHistory) -> Result<()> {
        if let Some(dir) = self.out_dir {
            let path = dir.join(HISTORY_FILE);
            fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Sample-weighted mean loss over the set, in batches of the configured
/// size, without augmentation.
pub fn validation_loss(model: &Model, set: &Dataset, config: &TrainingConfig) -> Result<f64> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut sum = 0.0;
    for chunk in indices.chunks(config.batch_size) {
        let (images, masks) = set.batch(chunk)?;
        let pred = model.predict(&images)?;
        sum += config.loss.loss(&PixelPartition::new(&masks, &pred)?) * chunk.len() as f64;
    }
    Ok(sum / set.len() as f64)
}

/// Trains without writing files.
pub fn train(model: Model, train_set: &Dataset, val_set: &Dataset, config: &TrainingConfig) -> Result<TrainOutcome> {
    Trainer::new(config).run(model, train_set, val_set)
}

/// Rebuilds the model described by the checkpoint sidecar, loads the weights
/// strictly and evaluates it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let file = WeightFile::read(path)?;
    let mp = meta_path(path);
    let meta = CheckpointMeta::parse(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
    let mut model = Model::build(meta.model, 0)?;
    let report = weights::apply(&mut model, &file, true)?;
    if !report.missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint lacks tensors: {:?}",
            report.missing
        )));
    }
    Ok((model, meta))
}

pub fn evaluate_checkpoint(path: impl AsRef<Path>, dataset: &Dataset) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(path)?;
    metrics::timed_evaluate(&model, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(plateau: usize, stop: usize) -> TrainingConfig {
        TrainingConfig {
            plateau_patience: plateau,
            early_stop_patience: stop,
            ..Default::default()
        }
    }

    #[test]
    fn plateau_halves_at_best_plus_patience() {
        let mut cb = Callbacks::new(&config(25, 100));
        assert!(cb.on_epoch_end(1, 1.0).improved);
        for e in 2..=25 {
            assert_eq!(cb.on_epoch_end(e, 1.0).new_learning_rate, None);
        }
        let d = cb.on_epoch_end(26, 1.0);
        assert_eq!(d.new_learning_rate, Some(5e-5));
        // second reduction another 25 epochs later
        for e in 27..=50 {
            assert_eq!(cb.on_epoch_end(e, 2.0).new_learning_rate, None);
        }
        assert_eq!(cb.on_epoch_end(51, 2.0).new_learning_rate, Some(2.5e-5));
    }

    #[test]
    fn early_stop_at_best_plus_patience() {
        let mut cb = Callbacks::new(&config(25, 100));
        cb.on_epoch_end(1, 3.0);
        cb.on_epoch_end(2, 2.0);
        for e in 3..102 {
            assert!(!cb.on_epoch_end(e, 2.0).stop, "epoch {e}");
        }
        assert!(cb.on_epoch_end(102, 2.0).stop);
        assert_eq!(cb.best(), Some((2, 2.0)));
    }

    #[test]
    fn equal_loss_is_not_improvement_and_lr_cut_keeps_stop_counter() {
        let mut cb = Callbacks::new(&config(2, 5));
        cb.on_epoch_end(1, 1.0);
        assert!(!cb.on_epoch_end(2, 1.0).improved);
        assert!(cb.on_epoch_end(3, 1.0).new_learning_rate.is_some());
        assert!(!cb.on_epoch_end(4, 1.0).stop);
        assert!(!cb.on_epoch_end(5, 1.0).stop);
        assert!(cb.on_epoch_end(6, 1.0).stop);
        // improvement resets both counters
        let mut cb = Callbacks::new(&config(2, 3));
        cb.on_epoch_end(1, 1.0);
        cb.on_epoch_end(2, 1.0);
        assert!(cb.on_epoch_end(3, 0.5).improved);
        assert!(!cb.on_epoch_end(4, 0.5).stop);
        assert!(cb.on_epoch_end(5, 0.5).new_learning_rate.is_some());
        assert!(cb.on_epoch_end(6, 0.5).stop);
    }

    #[test]
    fn config_validation_and_hash() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(config(0, 1).validate().is_err());
        assert!(config(1, 0).validate().is_err());
        let a = TrainingConfig::default();
        let b = TrainingConfig { seed: 9, ..Default::default() };
        assert_eq!(a.hash(), TrainingConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn meta_round_trip() {
        let m = CheckpointMeta {
            epoch: 7,
            val_loss: 0.25,
            config_hash: "ab".into(),
            model: ModelConfig::new(64, 32, 0.25).unwrap(),
        };
        assert_eq!(CheckpointMeta::parse(&m.to_text()).unwrap(), m);
        assert!(CheckpointMeta::parse("epoch=1\n").is_err());
    }

    #[test]
    fn history_csv_shape() {
        let h = TrainingHistory {
            rows: vec![HistoryRow { epoch: 1, train_loss: 0.5, val_loss: 0.4, lr: 1e-4, seconds: 0.1 }],
            best_epoch: Some(1),
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,lr,seconds\n1,"));
        assert_eq!(h.best_val_loss(), Some(0.4));
    }
}
