//! Adam training loop, evaluation, metrics and checkpoints.

mod adam;
pub mod checkpoint;
pub mod metrics;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tensor};
use crate::layers::{softmax_cross_entropy, ModelError};
use crate::mnist::{BatchIterator, Dataset, MnistError};
use crate::network::{Classifier, Network, NetworkConfig};
use crate::rng::{sub_seed, Stream};

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, TrainState};
pub use metrics::{export_curves, MetricRow, MetricsLog, SplitName, CSV_HEADER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] MnistError),
    #[error("non-finite gradient at step {step} in parameter {param}")]
    NonFinite { step: u64, param: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32 and 64 filters.
    #[default]
    Full,
    /// 8 and 16 filters.
    Desk,
}

impl Preset {
    pub fn network(self) -> NetworkConfig {
        match self {
            Preset::Full => NetworkConfig::paper(),
            Preset::Desk => NetworkConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub preset: Preset,
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test images.
    pub test_limit: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 20,
            lr: 1e-4,
            seed: 0,
            preset: Preset::Full,
            train_limit: None,
            test_limit: None,
            data_dir: None,
            out: None,
        }
    }
}

impl TrainConfig {
    /// One epoch of the desk preset on 10,000 training images.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 1,
            preset: Preset::Desk,
            train_limit: Some(10_000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr = {} must be finite and >= 0", self.lr)));
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(TrainError::Config("sample limits must be >= 1".into()));
        }
        Ok(())
    }
}

/// Accuracy and mean cross-entropy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy_percent: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

/// Argmax accuracy and mean loss of `model` on every sample of `data`.
pub fn evaluate<S, M>(model: &M, data: &Dataset) -> Result<EvalResult, TrainError>
where
    S: Scalar,
    M: Classifier<S> + Sync,
{
    let per_sample: Vec<(bool, f64)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let logits = model.logits(&data.tensor::<S>(i))?;
            let label = data.label(i);
            let loss = softmax_cross_entropy(&logits, label)?.as_f64();
            Ok((logits.argmax() == label, loss))
        })
        .collect::<Result<_, ModelError>>()?;
    let n = per_sample.len();
    let correct = per_sample.iter().filter(|(c, _)| *c).count();
    let loss: f64 = per_sample.iter().map(|(_, l)| l).sum();
    let denom = n.max(1) as f64;
    Ok(EvalResult {
        accuracy_percent: 100.0 * correct as f64 / denom,
        mean_loss: loss / denom,
        samples: n,
    })
}

/// Loss and correctness of one batch, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub mean_loss: f64,
    pub correct: usize,
    pub samples: usize,
}

pub struct Trainer<S> {
    net: Network<S>,
    adam: AdamState<S>,
    names: Vec<String>,
    cfg: TrainConfig,
    shuffle_seed: u64,
    epoch: u64,
    step: u64,
    metrics: MetricsLog,
    best_test_accuracy: Option<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(net_cfg: &NetworkConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = Network::new(net_cfg)?;
        Ok(Self::from_network(net, cfg))
    }

    pub fn from_network(net: Network<S>, cfg: TrainConfig) -> Self {
        let shapes: Vec<Vec<usize>> = net.parameters().iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        Trainer {
            adam: AdamState::new(&refs, cfg.lr),
            names: net.parameter_names(),
            shuffle_seed: sub_seed(cfg.seed, Stream::Shuffle),
            net,
            cfg,
            epoch: 0,
            step: 0,
            metrics: MetricsLog::default(),
            best_test_accuracy: None,
        }
    }

    pub fn network(&self) -> &Network<S> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<S> {
        &mut self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adam(&self) -> &AdamState<S> {
        &self.adam
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn best_test_accuracy(&self) -> Option<f64> {
        self.best_test_accuracy
    }

    /// Batches of the next epoch, in presentation order.
    pub fn epoch_batches(&self, n: usize) -> BatchIterator {
        BatchIterator::new(n, self.cfg.batch_size, self.shuffle_seed, self.epoch)
    }

    /// One Adam step on the given samples. Oscillator current gains are
    /// calibrated on the first batch the trainer ever sees.
    pub fn step(&mut self, images: &[Tensor<S>], labels: &[usize]) -> Result<StepReport, TrainError> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(TrainError::Config(format!(
                "batch has {} images and {} labels",
                images.len(),
                labels.len()
            )));
        }
        if !self.net.is_calibrated() {
            self.net.calibrate(images)?;
        }
        let net = &self.net;
        let samples: Vec<_> = images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(img, &label)| net.sample_grad(img, label))
            .collect::<Result<_, ModelError>>()?;

        self.net.zero_grad();
        let inv = S::from_f64_lossy(1.0 / samples.len() as f64);
        let mut loss = 0.0;
        let mut correct = 0;
        {
            let mut params = self.net.parameters_mut();
            for (s, &label) in samples.iter().zip(labels) {
                loss += s.loss.as_f64();
                correct += usize::from(s.logits.argmax() == label);
                for (p, g) in params.iter_mut().zip(&s.grads) {
                    p.grad.add_assign(g).map_err(ModelError::from)?;
                }
            }
            for p in params.iter_mut() {
                p.grad = p.grad.map(|g| g * inv);
            }
            self.adam.step(&mut params, &self.names)?;
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            mean_loss: loss / samples.len() as f64,
            correct,
            samples: samples.len(),
        })
    }

    /// Run one epoch over `train`. Returns accuracy and mean loss accumulated
    /// over the batches as they were presented.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EvalResult, TrainError> {
        let mut loss = 0.0;
        let mut correct = 0;
        let mut n = 0;
        for idx in self.epoch_batches(train.len()) {
            let (images, labels) = train.batch::<S>(&idx);
            let r = self.step(&images, &labels)?;
            loss += r.mean_loss * r.samples as f64;
            correct += r.correct;
            n += r.samples;
        }
        self.epoch += 1;
        let denom = n.max(1) as f64;
        Ok(EvalResult {
            accuracy_percent: 100.0 * correct as f64 / denom,
            mean_loss: loss / denom,
            samples: n,
        })
    }

    /// Train for the configured number of epochs, evaluating on `test` after
    /// each. With `out`, writes the latest checkpoint to `out`, the best one
    /// to `out.best`, and the curves to `out.csv` after every epoch.
    /// `on_epoch` sees the epoch number and its train and test results.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        out: Option<&Path>,
        mut on_epoch: impl FnMut(u64, &EvalResult, &EvalResult),
    ) -> Result<&MetricsLog, TrainError> {
        while self.epoch < self.cfg.epochs {
            let result = self.train_epoch(train).and_then(|tr| Ok((tr, evaluate(&self.net, test)?)));
            let (tr, te) = match result {
                Ok(v) => v,
                Err(e) => {
                    if let Some(out) = out {
                        let _ = self.write_metrics(&metrics_path(out));
                    }
                    return Err(e);
                }
            };
            on_epoch(self.epoch, &tr, &te);
            self.metrics.push(self.epoch, SplitName::Train, tr.accuracy_percent, tr.mean_loss);
            self.metrics.push(self.epoch, SplitName::Test, te.accuracy_percent, te.mean_loss);
            let improved = self.best_test_accuracy.is_none_or(|b| te.accuracy_percent > b);
            if improved {
                self.best_test_accuracy = Some(te.accuracy_percent);
            }
            if let Some(out) = out {
                let ckpt = self.to_checkpoint();
                save_checkpoint(&ckpt, out)?;
                if improved {
                    save_checkpoint(&ckpt, &best_path(out))?;
                }
                self.write_metrics(&metrics_path(out))?;
            }
        }
        Ok(&self.metrics)
    }

    fn write_metrics(&self, path: &Path) -> Result<(), TrainError> {
        export_curves(&self.metrics, path).map_err(|source| TrainError::Io { path: path.into(), source })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (name, p) in self.names.iter().zip(self.net.parameters()) {
            tensors.push((name.clone(), p.value.cast::<f32>()));
        }
        for (name, m) in self.names.iter().zip(&self.adam.m) {
            tensors.push((format!("adam.m.{name}"), m.cast::<f32>()));
        }
        for (name, v) in self.names.iter().zip(&self.adam.v) {
            tensors.push((format!("adam.v.{name}"), v.cast::<f32>()));
        }
        Checkpoint {
            meta: CheckpointMeta {
                network: self.net.config().clone(),
                train: self.cfg.clone(),
                state: TrainState {
                    epoch: self.epoch,
                    step: self.step,
                    adam_t: self.adam.t,
                    lr: self.adam.lr,
                    calibrated: self.net.is_calibrated(),
                    shuffle_seed: self.shuffle_seed,
                    best_test_accuracy: self.best_test_accuracy,
                },
                metrics: self.metrics.clone(),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let net = network_from_checkpoint::<S>(ckpt)?;
        let meta = &ckpt.meta;
        let mut t = Self::from_network(net, meta.train.clone());
        for (i, name) in t.names.clone().iter().enumerate() {
            t.adam.m[i] = load_tensor(ckpt, &format!("adam.m.{name}"), t.adam.m[i].shape())?;
            t.adam.v[i] = load_tensor(ckpt, &format!("adam.v.{name}"), t.adam.v[i].shape())?;
        }
        t.adam.t = meta.state.adam_t;
        t.adam.lr = meta.state.lr;
        t.shuffle_seed = meta.state.shuffle_seed;
        t.epoch = meta.state.epoch;
        t.step = meta.state.step;
        t.best_test_accuracy = meta.state.best_test_accuracy;
        t.metrics = meta.metrics.clone();
        Ok(t)
    }
}

/// Rebuild the network stored in a checkpoint, parameters only.
pub fn network_from_checkpoint<S: Scalar>(ckpt: &Checkpoint) -> Result<Network<S>, TrainError> {
    let mut net = Network::<S>::new(&ckpt.meta.network)?;
    let names = net.parameter_names();
    for (name, p) in names.iter().zip(net.parameters_mut()) {
        p.value = load_tensor(ckpt, name, p.shape())?;
        p.zero_grad();
    }
    net.set_calibrated(ckpt.meta.state.calibrated);
    Ok(net)
}

fn load_tensor<S: Scalar>(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<S>, TrainError> {
    let t = ckpt.tensor(name)?;
    if t.shape() != shape {
        return Err(CheckpointError::Format(format!(
            "tensor {name:?} has shape {:?}, network expects {shape:?}",
            t.shape()
        ))
        .into());
    }
    Ok(t.cast::<S>())
}

pub fn best_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".best");
    s.into()
}

pub fn metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".csv");
    s.into()
}
