use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::LsaAutoencoder;
use super::metrics::reconstruction_error;
use super::optim::{learning_rate, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tape, Tensor};

/// Training objective, measured on standardized coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: Loss,
    /// Training samples held out for model selection.
    pub val_size: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_decay_per_epoch: 0.99,
            batch_size: 32,
            epochs: 300,
            weight_decay: 5e-4,
            seed: 0,
            loss: Loss::L1,
            val_size: 100,
            dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::config("lr_decay_per_epoch must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_error_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_error_mm: f64,
}

/// Optional files written while training.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// CSV log, rewritten after every epoch.
    pub log_csv: Option<PathBuf>,
    /// Model directory refreshed whenever validation improves.
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_error_mm\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_error_mm);
    }
    s
}

/// Splits `0..n` into sorted (train, validation) index lists.
pub fn split_validation(n: usize, val_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_size >= n {
        return Err(Error::config(format!("cannot hold out {val_size} of {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..val_size].to_vec();
    let mut train = idx[val_size..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Samples `idx` of a `[S, ...]` tensor.
pub fn select_samples<T: Real>(data: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let s = *data.shape().first().ok_or_else(|| Error::shape("select_samples on a scalar"))?;
    let per = data.len() / s.max(1);
    let mut out = Vec::with_capacity(per * idx.len());
    for &i in idx {
        if i >= s {
            return Err(Error::shape(format!("sample {i} of {s}")));
        }
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

/// Mean per-vertex error of `model` on raw `data`, in the data's units.
pub fn evaluate<T: Real>(model: &LsaAutoencoder<T>, data: &Tensor<f64>, batch: usize) -> Result<f64> {
    let pred = model.reconstruct(&data.cast::<T>(), batch)?.cast::<f64>();
    reconstruction_error(&pred, data)
}

/// Mini-batch Adam on standardized coordinates with per-epoch learning rate
/// decay. Validation error is measured after every epoch on raw
/// coordinates (on the training set when `val` is empty), and the model is
/// left holding the parameters of the best epoch.
pub fn train<T: Real>(
    model: &mut LsaAutoencoder<T>,
    train_set: &Tensor<f64>,
    val: &Tensor<f64>,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    config.validate()?;
    let s = train_set.shape().first().copied().unwrap_or(0);
    if s == 0 {
        return Err(Error::config("empty training set"));
    }
    let n = model.num_vertices();
    let standardized = model.normalizer.standardize(&train_set.cast::<T>())?;
    let has_val = val.shape().first().is_some_and(|&v| v > 0);
    let val_data = if has_val { val } else { train_set };
    let mut adam = Adam::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..s).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;

    for epoch in 0..config.epochs {
        let lr = learning_rate(config.lr, config.lr_decay_per_epoch, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = select_samples(&standardized, chunk)?;
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let xv = tape.constant(x);
            let (y, _) = model.forward_graph(&mut tape, &vars, xv)?;
            let diff = tape.sub(y, xv)?;
            let per = match config.loss {
                Loss::L1 => tape.abs(diff),
                Loss::L2 => tape.mul(diff, diff)?,
            };
            let loss = tape.mean(per);
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {value} at epoch {epoch}, batch {batch_no} (lr {lr})"
                )));
            }
            loss_sum += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(&mut model.params_mut(), &g, lr)?;
        }
        let val_error_mm = evaluate(model, val_data, config.batch_size.max(64))?;
        if !val_error_mm.is_finite() {
            return Err(Error::Numerical(format!("validation error became {val_error_mm} at epoch {epoch} (lr {lr})")));
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / s as f64,
            val_error_mm,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.6} val {val_error_mm:.4} mm",
            loss_sum / s as f64
        );
        if best.as_ref().is_none_or(|(_, e, _)| val_error_mm < *e) {
            best = Some((epoch, val_error_mm, model.snapshot()));
            if let Some(dir) = &outputs.checkpoint_dir {
                model.save(dir, Some(config))?;
            }
        }
        if let Some(path) = &outputs.log_csv {
            write_text(path, &log_to_csv(&log))?;
        }
    }
    let (best_epoch, best_val_error_mm, values) = best.expect("at least one epoch");
    model.restore(&values)?;
    debug_assert_eq!(model.num_vertices(), n);
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_error_mm,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosahedron;
    use crate::model::{ModelConfig, Normalizer};

    #[test]
    fn validation_split_is_a_partition() {
        let (t, v) = split_validation(20, 5, 3).unwrap();
        assert_eq!(v.len(), 5);
        let mut all = [t.clone(), v.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split_validation(20, 5, 3).unwrap(), (t, v));
        assert!(split_validation(5, 5, 0).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let log = [EpochLog {
            epoch: 0,
            lr: 0.001,
            train_loss: 0.5,
            val_error_mm: 1.25,
        }];
        assert_eq!(log_to_csv(&log), "epoch,lr,train_loss,val_error_mm\n0,0.001,0.5,1.25\n");
    }

    #[test]
    fn nan_loss_aborts_with_context() {
        let template = icosahedron(1.0);
        let cfg = ModelConfig {
            latent_dim: 2,
            enc_channels: vec![2; 4],
            dec_channels: vec![2; 4],
            ..Default::default()
        };
        let mut m = LsaAutoencoder::<f64>::new(cfg, template, Normalizer::identity(12), 0).unwrap();
        let mut data = Tensor::full(&[2, 12, 3], 1.0);
        data.data_mut()[5] = f64::NAN;
        let tc = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let err = train(&mut m, &data, &Tensor::zeros(&[0, 12, 3]), &tc, &TrainOutputs::default()).unwrap_err();
        assert!(matches!(&err, Error::Numerical(msg) if msg.contains("epoch 0")), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}
