//! Mini-batch SGD with momentum on the segmentation network.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, sigmoid_bce};
use super::network::{
    backward, forward_logits, forward_train, NetworkConfig, NetworkParams, Sample,
};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::metrics::{compute_metrics, confusion};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A network-ready training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `C × H × W` image.
    pub image: Tensor,
    /// Joint plane, `rows × dim`.
    pub plane: Tensor,
    pub target: Mask,
}

impl Example {
    fn sample(&self) -> Sample<'_> {
        Sample {
            image: &self.image,
            plane: &self.plane,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochStats>,
    /// Epoch at which the loss stopped being finite; `params` then hold the
    /// last finite snapshot.
    pub diverged_at: Option<usize>,
}

/// SGD with momentum: `v ← m·v − lr·g`, `θ ← θ + v`.
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &NetworkParams, lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params
                .trainable()
                .iter()
                .map(|p| vec![0.0; p.len()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Vec<f32>]) {
        for ((p, g), v) in params
            .trainable_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v - self.lr * g;
                *p += *v;
            }
        }
    }
}

fn targets(batch: &[&Example]) -> Vec<f32> {
    batch
        .iter()
        .flat_map(|e| e.target.data().iter().map(|&v| v as f32))
        .collect()
}

/// One forward/backward/update step on `batch`; returns the batch loss.
pub fn train_step(
    batch: &[&Example],
    params: &mut NetworkParams,
    net: &NetworkConfig,
    opt: &mut Sgd,
) -> Result<f64> {
    let samples: Vec<Sample<'_>> = batch.iter().map(|e| e.sample()).collect();
    let cache = forward_train(&samples, params, net)?;
    let (loss, grad) = sigmoid_bce(cache.logits.data(), &targets(batch))?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let dlogits = Tensor::from_vec(cache.logits.shape(), grad)?;
    let grads = backward(&cache, &dlogits, params, net)?;
    opt.step(params, &grads.0);
    Ok(loss)
}

/// Mean loss and mean IoU (at threshold 0.5) in inference mode.
pub fn evaluate(
    examples: &[Example],
    params: &NetworkParams,
    net: &NetworkConfig,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss_sum, mut iou_sum) = (0.0f64, 0.0f64);
    for chunk in examples.chunks(batch_size.max(1)) {
        let samples: Vec<Sample<'_>> = chunk.iter().map(|e| e.sample()).collect();
        let logits = forward_logits(&samples, params, net)?;
        let per = net.input_h * net.input_w;
        for (e, z) in chunk.iter().zip(logits.data().chunks(per)) {
            let target: Vec<f32> = e.target.to_f32();
            let (l, _) = sigmoid_bce(z, &target)?;
            loss_sum += l;
            let pred = Mask::new(
                net.input_h,
                net.input_w,
                z.iter().map(|&v| (sigmoid(v) >= 0.5) as u8).collect(),
            )?;
            iou_sum += compute_metrics(&confusion(&pred, &e.target)?).iou;
        }
    }
    let n = examples.len() as f64;
    Ok((loss_sum / n, iou_sum / n))
}

/// Trains from `params` for `cfg.epochs` epochs. Batches follow a seeded
/// shuffle, so equal inputs give bitwise-equal results.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    params: NetworkParams,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    params.check(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut params = params;
    let mut snapshot = params.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&batch, &mut params, net, &mut opt)?;
            if !loss.is_finite() || !params.is_finite() {
                return Ok(TrainOutcome {
                    params: snapshot,
                    history,
                    diverged_at: Some(epoch),
                });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, val_iou) = evaluate(val_set, &params, net, cfg.batch_size)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_iou,
        });
        snapshot.clone_from(&params);
    }
    Ok(TrainOutcome {
        params,
        history,
        diverged_at: None,
    })
}

/// Binary mask of pixels whose foreground probability is at least `threshold`.
pub fn segment(
    image: &Tensor,
    plane: &Tensor,
    params: &NetworkParams,
    net: &NetworkConfig,
    threshold: f32,
) -> Result<Mask> {
    let prob = super::network::forward(image, plane, params, net)?;
    Mask::new(
        net.input_h,
        net.input_w,
        prob.data()
            .iter()
            .map(|&p| (p >= threshold) as u8)
            .collect(),
    )
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_iou\n");
    for e in history {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_iou
        ));
    }
    s
}

pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_csv(history).as_bytes())
        .map_err(|e| Error::io(path, e))
}
