//! Encoder-decoder segmentation network with max-pool index unpooling and an
//! optional joint-feature plane appended at one encoder block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm, batchnorm_backward, batchnorm_infer, concat_plane, concat_plane_backward, conv2d,
    conv2d_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward, sigmoid, unpool2x2,
    unpool2x2_backward, BatchNormParams, BnCache, BnMode, PoolIndices,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 5;
pub const DEFAULT_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Image channels fed to the first block (1 or 3).
    pub in_channels: usize,
    /// Encoder depth.
    pub blocks: usize,
    /// Output channels of each encoder block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Encoder block (1-based) whose input receives the joint plane; 0 disables.
    pub concat_block: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_h: 96,
            input_w: 128,
            in_channels: 1,
            blocks: 3,
            channels: DEFAULT_CHANNELS[..3].to_vec(),
            kernel: KERNEL,
            concat_block: 0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Config of the given depth with the default channel schedule.
    pub fn with_blocks(blocks: usize) -> Self {
        NetworkConfig {
            blocks,
            channels: DEFAULT_CHANNELS[..blocks.min(DEFAULT_CHANNELS.len())].to_vec(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.blocks) {
            return Err(Error::Config(format!(
                "net.blocks must be in 2..=5, got {}",
                self.blocks
            )));
        }
        if self.channels.len() != self.blocks || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "net.channels must list {} positive widths, got {:?}",
                self.blocks, self.channels
            )));
        }
        if self.kernel != KERNEL {
            return Err(Error::Config(format!(
                "net.kernel must be {KERNEL}, got {}",
                self.kernel
            )));
        }
        if self.concat_block > self.blocks {
            return Err(Error::Config(format!(
                "net.concat_block {} exceeds net.blocks {}",
                self.concat_block, self.blocks
            )));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "net.in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        let step = 1usize << self.blocks;
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h % step != 0
            || self.input_w % step != 0
        {
            return Err(Error::Config(format!(
                "net input {}x{} is not divisible by 2^{} = {step}",
                self.input_h, self.input_w, self.blocks
            )));
        }
        Ok(())
    }

    /// Spatial size of the input to encoder block `k` (1-based).
    pub fn block_dims(&self, k: usize) -> (usize, usize) {
        (self.input_h >> (k - 1), self.input_w >> (k - 1))
    }

    /// Smallest valid input size that contains an `h × w` image.
    pub fn letterbox_dims(h: usize, w: usize, blocks: usize) -> (usize, usize) {
        let step = 1usize << blocks;
        (h.div_ceil(step) * step, w.div_ceil(step) * step)
    }

    fn encoder_in(&self, k: usize) -> usize {
        let base = if k == 0 {
            self.in_channels
        } else {
            self.channels[k - 1]
        };
        base + (self.concat_block == k + 1) as usize
    }

    /// `(in, out)` channels of the decoder stage that mirrors encoder level `level`.
    fn decoder_io(&self, level: usize) -> (usize, usize) {
        let out = if level == 0 {
            self.channels[0]
        } else {
            self.channels[level - 1]
        };
        (self.channels[level], out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `out × in × k × k`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Convolution, batchnorm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub encoder: Vec<Stage>,
    /// Deepest first: `decoder[i]` mirrors encoder level `blocks − 1 − i`.
    pub decoder: Vec<Stage>,
    pub head: ConvParams,
}

fn kaiming(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize, gain: f64) -> ConvParams {
    let fan_in = (inp * k * k) as f64;
    let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..out * inp * k * k)
        .map(|_| normal.sample(rng) as f32)
        .collect();
    ConvParams {
        weight: Tensor::from_vec(&[out, inp, k, k], data).expect("non-zero dims"),
        bias: vec![0.0; out],
    }
}

/// Gain applied to the Kaiming scale of the output convolution, keeping
/// initial probabilities near 0.5.
const HEAD_GAIN: f64 = 0.1;

impl NetworkParams {
    /// Kaiming fan-in initialization from `cfg.seed`; biases start at zero and
    /// batchnorm layers at the identity.
    pub fn init(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel;
        let encoder = (0..cfg.blocks)
            .map(|l| Stage {
                conv: kaiming(&mut rng, cfg.channels[l], cfg.encoder_in(l), k, 1.0),
                bn: BatchNormParams::new(cfg.channels[l]),
            })
            .collect();
        let decoder = (0..cfg.blocks)
            .rev()
            .map(|l| {
                let (i, o) = cfg.decoder_io(l);
                Stage {
                    conv: kaiming(&mut rng, o, i, k, 1.0),
                    bn: BatchNormParams::new(o),
                }
            })
            .collect();
        let head = kaiming(&mut rng, 1, cfg.channels[0], k, HEAD_GAIN);
        Ok(NetworkParams {
            encoder,
            decoder,
            head,
        })
    }

    /// Checks that the tensor shapes agree with `cfg`.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let fresh = NetworkParams::init(&NetworkConfig {
            seed: 0,
            ..cfg.clone()
        })?;
        let mine = self.named_tensors();
        let want = fresh.named_tensors();
        if mine.len() != want.len() {
            return Err(Error::Config(format!(
                "parameters hold {} tensors, config needs {}",
                mine.len(),
                want.len()
            )));
        }
        for (a, b) in mine.iter().zip(&want) {
            if a.0 != b.0 || a.1 != b.1 {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not fit config ({:?})",
                    a.0, a.1, b.1
                )));
            }
        }
        Ok(())
    }

    fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.encoder.iter().chain(&self.decoder)
    }

    /// Learnable buffers in a fixed order, matching [`Gradients`].
    pub fn trainable(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = Vec::new();
        for s in self.stages() {
            v.push(s.conv.weight.data());
            v.push(&s.conv.bias);
            v.push(&s.bn.gamma);
            v.push(&s.bn.beta);
        }
        v.push(self.head.weight.data());
        v.push(&self.head.bias);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::new();
        for s in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            v.push(s.conv.weight.data_mut());
            v.push(&mut s.conv.bias);
            v.push(&mut s.bn.gamma);
            v.push(&mut s.bn.beta);
        }
        v.push(self.head.weight.data_mut());
        v.push(&mut self.head.bias);
        v
    }

    /// Every buffer (learnable and running statistics) with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut v = Vec::new();
        let n_enc = self.encoder.len();
        for (i, s) in self.stages().enumerate() {
            let prefix = if i < n_enc {
                format!("enc{}", i + 1)
            } else {
                format!("dec{}", i - n_enc + 1)
            };
            let c = s.bn.gamma.len();
            v.push((
                format!("{prefix}.conv.weight"),
                s.conv.weight.shape().to_vec(),
                s.conv.weight.data(),
            ));
            v.push((
                format!("{prefix}.conv.bias"),
                vec![s.conv.bias.len()],
                &s.conv.bias[..],
            ));
            v.push((format!("{prefix}.bn.gamma"), vec![c], &s.bn.gamma[..]));
            v.push((format!("{prefix}.bn.beta"), vec![c], &s.bn.beta[..]));
            v.push((
                format!("{prefix}.bn.running_mean"),
                vec![c],
                &s.bn.running_mean[..],
            ));
            v.push((
                format!("{prefix}.bn.running_var"),
                vec![c],
                &s.bn.running_var[..],
            ));
        }
        v.push((
            "head.conv.weight".into(),
            self.head.weight.shape().to_vec(),
            self.head.weight.data(),
        ));
        v.push((
            "head.conv.bias".into(),
            vec![self.head.bias.len()],
            &self.head.bias[..],
        ));
        v
    }

    /// Mutable view of every buffer in [`NetworkParams::named_tensors`] order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::new();
        for s in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            v.push(s.conv.weight.data_mut());
            v.push(&mut s.conv.bias);
            v.push(&mut s.bn.gamma);
            v.push(&mut s.bn.beta);
            v.push(&mut s.bn.running_mean);
            v.push(&mut s.bn.running_var);
        }
        v.push(self.head.weight.data_mut());
        v.push(&mut self.head.bias);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

/// Gradients in [`NetworkParams::trainable`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

/// One network input: a `C × H × W` image and the joint plane.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub image: &'a Tensor,
    pub plane: &'a Tensor,
}

fn stack(samples: &[Sample<'_>], cfg: &NetworkConfig) -> Result<Tensor> {
    let want = [cfg.in_channels, cfg.input_h, cfg.input_w];
    let mut data = Vec::with_capacity(samples.len() * want.iter().product::<usize>());
    for s in samples {
        if s.image.shape() != want {
            return Err(Error::Shape(format!(
                "network expects {:?} images, got {:?}",
                want,
                s.image.shape()
            )));
        }
        if s.plane.ndim() != 2 {
            return Err(Error::Shape(format!(
                "joint plane must be 2-D, got {:?}",
                s.plane.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[samples.len(), want[0], want[1], want[2]], data)
}

struct StageCache {
    input: Tensor,
    bn: BnCache,
    pre_relu: Tensor,
}

/// Intermediate values of a training-mode forward pass.
pub struct ForwardCache {
    encoder: Vec<(StageCache, PoolIndices)>,
    decoder: Vec<(StageCache, PoolIndices)>,
    head_input: Tensor,
    pub logits: Tensor,
}

fn stage_train(x: Tensor, stage: &mut Stage) -> Result<(Tensor, StageCache)> {
    let z = conv2d(&x, &stage.conv.weight, &stage.conv.bias)?;
    let (b, cache) = batchnorm(&z, &mut stage.bn, BnMode::Train)?;
    let r = relu(&b);
    Ok((
        r,
        StageCache {
            input: x,
            bn: cache.expect("training mode returns a cache"),
            pre_relu: b,
        },
    ))
}

fn stage_infer(x: &Tensor, stage: &Stage) -> Result<Tensor> {
    let z = conv2d(x, &stage.conv.weight, &stage.conv.bias)?;
    Ok(relu(&batchnorm_infer(&z, &stage.bn)?))
}

/// Training-mode forward pass over a batch. Batchnorm running statistics in
/// `params` are updated.
pub fn forward_train(
    samples: &[Sample<'_>],
    params: &mut NetworkParams,
    cfg: &NetworkConfig,
) -> Result<ForwardCache> {
    let planes: Vec<&Tensor> = samples.iter().map(|s| s.plane).collect();
    let mut x = stack(samples, cfg)?;
    let mut encoder = Vec::with_capacity(cfg.blocks);
    for (l, stage) in params.encoder.iter_mut().enumerate() {
        if cfg.concat_block == l + 1 {
            x = concat_plane(&x, &planes)?;
        }
        let (r, cache) = stage_train(x, stage)?;
        let (p, idx) = maxpool2x2(&r)?;
        encoder.push((cache, idx));
        x = p;
    }
    let mut decoder = Vec::with_capacity(cfg.blocks);
    for (i, stage) in params.decoder.iter_mut().enumerate() {
        let idx = &encoder[cfg.blocks - 1 - i].1;
        let u = unpool2x2(&x, idx)?;
        let (r, cache) = stage_train(u, stage)?;
        decoder.push((cache, idx.clone()));
        x = r;
    }
    let logits = conv2d(&x, &params.head.weight, &params.head.bias)?;
    Ok(ForwardCache {
        encoder,
        decoder,
        head_input: x,
        logits,
    })
}

impl ForwardCache {
    /// Max-pool switches of every encoder block, outermost first.
    pub fn pool_indices(&self) -> Vec<&PoolIndices> {
        self.encoder.iter().map(|(_, idx)| idx).collect()
    }
}

fn stage_backward(
    dy: &Tensor,
    stage: &Stage,
    cache: &StageCache,
    grads: &mut [Vec<f32>],
) -> Result<Tensor> {
    let d = relu_backward(&cache.pre_relu, dy)?;
    let bn = batchnorm_backward(&d, &stage.bn.gamma, &cache.bn)?;
    let conv = conv2d_backward(&cache.input, &stage.conv.weight, &bn.input)?;
    grads[0] = conv.weight.into_data();
    grads[1] = conv.bias;
    grads[2] = bn.gamma;
    grads[3] = bn.beta;
    Ok(conv.input)
}

/// Gradients of the loss given `dlogits`, the loss gradient with respect to
/// the head output.
pub fn backward(
    cache: &ForwardCache,
    dlogits: &Tensor,
    params: &NetworkParams,
    cfg: &NetworkConfig,
) -> Result<Gradients> {
    let n_stages = params.encoder.len() + params.decoder.len();
    let mut grads: Vec<Vec<f32>> = vec![Vec::new(); 4 * n_stages + 2];
    let head = conv2d_backward(&cache.head_input, &params.head.weight, dlogits)?;
    grads[4 * n_stages] = head.weight.into_data();
    grads[4 * n_stages + 1] = head.bias;
    let mut dx = head.input;
    let n_enc = params.encoder.len();
    for i in (0..params.decoder.len()).rev() {
        let (sc, idx) = &cache.decoder[i];
        let slot = 4 * (n_enc + i);
        let du = stage_backward(&dx, &params.decoder[i], sc, &mut grads[slot..slot + 4])?;
        dx = unpool2x2_backward(&du, idx)?;
    }
    for l in (0..n_enc).rev() {
        let (sc, idx) = &cache.encoder[l];
        let dr = maxpool2x2_backward(&dx, idx)?;
        let mut ds = stage_backward(&dr, &params.encoder[l], sc, &mut grads[4 * l..4 * l + 4])?;
        if cfg.concat_block == l + 1 {
            ds = concat_plane_backward(&ds)?;
        }
        dx = ds;
    }
    Ok(Gradients(grads))
}

/// Inference-mode logits for a batch, `N × 1 × H × W`.
pub fn forward_logits(
    samples: &[Sample<'_>],
    params: &NetworkParams,
    cfg: &NetworkConfig,
) -> Result<Tensor> {
    let planes: Vec<&Tensor> = samples.iter().map(|s| s.plane).collect();
    let mut x = stack(samples, cfg)?;
    let mut indices = Vec::with_capacity(cfg.blocks);
    for (l, stage) in params.encoder.iter().enumerate() {
        if cfg.concat_block == l + 1 {
            x = concat_plane(&x, &planes)?;
        }
        let (p, idx) = maxpool2x2(&stage_infer(&x, stage)?)?;
        indices.push(idx);
        x = p;
    }
    for (i, stage) in params.decoder.iter().enumerate() {
        let u = unpool2x2(&x, &indices[cfg.blocks - 1 - i])?;
        x = stage_infer(&u, stage)?;
    }
    conv2d(&x, &params.head.weight, &params.head.bias)
}

/// Per-pixel foreground probabilities of one image as an `H × W` tensor.
pub fn forward(
    image: &Tensor,
    plane: &Tensor,
    params: &NetworkParams,
    cfg: &NetworkConfig,
) -> Result<Tensor> {
    let logits = forward_logits(&[Sample { image, plane }], params, cfg)?;
    let probs = logits.map(sigmoid);
    probs.reshape(&[cfg.input_h, cfg.input_w])
}

/// Spatial size of every activation along the encoder and decoder, for
/// checking the mirror layout.
pub fn activation_dims(cfg: &NetworkConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let enc_in: Vec<(usize, usize)> = (1..=cfg.blocks).map(|k| cfg.block_dims(k)).collect();
    let dec_out: Vec<(usize, usize)> = (0..cfg.blocks)
        .map(|i| enc_in[cfg.blocks - 1 - i])
        .collect();
    (enc_in, dec_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            input_h: 16,
            input_w: 24,
            blocks: 2,
            channels: vec![3, 4],
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let bad = [
            NetworkConfig {
                concat_block: 4,
                ..Default::default()
            },
            NetworkConfig {
                input_h: 100,
                ..Default::default()
            },
            NetworkConfig {
                kernel: 3,
                ..Default::default()
            },
            NetworkConfig {
                blocks: 6,
                ..Default::default()
            },
            NetworkConfig {
                channels: vec![8, 16],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn full_scale_dims_letterbox() {
        assert_eq!(NetworkConfig::letterbox_dims(360, 480, 4), (368, 480));
        assert_eq!(NetworkConfig::letterbox_dims(360, 480, 5), (384, 480));
        assert_eq!(NetworkConfig::letterbox_dims(96, 128, 5), (96, 128));
    }

    #[test]
    fn block_dims_halve() {
        let cfg = NetworkConfig {
            input_h: 384,
            input_w: 512,
            ..NetworkConfig::with_blocks(5)
        };
        let dims: Vec<_> = (1..=5).map(|k| cfg.block_dims(k)).collect();
        assert_eq!(
            dims,
            vec![(384, 512), (192, 256), (96, 128), (48, 64), (24, 32)]
        );
        let (enc, dec) = activation_dims(&cfg);
        for k in 1..=5 {
            assert_eq!(dec[k - 1], enc[5 - k]);
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        for concat in 0..=2 {
            let cfg = NetworkConfig {
                concat_block: concat,
                ..tiny_cfg()
            };
            let params = NetworkParams::init(&cfg).unwrap();
            assert_eq!(
                params.encoder[0].conv.weight.shape()[1],
                1 + (concat == 1) as usize
            );
            let img = Tensor::full(&[1, 16, 24], 0.3);
            let plane = Tensor::full(&[7, 40], 0.5);
            let p = forward(&img, &plane, &params, &cfg).unwrap();
            assert_eq!(p.shape(), &[16, 24]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = tiny_cfg();
        let params = NetworkParams::init(&cfg).unwrap();
        let img = Tensor::zeros(&[1, 8, 8]);
        assert!(forward(&img, &Tensor::zeros(&[1, 1]), &params, &cfg).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny_cfg();
        assert_eq!(
            NetworkParams::init(&cfg).unwrap(),
            NetworkParams::init(&cfg).unwrap()
        );
        let other = NetworkConfig {
            seed: 1,
            ..tiny_cfg()
        };
        assert_ne!(
            NetworkParams::init(&cfg).unwrap(),
            NetworkParams::init(&other).unwrap()
        );
    }

    #[test]
    fn named_tensors_line_up_with_buffers() {
        let cfg = NetworkConfig::default();
        let mut params = NetworkParams::init(&cfg).unwrap();
        let lens: Vec<usize> = params.named_tensors().iter().map(|t| t.2.len()).collect();
        let names: Vec<String> = params.named_tensors().iter().map(|t| t.0.clone()).collect();
        assert_eq!(names[0], "enc1.conv.weight");
        assert!(names.contains(&"dec3.bn.running_var".to_string()));
        let buf_lens: Vec<usize> = params.buffers_mut().iter().map(|b| b.len()).collect();
        assert_eq!(lens, buf_lens);
        params.check(&cfg).unwrap();
        assert!(params
            .check(&NetworkConfig {
                concat_block: 2,
                ..cfg
            })
            .is_err());
    }
}
