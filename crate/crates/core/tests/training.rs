use pdlf_core::image::Mask;
use pdlf_core::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use pdlf_core::nn::layers::sigmoid_bce;
use pdlf_core::nn::network::{forward, NetworkConfig, NetworkParams};
use pdlf_core::nn::network::{forward_train, Sample};
use pdlf_core::nn::train::{history_csv, train, train_step, Example, Sgd, TrainConfig};
use pdlf_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(seed: u64, concat_block: usize) -> NetworkConfig {
    NetworkConfig {
        input_h: 16,
        input_w: 24,
        blocks: 2,
        channels: vec![4, 8],
        concat_block,
        seed,
        ..Default::default()
    }
}

fn examples(seed: u64, n: usize, net: &NetworkConfig) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (net.input_h, net.input_w);
    (0..n)
        .map(|_| {
            let cy = rng.random_range(4.0..12.0f32);
            let cx = rng.random_range(6.0..18.0f32);
            let target = Mask::from_fn(h, w, |y, x| {
                (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) < 16.0
            });
            let image: Vec<f32> = target
                .data()
                .iter()
                .map(|&m| 0.3 + 0.4 * m as f32 + rng.random_range(-0.05..0.05))
                .collect();
            let plane: Vec<f32> = (0..5 * 7).map(|_| rng.random::<f32>()).collect();
            Example {
                image: Tensor::from_vec(&[1, h, w], image).unwrap(),
                plane: Tensor::from_vec(&[5, 7], plane).unwrap(),
                target,
            }
        })
        .collect()
}

#[test]
fn fresh_networks_are_calibrated() {
    for seed in 0..20 {
        let net = NetworkConfig {
            seed,
            ..Default::default()
        };
        let params = NetworkParams::init(&net).unwrap();
        let ex = &examples(seed, 1, &net)[0];
        let prob = forward(&ex.image, &ex.plane, &params, &net).unwrap();
        assert_eq!(prob.shape(), [net.input_h, net.input_w]);
        assert!(prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let mean = prob.mean();
        assert!(
            (0.3..=0.7).contains(&mean),
            "seed {seed}: mean output {mean}"
        );
    }
}

fn batch_loss(batch: &[&Example], params: &NetworkParams, net: &NetworkConfig) -> f64 {
    let samples: Vec<Sample<'_>> = batch
        .iter()
        .map(|e| Sample {
            image: &e.image,
            plane: &e.plane,
        })
        .collect();
    let mut p = params.clone();
    let cache = forward_train(&samples, &mut p, net).unwrap();
    let target: Vec<f32> = batch.iter().flat_map(|e| e.target.to_f32()).collect();
    sigmoid_bce(cache.logits.data(), &target).unwrap().0
}

#[test]
fn one_small_step_descends() {
    for seed in 0..5 {
        let net = small_net(seed, 1);
        let ex = examples(seed + 100, 1, &net);
        let batch: Vec<&Example> = ex.iter().collect();
        let mut params = NetworkParams::init(&net).unwrap();
        let before = batch_loss(&batch, &params, &net);
        let mut opt = Sgd::new(&params, 1e-3, 0.0);
        train_step(&batch, &mut params, &net, &mut opt).unwrap();
        let after = batch_loss(&batch, &params, &net);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn zero_learning_rate_keeps_trainable_parameters() {
    let net = small_net(3, 2);
    let ex = examples(3, 4, &net);
    let params = NetworkParams::init(&net).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    let out = train(&ex, &ex, params.clone(), &net, &cfg).unwrap();
    assert_eq!(out.params.trainable(), params.trainable());
}

#[test]
fn same_seed_gives_bitwise_identical_runs() {
    let net = small_net(5, 2);
    let ex = examples(5, 6, &net);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        train(
            &ex[..4],
            &ex[4..],
            NetworkParams::init(&net).unwrap(),
            &net,
            &cfg,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(
        encode_checkpoint(&a.params, &net).unwrap(),
        encode_checkpoint(&b.params, &net).unwrap()
    );
    let (back, back_cfg) = decode_checkpoint(&encode_checkpoint(&a.params, &net).unwrap()).unwrap();
    assert_eq!(back, a.params);
    assert_eq!(back_cfg, net);
}

#[test]
fn training_fits_an_easy_set() {
    let net = small_net(1, 0);
    let ex = examples(1, 8, &net);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 4,
        ..Default::default()
    };
    let out = train(&ex, &ex, NetworkParams::init(&net).unwrap(), &net, &cfg).unwrap();
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap();
    assert!(out.diverged_at.is_none());
    assert!(
        last.train_loss < 0.5 * first,
        "{first} -> {}",
        last.train_loss
    );
    assert!(last.val_iou > 0.5, "iou {}", last.val_iou);
}

#[test]
fn disabled_concat_ignores_the_plane() {
    let net = small_net(2, 0);
    let params = NetworkParams::init(&net).unwrap();
    let ex = &examples(2, 1, &net)[0];
    let base = forward(&ex.image, &ex.plane, &params, &net).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (r, c) in [(1, 1), (3, 1000), (40, 17)] {
        let plane =
            Tensor::from_vec(&[r, c], (0..r * c).map(|_| rng.random::<f32>()).collect()).unwrap();
        let out = forward(&ex.image, &plane, &params, &net).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&base));
    }
}

#[test]
fn enabled_concat_reads_the_plane() {
    let net = small_net(2, 1);
    let params = NetworkParams::init(&net).unwrap();
    let ex = &examples(2, 1, &net)[0];
    let a = forward(&ex.image, &Tensor::zeros(&[3, 3]), &params, &net).unwrap();
    let b = forward(&ex.image, &Tensor::full(&[3, 3], 1.0), &params, &net).unwrap();
    assert_ne!(a, b);
}
