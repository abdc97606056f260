//! Central finite-difference checks shared by the gradient tests and the
//! acceptance suite. Each check returns `(name, relative error)` pairs.

use pdlf_core::nn::layers::{
    batchnorm, batchnorm_backward, concat_plane, concat_plane_backward, conv2d, conv2d_backward,
    maxpool2x2, maxpool2x2_backward, relu, relu_backward, sigmoid_bce, unpool2x2,
    unpool2x2_backward, BatchNormParams, BnMode, PoolIndices,
};
use pdlf_core::nn::network::{backward, forward_train, NetworkConfig, NetworkParams, Sample};
use pdlf_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-3;

/// Probe step for whole-network checks. Long chains of ReLU kinks favour a
/// smaller step than single layers; below about 1e-4 f32 rounding dominates.
pub const NET_EPS: f32 = 3e-4;

pub type Errors = Vec<(String, f64)>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
    )
    .unwrap()
}

/// `Σ r·y` accumulated in f64.
fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-30)
}

/// Central differences of `loss` with respect to every entry of `x`.
fn numeric(x: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + EPS;
            let up = loss(&probe);
            probe.data_mut()[i] = v - EPS;
            let down = loss(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * EPS as f64)
        })
        .collect()
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn conv(seed: u64, x_shape: [usize; 4], out: usize) -> Errors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w_] = x_shape;
    let x = random(&mut rng, &x_shape);
    let w = random(&mut rng, &[out, c, 5, 5]);
    let b: Vec<f32> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = random(&mut rng, &[n, out, h, w_]);
    let g = conv2d_backward(&x, &w, &r).unwrap();

    let dx = numeric(&x, |x| project(&conv2d(x, &w, &b).unwrap(), &r));
    let dw = numeric(&w, |w| project(&conv2d(&x, w, &b).unwrap(), &r));
    let bt = Tensor::from_vec(&[out], b.clone()).unwrap();
    let db = numeric(&bt, |b| project(&conv2d(&x, &w, b.data()).unwrap(), &r));
    vec![
        (
            format!("conv input {x_shape:?}"),
            rel_err(&dx, &as_f64(g.input.data())),
        ),
        (
            format!("conv weight {x_shape:?}"),
            rel_err(&dw, &as_f64(g.weight.data())),
        ),
        (
            format!("conv bias {x_shape:?}"),
            rel_err(&db, &as_f64(&g.bias)),
        ),
    ]
}

pub fn batchnorm_train() -> Errors {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 4, 4]);
    let mut p = BatchNormParams::new(3);
    p.gamma = vec![1.3, -0.7, 0.4];
    p.beta = vec![0.2, -0.4, 0.0];
    let r = random(&mut rng, &[2, 3, 4, 4]);
    let (_, cache) = batchnorm(&x, &mut p.clone(), BnMode::Train).unwrap();
    let g = batchnorm_backward(&r, &p.gamma, &cache.unwrap()).unwrap();

    let dx = numeric(&x, |x| {
        project(&batchnorm(x, &mut p.clone(), BnMode::Train).unwrap().0, &r)
    });
    let gamma = Tensor::from_vec(&[3], p.gamma.clone()).unwrap();
    let dgamma = numeric(&gamma, |gm| {
        let mut q = p.clone();
        q.gamma = gm.data().to_vec();
        project(&batchnorm(&x, &mut q, BnMode::Train).unwrap().0, &r)
    });
    let beta = Tensor::from_vec(&[3], p.beta.clone()).unwrap();
    let dbeta = numeric(&beta, |bt| {
        let mut q = p.clone();
        q.beta = bt.data().to_vec();
        project(&batchnorm(&x, &mut q, BnMode::Train).unwrap().0, &r)
    });
    vec![
        (
            "batchnorm input".into(),
            rel_err(&dx, &as_f64(g.input.data())),
        ),
        (
            "batchnorm gamma".into(),
            rel_err(&dgamma, &as_f64(&g.gamma)),
        ),
        ("batchnorm beta".into(), rel_err(&dbeta, &as_f64(&g.beta))),
    ]
}

/// Inputs at least 0.05 away from the kink, well beyond the probe step.
pub fn relu_layer() -> Errors {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..120)
        .map(|_| {
            let m = rng.random_range(0.05..1.0f32);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::from_vec(&[2, 3, 4, 5], data).unwrap();
    let r = random(&mut rng, &[2, 3, 4, 5]);
    let ana = relu_backward(&x, &r).unwrap();
    let num = numeric(&x, |x| project(&relu(x), &r));
    vec![("relu".into(), rel_err(&num, &as_f64(ana.data())))]
}

/// Distinct values spaced further apart than the probe step, so no window's
/// argmax changes under perturbation.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - 0.5).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).unwrap()
}

pub fn pool_unpool() -> Errors {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = separated(&mut rng, &[2, 3, 6, 8]);
    let (y, idx) = maxpool2x2(&x).unwrap();
    let r = random(&mut rng, y.shape());
    let ana = maxpool2x2_backward(&r, &idx).unwrap();
    let num = numeric(&x, |x| project(&maxpool2x2(x).unwrap().0, &r));
    let pool = rel_err(&num, &as_f64(ana.data()));

    let r_up = random(&mut rng, x.shape());
    let ana = unpool2x2_backward(&r_up, &idx).unwrap();
    let num = numeric(&y, |y| project(&unpool2x2(y, &idx).unwrap(), &r_up));
    let unpool = rel_err(&num, &as_f64(ana.data()));
    vec![("maxpool".into(), pool), ("unpool".into(), unpool)]
}

pub fn concat() -> Errors {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 2, 4, 6]);
    let plane = random(&mut rng, &[5, 9]);
    let r = random(&mut rng, &[2, 3, 4, 6]);
    let ana = concat_plane_backward(&r).unwrap();
    let num = numeric(&x, |x| {
        project(&concat_plane(x, &[&plane, &plane]).unwrap(), &r)
    });
    vec![("concat".into(), rel_err(&num, &as_f64(ana.data())))]
}

pub fn sigmoid_bce_logits() -> Errors {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::from_vec(
        &[64],
        (0..64).map(|_| rng.random_range(-4.0..4.0f32)).collect(),
    )
    .unwrap();
    let y: Vec<f32> = (0..64).map(|_| rng.random_range(0..2) as f32).collect();
    let (_, ana) = sigmoid_bce(z.data(), &y).unwrap();
    let num = numeric(&z, |z| sigmoid_bce(z.data(), &y).unwrap().0);
    vec![("sigmoid+bce".into(), rel_err(&num, &as_f64(&ana)))]
}

struct NetworkEval {
    loss: f64,
    grads: Vec<Vec<f32>>,
    switches: Vec<PoolIndices>,
}

fn network_eval(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    images: &[Tensor],
    planes: &[Tensor],
    r: &Tensor,
) -> NetworkEval {
    let samples: Vec<Sample<'_>> = images
        .iter()
        .zip(planes)
        .map(|(image, plane)| Sample { image, plane })
        .collect();
    let mut p = params.clone();
    let cache = forward_train(&samples, &mut p, cfg).unwrap();
    let loss = project(&cache.logits, r);
    let grads = backward(&cache, r, &p, cfg).unwrap();
    NetworkEval {
        loss,
        grads: grads.0,
        switches: cache.pool_indices().into_iter().cloned().collect(),
    }
}

/// Projected logits of a two-block network against its first-layer weights.
///
/// Unpooling routes values through the pooling switches, so the loss jumps
/// wherever a probe flips a switch. Such coordinates are left out of the
/// comparison; more than a quarter of them failing that way counts as an
/// error.
pub fn network_first_layer(concat_block: usize) -> Errors {
    let cfg = NetworkConfig {
        input_h: 16,
        input_w: 16,
        blocks: 2,
        channels: vec![4, 6],
        concat_block,
        seed: 7,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images: Vec<Tensor> = (0..2).map(|_| random(&mut rng, &[1, 16, 16])).collect();
    let planes: Vec<Tensor> = (0..2).map(|_| random(&mut rng, &[7, 12])).collect();
    let r = random(&mut rng, &[2, 1, 16, 16]);
    let params = NetworkParams::init(&cfg).unwrap();
    let base = network_eval(&params, &cfg, &images, &planes, &r);
    let w0 = params.encoder[0].conv.weight.clone();
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    let mut flipped = 0;
    for i in 0..w0.len() {
        let probe = |delta: f32| {
            let mut p = params.clone();
            p.encoder[0].conv.weight.data_mut()[i] += delta;
            network_eval(&p, &cfg, &images, &planes, &r)
        };
        let (up, down) = (probe(NET_EPS), probe(-NET_EPS));
        if up.switches != base.switches || down.switches != base.switches {
            flipped += 1;
            continue;
        }
        num.push((up.loss - down.loss) / (2.0 * NET_EPS as f64));
        ana.push(base.grads[0][i] as f64);
    }
    let name = format!("network first layer (concat_block {concat_block})");
    let mut errors = vec![(name.clone(), rel_err(&num, &ana))];
    if flipped * 4 > w0.len() {
        errors.push((
            format!("{name}: {flipped} of {} probes flip a switch", w0.len()),
            f64::INFINITY,
        ));
    }
    errors
}
