#![allow(dead_code)]

use wmrl::config::TrainConfig;

/// A model small enough for unit-speed tests: 16 px frames, two conv stages.
pub fn tiny(env: &str) -> TrainConfig {
    TrainConfig {
        env: env.to_string(),
        seed: 3,
        env_steps: 400,
        image_size: 16,
        cnn_depth: 4,
        deter: 16,
        hidden: 16,
        units: 16,
        mlp_layers: 1,
        num_latents: 4,
        classes_per_latent: 4,
        batch_size: 4,
        batch_length: 8,
        horizon: 4,
        min_replay: 64,
        train_ratio: 32,
        env_instances: 2,
        eval_every: 0,
        eval_episodes: 1,
        checkpoint_every: 0,
        replay_capacity: 10_000,
        ..TrainConfig::default()
    }
}

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmrl::nn::ParamSet;

/// Adds `N(0, std)`-ish uniform noise to every parameter so zero-initialised
/// layers carry signal.
pub fn jitter(params: &ParamSet, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in params.iter() {
        let t = var.as_tensor();
        let vals: Vec<f64> = t.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let noisy: Vec<f64> = vals.iter().map(|v| v + rng.random_range(-std..std) * 1.7).collect();
        let new = Tensor::from_vec(noisy, t.shape(), t.device()).unwrap().to_dtype(t.dtype()).unwrap();
        var.set(&new).unwrap();
    }
}

fn element(var: &Var, i: usize) -> f64 {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]
}

fn set_element(var: &Var, i: usize, value: f64) {
    let t = var.as_tensor();
    let mut vals: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
    vals[i] = value;
    var.set(&Tensor::from_vec(vals, t.shape(), t.device()).unwrap()).unwrap();
}

#[derive(Debug)]
pub struct GradientCheck {
    pub checked: usize,
    /// `(parameter, index, analytic, numeric)` outside tolerance.
    pub failures: Vec<(String, usize, f64, f64)>,
    pub max_rel_err: f64,
}

/// Compares analytic gradients with central differences on `picks` random
/// scalar parameters. `tol` is relative; entries where both values are below
/// `floor` in magnitude count as agreeing.
pub fn gradient_check(
    params: &ParamSet,
    grads: &GradStore,
    mut loss: impl FnMut() -> f64,
    picks: usize,
    seed: u64,
    step: f64,
    tol: f64,
    floor: f64,
) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<(&str, &Var)> = params.iter().collect();
    let mut failures = Vec::new();
    let mut max_rel_err = 0.0f64;
    for _ in 0..picks {
        let (name, var) = entries[rng.random_range(0..entries.len())];
        let i = rng.random_range(0..var.elem_count());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i])
            .unwrap_or(0.0);
        let orig = element(var, i);
        set_element(var, i, orig + step);
        let up = loss();
        set_element(var, i, orig - step);
        let down = loss();
        set_element(var, i, orig);
        let numeric = (up - down) / (2.0 * step);
        let scale = analytic.abs().max(numeric.abs());
        if scale > floor {
            let rel = (analytic - numeric).abs() / scale;
            max_rel_err = max_rel_err.max(rel);
            if rel > tol {
                failures.push((name.to_string(), i, analytic, numeric));
            }
        }
    }
    GradientCheck { checked: picks, failures, max_rel_err }
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

use wmrl::replay::SequenceBatch;

/// Random replay-shaped batch; `is_first` is set at t=0 and at `boundaries`.
pub fn random_batch(b: usize, t: usize, size: usize, action_dim: usize, discrete: bool, boundaries: &[usize], seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * t;
    let mut actions = Vec::with_capacity(n * action_dim);
    let mut is_first = Vec::with_capacity(n);
    for _ in 0..b {
        for step in 0..t {
            let first = step == 0 || boundaries.contains(&step);
            is_first.push(first);
            if first {
                actions.extend(std::iter::repeat_n(0.0, action_dim));
            } else if discrete {
                let k = rng.random_range(0..action_dim);
                actions.extend((0..action_dim).map(|j| if j == k { 1.0 } else { 0.0 }));
            } else {
                actions.extend((0..action_dim).map(|_| rng.random_range(-1.0f32..1.0)));
            }
        }
    }
    SequenceBatch {
        batch_size: b,
        length: t,
        image_size: size,
        action_dim,
        obs: (0..n * 3 * size * size).map(|_| rng.random()).collect(),
        actions,
        rewards: (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        conts: (0..n).map(|_| if rng.random_bool(0.9) { 1.0 } else { 0.0 }).collect(),
        is_first,
        origins: vec![(0, 0); b],
    }
}

/// Fits a symlog-discrete head to random targets by cross entropy and returns
/// the final mean absolute error in raw units.
pub fn fit_random_targets(steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<f64> = (0..64).map(|_| rng.random_range(-100.0..100.0)).collect();
    let inputs: Vec<f32> = (0..64 * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::from_vec(inputs, (64, 16), &candle_core::Device::Cpu).unwrap();
    let coder = wmrl::distributions::TwoHotCoder::default();
    let mut params = ParamSet::new();
    let head = {
        let mut b = wmrl::nn::Builder::new(&mut params, &mut rng, candle_core::DType::F32);
        wmrl::nn::Mlp::new(&mut b, "head", 16, 128, 2, coder.len(), true).unwrap()
    };
    let cfg = wmrl::optim::AdamConfig { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1000.0 };
    let mut opt = wmrl::optim::Adam::new(params, cfg).unwrap();
    for _ in 0..steps {
        let logits = head.forward(&x).unwrap();
        let loss = coder.nll_t(&logits, &targets).unwrap().mean_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
    }
    let pred: Vec<f32> = coder.predict_t(&head.forward(&x).unwrap()).unwrap().to_vec1().unwrap();
    pred.iter().zip(&targets).map(|(p, t)| (*p as f64 - t).abs()).sum::<f64>() / 64.0
}

