//! Layers and parameter bookkeeping on top of candle tensors.

use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::distributions::sigmoid_t;
use crate::{Error, Result};

/// Named trainable variables of one optimizer group.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn extend(&mut self, other: &ParamSet) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// `self ← decay·self + (1 − decay)·online`, matched by position.
    pub fn ema_from(&self, online: &ParamSet, decay: f64) -> Result<()> {
        if self.len() != online.len() {
            return Err(Error::Shape("EMA parameter sets differ in length".into()));
        }
        for ((_, slow), (_, fast)) in self.entries.iter().zip(&online.entries) {
            let blended = ((slow.as_tensor() * decay)? + (fast.as_tensor().detach() * (1.0 - decay))?)?;
            slow.set(&blended)?;
        }
        Ok(())
    }

    pub fn copy_from(&self, other: &ParamSet) -> Result<()> {
        self.ema_from(other, 0.0)
    }
}

/// Creates parameters under a name prefix with a shared initialiser RNG.
pub struct Builder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamSet, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        Self { params, rng, dtype, device: Device::Cpu, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn var(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.params.push(full, var.clone());
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.var(name, data, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.var(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.var(name, vec![value; n], shape)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        b.scope(name, |b| {
            Ok(Self { weight: b.uniform("weight", &[fan_in, fan_out], bound)?, bias: b.constant("bias", &[fan_out], 0.0)? })
        })
    }

    pub fn zeros(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self { weight: b.constant("weight", &[fan_in, fan_out], 0.0)?, bias: b.constant("bias", &[fan_out], 0.0)? })
        })
    }

    /// `x · W + b` over the last dimension of a rank-2 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn fan_out(&self) -> usize {
        self.bias.dims()[0]
    }
}

pub const NORM_EPS: f64 = 1e-3;

/// Layer normalisation over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.scope(name, |b| Ok(Self { gain: b.constant("gain", &[dim], 1.0)?, bias: b.constant("bias", &[dim], 0.0)? }))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let centred = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Layer normalisation across channels of an `(N, C, H, W)` map, per pixel.
#[derive(Clone)]
pub struct ChannelNorm {
    pub gain: Var,
    pub bias: Var,
}

impl ChannelNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gain: b.constant("gain", &[1, channels, 1, 1], 1.0)?,
                bias: b.constant("bias", &[1, channels, 1, 1], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let centred = x.broadcast_sub(&x.mean_keepdim(1)?)?;
        let var = centred.sqr()?.mean_keepdim(1)?;
        let normed = centred.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Batch normalisation over rows of an `(N, F)` input.
///
/// `momentum` weighs the old running value: `running ← m·running + (1 − m)·batch`.
/// Running variance tracks the unbiased batch variance; normalisation in
/// training mode uses the biased one.
pub struct BatchNorm {
    pub gain: Var,
    pub bias: Var,
    pub momentum: f64,
    running: Mutex<RunningStats>,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize, momentum: f64) -> Result<Self> {
        let (gain, bias) = b.scope(name, |b| Ok((b.constant("gain", &[dim], 1.0)?, b.constant("bias", &[dim], 0.0)?)))?;
        let running = RunningStats {
            mean: Tensor::zeros(dim, b.dtype, &b.device)?,
            var: Tensor::ones(dim, b.dtype, &b.device)?,
        };
        Ok(Self { gain, bias, momentum, running: Mutex::new(running) })
    }

    pub fn running(&self) -> RunningStats {
        self.running.lock().expect("batch-norm stats lock").clone()
    }

    pub fn set_running(&self, stats: RunningStats) {
        *self.running.lock().expect("batch-norm stats lock") = stats;
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, _) = x.dims2()?;
        let (mean, var) = if train {
            if n < 2 {
                return Err(Error::InvalidArgument("batch normalisation in training mode needs at least 2 rows".into()));
            }
            let mean = x.mean_keepdim(0)?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
            let mut running = self.running.lock().expect("batch-norm stats lock");
            let m = self.momentum;
            let unbiased = (var.detach().squeeze(0)? * (n as f64 / (n - 1) as f64))?;
            running.mean = ((&running.mean * m)? + (mean.detach().squeeze(0)? * (1.0 - m))?)?;
            running.var = ((&running.var * m)? + (unbiased * (1.0 - m))?)?;
            (mean, var)
        } else {
            let running = self.running();
            (running.mean.unsqueeze(0)?, running.var.unsqueeze(0)?)
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Normalisation choice for a hidden layer.
pub enum Norm {
    Layer(LayerNorm),
    Batch(BatchNorm),
}

impl Norm {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Norm::Layer(n) => n.forward(x),
            Norm::Batch(n) => n.forward(x, train),
        }
    }
}

/// Kernel 4, stride 2, padding 1 convolution: halves the spatial size.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * 16) as f64).sqrt();
        b.scope(name, |b| {
            Ok(Self { weight: b.uniform("weight", &[c_out, c_in, 4, 4], bound)?, bias: b.constant("bias", &[c_out], 0.0)? })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), 1, 2, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Kernel 4, stride 2, padding 1 transposed convolution: doubles the spatial size.
#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
}

impl ConvTranspose2d {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * 4) as f64).sqrt();
        b.scope(name, |b| {
            Ok(Self { weight: b.uniform("weight", &[c_in, c_out, 4, 4], bound)?, bias: b.constant("bias", &[c_out], 0.0)? })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), 1, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Gated recurrent cell: `h = u ⊙ n + (1 − u) ⊙ h_prev`.
#[derive(Clone)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub size: usize,
}

impl Gru {
    pub fn new(b: &mut Builder, name: &str, input: usize, size: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self { input: Linear::new(b, "input", input, 3 * size)?, hidden: Linear::new(b, "hidden", size, 3 * size)?, size })
        })
    }

    pub fn forward(&self, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        let gx = self.input.forward(x)?;
        let gh = self.hidden.forward(h_prev)?;
        let n = self.size;
        let reset = sigmoid_t(&(gx.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let update = sigmoid_t(&(gx.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gx.narrow(1, 2 * n, n)? + (reset * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        let keep = (1.0 - &update)?;
        Ok(((update * cand)? + (keep * h_prev)?)?)
    }
}

/// Hidden layers of `Linear + LayerNorm + SiLU` followed by a linear output.
#[derive(Clone)]
pub struct Mlp {
    pub hidden: Vec<(Linear, LayerNorm)>,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        b: &mut Builder,
        name: &str,
        input: usize,
        units: usize,
        layers: usize,
        output: usize,
        zero_output: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let mut hidden = Vec::with_capacity(layers);
            let mut width = input;
            for i in 0..layers {
                let lin = Linear::new(b, &format!("{i}"), width, units)?;
                let norm = LayerNorm::new(b, &format!("{i}.norm"), units)?;
                hidden.push((lin, norm));
                width = units;
            }
            let out = if zero_output { Linear::zeros(b, "out", width, output)? } else { Linear::new(b, "out", width, output)? };
            Ok(Self { hidden, out })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (lin, norm) in &self.hidden {
            h = norm.forward(&lin.forward(&h)?)?.silu()?;
        }
        self.out.forward(&h)
    }
}

/// Applies `f` to a `(..., F)` tensor by flattening leading dimensions.
pub fn apply_rows(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (lead, last) = dims.split_at(dims.len() - 1);
    let rows: usize = lead.iter().product();
    let y = f(&x.reshape((rows, last[0]))?)?;
    let mut out_dims = lead.to_vec();
    out_dims.push(y.dim(1)?);
    Ok(y.reshape(out_dims)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn builder_parts() -> (ParamSet, ChaCha8Rng) {
        (ParamSet::new(), ChaCha8Rng::seed_from_u64(0))
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn names_follow_scopes() {
        let (mut ps, mut rng) = builder_parts();
        let mut b = Builder::new(&mut ps, &mut rng, DType::F32);
        b.scope("enc", |b| Linear::new(b, "0", 3, 4)).unwrap();
        Mlp::new(&mut b, "head", 4, 8, 2, 1, true).unwrap();
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "enc.0.weight");
        assert!(names.contains(&"head.1.norm.gain"));
        assert!(names.contains(&"head.out.bias"));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let (mut ps, mut rng) = builder_parts();
        let mut b = Builder::new(&mut ps, &mut rng, DType::F64);
        let ln = LayerNorm::new(&mut b, "ln", 16).unwrap();
        let x = (rand_tensor(&mut rng, &[5, 16]) * 10.0).unwrap();
        let y = ln.forward(&x).unwrap();
        let mean: Vec<f64> = y.mean(1).unwrap().to_vec1().unwrap();
        let var: Vec<f64> = y.sqr().unwrap().mean(1).unwrap().to_vec1().unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_training_and_running_statistics() {
        let (mut ps, mut rng) = builder_parts();
        let mut b = Builder::new(&mut ps, &mut rng, DType::F64);
        let bn = BatchNorm::new(&mut b, "bn", 3, 0.9).unwrap();
        let x = ((rand_tensor(&mut rng, &[64, 3]) * 4.0).unwrap() + 2.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean: Vec<f64> = y.mean(0).unwrap().to_vec1().unwrap();
        let var: Vec<f64> = y.sqr().unwrap().mean(0).unwrap().to_vec1().unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-2);
        }
        let batch_mean: Vec<f64> = x.mean(0).unwrap().to_vec1().unwrap();
        let running: Vec<f64> = bn.running().mean.to_vec1().unwrap();
        for (r, m) in running.iter().zip(&batch_mean) {
            assert!((r - 0.1 * m).abs() < 1e-12);
        }
        // Eval mode is deterministic and uses the running statistics only.
        let a = bn.forward(&x.narrow(0, 0, 1).unwrap(), false).unwrap();
        let c = bn.forward(&x, false).unwrap().narrow(0, 0, 1).unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), c.to_vec2::<f64>().unwrap());
        assert!(bn.forward(&x.narrow(0, 0, 1).unwrap(), true).is_err());
    }

    #[test]
    fn conv_shapes_halve_and_double() {
        let (mut ps, mut rng) = builder_parts();
        let mut b = Builder::new(&mut ps, &mut rng, DType::F32);
        let conv = Conv2d::new(&mut b, "c", 3, 8).unwrap();
        let deconv = ConvTranspose2d::new(&mut b, "d", 8, 3).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 8, 8, 8]);
        assert_eq!(deconv.forward(&y).unwrap().dims(), &[2, 3, 16, 16]);
    }

    #[test]
    fn closed_update_gate_keeps_previous_state() {
        let (mut ps, mut rng) = builder_parts();
        let mut b = Builder::new(&mut ps, &mut rng, DType::F32);
        let gru = Gru::new(&mut b, "gru", 5, 4).unwrap();
        let mut bias = vec![0.0f32; 12];
        bias[4..8].fill(-1e9);
        gru.input.bias.set(&Tensor::new(bias.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let x = rand_tensor(&mut rng, &[3, 5]).to_dtype(DType::F32).unwrap();
        let h = rand_tensor(&mut rng, &[3, 4]).to_dtype(DType::F32).unwrap();
        let out = gru.forward(&x, &h).unwrap();
        assert_eq!(out.to_vec2::<f32>().unwrap(), h.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn gru_rows_are_independent() {
        let (mut ps, mut rng) = builder_parts();
        let mut b = Builder::new(&mut ps, &mut rng, DType::F64);
        let gru = Gru::new(&mut b, "gru", 6, 5).unwrap();
        let x = rand_tensor(&mut rng, &[4, 6]);
        let h = rand_tensor(&mut rng, &[4, 5]);
        let batched: Vec<Vec<f64>> = gru.forward(&x, &h).unwrap().to_vec2().unwrap();
        for i in 0..4 {
            let row = gru.forward(&x.narrow(0, i, 1).unwrap(), &h.narrow(0, i, 1).unwrap()).unwrap();
            let row: Vec<Vec<f64>> = row.to_vec2().unwrap();
            for (a, b) in row[0].iter().zip(&batched[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_blends_toward_online() {
        let (mut fast, mut rng) = builder_parts();
        let mut slow = ParamSet::new();
        Builder::new(&mut fast, &mut rng, DType::F64).constant("w", &[2], 1.0).unwrap();
        Builder::new(&mut slow, &mut rng, DType::F64).constant("w", &[2], 0.0).unwrap();
        slow.ema_from(&fast, 0.99).unwrap();
        let v: Vec<f64> = slow.vars()[0].as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.01).abs() < 1e-15);
        slow.ema_from(&fast, 0.0).unwrap();
        assert_eq!(slow.vars()[0].as_tensor().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }
}
