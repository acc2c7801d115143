//! Numerical primitives shared by the network heads.
//!
//! Scalar functions (`f64` slices) are the reference definitions; the `*_t`
//! tensor variants are what the models run and are tested against them.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

pub fn symexp(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Symlog without gradient concerns; used only on targets.
pub fn symlog_t(x: &Tensor) -> Result<Tensor> {
    Ok(x.sign()?.mul(&(x.abs()? + 1.0)?.log()?)?)
}

/// Symexp that stays differentiable at zero (derivative 1 there).
pub fn symexp_t(y: &Tensor) -> Result<Tensor> {
    let positive = y.ge(0.0)?;
    let up = (y.exp()? - 1.0)?;
    let down = (1.0 - y.neg()?.exp()?)?;
    Ok(positive.where_cond(&up, &down)?)
}

pub fn log_softmax_t(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_t(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_t(logits)?.exp()?)
}

pub fn sigmoid_t(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `ln(1 + e^x)`, linear above 20 to avoid overflow.
pub fn softplus_t(x: &Tensor) -> Result<Tensor> {
    let small = x.le(20.0)?;
    let clipped = small.where_cond(x, &x.zeros_like()?)?;
    let soft = (clipped.exp()? + 1.0)?.log()?;
    Ok(small.where_cond(&soft, x)?)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Uniform bin grid in symlog space with twohot encode/decode.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoHotCoder {
    bins: Vec<f64>,
}

impl Default for TwoHotCoder {
    fn default() -> Self {
        Self::new(255, -20.0, 20.0).expect("valid default grid")
    }
}

impl TwoHotCoder {
    pub fn new(bin_count: usize, lo: f64, hi: f64) -> Result<Self> {
        if bin_count < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "twohot grid needs >= 2 bins and lo < hi, got {bin_count} bins over [{lo}, {hi}]"
            )));
        }
        let step = (hi - lo) / (bin_count - 1) as f64;
        let mut bins: Vec<f64> = (0..bin_count).map(|i| lo + step * i as f64).collect();
        bins[bin_count - 1] = hi;
        // Pin the centre of odd symmetric grids to exactly zero.
        if bin_count % 2 == 1 && lo == -hi {
            bins[bin_count / 2] = 0.0;
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.bins[0]
    }

    pub fn hi(&self) -> f64 {
        self.bins[self.bins.len() - 1]
    }

    /// Index `k` of the bracketing pair `(k, k + 1)` and the weight on `k + 1`.
    fn bracket(&self, target: f64) -> (usize, f64) {
        let t = target.clamp(self.lo(), self.hi());
        let upper = self.bins.partition_point(|b| *b <= t);
        if upper >= self.bins.len() {
            return (self.bins.len() - 2, 1.0);
        }
        let k = upper - 1;
        let (a, b) = (self.bins[k], self.bins[k + 1]);
        (k, (t - a) / (b - a))
    }

    /// Twohot encoding of a symlog-space target; out-of-range targets clamp.
    pub fn encode(&self, target: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.bins.len()];
        let (k, w) = self.bracket(target);
        out[k] += 1.0 - w;
        out[k + 1] += w;
        out
    }

    /// Expected bin position under `probs` (symlog space).
    pub fn decode(&self, probs: &[f64]) -> Result<f64> {
        if probs.len() != self.bins.len() {
            return Err(Error::Shape(format!("expected {} probabilities, got {}", self.bins.len(), probs.len())));
        }
        check_finite(probs, "twohot probabilities")?;
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("not a probability vector (sum {sum})")));
        }
        Ok(probs.iter().zip(&self.bins).map(|(p, b)| p * b).sum())
    }

    /// Twohot rows for raw (pre-symlog) targets, shape `(n, bins)`.
    pub fn encode_raw_t(&self, targets: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        check_finite(targets, "twohot targets")?;
        let k = self.bins.len();
        let mut data = vec![0.0f64; targets.len() * k];
        for (row, t) in data.chunks_mut(k).zip(targets) {
            let (i, w) = self.bracket(symlog(*t));
            row[i] += 1.0 - w;
            row[i + 1] += w;
        }
        Ok(Tensor::from_vec(data, (targets.len(), k), device)?.to_dtype(dtype)?)
    }

    /// Raw-unit prediction `symexp(E[bins])` from logits `(.., bins)`; differentiable.
    pub fn predict_t(&self, logits: &Tensor) -> Result<Tensor> {
        let bins = Tensor::from_slice(&self.bins, self.bins.len(), logits.device())?.to_dtype(logits.dtype())?;
        let expected = softmax_t(logits)?.broadcast_mul(&bins)?.sum(D::Minus1)?;
        symexp_t(&expected)
    }

    /// Cross entropy of logits `(n, bins)` against `twohot(symlog(target))`, shape `(n)`.
    pub fn nll_t(&self, logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
        let target = self.encode_raw_t(targets, logits.dtype(), logits.device())?;
        Ok((log_softmax_t(logits)? * target)?.sum(D::Minus1)?.neg()?)
    }
}

/// Cross entropy between `twohot(symlog(target))` and `softmax(logits)`.
pub fn symlog_discrete_nll(coder: &TwoHotCoder, logits: &[f64], target: f64) -> Result<f64> {
    if logits.len() != coder.len() {
        return Err(Error::Shape(format!("expected {} logits, got {}", coder.len(), logits.len())));
    }
    check_finite(logits, "logits")?;
    check_finite(&[target], "target")?;
    let y = coder.encode(symlog(target));
    let logp = log_softmax(logits);
    Ok(-y.iter().zip(&logp).map(|(y, l)| if *y > 0.0 { y * l } else { 0.0 }).sum::<f64>())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoricalLatentSpec {
    pub num_latents: usize,
    pub classes_per_latent: usize,
    pub unimix: f64,
}

impl Default for CategoricalLatentSpec {
    fn default() -> Self {
        Self { num_latents: 32, classes_per_latent: 32, unimix: 0.01 }
    }
}

impl CategoricalLatentSpec {
    pub fn flat_size(&self) -> usize {
        self.num_latents * self.classes_per_latent
    }
}

/// `(1 - u)·softmax(logits) + u / C` along the last dimension.
pub fn unimix_probs_t(logits: &Tensor, unimix: f64) -> Result<Tensor> {
    let classes = logits.dim(D::Minus1)? as f64;
    let probs = softmax_t(logits)?;
    if unimix == 0.0 {
        return Ok(probs);
    }
    Ok(((probs * (1.0 - unimix))? + unimix / classes)?)
}

/// How a stochastic state is produced from its logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSampling {
    /// One-hot sample with straight-through gradients.
    Sample,
    /// Most likely class, no gradient to the logits.
    Mode,
    /// The unimixed probabilities themselves; smooth, used for gradient checks.
    Probabilities,
}

/// Index drawn from `probs` by inverse CDF with a single uniform draw.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Index of the first largest entry of an `f32` row.
pub fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot samples from unimixed probabilities over the last dimension, with
/// gradient `d probs / d logits` (`sample + probs - sg(probs)`).
pub fn categorical_sample_st(logits: &Tensor, spec: &CategoricalLatentSpec, rng: &mut impl Rng) -> Result<Tensor> {
    latent_from_logits(logits, spec.unimix, LatentSampling::Sample, rng)
}

pub(crate) fn latent_from_logits(
    logits: &Tensor,
    unimix: f64,
    mode: LatentSampling,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let probs = unimix_probs_t(logits, unimix)?;
    if mode == LatentSampling::Probabilities {
        return Ok(probs);
    }
    let onehot = match mode {
        LatentSampling::Sample => onehot_rows(&probs, |row| sample_index(row, rng))?,
        _ => onehot_rows(&probs, argmax)?,
    };
    match mode {
        LatentSampling::Sample => Ok((onehot + (&probs - probs.detach())?)?),
        _ => Ok(onehot),
    }
}

/// `KL(p ‖ q)` of unimixed categoricals `(.., L, C)`, summed over latents: shape `(..)`.
pub fn kl_categorical_t(p_logits: &Tensor, q_logits: &Tensor, unimix: f64) -> Result<Tensor> {
    let p = unimix_probs_t(p_logits, unimix)?;
    let q = unimix_probs_t(q_logits, unimix)?;
    let kl = (&p * (p.log()? - q.log()?)?)?.sum(D::Minus1)?;
    Ok(kl.sum(D::Minus1)?)
}

/// KL between two `(L, C)` latent logit matrices.
pub fn kl_categorical(p_logits: &Tensor, q_logits: &Tensor, spec: &CategoricalLatentSpec) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", p_logits.shape(), q_logits.shape())));
    }
    for t in [p_logits, q_logits] {
        let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        check_finite(&v, "KL logits")?;
    }
    Ok(kl_categorical_t(p_logits, q_logits, spec.unimix)?.to_dtype(DType::F64)?.sum_all()?.to_scalar()?)
}

/// Categorical entropy of `softmax(logits)` along the last dimension.
pub fn categorical_entropy_t(logits: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_t(logits)?;
    Ok((logp.exp()? * logp)?.sum(D::Minus1)?.neg()?)
}

/// `log p(flag)` for Bernoulli logits, elementwise.
pub fn bernoulli_log_prob_t(logits: &Tensor, flags: &Tensor) -> Result<Tensor> {
    let log_p = softplus_t(&logits.neg()?)?.neg()?;
    let log_not_p = softplus_t(logits)?.neg()?;
    Ok(((flags * log_p)? + ((1.0 - flags)? * log_not_p)?)?)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal normal log density summed over the last dimension.
pub fn normal_log_prob_t(mean: &Tensor, std: &Tensor, x: &Tensor) -> Result<Tensor> {
    let z = ((x - mean)? / std)?;
    let per_dim = (((z.sqr()? * -0.5)? - std.log()?)? - HALF_LN_2PI)?;
    Ok(per_dim.sum(D::Minus1)?)
}

pub fn normal_entropy_t(std: &Tensor) -> Result<Tensor> {
    Ok((std.log()? + (0.5 + HALF_LN_2PI))?.sum(D::Minus1)?)
}

/// `log softmax(logits)[a]` for one-hot actions along the last dimension.
pub fn onehot_log_prob_t(logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    Ok((log_softmax_t(logits)? * onehot)?.sum(D::Minus1)?)
}

pub fn bernoulli_logprob(logit: f64, flag: f64) -> Result<f64> {
    check_finite(&[logit], "bernoulli logit")?;
    if flag != 0.0 && flag != 1.0 {
        return Err(Error::InvalidArgument(format!("bernoulli flag must be 0 or 1, got {flag}")));
    }
    // log σ(l) = -softplus(-l)
    let log_sigmoid = |l: f64| -((-l).max(0.0) + (-l.abs()).exp().ln_1p());
    Ok(if flag == 1.0 { log_sigmoid(logit) } else { log_sigmoid(-logit) })
}

pub fn diag_normal_logprob(mean: &[f64], std: &[f64], action: &[f64]) -> Result<f64> {
    if mean.len() != std.len() || mean.len() != action.len() {
        return Err(Error::Shape("normal parameters and action differ in length".into()));
    }
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("normal std must be positive".into()));
    }
    Ok(mean
        .iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| -0.5 * ((a - m) / s).powi(2) - s.ln() - HALF_LN_2PI)
        .sum())
}

pub fn onehot_logprob(logits: &[f64], action: usize) -> Result<f64> {
    check_finite(logits, "one-hot logits")?;
    log_softmax(logits)
        .get(action)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("action {action} outside 0..{}", logits.len())))
}

/// The head output distributions, for entropy queries.
#[derive(Debug, Clone)]
pub enum HeadDist {
    Bernoulli { logit: f64 },
    DiagNormal { mean: Vec<f64>, std: Vec<f64> },
    OneHot { logits: Vec<f64> },
}

pub fn entropy(dist: &HeadDist) -> Result<f64> {
    match dist {
        HeadDist::Bernoulli { logit } => {
            let p = bernoulli_logprob(*logit, 1.0)?.exp();
            let q = 1.0 - p;
            let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
            Ok(term(p) + term(q))
        }
        HeadDist::DiagNormal { std, .. } => {
            if std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::InvalidArgument("normal std must be positive".into()));
            }
            Ok(std.iter().map(|s| 0.5 + HALF_LN_2PI + s.ln()).sum())
        }
        HeadDist::OneHot { logits } => {
            check_finite(logits, "one-hot logits")?;
            Ok(-log_softmax(logits).iter().map(|l| l.exp() * l).sum::<f64>())
        }
    }
}

/// Policy-shaped output: one-hot categorical or diagonal normal.
///
/// Normal means are squashed by `tanh` into the action box; standard
/// deviations are `softplus(raw) + min_std`.
#[derive(Debug, Clone)]
pub enum ActionDist {
    Categorical { logits: Tensor },
    Normal { mean: Tensor, std: Tensor },
}

impl ActionDist {
    /// Width of the raw head output for an action space of `dim` components.
    pub fn raw_width(dim: usize, discrete: bool) -> usize {
        if discrete {
            dim
        } else {
            2 * dim
        }
    }

    pub fn from_raw(raw: &Tensor, discrete: bool, min_std: f64) -> Result<Self> {
        if discrete {
            return Ok(ActionDist::Categorical { logits: raw.clone() });
        }
        let dim = raw.dim(D::Minus1)? / 2;
        let mean = raw.narrow(D::Minus1, 0, dim)?.tanh()?;
        let std = (softplus_t(&raw.narrow(D::Minus1, dim, dim)?)? + min_std)?;
        Ok(ActionDist::Normal { mean, std })
    }

    pub fn log_prob(&self, action: &Tensor) -> Result<Tensor> {
        match self {
            ActionDist::Categorical { logits } => onehot_log_prob_t(logits, action),
            ActionDist::Normal { mean, std } => normal_log_prob_t(mean, std, action),
        }
    }

    pub fn entropy(&self) -> Result<Tensor> {
        match self {
            ActionDist::Categorical { logits } => categorical_entropy_t(logits),
            ActionDist::Normal { std, .. } => normal_entropy_t(std),
        }
    }

    /// A sample: detached one-hot rows, or reparameterised `mean + std·ε`.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            ActionDist::Categorical { logits } => onehot_rows(&softmax_t(logits)?, |row| sample_index(row, rng)),
            ActionDist::Normal { mean, std } => {
                let n = mean.elem_count();
                let eps: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                let eps = Tensor::from_vec(eps, mean.shape(), mean.device())?.to_dtype(mean.dtype())?;
                Ok((mean + (std * eps)?)?)
            }
        }
    }

    /// Most likely one-hot row, or the mean.
    pub fn mode(&self) -> Result<Tensor> {
        match self {
            ActionDist::Categorical { logits } => onehot_rows(logits, |row| argmax(row)),
            ActionDist::Normal { mean, .. } => Ok(mean.clone()),
        }
    }
}

/// Detached one-hot rows choosing `pick(row)` along the last dimension.
fn onehot_rows(t: &Tensor, mut pick: impl FnMut(&[f64]) -> usize) -> Result<Tensor> {
    let classes = t.dim(D::Minus1)?;
    let flat: Vec<f64> = t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if flat.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("distribution parameters".into()));
    }
    let mut onehot = vec![0.0f64; flat.len()];
    for (row, out) in flat.chunks(classes).zip(onehot.chunks_mut(classes)) {
        out[pick(row)] = 1.0;
    }
    Ok(Tensor::from_vec(onehot, t.shape(), t.device())?.to_dtype(t.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn symlog_values() {
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        assert!((symexp(symlog(12.34)) - 12.34).abs() < 1e-6);
        assert_eq!(symlog(-3.0), -symlog(3.0));
    }

    #[test]
    fn tensor_symexp_matches_scalar_and_has_unit_slope_at_zero() {
        let ys = [-3.0, -0.5, 0.0, 0.25, 4.0];
        let var = Var::from_tensor(&t64(&ys, &[5])).unwrap();
        let out = symexp_t(var.as_tensor()).unwrap();
        let vals: Vec<f64> = out.to_vec1().unwrap();
        for (y, v) in ys.iter().zip(&vals) {
            assert!((symexp(*y) - v).abs() < 1e-12);
        }
        let grads = out.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().to_vec1().unwrap();
        assert_eq!(g[2], 1.0);
        assert!((g[4] - 4.0f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn grid_shape() {
        let c = TwoHotCoder::default();
        assert_eq!(c.len(), 255);
        assert_eq!(c.lo(), -20.0);
        assert_eq!(c.hi(), 20.0);
        assert_eq!(c.bins()[127], 0.0);
        assert!(c.bins().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn encode_examples() {
        let c = TwoHotCoder::default();
        let k = 40;
        let on = c.encode(c.bins()[k]);
        assert_eq!(on[k], 1.0);
        assert_eq!(on.iter().sum::<f64>(), 1.0);
        let mid = c.encode(0.5 * (c.bins()[k] + c.bins()[k + 1]));
        assert!((mid[k] - 0.5).abs() < 1e-9 && (mid[k + 1] - 0.5).abs() < 1e-9);
        let over = c.encode(c.hi() + 5.0);
        assert_eq!(over[254], 1.0);
        let under = c.encode(c.lo() - 5.0);
        assert_eq!(under[0], 1.0);
    }

    #[test]
    fn decode_examples() {
        let c = TwoHotCoder::default();
        let mut onehot = vec![0.0; 255];
        onehot[17] = 1.0;
        assert_eq!(c.decode(&onehot).unwrap(), c.bins()[17]);
        let uniform = vec![1.0 / 255.0; 255];
        assert!(c.decode(&uniform).unwrap().abs() < 1e-12);
        assert!(c.decode(&vec![0.5; 255]).is_err());
        assert!(c.decode(&[1.0]).is_err());
    }

    #[test]
    fn nll_equals_entropy_when_logits_match_target() {
        let c = TwoHotCoder::default();
        let target = 3.3;
        let y = c.encode(symlog(target));
        let logits: Vec<f64> = y.iter().map(|p| if *p > 0.0 { p.ln() } else { -1e4 }).collect();
        let h: f64 = y.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
        let nll = symlog_discrete_nll(&c, &logits, target).unwrap();
        assert!((nll - h).abs() < 1e-9, "{nll} vs {h}");
    }

    #[test]
    fn nll_vanishes_with_growing_margin() {
        let c = TwoHotCoder::default();
        let target = symexp(c.bins()[200]);
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = vec![0.0; 255];
            logits[200] = margin;
            let nll = symlog_discrete_nll(&c, &logits, target).unwrap();
            assert!(nll < last);
            last = nll;
        }
        assert!(last < 1e-18);
        assert!(symlog_discrete_nll(&c, &vec![f64::NAN; 255], 0.0).is_err());
        assert!(symlog_discrete_nll(&c, &vec![0.0; 255], f64::INFINITY).is_err());
    }

    #[test]
    fn tensor_nll_matches_brute_force() {
        let c = TwoHotCoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 6;
        let logits: Vec<f64> = (0..n * 255).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-500.0..500.0)).collect();
        let got: Vec<f64> = c.nll_t(&t64(&logits, &[n, 255]), &targets).unwrap().to_vec1().unwrap();
        for i in 0..n {
            let row = &logits[i * 255..(i + 1) * 255];
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
            let y = c.encode(symlog(targets[i]));
            let brute: f64 = (0..255).map(|j| -y[j] * (row[j] - max - z.ln())).sum();
            assert!((got[i] - brute).abs() < 1e-9);
            assert!((symlog_discrete_nll(&c, row, targets[i]).unwrap() - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_decodes_expectation() {
        let c = TwoHotCoder::default();
        let y = c.encode(symlog(42.0));
        let logits: Vec<f64> = y.iter().map(|p| if *p > 0.0 { p.ln() } else { -1e3 }).collect();
        let v: Vec<f64> = c.predict_t(&t64(&logits, &[1, 255])).unwrap().to_vec1().unwrap();
        assert!((v[0] - 42.0).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_survive_unimix() {
        let spec = CategoricalLatentSpec::default();
        let mut logits = vec![0.0; 32];
        logits[3] = 1e9;
        let p: Vec<f64> = unimix_probs_t(&t64(&logits, &[1, 32]), spec.unimix)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!(p[3] >= 0.99);
        assert!(p.iter().all(|x| *x >= spec.unimix / 32.0 - 1e-15));
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let classes = 32;
        let rows = 100_000 / 4;
        let logits = Tensor::zeros((rows, 4, classes), DType::F32, &Device::Cpu).unwrap();
        let spec = CategoricalLatentSpec { num_latents: 4, classes_per_latent: classes, unimix: 0.01 };
        let s = categorical_sample_st(&logits, &spec, &mut rng).unwrap();
        let rowsum: Vec<f32> = s.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(rowsum.iter().all(|r| (*r - 1.0).abs() < 1e-6));
        let counts: Vec<f32> = s.sum((0, 1)).unwrap().to_vec1().unwrap();
        let n = (rows * 4) as f64;
        let p = 1.0 / classes as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() < 3.5 * sigma, "{c}");
        }
    }

    #[test]
    fn straight_through_gradient_is_probability_gradient() {
        // For linear f(z) = Σ w·z the ST gradient must equal d f(probs) / d logits.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [3usize, 5];
        let raw: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = t64(&w, &shape);
        let spec = CategoricalLatentSpec { num_latents: 3, classes_per_latent: 5, unimix: 0.01 };
        let var = Var::from_tensor(&t64(&raw, &shape)).unwrap();
        let z = categorical_sample_st(var.as_tensor(), &spec, &mut rng).unwrap();
        let g = (z * &wt).unwrap().sum_all().unwrap().backward().unwrap();
        let st: Vec<f64> = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let f = |logits: &[f64]| -> f64 {
            let p = unimix_probs_t(&t64(logits, &shape), spec.unimix).unwrap();
            (p * &wt).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        for i in 0..15 {
            let (mut up, mut down) = (raw.clone(), raw.clone());
            up[i] += 1e-5;
            down[i] -= 1e-5;
            let fd = (f(&up) - f(&down)) / 2e-5;
            assert!((fd - st[i]).abs() < 1e-4, "{i}: {fd} vs {}", st[i]);
        }
    }

    #[test]
    fn kl_examples() {
        let spec = CategoricalLatentSpec { num_latents: 2, classes_per_latent: 3, unimix: 0.01 };
        let p = t64(&[1.0, 0.0, -1.0, 0.3, 0.2, 0.1], &[2, 3]);
        let q = t64(&[0.0, 2.0, 0.0, -1.0, 0.5, 0.0], &[2, 3]);
        assert!(kl_categorical(&p, &p, &spec).unwrap().abs() < 1e-12);
        let pq = kl_categorical(&p, &q, &spec).unwrap();
        let qp = kl_categorical(&q, &p, &spec).unwrap();
        assert!(pq > 0.0 && qp > 0.0 && (pq - qp).abs() > 1e-3);
        let bad = t64(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0], &[2, 3]);
        assert!(kl_categorical(&bad, &q, &spec).is_err());
        // Brute force on unimixed probabilities.
        let mix = |l: &[f64]| -> Vec<f64> {
            let m = l.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
            l.iter().map(|x| 0.99 * (x - m).exp() / z + 0.01 / 3.0).collect()
        };
        let (pv, qv) = (p.flatten_all().unwrap().to_vec1::<f64>().unwrap(), q.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let mut brute = 0.0;
        for row in 0..2 {
            let (a, b) = (mix(&pv[row * 3..row * 3 + 3]), mix(&qv[row * 3..row * 3 + 3]));
            brute += a.iter().zip(&b).map(|(x, y)| x * (x.ln() - y.ln())).sum::<f64>();
        }
        assert!((pq - brute).abs() < 1e-12);
    }

    #[test]
    fn head_distribution_examples() {
        assert!((bernoulli_logprob(0.0, 1.0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(bernoulli_logprob(0.0, 0.5).is_err());
        assert!((diag_normal_logprob(&[0.0], &[1.0], &[0.0]).unwrap() + HALF_LN_2PI).abs() < 1e-15);
        assert!(diag_normal_logprob(&[0.0], &[0.0], &[0.0]).is_err());
        let a = 6;
        let h = entropy(&HeadDist::OneHot { logits: vec![0.3; a] }).unwrap();
        assert!((h - (a as f64).ln()).abs() < 1e-12);
        assert!((onehot_logprob(&[0.0, 0.0], 1).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(entropy(&HeadDist::DiagNormal { mean: vec![0.0], std: vec![-1.0] }).is_err());
        assert!((entropy(&HeadDist::Bernoulli { logit: 0.0 }).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tensor_heads_match_scalar_definitions() {
        let l = t64(&[-2.0, 0.5, 3.0], &[3]);
        let f = t64(&[1.0, 0.0, 1.0], &[3]);
        let got: Vec<f64> = bernoulli_log_prob_t(&l, &f).unwrap().to_vec1().unwrap();
        for (i, (l, f)) in [(-2.0, 1.0), (0.5, 0.0), (3.0, 1.0)].iter().enumerate() {
            assert!((got[i] - bernoulli_logprob(*l, *f).unwrap()).abs() < 1e-12);
        }
        let (m, s, x) = ([0.2, -0.3], [0.5, 1.5], [0.0, 1.0]);
        let lp: f64 = normal_log_prob_t(&t64(&m, &[1, 2]), &t64(&s, &[1, 2]), &t64(&x, &[1, 2]))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        assert!((lp - diag_normal_logprob(&m, &s, &x).unwrap()).abs() < 1e-12);
        let ent: f64 = normal_entropy_t(&t64(&s, &[1, 2])).unwrap().to_vec1::<f64>().unwrap()[0];
        let expect = entropy(&HeadDist::DiagNormal { mean: m.to_vec(), std: s.to_vec() }).unwrap();
        assert!((ent - expect).abs() < 1e-12);
        let logits = [0.1, 2.0, -1.0];
        let ce: f64 = categorical_entropy_t(&t64(&logits, &[1, 3])).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((ce - entropy(&HeadDist::OneHot { logits: logits.to_vec() }).unwrap()).abs() < 1e-12);
        let oh: f64 = onehot_log_prob_t(&t64(&logits, &[1, 3]), &t64(&[0.0, 0.0, 1.0], &[1, 3]))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        assert!((oh - onehot_logprob(&logits, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        let x = t64(&[-50.0, 0.0, 30.0, 1000.0], &[4]);
        let v: Vec<f64> = softplus_t(&x).unwrap().to_vec1().unwrap();
        assert!((v[1] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(v[3], 1000.0);
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
