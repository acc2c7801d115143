//! Actor-critic learning inside imagined rollouts of the world model.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ActorGrad, TrainConfig};
use crate::distributions::{ActionDist, LatentSampling, TwoHotCoder};
use crate::nn::{apply_rows, Builder, Mlp, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::world_model::{ModelState, WorldModel};
use crate::{Error, Result};

/// Gradient estimator weight: `0` is pathwise through the dynamics, `1` is reinforce.
pub fn resolve_rho(choice: ActorGrad, discrete: bool) -> f64 {
    match choice {
        ActorGrad::Auto => {
            if discrete {
                1.0
            } else {
                0.0
            }
        }
        ActorGrad::Reinforce => 1.0,
        ActorGrad::Dynamics => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_scale: f64,
    pub critic_ema_decay: f64,
    pub critic_ema_reg: f64,
    pub return_norm_decay: f64,
    pub return_norm_low: f64,
    pub return_norm_high: f64,
    pub rho: f64,
    pub detach_baseline: bool,
    pub min_std: f64,
    pub units: usize,
    pub mlp_layers: usize,
    pub actor: AdamConfig,
    pub critic: AdamConfig,
}

impl BehaviorConfig {
    pub fn new(cfg: &TrainConfig, discrete: bool) -> Self {
        let adam = |lr| AdamConfig {
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.ac_eps,
            clip: cfg.ac_clip,
        };
        Self {
            horizon: cfg.horizon,
            gamma: cfg.gamma,
            lambda: cfg.lambda,
            entropy_scale: cfg.entropy_scale,
            critic_ema_decay: cfg.critic_ema_decay,
            critic_ema_reg: cfg.critic_ema_reg,
            return_norm_decay: cfg.return_norm_decay,
            return_norm_low: cfg.return_norm_low,
            return_norm_high: cfg.return_norm_high,
            rho: resolve_rho(cfg.actor_grad, discrete),
            detach_baseline: cfg.detach_baseline,
            min_std: cfg.min_std,
            units: cfg.units,
            mlp_layers: cfg.mlp_layers,
            actor: adam(cfg.actor_lr),
            critic: adam(cfg.critic_lr),
        }
    }
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("percentile input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// EMA of the spread between two return percentiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnNormalizer {
    pub range_ema: f64,
    pub decay: f64,
    pub low: f64,
    pub high: f64,
}

impl ReturnNormalizer {
    pub fn new(decay: f64, low: f64, high: f64) -> Self {
        Self { range_ema: 0.0, decay, low, high }
    }

    pub fn update(&mut self, returns: &[f64]) -> Result<()> {
        let range = percentile(returns, self.high)? - percentile(returns, self.low)?;
        self.range_ema = self.decay * self.range_ema + (1.0 - self.decay) * range;
        Ok(())
    }

    /// Advantage divisor `max(1, S)`.
    pub fn scale(&self) -> f64 {
        self.range_ema.max(1.0)
    }
}

pub struct Actor {
    pub net: Mlp,
    pub discrete: bool,
    pub min_std: f64,
}

impl Actor {
    pub fn dist(&self, feat: &Tensor) -> Result<ActionDist> {
        let raw = apply_rows(feat, |f| self.net.forward(f))?;
        ActionDist::from_raw(&raw, self.discrete, self.min_std)
    }
}

/// Distributional critic over twohot bins.
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn logits(&self, feat: &Tensor) -> Result<Tensor> {
        apply_rows(feat, |f| self.net.forward(f))
    }

    pub fn value(&self, coder: &TwoHotCoder, feat: &Tensor) -> Result<Tensor> {
        coder.predict_t(&self.logits(feat)?)
    }
}

/// `H` imagined steps from `N` start states.
pub struct ImaginedTrajectory {
    /// `H + 1` states, the first being the start states.
    pub states: Vec<ModelState>,
    /// `(N, H + 1, feat)`.
    pub feats: Tensor,
    /// `H` action tensors `(N, A)`.
    pub actions: Vec<Tensor>,
    /// Policies that produced the actions, on non-detached states.
    pub policies: Vec<ActionDist>,
    /// `(N, H)`: reward and continue probability predicted at state `t + 1`.
    pub rewards: Tensor,
    pub conts: Tensor,
    /// `(N, H + 1)` online critic values.
    pub values: Tensor,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Rolls the prior forward `horizon` steps with actions from `actor`.
///
/// `latent` selects how prior latents are formed; training uses straight-through samples.
pub fn imagine(
    wm: &WorldModel,
    actor: &Actor,
    critic: &Critic,
    start: &ModelState,
    horizon: usize,
    latent: LatentSampling,
    rng: &mut impl Rng,
) -> Result<ImaginedTrajectory> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("imagination horizon must be at least 1".into()));
    }
    let mut state = start.detach();
    let mut states = vec![state.clone()];
    let mut feats = vec![state.feat()?];
    let mut actions = Vec::with_capacity(horizon);
    let mut policies = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let dist = actor.dist(feats.last().expect("non-empty"))?;
        let action = dist.sample(rng)?;
        state = wm.img_step(&state, &action, latent, rng)?;
        feats.push(state.feat()?);
        states.push(state.clone());
        actions.push(action);
        policies.push(dist);
    }
    let feats = Tensor::stack(&feats, 1)?;
    let future = feats.narrow(1, 1, horizon)?;
    let rewards = wm.reward(&future)?;
    let conts = wm.cont_prob(&future)?;
    let values = critic.value(&wm.coder, &feats)?;
    Ok(ImaginedTrajectory { states, feats, actions, policies, rewards, conts, values })
}

/// λ-returns over an imagined rollout, `(N, H)`, differentiable in all inputs.
pub fn imagined_lambda_returns(rewards: &Tensor, conts: &Tensor, values: &Tensor, gamma: f64, lambda: f64) -> Result<Tensor> {
    let (n, h) = rewards.dims2()?;
    if conts.dims() != [n, h] || values.dims() != [n, h + 1] {
        return Err(Error::Shape(format!(
            "rewards {:?}, continues {:?}, values {:?}",
            rewards.dims(),
            conts.dims(),
            values.dims()
        )));
    }
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let mut next = col(values, h)?;
    let mut out = vec![next.clone(); h];
    for i in (0..h).rev() {
        let mix = ((col(values, i + 1)? * (1.0 - lambda))? + (&next * lambda)?)?;
        next = (col(rewards, i)? + ((col(conts, i)? * gamma)? * mix)?)?;
        out[i] = next.clone();
    }
    Ok(Tensor::cat(&out, 1)?)
}

/// Scalar form of [`imagined_lambda_returns`] for one trajectory.
pub fn lambda_returns(rewards: &[f64], conts: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    if conts.len() != h || values.len() != h + 1 {
        return Err(Error::Shape(format!("{h} rewards need {h} continues and {} values", h + 1)));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for i in (0..h).rev() {
        next = rewards[i] + gamma * conts[i] * ((1.0 - lambda) * values[i + 1] + lambda * next);
        out[i] = next;
    }
    Ok(out)
}

/// Critic regression onto `sg(R̂λ)` plus the EMA-critic regulariser, summed
/// over the horizon and averaged over trajectories.
pub fn critic_loss(
    coder: &TwoHotCoder,
    critic: &Critic,
    ema: &Critic,
    feats: &Tensor,
    returns: &[f64],
    ema_reg: f64,
) -> Result<Tensor> {
    let (n, h1, f) = feats.dims3()?;
    let h = h1 - 1;
    if returns.len() != n * h {
        return Err(Error::Shape(format!("{} returns for {n}×{h} states", returns.len())));
    }
    let states = feats.narrow(1, 0, h)?.detach().reshape((n * h, f))?;
    let logits = critic.logits(&states)?;
    let ema_values: Vec<f64> = ema.value(coder, &states)?.detach().to_dtype(DType::F64)?.to_vec1()?;
    let fit = coder.nll_t(&logits, returns)?;
    let reg = coder.nll_t(&logits, &ema_values)?;
    let per = (fit + (reg * ema_reg)?)?;
    Ok((per.sum_all()? / n as f64)?)
}

/// Pieces of the actor objective, each `(N, H)` summed then batch-averaged.
pub struct ActorLoss {
    pub loss: Tensor,
    pub entropy: f64,
    pub advantage_mean: f64,
}

/// Actor objective with estimator weight `rho` in `{0, 1}`; `returns` are the
/// differentiable λ-returns and `scale` the normaliser divisor.
pub fn actor_loss(
    actor: &Actor,
    traj: &ImaginedTrajectory,
    returns: &Tensor,
    scale: f64,
    rho: f64,
    entropy_scale: f64,
    detach_baseline: bool,
) -> Result<ActorLoss> {
    let h = traj.horizon();
    let n = traj.feats.dims()[0];
    let baseline = traj.values.narrow(1, 0, h)?;
    let mut entropies = Vec::with_capacity(h);
    let objective = if rho == 1.0 {
        let adv = ((returns - &baseline)? / scale)?.detach();
        let mut terms = Vec::with_capacity(h);
        for (t, action) in traj.actions.iter().enumerate() {
            let feat = traj.feats.narrow(1, t, 1)?.squeeze(1)?.detach();
            let dist = actor.dist(&feat)?;
            let logp = dist.log_prob(&action.detach())?;
            terms.push((logp * adv.narrow(1, t, 1)?.squeeze(1)?)?);
            entropies.push(dist.entropy()?);
        }
        Tensor::stack(&terms, 1)?
    } else if rho == 0.0 {
        let base = if detach_baseline { baseline.detach() } else { baseline };
        for dist in &traj.policies {
            entropies.push(dist.entropy()?);
        }
        ((returns - base)? / scale)?
    } else {
        return Err(Error::InvalidArgument(format!("estimator weight must be 0 or 1, got {rho}")));
    };
    let entropy = Tensor::stack(&entropies, 1)?;
    let loss = ((objective + (&entropy * entropy_scale)?)?.neg()?.sum_all()? / n as f64)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.detach().to_dtype(DType::F64)?.mean_all()?.to_scalar()?) };
    let advantage_mean = scalar(&((returns - traj.values.narrow(1, 0, h)?)? / scale)?)?;
    Ok(ActorLoss { loss, entropy: scalar(&entropy)?, advantage_mean })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub return_mean: f64,
    pub return_scale: f64,
    pub advantage_mean: f64,
    pub imag_reward_mean: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Actor, critic, EMA critic, their optimisers and the return normaliser.
pub struct ActorCritic {
    pub cfg: BehaviorConfig,
    pub actor: Actor,
    pub critic: Critic,
    pub critic_ema: Critic,
    pub actor_params: ParamSet,
    pub critic_params: ParamSet,
    pub ema_params: ParamSet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub normalizer: ReturnNormalizer,
}

impl ActorCritic {
    pub fn new(
        cfg: BehaviorConfig,
        feat_dim: usize,
        action_dim: usize,
        discrete: bool,
        bins: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Self> {
        let mut actor_params = ParamSet::new();
        let mut critic_params = ParamSet::new();
        let mut ema_params = ParamSet::new();
        let width = ActionDist::raw_width(action_dim, discrete);
        let net = Mlp::new(&mut Builder::new(&mut actor_params, rng, dtype), "actor", feat_dim, cfg.units, cfg.mlp_layers, width, false)?;
        let actor = Actor { net, discrete, min_std: cfg.min_std };
        let critic = Critic {
            net: Mlp::new(&mut Builder::new(&mut critic_params, rng, dtype), "critic", feat_dim, cfg.units, cfg.mlp_layers, bins, true)?,
        };
        let critic_ema = Critic {
            net: Mlp::new(&mut Builder::new(&mut ema_params, rng, dtype), "critic_ema", feat_dim, cfg.units, cfg.mlp_layers, bins, true)?,
        };
        ema_params.copy_from(&critic_params)?;
        let actor_opt = Adam::new(actor_params.clone(), cfg.actor)?;
        let critic_opt = Adam::new(critic_params.clone(), cfg.critic)?;
        let normalizer = ReturnNormalizer::new(cfg.return_norm_decay, cfg.return_norm_low, cfg.return_norm_high);
        Ok(Self { cfg, actor, critic, critic_ema, actor_params, critic_params, ema_params, actor_opt, critic_opt, normalizer })
    }

    /// One actor and critic update from detached start states.
    pub fn train(&mut self, wm: &WorldModel, start: &ModelState, rng: &mut impl Rng) -> Result<BehaviorReport> {
        let cfg = self.cfg.clone();
        let traj = imagine(wm, &self.actor, &self.critic, start, cfg.horizon, LatentSampling::Sample, rng)?;
        let returns = imagined_lambda_returns(&traj.rewards, &traj.conts, &traj.values, cfg.gamma, cfg.lambda)?;
        let flat: Vec<f64> = returns.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if flat.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("imagined returns".into()));
        }
        self.normalizer.update(&flat)?;
        let scale = self.normalizer.scale();

        let actor = actor_loss(&self.actor, &traj, &returns, scale, cfg.rho, cfg.entropy_scale, cfg.detach_baseline)?;
        let actor_grads = actor.loss.backward()?;
        let critic = critic_loss(&wm.coder, &self.critic, &self.critic_ema, &traj.feats, &flat, cfg.critic_ema_reg)?;
        let critic_grads = critic.backward()?;
        let actor_step = self.actor_opt.step(&actor_grads)?;
        let critic_step = self.critic_opt.step(&critic_grads)?;
        self.ema_params.ema_from(&self.critic_params, cfg.critic_ema_decay)?;

        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.detach().to_dtype(DType::F64)?.mean_all()?.to_scalar()?) };
        Ok(BehaviorReport {
            actor_loss: scalar(&actor.loss)?,
            critic_loss: scalar(&critic)?,
            entropy: actor.entropy,
            return_mean: flat.iter().sum::<f64>() / flat.len() as f64,
            return_scale: scale,
            advantage_mean: actor.advantage_mean,
            imag_reward_mean: scalar(&traj.rewards)?,
            actor_grad_norm: actor_step.grad_norm,
            critic_grad_norm: critic_step.grad_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn percentile_of_zero_to_99() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        // numpy: index q/100·(n−1); 95 → 94.05, 5 → 4.95.
        assert!((percentile(&v, 95.0).unwrap() - 94.05).abs() < 1e-12);
        assert!((percentile(&v, 5.0).unwrap() - 4.95).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn normalizer_first_update_and_decay() {
        let mut n = ReturnNormalizer::new(0.99, 5.0, 95.0);
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        n.update(&v).unwrap();
        assert!((n.range_ema - 0.01 * 89.1).abs() < 1e-12);
        assert_eq!(n.scale(), 1.0);
        let before = n.range_ema;
        n.update(&[3.0; 10]).unwrap();
        assert!((n.range_ema - 0.99 * before).abs() < 1e-15);
        assert!(n.update(&[]).is_err());
    }

    #[test]
    fn half_range_gives_unit_divisor() {
        let n = ReturnNormalizer { range_ema: 0.5, decay: 0.99, low: 5.0, high: 95.0 };
        assert_eq!(n.scale(), 1.0);
        let n = ReturnNormalizer { range_ema: 4.0, ..n };
        assert_eq!(n.scale(), 4.0);
    }

    #[test]
    fn zero_continues_give_immediate_rewards() {
        let r = [1.0, -2.0, 3.0];
        let out = lambda_returns(&r, &[0.0; 3], &[5.0, 6.0, 7.0, 8.0], 0.997, 0.95).unwrap();
        assert_eq!(out, r.to_vec());
    }

    #[test]
    fn tensor_returns_match_scalar_and_bootstrap() {
        let dev = Device::Cpu;
        let r = [0.5, -1.0, 2.0, 0.0];
        let c = [1.0, 0.9, 0.5, 1.0];
        let v = [0.1, 0.2, -0.3, 0.4, 2.5];
        let t = |x: &[f64], n| Tensor::from_slice(x, (1, n), &dev).unwrap();
        let got: Vec<f64> = imagined_lambda_returns(&t(&r, 4), &t(&c, 4), &t(&v, 5), 0.99, 0.9)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let want = lambda_returns(&r, &c, &v, 0.99, 0.9).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // Last return bootstraps from the final value; the one before mixes.
        assert!((want[3] - 0.99 * 2.5).abs() < 1e-12);
        assert!((want[2] - (2.0 + 0.99 * 0.5 * (0.1 * 0.4 + 0.9 * want[3]))).abs() < 1e-12);
    }

    #[test]
    fn invalid_rho_is_rejected() {
        assert_eq!(resolve_rho(ActorGrad::Auto, true), 1.0);
        assert_eq!(resolve_rho(ActorGrad::Auto, false), 0.0);
    }
}
