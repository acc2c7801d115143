//! Categorical RSSM world model with reward, continue, value and action
//! prediction heads, plus a detached auxiliary decoder.
//!
//! Sequence convention: index `t` holds observation `o_t`, the action `a_{t-1}`
//! that led to it, the reward `r_t` received on arrival and its continuation
//! flag `c_t`. At `is_first` positions the action and reward are placeholders.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wmrl_envs::ActionSpace;

use crate::config::TrainConfig;
use crate::distributions::{
    bernoulli_log_prob_t, kl_categorical_t, latent_from_logits, unimix_probs_t, ActionDist, CategoricalLatentSpec,
    LatentSampling, TwoHotCoder,
};
use crate::nn::{
    apply_rows, BatchNorm, Builder, ChannelNorm, Conv2d, ConvTranspose2d, Gru, LayerNorm, Linear, Mlp, Norm,
    ParamSet, RunningStats,
};
use crate::replay::SequenceBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelConfig {
    pub image_size: usize,
    pub cnn_depth: usize,
    pub deter: usize,
    pub hidden: usize,
    pub latent: CategoricalLatentSpec,
    pub units: usize,
    pub mlp_layers: usize,
    pub action_dim: usize,
    pub discrete_actions: bool,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub value_head: bool,
    pub action_head: bool,
    pub decoder: bool,
    pub twohot_bins: usize,
    pub twohot_low: f64,
    pub twohot_high: f64,
    pub min_std: f64,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    pub free_nats: f64,
    pub reward_loss_scale: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl WorldModelConfig {
    pub fn new(cfg: &TrainConfig, space: &ActionSpace) -> Self {
        Self {
            image_size: cfg.image_size,
            cnn_depth: cfg.cnn_depth,
            deter: cfg.deter,
            hidden: cfg.hidden,
            latent: CategoricalLatentSpec {
                num_latents: cfg.num_latents,
                classes_per_latent: cfg.classes_per_latent,
                unimix: cfg.unimix,
            },
            units: cfg.units,
            mlp_layers: cfg.mlp_layers,
            action_dim: space.width(),
            discrete_actions: space.is_discrete(),
            batch_norm: cfg.batch_norm,
            bn_momentum: cfg.bn_momentum,
            value_head: cfg.value_head,
            action_head: cfg.action_head,
            decoder: cfg.decoder,
            twohot_bins: cfg.twohot_bins,
            twohot_low: cfg.twohot_low,
            twohot_high: cfg.twohot_high,
            min_std: cfg.min_std,
            beta_pred: cfg.beta_pred,
            beta_dyn: cfg.beta_dyn,
            beta_rep: cfg.beta_rep,
            free_nats: cfg.free_nats,
            reward_loss_scale: cfg.reward_loss_scale,
            gamma: cfg.gamma,
            lambda: cfg.lambda,
        }
    }

    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn embed_dim(&self) -> usize {
        self.cnn_depth * (1 << (self.stages() - 1)) * 16
    }

    pub fn stoch_dim(&self) -> usize {
        self.latent.flat_size()
    }

    pub fn feat_dim(&self) -> usize {
        self.deter + self.stoch_dim()
    }
}

/// Model state `s = [h, flatten(z)]`; rows are batch entries.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub h: Tensor,
    pub z: Tensor,
}

impl ModelState {
    pub fn feat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.h, &self.z], D::Minus1)?)
    }

    pub fn detach(&self) -> Self {
        Self { h: self.h.detach(), z: self.z.detach() }
    }

    pub fn rows(&self) -> usize {
        self.h.dims()[0]
    }
}

pub struct Encoder {
    stages: Vec<(Conv2d, ChannelNorm)>,
    image_size: usize,
}

impl Encoder {
    fn new(b: &mut Builder, cfg: &WorldModelConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for i in 0..cfg.stages() {
            let c_out = cfg.cnn_depth << i;
            let conv = Conv2d::new(b, &format!("{i}.conv"), c_in, c_out)?;
            let norm = ChannelNorm::new(b, &format!("{i}.norm"), c_out)?;
            stages.push((conv, norm));
            c_in = c_out;
        }
        Ok(Self { stages, image_size: cfg.image_size })
    }

    /// `(N, 3, S, S)` images in `[-0.5, 0.5]` to `(N, embed)` features.
    pub fn forward(&self, obs: &Tensor) -> Result<Tensor> {
        let s = self.image_size;
        match obs.dims() {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => return Err(Error::Shape(format!("expected (N, 3, {s}, {s}) images, got {other:?}"))),
        }
        let mut x = obs.clone();
        for (conv, norm) in &self.stages {
            x = norm.forward(&conv.forward(&x)?)?.silu()?;
        }
        Ok(x.flatten_from(1)?)
    }
}

pub struct Decoder {
    input: Linear,
    stages: Vec<(ConvTranspose2d, Option<ChannelNorm>)>,
    top_channels: usize,
}

impl Decoder {
    fn new(b: &mut Builder, cfg: &WorldModelConfig) -> Result<Self> {
        let k = cfg.stages();
        let top_channels = cfg.cnn_depth << (k - 1);
        let input = Linear::new(b, "input", cfg.feat_dim(), top_channels * 16)?;
        let mut stages = Vec::new();
        for i in (0..k).rev() {
            let c_in = cfg.cnn_depth << i;
            let last = i == 0;
            let c_out = if last { 3 } else { cfg.cnn_depth << (i - 1) };
            let deconv = ConvTranspose2d::new(b, &format!("{i}.deconv"), c_in, c_out)?;
            let norm = if last { None } else { Some(ChannelNorm::new(b, &format!("{i}.norm"), c_out)?) };
            stages.push((deconv, norm));
        }
        Ok(Self { input, stages, top_channels })
    }

    pub fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        let n = feat.dims()[0];
        let mut x = self.input.forward(feat)?.reshape((n, self.top_channels, 4, 4))?;
        for (deconv, norm) in &self.stages {
            x = deconv.forward(&x)?;
            if let Some(norm) = norm {
                x = norm.forward(&x)?.silu()?;
            }
        }
        Ok(x)
    }
}

/// Scalars of one world-model loss evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldModelLossReport {
    pub reward: f64,
    pub cont: f64,
    pub value: f64,
    pub action: f64,
    pub recon: f64,
    pub l_dyn: f64,
    pub l_rep: f64,
    pub total: f64,
    pub kl_raw: f64,
    pub post_entropy: f64,
    pub prior_entropy: f64,
}

impl WorldModelLossReport {
    pub fn non_finite_terms(&self) -> Vec<&'static str> {
        [
            ("reward", self.reward),
            ("cont", self.cont),
            ("value", self.value),
            ("action", self.action),
            ("recon", self.recon),
            ("l_dyn", self.l_dyn),
            ("l_rep", self.l_rep),
            ("total", self.total),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .collect()
    }
}

/// Replay batch as model-ready tensors.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    /// `(B, T, 3, S, S)` in `[-0.5, 0.5]`.
    pub obs: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub conts: Vec<f64>,
    pub is_first: Vec<bool>,
    pub b: usize,
    pub t: usize,
}

impl BatchTensors {
    pub fn new(batch: &SequenceBatch, dtype: DType) -> Result<Self> {
        let (b, t, s) = (batch.batch_size, batch.length, batch.image_size);
        let dev = Device::Cpu;
        let pixels: Vec<f32> = batch.obs.iter().map(|p| *p as f32 / 255.0 - 0.5).collect();
        let obs = Tensor::from_vec(pixels, (b, t, 3, s, s), &dev)?.to_dtype(dtype)?;
        let actions = Tensor::from_vec(batch.actions.clone(), (b, t, batch.action_dim), &dev)?.to_dtype(dtype)?;
        Ok(Self {
            obs,
            actions,
            rewards: batch.rewards.iter().map(|r| *r as f64).collect(),
            conts: batch.conts.iter().map(|c| *c as f64).collect(),
            is_first: batch.is_first.clone(),
            b,
            t,
        })
    }

    /// Episode-start flags with the first column forced on: a sequence always
    /// starts from the initial state.
    pub fn reset_flags(&self) -> Vec<bool> {
        let mut flags = self.is_first.clone();
        for row in 0..self.b {
            flags[row * self.t] = true;
        }
        flags
    }
}

/// Posterior rollout over a batch of sequences.
pub struct Observation {
    /// `(B, T, deter)`.
    pub h: Tensor,
    /// `(B, T, L·C)`.
    pub z: Tensor,
    /// `(B, T, L, C)`.
    pub post_logits: Tensor,
    pub prior_logits: Tensor,
    /// `(B, T, embed)`.
    pub x: Tensor,
    /// State before each step, `(B, T, feat)`; the initial state at resets.
    pub prev_feat: Tensor,
}

impl Observation {
    pub fn feat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.h, &self.z], D::Minus1)?)
    }

    /// Posterior state at `(row, t)` for every row, as a batch.
    pub fn state_at(&self, t: usize) -> Result<ModelState> {
        Ok(ModelState { h: self.h.narrow(1, t, 1)?.squeeze(1)?, z: self.z.narrow(1, t, 1)?.squeeze(1)? })
    }
}

/// Loss tensors and their scalar report.
pub struct WorldModelLoss {
    pub total: Tensor,
    /// Reconstruction loss on detached states; present when the decoder is on.
    pub recon: Option<Tensor>,
    /// Individual weighted terms, for gradient audits.
    pub terms: LossTerms,
    pub report: WorldModelLossReport,
    pub observation: Observation,
    /// Stop-gradient inputs used by this evaluation.
    pub anchors: LossAnchors,
}

/// Values a loss evaluation treats as constants: the posterior and prior
/// logits behind the KL stop-gradients and the value targets.
///
/// Replaying one evaluation's anchors at perturbed parameters gives the
/// objective whose derivative the analytic gradient represents.
#[derive(Debug, Clone)]
pub struct LossAnchors {
    pub post_logits: Tensor,
    pub prior_logits: Tensor,
    pub value_targets: Option<Vec<f64>>,
}

pub struct LossTerms {
    pub reward: Tensor,
    pub cont: Tensor,
    pub value: Option<Tensor>,
    pub action: Option<Tensor>,
    pub l_dyn: Tensor,
    pub l_rep: Tensor,
}

pub struct WorldModel {
    pub cfg: WorldModelConfig,
    pub coder: TwoHotCoder,
    pub encoder: Encoder,
    seq_in: Linear,
    seq_norm: LayerNorm,
    gru: Gru,
    h0: candle_core::Var,
    rep_in: Linear,
    rep_norm: Norm,
    rep_out: Linear,
    dyn_in: Linear,
    dyn_norm: LayerNorm,
    dyn_out: Linear,
    pub reward_head: Mlp,
    pub cont_head: Mlp,
    pub value_head: Option<Mlp>,
    slow_value: Option<Mlp>,
    pub action_head: Option<Mlp>,
    pub decoder: Option<Decoder>,
    /// Trainable world-model parameters (decoder and slow value excluded).
    pub params: ParamSet,
    pub decoder_params: ParamSet,
    pub slow_params: ParamSet,
    value_params: ParamSet,
    pub dtype: DType,
}

impl WorldModel {
    pub fn new(cfg: WorldModelConfig, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Self> {
        if cfg.image_size < 16 || !cfg.image_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("image size {} unsupported", cfg.image_size)));
        }
        let coder = TwoHotCoder::new(cfg.twohot_bins, cfg.twohot_low, cfg.twohot_high)?;
        let lc = cfg.stoch_dim();
        let feat = cfg.feat_dim();
        let bins = cfg.twohot_bins;
        let mut params = ParamSet::new();
        let mut value_params = ParamSet::new();
        let mut slow_params = ParamSet::new();
        let mut decoder_params = ParamSet::new();

        let mut b = Builder::new(&mut params, rng, dtype);
        let (encoder, seq_in, seq_norm, gru, h0, rep_in, rep_norm, rep_out, dyn_in, dyn_norm, dyn_out) =
            b.scope("wm", |b| {
                let encoder = b.scope("enc", |b| Encoder::new(b, &cfg))?;
                let (seq_in, seq_norm, gru, h0) = b.scope("seq", |b| {
                    Ok((
                        Linear::new(b, "in", lc + cfg.action_dim, cfg.hidden)?,
                        LayerNorm::new(b, "in.norm", cfg.hidden)?,
                        Gru::new(b, "gru", cfg.hidden, cfg.deter)?,
                        b.constant("h0", &[cfg.deter], 0.0)?,
                    ))
                })?;
                let (rep_in, rep_norm, rep_out) = b.scope("rep", |b| {
                    let lin = Linear::new(b, "in", cfg.embed_dim() + cfg.deter, cfg.hidden)?;
                    let norm = if cfg.batch_norm {
                        Norm::Batch(BatchNorm::new(b, "in.bn", cfg.hidden, cfg.bn_momentum)?)
                    } else {
                        Norm::Layer(LayerNorm::new(b, "in.norm", cfg.hidden)?)
                    };
                    Ok((lin, norm, Linear::new(b, "out", cfg.hidden, lc)?))
                })?;
                let (dyn_in, dyn_norm, dyn_out) = b.scope("dyn", |b| {
                    Ok((
                        Linear::new(b, "in", cfg.deter, cfg.hidden)?,
                        LayerNorm::new(b, "in.norm", cfg.hidden)?,
                        Linear::new(b, "out", cfg.hidden, lc)?,
                    ))
                })?;
                Ok((encoder, seq_in, seq_norm, gru, h0, rep_in, rep_norm, rep_out, dyn_in, dyn_norm, dyn_out))
            })?;
        let (reward_head, cont_head) = b.scope("wm", |b| {
            Ok((
                Mlp::new(b, "reward", feat, cfg.units, cfg.mlp_layers, bins, true)?,
                Mlp::new(b, "cont", feat, cfg.units, cfg.mlp_layers, 1, false)?,
            ))
        })?;
        let action_head = if cfg.action_head {
            let width = ActionDist::raw_width(cfg.action_dim, cfg.discrete_actions);
            Some(b.scope("wm", |b| Mlp::new(b, "action", cfg.embed_dim() + feat, cfg.units, cfg.mlp_layers, width, false))?)
        } else {
            None
        };
        drop(b);

        let (value_head, slow_value) = if cfg.value_head {
            let mut vb = Builder::new(&mut value_params, rng, dtype);
            let online = vb.scope("wm", |b| Mlp::new(b, "value", feat, cfg.units, cfg.mlp_layers, bins, true))?;
            let mut sb = Builder::new(&mut slow_params, rng, dtype);
            let slow = sb.scope("wm", |b| Mlp::new(b, "slow_value", feat, cfg.units, cfg.mlp_layers, bins, true))?;
            slow_params.copy_from(&value_params)?;
            params.extend(&value_params);
            (Some(online), Some(slow))
        } else {
            (None, None)
        };

        let decoder = if cfg.decoder {
            let mut db = Builder::new(&mut decoder_params, rng, dtype);
            Some(db.scope("wm.dec", |b| Decoder::new(b, &cfg))?)
        } else {
            None
        };

        Ok(Self {
            cfg,
            coder,
            encoder,
            seq_in,
            seq_norm,
            gru,
            h0,
            rep_in,
            rep_norm,
            rep_out,
            dyn_in,
            dyn_norm,
            dyn_out,
            reward_head,
            cont_head,
            value_head,
            slow_value,
            action_head,
            decoder,
            params,
            decoder_params,
            slow_params,
            value_params,
            dtype,
        })
    }

    /// Every named parameter tensor, including decoder and slow value.
    pub fn all_params(&self) -> ParamSet {
        let mut all = self.params.clone();
        all.extend(&self.decoder_params);
        all.extend(&self.slow_params);
        all
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        match &self.rep_norm {
            Norm::Batch(bn) => Some(bn),
            Norm::Layer(_) => None,
        }
    }

    pub fn bn_running(&self) -> Option<RunningStats> {
        self.batch_norm().map(|bn| bn.running())
    }

    pub fn set_bn_running(&self, stats: RunningStats) {
        if let Some(bn) = self.batch_norm() {
            bn.set_running(stats);
        }
    }

    fn split_latent(&self, flat: &Tensor) -> Result<Tensor> {
        let n = flat.dims()[0];
        Ok(flat.reshape((n, self.cfg.latent.num_latents, self.cfg.latent.classes_per_latent))?)
    }

    fn latent(&self, logits: &Tensor, sampling: LatentSampling, rng: &mut impl Rng) -> Result<Tensor> {
        let z = latent_from_logits(logits, self.cfg.latent.unimix, sampling, rng)?;
        Ok(z.flatten_from(1)?)
    }

    pub fn encode(&self, obs: &Tensor) -> Result<Tensor> {
        self.encoder.forward(obs)
    }

    pub fn sequential_step(&self, h_prev: &Tensor, z_prev: &Tensor, a_prev: &Tensor) -> Result<Tensor> {
        let (n, d) = h_prev.dims2()?;
        let (nz, dz) = z_prev.dims2()?;
        let (na, da) = a_prev.dims2()?;
        if d != self.cfg.deter || dz != self.cfg.stoch_dim() || da != self.cfg.action_dim || nz != n || na != n {
            return Err(Error::Shape(format!(
                "sequential step got h {:?}, z {:?}, a {:?}",
                h_prev.dims(),
                z_prev.dims(),
                a_prev.dims()
            )));
        }
        let x = Tensor::cat(&[z_prev, a_prev], 1)?;
        let x = self.seq_norm.forward(&self.seq_in.forward(&x)?)?.silu()?;
        self.gru.forward(&x, h_prev)
    }

    /// Posterior logits `(N, L, C)` and latent from `h` and features `x`.
    pub fn represent(
        &self,
        h: &Tensor,
        x: &Tensor,
        train: bool,
        sampling: LatentSampling,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Tensor)> {
        let inp = Tensor::cat(&[x, h], 1)?;
        let hidden = self.rep_norm.forward(&self.rep_in.forward(&inp)?, train)?.silu()?;
        let logits = self.split_latent(&self.rep_out.forward(&hidden)?)?;
        let z = self.latent(&logits, sampling, rng)?;
        Ok((logits, z))
    }

    fn prior_logits(&self, h: &Tensor) -> Result<Tensor> {
        let hidden = self.dyn_norm.forward(&self.dyn_in.forward(h)?)?.silu()?;
        self.split_latent(&self.dyn_out.forward(&hidden)?)
    }

    /// Prior logits `(N, L, C)` and latent from `h` alone.
    pub fn dynamics_predict(&self, h: &Tensor, sampling: LatentSampling, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        let logits = self.prior_logits(h)?;
        let z = self.latent(&logits, sampling, rng)?;
        Ok((logits, z))
    }

    /// Learned `h0` with the prior's most likely latent, no gradient through `z0`.
    pub fn initial_state(&self, n: usize) -> Result<ModelState> {
        let h0 = self.h0.as_tensor().unsqueeze(0)?;
        let logits = self.prior_logits(&h0)?;
        let z0 = latent_from_logits(&logits, 0.0, LatentSampling::Mode, &mut NoRng)?.flatten_from(1)?.detach();
        Ok(ModelState { h: h0.broadcast_as((n, self.cfg.deter))?, z: z0.broadcast_as((n, self.cfg.stoch_dim()))? })
    }

    /// Replaces rows flagged in `reset` by the initial state and a zero action.
    pub fn reset_rows(&self, state: &ModelState, action: &Tensor, reset: &[bool]) -> Result<(ModelState, Tensor)> {
        let n = state.rows();
        if reset.len() != n {
            return Err(Error::Shape(format!("{} reset flags for {n} rows", reset.len())));
        }
        if reset.iter().all(|r| !r) {
            return Ok((state.clone(), action.clone()));
        }
        let init = self.initial_state(n)?;
        let mask = Tensor::from_iter(reset.iter().map(|r| *r as u8), &Device::Cpu)?.reshape((n, 1))?;
        let pick = |on: &Tensor, off: &Tensor| -> Result<Tensor> {
            Ok(mask.broadcast_as(off.shape())?.where_cond(&on.broadcast_as(off.shape())?, off)?)
        };
        let h = pick(&init.h, &state.h)?;
        let z = pick(&init.z, &state.z)?;
        let a = pick(&action.zeros_like()?, action)?;
        Ok((ModelState { h, z }, a))
    }

    /// One posterior step: resets, recurrence, prior and posterior.
    #[allow(clippy::too_many_arguments)]
    pub fn observe_step(
        &self,
        state: &ModelState,
        action: &Tensor,
        x: &Tensor,
        reset: &[bool],
        train: bool,
        sampling: LatentSampling,
        rng: &mut impl Rng,
    ) -> Result<(ModelState, Tensor, Tensor, ModelState)> {
        let (prev, a) = self.reset_rows(state, action, reset)?;
        let h = self.sequential_step(&prev.h, &prev.z, &a)?;
        let prior_logits = self.prior_logits(&h)?;
        let (post_logits, z) = self.represent(&h, x, train, sampling, rng)?;
        Ok((ModelState { h, z }, post_logits, prior_logits, prev))
    }

    /// Posterior states for every position of a batch.
    pub fn observe_sequence(
        &self,
        batch: &BatchTensors,
        train: bool,
        sampling: LatentSampling,
        rng: &mut impl Rng,
    ) -> Result<Observation> {
        let (b, t) = (batch.b, batch.t);
        if batch.is_first.len() != b * t {
            return Err(Error::InvalidArgument("episode-start flags missing or mis-sized".into()));
        }
        let s = self.cfg.image_size;
        let x = self.encode(&batch.obs.reshape((b * t, 3, s, s))?)?.reshape((b, t, ()))?;
        let flags = batch.reset_flags();
        let mut state = self.initial_state(b)?;
        let (mut hs, mut zs, mut posts, mut priors, mut prevs) = (vec![], vec![], vec![], vec![], vec![]);
        for step in 0..t {
            let reset: Vec<bool> = (0..b).map(|row| flags[row * t + step]).collect();
            let action = batch.actions.narrow(1, step, 1)?.squeeze(1)?;
            let xt = x.narrow(1, step, 1)?.squeeze(1)?;
            let (next, post, prior, prev) = self.observe_step(&state, &action, &xt, &reset, train, sampling, rng)?;
            hs.push(next.h.clone());
            zs.push(next.z.clone());
            posts.push(post);
            priors.push(prior);
            prevs.push(prev.feat()?);
            state = next;
        }
        Ok(Observation {
            h: Tensor::stack(&hs, 1)?,
            z: Tensor::stack(&zs, 1)?,
            post_logits: Tensor::stack(&posts, 1)?,
            prior_logits: Tensor::stack(&priors, 1)?,
            x,
            prev_feat: Tensor::stack(&prevs, 1)?,
        })
    }

    /// One imagination step with the prior only.
    pub fn img_step(&self, state: &ModelState, action: &Tensor, sampling: LatentSampling, rng: &mut impl Rng) -> Result<ModelState> {
        let h = self.sequential_step(&state.h, &state.z, action)?;
        let (_, z) = self.dynamics_predict(&h, sampling, rng)?;
        Ok(ModelState { h, z })
    }

    /// Raw-unit reward predictions for `(.., feat)`.
    pub fn reward(&self, feat: &Tensor) -> Result<Tensor> {
        let logits = apply_rows(feat, |f| self.reward_head.forward(f))?;
        self.coder.predict_t(&logits)
    }

    /// Continue probabilities for `(.., feat)`.
    pub fn cont_prob(&self, feat: &Tensor) -> Result<Tensor> {
        let logits = apply_rows(feat, |f| self.cont_head.forward(f))?.squeeze(D::Minus1)?;
        crate::distributions::sigmoid_t(&logits)
    }

    /// Slow value predictions (raw units) on detached states, as plain numbers.
    pub fn slow_values(&self, feat: &Tensor) -> Result<Vec<f64>> {
        let head = self.slow_value.as_ref().ok_or_else(|| Error::InvalidArgument("value head disabled".into()))?;
        let logits = apply_rows(&feat.detach(), |f| head.forward(f))?;
        Ok(self.coder.predict_t(&logits)?.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    pub fn decode(&self, feat: &Tensor) -> Result<Tensor> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::InvalidArgument("decoder disabled".into()))?;
        dec.forward(&feat.detach())
    }

    /// `slow ← d·slow + (1 − d)·online` for the value predictor.
    pub fn update_slow_value(&self, decay: f64) -> Result<()> {
        if self.slow_value.is_some() {
            self.slow_params.ema_from(&self.value_params, decay)?;
        }
        Ok(())
    }

    /// Per-position λ-return targets for the value predictor.
    pub fn value_targets(&self, batch: &BatchTensors, feat: &Tensor) -> Result<Vec<f64>> {
        let (b, t) = (batch.b, batch.t);
        let slow = self.slow_values(feat)?;
        let mut out = Vec::with_capacity(b * t);
        for row in 0..b {
            let r = row * t;
            let live = |i: usize| if batch.is_first[r + i] { 0.0 } else { 1.0 };
            let rewards: Vec<f64> = (0..t).map(|i| batch.rewards[r + i] * live(i)).collect();
            let conts: Vec<f64> = (0..t).map(|i| batch.conts[r + i] * live(i)).collect();
            out.extend(compute_value_targets(&rewards, &conts, &slow[r..r + t], self.cfg.gamma, self.cfg.lambda)?);
        }
        Ok(out)
    }

    /// Full world-model loss on a batch.
    pub fn loss(&self, batch: &BatchTensors, sampling: LatentSampling, rng: &mut impl Rng) -> Result<WorldModelLoss> {
        self.loss_anchored(batch, sampling, None, rng)
    }

    /// World-model loss with the stop-gradient inputs taken from `anchors`
    /// when given, instead of from this evaluation.
    pub fn loss_anchored(
        &self,
        batch: &BatchTensors,
        sampling: LatentSampling,
        anchors: Option<&LossAnchors>,
        rng: &mut impl Rng,
    ) -> Result<WorldModelLoss> {
        let cfg = &self.cfg;
        let (b, t) = (batch.b, batch.t);
        let n = b * t;
        let obs = self.observe_sequence(batch, true, sampling, rng)?;
        let feat = obs.feat()?.reshape((n, cfg.feat_dim()))?;
        let dtype = self.dtype;
        let dev = Device::Cpu;
        let flags = batch.reset_flags();
        let live: Vec<f64> = flags.iter().map(|f| if *f { 0.0 } else { 1.0 }).collect();
        let live_count = live.iter().sum::<f64>().max(1.0);
        let live_t = Tensor::from_vec(live, n, &dev)?.to_dtype(dtype)?;
        let masked_mean = |x: &Tensor| -> Result<Tensor> { Ok(((x * &live_t)?.sum_all()? / live_count)?) };

        let reward_logits = self.reward_head.forward(&feat)?;
        let reward = masked_mean(&self.coder.nll_t(&reward_logits, &batch.rewards)?)?;

        let cont_logits = self.cont_head.forward(&feat)?.squeeze(1)?;
        let cont_target = Tensor::from_vec(batch.conts.clone(), n, &dev)?.to_dtype(dtype)?;
        let cont = bernoulli_log_prob_t(&cont_logits, &cont_target)?.mean_all()?.neg()?;

        let mut value_targets = None;
        let value = match &self.value_head {
            Some(head) => {
                let targets = match anchors.and_then(|a| a.value_targets.clone()) {
                    Some(t) => t,
                    None => self.value_targets(batch, &feat)?,
                };
                value_targets = Some(targets.clone());
                Some(self.coder.nll_t(&head.forward(&feat)?, &targets)?.mean_all()?)
            }
            None => None,
        };

        let action = match &self.action_head {
            Some(head) => {
                let inp = Tensor::cat(&[&obs.x, &obs.prev_feat], D::Minus1)?.reshape((n, ()))?;
                let dist = ActionDist::from_raw(&head.forward(&inp)?, cfg.discrete_actions, cfg.min_std)?;
                let target = batch.actions.reshape((n, cfg.action_dim))?;
                Some(masked_mean(&dist.log_prob(&target)?.neg()?)?)
            }
            None => None,
        };

        let post = &obs.post_logits;
        let prior = &obs.prior_logits;
        let (sg_post, sg_prior) = match anchors {
            Some(a) => (a.post_logits.detach(), a.prior_logits.detach()),
            None => (post.detach(), prior.detach()),
        };
        let kl_dyn = kl_categorical_t(&sg_post, prior, cfg.latent.unimix)?.flatten_all()?;
        let kl_rep = kl_categorical_t(post, &sg_prior, cfg.latent.unimix)?.flatten_all()?;
        let l_dyn = free_bits(&kl_dyn, cfg.free_nats)?.mean_all()?;
        let l_rep = free_bits(&kl_rep, cfg.free_nats)?.mean_all()?;

        let mut pred = (&reward * cfg.reward_loss_scale)?;
        pred = (pred + &cont)?;
        if let Some(v) = &value {
            pred = (pred + v)?;
        }
        if let Some(a) = &action {
            pred = (pred + a)?;
        }
        let total = (((pred * cfg.beta_pred)? + (&l_dyn * cfg.beta_dyn)?)? + (&l_rep * cfg.beta_rep)?)?;

        let recon = match &self.decoder {
            Some(dec) => {
                let s = cfg.image_size;
                let recon = dec.forward(&feat.detach())?;
                let target = batch.obs.reshape((n, 3, s, s))?;
                Some(((recon - target)?.sqr()?.sum_all()? / n as f64)?)
            }
            None => None,
        };

        let scalar = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let entropy = |logits: &Tensor| -> Result<f64> {
            let probs = unimix_probs_t(logits, cfg.latent.unimix)?;
            let h = (probs.log()? * &probs)?.sum(D::Minus1)?.neg()?.sum(D::Minus1)?;
            scalar(&h.mean_all()?)
        };
        let report = WorldModelLossReport {
            reward: scalar(&reward)?,
            cont: scalar(&cont)?,
            value: value.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            action: action.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            recon: recon.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            l_dyn: scalar(&l_dyn)?,
            l_rep: scalar(&l_rep)?,
            total: scalar(&total)?,
            kl_raw: scalar(&kl_dyn.mean_all()?)?,
            post_entropy: entropy(post)?,
            prior_entropy: entropy(prior)?,
        };
        Ok(WorldModelLoss {
            total,
            recon,
            terms: LossTerms { reward, cont, value, action, l_dyn, l_rep },
            report,
            anchors: LossAnchors { post_logits: sg_post, prior_logits: sg_prior, value_targets },
            observation: obs,
        })
    }
}

/// `max(free, kl)` elementwise with no gradient where the clamp is active.
pub fn free_bits(kl: &Tensor, free: f64) -> Result<Tensor> {
    let active = kl.detach().ge(free)?;
    let floor = (kl.zeros_like()? + free)?;
    Ok(active.where_cond(kl, &floor)?)
}

/// Generic λ-return recursion over state-aligned sequences:
/// `R_t = r_{t+1} + γ c_{t+1} ((1 − λ) v_{t+1} + λ R_{t+1})`, `R_{T} = v_{T}`.
pub fn compute_value_targets(rewards: &[f64], conts: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let t = values.len();
    if rewards.len() != t || conts.len() != t {
        return Err(Error::Shape(format!(
            "λ-return inputs differ in length: {} rewards, {} continues, {} values",
            rewards.len(),
            conts.len(),
            t
        )));
    }
    if t == 0 {
        return Ok(vec![]);
    }
    let mut out = vec![0.0; t];
    out[t - 1] = values[t - 1];
    for i in (0..t - 1).rev() {
        out[i] = rewards[i + 1] + gamma * conts[i + 1] * ((1.0 - lambda) * values[i + 1] + lambda * out[i + 1]);
    }
    Ok(out)
}

/// Averaged per-channel standard deviation of L2-normalised rows of `(N, D)`.
pub fn normalized_feature_std(features: &Tensor) -> Result<f64> {
    let f = features.detach().to_dtype(DType::F64)?;
    let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    let unit = f.broadcast_div(&norm)?;
    let centred = unit.broadcast_sub(&unit.mean_keepdim(0)?)?;
    let std = centred.sqr()?.mean(0)?.sqrt()?;
    Ok(std.mean_all()?.to_scalar::<f64>()?)
}

/// Placeholder RNG for code paths that never draw.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic path drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic path drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("deterministic path drew a random number")
    }
}
