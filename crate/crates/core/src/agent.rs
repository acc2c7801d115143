//! Training orchestration: collection, replay, update schedule, evaluation,
//! checkpoints, metrics and diagnostics.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wmrl_envs::{Action, ActionSpace, BackgroundPool, DistractorConfig, Env, EnvOptions, Frame, Step};

use crate::behavior::{ActorCritic, BehaviorConfig, BehaviorReport, ReturnNormalizer};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::distributions::LatentSampling;
use crate::error::io_err;
use crate::nn::{ParamSet, RunningStats};
use crate::optim::{Adam, AdamConfig};
use crate::replay::{ReplayBuffer, SequenceBatch, Transition};
use crate::world_model::{
    normalized_feature_std, BatchTensors, ModelState, WorldModel, WorldModelConfig, WorldModelLossReport,
};
use crate::{Error, Result};

/// Averaged normalised-feature std below which a representation counts as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1e-3;

/// Stream offset separating evaluation environment seeds from training ones.
const EVAL_STREAM: u64 = 1 << 32;

/// Deterministic seed for the `stream`-th consumer of a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gradient steps owed for the policy steps taken after warm-up.
///
/// Uses exact integer arithmetic: after `n` policy steps, `⌊n·ratio/(B·T)⌋`
/// updates are due in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioScheduler {
    pub train_ratio: u64,
    pub replayed_per_update: u64,
    pub policy_steps: u64,
    pub updates: u64,
}

impl RatioScheduler {
    pub fn new(train_ratio: u64, batch_size: usize, batch_length: usize) -> Self {
        Self { train_ratio, replayed_per_update: (batch_size * batch_length) as u64, policy_steps: 0, updates: 0 }
    }

    pub fn observe(&mut self, steps: u64) {
        self.policy_steps += steps;
    }

    pub fn due(&self) -> u64 {
        ((self.policy_steps as u128 * self.train_ratio as u128) / self.replayed_per_update as u128) as u64
    }

    pub fn pending(&self) -> u64 {
        self.due().saturating_sub(self.updates)
    }

    pub fn record_update(&mut self) {
        self.updates += 1;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Physics steps, counting repeated actions.
    pub env_steps: u64,
    pub policy_steps: u64,
    pub grad_steps: u64,
    pub episodes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub env_steps: u64,
    pub grad_steps: u64,
    #[serde(flatten)]
    pub world_model: WorldModelLossReport,
    #[serde(flatten)]
    pub behavior: BehaviorReport,
    pub model_grad_norm: f64,
    /// Averaged per-channel std of L2-normalised encoder features.
    pub x_std: f64,
    /// Same statistic for the recurrent state.
    pub h_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub env_id: usize,
    pub episode_return: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub mean: f64,
    pub median: f64,
    pub returns: Vec<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Train(TrainRecord),
    Episode(EpisodeRecord),
    Eval(EvalRecord),
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(io_err(path))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    /// Appends one record as a single write, so readers never see half a line.
    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let mean = if returns.is_empty() { 0.0 } else { returns.iter().sum::<f64>() / returns.len() as f64 };
        let mut sorted = returns.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self { returns, mean, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub samples: usize,
    pub x_dim: usize,
    pub x_std: f64,
    pub h_std: f64,
    /// `1/√D`, the value for isotropic features.
    pub isotropic_reference: f64,
    pub threshold: f64,
    pub collapsed: bool,
}

/// Collapse statistics for `(N, D)` encoder features and optional recurrent states.
pub fn collapse_report(x: &Tensor, h: Option<&Tensor>) -> Result<CollapseReport> {
    let (n, d) = x.dims2()?;
    let x_std = normalized_feature_std(x)?;
    let h_std = h.map(normalized_feature_std).transpose()?.unwrap_or(f64::NAN);
    Ok(CollapseReport {
        samples: n,
        x_dim: d,
        x_std,
        h_std,
        isotropic_reference: 1.0 / (d as f64).sqrt(),
        threshold: COLLAPSE_THRESHOLD,
        collapsed: x_std < COLLAPSE_THRESHOLD,
    })
}

/// Recurrent policy state for a batch of environments.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub model: ModelState,
    pub action: Tensor,
}

/// Imagined rollout decoded to frames.
pub struct Dream {
    /// Posterior reconstructions of the context followed by imagined frames.
    pub frames: Vec<Frame>,
    pub context: usize,
    /// Raw observations of the context steps.
    pub observed: Vec<Frame>,
    pub latents: Vec<LatentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentRecord {
    pub t: usize,
    pub imagined: bool,
    /// Active class of each categorical latent.
    pub classes: Vec<usize>,
    pub h: Vec<f32>,
}

pub struct Agent {
    pub cfg: TrainConfig,
    pub space: ActionSpace,
    pub wm: WorldModel,
    pub ac: ActorCritic,
    pub wm_opt: Adam,
    pub dec_opt: Option<Adam>,
    pub rng: ChaCha8Rng,
    pub counters: Counters,
    pub scheduler: RatioScheduler,
    pub dtype: DType,
}

impl Agent {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let space = wmrl_envs::action_space(&cfg.env)?;
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
        let wm = WorldModel::new(WorldModelConfig::new(&cfg, &space), &mut init, dtype)?;
        let bcfg = BehaviorConfig::new(&cfg, space.is_discrete());
        let ac = ActorCritic::new(bcfg, wm.cfg.feat_dim(), space.width(), space.is_discrete(), cfg.twohot_bins, &mut init, dtype)?;
        let model_adam = AdamConfig {
            lr: cfg.model_lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.model_eps,
            clip: cfg.model_clip,
        };
        let wm_opt = Adam::new(wm.params.clone(), model_adam)?;
        let dec_opt = if wm.decoder.is_some() { Some(Adam::new(wm.decoder_params.clone(), model_adam)?) } else { None };
        let scheduler = RatioScheduler::new(cfg.train_ratio, cfg.batch_size, cfg.batch_length);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1)),
            cfg,
            space,
            wm,
            ac,
            wm_opt,
            dec_opt,
            counters: Counters::default(),
            scheduler,
            dtype,
        })
    }

    pub fn env_options(&self, stream: u64, pool: BackgroundPool) -> EnvOptions {
        let seed = derive_seed(self.cfg.seed, stream + 2);
        EnvOptions {
            seed,
            image_size: self.cfg.image_size,
            action_repeat: (self.cfg.action_repeat > 0).then_some(self.cfg.action_repeat),
            distractor: if self.cfg.distractor {
                DistractorConfig::enabled(pool, derive_seed(seed, 7))
            } else {
                DistractorConfig::disabled()
            },
        }
    }

    pub fn make_env(&self, stream: u64, pool: BackgroundPool) -> Result<Box<dyn Env>> {
        Ok(wmrl_envs::make(&self.cfg.env, &self.env_options(stream, pool))?)
    }

    /// `(N, 3, S, S)` tensor in `[-0.5, 0.5]` from frames.
    pub fn frames_tensor(&self, frames: &[&Frame]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(frames.len() * 3 * s * s);
        for f in frames {
            if f.size != s {
                return Err(Error::Shape(format!("frame size {} differs from model size {s}", f.size)));
            }
            data.extend(f.data.iter().map(|p| *p as f32 / 255.0 - 0.5));
        }
        Ok(Tensor::from_vec(data, (frames.len(), 3, s, s), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Filters new observations into the recurrent state and picks actions.
    ///
    /// Returns the executed action vectors (clipped to the action box, or
    /// one-hot rows) and the detached next policy state.
    pub fn policy_step(
        &self,
        frames: &[&Frame],
        is_first: &[bool],
        prev: Option<&PolicyState>,
        explore: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Vec<f32>>, PolicyState)> {
        let n = frames.len();
        let x = self.wm.encode(&self.frames_tensor(frames)?)?;
        let (state, action, reset) = match prev {
            Some(p) => (p.model.clone(), p.action.clone(), is_first.to_vec()),
            None => (
                self.wm.initial_state(n)?,
                Tensor::zeros((n, self.space.width()), self.dtype, &Device::Cpu)?,
                vec![true; n],
            ),
        };
        let (next, _, _, _) = self.wm.observe_step(&state, &action, &x, &reset, false, LatentSampling::Sample, rng)?;
        let next = next.detach();
        let dist = self.ac.actor.dist(&next.feat()?)?;
        let raw = if explore { dist.sample(rng)? } else { dist.mode()? };
        let rows: Vec<Vec<f32>> = raw.detach().to_dtype(DType::F32)?.to_vec2()?;
        let executed: Vec<Vec<f32>> =
            rows.iter().map(|r| self.space.to_vector(&self.to_env_action(r))).collect::<std::result::Result<_, _>>()?;
        let flat: Vec<f32> = executed.iter().flatten().copied().collect();
        let action = Tensor::from_vec(flat, (n, self.space.width()), &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok((executed, PolicyState { model: next, action }))
    }

    pub fn to_env_action(&self, row: &[f32]) -> Action {
        match self.space {
            ActionSpace::Discrete { .. } => Action::Discrete(crate::distributions::argmax_f32(row)),
            ActionSpace::Continuous { .. } => Action::Continuous(row.to_vec()),
        }
    }

    pub fn random_action(&self, rng: &mut impl Rng) -> Vec<f32> {
        match self.space {
            ActionSpace::Discrete { n } => {
                let mut v = vec![0.0; n];
                v[rng.random_range(0..n)] = 1.0;
                v
            }
            ActionSpace::Continuous { dim, low, high } => (0..dim).map(|_| rng.random_range(low..=high)).collect(),
        }
    }

    /// One world-model, value, actor and critic update on a replay batch.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<TrainRecord> {
        let step = self.counters.grad_steps + 1;
        let bt = BatchTensors::new(batch, self.dtype)?;
        let diverged = |e: Error| match e {
            Error::NonFinite(what) => Error::Diverged { step, report: format!("non-finite {what}") },
            other => other,
        };
        let loss = self.wm.loss(&bt, LatentSampling::Sample, &mut self.rng).map_err(diverged)?;
        let bad = loss.report.non_finite_terms();
        if !bad.is_empty() {
            return Err(Error::Diverged { step, report: format!("non-finite world-model terms: {}", bad.join(", ")) });
        }
        let objective = match &loss.recon {
            Some(r) => (&loss.total + r)?,
            None => loss.total.clone(),
        };
        let grads = objective.backward()?;
        let model_step = self.wm_opt.step(&grads)?;
        if let Some(opt) = &mut self.dec_opt {
            opt.step(&grads)?;
        }
        self.wm.update_slow_value(self.cfg.slow_value_decay)?;

        let obs = &loss.observation;
        let (b, t) = (bt.b, bt.t);
        let x_std = normalized_feature_std(&obs.x.reshape((b * t, ()))?)?;
        let h_std = normalized_feature_std(&obs.h.reshape((b * t, ()))?)?;
        let starts = t.saturating_sub(1).max(1);
        let start = ModelState {
            h: obs.h.narrow(1, 0, starts)?.reshape((b * starts, ()))?.detach(),
            z: obs.z.narrow(1, 0, starts)?.reshape((b * starts, ()))?.detach(),
        };
        let behavior = self.ac.train(&self.wm, &start, &mut self.rng).map_err(diverged)?;
        if !behavior.actor_loss.is_finite() || !behavior.critic_loss.is_finite() {
            return Err(Error::Diverged { step, report: "non-finite actor or critic loss".into() });
        }
        self.counters.grad_steps = step;
        Ok(TrainRecord {
            env_steps: self.counters.env_steps,
            grad_steps: step,
            world_model: loss.report,
            behavior,
            model_grad_norm: model_step.grad_norm,
            x_std,
            h_std,
        })
    }

    /// Runs `episodes` evaluation episodes with mode actions on the evaluation
    /// background pool. Reproducible for a fixed `seed` and parameters.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EVAL_STREAM));
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut env = wmrl_envs::make(&self.cfg.env, &self.eval_options(seed, ep as u64))?;
            returns.push(self.run_episode(env.as_mut(), &mut rng, |_, _, _| Ok(()))?);
        }
        Ok(EvalReport::from_returns(returns))
    }

    /// Returns of the environment's reference controller on exactly the
    /// episodes `evaluate` would play with the same `seed`.
    pub fn scripted_evaluate(&self, episodes: usize, seed: u64) -> Result<EvalReport> {
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut env = wmrl_envs::make(&self.cfg.env, &self.eval_options(seed, ep as u64))?;
            env.reset();
            let mut total = 0.0;
            loop {
                let step = env.step(&env.scripted_action())?;
                total += step.reward as f64;
                if step.done() {
                    break;
                }
            }
            returns.push(total);
        }
        Ok(EvalReport::from_returns(returns))
    }

    fn eval_options(&self, seed: u64, episode: u64) -> EnvOptions {
        let mut opts = self.env_options(EVAL_STREAM + episode, BackgroundPool::Eval);
        opts.seed = derive_seed(seed, EVAL_STREAM + episode);
        if self.cfg.distractor {
            opts.distractor = DistractorConfig::enabled(BackgroundPool::Eval, derive_seed(opts.seed, 7));
        }
        opts
    }

    /// Plays one episode with mode actions; `visit` sees each posterior state
    /// with the frame it filtered and the environment.
    fn run_episode(
        &self,
        env: &mut dyn Env,
        rng: &mut ChaCha8Rng,
        mut visit: impl FnMut(&PolicyState, &Frame, &dyn Env) -> Result<()>,
    ) -> Result<f64> {
        let mut frame = env.reset();
        let mut state: Option<PolicyState> = None;
        let mut total = 0.0;
        loop {
            let (actions, next) = self.policy_step(&[&frame], &[state.is_none()], state.as_ref(), false, rng)?;
            visit(&next, &frame, env)?;
            let step = env.step(&self.to_env_action(&actions[0]))?;
            total += step.reward as f64;
            if step.done() {
                return Ok(total);
            }
            frame = step.obs;
            state = Some(next);
        }
    }

    /// Mean squared reconstruction error of the decoder on background versus
    /// sprite pixels over evaluation episodes: `(background, sprite)`.
    pub fn reconstruction_split(&self, episodes: usize, seed: u64) -> Result<(f64, f64)> {
        if self.wm.decoder.is_none() {
            return Err(Error::InvalidArgument("decoder disabled".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EVAL_STREAM + 1));
        let (mut bg, mut bg_n, mut fg, mut fg_n) = (0.0, 0usize, 0.0, 0usize);
        let s = self.cfg.image_size;
        for ep in 0..episodes {
            let mut env = wmrl_envs::make(&self.cfg.env, &self.eval_options(seed, ep as u64))?;
            self.run_episode(env.as_mut(), &mut rng, |state, frame, env| {
                let recon = self.wm.decode(&state.model.feat()?)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                let mask = env.sprite_mask();
                let plane = s * s;
                for (i, sprite) in mask.iter().enumerate() {
                    let err: f64 = (0..3)
                        .map(|c| {
                            let target = frame.data[c * plane + i] as f64 / 255.0 - 0.5;
                            (recon[c * plane + i] as f64 - target).powi(2)
                        })
                        .sum();
                    if *sprite {
                        fg += err;
                        fg_n += 1;
                    } else {
                        bg += err;
                        bg_n += 1;
                    }
                }
                Ok(())
            })?;
        }
        if fg_n == 0 || bg_n == 0 {
            return Err(Error::InvalidArgument("no sprite or background pixels observed".into()));
        }
        Ok((bg / bg_n as f64, fg / fg_n as f64))
    }

    /// Filters `context` observed frames, then imagines `horizon` steps with
    /// mode actions and decodes every state.
    pub fn dream(&self, context: usize, horizon: usize, seed: u64) -> Result<Dream> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("dream horizon must be at least 1".into()));
        }
        if context < 1 {
            return Err(Error::InvalidArgument("dream needs at least one context frame".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EVAL_STREAM + 2));
        let mut env = wmrl_envs::make(&self.cfg.env, &self.eval_options(seed, 0))?;
        let mut frame = env.reset();
        let mut state: Option<PolicyState> = None;
        let mut states = Vec::new();
        let mut observed = Vec::new();
        for i in 0..context {
            let (actions, next) = self.policy_step(&[&frame], &[state.is_none()], state.as_ref(), false, &mut rng)?;
            observed.push(frame.clone());
            states.push(next.model.clone());
            state = Some(next);
            if i + 1 < context {
                let step = env.step(&self.to_env_action(&actions[0]))?;
                if step.done() {
                    return Err(Error::InvalidArgument("episode ended inside the context window".into()));
                }
                frame = step.obs;
            }
        }
        let mut current = states.last().expect("context >= 1").clone();
        for _ in 0..horizon {
            let action = self.ac.actor.dist(&current.feat()?)?.mode()?;
            current = self.wm.img_step(&current, &action, LatentSampling::Sample, &mut rng)?.detach();
            states.push(current.clone());
        }
        let mut frames = Vec::with_capacity(states.len());
        let mut latents = Vec::with_capacity(states.len());
        let l = self.wm.cfg.latent.num_latents;
        let c = self.wm.cfg.latent.classes_per_latent;
        for (t, st) in states.iter().enumerate() {
            frames.push(self.decode_frame(st)?);
            let z: Vec<f32> = st.z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            latents.push(LatentRecord {
                t,
                imagined: t >= context,
                classes: (0..l).map(|i| crate::distributions::argmax_f32(&z[i * c..(i + 1) * c])).collect(),
                h: st.h.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
            });
        }
        Ok(Dream { frames, context, observed, latents })
    }

    fn decode_frame(&self, state: &ModelState) -> Result<Frame> {
        let s = self.cfg.image_size;
        let img: Vec<f32> = self.wm.decode(&state.feat()?)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut frame = Frame::new(s);
        for (dst, v) in frame.data.iter_mut().zip(img) {
            *dst = ((v + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Ok(frame)
    }

    /// Collapse statistics on `samples` observations gathered with random actions.
    pub fn diagnose_collapse(&self, samples: usize, seed: u64) -> Result<CollapseReport> {
        if samples < 64 {
            return Err(Error::InvalidArgument(format!("collapse diagnostics need at least 64 samples, got {samples}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EVAL_STREAM + 3));
        let mut env = wmrl_envs::make(&self.cfg.env, &self.eval_options(seed, 0))?;
        let mut frame = env.reset();
        let mut state: Option<PolicyState> = None;
        let (mut xs, mut hs) = (Vec::new(), Vec::new());
        while xs.len() < samples {
            let x = self.wm.encode(&self.frames_tensor(&[&frame])?)?;
            let (_, mut next) = self.policy_step(&[&frame], &[state.is_none()], state.as_ref(), false, &mut rng)?;
            xs.push(x.detach());
            hs.push(next.model.h.clone());
            let action = self.random_action(&mut rng);
            next.action = Tensor::from_vec(action.clone(), (1, action.len()), &Device::Cpu)?.to_dtype(self.dtype)?;
            let step: Step = env.step(&self.to_env_action(&action))?;
            if step.done() {
                frame = env.reset();
                state = None;
            } else {
                frame = step.obs;
                state = Some(next);
            }
        }
        collapse_report(&Tensor::cat(&xs, 0)?, Some(&Tensor::cat(&hs, 0)?))
    }

    fn groups(&self) -> Vec<(&'static str, &Adam)> {
        let mut out = vec![("model", &self.wm_opt), ("actor", &self.ac.actor_opt), ("critic", &self.ac.critic_opt)];
        if let Some(d) = &self.dec_opt {
            out.push(("decoder", d));
        }
        out
    }

    fn all_params(&self) -> ParamSet {
        let mut all = self.wm.all_params();
        all.extend(&self.ac.actor_params);
        all.extend(&self.ac.critic_params);
        all.extend(&self.ac.ema_params);
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (name, var) in self.all_params().iter() {
            tensors.push((format!("param/{name}"), var.as_tensor().clone()));
        }
        for (group, opt) in self.groups() {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                tensors.push((format!("adam/{group}/m/{i}"), m.clone()));
                tensors.push((format!("adam/{group}/v/{i}"), v.clone()));
            }
        }
        if let Some(stats) = self.wm.bn_running() {
            tensors.push(("bn/mean".into(), stats.mean));
            tensors.push(("bn/var".into(), stats.var));
        }
        let opt_steps: serde_json::Map<String, serde_json::Value> =
            self.groups().into_iter().map(|(g, o)| (g.to_string(), json!(o.steps()))).collect();
        let meta = json!({
            "config": self.cfg,
            "action_space": self.space,
            "counters": self.counters,
            "scheduler": self.scheduler,
            "normalizer": self.ac.normalizer,
            "optimizer_steps": opt_steps,
            "rng": {
                "seed": self.rng.get_seed().to_vec(),
                "stream": self.rng.get_stream().to_string(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
        });
        checkpoint::save(path, &meta, &tensors)
    }

    /// Restores an agent; `overrides` may change run settings but not the
    /// action space.
    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let mut ckpt = checkpoint::load(path)?;
        let meta = ckpt.meta.clone();
        let field = |name: &str| -> Result<serde_json::Value> {
            meta.get(name).cloned().ok_or_else(|| Error::Checkpoint(format!("header lacks {name}")))
        };
        let cfg: TrainConfig = serde_json::from_value(field("config")?)?;
        let cfg = cfg.with_overrides(overrides)?;
        let stored: ActionSpace = serde_json::from_value(field("action_space")?)?;
        let env_space = wmrl_envs::action_space(&cfg.env)?;
        if stored != env_space {
            return Err(Error::InvalidArgument(format!(
                "checkpoint action space {stored:?} does not match {} ({env_space:?})",
                cfg.env
            )));
        }
        let dtype = DType::F32;
        let mut agent = Self::with_dtype(cfg, dtype)?;
        for (name, var) in agent.all_params().iter() {
            let t = ckpt.take(&format!("param/{name}"), dtype)?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
            }
            var.set(&t)?;
        }
        let steps = field("optimizer_steps")?;
        let mut restore = |group: &str, opt: &mut Adam| -> Result<()> {
            for i in 0..opt.m.len() {
                opt.m[i] = ckpt.take(&format!("adam/{group}/m/{i}"), dtype)?;
                opt.v[i] = ckpt.take(&format!("adam/{group}/v/{i}"), dtype)?;
            }
            opt.step = steps.get(group).and_then(|v| v.as_u64()).unwrap_or(0);
            Ok(())
        };
        restore("model", &mut agent.wm_opt)?;
        restore("actor", &mut agent.ac.actor_opt)?;
        restore("critic", &mut agent.ac.critic_opt)?;
        if let Some(d) = &mut agent.dec_opt {
            restore("decoder", d)?;
        }
        if agent.wm.batch_norm().is_some() {
            let mean = ckpt.take("bn/mean", dtype)?;
            let var = ckpt.take("bn/var", dtype)?;
            agent.wm.set_bn_running(RunningStats { mean, var });
        }
        agent.counters = serde_json::from_value(field("counters")?)?;
        agent.scheduler = serde_json::from_value(field("scheduler")?)?;
        agent.ac.normalizer = serde_json::from_value::<ReturnNormalizer>(field("normalizer")?)?;
        let rng = field("rng")?;
        let seed: Vec<u8> = serde_json::from_value(rng["seed"].clone())?;
        let seed: [u8; 32] = seed.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let parse = |k: &str| -> Result<u128> {
            rng[k].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Checkpoint(format!("bad rng {k}")))
        };
        let mut restored = ChaCha8Rng::from_seed(seed);
        restored.set_stream(parse("stream")? as u64);
        restored.set_word_pos(parse("word_pos")?);
        agent.rng = restored;
        Ok(agent)
    }
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for dir in [root.to_path_buf(), root.join("checkpoints"), root.join("media")] {
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoint("latest.ckpt")
    }

    pub fn media(&self, name: &str) -> PathBuf {
        self.root.join("media").join(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub counters: Counters,
    pub final_eval: Option<EvalReport>,
    pub episode_returns: Vec<f64>,
}

fn step_envs(envs: &mut [Box<dyn Env>], actions: &[Action], parallel: bool) -> Result<Vec<Step>> {
    if !parallel || envs.len() < 2 {
        return envs.iter_mut().zip(actions).map(|(e, a)| Ok(e.step(a)?)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = envs.iter_mut().zip(actions).map(|(e, a)| scope.spawn(move || e.step(a))).collect();
        handles
            .into_iter()
            .map(|h| Ok(h.join().map_err(|_| Error::InvalidArgument("environment worker panicked".into()))??))
            .collect()
    })
}

fn crossed(before: u64, after: u64, every: u64) -> bool {
    every > 0 && after / every > before / every
}

/// Full training run writing into `run_dir`.
pub fn train(cfg: TrainConfig, run_dir: &Path) -> Result<TrainSummary> {
    let run = RunDir::create(run_dir)?;
    std::fs::write(run.config(), cfg.to_toml_string()).map_err(io_err(run.config()))?;
    let mut metrics = MetricsWriter::create(&run.metrics())?;
    let mut agent = Agent::new(cfg.clone())?;
    let n = cfg.env_instances;
    let replay = ReplayBuffer::new(cfg.replay_capacity, cfg.image_size, agent.space.width())?;
    let mut envs: Vec<Box<dyn Env>> =
        (0..n).map(|i| agent.make_env(i as u64, BackgroundPool::Train)).collect::<Result<_>>()?;
    let repeat = envs[0].spec().action_repeat as u64;
    let zero_action = vec![0.0f32; agent.space.width()];
    let mut frames: Vec<Frame> = Vec::with_capacity(n);
    for (i, env) in envs.iter_mut().enumerate() {
        let f = env.reset();
        replay.append(first_transition(&f, &zero_action, i))?;
        frames.push(f);
    }
    let mut first = vec![true; n];
    let mut state: Option<PolicyState> = None;
    let mut ep_return = vec![0.0f64; n];
    let mut ep_len = vec![0usize; n];
    let mut episode_returns = Vec::new();
    let mut last_eval = None;
    let budget_left = |a: &Agent| {
        a.counters.env_steps < cfg.env_steps && (cfg.max_grad_steps == 0 || a.counters.grad_steps < cfg.max_grad_steps)
    };

    while budget_left(&agent) {
        let warm = replay.ready(cfg.min_replay);
        let frame_refs: Vec<&Frame> = frames.iter().collect();
        let mut rng = std::mem::replace(&mut agent.rng, ChaCha8Rng::seed_from_u64(0));
        let (mut vectors, mut next) = agent.policy_step(&frame_refs, &first, state.as_ref(), true, &mut rng)?;
        if !warm {
            vectors = (0..n).map(|_| agent.random_action(&mut rng)).collect();
            let flat: Vec<f32> = vectors.iter().flatten().copied().collect();
            next.action = Tensor::from_vec(flat, (n, agent.space.width()), &Device::Cpu)?.to_dtype(agent.dtype)?;
        }
        agent.rng = rng;
        let actions: Vec<Action> = vectors.iter().map(|v| agent.to_env_action(v)).collect();
        let steps = step_envs(&mut envs, &actions, cfg.parallel_envs)?;
        let before = agent.counters.env_steps;
        agent.counters.env_steps += n as u64 * repeat;
        agent.counters.policy_steps += n as u64;
        for (i, step) in steps.into_iter().enumerate() {
            replay.append(Transition {
                obs: step.obs.data.clone(),
                action: vectors[i].clone(),
                reward: step.reward,
                cont: if step.cont { 1.0 } else { 0.0 },
                is_first: false,
                env_id: i,
            })?;
            ep_return[i] += step.reward as f64;
            ep_len[i] += 1;
            if step.done() {
                agent.counters.episodes += 1;
                episode_returns.push(ep_return[i]);
                metrics.write(&MetricsRecord::Episode(EpisodeRecord {
                    env_steps: agent.counters.env_steps,
                    grad_steps: agent.counters.grad_steps,
                    env_id: i,
                    episode_return: ep_return[i],
                    length: ep_len[i],
                }))?;
                ep_return[i] = 0.0;
                ep_len[i] = 0;
                let f = envs[i].reset();
                replay.append(first_transition(&f, &zero_action, i))?;
                frames[i] = f;
                first[i] = true;
            } else {
                frames[i] = step.obs;
                first[i] = false;
            }
        }
        state = Some(next);
        if warm {
            agent.scheduler.observe(n as u64);
        }
        while agent.scheduler.pending() > 0 && budget_left_grad(&agent, &cfg) {
            let batch = match replay.sample(cfg.batch_size, cfg.batch_length, &mut agent.rng) {
                Ok(b) => b,
                Err(Error::NotReady { .. }) => break,
                Err(e) => return Err(e),
            };
            match agent.train_step(&batch) {
                Ok(record) => metrics.write(&MetricsRecord::Train(record))?,
                Err(err @ Error::Diverged { .. }) => {
                    agent.save(&run.checkpoint("postmortem.ckpt"))?;
                    return Err(err);
                }
                Err(e) => return Err(e),
            }
            agent.scheduler.record_update();
        }
        let after = agent.counters.env_steps;
        if crossed(before, after, cfg.eval_every) && cfg.eval_episodes > 0 {
            let report = agent.evaluate(cfg.eval_episodes, cfg.seed)?;
            metrics.write(&eval_record(&agent, &report))?;
            last_eval = Some(report);
        }
        if crossed(before, after, cfg.checkpoint_every) {
            agent.save(&run.latest_checkpoint())?;
        }
    }
    let final_eval = if cfg.eval_episodes > 0 {
        let report = agent.evaluate(cfg.eval_episodes, cfg.seed)?;
        metrics.write(&eval_record(&agent, &report))?;
        Some(report)
    } else {
        last_eval
    };
    agent.save(&run.latest_checkpoint())?;
    Ok(TrainSummary { counters: agent.counters, final_eval, episode_returns })
}

fn budget_left_grad(agent: &Agent, cfg: &TrainConfig) -> bool {
    cfg.max_grad_steps == 0 || agent.counters.grad_steps < cfg.max_grad_steps
}

fn eval_record(agent: &Agent, report: &EvalReport) -> MetricsRecord {
    MetricsRecord::Eval(EvalRecord {
        env_steps: agent.counters.env_steps,
        grad_steps: agent.counters.grad_steps,
        mean: report.mean,
        median: report.median,
        returns: report.returns.clone(),
    })
}

fn first_transition(frame: &Frame, zero_action: &[f32], env_id: usize) -> Transition {
    Transition {
        obs: frame.data.clone(),
        action: zero_action.to_vec(),
        reward: 0.0,
        cont: 1.0,
        is_first: true,
        env_id,
    }
}

/// Tiles frames into a PNG grid `columns` wide with a one-pixel gutter.
pub fn save_frame_grid(frames: &[Frame], columns: usize, path: &Path) -> Result<()> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("no frames to tile".into()));
    };
    let s = first.size as u32;
    let cols = columns.max(1) as u32;
    let rows = (frames.len() as u32).div_ceil(cols);
    let mut img = image::RgbImage::from_pixel(cols * (s + 1) + 1, rows * (s + 1) + 1, image::Rgb([255, 255, 255]));
    for (k, frame) in frames.iter().enumerate() {
        let (ox, oy) = (1 + (k as u32 % cols) * (s + 1), 1 + (k as u32 / cols) * (s + 1));
        for y in 0..s {
            for x in 0..s {
                img.put_pixel(ox + x, oy + y, image::Rgb(frame.pixel(x as usize, y as usize)));
            }
        }
    }
    img.save(path)?;
    Ok(())
}
