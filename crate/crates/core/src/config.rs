//! Training configuration: one flat table of named hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::io_err;
use crate::{Error, Result};

/// How actor gradients are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorGrad {
    /// Reinforce for discrete action spaces, dynamics backprop for continuous ones.
    Auto,
    Reinforce,
    Dynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // Run
    pub env: String,
    pub seed: u64,
    /// Budget in environment (physics) steps, summed over instances.
    pub env_steps: u64,
    /// Optional cap on gradient steps; 0 means unlimited.
    pub max_grad_steps: u64,
    pub image_size: usize,
    /// 0 selects the environment default.
    pub action_repeat: usize,
    pub distractor: bool,
    pub env_instances: usize,
    pub parallel_envs: bool,
    /// Env steps between evaluations; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Env steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,

    // Replay and ratio
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub batch_length: usize,
    pub train_ratio: u64,
    pub min_replay: usize,

    // World model
    pub num_latents: usize,
    pub classes_per_latent: usize,
    pub unimix: f64,
    pub deter: usize,
    pub hidden: usize,
    pub units: usize,
    pub mlp_layers: usize,
    pub cnn_depth: usize,
    pub twohot_bins: usize,
    pub twohot_low: f64,
    pub twohot_high: f64,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    pub free_nats: f64,
    pub reward_loss_scale: f64,
    pub value_head: bool,
    pub action_head: bool,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub decoder: bool,
    pub model_lr: f64,
    pub model_eps: f64,
    pub model_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub slow_value_decay: f64,
    pub gamma: f64,
    pub lambda: f64,

    // Actor critic
    pub horizon: usize,
    pub critic_ema_decay: f64,
    pub critic_ema_reg: f64,
    pub return_norm_decay: f64,
    pub return_norm_low: f64,
    pub return_norm_high: f64,
    pub entropy_scale: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub ac_eps: f64,
    pub ac_clip: f64,
    pub min_std: f64,
    pub actor_grad: ActorGrad,
    /// Detach the baseline `v(s_t)` in the dynamics-backprop advantage.
    pub detach_baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "pixelpoint-dense".into(),
            seed: 0,
            env_steps: 200_000,
            max_grad_steps: 0,
            image_size: 64,
            action_repeat: 0,
            distractor: false,
            env_instances: 4,
            parallel_envs: false,
            eval_every: 10_000,
            eval_episodes: 10,
            checkpoint_every: 10_000,

            replay_capacity: 1_000_000,
            batch_size: 16,
            batch_length: 64,
            train_ratio: 512,
            min_replay: 1024,

            num_latents: 32,
            classes_per_latent: 32,
            unimix: 0.01,
            deter: 512,
            hidden: 512,
            units: 512,
            mlp_layers: 3,
            cnn_depth: 32,
            twohot_bins: 255,
            twohot_low: -20.0,
            twohot_high: 20.0,
            beta_pred: 1.0,
            beta_dyn: 0.95,
            beta_rep: 0.05,
            free_nats: 1.0,
            reward_loss_scale: 1.0,
            value_head: true,
            action_head: true,
            batch_norm: true,
            bn_momentum: 0.9,
            decoder: true,
            model_lr: 1e-4,
            model_eps: 1e-8,
            model_clip: 1000.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            slow_value_decay: 0.99,
            gamma: 0.997,
            lambda: 0.95,

            horizon: 15,
            critic_ema_decay: 0.98,
            critic_ema_reg: 1.0,
            return_norm_decay: 0.99,
            return_norm_low: 5.0,
            return_norm_high: 95.0,
            entropy_scale: 3e-4,
            actor_lr: 3e-5,
            critic_lr: 3e-5,
            ac_eps: 1e-5,
            ac_clip: 100.0,
            min_std: 0.1,
            actor_grad: ActorGrad::Auto,
            detach_baseline: false,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    check(v > 0.0 && v < 1.0, || format!("{name} must lie in (0, 1), got {v}"))
}

fn unit_closed(name: &str, v: f64) -> Result<()> {
    check((0.0..=1.0).contains(&v), || format!("{name} must lie in [0, 1], got {v}"))
}

fn positive(name: &str, v: f64) -> Result<()> {
    check(v > 0.0 && v.is_finite(), || format!("{name} must be positive, got {v}"))
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    check(v >= 0.0 && v.is_finite(), || format!("{name} must be non-negative, got {v}"))
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a path without extension also tries `.toml`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = resolve_config_path(path.as_ref());
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `key=value` overrides. Values parse as TOML scalars, falling
    /// back to a bare string. The result is validated.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            // Integers are accepted where floats are expected.
            let value = match (&table[key], value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            table.insert(key.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check(wmrl_envs::REGISTRY.contains(&self.env.as_str()), || {
            format!("unknown env `{}` (known: {})", self.env, wmrl_envs::REGISTRY.join(", "))
        })?;
        check(self.image_size >= 16 && self.image_size.is_power_of_two(), || {
            format!("image_size must be a power of two >= 16, got {}", self.image_size)
        })?;
        for (name, v) in [
            ("env_instances", self.env_instances),
            ("eval_episodes", self.eval_episodes),
            ("replay_capacity", self.replay_capacity),
            ("batch_size", self.batch_size),
            ("batch_length", self.batch_length),
            ("num_latents", self.num_latents),
            ("classes_per_latent", self.classes_per_latent),
            ("deter", self.deter),
            ("hidden", self.hidden),
            ("units", self.units),
            ("cnn_depth", self.cnn_depth),
            ("horizon", self.horizon),
        ] {
            check(v > 0, || format!("{name} must be positive"))?;
        }
        check(self.train_ratio > 0, || "train_ratio must be positive".into())?;
        check(self.batch_size >= 2 || !self.batch_norm, || "batch normalisation needs batch_size >= 2".into())?;
        check(self.batch_length >= 2, || "batch_length must be at least 2".into())?;
        check(self.replay_capacity >= self.batch_length, || "replay_capacity must hold one sequence".into())?;
        check(self.twohot_bins >= 2 && self.twohot_low < self.twohot_high, || "twohot grid needs >= 2 bins and low < high".into())?;
        unit_closed("unimix", self.unimix)?;
        for (name, v) in [
            ("bn_momentum", self.bn_momentum),
            ("slow_value_decay", self.slow_value_decay),
            ("critic_ema_decay", self.critic_ema_decay),
            ("return_norm_decay", self.return_norm_decay),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            unit_closed(name, v)?;
        }
        unit_open("gamma", self.gamma)?;
        unit_closed("lambda", self.lambda)?;
        for (name, v) in [
            ("beta_pred", self.beta_pred),
            ("beta_dyn", self.beta_dyn),
            ("beta_rep", self.beta_rep),
            ("free_nats", self.free_nats),
            ("reward_loss_scale", self.reward_loss_scale),
            ("critic_ema_reg", self.critic_ema_reg),
            ("entropy_scale", self.entropy_scale),
        ] {
            non_negative(name, v)?;
        }
        for (name, v) in [
            ("model_lr", self.model_lr),
            ("model_eps", self.model_eps),
            ("model_clip", self.model_clip),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("ac_eps", self.ac_eps),
            ("ac_clip", self.ac_clip),
            ("min_std", self.min_std),
        ] {
            positive(name, v)?;
        }
        check(
            0.0 <= self.return_norm_low && self.return_norm_low < self.return_norm_high && self.return_norm_high <= 100.0,
            || "return normalisation percentiles must satisfy 0 <= low < high <= 100".into(),
        )?;
        Ok(())
    }

    /// Number of encoder stages that bring the image down to 4×4.
    pub fn encoder_stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }
}

/// `presets/name` resolves to `presets/name.toml` when the bare path is missing.
pub fn resolve_config_path(path: &Path) -> PathBuf {
    if path.exists() || path.extension().is_some() {
        path.to_path_buf()
    } else {
        path.with_extension("toml")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(cfg.encoder_stages(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_toml_str("batch_sise = 3").is_err());
        assert!(TrainConfig::default().with_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn overrides_parse_scalars() {
        let cfg = TrainConfig::default()
            .with_overrides(&["beta_rep=0.0", "beta_dyn=1", "env=pixelcatch", "batch_norm=false", "seed = 7"])
            .unwrap();
        assert_eq!(cfg.beta_rep, 0.0);
        assert_eq!(cfg.beta_dyn, 1.0);
        assert_eq!(cfg.env, "pixelcatch");
        assert!(!cfg.batch_norm);
        assert_eq!(cfg.seed, 7);
        assert!(TrainConfig::default().with_overrides(&["gamma=1.5"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["batch_size=x"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["env=cartpole"]).is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = TrainConfig::from_toml_str("env = \"pixelcatch\"\ntrain_ratio = 1024\n").unwrap();
        assert_eq!(cfg.train_ratio, 1024);
        assert_eq!(cfg.batch_size, 16);
    }
}
