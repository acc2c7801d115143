//! Small pixel-observation control tasks.
//!
//! Every task renders RGB frames from its physical state, optionally composited
//! over an animated procedural background ([`distractor`]) that never affects
//! rewards or dynamics. Environments are created by name through [`make`].

pub mod catch;
pub mod distractor;
pub mod point;
mod raster;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catch::PixelCatch;
pub use distractor::{BackgroundPool, DistractorConfig};
pub use point::{PixelPoint, PointReward};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}` (known: {known})", known = REGISTRY.join(", "))]
    UnknownEnv(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

/// Names accepted by [`make`].
pub const REGISTRY: &[&str] = &["pixelpoint-dense", "pixelpoint-sparse", "pixelcatch"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { dim: usize, low: f32, high: f32 },
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of the action vector fed to models (one-hot width for discrete spaces).
    pub fn width(&self) -> usize {
        match self {
            ActionSpace::Continuous { dim, .. } => *dim,
            ActionSpace::Discrete { n } => *n,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }

    /// Checks an action against the space. Continuous actions are clipped into
    /// the box; discrete indices out of range are rejected.
    pub fn sanitize(&self, action: &Action) -> Result<Action> {
        match (self, action) {
            (ActionSpace::Continuous { dim, low, high }, Action::Continuous(v)) => {
                if v.len() != *dim {
                    return Err(EnvError::InvalidAction(format!(
                        "expected {dim} continuous components, got {}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| x.is_nan()) {
                    return Err(EnvError::InvalidAction("NaN component".into()));
                }
                Ok(Action::Continuous(v.iter().map(|x| x.clamp(*low, *high)).collect()))
            }
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => {
                if i >= n {
                    Err(EnvError::InvalidAction(format!("index {i} outside 0..{n}")))
                } else {
                    Ok(Action::Discrete(*i))
                }
            }
            (space, action) => Err(EnvError::InvalidAction(format!(
                "{action:?} does not belong to {space:?}"
            ))),
        }
    }

    /// Dense vector form: the clipped components, or a one-hot row.
    pub fn to_vector(&self, action: &Action) -> Result<Vec<f32>> {
        match self.sanitize(action)? {
            Action::Continuous(v) => Ok(v),
            Action::Discrete(i) => {
                let mut v = vec![0.0; self.width()];
                v[i] = 1.0;
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub action_space: ActionSpace,
    /// Square frame side in pixels; frames always have 3 channels.
    pub image_size: usize,
    /// Episode cap in environment (physics) steps, counting repeated actions.
    pub max_episode_steps: usize,
    pub action_repeat: usize,
}

/// An RGB frame stored channel-major (`3 × size × size`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub size: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(size: usize) -> Self {
        Self { size, data: vec![0; 3 * size * size] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let plane = self.size * self.size;
        let i = y * self.size + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            image::Rgb(self.pixel(x as usize, y as usize))
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb_image().save(path)?;
        Ok(())
    }
}

/// Outcome of one agent step (possibly several repeated physics steps).
#[derive(Debug, Clone)]
pub struct Step {
    pub obs: Frame,
    /// Sum of rewards over the repeated physics steps.
    pub reward: f32,
    /// False once the episode is over, whether by termination or timeout.
    pub cont: bool,
    pub terminal: bool,
    /// Set when the episode was cut by `max_episode_steps`.
    pub timeout: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        !self.cont
    }
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode and returns its first frame.
    fn reset(&mut self) -> Frame;

    fn step(&mut self, action: &Action) -> Result<Step>;

    /// Pixels covered by task sprites in the current frame (row-major, `size²`).
    fn sprite_mask(&self) -> Vec<bool>;

    /// A copy of the current frame.
    fn render(&self) -> Frame;

    /// Action of the task's hand-written reference controller, which reads the
    /// true state. Used as the optimal-return yardstick.
    fn scripted_action(&self) -> Action;
}

#[derive(Debug, Clone)]
pub struct EnvOptions {
    pub seed: u64,
    pub image_size: usize,
    /// Overrides the task default when set.
    pub action_repeat: Option<usize>,
    pub distractor: DistractorConfig,
}

impl Default for EnvOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            action_repeat: None,
            distractor: DistractorConfig::disabled(),
        }
    }
}

/// Builds an environment from its registry name.
pub fn make(name: &str, opts: &EnvOptions) -> Result<Box<dyn Env>> {
    if opts.image_size < 8 {
        return Err(EnvError::InvalidOption(format!(
            "image_size {} is too small",
            opts.image_size
        )));
    }
    if opts.action_repeat == Some(0) {
        return Err(EnvError::InvalidOption("action_repeat must be positive".into()));
    }
    match name {
        "pixelpoint-dense" => Ok(Box::new(PixelPoint::new(PointReward::Dense, opts))),
        "pixelpoint-sparse" => Ok(Box::new(PixelPoint::new(PointReward::Sparse, opts))),
        "pixelcatch" => Ok(Box::new(PixelCatch::new(opts))),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

/// Action space of a registered environment without building it.
pub fn action_space(name: &str) -> Result<ActionSpace> {
    Ok(make(name, &EnvOptions { image_size: 8, ..Default::default() })?
        .spec()
        .action_space
        .clone())
}
