//! Animated procedural backgrounds used as task-irrelevant visual distraction.
//!
//! A background "clip" is an endless texture built from drifting value-noise
//! octaves blended with a travelling colour gradient. Clips are indexed by an
//! integer id; the train and eval pools own disjoint id ranges, so evaluation
//! backgrounds are never seen during training.

use std::f32::consts::TAU;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Frame;

/// Number of clips in each pool.
pub const POOL_SIZE: u64 = 1 << 20;

/// Colour of the background when distractors are disabled.
pub const SOLID_BACKGROUND: [u8; 3] = [24, 24, 32];

const LATTICE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundPool {
    Train,
    Eval,
}

impl BackgroundPool {
    pub fn clip_ids(self) -> Range<u64> {
        match self {
            BackgroundPool::Train => 0..POOL_SIZE,
            BackgroundPool::Eval => POOL_SIZE..2 * POOL_SIZE,
        }
    }
}

/// Motion parameters shared by every clip of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureDynamics {
    /// Noise drift per frame, in frame widths.
    pub drift: f32,
    /// Phase advance of the colour gradient per frame, in cycles.
    pub gradient_speed: f32,
    pub octaves: usize,
}

impl Default for TextureDynamics {
    fn default() -> Self {
        Self { drift: 0.01, gradient_speed: 0.01, octaves: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorConfig {
    pub enabled: bool,
    pub pool: BackgroundPool,
    pub seed: u64,
    pub dynamics: TextureDynamics,
}

impl DistractorConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            pool: BackgroundPool::Train,
            seed: 0,
            dynamics: TextureDynamics::default(),
        }
    }

    pub fn enabled(pool: BackgroundPool, seed: u64) -> Self {
        Self { enabled: true, pool, seed, dynamics: TextureDynamics::default() }
    }

    /// Clip id selected by this configuration's seed.
    pub fn clip_id(&self) -> u64 {
        self.pool.clip_ids().start + splitmix64(self.seed) % POOL_SIZE
    }

    /// Configuration for the `episode`-th episode of a stream: same pool, fresh clip.
    pub fn for_episode(&self, episode: u64) -> Self {
        Self { seed: splitmix64(self.seed ^ splitmix64(episode.wrapping_add(1))), ..self.clone() }
    }
}

/// Renders the background layer at frame `t`.
pub fn render_background(cfg: &DistractorConfig, t: usize, size: usize) -> Frame {
    Background::new(cfg).render(t, size)
}

/// A background ready to render: either a solid fill or a texture clip.
#[derive(Debug, Clone)]
pub struct Background {
    clip: Option<Clip>,
}

impl Background {
    pub fn new(cfg: &DistractorConfig) -> Self {
        let clip = cfg.enabled.then(|| Clip::new(cfg.clip_id(), cfg.dynamics));
        Self { clip }
    }

    pub fn render(&self, t: usize, size: usize) -> Frame {
        match &self.clip {
            Some(clip) => clip.render(t, size),
            None => {
                let mut frame = Frame::new(size);
                let plane = size * size;
                for (c, value) in SOLID_BACKGROUND.iter().enumerate() {
                    frame.data[c * plane..(c + 1) * plane].fill(*value);
                }
                frame
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Octave {
    frequency: f32,
    amplitude: f32,
    velocity: (f32, f32),
    offset: (f32, f32),
}

#[derive(Debug, Clone)]
struct Clip {
    palette: [[f32; 3]; 3],
    lattice: Vec<f32>,
    octaves: Vec<Octave>,
    gradient_dir: (f32, f32),
    gradient_freq: f32,
    gradient_speed: f32,
}

impl Clip {
    fn new(id: u64, dynamics: TextureDynamics) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let colour = |rng: &mut ChaCha8Rng| [rng.random(), rng.random(), rng.random()];
        let palette = [colour(&mut rng), colour(&mut rng), colour(&mut rng)];
        let lattice = (0..LATTICE * LATTICE).map(|_| rng.random::<f32>()).collect();
        let octaves = (0..dynamics.octaves.max(1))
            .map(|o| {
                let angle = rng.random::<f32>() * TAU;
                let speed = dynamics.drift * rng.random_range(0.5..1.5);
                Octave {
                    frequency: 2.0 * (1 << o) as f32,
                    amplitude: 0.5f32.powi(o as i32),
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                    offset: (rng.random::<f32>() * LATTICE as f32, rng.random::<f32>() * LATTICE as f32),
                }
            })
            .collect();
        let angle = rng.random::<f32>() * TAU;
        Self {
            palette,
            lattice,
            octaves,
            gradient_dir: (angle.cos(), angle.sin()),
            gradient_freq: rng.random_range(1.0..3.0),
            gradient_speed: dynamics.gradient_speed * rng.random_range(0.5..1.5),
        }
    }

    fn lattice_at(&self, i: i64, j: i64) -> f32 {
        let n = LATTICE as i64;
        self.lattice[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize]
    }

    fn value_noise(&self, u: f32, v: f32) -> f32 {
        let (i, j) = (u.floor(), v.floor());
        let smooth = |f: f32| f * f * (3.0 - 2.0 * f);
        let (fu, fv) = (smooth(u - i), smooth(v - j));
        let (i, j) = (i as i64, j as i64);
        let top = self.lattice_at(i, j) * (1.0 - fu) + self.lattice_at(i + 1, j) * fu;
        let bottom = self.lattice_at(i, j + 1) * (1.0 - fu) + self.lattice_at(i + 1, j + 1) * fu;
        top * (1.0 - fv) + bottom * fv
    }

    fn intensity(&self, x: f32, y: f32, t: f32) -> f32 {
        let mut noise = 0.0;
        let mut norm = 0.0;
        for o in &self.octaves {
            let u = o.frequency * (x + o.velocity.0 * t) + o.offset.0;
            let v = o.frequency * (y + o.velocity.1 * t) + o.offset.1;
            noise += o.amplitude * self.value_noise(u, v);
            norm += o.amplitude;
        }
        let phase = self.gradient_freq * (self.gradient_dir.0 * x + self.gradient_dir.1 * y)
            - self.gradient_speed * t;
        let wave = 0.5 + 0.5 * (TAU * phase).sin();
        (0.6 * noise / norm + 0.4 * wave).clamp(0.0, 1.0)
    }

    fn render(&self, t: usize, size: usize) -> Frame {
        let mut frame = Frame::new(size);
        let plane = size * size;
        let t = t as f32;
        for y in 0..size {
            for x in 0..size {
                let s = self.intensity((x as f32 + 0.5) / size as f32, (y as f32 + 0.5) / size as f32, t);
                let (a, b, w) = if s < 0.5 {
                    (self.palette[0], self.palette[1], 2.0 * s)
                } else {
                    (self.palette[1], self.palette[2], 2.0 * s - 1.0)
                };
                let i = y * size + x;
                for c in 0..3 {
                    let v = a[c] * (1.0 - w) + b[c] * w;
                    frame.data[c * plane + i] = (v * 255.0).round() as u8;
                }
            }
        }
        frame
    }
}

/// Small stateless integer hash used to derive independent seeds.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
