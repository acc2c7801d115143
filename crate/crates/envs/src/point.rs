//! PixelPoint: steer a dot onto a goal disc with planar velocity commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distractor::{splitmix64, Background, DistractorConfig};
use crate::raster::Canvas;
use crate::{Action, ActionSpace, Env, EnvOptions, EnvSpec, Frame, Result, Step};

/// Distance travelled per physics step at full command, in arena units.
pub const SPEED: f32 = 0.05;
pub const GOAL_RADIUS: f32 = 0.12;
pub const AGENT_RADIUS: f32 = 0.07;
/// Distance at which the dense reward reaches zero.
pub const DENSE_RANGE: f32 = 1.0;
pub const MAX_EPISODE_STEPS: usize = 200;
pub const DEFAULT_ACTION_REPEAT: usize = 2;
/// Initial agent and goal coordinates are drawn from `[-SPAWN, SPAWN]`.
pub const SPAWN: f32 = 0.8;

const GOAL_RGB: [u8; 3] = [40, 200, 90];
const AGENT_RGB: [u8; 3] = [250, 70, 60];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointReward {
    /// `1 - min(d, DENSE_RANGE) / DENSE_RANGE` per physics step.
    Dense,
    /// 1 while the agent centre lies inside the goal disc.
    Sparse,
}

impl PointReward {
    pub fn reward(self, distance: f32) -> f32 {
        match self {
            PointReward::Dense => 1.0 - distance.min(DENSE_RANGE) / DENSE_RANGE,
            PointReward::Sparse => {
                if distance <= GOAL_RADIUS {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub struct PixelPoint {
    spec: EnvSpec,
    kind: PointReward,
    rng: ChaCha8Rng,
    distractor: DistractorConfig,
    background: Background,
    episode: u64,
    t: usize,
    pos: [f32; 2],
    goal: [f32; 2],
    frame: Frame,
    mask: Vec<bool>,
}

impl PixelPoint {
    pub fn new(kind: PointReward, opts: &EnvOptions) -> Self {
        let name = match kind {
            PointReward::Dense => "pixelpoint-dense",
            PointReward::Sparse => "pixelpoint-sparse",
        };
        let spec = EnvSpec {
            name: name.to_string(),
            action_space: ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 },
            image_size: opts.image_size,
            max_episode_steps: MAX_EPISODE_STEPS,
            action_repeat: opts.action_repeat.unwrap_or(DEFAULT_ACTION_REPEAT),
        };
        let mut env = Self {
            spec,
            kind,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(opts.seed)),
            distractor: opts.distractor.clone(),
            background: Background::new(&opts.distractor),
            episode: 0,
            t: 0,
            pos: [0.0; 2],
            goal: [0.0; 2],
            frame: Frame::new(opts.image_size),
            mask: vec![false; opts.image_size * opts.image_size],
        };
        env.reset();
        env.episode = 0;
        env
    }

    pub fn position(&self) -> [f32; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f32; 2] {
        self.goal
    }

    pub fn distance(&self) -> f32 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Straight-line controller: full speed toward the goal, slowing down so the
    /// last repeated block lands exactly on it.
    pub fn scripted_action(&self) -> Action {
        let d = self.distance();
        if d <= f32::EPSILON {
            return Action::Continuous(vec![0.0, 0.0]);
        }
        let magnitude = (d / (SPEED * self.spec.action_repeat as f32)).min(1.0);
        Action::Continuous(vec![
            (self.goal[0] - self.pos[0]) / d * magnitude,
            (self.goal[1] - self.pos[1]) / d * magnitude,
        ])
    }

    fn draw(&mut self) {
        let mut canvas = Canvas::new(self.background.render(self.t, self.spec.image_size));
        let unit = |v: f32| (v + 1.0) / 2.0;
        canvas.disc(unit(self.goal[0]), unit(self.goal[1]), GOAL_RADIUS / 2.0, GOAL_RGB);
        canvas.disc(unit(self.pos[0]), unit(self.pos[1]), AGENT_RADIUS / 2.0, AGENT_RGB);
        self.frame = canvas.frame;
        self.mask = canvas.mask;
    }
}

impl Env for PixelPoint {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Frame {
        let coord = |rng: &mut ChaCha8Rng| [rng.random_range(-SPAWN..=SPAWN), rng.random_range(-SPAWN..=SPAWN)];
        self.pos = coord(&mut self.rng);
        self.goal = coord(&mut self.rng);
        self.background = Background::new(&self.distractor.for_episode(self.episode));
        self.episode += 1;
        self.t = 0;
        self.draw();
        self.frame.clone()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let Action::Continuous(a) = self.spec.action_space.sanitize(action)? else {
            unreachable!("sanitize keeps the action kind")
        };
        let norm = (a[0] * a[0] + a[1] * a[1]).sqrt().max(1.0);
        let velocity = [a[0] / norm * SPEED, a[1] / norm * SPEED];
        let mut reward = 0.0;
        let mut timeout = false;
        for _ in 0..self.spec.action_repeat {
            self.pos[0] = (self.pos[0] + velocity[0]).clamp(-1.0, 1.0);
            self.pos[1] = (self.pos[1] + velocity[1]).clamp(-1.0, 1.0);
            self.t += 1;
            reward += self.kind.reward(self.distance());
            if self.t >= self.spec.max_episode_steps {
                timeout = true;
                break;
            }
        }
        self.draw();
        Ok(Step { obs: self.frame.clone(), reward, cont: !timeout, terminal: false, timeout })
    }

    fn sprite_mask(&self) -> Vec<bool> {
        self.mask.clone()
    }

    fn render(&self) -> Frame {
        self.frame.clone()
    }

    fn scripted_action(&self) -> Action {
        PixelPoint::scripted_action(self)
    }
}

/// Episode return of the straight-line controller starting `initial_distance`
/// from the goal, evaluated in closed form per physics step.
///
/// Full-speed blocks cover `SPEED * repeat` each; the block that would overshoot
/// instead moves `d / repeat` per physics step and ends on the goal.
pub fn straight_line_return(kind: PointReward, initial_distance: f64, action_repeat: usize) -> f64 {
    let s = SPEED as f64;
    let r = action_repeat as f64;
    let full_blocks = (initial_distance / (s * r)).floor();
    let remainder = initial_distance - full_blocks * s * r;
    let distance_after = |n: usize| -> f64 {
        // Distance after `n` physics steps (n >= 1).
        let block = ((n - 1) / action_repeat) as f64;
        let within = ((n - 1) % action_repeat + 1) as f64;
        if block < full_blocks {
            initial_distance - (block * r + within) * s
        } else if block == full_blocks {
            remainder - within * remainder / r
        } else {
            0.0
        }
    };
    (1..=MAX_EPISODE_STEPS)
        .map(|n| kind.reward(distance_after(n).max(0.0) as f32) as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{BackgroundPool, EnvOptions};

    fn env(kind: PointReward, seed: u64) -> PixelPoint {
        PixelPoint::new(kind, &EnvOptions { seed, ..Default::default() })
    }

    /// Resets, then follows the scripted controller to the end of the episode.
    fn run_scripted(env: &mut PixelPoint) -> (f64, f64, usize) {
        env.reset();
        let d0 = env.distance() as f64;
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            let step = env.step(&env.scripted_action()).unwrap();
            ret += step.reward as f64;
            steps += 1;
            if step.done() {
                assert!(step.timeout && !step.terminal);
                return (d0, ret, steps);
            }
        }
    }

    #[test]
    fn scripted_rollout_matches_closed_form_return() {
        for kind in [PointReward::Dense, PointReward::Sparse] {
            let mut e = env(kind, 3);
            for _ in 0..20 {
                let (d0, ret, _) = run_scripted(&mut e);
                let analytic = straight_line_return(kind, d0, DEFAULT_ACTION_REPEAT);
                assert!((ret - analytic).abs() < 1e-2, "{kind:?}: rollout {ret} vs analytic {analytic}");
            }
        }
    }

    #[test]
    fn episodes_last_exactly_the_step_cap() {
        let mut e = env(PointReward::Dense, 0);
        let (_, _, steps) = run_scripted(&mut e);
        assert_eq!(steps, MAX_EPISODE_STEPS / DEFAULT_ACTION_REPEAT);
    }

    #[test]
    fn scripted_beats_idle() {
        let mut e = env(PointReward::Dense, 11);
        let (_, scripted, _) = run_scripted(&mut e);
        let mut idle = env(PointReward::Dense, 11);
        idle.reset();
        let mut ret = 0.0;
        loop {
            let s = idle.step(&Action::Continuous(vec![0.0, 0.0])).unwrap();
            ret += s.reward as f64;
            if s.done() {
                break;
            }
        }
        assert!(scripted > ret);
    }

    #[test]
    fn reward_is_invariant_to_background_seed() {
        let make = |bg_seed| {
            PixelPoint::new(
                PointReward::Dense,
                &EnvOptions {
                    seed: 5,
                    distractor: DistractorConfig::enabled(BackgroundPool::Train, bg_seed),
                    ..Default::default()
                },
            )
        };
        let (mut a, mut b) = (make(1), make(2));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let (fa, fb) = (a.reset(), b.reset());
            assert_ne!(fa, fb);
            loop {
                let act = Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let (sa, sb) = (a.step(&act).unwrap(), b.step(&act).unwrap());
                assert_eq!(sa.reward, sb.reward);
                assert_eq!(sa.cont, sb.cont);
                if sa.done() {
                    break;
                }
            }
        }
    }

    #[test]
    fn sprites_are_masked() {
        let mut e = env(PointReward::Sparse, 1);
        e.reset();
        let mask = e.sprite_mask();
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 10 && count < 200, "{count}");
        let size = e.spec().image_size;
        let gx = ((e.goal[0] + 1.0) / 2.0 * size as f32) as usize;
        let gy = ((e.goal[1] + 1.0) / 2.0 * size as f32) as usize;
        assert!(mask[gy * size + gx]);
    }
}
