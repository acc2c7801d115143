//! PixelCatch: move a paddle between three lanes to catch falling blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distractor::{splitmix64, Background, DistractorConfig};
use crate::raster::Canvas;
use crate::{Action, ActionSpace, Env, EnvOptions, EnvSpec, Frame, Result, Step};

pub const LANES: usize = 3;
/// Physics steps a block needs to reach the paddle row.
pub const FALL_STEPS: usize = 24;
pub const DROPS_PER_EPISODE: usize = 10;
pub const MAX_EPISODE_STEPS: usize = FALL_STEPS * DROPS_PER_EPISODE;
pub const DEFAULT_ACTION_REPEAT: usize = 4;

/// The paddle moves a quarter lane per physics step.
pub const PADDLE_STEPS_PER_LANE: usize = 4;
const PADDLE_MAX: usize = (LANES - 1) * PADDLE_STEPS_PER_LANE;

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

const PADDLE_HEIGHT: f32 = 0.08;
const BLOCK_SIZE: f32 = 0.14;
const PADDLE_RGB: [u8; 3] = [230, 230, 80];
const BLOCK_RGB: [u8; 3] = [90, 160, 250];

pub struct PixelCatch {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    distractor: DistractorConfig,
    background: Background,
    episode: u64,
    t: usize,
    /// Paddle position in quarter lanes, `0..=PADDLE_MAX`.
    paddle: usize,
    block_lane: usize,
    /// Physics steps the current block has fallen.
    fall: usize,
    drops: usize,
    catches: usize,
    frame: Frame,
    mask: Vec<bool>,
}

impl PixelCatch {
    pub fn new(opts: &EnvOptions) -> Self {
        let spec = EnvSpec {
            name: "pixelcatch".to_string(),
            action_space: ActionSpace::Discrete { n: 3 },
            image_size: opts.image_size,
            max_episode_steps: MAX_EPISODE_STEPS,
            action_repeat: opts.action_repeat.unwrap_or(DEFAULT_ACTION_REPEAT),
        };
        let mut env = Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(opts.seed ^ 0xC47C)),
            distractor: opts.distractor.clone(),
            background: Background::new(&opts.distractor),
            episode: 0,
            t: 0,
            paddle: PADDLE_STEPS_PER_LANE,
            block_lane: 0,
            fall: 0,
            drops: 0,
            catches: 0,
            frame: Frame::new(opts.image_size),
            mask: vec![false; opts.image_size * opts.image_size],
        };
        env.reset();
        env.episode = 0;
        env
    }

    pub fn paddle_lane(&self) -> usize {
        nearest_lane(self.paddle)
    }

    pub fn block_lane(&self) -> usize {
        self.block_lane
    }

    pub fn catches(&self) -> usize {
        self.catches
    }

    /// Perfect controller: head for the falling block's lane.
    pub fn scripted_action(&self) -> Action {
        Action::Discrete(match (self.block_lane * PADDLE_STEPS_PER_LANE).cmp(&self.paddle) {
            std::cmp::Ordering::Less => LEFT,
            std::cmp::Ordering::Equal => STAY,
            std::cmp::Ordering::Greater => RIGHT,
        })
    }

    fn new_drop(&mut self) {
        self.block_lane = self.rng.random_range(0..LANES);
        self.fall = 0;
    }

    fn draw(&mut self) {
        let mut canvas = Canvas::new(self.background.render(self.t, self.spec.image_size));
        let lane_w = 1.0 / LANES as f32;
        let travel = 1.0 - PADDLE_HEIGHT - BLOCK_SIZE;
        let top = travel * self.fall as f32 / FALL_STEPS as f32;
        let bx = (self.block_lane as f32 + 0.5) * lane_w - BLOCK_SIZE / 2.0;
        canvas.rect(bx, top, bx + BLOCK_SIZE, top + BLOCK_SIZE, BLOCK_RGB);
        let px = self.paddle as f32 / PADDLE_STEPS_PER_LANE as f32 * lane_w;
        canvas.rect(px + 0.1 * lane_w, 1.0 - PADDLE_HEIGHT, px + 0.9 * lane_w, 1.0, PADDLE_RGB);
        self.frame = canvas.frame;
        self.mask = canvas.mask;
    }
}

impl Env for PixelCatch {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Frame {
        self.background = Background::new(&self.distractor.for_episode(self.episode));
        self.episode += 1;
        self.t = 0;
        self.paddle = PADDLE_STEPS_PER_LANE;
        self.drops = 0;
        self.catches = 0;
        self.new_drop();
        self.draw();
        self.frame.clone()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let Action::Discrete(a) = self.spec.action_space.sanitize(action)? else {
            unreachable!("sanitize keeps the action kind")
        };
        let mut reward = 0.0;
        let mut terminal = false;
        let mut timeout = false;
        for _ in 0..self.spec.action_repeat {
            self.paddle = move_paddle(self.paddle, a);
            self.fall += 1;
            self.t += 1;
            if self.fall == FALL_STEPS {
                if nearest_lane(self.paddle) == self.block_lane {
                    reward += 1.0;
                    self.catches += 1;
                }
                self.drops += 1;
                if self.drops == DROPS_PER_EPISODE {
                    terminal = true;
                    break;
                }
                self.new_drop();
            }
            if self.t >= self.spec.max_episode_steps {
                timeout = true;
                break;
            }
        }
        self.draw();
        Ok(Step {
            obs: self.frame.clone(),
            reward,
            cont: !(terminal || timeout),
            terminal,
            timeout: timeout && !terminal,
        })
    }

    fn sprite_mask(&self) -> Vec<bool> {
        self.mask.clone()
    }

    fn render(&self) -> Frame {
        self.frame.clone()
    }

    fn scripted_action(&self) -> Action {
        PixelCatch::scripted_action(self)
    }
}

fn move_paddle(pos: usize, action: usize) -> usize {
    match action {
        LEFT => pos.saturating_sub(1),
        RIGHT => (pos + 1).min(PADDLE_MAX),
        _ => pos,
    }
}

/// Lane whose centre is nearest to a paddle position; halfway points go left.
fn nearest_lane(pos: usize) -> usize {
    (pos + PADDLE_STEPS_PER_LANE / 2 - 1) / PADDLE_STEPS_PER_LANE
}

/// Exact catch probability of the uniformly random policy, by enumerating the
/// paddle distribution at resolution time against the block lane.
///
/// The paddle evolves as a Markov chain (one quarter-lane move per physics step,
/// `steps_before_catch` steps, actions redrawn every `repeat` steps); the block
/// lane is uniform and independent of it, and every paddle position maps to
/// exactly one lane.
pub fn random_policy_catch_probability(start_lane: usize, steps_before_catch: usize, repeat: usize) -> f64 {
    let mut dist = vec![0.0f64; PADDLE_MAX + 1];
    dist[start_lane * PADDLE_STEPS_PER_LANE] = 1.0;
    let mut done = 0;
    while done < steps_before_catch {
        let block = repeat.min(steps_before_catch - done);
        let mut next = vec![0.0f64; PADDLE_MAX + 1];
        for (pos, p) in dist.iter().enumerate() {
            for action in [LEFT, STAY, RIGHT] {
                let end = (0..block).fold(pos, |q, _| move_paddle(q, action));
                next[end] += p / 3.0;
            }
        }
        dist = next;
        done += block;
    }
    let mut catch = 0.0;
    for (pos, p) in dist.iter().enumerate() {
        for block_lane in 0..LANES {
            if nearest_lane(pos) == block_lane {
                catch += p / LANES as f64;
            }
        }
    }
    catch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{BackgroundPool, EnvOptions};

    #[test]
    fn enumerated_random_catch_rate_is_one_third() {
        for start in 0..LANES {
            for steps in [1, 5, FALL_STEPS] {
                let p = random_policy_catch_probability(start, steps, DEFAULT_ACTION_REPEAT);
                assert!((p - 1.0 / 3.0).abs() < 1e-12, "start {start}, steps {steps}: {p}");
            }
        }
    }

    #[test]
    fn random_policy_catches_a_third_of_drops() {
        let mut env = PixelCatch::new(&EnvOptions { seed: 1, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let episodes = 600;
        let mut catches = 0.0;
        for _ in 0..episodes {
            env.reset();
            loop {
                let s = env.step(&Action::Discrete(rng.random_range(0..3))).unwrap();
                catches += s.reward as f64;
                if s.done() {
                    assert!(s.terminal);
                    break;
                }
            }
        }
        let n = (episodes * DROPS_PER_EPISODE) as f64;
        let rate = catches / n;
        let sigma = (1.0 / 3.0 * 2.0 / 3.0 / n).sqrt();
        assert!((rate - 1.0 / 3.0).abs() < 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn scripted_policy_catches_everything() {
        let mut env = PixelCatch::new(&EnvOptions::default());
        env.reset();
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            let s = env.step(&env.scripted_action()).unwrap();
            ret += s.reward;
            steps += 1;
            if s.done() {
                break;
            }
        }
        assert_eq!(ret, DROPS_PER_EPISODE as f32);
        assert_eq!(steps, MAX_EPISODE_STEPS / DEFAULT_ACTION_REPEAT);
    }

    #[test]
    fn every_paddle_position_maps_to_one_lane() {
        let lanes: Vec<usize> = (0..=PADDLE_MAX).map(nearest_lane).collect();
        assert_eq!(lanes, vec![0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn invalid_index_is_rejected() {
        let mut env = PixelCatch::new(&EnvOptions::default());
        assert!(env.step(&Action::Discrete(3)).is_err());
        assert!(env.step(&Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = |bg| {
            let mut env = PixelCatch::new(&EnvOptions {
                seed: 4,
                distractor: DistractorConfig::enabled(BackgroundPool::Train, bg),
                ..Default::default()
            });
            env.reset();
            let mut out = Vec::new();
            for i in 0..40 {
                let s = env.step(&Action::Discrete(i % 3)).unwrap();
                let done = s.done();
                out.push((s.reward, s.cont, s.obs));
                if done {
                    env.reset();
                }
            }
            out
        };
        let (a, b, c) = (run(0), run(0), run(1));
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&c) {
            assert_eq!((x.0, x.1), (y.0, y.1));
        }
        assert_ne!(a[0].2, c[0].2);
    }
}
