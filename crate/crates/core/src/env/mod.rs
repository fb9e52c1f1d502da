//! Controllable sprites environment: a heart steered by discrete actions and a
//! square distractor that is re-posed uniformly at random on every step.
//!
//! Positions are fractions of the image measured from the top-left corner,
//! scales are half-extent fractions, rotations are radians.

mod render;

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub use render::{render, render_heart, render_square};

pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const POS_RANGE: (f64, f64) = (0.15, 0.85);
pub const SCALE_RANGE: (f64, f64) = (0.06, 0.22);
/// Length of the action vector: vertical, horizontal, scale, rotate.
pub const ACTION_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_pos_step")]
    pub pos_step: f64,
    #[serde(default = "default_scale_step")]
    pub scale_step: f64,
    #[serde(default = "default_rot_step")]
    pub rot_step: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_pos_step() -> f64 {
    1.0 / 32.0
}

fn default_scale_step() -> f64 {
    0.01
}

fn default_rot_step() -> f64 {
    PI / 16.0
}

fn default_horizon() -> usize {
    64
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            pos_step: default_pos_step(),
            scale_step: default_scale_step(),
            rot_step: default_rot_step(),
            horizon: default_horizon(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.pos_step > 0.0 && self.scale_step > 0.0 && self.rot_step > 0.0 && self.horizon > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("environment unit sizes and horizon must be positive: {self:?}")))
        }
    }
}

/// Pose of one sprite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rot: f64,
}

impl Pose {
    fn sample(rng: &mut Rng) -> Pose {
        Pose {
            x: rng.uniform_range(POS_RANGE.0, POS_RANGE.1),
            y: rng.uniform_range(POS_RANGE.0, POS_RANGE.1),
            scale: rng.uniform_range(SCALE_RANGE.0, SCALE_RANGE.1),
            rot: rng.uniform_range(0.0, TAU),
        }
    }

    pub fn in_range(&self) -> bool {
        let pos = POS_RANGE.0..=POS_RANGE.1;
        pos.contains(&self.x)
            && pos.contains(&self.y)
            && (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale)
            && (0.0..TAU).contains(&self.rot)
    }
}

/// Ground-truth generative factors of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub heart: Pose,
    pub square: Pose,
}

/// Target heart pose used by the reward; rotation is not rewarded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
}

/// Per-step reward in `[-2, 0]`.
pub fn reward(heart: &Pose, goal: &Goal) -> f64 {
    -((heart.x - goal.x).abs() + (heart.y - goal.y).abs()) / 1.4 - (heart.scale - goal.scale).abs() / 0.16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteAction {
    Up,
    Down,
    Left,
    Right,
    Enlarge,
    Shrink,
    RotateLeft,
    RotateRight,
    Noop,
}

impl DiscreteAction {
    pub const COUNT: usize = 9;
    pub const ALL: [DiscreteAction; 9] = [
        DiscreteAction::Up,
        DiscreteAction::Down,
        DiscreteAction::Left,
        DiscreteAction::Right,
        DiscreteAction::Enlarge,
        DiscreteAction::Shrink,
        DiscreteAction::RotateLeft,
        DiscreteAction::RotateRight,
        DiscreteAction::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn to_vector(self) -> ActionVector {
        action_to_vector(self)
    }
}

/// `(vertical, horizontal, scale, rotate)`, each in `{-1, 0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; ACTION_DIM]);

pub fn action_to_vector(action: DiscreteAction) -> ActionVector {
    use DiscreteAction::*;
    let mut v = [0.0; ACTION_DIM];
    match action {
        Up => v[0] = 1.0,
        Down => v[0] = -1.0,
        Left => v[1] = -1.0,
        Right => v[1] = 1.0,
        Enlarge => v[2] = 1.0,
        Shrink => v[2] = -1.0,
        RotateLeft => v[3] = -1.0,
        RotateRight => v[3] = 1.0,
        Noop => {}
    }
    ActionVector(v)
}

/// Binary 64x64 frame, row-major, entries in `{0, 1}`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Observation({} lit pixels)", self.lit_pixels())
    }
}

impl Observation {
    pub fn blank() -> Self {
        Observation {
            pixels: vec![0; IMAGE_PIXELS],
        }
    }

    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::dim("observation", &[IMAGE_SIDE, IMAGE_SIDE], &[pixels.len()]));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Data("observation pixels must be 0 or 1".into()));
        }
        Ok(Observation { pixels })
    }

    /// Thresholds grayscale bytes at 128.
    pub fn from_gray_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_pixels(bytes.iter().map(|&b| u8::from(b >= 128)).collect())
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize) {
        self.pixels[row * IMAGE_SIDE + col] = 1;
    }

    pub fn lit_pixels(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Pixels as 0/255 grayscale bytes.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| p * 255).collect()
    }

    pub fn to_unit<T: crate::Scalar>(&self) -> impl Iterator<Item = T> + '_ {
        self.pixels.iter().map(|&p| if p == 1 { T::one() } else { T::zero() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: DiscreteAction,
    pub action_vector: ActionVector,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub next_factors: FactorState,
}

#[derive(Clone, Debug)]
pub struct SpritesEnv {
    config: EnvConfig,
    factors: FactorState,
    goal: Goal,
    obs: Observation,
    steps: usize,
    active: bool,
    distractor: Rng,
}

impl SpritesEnv {
    pub fn new(config: EnvConfig) -> Self {
        SpritesEnv {
            config,
            factors: FactorState {
                heart: Pose {
                    x: 0.5,
                    y: 0.5,
                    scale: SCALE_RANGE.0,
                    rot: 0.0,
                },
                square: Pose {
                    x: 0.5,
                    y: 0.5,
                    scale: SCALE_RANGE.0,
                    rot: 0.0,
                },
            },
            goal: Goal {
                x: 0.5,
                y: 0.5,
                scale: SCALE_RANGE.0,
            },
            obs: Observation::blank(),
            steps: 0,
            active: false,
            distractor: Rng::new(0),
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Starts an episode. Heart and goal come from stream 0 of `seed`, the
    /// distractor from stream 1.
    pub fn reset(&mut self, seed: u64) -> (Observation, FactorState) {
        self.reset_with_distractor(seed, Rng::stream(seed, 1))
    }

    /// Like [`SpritesEnv::reset`] but with an explicit distractor stream.
    ///
    /// Draw order on stream 0: heart x, y, scale, rot, then goal x, y, scale.
    pub fn reset_with_distractor(&mut self, seed: u64, mut distractor: Rng) -> (Observation, FactorState) {
        let mut rng = Rng::stream(seed, 0);
        let heart = Pose::sample(&mut rng);
        self.goal = Goal {
            x: rng.uniform_range(POS_RANGE.0, POS_RANGE.1),
            y: rng.uniform_range(POS_RANGE.0, POS_RANGE.1),
            scale: rng.uniform_range(SCALE_RANGE.0, SCALE_RANGE.1),
        };
        let square = Pose::sample(&mut distractor);
        self.distractor = distractor;
        self.factors = FactorState { heart, square };
        self.obs = render(&self.factors);
        self.steps = 0;
        self.active = true;
        (self.obs.clone(), self.factors)
    }

    pub fn step(&mut self, action: DiscreteAction) -> Result<Transition> {
        if !self.active {
            return Err(Error::Protocol(if self.steps >= self.config.horizon {
                "step called after the episode finished".into()
            } else {
                "step called before reset".into()
            }));
        }
        let heart = self.move_heart(action);
        let square = Pose::sample(&mut self.distractor);
        let next = FactorState { heart, square };
        let next_obs = render(&next);
        let r = reward(&heart, &self.goal);
        self.steps += 1;
        let done = self.steps == self.config.horizon;
        self.active = !done;
        let transition = Transition {
            obs: std::mem::replace(&mut self.obs, next_obs.clone()),
            action,
            action_vector: action.to_vector(),
            reward: r,
            next_obs,
            done,
            next_factors: next,
        };
        self.factors = next;
        Ok(transition)
    }

    fn move_heart(&self, action: DiscreteAction) -> Pose {
        let ActionVector([vert, horiz, scale, rot]) = action.to_vector();
        let h = self.factors.heart;
        let c = &self.config;
        Pose {
            // "up" moves toward row 0
            y: (h.y - vert * c.pos_step).clamp(POS_RANGE.0, POS_RANGE.1),
            x: (h.x + horiz * c.pos_step).clamp(POS_RANGE.0, POS_RANGE.1),
            scale: (h.scale + scale * c.scale_step).clamp(SCALE_RANGE.0, SCALE_RANGE.1),
            rot: (h.rot + rot * c.rot_step).rem_euclid(TAU),
        }
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn factors(&self) -> &FactorState {
        &self.factors
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        !self.active && self.steps >= self.config.horizon
    }

    /// Overwrites the heart pose mid-episode (test and probe helper).
    pub fn set_heart(&mut self, heart: Pose) {
        self.factors.heart = heart;
        self.obs = render(&self.factors);
    }
}
