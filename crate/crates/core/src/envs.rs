//! Small deterministic environments with known optima.
//!
//! All constants are defaults on each environment's config struct. Every
//! environment is fully determined by its reset seed and the action sequence.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("episode finished; reset before stepping")]
    EpisodeFinished,
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of one action row in a sample batch.
    pub fn width(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous { dim, .. } => *dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Decodes one action row as stored in a sample batch.
    pub fn from_row(space: &ActionSpace, row: &[f64]) -> Self {
        match space {
            ActionSpace::Discrete(_) => Action::Discrete(row[0] as usize),
            ActionSpace::Continuous { .. } => Action::Continuous(row.to_vec()),
        }
    }

    pub fn write_row(&self, out: &mut Vec<f64>) {
        match self {
            Action::Discrete(a) => out.push(*a as f64),
            Action::Continuous(v) => out.extend_from_slice(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
}

/// Several agents acting simultaneously; all agents share one spec.
pub trait MultiAgentEnvironment {
    fn spec(&self) -> &EnvSpec;
    fn num_agents(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>>;
    fn step(&mut self, actions: &[Action]) -> Result<Vec<StepResult>, EnvError>;
}

/// Builds a single-agent environment by its config name.
pub fn make_env(name: &str) -> Result<Box<dyn Environment + Send>, EnvError> {
    match name {
        "gridworld" => Ok(Box::new(GridWorld::new(GridWorldConfig::default()))),
        "cartpole" => Ok(Box::new(CartPoleLite::new(CartPoleConfig::default()))),
        "pendulum" => Ok(Box::new(PendulumLite::new(PendulumConfig::default()))),
        other => Err(EnvError::UnknownEnv(other.into())),
    }
}

pub fn make_multi_agent_env(name: &str) -> Result<Box<dyn MultiAgentEnvironment + Send>, EnvError> {
    match name {
        "twoagentcoin" => Ok(Box::new(TwoAgentCoin::new(10))),
        other => Err(EnvError::UnknownEnv(other.into())),
    }
}

pub fn is_multi_agent(name: &str) -> bool {
    name == "twoagentcoin"
}

pub const ENV_NAMES: [&str; 4] = ["gridworld", "cartpole", "pendulum", "twoagentcoin"];

fn discrete(action: &Action, n: usize) -> Result<usize, EnvError> {
    match action {
        Action::Discrete(a) if *a < n => Ok(*a),
        other => Err(EnvError::InvalidAction(alloc::format!("{other:?} not in discrete({n})"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationMode {
    /// One-hot agent cell.
    OneHot,
    /// 84×84 grey-level frame with large constant regions.
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorldConfig {
    pub size: usize,
    pub horizon: usize,
    pub observation: ObservationMode,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            size: 5,
            horizon: 100,
            observation: ObservationMode::OneHot,
        }
    }
}

pub const FRAME_SIDE: usize = 84;

/// Square grid; actions 0..4 are Up, Down, Left, Right. Walls clip moves.
/// Reaching the far corner gives reward 1 and ends the episode.
#[derive(Debug, Clone)]
pub struct GridWorld {
    cfg: GridWorldConfig,
    spec: EnvSpec,
    pos: (usize, usize),
    t: usize,
    done: bool,
    rng: SeededRng,
}

impl GridWorld {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;

    pub fn new(cfg: GridWorldConfig) -> Self {
        let obs_dim = match cfg.observation {
            ObservationMode::OneHot => cfg.size * cfg.size,
            ObservationMode::Image => FRAME_SIDE * FRAME_SIDE,
        };
        let spec = EnvSpec {
            obs_dim,
            action_space: ActionSpace::Discrete(4),
            horizon: cfg.horizon,
        };
        Self {
            cfg,
            spec,
            pos: (0, 0),
            t: 0,
            done: true,
            rng: seeded(0),
        }
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn goal(&self) -> (usize, usize) {
        (self.cfg.size - 1, self.cfg.size - 1)
    }

    fn observe(&mut self) -> Vec<f64> {
        match self.cfg.observation {
            ObservationMode::OneHot => {
                let mut obs = vec![0.0; self.spec.obs_dim];
                obs[self.pos.1 * self.cfg.size + self.pos.0] = 1.0;
                obs
            }
            ObservationMode::Image => synthetic_frame(self.pos, self.goal(), self.cfg.size, &mut self.rng)
                .into_iter()
                .map(f64::from)
                .collect(),
        }
    }
}

impl Environment for GridWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.pos = (0, 0);
        self.t = 0;
        self.done = false;
        self.rng = seeded(seed);
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let a = discrete(action, 4)?;
        let last = self.cfg.size - 1;
        let (x, y) = self.pos;
        self.pos = match a {
            Self::UP => (x, y.saturating_sub(1)),
            Self::DOWN => (x, (y + 1).min(last)),
            Self::LEFT => (x.saturating_sub(1), y),
            _ => ((x + 1).min(last), y),
        };
        self.t += 1;
        let reached = self.pos == self.goal();
        self.done = reached || self.t >= self.cfg.horizon;
        Ok(StepResult {
            obs: self.observe(),
            reward: if reached { 1.0 } else { 0.0 },
            done: self.done,
        })
    }
}

/// Renders a grid position into an 84×84 byte frame: flat background, a
/// border, the goal and agent as solid blocks, and a small noisy status patch.
pub fn synthetic_frame<R: Rng + ?Sized>(
    agent: (usize, usize),
    goal: (usize, usize),
    grid: usize,
    rng: &mut R,
) -> Vec<u8> {
    let mut frame = vec![40u8; FRAME_SIDE * FRAME_SIDE];
    let cell = (FRAME_SIDE - 4) / grid.max(1);
    for i in 0..FRAME_SIDE {
        for b in 0..2 {
            frame[b * FRAME_SIDE + i] = 200;
            frame[(FRAME_SIDE - 1 - b) * FRAME_SIDE + i] = 200;
            frame[i * FRAME_SIDE + b] = 200;
            frame[i * FRAME_SIDE + FRAME_SIDE - 1 - b] = 200;
        }
    }
    let mut fill = |(cx, cy): (usize, usize), value: u8| {
        for y in 0..cell {
            for x in 0..cell {
                frame[(2 + cy * cell + y) * FRAME_SIDE + 2 + cx * cell + x] = value;
            }
        }
    };
    fill(goal, 128);
    fill(agent, 255);
    for y in 0..4 {
        for x in 0..4 {
            frame[(FRAME_SIDE - 6 + y) * FRAME_SIDE + 2 + x] = rng.random();
        }
    }
    frame
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartPoleConfig {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub pole_half_length: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub angle_limit: f64,
    pub position_limit: f64,
    pub horizon: usize,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            angle_limit: 12.0 * 2.0 * PI / 360.0,
            position_limit: 2.4,
            horizon: 200,
        }
    }
}

/// Classic cart-pole with explicit Euler integration. Action 0 pushes left,
/// action 1 pushes right; reward 1 per step.
#[derive(Debug, Clone)]
pub struct CartPoleLite {
    cfg: CartPoleConfig,
    spec: EnvSpec,
    /// `[x, x_dot, theta, theta_dot]`
    state: [f64; 4],
    t: usize,
    done: bool,
}

impl CartPoleLite {
    pub fn new(cfg: CartPoleConfig) -> Self {
        let spec = EnvSpec {
            obs_dim: 4,
            action_space: ActionSpace::Discrete(2),
            horizon: cfg.horizon,
        };
        Self {
            cfg,
            spec,
            state: [0.0; 4],
            t: 0,
            done: true,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: [f64; 4]) -> Vec<f64> {
        self.state = state;
        self.t = 0;
        self.done = false;
        state.to_vec()
    }
}

impl Environment for CartPoleLite {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let state = [
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ];
        self.reset_to(state)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let a = discrete(action, 2)?;
        let c = &self.cfg;
        let force = if a == 1 { c.force_mag } else { -c.force_mag };
        let [x, x_dot, theta, theta_dot] = self.state;
        let (sin, cos) = (libm::sin(theta), libm::cos(theta));
        let total_mass = c.cart_mass + c.pole_mass;
        let pole_ml = c.pole_mass * c.pole_half_length;
        let temp = (force + pole_ml * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (c.gravity * sin - cos * temp)
            / (c.pole_half_length * (4.0 / 3.0 - c.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_ml * theta_acc * cos / total_mass;
        self.state = [
            x + c.dt * x_dot,
            x_dot + c.dt * x_acc,
            theta + c.dt * theta_dot,
            theta_dot + c.dt * theta_acc,
        ];
        self.t += 1;
        let failed = libm::fabs(self.state[0]) > c.position_limit || libm::fabs(self.state[2]) > c.angle_limit;
        self.done = failed || self.t >= c.horizon;
        Ok(StepResult {
            obs: self.state.to_vec(),
            reward: 1.0,
            done: self.done,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumConfig {
    pub max_speed: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub horizon: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            max_speed: 8.0,
            max_torque: 2.0,
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            horizon: 200,
        }
    }
}

/// Pendulum swing-up with a continuous torque in `[-max_torque, max_torque]`.
/// Observations are `[cos θ, sin θ, θ_dot]`.
#[derive(Debug, Clone)]
pub struct PendulumLite {
    cfg: PendulumConfig,
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    t: usize,
    done: bool,
}

fn angle_normalize(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = libm::fmod(x + PI, two_pi);
    (if r < 0.0 { r + two_pi } else { r }) - PI
}

impl PendulumLite {
    pub fn new(cfg: PendulumConfig) -> Self {
        let spec = EnvSpec {
            obs_dim: 3,
            action_space: ActionSpace::Continuous {
                dim: 1,
                low: -cfg.max_torque,
                high: cfg.max_torque,
            },
            horizon: cfg.horizon,
        };
        Self {
            cfg,
            spec,
            theta: 0.0,
            theta_dot: 0.0,
            t: 0,
            done: true,
        }
    }

    pub fn angle(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    fn observe(&self) -> Vec<f64> {
        vec![libm::cos(self.theta), libm::sin(self.theta), self.theta_dot]
    }
}

impl Environment for PendulumLite {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let u = match action {
            Action::Continuous(v) if v.len() == 1 && v[0].is_finite() => v[0],
            other => return Err(EnvError::InvalidAction(alloc::format!("{other:?} not a 1-d torque"))),
        };
        let c = &self.cfg;
        let u = u.clamp(-c.max_torque, c.max_torque);
        let th = angle_normalize(self.theta);
        let cost = th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u;
        let acc = 3.0 * c.gravity / (2.0 * c.length) * libm::sin(self.theta) + 3.0 / (c.mass * c.length * c.length) * u;
        self.theta_dot = (self.theta_dot + acc * c.dt).clamp(-c.max_speed, c.max_speed);
        self.theta += self.theta_dot * c.dt;
        self.t += 1;
        self.done = self.t >= c.horizon;
        Ok(StepResult {
            obs: self.observe(),
            reward: -cost,
            done: self.done,
        })
    }
}

/// Two agents each pick 0 or 1; both get reward 1 when the picks match.
/// Each agent observes `[own last pick, other's last pick]` encoded as ±1
/// (0 before the first step).
#[derive(Debug, Clone)]
pub struct TwoAgentCoin {
    spec: EnvSpec,
    last: [f64; 2],
    t: usize,
    done: bool,
}

impl TwoAgentCoin {
    pub fn new(horizon: usize) -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 2,
                action_space: ActionSpace::Discrete(2),
                horizon,
            },
            last: [0.0; 2],
            t: 0,
            done: true,
        }
    }

    fn observe(&self) -> Vec<Vec<f64>> {
        vec![vec![self.last[0], self.last[1]], vec![self.last[1], self.last[0]]]
    }
}

impl MultiAgentEnvironment for TwoAgentCoin {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn num_agents(&self) -> usize {
        2
    }

    fn reset(&mut self, _seed: u64) -> Vec<Vec<f64>> {
        self.last = [0.0; 2];
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, actions: &[Action]) -> Result<Vec<StepResult>, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if actions.len() != 2 {
            return Err(EnvError::InvalidAction(alloc::format!("expected 2 actions, got {}", actions.len())));
        }
        let a = discrete(&actions[0], 2)?;
        let b = discrete(&actions[1], 2)?;
        let sign = |x: usize| if x == 1 { 1.0 } else { -1.0 };
        self.last = [sign(a), sign(b)];
        self.t += 1;
        self.done = self.t >= self.spec.horizon;
        let reward = if a == b { 1.0 } else { 0.0 };
        Ok(self
            .observe()
            .into_iter()
            .map(|obs| StepResult {
                obs,
                reward,
                done: self.done,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gridworld_reset_and_moves() {
        let mut env = GridWorld::new(GridWorldConfig::default());
        let obs = env.reset(0);
        assert_eq!(obs.len(), 25);
        assert_eq!(obs[0], 1.0);
        assert_eq!(obs.iter().sum::<f64>(), 1.0);
        let r = env.step(&Action::Discrete(GridWorld::RIGHT)).unwrap();
        assert_eq!(env.position(), (1, 0));
        assert_eq!((r.reward, r.done), (0.0, false));
        assert_eq!(r.obs[1], 1.0);
    }

    #[test]
    fn gridworld_goal_from_above() {
        let mut env = GridWorld::new(GridWorldConfig::default());
        env.reset(0);
        for _ in 0..4 {
            env.step(&Action::Discrete(GridWorld::RIGHT)).unwrap();
        }
        for _ in 0..3 {
            env.step(&Action::Discrete(GridWorld::DOWN)).unwrap();
        }
        assert_eq!(env.position(), (4, 3));
        let r = env.step(&Action::Discrete(GridWorld::DOWN)).unwrap();
        assert_eq!((r.reward, r.done), (1.0, true));
        assert_eq!(env.step(&Action::Discrete(0)), Err(EnvError::EpisodeFinished));
    }

    #[test]
    fn gridworld_walls_clip_and_horizon() {
        let mut env = GridWorld::new(GridWorldConfig {
            horizon: 3,
            ..Default::default()
        });
        env.reset(0);
        env.step(&Action::Discrete(GridWorld::UP)).unwrap();
        assert_eq!(env.position(), (0, 0));
        env.step(&Action::Discrete(GridWorld::LEFT)).unwrap();
        let r = env.step(&Action::Discrete(GridWorld::LEFT)).unwrap();
        assert!(r.done);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn invalid_actions_rejected() {
        let mut env = GridWorld::new(GridWorldConfig::default());
        env.reset(0);
        assert!(matches!(env.step(&Action::Discrete(4)), Err(EnvError::InvalidAction(_))));
        let mut p = PendulumLite::new(PendulumConfig::default());
        p.reset(0);
        assert!(matches!(p.step(&Action::Discrete(0)), Err(EnvError::InvalidAction(_))));
    }

    #[test]
    fn step_before_reset_is_illegal() {
        let mut env = CartPoleLite::new(CartPoleConfig::default());
        assert_eq!(env.step(&Action::Discrete(0)), Err(EnvError::EpisodeFinished));
    }

    #[test]
    fn cartpole_reset_is_seeded() {
        let mut a = CartPoleLite::new(CartPoleConfig::default());
        let mut b = CartPoleLite::new(CartPoleConfig::default());
        assert_eq!(a.reset(9), b.reset(9));
        assert_ne!(a.reset(9), a.reset(10));
        assert!(a.reset(3).iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn cartpole_returns_bounded_by_horizon() {
        let mut env = CartPoleLite::new(CartPoleConfig::default());
        env.reset(1);
        let mut total = 0.0;
        let mut t = 0;
        loop {
            // bang-bang controller on the pole angle
            let a = if env.state()[2] + 0.5 * env.state()[3] > 0.0 { 1 } else { 0 };
            let r = env.step(&Action::Discrete(a)).unwrap();
            total += r.reward;
            t += 1;
            if r.done {
                break;
            }
        }
        assert!(total <= 200.0 && t <= 200);
    }

    #[test]
    fn pendulum_reset_golden() {
        let mut env = PendulumLite::new(PendulumConfig::default());
        let obs = env.reset(42);
        let (theta, theta_dot) = env.angle();
        let mut rng = seeded(42);
        let expect_theta: f64 = rng.random_range(-PI..PI);
        let expect_dot: f64 = rng.random_range(-1.0..1.0);
        assert_eq!((theta, theta_dot), (expect_theta, expect_dot));
        assert_eq!(obs, vec![libm::cos(theta), libm::sin(theta), theta_dot]);
        assert_eq!(env.reset(42), obs);
    }

    #[test]
    fn pendulum_penalizes_torque() {
        let mut a = PendulumLite::new(PendulumConfig::default());
        let mut b = a.clone();
        a.reset(1);
        b.reset(1);
        let ra = a.step(&Action::Continuous(vec![0.0])).unwrap();
        let rb = b.step(&Action::Continuous(vec![2.0])).unwrap();
        assert!(ra.reward > rb.reward);
        assert!(ra.reward <= 0.0);
    }

    #[test]
    fn angle_normalize_range() {
        for x in [-7.0, -PI, 0.0, 3.0, 4.0, 10.0] {
            let y = angle_normalize(x);
            assert!((-PI..PI).contains(&y));
            assert!((libm::sin(y) - libm::sin(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn coin_rewards_symmetric() {
        let mut env = TwoAgentCoin::new(10);
        env.reset(0);
        let r = env.step(&[Action::Discrete(1), Action::Discrete(1)]).unwrap();
        assert_eq!((r[0].reward, r[1].reward), (1.0, 1.0));
        let mut swapped = TwoAgentCoin::new(10);
        swapped.reset(0);
        let mut plain = TwoAgentCoin::new(10);
        plain.reset(0);
        let p = plain.step(&[Action::Discrete(0), Action::Discrete(1)]).unwrap();
        let s = swapped.step(&[Action::Discrete(1), Action::Discrete(0)]).unwrap();
        assert_eq!((p[0].reward, p[1].reward), (s[1].reward, s[0].reward));
        assert_eq!(p[0].obs, s[1].obs);
    }

    #[test]
    fn coin_horizon() {
        let mut env = TwoAgentCoin::new(10);
        env.reset(0);
        for t in 0..10 {
            let r = env.step(&[Action::Discrete(0), Action::Discrete(0)]).unwrap();
            assert_eq!(r[0].done, t == 9);
        }
    }

    #[test]
    fn image_frames_have_constant_regions() {
        let mut env = GridWorld::new(GridWorldConfig {
            observation: ObservationMode::Image,
            ..Default::default()
        });
        let obs = env.reset(3);
        assert_eq!(obs.len(), FRAME_SIDE * FRAME_SIDE);
        let background = obs.iter().filter(|v| **v == 40.0).count();
        assert!(background > obs.len() / 2);
    }

    #[test]
    fn make_env_by_name() {
        for name in ["gridworld", "cartpole", "pendulum"] {
            assert!(make_env(name).is_ok());
        }
        assert!(make_multi_agent_env("twoagentcoin").is_ok());
        assert!(matches!(make_env("atari"), Err(EnvError::UnknownEnv(_))));
    }
}
