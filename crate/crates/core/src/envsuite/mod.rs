//! Planar toy tasks sharing one observation and action space.
//!
//! An agent moves in `[−1, 1]²` with displacement `clip(action)·dt`. Tasks
//! differ in what must happen before the goal counts:
//!
//! * reach: bring the agent to the goal
//! * push: the object follows the agent's displacement while they touch
//! * two-stage fetch: the agent must first latch onto the object (come
//!   within the latch radius), after which the object travels with it
//! * toggle: the agent must first visit a switch, then the goal
//!
//! Observations are `[agent(2), velocity(2), object-or-zeros(2), latch, goal(2)]`.
//! The reward is the negative remaining path length (capped) plus a bonus on
//! success, so it is continuous across the latch event.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const OBS_DIM: usize = 9;
pub const ACTION_DIM: usize = 2;
pub const DT: f64 = 0.05;
pub const CONTACT_RADIUS: f64 = 0.1;
pub const LATCH_RADIUS: f64 = 0.05;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const SUCCESS_BONUS: f64 = 1.0;
pub const DEFAULT_HORIZON: usize = 200;
const PATH_CAP: f64 = 3.0;
const GOAL_BOX: f64 = 0.7;
const START_BOX: f64 = 0.6;
const OBJECT_BOX: f64 = 0.5;
const MIN_SEPARATION: f64 = 0.2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("action has {got} components, expected {ACTION_DIM}")]
    ActionDim { got: usize },
    #[error("action contains a non-finite value: {0:?}")]
    NonFinite(Vec<f64>),
    #[error("episode is over; call reset")]
    EpisodeOver,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Reach,
    Push,
    TwoStageFetch,
    Toggle,
}

impl TaskKind {
    /// Whether the task has an object (or switch) slot in the observation.
    pub fn has_object(self) -> bool {
        !matches!(self, TaskKind::Reach)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalRule {
    Fixed([f64; 2]),
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub goal: GoalRule,
    pub difficulty: u32,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

/// The four-task suite: fixed reach, random reach, push, two-stage fetch.
pub fn toy_suite() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "reach-fixed".into(),
            kind: TaskKind::Reach,
            goal: GoalRule::Fixed([0.5, 0.5]),
            difficulty: 0,
            horizon: DEFAULT_HORIZON,
        },
        TaskSpec {
            name: "reach-random".into(),
            kind: TaskKind::Reach,
            goal: GoalRule::Random,
            difficulty: 1,
            horizon: DEFAULT_HORIZON,
        },
        TaskSpec {
            name: "push".into(),
            kind: TaskKind::Push,
            goal: GoalRule::Fixed([-0.5, 0.5]),
            difficulty: 2,
            horizon: DEFAULT_HORIZON,
        },
        TaskSpec {
            name: "two-stage-fetch".into(),
            kind: TaskKind::TwoStageFetch,
            goal: GoalRule::Fixed([0.5, -0.5]),
            difficulty: 3,
            horizon: DEFAULT_HORIZON,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub velocity: [f64; 2],
    /// Object for push and fetch, switch for toggle.
    pub object: Option<[f64; 2]>,
    pub latch: bool,
    pub goal: [f64; 2],
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Success or horizon reached.
    pub done: bool,
    pub success: bool,
}

impl StepOutcome {
    /// The episode ended by the horizon rather than by success.
    pub fn truncated(&self) -> bool {
        self.done && !self.success
    }
}

#[derive(Clone, Debug)]
pub struct Env {
    spec: TaskSpec,
    state: EnvState,
    over: bool,
}

impl Env {
    /// Creates the environment and draws its first episode.
    pub fn new<R: Rng + ?Sized>(spec: TaskSpec, rng: &mut R) -> Self {
        let state = initial_state(&spec, rng);
        Self {
            spec,
            state,
            over: false,
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.state = initial_state(&self.spec, rng);
        self.over = false;
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        let o = s.object.unwrap_or([0.0, 0.0]);
        vec![
            s.agent[0],
            s.agent[1],
            s.velocity[0],
            s.velocity[1],
            o[0],
            o[1],
            if s.latch { 1.0 } else { 0.0 },
            s.goal[0],
            s.goal[1],
        ]
    }

    /// Shaped value of the current state without the success bonus.
    pub fn shaped_reward(&self) -> f64 {
        -remaining_path(&self.spec, &self.state).min(PATH_CAP)
    }

    pub fn is_success(&self) -> bool {
        final_distance(&self.spec, &self.state) < SUCCESS_RADIUS
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if action.len() != ACTION_DIM {
            return Err(EnvError::ActionDim { got: action.len() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFinite(action.to_vec()));
        }
        if self.over {
            return Err(EnvError::EpisodeOver);
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let s = &mut self.state;
        let before = s.agent;
        let touching = s.object.is_some_and(|o| distance(before, o) < CONTACT_RADIUS);
        s.agent = clamp_arena([before[0] + a[0] * DT, before[1] + a[1] * DT]);
        let moved = [s.agent[0] - before[0], s.agent[1] - before[1]];
        s.velocity = a;
        match self.spec.kind {
            TaskKind::Reach => {}
            TaskKind::Push => {
                if touching {
                    let o = s.object.as_mut().expect("push has an object");
                    *o = clamp_arena([o[0] + moved[0], o[1] + moved[1]]);
                }
            }
            TaskKind::TwoStageFetch => {
                let o = s.object.as_mut().expect("fetch has an object");
                if s.latch {
                    *o = clamp_arena([o[0] + moved[0], o[1] + moved[1]]);
                } else if distance(s.agent, *o) < LATCH_RADIUS {
                    s.latch = true;
                }
            }
            TaskKind::Toggle => {
                let switch = s.object.expect("toggle has a switch");
                if !s.latch && distance(s.agent, switch) < LATCH_RADIUS {
                    s.latch = true;
                }
            }
        }
        s.steps += 1;
        let success = self.is_success();
        let reward = self.shaped_reward() + if success { SUCCESS_BONUS } else { 0.0 };
        let done = success || self.state.steps >= self.spec.horizon;
        self.over = done;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done,
            success,
        })
    }
}

fn initial_state<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> EnvState {
    let goal = match spec.goal {
        GoalRule::Fixed(g) => g,
        GoalRule::Random => uniform_point(rng, GOAL_BOX),
    };
    // rejection sampling keeps every episode non-trivial
    let (agent, object) = loop {
        let agent = uniform_point(rng, START_BOX);
        let object = spec.kind.has_object().then(|| uniform_point(rng, OBJECT_BOX));
        let ok = match object {
            None => distance(agent, goal) >= MIN_SEPARATION,
            Some(o) => distance(agent, o) >= MIN_SEPARATION && distance(o, goal) >= MIN_SEPARATION,
        };
        if ok {
            break (agent, object);
        }
    };
    EnvState {
        agent,
        velocity: [0.0, 0.0],
        object,
        latch: false,
        goal,
        steps: 0,
    }
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R, half: f64) -> [f64; 2] {
    [rng.random_range(-half..=half), rng.random_range(-half..=half)]
}

fn clamp_arena(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)]
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance still to travel: to the object or switch (if its stage is not
/// done yet) and from there to the goal.
fn remaining_path(spec: &TaskSpec, s: &EnvState) -> f64 {
    match (spec.kind, s.object) {
        (TaskKind::Reach, _) | (_, None) => distance(s.agent, s.goal),
        (TaskKind::Push, Some(o)) => (distance(s.agent, o) - CONTACT_RADIUS).max(0.0) + distance(o, s.goal),
        (TaskKind::TwoStageFetch, Some(o)) => {
            if s.latch {
                distance(o, s.goal)
            } else {
                distance(s.agent, o) + distance(o, s.goal)
            }
        }
        (TaskKind::Toggle, Some(sw)) => {
            if s.latch {
                distance(s.agent, s.goal)
            } else {
                distance(s.agent, sw) + distance(sw, s.goal)
            }
        }
    }
}

/// Distance that decides success: what must end up at the goal.
fn final_distance(spec: &TaskSpec, s: &EnvState) -> f64 {
    match spec.kind {
        TaskKind::Reach => distance(s.agent, s.goal),
        TaskKind::Push | TaskKind::TwoStageFetch => distance(s.object.expect("task has an object"), s.goal),
        TaskKind::Toggle => {
            if s.latch {
                distance(s.agent, s.goal)
            } else {
                f64::INFINITY
            }
        }
    }
}

/// Hand-written controller that solves every task kind.
pub fn scripted_action(spec: &TaskSpec, s: &EnvState) -> [f64; 2] {
    let toward = |from: [f64; 2], to: [f64; 2]| {
        [
            ((to[0] - from[0]) / DT).clamp(-1.0, 1.0),
            ((to[1] - from[1]) / DT).clamp(-1.0, 1.0),
        ]
    };
    match (spec.kind, s.object) {
        (TaskKind::Reach, _) | (_, None) => toward(s.agent, s.goal),
        (TaskKind::Push, Some(o)) => {
            if distance(s.agent, o) < CONTACT_RADIUS {
                toward(o, s.goal)
            } else {
                toward(s.agent, o)
            }
        }
        (TaskKind::TwoStageFetch, Some(o)) => {
            if s.latch {
                toward(o, s.goal)
            } else {
                toward(s.agent, o)
            }
        }
        (TaskKind::Toggle, Some(sw)) => {
            if s.latch {
                toward(s.agent, s.goal)
            } else {
                toward(s.agent, sw)
            }
        }
    }
}

/// One environment per task, stepped together.
#[derive(Clone, Debug)]
pub struct VecEnv {
    envs: Vec<Env>,
}

impl VecEnv {
    pub fn new<R: Rng>(specs: &[TaskSpec], rngs: &mut [R]) -> Self {
        assert_eq!(specs.len(), rngs.len(), "one rng stream per task");
        Self {
            envs: specs
                .iter()
                .zip(rngs.iter_mut())
                .map(|(s, r)| Env::new(s.clone(), r))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn env(&self, task: usize) -> &Env {
        &self.envs[task]
    }

    pub fn env_mut(&mut self, task: usize) -> &mut Env {
        &mut self.envs[task]
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.envs.iter().map(Env::observation).collect()
    }

    /// Steps every environment; a fault in one task leaves the others running.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Vec<Result<StepOutcome, EnvError>> {
        self.envs.iter_mut().zip(actions).map(|(e, a)| e.step(a)).collect()
    }
}

/// Runs `episodes` episodes of `policy` and returns (successes, steps to
/// success of each successful episode).
pub fn run_episodes<R, P>(spec: &TaskSpec, episodes: usize, rng: &mut R, mut policy: P) -> (usize, Vec<usize>)
where
    R: Rng + ?Sized,
    P: FnMut(&Env, &mut R) -> Vec<f64>,
{
    let mut env = Env::new(spec.clone(), rng);
    let mut successes = 0;
    let mut lengths = Vec::new();
    for ep in 0..episodes {
        if ep > 0 {
            env.reset(rng);
        }
        loop {
            let a = policy(&env, rng);
            let out = env.step(&a).expect("policy emits valid actions");
            if out.done {
                if out.success {
                    successes += 1;
                    lengths.push(env.state().steps);
                }
                break;
            }
        }
    }
    (successes, lengths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: TaskKind, goal: GoalRule) -> TaskSpec {
        TaskSpec {
            name: format!("{kind:?}"),
            kind,
            goal,
            difficulty: 0,
            horizon: DEFAULT_HORIZON,
        }
    }

    fn all_kinds() -> Vec<TaskSpec> {
        let mut v = toy_suite();
        v.push(spec(TaskKind::Toggle, GoalRule::Random));
        v
    }

    #[test]
    fn fixed_goal_repeats_and_random_goal_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = Env::new(toy_suite()[0].clone(), &mut rng);
        for _ in 0..5 {
            env.reset(&mut rng);
            assert_eq!(env.state().goal, [0.5, 0.5]);
        }
        let goals = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut env = Env::new(toy_suite()[1].clone(), &mut rng);
            (0..5)
                .map(|_| {
                    env.reset(&mut rng);
                    env.state().goal
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(goals(4), goals(4));
        assert_ne!(goals(4), goals(5));
    }

    #[test]
    fn observation_width_is_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in all_kinds() {
            assert_eq!(Env::new(s, &mut rng).observation().len(), OBS_DIM);
        }
    }

    #[test]
    fn zero_action_keeps_position_and_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in all_kinds() {
            let mut env = Env::new(s, &mut rng);
            let before = env.state().agent;
            let r0 = env.shaped_reward();
            let out = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(env.state().agent, before);
            assert_eq!(out.reward, r0);
        }
    }

    #[test]
    fn stepping_toward_the_goal_raises_reach_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut env = Env::new(toy_suite()[1].clone(), &mut rng);
        for _ in 0..1000 {
            env.reset(&mut rng);
            let s = env.state().clone();
            let d = distance(s.agent, s.goal);
            let dir = [(s.goal[0] - s.agent[0]) / d, (s.goal[1] - s.agent[1]) / d];
            let r0 = env.shaped_reward();
            let out = env.step(&dir).unwrap();
            assert!(distance(env.state().agent, s.goal) < d);
            assert!(out.reward > r0);
        }
    }

    #[test]
    fn fetch_object_is_immobile_before_latch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut env = Env::new(toy_suite()[3].clone(), &mut rng);
        for _ in 0..200 {
            env.reset(&mut rng);
            let o = env.state().object;
            for _ in 0..50 {
                let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let was_latched = env.state().latch;
                if env.step(&a).unwrap().done {
                    break;
                }
                if !was_latched {
                    assert_eq!(env.state().object, o);
                }
                if env.state().latch {
                    break;
                }
            }
        }
    }

    #[test]
    fn identical_seeds_and_actions_replay_exactly() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut env = Env::new(toy_suite()[2].clone(), &mut rng);
            let mut trace = Vec::new();
            for t in 0..150 {
                let a = [(t as f64 * 0.3).sin(), (t as f64 * 0.17).cos()];
                let out = env.step(&a).unwrap();
                trace.push((out.observation.clone(), out.reward.to_bits()));
                if out.done {
                    env.reset(&mut rng);
                }
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reward_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for s in all_kinds() {
            let mut env = Env::new(s, &mut rng);
            for _ in 0..3000 {
                let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let out = env.step(&a).unwrap();
                assert!(out.reward.abs() <= 4.0);
                if out.done {
                    env.reset(&mut rng);
                }
            }
        }
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut env = Env::new(toy_suite()[0].clone(), &mut rng);
        assert!(matches!(env.step(&[f64::NAN, 0.0]), Err(EnvError::NonFinite(_))));
        assert_eq!(env.step(&[0.0]), Err(EnvError::ActionDim { got: 1 }));
    }

    #[test]
    fn experts_solve_every_kind() {
        for s in all_kinds() {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let (wins, _) = run_episodes(&s, 100, &mut rng, |env, _| {
                scripted_action(env.spec(), env.state()).to_vec()
            });
            assert!(wins >= 95, "{} solved {wins}/100", s.name);
        }
    }

    #[test]
    fn random_policy_rarely_fetches() {
        let s = toy_suite()[3].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (wins, _) = run_episodes(&s, 200, &mut rng, |_, r| {
            vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]
        });
        assert!(wins as f64 / 200.0 <= 0.2, "{wins}");
    }

    #[test]
    fn expert_episode_length_grows_with_difficulty() {
        let mean_steps = |kind| {
            let s = spec(kind, GoalRule::Random);
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let (_, lens) = run_episodes(&s, 200, &mut rng, |env, _| {
                scripted_action(env.spec(), env.state()).to_vec()
            });
            lens.iter().sum::<usize>() as f64 / lens.len() as f64
        };
        let reach = mean_steps(TaskKind::Reach);
        let push = mean_steps(TaskKind::Push);
        let fetch = mean_steps(TaskKind::TwoStageFetch);
        assert!(reach < push && push < fetch, "{reach} {push} {fetch}");
    }
}
