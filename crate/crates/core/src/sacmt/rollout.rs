//! Data collection, deterministic evaluation and expert distillation.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fresh_masks, standard_normal, SacError, StoredMasks, Trainer, Transition};
use crate::diffcore::{Adam, Matrix, Tape};
use crate::envsuite::{scripted_action, Env, TaskSpec, VecEnv};
use crate::modnet::{mean_action, sample_from_head, Blocking, ComposePlan, ModulePolicy};
use crate::routing::{effective_modules, RouteTemperature, RoutingFunction, RoutingMask};

/// What the behaviour networks decided for one observation.
#[derive(Clone, Debug)]
struct Plan {
    action: Vec<f64>,
    masks: StoredMasks,
}

/// One environment per task plus the pending decision for each.
#[derive(Clone, Debug)]
pub struct Collector {
    envs: VecEnv,
    env_rngs: Vec<ChaCha8Rng>,
    plans: Vec<Option<Plan>>,
    /// Exponential moving average of episode success per task.
    pub success_ema: Vec<f64>,
    pub episodes: Vec<u64>,
    pub env_steps: u64,
}

const SUCCESS_EMA_DECAY: f64 = 0.9;

impl Collector {
    pub fn new(specs: &[TaskSpec], mut env_rngs: Vec<ChaCha8Rng>) -> Self {
        let envs = VecEnv::new(specs, &mut env_rngs);
        Self {
            envs,
            env_rngs,
            plans: vec![None; specs.len()],
            success_ema: vec![0.0; specs.len()],
            episodes: vec![0; specs.len()],
            env_steps: 0,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.envs.len()
    }

    /// Steps every task once. With `random_actions` the actions are uniform
    /// (warm-up) while paths still come from the routers.
    pub fn collect_step<R: Rng + ?Sized>(
        &mut self,
        trainer: &Trainer,
        random_actions: bool,
        rng: &mut R,
    ) -> Result<Vec<Transition>, SacError> {
        let n = self.n_tasks();
        let missing: Vec<usize> = (0..n).filter(|&t| self.plans[t].is_none()).collect();
        if !missing.is_empty() {
            let obs: Vec<Vec<f64>> = missing.iter().map(|&t| self.envs.env(t).observation()).collect();
            let plans = plan_batch(trainer, &obs, &missing, random_actions, rng)?;
            for (t, p) in missing.into_iter().zip(plans) {
                self.plans[t] = Some(p);
            }
        }
        let states = self.envs.observations();
        let actions: Vec<Vec<f64>> = self
            .plans
            .iter()
            .map(|p| p.as_ref().expect("planned").action.clone())
            .collect();
        let outcomes = self.envs.step(&actions);
        self.env_steps += n as u64;

        let mut stepped = Vec::with_capacity(n);
        let mut next_obs = Vec::with_capacity(n);
        for (t, out) in outcomes.into_iter().enumerate() {
            match out {
                Ok(o) => {
                    next_obs.push(o.observation.clone());
                    stepped.push((t, o));
                }
                Err(e) => {
                    warn!("task {t}: environment fault ({e}); episode aborted");
                    self.plans[t] = None;
                    let rng_t = &mut self.env_rngs[t];
                    self.envs.env_mut(t).reset(rng_t);
                }
            }
        }
        let tasks: Vec<usize> = stepped.iter().map(|(t, _)| *t).collect();
        let next_plans = plan_batch(trainer, &next_obs, &tasks, random_actions, rng)?;

        let mut transitions = Vec::with_capacity(stepped.len());
        for ((t, o), next) in stepped.into_iter().zip(next_plans) {
            let plan = self.plans[t].take().expect("planned");
            transitions.push(Transition {
                state: states[t].clone(),
                action: plan.action,
                reward: o.reward,
                next_state: o.observation,
                done: o.success,
                task: t,
                masks: plan.masks,
                next_masks: next.masks.clone(),
            });
            if o.done {
                self.episodes[t] += 1;
                let s = if o.success { 1.0 } else { 0.0 };
                self.success_ema[t] = SUCCESS_EMA_DECAY * self.success_ema[t] + (1.0 - SUCCESS_EMA_DECAY) * s;
                let rng_t = &mut self.env_rngs[t];
                self.envs.env_mut(t).reset(rng_t);
            } else {
                self.plans[t] = Some(next);
            }
        }
        Ok(transitions)
    }

    /// `steps` vectorised steps, i.e. `steps × n_tasks` transitions.
    pub fn collect_rollouts<R: Rng + ?Sized>(
        &mut self,
        trainer: &Trainer,
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<Transition>, SacError> {
        let mut all = Vec::with_capacity(steps * self.n_tasks());
        for _ in 0..steps {
            all.extend(self.collect_step(trainer, false, rng)?);
        }
        Ok(all)
    }
}

/// Behaviour decisions for a batch of observations: sampled paths for the
/// actor, a stochastic action, then sampled critic paths for that action.
fn plan_batch<R: Rng + ?Sized>(
    trainer: &Trainer,
    obs: &[Vec<f64>],
    tasks: &[usize],
    random_actions: bool,
    rng: &mut R,
) -> Result<Vec<Plan>, SacError> {
    if obs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &trainer.cfg;
    let actor = &trainer.nets.actor;
    let a_dim = actor.shape().action_dim;
    let taus = trainer.temps.taus(cfg.route_balancing);
    let critic_taus = trainer.critic_taus();
    let rows = obs.len();

    let mut tape = Tape::new();
    let bound = actor.bind(&mut tape, false);
    let x = tape.constant(Matrix::from_rows(obs));
    let enc = actor.encode(&mut tape, &bound, x, tasks)?;
    let actor_masks = (0..rows)
        .map(|r| {
            let z = actor.logits_of_row(&tape, &enc, r);
            let tau = RouteTemperature::new(taus[tasks[r]])?;
            cfg.routing.select_all(&z, cfg.k, tau, true, rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = actor.compose(
        &mut tape,
        &bound,
        &enc,
        &ComposePlan {
            masks: &actor_masks,
            function: cfg.routing,
            blocking: Blocking::None,
            skip_unreachable: true,
        },
    )?;
    let heads = tape.value(out.head).clone();
    let noise = standard_normal(rows, a_dim, rng);
    let actions: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            if random_actions {
                (0..a_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
            } else {
                sample_from_head(heads.row(r), a_dim, noise.row(r)).0
            }
        })
        .collect();

    let sa = Matrix::from_rows(
        &obs.iter()
            .zip(&actions)
            .map(|(o, a)| [o.as_slice(), a.as_slice()].concat())
            .collect::<Vec<_>>(),
    );
    let q1 = fresh_masks(
        &trainer.nets.q1,
        &sa,
        tasks,
        &critic_taus,
        cfg.routing,
        cfg.k,
        true,
        rng,
    )?;
    let q2 = fresh_masks(
        &trainer.nets.q2,
        &sa,
        tasks,
        &critic_taus,
        cfg.routing,
        cfg.k,
        true,
        rng,
    )?;
    Ok(actions
        .into_iter()
        .zip(actor_masks)
        .zip(q1.into_iter().zip(q2))
        .map(|((action, actor), (q1, q2))| Plan {
            action,
            masks: StoredMasks { actor, q1, q2 },
        })
        .collect())
}

/// Deterministic evaluation results of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub task: usize,
    pub episodes: usize,
    pub successes: usize,
    /// Effective module count per evaluated timestep.
    pub modules_per_step: Vec<usize>,
}

impl TaskEval {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn mean_modules(&self) -> f64 {
        if self.modules_per_step.is_empty() {
            return 0.0;
        }
        self.modules_per_step.iter().sum::<usize>() as f64 / self.modules_per_step.len() as f64
    }

    pub fn std_modules(&self) -> f64 {
        let n = self.modules_per_step.len();
        if n == 0 {
            return 0.0;
        }
        let m = self.mean_modules();
        (self
            .modules_per_step
            .iter()
            .map(|&c| (c as f64 - m).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt()
    }
}

/// Deterministic top-k paths for one observation.
pub fn deterministic_masks(
    actor: &ModulePolicy,
    obs: &[f64],
    task: usize,
    function: RoutingFunction,
    k: usize,
) -> Result<crate::modnet::RolloutOutput, SacError> {
    // top-k selection never draws from the rng
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let out = actor.forward_rollout_with(obs, task, function, |z| {
        function.select_all(z, k, RouteTemperature::default(), false, &mut unused)
    })?;
    Ok(out)
}

/// Runs `episodes` episodes per task with top-k paths and mean actions.
pub fn evaluate(
    actor: &ModulePolicy,
    specs: &[TaskSpec],
    function: RoutingFunction,
    k: usize,
    episodes: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<TaskEval>, SacError> {
    let a_dim = actor.shape().action_dim;
    let n = actor.n_modules();
    let mut results = Vec::with_capacity(specs.len());
    for (task, (spec, rng)) in specs.iter().zip(rngs.iter_mut()).enumerate() {
        let mut env = Env::new(spec.clone(), rng);
        let mut eval = TaskEval {
            task,
            episodes,
            successes: 0,
            modules_per_step: Vec::new(),
        };
        for ep in 0..episodes {
            if ep > 0 {
                env.reset(rng);
            }
            loop {
                let out = deterministic_masks(actor, &env.observation(), task, function, k)?;
                eval.modules_per_step.push(effective_modules(&out.masks, n).len());
                let step = match env.step(&mean_action(&out.head, a_dim)) {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("task {task}: environment fault during evaluation ({e})");
                        break;
                    }
                };
                if step.done {
                    if step.success {
                        eval.successes += 1;
                    }
                    break;
                }
            }
        }
        results.push(eval);
    }
    Ok(results)
}

/// Fits the actor's mean action to the scripted expert by regression on
/// expert-visited states, with deterministic top-k paths. Returns the final
/// mean squared error.
#[allow(clippy::too_many_arguments)]
pub fn distill_expert<R: Rng + ?Sized>(
    actor: &mut ModulePolicy,
    specs: &[TaskSpec],
    function: RoutingFunction,
    k: usize,
    samples_per_task: usize,
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<f64, SacError> {
    let a_dim = actor.shape().action_dim;
    let mut obs = Vec::new();
    let mut targets = Vec::new();
    let mut tasks = Vec::new();
    for (task, spec) in specs.iter().enumerate() {
        let mut env = Env::new(spec.clone(), rng);
        let mut collected = 0;
        while collected < samples_per_task {
            // a little exploration noise widens the visited state set
            let mut a = scripted_action(env.spec(), env.state());
            obs.push(env.observation());
            targets.push(a.to_vec());
            tasks.push(task);
            collected += 1;
            for v in &mut a {
                *v = (*v + rng.random_range(-0.3..=0.3)).clamp(-1.0, 1.0);
            }
            if env.step(&a).map(|o| o.done).unwrap_or(true) {
                env.reset(rng);
            }
        }
    }
    let mut opt = Adam::new(actor.params(), lr);
    let batch = 64.min(obs.len());
    let mut last = f64::NAN;
    let steps = epochs * obs.len().div_ceil(batch);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..obs.len())).collect();
        let x = Matrix::from_rows(&idx.iter().map(|&i| obs[i].as_slice()).collect::<Vec<_>>());
        let y = Matrix::from_rows(&idx.iter().map(|&i| targets[i].as_slice()).collect::<Vec<_>>());
        let rows_tasks: Vec<usize> = idx.iter().map(|&i| tasks[i]).collect();
        let masks: Vec<RoutingMask> = {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let unit_taus = vec![1.0; specs.len()];
            fresh_masks(actor, &x, &rows_tasks, &unit_taus, function, k, false, &mut unused)?
        };
        let grads = {
            let mut tape = Tape::new();
            let bound = actor.bind(&mut tape, true);
            let xi = tape.constant(x);
            let out = actor.forward_resrouting(&mut tape, &bound, xi, &rows_tasks, &masks, function, Blocking::None)?;
            let mean = tape.slice_cols(out.head, 0, a_dim)?;
            let act = tape.tanh(mean)?;
            let yi = tape.constant(y);
            let d = tape.sub(act, yi)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.mean(sq)?;
            last = tape.value(loss).item();
            let g = tape.backward(loss)?;
            actor.params().grads(&bound, &g)
        };
        opt.step(actor.params_mut().tensors_mut(), &grads);
    }
    Ok(last)
}
