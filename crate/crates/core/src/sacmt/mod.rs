//! Multi-task soft actor-critic over routed module networks.
//!
//! One actor and two critics, each a [`ModulePolicy`] with its own routing.
//! Every task has its own entropy temperature `α_T`; those temperatures also
//! set the routing sampling temperature `τ_T` and, optionally, the task loss
//! weights `w_T`. Training replays the routing paths the behaviour networks
//! used when the data was collected.

mod replay;
mod rollout;

pub use replay::{ReplayBuffer, StoredMasks, Transition};
pub use rollout::{deterministic_masks, distill_expert, evaluate, Collector, TaskEval};

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, Bound, Matrix, NodeId, ParamIdx, ParamStore, Tape, TapeError};
use crate::modnet::{squashed_gaussian, Blocking, HeadKind, ModnetError, ModulePolicy, PolicyShape};
use crate::routing::{route_balance_temperatures, RouteTemperature, RoutingError, RoutingFunction, RoutingMask};

#[derive(Debug, thiserror::Error)]
pub enum SacError {
    #[error(transparent)]
    Modnet(#[from] ModnetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
}

/// How the training forward pass treats the routing paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResRoutingMode {
    /// Stored paths with the residual stop-gradient on unsuitable sources.
    #[default]
    Rsg,
    /// Stored paths with a plain stop-gradient on unsuitable sources.
    SgOnly,
    /// Paths freshly drawn from the current routers.
    TargetRouting,
    /// Stored paths, no gradient blocking.
    Off,
}

impl ResRoutingMode {
    pub fn blocking(self) -> Blocking {
        match self {
            ResRoutingMode::Rsg => Blocking::Rsg,
            ResRoutingMode::SgOnly => Blocking::Sg,
            ResRoutingMode::TargetRouting | ResRoutingMode::Off => Blocking::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub reward_scale: f64,
    /// Target network smoothing `ρ` in `target ← ρ·target + (1 − ρ)·online`.
    pub polyak: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    pub batch_per_task: usize,
    pub k: usize,
    pub routing: RoutingFunction,
    pub resrouting: ResRoutingMode,
    pub route_balancing: bool,
    /// Apply `τ_T` to the critics' path sampling as well as the actor's.
    pub critic_route_temperature: bool,
    pub loss_weighting: bool,
    /// Tasks whose loss exceeds this are left out of the step; infinity disables.
    pub maskout_threshold: f64,
}

impl SacConfig {
    pub fn maskout(&self) -> Option<f64> {
        self.maskout_threshold.is_finite().then_some(self.maskout_threshold)
    }
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            reward_scale: 0.1,
            polyak: 0.995,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            init_alpha: 0.01,
            batch_per_task: 32,
            k: 2,
            routing: RoutingFunction::Samplek,
            resrouting: ResRoutingMode::Rsg,
            route_balancing: true,
            critic_route_temperature: true,
            loss_weighting: true,
            maskout_threshold: 3e3,
        }
    }
}

/// `w_T = softmax(−α)_T`.
pub fn task_loss_weights(alphas: &[f64]) -> Vec<f64> {
    let m = alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = alphas.iter().map(|a| (-(a - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Which tasks stay in the total loss: those whose loss does not exceed the
/// threshold. Non-finite losses are always excluded.
pub fn loss_maskout(losses: &[f64], threshold: f64) -> Vec<bool> {
    losses.iter().map(|&l| l.is_finite() && l <= threshold).collect()
}

/// Per-task learned entropy temperatures.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTemperatures {
    log_alpha: ParamStore,
    idx: ParamIdx,
    opt: Adam,
    pub target_entropy: f64,
}

impl TaskTemperatures {
    pub fn new(n_tasks: usize, init_alpha: f64, target_entropy: f64, lr: f64) -> Self {
        let mut log_alpha = ParamStore::new();
        let idx = log_alpha.push("log_alpha", Matrix::filled(n_tasks, 1, init_alpha.ln()));
        let opt = Adam::new(&log_alpha, lr);
        Self {
            log_alpha,
            idx,
            opt,
            target_entropy,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.log_alpha.get(self.idx).rows()
    }

    pub fn log_alphas(&self) -> &[f64] {
        self.log_alpha.get(self.idx).data()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.log_alphas().iter().map(|l| l.exp()).collect()
    }

    /// Routing temperatures; all 1 when route-balancing is off.
    pub fn taus(&self, balancing: bool) -> Vec<f64> {
        if balancing {
            route_balance_temperatures(&self.alphas()).expect("exp(log α) is positive")
        } else {
            vec![1.0; self.n_tasks()]
        }
    }

    /// Loss weights; uniform when weighting is off.
    pub fn weights(&self, weighting: bool) -> Vec<f64> {
        if weighting {
            task_loss_weights(&self.alphas())
        } else {
            vec![1.0 / self.n_tasks() as f64; self.n_tasks()]
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.log_alpha
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.log_alpha
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.opt
    }

    /// One gradient step on the temperature loss given each row's task and
    /// `log π`. Returns the loss value.
    pub fn update(&mut self, tasks: &[usize], log_probs: &[f64]) -> Result<f64, SacError> {
        let (loss, grads) = {
            let mut tape = Tape::new();
            let la = tape.parameter_ref(self.log_alpha.get(self.idx));
            let root = alpha_loss(&mut tape, la, tasks, log_probs, self.target_entropy)?;
            let g = tape.backward(root)?;
            (tape.value(root).item(), g.wrt(la))
        };
        self.opt.step(self.log_alpha.tensors_mut(), &[grads]);
        Ok(loss)
    }
}

/// `mean_r −α_{T(r)}·(log π_r + H̄)`, differentiated through `log α` only.
pub fn alpha_loss(
    tape: &mut Tape<'_>,
    log_alpha: NodeId,
    tasks: &[usize],
    log_probs: &[f64],
    target_entropy: f64,
) -> Result<NodeId, SacError> {
    if tasks.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let la = tape.gather_rows(log_alpha, tasks.to_vec())?;
    let alpha = tape.exp(la)?;
    let gap = tape.constant(Matrix::column(
        &log_probs.iter().map(|l| l + target_entropy).collect::<Vec<_>>(),
    ));
    let prod = tape.mul(alpha, gap)?;
    let neg = tape.scale(prod, -1.0)?;
    Ok(tape.mean(neg)?)
}

/// Per-row actor objective `α·log π − min(Q1, Q2)`.
pub fn actor_objective(
    tape: &mut Tape<'_>,
    log_prob: NodeId,
    q1: NodeId,
    q2: NodeId,
    row_alphas: &[f64],
) -> Result<NodeId, TapeError> {
    let alpha = tape.constant(Matrix::column(row_alphas));
    let ent = tape.mul(alpha, log_prob)?;
    let q = tape.min(q1, q2)?;
    tape.sub(ent, q)
}

/// Per-row critic objective `(Q1 − y)² + (Q2 − y)²`.
pub fn critic_objective(tape: &mut Tape<'_>, q1: NodeId, q2: NodeId, target: &[f64]) -> Result<NodeId, TapeError> {
    let y = tape.constant(Matrix::column(target));
    let d1 = tape.sub(q1, y)?;
    let d2 = tape.sub(q2, y)?;
    let s1 = tape.mul(d1, d1)?;
    let s2 = tape.mul(d2, d2)?;
    tape.add(s1, s2)
}

/// Soft Bellman target `c·r + γ(1 − done)(min Q′ − α log π′)`.
pub fn soft_target(
    reward: f64,
    done: bool,
    next_min_q: f64,
    next_log_prob: f64,
    alpha: f64,
    gamma: f64,
    reward_scale: f64,
) -> f64 {
    let bootstrap = if done {
        0.0
    } else {
        gamma * (next_min_q - alpha * next_log_prob)
    };
    reward_scale * reward + bootstrap
}

/// Per-task mean of a per-row loss, combined as `Σ_T w_T·J_T` over the tasks
/// that survive maskout.
#[derive(Clone, Debug)]
pub struct TaskLoss {
    /// `None` when every task was masked out.
    pub total: Option<NodeId>,
    pub per_task: Vec<f64>,
    pub included: Vec<bool>,
}

pub fn combine_task_losses(
    tape: &mut Tape<'_>,
    per_row: NodeId,
    tasks: &[usize],
    weights: &[f64],
    threshold: Option<f64>,
) -> Result<TaskLoss, SacError> {
    let n = weights.len();
    if tasks.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let values = tape.value(per_row).data().to_vec();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (&t, v) in tasks.iter().zip(&values) {
        sums[t] += v;
        counts[t] += 1;
    }
    let per_task: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let mut included: Vec<bool> = match threshold {
        Some(th) => loss_maskout(&per_task, th),
        None => per_task.iter().map(|l| l.is_finite()).collect(),
    };
    for (inc, &c) in included.iter_mut().zip(&counts) {
        *inc &= c > 0;
    }
    if !included.iter().any(|&b| b) {
        return Ok(TaskLoss {
            total: None,
            per_task,
            included,
        });
    }
    let coef: Vec<f64> = tasks
        .iter()
        .map(|&t| {
            if included[t] {
                weights[t] / counts[t] as f64
            } else {
                0.0
            }
        })
        .collect();
    let c = tape.constant(Matrix::column(&coef));
    let weighted = tape.mul(per_row, c)?;
    let total = tape.sum(weighted)?;
    Ok(TaskLoss {
        total: Some(total),
        per_task,
        included,
    })
}

/// A network and its parameters bound onto a tape.
#[derive(Clone, Copy)]
pub struct BoundNet<'n> {
    pub net: &'n ModulePolicy,
    pub bound: &'n Bound,
}

/// Everything the actor loss needs besides the networks.
#[derive(Clone, Debug)]
pub struct ActorBatch<'b> {
    pub states: Matrix,
    pub tasks: Vec<usize>,
    pub actor_masks: &'b [RoutingMask],
    pub q1_masks: &'b [RoutingMask],
    pub q2_masks: &'b [RoutingMask],
    /// Standard-normal noise, `batch × action_dim`.
    pub noise: Matrix,
    pub row_alphas: Vec<f64>,
    pub blocking: Blocking,
    pub function: RoutingFunction,
}

pub struct ActorLoss {
    pub loss: TaskLoss,
    pub log_probs: Vec<f64>,
}

/// Records the actor loss: reparameterised actions from the actor routed on
/// `actor_masks`, scored by the critics.
pub fn actor_loss(
    tape: &mut Tape<'_>,
    actor: BoundNet<'_>,
    q1: BoundNet<'_>,
    q2: BoundNet<'_>,
    batch: &ActorBatch<'_>,
    weights: &[f64],
    threshold: Option<f64>,
) -> Result<ActorLoss, SacError> {
    if batch.tasks.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let a_dim = actor.net.shape().action_dim;
    let s = tape.constant(batch.states.clone());
    let out = actor.net.forward_resrouting(
        tape,
        actor.bound,
        s,
        &batch.tasks,
        batch.actor_masks,
        batch.function,
        batch.blocking,
    )?;
    let sample = squashed_gaussian(tape, out.head, a_dim, batch.noise.clone())?;
    let sa = tape.concat_cols(s, sample.action)?;
    let v1 = q1.net.forward_resrouting(
        tape,
        q1.bound,
        sa,
        &batch.tasks,
        batch.q1_masks,
        batch.function,
        Blocking::None,
    )?;
    let v2 = q2.net.forward_resrouting(
        tape,
        q2.bound,
        sa,
        &batch.tasks,
        batch.q2_masks,
        batch.function,
        Blocking::None,
    )?;
    let per_row = actor_objective(tape, sample.log_prob, v1.head, v2.head, &batch.row_alphas)?;
    let loss = combine_task_losses(tape, per_row, &batch.tasks, weights, threshold)?;
    Ok(ActorLoss {
        loss,
        log_probs: tape.value(sample.log_prob).data().to_vec(),
    })
}

/// Inputs of the critic loss.
#[derive(Clone, Debug)]
pub struct CriticBatch<'b> {
    /// `[state, action]` rows.
    pub inputs: Matrix,
    pub tasks: Vec<usize>,
    pub q1_masks: &'b [RoutingMask],
    pub q2_masks: &'b [RoutingMask],
    pub targets: Vec<f64>,
    pub blocking: Blocking,
    pub function: RoutingFunction,
}

pub fn critic_loss(
    tape: &mut Tape<'_>,
    q1: BoundNet<'_>,
    q2: BoundNet<'_>,
    batch: &CriticBatch<'_>,
    weights: &[f64],
    threshold: Option<f64>,
) -> Result<TaskLoss, SacError> {
    if batch.tasks.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let x = tape.constant(batch.inputs.clone());
    let v1 = q1.net.forward_resrouting(
        tape,
        q1.bound,
        x,
        &batch.tasks,
        batch.q1_masks,
        batch.function,
        batch.blocking,
    )?;
    let v2 = q2.net.forward_resrouting(
        tape,
        q2.bound,
        x,
        &batch.tasks,
        batch.q2_masks,
        batch.function,
        batch.blocking,
    )?;
    let per_row = critic_objective(tape, v1.head, v2.head, &batch.targets)?;
    combine_task_losses(tape, per_row, &batch.tasks, weights, threshold)
}

/// Draws a path set per row from the network's current routers.
#[allow(clippy::too_many_arguments)]
pub fn fresh_masks<R: Rng + ?Sized>(
    net: &ModulePolicy,
    inputs: &Matrix,
    tasks: &[usize],
    taus: &[f64],
    function: RoutingFunction,
    k: usize,
    explore: bool,
    rng: &mut R,
) -> Result<Vec<RoutingMask>, SacError> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = tape.constant_ref(inputs);
    let enc = net.encode(&mut tape, &bound, x, tasks)?;
    (0..tasks.len())
        .map(|r| {
            let z = net.logits_of_row(&tape, &enc, r);
            let tau = RouteTemperature::new(taus[tasks[r]])?;
            Ok(function.select_all(&z, k, tau, explore, rng)?)
        })
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// Actor, twin critics and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub actor: ModulePolicy,
    pub q1: ModulePolicy,
    pub q2: ModulePolicy,
    pub q1_target: ModulePolicy,
    pub q2_target: ModulePolicy,
}

impl Networks {
    pub fn new<R: Rng + ?Sized>(shape: &PolicyShape, rng: &mut R) -> Self {
        let actor = ModulePolicy::new(shape.clone(), HeadKind::Actor, rng);
        let q1 = ModulePolicy::new(shape.clone(), HeadKind::Critic, rng);
        let q2 = ModulePolicy::new(shape.clone(), HeadKind::Critic, rng);
        Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
        }
    }

    /// `(prefix, store)` pairs covering every tensor, for checkpoints.
    pub fn stores(&self) -> [(&'static str, &ParamStore); 5] {
        [
            ("actor", self.actor.params()),
            ("q1", self.q1.params()),
            ("q2", self.q2.params()),
            ("q1_target", self.q1_target.params()),
            ("q2_target", self.q2_target.params()),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore); 5] {
        [
            ("actor", self.actor.params_mut()),
            ("q1", self.q1.params_mut()),
            ("q2", self.q2.params_mut()),
            ("q1_target", self.q1_target.params_mut()),
            ("q2_target", self.q2_target.params_mut()),
        ]
    }
}

/// Per-task numbers from one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub tau: f64,
    pub w: f64,
    pub actor_included: bool,
    pub critic_included: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    pub per_task: Vec<TaskMetrics>,
    pub alpha_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    /// Some task has fewer transitions than the per-task batch.
    InsufficientData,
    Trained(TrainMetrics),
}

/// Networks, optimisers and temperatures.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: SacConfig,
    pub nets: Networks,
    pub temps: TaskTemperatures,
    pub actor_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
    pub train_steps: u64,
}

impl Trainer {
    pub fn new<R: Rng + ?Sized>(shape: &PolicyShape, cfg: SacConfig, rng: &mut R) -> Self {
        let nets = Networks::new(shape, rng);
        let temps = TaskTemperatures::new(shape.n_tasks, cfg.init_alpha, -(shape.action_dim as f64), cfg.alpha_lr);
        Self {
            actor_opt: Adam::new(nets.actor.params(), cfg.actor_lr),
            q1_opt: Adam::new(nets.q1.params(), cfg.critic_lr),
            q2_opt: Adam::new(nets.q2.params(), cfg.critic_lr),
            cfg,
            nets,
            temps,
            train_steps: 0,
        }
    }

    pub fn shape(&self) -> &PolicyShape {
        self.nets.actor.shape()
    }

    fn critic_taus(&self) -> Vec<f64> {
        if self.cfg.critic_route_temperature {
            self.temps.taus(self.cfg.route_balancing)
        } else {
            vec![1.0; self.temps.n_tasks()]
        }
    }

    /// One critic, actor and temperature update on a stratified batch,
    /// followed by the target update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<TrainOutcome, SacError> {
        let Some(batch) = buffer.sample(self.cfg.batch_per_task, rng) else {
            return Ok(TrainOutcome::InsufficientData);
        };
        let cfg = self.cfg.clone();
        let shape = self.shape().clone();
        let rows = batch.len();
        let a_dim = shape.action_dim;
        let tasks: Vec<usize> = batch.iter().map(|t| t.task).collect();
        let alphas = self.temps.alphas();
        let taus = self.temps.taus(cfg.route_balancing);
        let critic_taus = self.critic_taus();
        let weights = self.temps.weights(cfg.loss_weighting);
        let row_alphas: Vec<f64> = tasks.iter().map(|&t| alphas[t]).collect();
        let states = Matrix::from_rows(&batch.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>());
        let next_states = Matrix::from_rows(&batch.iter().map(|t| t.next_state.as_slice()).collect::<Vec<_>>());
        let state_actions = Matrix::from_rows(
            &batch
                .iter()
                .map(|t| [t.state.as_slice(), t.action.as_slice()].concat())
                .collect::<Vec<_>>(),
        );

        // soft Bellman targets; next actions on sampled paths, target critics on deterministic paths
        let targets = {
            let next_actor_masks = fresh_masks(
                &self.nets.actor,
                &next_states,
                &tasks,
                &taus,
                cfg.routing,
                cfg.k,
                true,
                rng,
            )?;
            let noise = standard_normal(rows, a_dim, rng);
            let mut tape = Tape::new();
            let bound = self.nets.actor.bind(&mut tape, false);
            let s2 = tape.constant_ref(&next_states);
            let out = self.nets.actor.forward_resrouting(
                &mut tape,
                &bound,
                s2,
                &tasks,
                &next_actor_masks,
                cfg.routing,
                Blocking::None,
            )?;
            let sample = squashed_gaussian(&mut tape, out.head, a_dim, noise)?;
            let next_logp = tape.value(sample.log_prob).data().to_vec();
            let sa2 = tape.concat_cols(s2, sample.action)?;
            let sa2_value = tape.value(sa2).clone();
            let mut qs = Vec::with_capacity(2);
            for target in [&self.nets.q1_target, &self.nets.q2_target] {
                let masks = fresh_masks(target, &sa2_value, &tasks, &critic_taus, cfg.routing, cfg.k, false, rng)?;
                let b = target.bind(&mut tape, false);
                let out = target.forward_resrouting(&mut tape, &b, sa2, &tasks, &masks, cfg.routing, Blocking::None)?;
                qs.push(tape.value(out.head).data().to_vec());
            }
            (0..rows)
                .map(|r| {
                    let t = batch[r];
                    soft_target(
                        t.reward,
                        t.done,
                        qs[0][r].min(qs[1][r]),
                        next_logp[r],
                        alphas[t.task],
                        cfg.gamma,
                        cfg.reward_scale,
                    )
                })
                .collect::<Vec<f64>>()
        };

        let fresh = cfg.resrouting == ResRoutingMode::TargetRouting;
        let stored_q1: Vec<RoutingMask> = batch.iter().map(|t| t.masks.q1.clone()).collect();
        let stored_q2: Vec<RoutingMask> = batch.iter().map(|t| t.masks.q2.clone()).collect();
        let (q1_masks, q2_masks) = if fresh {
            (
                fresh_masks(
                    &self.nets.q1,
                    &state_actions,
                    &tasks,
                    &critic_taus,
                    cfg.routing,
                    cfg.k,
                    true,
                    rng,
                )?,
                fresh_masks(
                    &self.nets.q2,
                    &state_actions,
                    &tasks,
                    &critic_taus,
                    cfg.routing,
                    cfg.k,
                    true,
                    rng,
                )?,
            )
        } else {
            (stored_q1, stored_q2)
        };

        let critic = {
            let mut tape = Tape::new();
            let b1 = self.nets.q1.bind(&mut tape, true);
            let b2 = self.nets.q2.bind(&mut tape, true);
            let loss = critic_loss(
                &mut tape,
                BoundNet {
                    net: &self.nets.q1,
                    bound: &b1,
                },
                BoundNet {
                    net: &self.nets.q2,
                    bound: &b2,
                },
                &CriticBatch {
                    inputs: state_actions,
                    tasks: tasks.clone(),
                    q1_masks: &q1_masks,
                    q2_masks: &q2_masks,
                    targets,
                    blocking: cfg.resrouting.blocking(),
                    function: cfg.routing,
                },
                &weights,
                cfg.maskout(),
            )?;
            let grads = match loss.total {
                Some(root) => {
                    if !tape.value(root).item().is_finite() {
                        return Err(SacError::NonFinite("critic"));
                    }
                    let g = tape.backward(root)?;
                    Some((
                        self.nets.q1.params().grads(&b1, &g),
                        self.nets.q2.params().grads(&b2, &g),
                    ))
                }
                None => {
                    warn!("every task exceeded the critic loss threshold; critic update skipped");
                    None
                }
            };
            (loss.per_task, loss.included, grads)
        };
        let (critic_per_task, critic_included, critic_grads) = critic;
        if let Some((g1, g2)) = critic_grads {
            self.q1_opt.step(self.nets.q1.params_mut().tensors_mut(), &g1);
            self.q2_opt.step(self.nets.q2.params_mut().tensors_mut(), &g2);
        }

        let actor_masks: Vec<RoutingMask> = if fresh {
            fresh_masks(&self.nets.actor, &states, &tasks, &taus, cfg.routing, cfg.k, true, rng)?
        } else {
            batch.iter().map(|t| t.masks.actor.clone()).collect()
        };
        let noise = standard_normal(rows, a_dim, rng);
        let (actor_per_task, actor_included, log_probs, actor_grads) = {
            let mut tape = Tape::new();
            let ba = self.nets.actor.bind(&mut tape, true);
            let b1 = self.nets.q1.bind(&mut tape, false);
            let b2 = self.nets.q2.bind(&mut tape, false);
            let out = actor_loss(
                &mut tape,
                BoundNet {
                    net: &self.nets.actor,
                    bound: &ba,
                },
                BoundNet {
                    net: &self.nets.q1,
                    bound: &b1,
                },
                BoundNet {
                    net: &self.nets.q2,
                    bound: &b2,
                },
                &ActorBatch {
                    states,
                    tasks: tasks.clone(),
                    actor_masks: &actor_masks,
                    q1_masks: &q1_masks,
                    q2_masks: &q2_masks,
                    noise,
                    row_alphas,
                    blocking: cfg.resrouting.blocking(),
                    function: cfg.routing,
                },
                &weights,
                cfg.maskout(),
            )?;
            let grads = match out.loss.total {
                Some(root) => {
                    if !tape.value(root).item().is_finite() {
                        return Err(SacError::NonFinite("actor"));
                    }
                    let g = tape.backward(root)?;
                    Some(self.nets.actor.params().grads(&ba, &g))
                }
                None => {
                    warn!("every task exceeded the actor loss threshold; actor update skipped");
                    None
                }
            };
            (out.loss.per_task, out.loss.included, out.log_probs, grads)
        };
        if let Some(g) = actor_grads {
            self.actor_opt.step(self.nets.actor.params_mut().tensors_mut(), &g);
        }
        let alpha_loss = self.temps.update(&tasks, &log_probs)?;

        self.nets
            .q1_target
            .params_mut()
            .polyak_from(self.nets.q1.params(), cfg.polyak);
        self.nets
            .q2_target
            .params_mut()
            .polyak_from(self.nets.q2.params(), cfg.polyak);
        self.train_steps += 1;

        Ok(TrainOutcome::Trained(TrainMetrics {
            per_task: (0..shape.n_tasks)
                .map(|t| TaskMetrics {
                    actor_loss: actor_per_task[t],
                    critic_loss: critic_per_task[t],
                    alpha: alphas[t],
                    tau: taus[t],
                    w: weights[t],
                    actor_included: actor_included[t],
                    critic_included: critic_included[t],
                })
                .collect(),
            alpha_loss,
        }))
    }
}
