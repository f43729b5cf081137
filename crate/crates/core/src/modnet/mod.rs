//! The base module network: modules composed along per-sample routing paths,
//! with residual shortcuts and the residual stop-gradient used when training
//! on stored paths.
//!
//! Module 0 reads the state representation `F(s)`. Every intermediate module
//! `i` mixes its selected sources with the routing probabilities and adds its
//! own transform on top of that mix:
//!
//! ```text
//! x^i = Σ_j p^i_j · m̂^j        m^i = x^i + M^i(x^i)
//! ```
//!
//! The last module has no shortcut and produces the head output. When a
//! source `j` is deemed unsuitable for module `i` (its unmasked softmax weight
//! falls below `1/(i+1)`), `m̂^j` is the residual stop-gradient of `m^j`:
//! the same value, but gradient only flows through `x^j`, never through the
//! transform `M^j`.

pub mod checkpoint;

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Linear, Matrix, Mlp, NodeId, ParamIdx, ParamStore, Tape, TapeError};
use crate::routing::{
    effective_modules, softmax, RoutingError, RoutingFunction, RoutingLogits, RoutingMask, RoutingNetwork, RoutingProbs,
};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum ModnetError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("task id {task} out of range for {n_tasks} tasks")]
    UnknownTask { task: usize, n_tasks: usize },
    #[error("stored routing masks missing: {0}")]
    MissingMasks(String),
}

/// Sizes shared by the actor and the critics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub n_modules: usize,
    pub module_width: usize,
    /// Hidden widths of the state encoder `F`; the last one is the
    /// representation width shared with the task embedding.
    pub encoder_widths: Vec<usize>,
    pub routing_hidden: Vec<usize>,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub n_tasks: usize,
    /// When false the routers see only the task embedding.
    pub route_on_state: bool,
}

impl PolicyShape {
    pub fn repr_dim(&self) -> usize {
        *self.encoder_widths.last().expect("encoder needs at least one layer")
    }

    /// Suitability threshold `σ` of module `i` (0-based), i.e. `1/(i+1)`.
    pub fn suitability_threshold(i: usize) -> f64 {
        1.0 / (i as f64 + 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Tanh-squashed Gaussian: mean and log-std per action dimension.
    Actor,
    /// Scalar Q-value; the action is concatenated to the encoder input.
    Critic,
}

/// Gradient treatment of sources that are unsuitable for their consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Blocking {
    /// Plain routing, gradients everywhere.
    #[default]
    None,
    /// Residual stop-gradient: block the source's own transform, keep its shortcut.
    Rsg,
    /// Stop-gradient on the whole source output.
    Sg,
}

/// Output of [`ModulePolicy::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub repr: NodeId,
    pub routing_input: NodeId,
    /// Logit node of module `i` at index `i − 1`, each `batch × i`.
    pub logits: Vec<NodeId>,
    pub rows: usize,
}

/// How [`ModulePolicy::compose`] routes a batch.
#[derive(Clone, Copy, Debug)]
pub struct ComposePlan<'m> {
    /// One mask set per batch row.
    pub masks: &'m [RoutingMask],
    pub function: RoutingFunction,
    pub blocking: Blocking,
    /// Evaluate only modules the output can reach through some row's paths.
    pub skip_unreachable: bool,
}

/// Output of [`ModulePolicy::compose`].
#[derive(Clone, Debug)]
pub struct Composed {
    pub head: NodeId,
    /// `m^i` nodes, the last one being the head; `None` for skipped modules.
    pub modules: Vec<Option<NodeId>>,
    /// Probability node of module `i` at index `i − 1`; `None` if skipped.
    pub probs: Vec<Option<NodeId>>,
}

/// Module activations of one forward pass; `None` where a module was skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleOutputs {
    pub per_module: Vec<Option<Vec<f64>>>,
}

impl ModuleOutputs {
    pub fn evaluated(&self) -> BTreeSet<usize> {
        self.per_module
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Everything a single-sample forward pass produces.
#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub head: Vec<f64>,
    pub modules: ModuleOutputs,
    pub logits: RoutingLogits,
    pub masks: RoutingMask,
    pub probs: RoutingProbs,
}

/// Encoder, task embedding, routing sub-networks and modules of one network
/// (the actor or one critic).
#[derive(Clone, Debug, PartialEq)]
pub struct ModulePolicy {
    shape: PolicyShape,
    head: HeadKind,
    params: ParamStore,
    encoder: Mlp,
    task_embedding: ParamIdx,
    routing: RoutingNetwork,
    modules: Vec<Linear>,
}

impl ModulePolicy {
    pub fn new<R: Rng + ?Sized>(shape: PolicyShape, head: HeadKind, rng: &mut R) -> Self {
        assert!(shape.n_modules >= 2, "a module network needs at least two modules");
        assert!(!shape.encoder_widths.is_empty(), "the encoder needs at least one layer");
        let mut params = ParamStore::new();
        let input_dim = match head {
            HeadKind::Actor => shape.obs_dim,
            HeadKind::Critic => shape.obs_dim + shape.action_dim,
        };
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&shape.encoder_widths);
        let encoder = Mlp::new(&mut params, "encoder", &sizes, true, rng);
        let repr = shape.repr_dim();
        let bound = 1.0 / (shape.n_tasks.max(1) as f64).sqrt();
        let task_embedding = params.push(
            "task_embedding",
            Matrix::from_vec(
                shape.n_tasks,
                repr,
                (0..shape.n_tasks * repr)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            ),
        );
        let routing = RoutingNetwork::new(&mut params, repr, &shape.routing_hidden, shape.n_modules, rng);
        let head_dim = match head {
            HeadKind::Actor => 2 * shape.action_dim,
            HeadKind::Critic => 1,
        };
        let n = shape.n_modules;
        let w = shape.module_width;
        let modules = (0..n)
            .map(|i| {
                let fan_in = if i == 0 { repr } else { w };
                let fan_out = if i == n - 1 { head_dim } else { w };
                Linear::new(&mut params, &format!("module{i}"), fan_in, fan_out, rng)
            })
            .collect();
        Self {
            shape,
            head,
            params,
            encoder,
            task_embedding,
            routing,
            modules,
        }
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head
    }

    pub fn n_modules(&self) -> usize {
        self.shape.n_modules
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn routing_network(&self) -> &RoutingNetwork {
        &self.routing
    }

    pub fn module_layer(&self, i: usize) -> Linear {
        self.modules[i]
    }

    pub fn input_dim(&self) -> usize {
        match self.head {
            HeadKind::Actor => self.shape.obs_dim,
            HeadKind::Critic => self.shape.obs_dim + self.shape.action_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        match self.head {
            HeadKind::Actor => 2 * self.shape.action_dim,
            HeadKind::Critic => 1,
        }
    }

    /// Parameter indices owned by module `i`'s transform.
    pub fn module_params(&self, i: usize) -> [ParamIdx; 2] {
        [self.modules[i].weight, self.modules[i].bias]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Runs the encoder and every router: `F(s)`, `F(s) ⊙ H(T)` and `z^i`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        input: NodeId,
        tasks: &[usize],
    ) -> Result<Encoded, ModnetError> {
        let (rows, cols) = tape.shape(input);
        if cols != self.input_dim() {
            return Err(ModnetError::Dimension {
                what: "network input width",
                expected: self.input_dim(),
                got: cols,
            });
        }
        if tasks.len() != rows {
            return Err(ModnetError::Dimension {
                what: "task ids per batch",
                expected: rows,
                got: tasks.len(),
            });
        }
        if let Some(&task) = tasks.iter().find(|&&t| t >= self.shape.n_tasks) {
            return Err(ModnetError::UnknownTask {
                task,
                n_tasks: self.shape.n_tasks,
            });
        }
        let repr = self.encoder.forward(tape, bound, input)?;
        let task_repr = tape.gather_rows(bound.node(self.task_embedding), tasks.to_vec())?;
        let routing_input = if self.shape.route_on_state {
            tape.mul(repr, task_repr)?
        } else {
            task_repr
        };
        let logits = self.routing.logits_on_tape(tape, bound, routing_input)?;
        Ok(Encoded {
            repr,
            routing_input,
            logits,
            rows,
        })
    }

    /// Logit values of one batch row.
    pub fn logits_of_row(&self, tape: &Tape<'_>, enc: &Encoded, row: usize) -> RoutingLogits {
        RoutingLogits {
            per_module: enc.logits.iter().map(|&z| tape.value(z).row(row).to_vec()).collect(),
        }
    }

    /// Modules to evaluate: those reachable from the output through any row's
    /// selected edges.
    fn reachable_union(&self, masks: &[RoutingMask]) -> Vec<bool> {
        let n = self.n_modules();
        let mut reached = vec![false; n];
        reached[n - 1] = true;
        for i in (1..n).rev() {
            if !reached[i] {
                continue;
            }
            for m in masks {
                for (j, &sel) in m.module(i).iter().enumerate() {
                    if sel {
                        reached[j] = true;
                    }
                }
            }
        }
        reached
    }

    /// Composes modules along the given paths and applies the last module.
    pub fn compose(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        enc: &Encoded,
        plan: &ComposePlan<'_>,
    ) -> Result<Composed, ModnetError> {
        let n = self.n_modules();
        let rows = enc.rows;
        if plan.masks.len() != rows {
            return Err(ModnetError::MissingMasks(format!(
                "{} mask sets for {rows} rows",
                plan.masks.len()
            )));
        }
        for m in plan.masks {
            m.validate(n, None)?;
        }
        let evaluate = if plan.skip_unreachable {
            self.reachable_union(plan.masks)
        } else {
            vec![true; n]
        };

        let mut full: Vec<Option<NodeId>> = vec![None; n];
        let mut stopped: Vec<Option<NodeId>> = vec![None; n];
        let mut probs: Vec<Option<NodeId>> = vec![None; n - 1];

        if evaluate[0] {
            let t = self.modules[0].forward(tape, bound, enc.repr)?;
            let t = tape.relu(t)?;
            full[0] = Some(t);
            // module 0 has no shortcut, so its residual stop-gradient is a plain one
            if plan.blocking != Blocking::None {
                stopped[0] = Some(tape.stop_grad(t)?);
            }
        }

        let mut head = None;
        for i in 1..n {
            if !evaluate[i] {
                continue;
            }
            let z = enc.logits[i - 1];
            let mut mask = Vec::with_capacity(rows * i);
            for m in plan.masks {
                mask.extend_from_slice(m.module(i));
            }
            let p = plan.function.probs_on_tape(tape, z, mask.clone())?;
            probs[i - 1] = Some(p);

            let threshold = PolicyShape::suitability_threshold(i);
            let full_softmax: Vec<Vec<f64>> = if plan.blocking != Blocking::None {
                (0..rows).map(|r| softmax(tape.value(z).row(r))).collect()
            } else {
                Vec::new()
            };
            let mut sources = Vec::with_capacity(i);
            for j in 0..i {
                let used = (0..rows).any(|r| mask[r * i + j]);
                if !used {
                    sources.push(None);
                    continue;
                }
                let src_full = full[j].ok_or_else(|| {
                    ModnetError::MissingMasks(format!("module {i} routes from unevaluated module {j}"))
                })?;
                let node = match plan.blocking {
                    Blocking::None => src_full,
                    Blocking::Rsg | Blocking::Sg => {
                        let src_stop = stopped[j].expect("stopped twin exists when blocking");
                        let keep: Vec<bool> = (0..rows)
                            .map(|r| {
                                let s = full_softmax[r][j];
                                tape.note_kink(s - threshold);
                                s >= threshold
                            })
                            .collect();
                        if keep.iter().all(|&k| k) {
                            src_full
                        } else if keep.iter().all(|&k| !k) {
                            src_stop
                        } else {
                            tape.row_select(keep, src_full, src_stop)?
                        }
                    }
                };
                sources.push(Some(node));
            }
            let x = tape.route_mix(p, sources, mask)?;
            let t = self.modules[i].forward(tape, bound, x)?;
            if i == n - 1 {
                head = Some(t);
                full[i] = Some(t);
                break;
            }
            let t = tape.relu(t)?;
            let m = tape.add(x, t)?;
            full[i] = Some(m);
            stopped[i] = match plan.blocking {
                Blocking::None => None,
                Blocking::Rsg => {
                    let st = tape.stop_grad(t)?;
                    Some(tape.add(x, st)?)
                }
                Blocking::Sg => Some(tape.stop_grad(m)?),
            };
        }
        Ok(Composed {
            head: head.expect("output module is always evaluated"),
            modules: full,
            probs,
        })
    }

    /// Single-sample forward pass on paths chosen by `choose` from the
    /// sample's logits. Only modules the output can reach are evaluated.
    pub fn forward_rollout_with<F>(
        &self,
        input: &[f64],
        task: usize,
        function: RoutingFunction,
        choose: F,
    ) -> Result<RolloutOutput, ModnetError>
    where
        F: FnOnce(&RoutingLogits) -> Result<RoutingMask, RoutingError>,
    {
        self.forward_single(input, task, function, true, choose)
    }

    /// Single-sample forward pass on explicit paths, skipping modules the
    /// output cannot reach.
    pub fn forward_rollout(
        &self,
        input: &[f64],
        task: usize,
        masks: &RoutingMask,
        function: RoutingFunction,
    ) -> Result<RolloutOutput, ModnetError> {
        self.forward_single(input, task, function, true, |_| Ok(masks.clone()))
    }

    /// Like [`forward_rollout`](Self::forward_rollout) but evaluates every
    /// module, including ones no path reaches.
    pub fn forward_all_modules(
        &self,
        input: &[f64],
        task: usize,
        masks: &RoutingMask,
        function: RoutingFunction,
    ) -> Result<RolloutOutput, ModnetError> {
        self.forward_single(input, task, function, false, |_| Ok(masks.clone()))
    }

    fn forward_single<F>(
        &self,
        input: &[f64],
        task: usize,
        function: RoutingFunction,
        skip: bool,
        choose: F,
    ) -> Result<RolloutOutput, ModnetError>
    where
        F: FnOnce(&RoutingLogits) -> Result<RoutingMask, RoutingError>,
    {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(Matrix::row_vector(input));
        let enc = self.encode(&mut tape, &bound, x, &[task])?;
        let logits = self.logits_of_row(&tape, &enc, 0);
        let masks = choose(&logits)?;
        let plan = ComposePlan {
            masks: std::slice::from_ref(&masks),
            function,
            blocking: Blocking::None,
            skip_unreachable: skip,
        };
        let out = self.compose(&mut tape, &bound, &enc, &plan)?;
        let probs = RoutingProbs {
            per_module: (1..self.n_modules())
                .map(|i| function.probs(logits.module(i), masks.module(i)))
                .collect::<Result<_, _>>()?,
        };
        Ok(RolloutOutput {
            head: tape.value(out.head).data().to_vec(),
            modules: ModuleOutputs {
                per_module: out
                    .modules
                    .iter()
                    .map(|m| m.map(|id| tape.value(id).data().to_vec()))
                    .collect(),
            },
            logits,
            masks,
            probs,
        })
    }

    /// Training-time forward pass on stored paths `d_old`: probabilities are
    /// renormalised over the stored paths and unsuitable sources are handled
    /// according to `blocking`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_resrouting(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        input: NodeId,
        tasks: &[usize],
        stored: &[RoutingMask],
        function: RoutingFunction,
        blocking: Blocking,
    ) -> Result<Composed, ModnetError> {
        if stored.is_empty() && tape.shape(input).0 > 0 {
            return Err(ModnetError::MissingMasks("no stored paths supplied".into()));
        }
        let enc = self.encode(tape, bound, input, tasks)?;
        self.compose(
            tape,
            bound,
            &enc,
            &ComposePlan {
                masks: stored,
                function,
                blocking,
                skip_unreachable: false,
            },
        )
    }

    /// Q-value of one `(state, action)` pair.
    pub fn critic_forward(
        &self,
        state: &[f64],
        action: &[f64],
        task: usize,
        masks: &RoutingMask,
        function: RoutingFunction,
    ) -> Result<f64, ModnetError> {
        if self.head != HeadKind::Critic {
            return Err(ModnetError::Dimension {
                what: "critic head width",
                expected: 1,
                got: self.head_dim(),
            });
        }
        if action.len() != self.shape.action_dim {
            return Err(ModnetError::Dimension {
                what: "action width",
                expected: self.shape.action_dim,
                got: action.len(),
            });
        }
        if state.len() != self.shape.obs_dim {
            return Err(ModnetError::Dimension {
                what: "state width",
                expected: self.shape.obs_dim,
                got: state.len(),
            });
        }
        let mut input = state.to_vec();
        input.extend_from_slice(action);
        Ok(self.forward_rollout(&input, task, masks, function)?.head[0])
    }
}

/// Reparameterised sample from the squashed Gaussian head.
#[derive(Clone, Copy, Debug)]
pub struct ActorSample {
    pub mean: NodeId,
    pub log_std: NodeId,
    /// `tanh(mean + std ⊙ noise)`, `batch × action_dim`.
    pub action: NodeId,
    /// `log π(a|s)`, `batch × 1`.
    pub log_prob: NodeId,
}

/// Splits an actor head into mean and soft-clamped log-std, draws
/// `a = tanh(μ + σ ⊙ noise)` and its log-density with the tanh correction.
pub fn squashed_gaussian(
    tape: &mut Tape<'_>,
    head: NodeId,
    action_dim: usize,
    noise: Matrix,
) -> Result<ActorSample, TapeError> {
    let mean = tape.slice_cols(head, 0, action_dim)?;
    let raw = tape.slice_cols(head, action_dim, action_dim)?;
    let log_std = soft_clamp_log_std(tape, raw)?;
    let std = tape.exp(log_std)?;
    let eps = tape.constant(noise);
    let spread = tape.mul(std, eps)?;
    let pre = tape.add(mean, spread)?;
    let action = tape.tanh(pre)?;
    let gauss = tape.gaussian_log_prob(pre, mean, log_std)?;
    // log(1 − tanh²u) = 2(ln 2 − u − softplus(−2u))
    let neg2 = tape.scale(pre, -2.0)?;
    let sp = tape.softplus(neg2)?;
    let t = tape.add(pre, sp)?;
    let t = tape.scale(t, -2.0)?;
    let t = tape.offset(t, 2.0 * std::f64::consts::LN_2)?;
    let correction = tape.sum_cols(t)?;
    let log_prob = tape.sub(gauss, correction)?;
    Ok(ActorSample {
        mean,
        log_std,
        action,
        log_prob,
    })
}

fn soft_clamp_log_std(tape: &mut Tape<'_>, raw: NodeId) -> Result<NodeId, TapeError> {
    let t = tape.tanh(raw)?;
    let t = tape.offset(t, 1.0)?;
    let t = tape.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN))?;
    tape.offset(t, LOG_STD_MIN)
}

/// Deterministic action `tanh(μ)` from a raw actor head row.
pub fn mean_action(head: &[f64], action_dim: usize) -> Vec<f64> {
    head[..action_dim].iter().map(|m| m.tanh()).collect()
}

/// Stochastic action and its log-probability from a raw actor head row.
pub fn sample_from_head(head: &[f64], action_dim: usize, noise: &[f64]) -> (Vec<f64>, f64) {
    let mut tape = Tape::new();
    let h = tape.constant(Matrix::row_vector(head));
    let s =
        squashed_gaussian(&mut tape, h, action_dim, Matrix::row_vector(noise)).expect("head width matches action_dim");
    (tape.value(s.action).data().to_vec(), tape.value(s.log_prob).item())
}

/// Whether source `j` is suitable for module `i` under logits `z` (the
/// unmasked softmax weight reaches the threshold `1/(i+1)`).
pub fn is_suitable(z: &[f64], i: usize, j: usize) -> bool {
    softmax(z)[j] >= PolicyShape::suitability_threshold(i)
}

/// Modules the output reaches under `masks`, as evaluated by
/// [`ModulePolicy::forward_rollout`].
pub fn rollout_modules(masks: &RoutingMask) -> BTreeSet<usize> {
    effective_modules(masks, masks.n_modules())
}
