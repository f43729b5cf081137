//! Commands that read a finished checkpoint: evaluation, module usage,
//! routing sparsity and DOT export.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::UsageError;
use crate::envsuite::Env;
use crate::modnet::checkpoint::Checkpoint;
use crate::modnet::{mean_action, HeadKind, ModulePolicy, RolloutOutput};
use crate::routing::effective_modules;
use crate::sacmt::{deterministic_masks, evaluate, StoredMasks, TaskEval};
use serde::{Deserialize, Serialize};

/// Sources with a routing probability above this count as used.
pub const SPARSITY_CUTOFF: f64 = 0.01;

/// The online networks of a checkpoint with the config that trained them.
pub struct LoadedRun {
    pub config: RunConfig,
    pub config_hash: String,
    pub actor: ModulePolicy,
    pub q1: ModulePolicy,
    pub q2: ModulePolicy,
    pub env_steps: u64,
}

/// One deterministic decision with the paths of all three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub task: usize,
    pub step: usize,
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub q: [f64; 2],
    pub masks: StoredMasks,
    pub actor_probs: Vec<Vec<f64>>,
    pub effective_modules: Vec<usize>,
}

pub fn load_run(path: &Path) -> anyhow::Result<LoadedRun> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let config = RunConfig::from_toml(&ck.manifest.config).context("config stored in the checkpoint")?;
    let mut rng = config.stream("init");
    let mut actor = ModulePolicy::new(ck.manifest.shape.clone(), HeadKind::Actor, &mut rng);
    let mut q1 = ModulePolicy::new(ck.manifest.shape.clone(), HeadKind::Critic, &mut rng);
    let mut q2 = q1.clone();
    ck.load_store("actor", actor.params_mut())?;
    ck.load_store("q1", q1.params_mut())?;
    ck.load_store("q2", q2.params_mut())?;
    Ok(LoadedRun {
        config,
        config_hash: ck.manifest.config_hash,
        actor,
        q1,
        q2,
        env_steps: ck.manifest.env_steps,
    })
}

impl LoadedRun {
    fn task_index(&self, task: &str) -> anyhow::Result<usize> {
        let suite = &self.config.suite;
        if let Some(i) = suite.iter().position(|t| t.name == task) {
            return Ok(i);
        }
        if let Ok(i) = task.parse::<usize>() {
            if i < suite.len() {
                return Ok(i);
            }
        }
        let valid: Vec<String> = suite
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i} ({})", t.name))
            .collect();
        Err(UsageError(format!(
            "unknown task {task:?}; valid task ids are {}",
            valid.join(", ")
        ))
        .into())
    }

    fn rngs(&self, purpose: &str) -> Vec<ChaCha8Rng> {
        (0..self.config.suite.len())
            .map(|t| self.config.stream(&format!("{purpose}/{t}")))
            .collect()
    }

    fn decide(&self, obs: &[f64], task: usize) -> anyhow::Result<RolloutOutput> {
        Ok(deterministic_masks(
            &self.actor,
            obs,
            task,
            self.config.sac.routing,
            self.config.sac.k,
        )?)
    }

    /// Deterministic rollouts of `task` until `samples` decisions are made,
    /// starting a new episode whenever one ends.
    fn visit(
        &self,
        task: usize,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> anyhow::Result<Vec<(Vec<f64>, RolloutOutput)>> {
        let spec = self.config.suite[task].clone();
        let a_dim = self.actor.shape().action_dim;
        let mut env = Env::new(spec, rng);
        let mut out = Vec::with_capacity(samples);
        while out.len() < samples {
            let obs = env.observation();
            let dec = self.decide(&obs, task)?;
            let step = env.step(&mean_action(&dec.head, a_dim));
            out.push((obs, dec));
            match step {
                Ok(s) if !s.done => {}
                _ => {
                    env.reset(rng);
                }
            }
        }
        Ok(out)
    }

    /// Per-decision routing record over `samples` deterministic steps per task.
    pub fn trace(&self, samples: usize) -> anyhow::Result<Vec<RoutingTrace>> {
        let n = self.actor.n_modules();
        let a_dim = self.actor.shape().action_dim;
        let (function, k) = (self.config.sac.routing, self.config.sac.k);
        let mut rngs = self.rngs("trace");
        let mut out = Vec::new();
        for (t, rng) in rngs.iter_mut().enumerate() {
            for (step, (obs, dec)) in self.visit(t, samples, rng)?.into_iter().enumerate() {
                let action = mean_action(&dec.head, a_dim);
                let sa = [obs.as_slice(), action.as_slice()].concat();
                let c1 = deterministic_masks(&self.q1, &sa, t, function, k)?;
                let c2 = deterministic_masks(&self.q2, &sa, t, function, k)?;
                out.push(RoutingTrace {
                    task: t,
                    step,
                    observation: obs,
                    action,
                    q: [c1.head[0], c2.head[0]],
                    effective_modules: effective_modules(&dec.masks, n).into_iter().map(|m| m + 1).collect(),
                    masks: StoredMasks {
                        actor: dec.masks,
                        q1: c1.masks,
                        q2: c2.masks,
                    },
                    actor_probs: dec.probs.per_module,
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, episodes: usize) -> anyhow::Result<Vec<TaskEval>> {
        let mut rngs = self.rngs("eval");
        Ok(evaluate(
            &self.actor,
            &self.config.suite,
            self.config.sac.routing,
            self.config.sac.k,
            episodes,
            &mut rngs,
        )?)
    }

    /// Effective module counts per decision, one entry per task.
    pub fn usage(&self, samples: usize) -> anyhow::Result<Vec<Vec<usize>>> {
        let n = self.actor.n_modules();
        let mut rngs = self.rngs("usage");
        (0..self.config.suite.len())
            .map(|t| {
                Ok(self
                    .visit(t, samples, &mut rngs[t])?
                    .iter()
                    .map(|(_, d)| effective_modules(&d.masks, n).len())
                    .collect())
            })
            .collect()
    }

    /// `hist[c]` counts (module, state) pairs with `c` sources above
    /// [`SPARSITY_CUTOFF`], over modules 2..n and all tasks.
    pub fn sparsity(&self, samples: usize) -> anyhow::Result<Vec<u64>> {
        let n = self.actor.n_modules();
        let mut hist = vec![0u64; n];
        let mut rngs = self.rngs("sparsity");
        for (t, rng) in rngs.iter_mut().enumerate() {
            for (_, d) in self.visit(t, samples, rng)? {
                for p in &d.probs.per_module {
                    hist[p.iter().filter(|&&x| x > SPARSITY_CUTOFF).count()] += 1;
                }
            }
        }
        Ok(hist)
    }

    /// The routing graph after `step` deterministic steps of `task`.
    pub fn dot(&self, task: &str, step: usize, state: Option<Vec<f64>>) -> anyhow::Result<String> {
        let t = self.task_index(task)?;
        let obs = match state {
            Some(s) => {
                let want = self.actor.shape().obs_dim;
                if s.len() != want {
                    return Err(UsageError(format!("state has {} values; observations have {want}", s.len())).into());
                }
                s
            }
            None => {
                let mut rng = self.config.stream(&format!("dot/{t}"));
                self.visit(t, step + 1, &mut rng)?.pop().expect("one sample").0
            }
        };
        let dec = self.decide(&obs, t)?;
        Ok(routing_dot(&dec, &self.config.suite[t].name, &self.config_hash))
    }
}

pub fn usage_csv(run: &LoadedRun, counts: &[Vec<usize>]) -> String {
    let n = run.actor.n_modules();
    let mut s = String::from("task-id,task,samples,mean-modules,std-modules");
    for c in 1..=n {
        write!(s, ",count-{c}").unwrap();
    }
    s.push('\n');
    for (t, cs) in counts.iter().enumerate() {
        let (mean, std) = mean_std(cs);
        write!(s, "{t},{},{},{mean},{std}", run.config.suite[t].name, cs.len()).unwrap();
        for c in 1..=n {
            write!(s, ",{}", cs.iter().filter(|&&x| x == c).count()).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn sparsity_csv(hist: &[u64]) -> String {
    let total: u64 = hist.iter().sum();
    let mut s = String::from("sources,modules,percent\n");
    for (c, &m) in hist.iter().enumerate().skip(1) {
        let pct = if total == 0 {
            0.0
        } else {
            100.0 * m as f64 / total as f64
        };
        writeln!(s, "{c},{m},{pct}").unwrap();
    }
    s
}

pub fn eval_csv(run: &LoadedRun, evals: &[TaskEval]) -> String {
    let mut s = String::from("task-id,task,episodes,successes,success-rate\n");
    for e in evals {
        writeln!(
            s,
            "{},{},{},{},{}",
            e.task,
            run.config.suite[e.task].name,
            e.episodes,
            e.successes,
            e.success_rate()
        )
        .unwrap();
    }
    s
}

pub fn eval_table(run: &LoadedRun, evals: &[TaskEval]) -> String {
    let mut s = format!("{:<4} {:<20} {:>8} {:>9}\n", "id", "task", "episodes", "success");
    for e in evals {
        writeln!(
            s,
            "{:<4} {:<20} {:>8} {:>9.3}",
            e.task,
            run.config.suite[e.task].name,
            e.episodes,
            e.success_rate()
        )
        .unwrap();
    }
    if !evals.is_empty() {
        let mean = evals.iter().map(TaskEval::success_rate).sum::<f64>() / evals.len() as f64;
        writeln!(s, "{:<4} {:<20} {:>8} {:>9.3}", "", "mean", "", mean).unwrap();
    }
    s
}

fn mean_std(xs: &[usize]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<usize>() as f64 / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One node per module and one edge per selected source, labelled with its
/// routing probability. Modules the output cannot reach are dashed.
pub fn routing_dot(dec: &RolloutOutput, task: &str, config_hash: &str) -> String {
    let n = dec.masks.n_modules();
    let live = effective_modules(&dec.masks, n);
    let mut s = String::from("digraph routing {\n");
    writeln!(
        s,
        "  label=\"{} | config {}\";",
        escape(task),
        &config_hash[..config_hash.len().min(12)]
    )
    .unwrap();
    s.push_str("  rankdir=BT;\n  node [shape=box];\n");
    for m in 0..n {
        let style = if live.contains(&m) { "solid" } else { "dashed" };
        writeln!(s, "  m{} [label=\"M{}\", style={style}];", m + 1, m + 1).unwrap();
    }
    for i in 1..n {
        for (j, &on) in dec.masks.module(i).iter().enumerate() {
            if on {
                let p = dec.probs.module(i)[j];
                let style = if live.contains(&i) { "solid" } else { "dashed" };
                writeln!(
                    s,
                    "  m{} -> m{} [weight=\"{p:.2}\", label=\"{p:.2}\", style={style}];",
                    j + 1,
                    i + 1
                )
                .unwrap();
            }
        }
    }
    s.push_str("}\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
