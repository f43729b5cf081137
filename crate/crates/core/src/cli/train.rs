//! The training loop and the artifacts it leaves in the run directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::UsageError;
use crate::diffcore::{Adam, Matrix};
use crate::modnet::checkpoint::{Checkpoint, Manifest};
use crate::sacmt::{evaluate, Collector, ReplayBuffer, TaskEval, TrainOutcome, Trainer};

pub const METRICS_HEADER: &str = "step,task-id,success-rate,actor-loss,critic-loss,alpha,tau,w,mean-effective-modules";

pub const CHECKPOINT_FILE: &str = "checkpoint.d2r";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";

/// Written next to the metrics so every artifact in the directory can be
/// traced to one config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub crate_version: String,
    pub env_steps: u64,
    pub train_steps: u64,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub train_steps: u64,
    pub last_eval: Vec<TaskEval>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Mean losses per task since the last evaluation.
#[derive(Clone, Debug)]
struct LossAccumulator {
    actor: Vec<f64>,
    critic: Vec<f64>,
    count: Vec<u64>,
}

impl LossAccumulator {
    fn new(n: usize) -> Self {
        Self {
            actor: vec![0.0; n],
            critic: vec![0.0; n],
            count: vec![0; n],
        }
    }

    fn mean(&self, t: usize) -> (f64, f64) {
        if self.count[t] == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let c = self.count[t] as f64;
            (self.actor[t] / c, self.critic[t] / c)
        }
    }
}

pub fn trainer_checkpoint(trainer: &Trainer, cfg: &RunConfig, env_steps: u64) -> Checkpoint {
    let mut manifest = Manifest::new(trainer.shape().clone(), cfg.sac.k, cfg.canonical(), cfg.hash());
    manifest.env_steps = env_steps;
    manifest.train_steps = trainer.train_steps;
    let mut ck = Checkpoint::new(manifest);
    for (prefix, store) in trainer.nets.stores() {
        ck.push_store(prefix, store);
    }
    ck.push_store("temperature", trainer.temps.store());
    for (name, opt) in [
        ("actor", &trainer.actor_opt),
        ("q1", &trainer.q1_opt),
        ("q2", &trainer.q2_opt),
        ("temperature", trainer.temps.optimizer()),
    ] {
        push_adam(&mut ck, name, opt);
    }
    ck
}

fn push_adam(ck: &mut Checkpoint, name: &str, opt: &Adam) {
    let (m, v) = opt.moments();
    ck.push(format!("adam/{name}/step"), Matrix::scalar(opt.steps_taken() as f64));
    for (i, (m, v)) in m.iter().zip(v).enumerate() {
        ck.push(format!("adam/{name}/m{i}"), m.clone());
        ck.push(format!("adam/{name}/v{i}"), v.clone());
    }
}

fn restore_adam(ck: &Checkpoint, name: &str, opt: &mut Adam) -> anyhow::Result<()> {
    let n = opt.moments().0.len();
    let step = ck.get(&format!("adam/{name}/step"))?.item() as u64;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let mi = ck.get(&format!("adam/{name}/m{i}"))?;
        if mi.shape() != opt.moments().0[i].shape() {
            bail!("optimiser state adam/{name}/m{i} has the wrong shape");
        }
        m.push(mi.clone());
        v.push(ck.get(&format!("adam/{name}/v{i}"))?.clone());
    }
    opt.restore(step, m, v);
    Ok(())
}

pub fn restore_trainer(ck: &Checkpoint, trainer: &mut Trainer) -> anyhow::Result<()> {
    for (prefix, store) in trainer.nets.stores_mut() {
        ck.load_store(prefix, store)?;
    }
    ck.load_store("temperature", trainer.temps.store_mut())?;
    restore_adam(ck, "actor", &mut trainer.actor_opt)?;
    restore_adam(ck, "q1", &mut trainer.q1_opt)?;
    restore_adam(ck, "q2", &mut trainer.q2_opt)?;
    restore_adam(ck, "temperature", trainer.temps.optimizer_mut())?;
    trainer.train_steps = ck.manifest.train_steps;
    Ok(())
}

fn write_record(dir: &Path, cfg: &RunConfig, env_steps: u64, train_steps: u64, finished: bool) -> anyhow::Result<()> {
    let rec = RunRecord {
        config_hash: cfg.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        env_steps,
        train_steps,
        finished,
    };
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

/// Drops metric rows logged after `step`, which a resumed run will redo.
fn truncate_metrics(path: &Path, step: u64) -> anyhow::Result<()> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut kept = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != METRICS_HEADER {
                bail!("{} does not have the expected header", path.display());
            }
            kept.push(line);
            continue;
        }
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("malformed metrics row {}: {line:?}", i + 1))?;
        if row_step <= step {
            kept.push(line);
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

fn save_checkpoint(dir: &Path, trainer: &Trainer, cfg: &RunConfig, env_steps: u64) -> anyhow::Result<PathBuf> {
    let path = dir.join(CHECKPOINT_FILE);
    trainer_checkpoint(trainer, cfg, env_steps).save(&path)?;
    write_record(dir, cfg, env_steps, trainer.train_steps, false)?;
    debug!("checkpoint written at {env_steps} env steps");
    Ok(path)
}

/// Deterministic evaluation on the fixed per-task evaluation streams.
pub fn run_eval(trainer: &Trainer, cfg: &RunConfig, episodes: usize) -> anyhow::Result<Vec<TaskEval>> {
    let mut rngs: Vec<_> = (0..cfg.suite.len()).map(|t| cfg.stream(&format!("eval/{t}"))).collect();
    Ok(evaluate(
        &trainer.nets.actor,
        &cfg.suite,
        cfg.sac.routing,
        cfg.sac.k,
        episodes,
        &mut rngs,
    )?)
}

/// Trains until `training.total_env_steps` (rounded up to whole vectorised
/// steps), evaluating and checkpointing on the configured cadence.
pub fn train(cfg: &RunConfig, dir: &Path, resume: bool) -> anyhow::Result<TrainSummary> {
    train_until(cfg, dir, resume, cfg.training.total_env_steps)
}

/// Like [`train`] but stops once `stop_at` env steps are done, leaving a
/// checkpoint that a later resume picks up.
pub fn train_until(cfg: &RunConfig, dir: &Path, resume: bool, stop_at: u64) -> anyhow::Result<TrainSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let n_tasks = cfg.suite.len();
    let shape = cfg.shape();
    let tr = &cfg.training;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);

    let mut trainer = Trainer::new(&shape, cfg.sac.clone(), &mut cfg.stream("init"));
    let mut env_steps = 0u64;
    if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.manifest.config_hash != cfg.hash() {
            return Err(UsageError(format!(
                "checkpoint in {} was written by config {}, not {}",
                dir.display(),
                ck.manifest.config_hash,
                cfg.hash()
            ))
            .into());
        }
        restore_trainer(&ck, &mut trainer)?;
        env_steps = ck.manifest.env_steps;
        truncate_metrics(&metrics_path, env_steps)?;
        info!("resuming at {env_steps} env steps ({} updates)", trainer.train_steps);
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
    }
    fs::write(dir.join(CONFIG_FILE), cfg.canonical())?;

    // a resumed run draws from streams keyed by its starting point
    let suffix = if env_steps > 0 {
        format!("@{env_steps}")
    } else {
        String::new()
    };
    let env_rngs = (0..n_tasks).map(|t| cfg.stream(&format!("env/{t}{suffix}"))).collect();
    let mut collect_rng = cfg.stream(&format!("collect{suffix}"));
    let mut update_rng = cfg.stream(&format!("update{suffix}"));
    let mut collector = Collector::new(&cfg.suite, env_rngs);
    let mut buffer = ReplayBuffer::new(n_tasks, tr.buffer_capacity);

    let mut metrics = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let mut acc = LossAccumulator::new(n_tasks);
    let mut last_eval = Vec::new();
    let mut last_eval_step = env_steps;
    let mut last_ckpt_step = env_steps;
    let started = Instant::now();

    if env_steps == 0 {
        save_checkpoint(dir, &trainer, cfg, 0)?;
    }
    let stop_at = stop_at.min(tr.total_env_steps);
    while env_steps < stop_at {
        let warm = env_steps < tr.warmup_env_steps;
        for t in collector.collect_step(&trainer, warm, &mut collect_rng)? {
            buffer.push(t);
        }
        env_steps += n_tasks as u64;
        if !warm {
            if let TrainOutcome::Trained(m) = trainer.train_step(&buffer, &mut update_rng)? {
                for (t, tm) in m.per_task.iter().enumerate() {
                    acc.actor[t] += tm.actor_loss;
                    acc.critic[t] += tm.critic_loss;
                    acc.count[t] += 1;
                }
            }
        }
        let at_end = env_steps >= tr.total_env_steps;
        if env_steps / tr.eval_interval > last_eval_step / tr.eval_interval || at_end {
            last_eval = run_eval(&trainer, cfg, tr.eval_episodes)?;
            write_rows(&mut metrics, env_steps, &trainer, &acc, &last_eval)?;
            metrics.flush()?;
            let mean = last_eval.iter().map(TaskEval::success_rate).sum::<f64>() / n_tasks as f64;
            info!(
                "step {env_steps}: mean success {mean:.2} [{}] ({:.0}s)",
                last_eval
                    .iter()
                    .map(|e| format!("{:.2}", e.success_rate()))
                    .collect::<Vec<_>>()
                    .join(" "),
                started.elapsed().as_secs_f64()
            );
            acc = LossAccumulator::new(n_tasks);
            last_eval_step = env_steps;
        }
        if env_steps / tr.checkpoint_interval > last_ckpt_step / tr.checkpoint_interval && env_steps < stop_at {
            save_checkpoint(dir, &trainer, cfg, env_steps)?;
            last_ckpt_step = env_steps;
        }
    }
    metrics.flush()?;
    let checkpoint = save_checkpoint(dir, &trainer, cfg, env_steps)?;
    write_record(
        dir,
        cfg,
        env_steps,
        trainer.train_steps,
        env_steps >= tr.total_env_steps,
    )?;
    Ok(TrainSummary {
        env_steps,
        train_steps: trainer.train_steps,
        last_eval,
        checkpoint,
        metrics: metrics_path,
    })
}

fn write_rows<W: Write>(
    w: &mut W,
    step: u64,
    trainer: &Trainer,
    acc: &LossAccumulator,
    evals: &[TaskEval],
) -> anyhow::Result<()> {
    let cfg = &trainer.cfg;
    let alphas = trainer.temps.alphas();
    let taus = trainer.temps.taus(cfg.route_balancing);
    let weights = trainer.temps.weights(cfg.loss_weighting);
    for e in evals {
        let t = e.task;
        let (al, cl) = acc.mean(t);
        writeln!(
            w,
            "{step},{t},{},{al},{cl},{},{},{},{}",
            e.success_rate(),
            alphas[t],
            taus[t],
            weights[t],
            e.mean_modules()
        )?;
    }
    Ok(())
}
