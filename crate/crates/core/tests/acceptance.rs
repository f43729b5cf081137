//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) before asserting.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use d2r::cli::analyze::load_run;
use d2r::cli::{train, RunConfig};
use d2r::diffcore::{gradient_check_report, Bound, GradCheckReport, Matrix, NodeId, Tape, TapeError};
use d2r::envsuite::{ACTION_DIM, OBS_DIM};
use d2r::modnet::checkpoint::Checkpoint;
use d2r::modnet::{is_suitable, Blocking, HeadKind, ModnetError, ModulePolicy, PolicyShape};
use d2r::routing::{
    effective_modules, mask_softmax, route_balance_temperatures, sample_k_mask, softmax, topk_mask, RouteTemperature,
    RoutingFunction, RoutingMask,
};
use d2r::sacmt::{
    actor_loss, alpha_loss, critic_loss, standard_normal, task_loss_weights, ActorBatch, BoundNet, CriticBatch,
    ReplayBuffer, ResRoutingMode, SacConfig, SacError, StoredMasks, Trainer, Transition,
};

fn report(criterion: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion}: {verdict} ({})", detail.as_ref());
}

fn tape_err(e: SacError) -> TapeError {
    match e {
        SacError::Tape(t) => t,
        SacError::Modnet(ModnetError::Tape(t)) => t,
        other => panic!("{other}"),
    }
}

fn shape(n: usize, width: usize, encoder: usize, n_tasks: usize) -> PolicyShape {
    PolicyShape {
        n_modules: n,
        module_width: width,
        encoder_widths: vec![encoder],
        routing_hidden: vec![width.min(8)],
        obs_dim: OBS_DIM,
        action_dim: ACTION_DIM,
        n_tasks,
        route_on_state: true,
    }
}

fn random_masks<R: Rng>(n: usize, k: usize, rng: &mut R) -> RoutingMask {
    RoutingMask {
        per_module: (1..n)
            .map(|i| {
                let z: Vec<f64> = (0..i).map(|_| rng.random_range(-2.0..2.0)).collect();
                topk_mask(&z, k).unwrap()
            })
            .collect(),
    }
}

fn sac_cfg() -> SacConfig {
    SacConfig {
        batch_per_task: 2,
        ..SacConfig::default()
    }
}

/// Draws configurations until one is far enough from every relu kink for
/// finite differences to be meaningful.
fn kink_safe_check(mut attempt: impl FnMut(u64) -> GradCheckReport) -> GradCheckReport {
    for seed in 0..20 {
        let r = attempt(seed);
        if r.kink_safe(1e-6) {
            return r;
        }
    }
    panic!("no kink-safe configuration in 20 draws");
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for n in [3usize, 4, 5] {
        // actor loss
        let r = kink_safe_check(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * n as u64 + s);
            let width = rng.random_range(4..=32);
            let sh = shape(n, width, rng.random_range(4..=32), 3);
            let trainer = Trainer::new(&sh, sac_cfg(), &mut rng);
            let rows = 3;
            let states = standard_normal(rows, OBS_DIM, &mut rng).map(|v| 0.5 * v);
            let tasks: Vec<usize> = (0..rows).collect();
            let am: Vec<RoutingMask> = (0..rows).map(|_| random_masks(n, 2, &mut rng)).collect();
            let q1m: Vec<RoutingMask> = (0..rows).map(|_| random_masks(n, 2, &mut rng)).collect();
            let q2m: Vec<RoutingMask> = (0..rows).map(|_| random_masks(n, 2, &mut rng)).collect();
            let alphas = [0.2, 0.5, 1.1];
            let batch = ActorBatch {
                states,
                tasks,
                actor_masks: &am,
                q1_masks: &q1m,
                q2_masks: &q2m,
                noise: standard_normal(rows, ACTION_DIM, &mut rng),
                row_alphas: alphas.to_vec(),
                blocking: Blocking::Rsg,
                function: RoutingFunction::Samplek,
            };
            let weights = task_loss_weights(&alphas);
            let nets = &trainer.nets;
            gradient_check_report(
                |t, p| {
                    let ba = Bound::from_nodes(p.to_vec());
                    let b1 = nets.q1.params().bind_copies(t);
                    let b2 = nets.q2.params().bind_copies(t);
                    let out = actor_loss(
                        t,
                        BoundNet {
                            net: &nets.actor,
                            bound: &ba,
                        },
                        BoundNet {
                            net: &nets.q1,
                            bound: &b1,
                        },
                        BoundNet {
                            net: &nets.q2,
                            bound: &b2,
                        },
                        &batch,
                        &weights,
                        None,
                    )
                    .map_err(tape_err)?;
                    Ok(out.loss.total.expect("every task included"))
                },
                nets.actor.params().tensors(),
                1e-6,
            )
            .unwrap()
        });
        worst = worst.max(r.max_rel_error);
        checked += r.entries;

        // critic loss, both critics at once
        let r = kink_safe_check(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(200 * n as u64 + s);
            let width = rng.random_range(4..=32);
            let sh = shape(n, width, rng.random_range(4..=32), 2);
            let trainer = Trainer::new(&sh, sac_cfg(), &mut rng);
            let rows = 4;
            let states = standard_normal(rows, OBS_DIM, &mut rng).map(|v| 0.5 * v);
            let actions = standard_normal(rows, ACTION_DIM, &mut rng).map(f64::tanh);
            let inputs = Matrix::from_rows(
                &(0..rows)
                    .map(|r| [states.row(r), actions.row(r)].concat())
                    .collect::<Vec<_>>(),
            );
            let q1m: Vec<RoutingMask> = (0..rows).map(|_| random_masks(n, 2, &mut rng)).collect();
            let q2m: Vec<RoutingMask> = (0..rows).map(|_| random_masks(n, 2, &mut rng)).collect();
            let batch = CriticBatch {
                inputs,
                tasks: vec![0, 1, 0, 1],
                q1_masks: &q1m,
                q2_masks: &q2m,
                targets: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
                blocking: Blocking::Rsg,
                function: RoutingFunction::Samplek,
            };
            let nets = &trainer.nets;
            let n1 = nets.q1.params().len();
            let mut point = nets.q1.params().tensors().to_vec();
            point.extend_from_slice(nets.q2.params().tensors());
            gradient_check_report(
                |t, p| {
                    let b1 = Bound::from_nodes(p[..n1].to_vec());
                    let b2 = Bound::from_nodes(p[n1..].to_vec());
                    let out = critic_loss(
                        t,
                        BoundNet {
                            net: &nets.q1,
                            bound: &b1,
                        },
                        BoundNet {
                            net: &nets.q2,
                            bound: &b2,
                        },
                        &batch,
                        &[0.7, 0.3],
                        None,
                    )
                    .map_err(tape_err)?;
                    Ok(out.total.expect("every task included"))
                },
                &point,
                1e-6,
            )
            .unwrap()
        });
        worst = worst.max(r.max_rel_error);
        checked += r.entries;
    }
    // temperature loss
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let log_alpha = Matrix::column(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
    let tasks = [0, 1, 2, 3, 1, 2];
    let log_probs: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
    let r = gradient_check_report(
        |t, p| alpha_loss(t, p[0], &tasks, &log_probs, -2.0).map_err(tape_err),
        &[log_alpha],
        1e-6,
    )
    .unwrap();
    worst = worst.max(r.max_rel_error);
    checked += r.entries;

    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        1,
        pass,
        format!(
            "max rel error {worst:.2e} over {checked} entries, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn force_logits(policy: &mut ModulePolicy, i: usize, z: &[f64]) {
    let last = *policy.routing_network().routers[i - 1].layers.last().unwrap();
    let w = policy.params_mut().get_mut(last.weight);
    *w = Matrix::zeros(w.rows(), w.cols());
    *policy.params_mut().get_mut(last.bias) = Matrix::row_vector(z);
}

fn head_loss(tape: &mut Tape<'_>, head: NodeId) -> Result<NodeId, TapeError> {
    let sq = tape.mul(head, head)?;
    let t = tape.tanh(head)?;
    let s = tape.add(sq, t)?;
    tape.mean(s)
}

#[test]
fn criterion_2_rsg_semantics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut forward_exact = true;
    for n in [3, 4, 5, 8] {
        let policy = ModulePolicy::new(shape(n, 8, 8, 3), HeadKind::Actor, &mut rng);
        let rows = 6;
        let x = standard_normal(rows, OBS_DIM, &mut rng);
        let tasks: Vec<usize> = (0..rows).map(|r| r % 3).collect();
        let masks: Vec<RoutingMask> = (0..rows).map(|_| random_masks(n, 2, &mut rng)).collect();
        for blocking in [Blocking::None, Blocking::Rsg, Blocking::Sg] {
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape, true);
            let xi = tape.constant(x.clone());
            let out = policy
                .forward_resrouting(
                    &mut tape,
                    &bound,
                    xi,
                    &tasks,
                    &masks,
                    RoutingFunction::Samplek,
                    blocking,
                )
                .unwrap();
            for r in 0..rows {
                let single = policy
                    .forward_rollout(x.row(r), tasks[r], &masks[r], RoutingFunction::Samplek)
                    .unwrap();
                forward_exact &= tape.value(out.head).row(r) == single.head.as_slice();
            }
        }
    }

    // module 3 (index 2) feeds the output with unmasked weight 0.1 < 1/4
    let mut policy = ModulePolicy::new(shape(4, 6, 6, 3), HeadKind::Actor, &mut rng);
    let z = [4.5f64.ln(), 4.5f64.ln(), 0.0];
    force_logits(&mut policy, 3, &z);
    assert!(!is_suitable(&z, 3, 2));
    let x = standard_normal(3, OBS_DIM, &mut rng);
    let tasks = vec![0, 1, 2];
    let masks = vec![
        RoutingMask {
            per_module: vec![vec![true], vec![true, true], vec![false, true, true]],
        };
        3
    ];
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, true);
    let xi = tape.constant(x.clone());
    let out = policy
        .forward_resrouting(
            &mut tape,
            &bound,
            xi,
            &tasks,
            &masks,
            RoutingFunction::Samplek,
            Blocking::Rsg,
        )
        .unwrap();
    let loss = head_loss(&mut tape, out.head).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = policy.params().grads(&bound, &g);
    let blocked_zero = policy
        .module_params(2)
        .iter()
        .all(|p| grads[p.0].data().iter().all(|&v| v == 0.0));
    let shortcut_live = grads[policy.module_params(1)[0].0].max_abs() > 0.0;

    let oracle = gradient_check_report(
        |t, p| {
            let bound = Bound::from_nodes(p.to_vec());
            let xi = t.constant(x.clone());
            let out = policy
                .forward_resrouting(t, &bound, xi, &tasks, &masks, RoutingFunction::Samplek, Blocking::Rsg)
                .map_err(|e| match e {
                    ModnetError::Tape(e) => e,
                    other => panic!("{other}"),
                })?;
            head_loss(t, out.head)
        },
        policy.params().tensors(),
        1e-6,
    )
    .unwrap();

    let elapsed = start.elapsed();
    let pass = forward_exact
        && blocked_zero
        && shortcut_live
        && oracle.kink_safe(1e-6)
        && oracle.max_rel_error < 1e-4
        && elapsed < Duration::from_secs(60);
    report(
        2,
        pass,
        format!(
            "forward exact {forward_exact}, blocked grads zero {blocked_zero}, shortcut grads vs frozen oracle {:.2e}, {:.1}s",
            oracle.max_rel_error,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_routing_kernels() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut softmax_ok = true;
    let mut counts_ok = true;
    for _ in 0..20_000 {
        let len = rng.random_range(1..=10);
        let z: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
        let fix = rng.random_range(0..len);
        d[fix] = true;
        let p = mask_softmax(&z, &d).unwrap();
        softmax_ok &= p.iter().zip(&d).all(|(&v, &m)| m || v == 0.0);
        softmax_ok &= (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9;

        let k = rng.random_range(1..=5);
        let tau = RouteTemperature::new(rng.random_range(0.05..5.0)).unwrap();
        let want = k.min(len);
        counts_ok &= topk_mask(&z, k).unwrap().iter().filter(|&&b| b).count() == want;
        counts_ok &= sample_k_mask(&z, k, tau, &mut rng)
            .unwrap()
            .iter()
            .filter(|&&b| b)
            .count()
            == want;
    }

    // first draw of sample-k is categorical over softmax(z/τ)
    let draws = 100_000;
    let mut freq_ok = true;
    let mut worst_sigma = 0.0f64;
    for (z, tau) in [
        (vec![0.3, -1.0, 1.2, 0.0, 0.5], 1.0),
        (vec![2.0, 1.0, 0.0], 0.5),
        (vec![0.1, 0.2], 3.0),
    ] {
        let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
        let p = softmax(&scaled);
        let mut hits = vec![0u64; z.len()];
        let t = RouteTemperature::new(tau).unwrap();
        for _ in 0..draws {
            let m = sample_k_mask(&z, 1, t, &mut rng).unwrap();
            hits[m.iter().position(|&b| b).unwrap()] += 1;
        }
        for (h, p) in hits.iter().zip(&p) {
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            let dev = (*h as f64 / draws as f64 - p).abs() / sigma;
            worst_sigma = worst_sigma.max(dev);
            freq_ok &= dev <= 3.0;
        }
    }

    // cold temperature agrees with top-k
    let cold = RouteTemperature::new(1e-3).unwrap();
    let trials = 100_000;
    let mut agree = 0;
    for _ in 0..trials {
        let len = rng.random_range(2..=8);
        let mut z: Vec<f64> = (0..len).map(|i| i as f64 * 0.1).collect();
        for i in (1..len).rev() {
            let j = rng.random_range(0..=i);
            z.swap(i, j);
        }
        let k = rng.random_range(1..len);
        if sample_k_mask(&z, k, cold, &mut rng).unwrap() == topk_mask(&z, k).unwrap() {
            agree += 1;
        }
    }
    let agreement = agree as f64 / trials as f64;

    let elapsed = start.elapsed();
    let pass = softmax_ok && counts_ok && freq_ok && agreement >= 0.999 && elapsed < Duration::from_secs(120);
    report(
        3,
        pass,
        format!(
            "mask softmax {softmax_ok}, source counts {counts_ok}, worst frequency deviation {worst_sigma:.2}σ, cold agreement {:.4}, {:.1}s",
            agreement,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Reachability by depth-first search from the output over selected edges.
fn reachable_oracle(masks: &RoutingMask, n: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![n - 1];
    while let Some(i) = stack.pop() {
        if !seen.insert(i) {
            continue;
        }
        if i > 0 {
            for (j, &on) in masks.module(i).iter().enumerate() {
                if on {
                    stack.push(j);
                }
            }
        }
    }
    seen
}

#[test]
fn criterion_4_skipping_soundness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    let sets = 10_000;
    for _ in 0..sets {
        let n = rng.random_range(2..=8);
        let masks = RoutingMask {
            per_module: (1..n)
                .map(|i| {
                    let mut d: Vec<bool> = (0..i).map(|_| rng.random_bool(0.4)).collect();
                    let j = rng.random_range(0..i);
                    d[j] = true;
                    d
                })
                .collect(),
        };
        if effective_modules(&masks, n) == reachable_oracle(&masks, n) {
            agree += 1;
        }
    }

    let mut identical = 0;
    let inputs = 1_000;
    let policies: Vec<ModulePolicy> = (2..=8)
        .map(|n| ModulePolicy::new(shape(n, 16, 16, 4), HeadKind::Actor, &mut rng))
        .collect();
    for _ in 0..inputs {
        let policy = &policies[rng.random_range(0..policies.len())];
        let n = policy.n_modules();
        let k = rng.random_range(1..=3);
        let masks = random_masks(n, k, &mut rng);
        let x: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let task = rng.random_range(0..4);
        let skipped = policy
            .forward_rollout(&x, task, &masks, RoutingFunction::Samplek)
            .unwrap();
        let full = policy
            .forward_all_modules(&x, task, &masks, RoutingFunction::Samplek)
            .unwrap();
        if skipped.head == full.head {
            identical += 1;
        }
    }

    let elapsed = start.elapsed();
    let pass = agree == sets && identical == inputs && elapsed < Duration::from_secs(120);
    report(
        4,
        pass,
        format!(
            "reachability {agree}/{sets}, bit-identical forwards {identical}/{inputs}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_route_balancing() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;

    let uniform = route_balance_temperatures(&[0.3; 5]).unwrap();
    ok &= uniform.iter().all(|&t| (t - 0.2).abs() < 1e-12);

    for _ in 0..200 {
        let len = rng.random_range(2..8);
        let alphas: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..10.0)).collect();
        let c = rng.random_range(1e-2..100.0);
        let a = route_balance_temperatures(&alphas).unwrap();
        let scaled: Vec<f64> = alphas.iter().map(|x| x * c).collect();
        let b = route_balance_temperatures(&scaled).unwrap();
        ok &= a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        ok &= (a.iter().sum::<f64>() - 1.0).abs() < 1e-12;

        // raising one α while the others stay put lowers its τ
        let mut bigger = alphas.clone();
        bigger[0] *= 1.5;
        ok &= route_balance_temperatures(&bigger).unwrap()[0] < a[0];

        let w = task_loss_weights(&alphas);
        ok &= (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    }

    let w = task_loss_weights(&[0.0, 2.0f64.ln()]);
    let tau = route_balance_temperatures(&[1.0, 2.0]).unwrap();
    let hand_ok = (w[0] - 2.0 / 3.0).abs() < 1e-12
        && (w[1] - 1.0 / 3.0).abs() < 1e-12
        && (tau[0] - 2.0 / 3.0).abs() < 1e-12
        && (tau[1] - 1.0 / 3.0).abs() < 1e-12;

    let elapsed = start.elapsed();
    let pass = ok && hand_ok && elapsed < Duration::from_secs(1);
    report(
        5,
        pass,
        format!(
            "uniformity/scale/monotonicity/normalisation {ok}, hand case w = [{:.15}, {:.15}], {:.3}s",
            w[0],
            w[1],
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_replay_and_serialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let masks = |rng: &mut ChaCha8Rng| StoredMasks {
        actor: random_masks(5, 2, rng),
        q1: random_masks(5, 2, rng),
        q2: random_masks(5, 2, rng),
    };
    let transitions: Vec<Transition> = (0..50)
        .map(|i| Transition {
            state: (0..OBS_DIM).map(|_| rng.random::<f64>() - 0.5).collect(),
            action: (0..ACTION_DIM).map(|_| rng.random::<f64>() - 0.5).collect(),
            reward: rng.random::<f64>() * 1e-7 - 3.0,
            next_state: (0..OBS_DIM).map(|_| rng.random::<f64>()).collect(),
            done: i % 7 == 0,
            task: i % 2,
            masks: masks(&mut rng),
            next_masks: masks(&mut rng),
        })
        .collect();
    let mut buf = ReplayBuffer::new(2, 100);
    for t in &transitions {
        buf.push(t.clone());
    }
    let sampled = buf.sample(25, &mut rng).unwrap();
    let replay_ok = sampled.iter().all(|s| transitions.contains(s))
        && transitions.iter().all(|t| {
            let back: Transition = serde_json::from_str(&serde_json::to_string(t).unwrap()).unwrap();
            &back == t
        });

    // checkpoint round trip after a few real updates
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(13);
    let summary = train(&cfg, dir.path(), false).unwrap();
    let ck = Checkpoint::load(&summary.checkpoint).unwrap();
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let bits_equal = back.tensors.len() == ck.tensors.len()
        && back.tensors.iter().zip(&ck.tensors).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && back.manifest == ck.manifest;
    let run = load_run(&summary.checkpoint).unwrap();
    let actor_equal = run.actor.params().tensors()
        == ck
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("actor/"))
            .map(|(_, t)| t.clone())
            .collect::<Vec<_>>()
            .as_slice();

    // identical metrics from two runs with one master seed
    let other = tempfile::tempdir().unwrap();
    let again = train(&cfg, other.path(), false).unwrap();
    let a = std::fs::read_to_string(&summary.metrics).unwrap();
    let b = std::fs::read_to_string(&again.metrics).unwrap();
    let csv_identical = a == b && a.lines().count() > 1;

    let pass = replay_ok && bits_equal && actor_equal && csv_identical;
    report(
        9,
        pass,
        format!(
            "transitions {replay_ok}, checkpoint bit-exact {bits_equal}, reloaded actor {actor_equal}, same-seed CSVs identical {csv_identical}"
        ),
    );
    assert!(pass);
}

fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.network.n_modules = 4;
    cfg.network.module_width = 8;
    cfg.network.encoder_widths = vec![8];
    cfg.network.routing_hidden = vec![8];
    cfg.sac.batch_per_task = 8;
    cfg.training.total_env_steps = 400;
    cfg.training.warmup_env_steps = 100;
    cfg.training.eval_interval = 200;
    cfg.training.eval_episodes = 2;
    cfg.training.buffer_capacity = 2000;
    for t in &mut cfg.suite {
        t.horizon = 50;
    }
    cfg
}

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const FINAL_EVAL_EPISODES: usize = 100;
const USAGE_SAMPLES: usize = 1000;

/// One end-to-end training run on the toy suite.
struct DeskRun {
    seed: u64,
    elapsed: Duration,
    /// Mean success of each periodic evaluation.
    curve: Vec<f64>,
    /// Mean success of the final policy over [`FINAL_EVAL_EPISODES`] per task.
    final_success: f64,
    per_task: Vec<f64>,
    mean_modules: Vec<f64>,
    task_names: Vec<String>,
}

impl DeskRun {
    fn task_modules(&self, name: &str) -> f64 {
        let t = self.task_names.iter().position(|n| n == name).expect("task in suite");
        self.mean_modules[t]
    }
}

fn desk_config(seed: u64, resrouting: ResRoutingMode) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.sac.resrouting = resrouting;
    cfg
}

fn desk_dir(label: &str, seed: u64) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(format!("{label}-seed{seed}"))
}

fn periodic_means(metrics: &str, n_tasks: usize) -> Vec<f64> {
    let rows: Vec<Vec<&str>> = metrics.lines().skip(1).map(|l| l.split(',').collect()).collect();
    rows.chunks(n_tasks)
        .map(|c| c.iter().map(|r| r[2].parse::<f64>().unwrap()).sum::<f64>() / n_tasks as f64)
        .collect()
}

fn desk_run(label: &str, seed: u64, resrouting: ResRoutingMode) -> DeskRun {
    let cfg = desk_config(seed, resrouting);
    let dir = desk_dir(label, seed);
    let _ = std::fs::remove_dir_all(&dir);
    let start = Instant::now();
    let summary = train(&cfg, &dir, false).unwrap();
    let elapsed = start.elapsed();
    let curve = periodic_means(&std::fs::read_to_string(&summary.metrics).unwrap(), cfg.suite.len());
    let run = load_run(&summary.checkpoint).unwrap();
    let evals = run.evaluate(FINAL_EVAL_EPISODES).unwrap();
    let per_task: Vec<f64> = evals.iter().map(|e| e.success_rate()).collect();
    let final_success = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let mean_modules = run
        .usage(USAGE_SAMPLES)
        .unwrap()
        .iter()
        .map(|c| c.iter().sum::<usize>() as f64 / c.len() as f64)
        .collect();
    let r = DeskRun {
        seed,
        elapsed,
        curve,
        final_success,
        per_task,
        mean_modules,
        task_names: cfg.suite.iter().map(|t| t.name.clone()).collect(),
    };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "  {label} seed {seed}: {:.0}s, final success {:.3} {:?}, best periodic {:.3}, mean modules {:?}",
        r.elapsed.as_secs_f64(),
        r.final_success,
        r.per_task,
        r.curve.iter().cloned().fold(0.0, f64::max),
        r.mean_modules
            .iter()
            .map(|m| (m * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    r
}

/// The D2R runs shared by criteria 6, 7 and 8, trained one after another.
fn d2r_runs() -> &'static [DeskRun] {
    static RUNS: OnceLock<Vec<DeskRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        DESK_SEEDS
            .iter()
            .map(|&s| desk_run("d2r", s, ResRoutingMode::Rsg))
            .collect()
    })
}

#[test]
fn criterion_6_end_to_end_training() {
    let runs = d2r_runs();
    let solved: Vec<u64> = runs
        .iter()
        .filter(|r| r.final_success >= 0.9 && r.elapsed < DESK_BUDGET)
        .map(|r| r.seed)
        .collect();
    let pass = solved.len() >= 2;
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {} {:.3} in {:.1} min",
                r.seed,
                r.final_success,
                r.elapsed.as_secs_f64() / 60.0
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    report(
        6,
        pass,
        format!("{detail}; {} of 3 seeds reach 0.9 within budget", solved.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_difficulty_routing_trend() {
    let runs = d2r_runs();
    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| (r.task_modules("two-stage-fetch"), r.task_modules("reach-fixed")))
        .collect();
    let agree = pairs.iter().filter(|(hard, easy)| hard >= easy).count();
    let pass = agree >= 2;
    let detail = pairs
        .iter()
        .zip(runs)
        .map(|((h, e), r)| format!("seed {} fetch {h:.2} vs reach {e:.2}", r.seed))
        .collect::<Vec<_>>()
        .join(", ");
    report(7, pass, format!("{detail}; {agree} of 3 seeds"));
    assert!(pass);
}

/// Trend report only: the verdict is printed but never fails the suite.
#[test]
fn criterion_8_ablation_direction() {
    let full = d2r_runs();
    let ablated: Vec<DeskRun> = DESK_SEEDS
        .iter()
        .map(|&s| desk_run("no-resrouting", s, ResRoutingMode::Off))
        .collect();
    let wins = full
        .iter()
        .zip(&ablated)
        .filter(|(f, a)| f.final_success >= a.final_success)
        .count();
    let detail = full
        .iter()
        .zip(&ablated)
        .map(|(f, a)| format!("seed {} {:.3} vs {:.3}", f.seed, f.final_success, a.final_success))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        8,
        wins >= 2,
        format!("D2R vs w/o ResRouting: {detail}; D2R ahead or level on {wins} of 3 (trend report)"),
    );
}
