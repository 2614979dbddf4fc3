//! Dev harness for tuning env fragility and attack constants.
//!
//! Usage: tune key=value ...
//! Keys: dt, theta_limit, force_mag, steps, fake, target, prop, trig_dim,
//!       trig_val, seed, defend (0/1), dataset, epochs

use std::collections::BTreeMap;
use std::time::Instant;

use rts_core::agent::{evaluate_policy, train_agent, AgentConfig, Policy};
use rts_core::backdoor::{apply_trigger, AttackKind, PoisonConfig, Poisoner, Trigger};
use rts_core::defender::{
    calibrate_threshold, collect_rollouts, holdout_losses, train_with_objective, DefenderTrainConfig,
    DualObjective, SingleObjective, StateL2Detector,
};
use rts_core::diffnum::l2_distance;
use rts_core::envs::{make_env, Env, Overrides};
use rts_core::harness::{
    evaluate_matrix, AttackSchedule, EvalArtifacts, MatrixCell, ProtectionCondition,
};

fn main() {
    let mut kv: BTreeMap<String, f64> = BTreeMap::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("args are key=value");
        kv.insert(k.to_string(), v.parse().expect("numeric value"));
    }
    let get = |k: &str, d: f64| kv.get(k).copied().unwrap_or(d);

    let mut overrides = Overrides::new();
    overrides.insert("dt".into(), get("dt", 0.02));
    overrides.insert("theta_limit".into(), get("theta_limit", 0.2095));
    overrides.insert("force_mag".into(), get("force_mag", 10.0));
    overrides.insert("init_bound".into(), get("init_bound", 0.05));
    overrides.insert("x_limit".into(), get("x_limit", 2.4));
    let steps = get("steps", 40_000.0) as usize;
    let fake = get("fake", 10.0) as f32;
    let force = get("force_mag", 10.0) as f32;
    let target = get("target", force as f64) as f32;
    let prop = get("prop", 0.04);
    let trig_dim = get("trig_dim", 2.0) as usize;
    let trig_val = get("trig_val", 1.0) as f32;
    let seed = get("seed", 7.0) as u64;

    let agent_cfg = AgentConfig {
        total_steps: steps,
        actor_lr: get("actor_lr", 1e-3) as f32,
        critic_lr: get("critic_lr", 1e-3) as f32,
        exploration_noise: get("noise", 0.1) as f32,
        ..Default::default()
    };
    let clean_only = get("clean_only", 0.0) > 0.5;
    let make = || make_env("cartpole-continuous", &overrides).unwrap();
    let seeds: Vec<u64> = (0..20).map(|i| 1_000_000 + i * 31).collect();

    let t0 = Instant::now();
    let mut env = make();
    let clean = train_agent(env.as_mut(), &agent_cfg, None, seed).unwrap();
    let clean_evals = evaluate_policy(&clean.policy, env.as_mut(), &seeds).unwrap();
    let clean_mean = mean(clean_evals.iter().map(|e| e.episode_return));
    println!(
        "clean victim: mean return {clean_mean:.1} / 200, mean len {:.1} ({:.0}s)",
        mean(clean_evals.iter().map(|e| e.length as f32)),
        t0.elapsed().as_secs_f64()
    );

    if clean_only {
        return;
    }
    let trigger = Trigger::overwrite(4, &[trig_dim], &[trig_val]).unwrap();
    let poison = PoisonConfig {
        proportion: prop,
        kind: AttackKind::Targeted,
        target_action: vec![target],
        fake_reward: fake,
        injection_start_step: get("inject", (steps / 2) as f64) as u64,
    };
    let poisoner = Poisoner::plan(trigger.clone(), poison, steps as u64, seed).unwrap();
    println!("poisons: {}", poisoner.poison_count());

    let t0 = Instant::now();
    let mut env = make();
    let poisoned = train_agent(env.as_mut(), &agent_cfg, Some(&poisoner), seed).unwrap();
    let pol = &poisoned.policy;
    let pois_evals = evaluate_policy(pol, env.as_mut(), &seeds).unwrap();
    let pois_mean = mean(pois_evals.iter().map(|e| e.episode_return));
    println!(
        "poisoned victim: clean-run mean {pois_mean:.1} (stealth {:.0}%) ({:.0}s)",
        100.0 * pois_mean / clean_mean,
        t0.elapsed().as_secs_f64()
    );

    // Backdoor bind: action distance to target on triggered held-out states.
    let mut bind_dist = 0.0f32;
    let mut n_bind = 0;
    let mut env2 = make();
    for &s in seeds.iter().take(5) {
        let mut state = env2.reset(s);
        loop {
            let trig_state = apply_trigger(&trigger, &state);
            let a = pol.act(&trig_state).unwrap();
            bind_dist += l2_distance(&a, &[target]);
            n_bind += 1;
            let r = env2.step(&pol.act(&state).unwrap()).unwrap();
            state = r.next_state;
            if r.done {
                break;
            }
        }
    }
    println!(
        "backdoor bind: mean |pi(s+d) - target| = {:.3} (threshold {:.1})",
        bind_dist / n_bind as f32,
        0.1 * 2.0 * force
    );

    // Scan failure limits at eval time: dynamics are limit-independent, so a
    // policy trained at one limit can be probed against others cheaply.
    if get("scan", 0.0) > 0.5 {
        for lim in [0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.12] {
            let mut ov = overrides.clone();
            ov.insert("theta_limit".into(), lim);
            let mk = || make_env("cartpole-continuous", &ov).unwrap();
            let mut clean_r = Vec::new();
            for &s in &seeds {
                let mut env = mk();
                let rec = rts_core::harness::run_episode(
                    pol, env.as_mut(), AttackSchedule::disabled(), Some(&trigger), None, s,
                ).unwrap();
                clean_r.push(rec.episode_return);
            }
            let cm = mean(clean_r.iter().copied());
            let mut line = format!("limit {lim:.2}: clean {cm:>5.1}");
            for burst in [1usize, 2] {
                let schedule = AttackSchedule { period: 20, burst, start: 20, enabled: true };
                let mut rets = Vec::new();
                for &s in &seeds {
                    let mut env = mk();
                    let rec = rts_core::harness::run_episode(
                        pol, env.as_mut(), schedule, Some(&trigger), None, s,
                    ).unwrap();
                    rets.push(rec.episode_return);
                }
                let m = mean(rets.iter().copied());
                line += &format!(" | b{burst} {m:>5.1} ({:>3.0}%)", 100.0 * m / cm);
            }
            println!("{line}");
        }
        return;
    }

    // Unprotected attacks.
    for burst in [1usize, 2] {
        let schedule = AttackSchedule {
            period: 20,
            burst,
            start: 20,
            enabled: true,
        };
        let mut rets = Vec::new();
        for &s in &seeds {
            let mut env = make();
            let rec = rts_core::harness::run_episode(
                pol,
                env.as_mut(),
                schedule,
                Some(&trigger),
                None,
                s,
            )
            .unwrap();
            rets.push(rec.episode_return);
        }
        let m = mean(rets.iter().copied());
        println!(
            "unprotected burst-{burst}: mean return {m:.1} ({:.0}% of clean)",
            100.0 * m / clean_mean
        );
    }

    if get("defend", 0.0) > 0.5 {
        let dataset_size = get("dataset", 20_000.0) as usize;
        let epochs = get("epochs", 40.0) as usize;
        let t0 = Instant::now();
        let mut env = make();
        let noise_std = 0.1 * 2.0 * force;
        let ds = collect_rollouts(pol, env.as_mut(), dataset_size, 0.01, noise_std, seed).unwrap();
        let cfg = DefenderTrainConfig {
            epochs,
            ..Default::default()
        };
        let single = train_with_objective(&ds, &SingleObjective, &cfg, seed).unwrap();
        let dual = train_with_objective(
            &ds,
            &DualObjective {
                policy: pol.clone(),
                lambda: 1.0,
            },
            &cfg,
            seed,
        )
        .unwrap();
        let holdout: Vec<&rts_core::defender::RolloutTuple> =
            single.holdout.iter().map(|&i| &ds.tuples[i]).collect();
        let h_single =
            calibrate_threshold(&single.model, &holdout, 0.999, &StateL2Detector).unwrap();
        let h_dual = calibrate_threshold(&dual.model, &holdout, 0.999, &StateL2Detector).unwrap();
        let sl = holdout_losses(&single.model, &ds, &single.holdout, pol).unwrap();
        let dl = holdout_losses(&dual.model, &ds, &dual.holdout, pol).unwrap();
        println!(
            "defenders ({:.0}s): single H={h_single:.4} losses={sl:?} | dual H={h_dual:.4} losses={dl:?}",
            t0.elapsed().as_secs_f64()
        );

        let env = make();
        let artifacts = EvalArtifacts {
            policy: pol,
            env: env.as_ref(),
            trigger: &trigger,
            single: (&single.model, h_single),
            dual: (&dual.model, h_dual),
            metric: &StateL2Detector,
        };
        let mut cells = vec![MatrixCell {
            condition: ProtectionCondition::UnprotectedClean,
            schedule: AttackSchedule::disabled(),
        }];
        for burst in [1usize, 2] {
            let schedule = AttackSchedule {
                period: 20,
                burst,
                start: 20,
                enabled: true,
            };
            for condition in [
                ProtectionCondition::UnprotectedAttacked,
                ProtectionCondition::SingleObjectiveDefended,
                ProtectionCondition::DualObjectiveDefended,
            ] {
                cells.push(MatrixCell {
                    condition,
                    schedule,
                });
            }
        }
        let records = evaluate_matrix(&artifacts, &cells, &seeds).unwrap();
        let summary = rts_core::harness::report::build_summary(&records, &seeds, "tune");
        for c in &summary.cells {
            println!(
                "  {:<26} {:<6} return {:>7.1} ({:>4.0}%) len {:>6.1} fail {:.2} {}",
                c.condition,
                c.schedule,
                c.mean_return,
                100.0 * c.mean_return / clean_mean as f64,
                c.mean_length,
                c.failure_rate,
                c.detection
                    .as_ref()
                    .map(|d| format!(
                        "recall {} prec {} fpr {:.4}",
                        d.recall.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
                        d.precision.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
                        d.false_positive_rate
                    ))
                    .unwrap_or_default()
            );
        }
    }
}

fn mean(it: impl Iterator<Item = f32>) -> f32 {
    let v: Vec<f32> = it.collect();
    v.iter().sum::<f32>() / v.len().max(1) as f32
}
