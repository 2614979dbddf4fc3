use std::time::Instant;

use rts_core::agent::{evaluate_policy, random_policy_returns, train_agent, AgentConfig};
use rts_core::envs::make_env;

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5000);
    let env_name = std::env::args().nth(2).unwrap_or("pendulum-swingup".into());

    let mut env = make_env(&env_name, &Default::default()).unwrap();
    let config = AgentConfig {
        total_steps: steps,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = train_agent(env.as_mut(), &config, None, 1).unwrap();
    let dt = t0.elapsed();
    println!(
        "{env_name}: {steps} steps in {:.1}s ({:.0} steps/s), {} updates",
        dt.as_secs_f64(),
        steps as f64 / dt.as_secs_f64(),
        out.updates
    );

    let seeds: Vec<u64> = (1000..1020).collect();
    let evals = evaluate_policy(&out.policy, env.as_mut(), &seeds).unwrap();
    let mean: f32 = evals.iter().map(|e| e.episode_return).sum::<f32>() / evals.len() as f32;
    let mean_len: f32 = evals.iter().map(|e| e.length as f32).sum::<f32>() / evals.len() as f32;
    let rand_returns = random_policy_returns(env.as_mut(), &seeds, 2).unwrap();
    let rand_mean: f32 = rand_returns.iter().sum::<f32>() / rand_returns.len() as f32;
    println!("eval mean return {mean:.2} (len {mean_len:.1}), random baseline {rand_mean:.2}");
}
