use rand::Rng;

use taskbank::metrics::fp_baseline;
use taskbank::netsim::{generate_tasks, ActionBounds, SimConfig};
use taskbank::rl::{
    evaluate_policy, final_eval_seed, gaussian_log_prob, policy_gradient_check, train_policy, ActMode, Batch, Mlp,
    Policy, PpoConfig,
};
use taskbank::seed;

fn small_ppo() -> PpoConfig {
    PpoConfig { total_env_steps: 800, steps_per_update: 400, minibatch_size: 100, ..PpoConfig::desk_scale() }
}

fn short_sim() -> SimConfig {
    SimConfig { episode_steps: 40, ..SimConfig::default() }
}

fn batch_for(policy: &Policy, n: usize, seed_: u64, symmetric: bool) -> Batch {
    let mut rng = seed::rng(seed_);
    let mut b = Batch::default();
    for i in 0..n {
        let obs: Vec<f64> = (0..policy.obs_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean = policy.actor.forward(&obs);
        let sign = if symmetric && i % 2 == 1 { -1.0 } else { 1.0 };
        let u: Vec<f64> = mean.iter().map(|m| m + sign * 0.7).collect();
        let logp = gaussian_log_prob(&u, &mean, &policy.log_std);
        b.obs.push(obs);
        b.pre_squash.push(u);
        b.old_logp.push(logp + rng.gen_range(-0.1..0.1));
        b.advantages.push(if symmetric { sign } else { rng.gen_range(-1.0..1.0) });
        b.returns.push(rng.gen_range(-2.0..2.0));
    }
    b
}

#[test]
fn gradient_check_on_zero_weight_network() {
    let mut rng = seed::rng(1);
    let mut p = Policy::new("z", 6, ActionBounds::for_cells(2), 16, -0.5, &mut rng);
    p.actor = Mlp::zeros(&p.actor.sizes);
    p.critic = Mlp::zeros(&p.critic.sizes);
    let batch = batch_for(&p, 16, 2, true);
    let check = policy_gradient_check(&p, &batch, 0.2, 1000, &mut rng);
    assert!(check.checked > 0);
    assert!(check.max_rel_error <= 1e-4, "{check:?}");
}

#[test]
fn gradient_check_on_random_network() {
    for s in 0..3 {
        let mut rng = seed::rng(10 + s);
        let mut p = Policy::new("r", 12, ActionBounds::for_cells(4), 32, -0.2, &mut rng);
        p.actor = Mlp::init(&p.actor.sizes, 1.0, &mut rng);
        let batch = batch_for(&p, 32, 20 + s, false);
        let check = policy_gradient_check(&p, &batch, 0.2, 400, &mut rng);
        assert!(check.max_rel_error <= 1e-4, "seed {s}: {check:?}");
    }
}

#[test]
fn action_bounds_hold_for_many_samples() {
    let mut rng = seed::rng(3);
    let mut p = Policy::new("b", 12, ActionBounds::for_cells(4), 16, 1.0, &mut rng);
    p.actor = Mlp::init(&p.actor.sizes, 3.0, &mut rng);
    let zero = [0.0; 12];
    for i in 0..100_000 {
        let flat: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..50.0)).collect();
        let s: &[f64] = if i % 10 == 0 { &zero } else { &flat };
        let a = p.act(s, ActMode::Stochastic, &mut rng).unwrap();
        assert!(a.within_bounds(), "sample {i}");
    }
}

#[test]
fn training_accounts_steps_exactly_and_is_reproducible() {
    let tasks = generate_tasks(2, 2, 0.1, 4, 5).unwrap();
    let cfg = small_ppo();
    let sim = short_sim();
    let (a, steps) = train_policy(&tasks[0], &sim, &cfg, 17, "p").unwrap();
    assert_eq!(steps, cfg.total_env_steps);
    let (b, _) = train_policy(&tasks[0], &sim, &cfg, 17, "p").unwrap();
    assert_eq!(a.actor, b.actor);
    assert_eq!(a.critic, b.critic);
    assert_eq!(a.log_std, b.log_std);
    assert_eq!(a.obs_norm, b.obs_norm);
    let (c, _) = train_policy(&tasks[0], &sim, &cfg, 18, "p").unwrap();
    assert_ne!(a.actor, c.actor);
}

#[test]
fn evaluation_contract() {
    let tasks = generate_tasks(2, 2, 0.1, 4, 6).unwrap();
    let sim = short_sim();
    let (p, _) = train_policy(&tasks[1], &sim, &small_ppo(), 3, "p").unwrap();
    let (e1, r1) = evaluate_policy(&p, &tasks[1], &sim, 25, 99).unwrap();
    let (e2, r2) = evaluate_policy(&p, &tasks[1], &sim, 25, 99).unwrap();
    assert_eq!(e1.states.len(), 25);
    assert_eq!(e1, e2);
    assert_eq!(r1, r2);
    assert!(evaluate_policy(&p, &tasks[1], &sim, 0, 99).is_err());
}

#[test]
fn self_evaluation_reproduces_training_end_reward() {
    let tasks = generate_tasks(3, 3, 0.1, 4, 8).unwrap();
    let sim = SimConfig::default();
    let cfg = PpoConfig::desk_scale();
    let (p, _) = train_policy(&tasks[2], &sim, &cfg, 4, "p").unwrap();
    let recorded = p.final_eval_reward.unwrap();
    let (_, again) = evaluate_policy(&p, &tasks[2], &sim, sim.episode_steps, final_eval_seed(4, &tasks[2])).unwrap();
    assert_eq!(again, recorded);
    // A fresh traffic realisation of the same task stays within 5%.
    let (_, fresh) = evaluate_policy(&p, &tasks[2], &sim, sim.episode_steps, 12345).unwrap();
    assert!((fresh - recorded).abs() <= 0.05 * recorded.abs(), "{fresh} vs {recorded}");
}

#[test]
fn desk_scale_training_beats_fixed_parameters() {
    let tasks = generate_tasks(8, 8, 0.1, 4, 7).unwrap();
    let sim = SimConfig::default();
    let cfg = PpoConfig::desk_scale();
    let mut wins = 0;
    for s in 0..5u64 {
        let task = &tasks[s as usize];
        let (p, _) = train_policy(task, &sim, &cfg, seed::derive_index(7, "train", s), "p").unwrap();
        let eval_seed = seed::derive_index(7, "eval", s);
        let (_, learned) = evaluate_policy(&p, task, &sim, sim.episode_steps, eval_seed).unwrap();
        let fixed = fp_baseline(task, &sim, sim.episode_steps, eval_seed).unwrap();
        if learned >= fixed {
            wins += 1;
        }
    }
    assert!(wins >= 4, "trained policy beat FP on {wins}/5 seeds");
}
