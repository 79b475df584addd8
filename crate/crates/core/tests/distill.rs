use rand::Rng;

use taskbank::bank::PolicyBank;
use taskbank::distill::{
    cap_bank, distill_pair, most_similar_pair, policy_similarity, symmetric_similarity, DistillConfig,
};
use taskbank::grouping::rollout_seed;
use taskbank::netsim::{generate_tasks, ActionBounds, SimConfig};
use taskbank::par::ExecMode;
use taskbank::rl::{evaluate_policy, train_policy, Experience, Mlp, Policy, PpoConfig};
use taskbank::seed;

const OBS: usize = 12;

fn states(s: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| (0..OBS).map(|_| rng.gen_range(0.0..5.0)).collect()).collect()
}

fn random_policy(id: &str, s: u64, exp_states: Vec<Vec<f64>>) -> Policy {
    let mut rng = seed::rng(s);
    let mut p = Policy::new(id, OBS, ActionBounds::for_cells(4), 16, -0.5, &mut rng);
    p.actor = Mlp::init(&p.actor.sizes, 1.0, &mut rng);
    let task = format!("task-{id}");
    p.experiences.push(Experience { task_id: task.clone(), policy_id: id.into(), seed: s, states: exp_states });
    p.provenance.trained_task_ids.push(task);
    p
}

/// A policy whose deterministic action is `target` on every state.
fn constant_policy(id: &str, target: &[f64]) -> Policy {
    let bounds = ActionBounds::for_cells(4);
    let mut p = Policy::new(id, OBS, bounds.clone(), 8, -0.5, &mut seed::rng(0));
    p.actor = Mlp::zeros(&p.actor.sizes);
    let n = p.actor.params.len();
    let act = bounds.dim();
    for k in 0..act {
        let (l, h) = (bounds.low[k], bounds.high[k]);
        p.actor.params[n - act + k] = (2.0 * (target[k] - l) / (h - l) - 1.0).atanh();
    }
    p.experiences.push(Experience {
        task_id: format!("task-{id}"),
        policy_id: id.into(),
        seed: 0,
        states: states(9, 10),
    });
    p
}

#[test]
fn constant_offset_gives_its_norm() {
    let mid = ActionBounds::for_cells(4).midpoint();
    let mut shifted = mid.clone();
    shifted[0] += 3.0;
    shifted[13] += 4.0;
    let a = constant_policy("a", &mid);
    let b = constant_policy("b", &shifted);
    let d = policy_similarity(&a, &b, &b.experience_states()).unwrap();
    assert!((d - 5.0).abs() < 1e-9, "{d}");
}

#[test]
fn pair_selection_follows_symmetric_distance() {
    let mid = ActionBounds::for_cells(4).midpoint();
    let at = |offset: f64| {
        let mut v = mid.clone();
        v[0] += offset;
        v
    };
    // AB = 1, AC = 2, BC = 3.
    let policies =
        vec![constant_policy("C", &at(-2.0)), constant_policy("A", &at(0.0)), constant_policy("B", &at(1.0))];
    let (i, j, d) = most_similar_pair(&policies, ExecMode::Sequential).unwrap();
    let mut ids = [policies[i].policy_id.as_str(), policies[j].policy_id.as_str()];
    ids.sort_unstable();
    assert_eq!(ids, ["A", "B"]);
    assert!((d - 1.0).abs() < 1e-9);
}

#[test]
fn similarity_matches_per_state_recomputation() {
    let s = states(4, 100);
    let a = random_policy("a", 1, s.clone());
    let b = random_policy("b", 2, s.clone());
    let refs: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
    let fast = policy_similarity(&a, &b, &refs).unwrap();
    let mut sum = 0.0;
    for st in &s {
        let x = a.deterministic_action(st).unwrap();
        let y = b.deterministic_action(st).unwrap();
        sum += x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    }
    assert!((fast - sum / 100.0).abs() < 1e-9);
}

#[test]
fn symmetric_distance_obeys_triangle_inequality() {
    let shared = states(5, 40);
    for t in 0..30u64 {
        let p: Vec<Policy> = (0..3).map(|k| random_policy(&format!("p{k}"), 100 * t + k, shared.clone())).collect();
        let d = |i: usize, j: usize| symmetric_similarity(&p[i], &p[j]).unwrap();
        assert_eq!(d(0, 0), 0.0);
        for (i, j, k) in [(0, 1, 2), (0, 2, 1), (1, 2, 0)] {
            assert!(d(i, j) >= 0.0);
            assert!(d(i, j) <= d(i, k) + d(k, j) + 1e-12, "triple {t}");
        }
    }
}

fn bank_of(count: usize) -> PolicyBank {
    let mut bank = PolicyBank::new();
    for i in 0..count {
        let id = format!("pi-{i:02}");
        let grouped = (0..i % 3).map(|g| format!("g-{i}-{g}")).collect();
        bank.insert(random_policy(&id, i as u64, states(50 + i as u64, 15)), grouped).unwrap();
    }
    bank
}

fn experience_ids(bank: &PolicyBank) -> Vec<String> {
    let mut v: Vec<String> = bank.policies.iter().flat_map(|p| p.experiences.iter().map(|e| e.id())).collect();
    v.sort();
    v
}

#[test]
fn capping_counts_and_conservation() {
    let cfg = DistillConfig { epochs: 10, ..DistillConfig::default() };
    let mut bank = bank_of(4);
    let before = (bank.task_multiset(), experience_ids(&bank));
    assert!(cap_bank(&mut bank, 4, &cfg, 0, ExecMode::Sequential).unwrap().is_empty());
    assert_eq!(bank.len(), 4);

    let mut bank = bank_of(6);
    let before6 = (bank.task_multiset(), experience_ids(&bank));
    let merges = cap_bank(&mut bank, 4, &cfg, 0, ExecMode::Parallel).unwrap();
    assert_eq!(merges.len(), 2);
    assert_eq!(bank.len(), 4);
    assert_eq!((bank.task_multiset(), experience_ids(&bank)), before6);
    assert_eq!(bank.merges.len(), 2);
    for m in &merges {
        assert!(bank.get(&m.parent_ids[0]).is_none() && bank.get(&m.parent_ids[1]).is_none());
    }
    assert_eq!(before.0.len(), 4 + (0..4).map(|i| i % 3).sum::<usize>());

    assert!(cap_bank(&mut bank, 0, &cfg, 0, ExecMode::Sequential).is_err());
}

#[test]
fn student_stays_close_to_its_teachers() {
    let tasks = generate_tasks(2, 2, 0.1, 4, 21).unwrap();
    let sim = SimConfig::default();
    let ppo = PpoConfig::desk_scale();
    let teachers: Vec<Policy> = tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let (mut p, _) = train_policy(t, &sim, &ppo, 40 + k as u64, &format!("pi-{k}")).unwrap();
            let (exp, _) = evaluate_policy(&p, t, &sim, sim.episode_steps, rollout_seed(0, &t.task_id)).unwrap();
            p.experiences = vec![exp];
            p
        })
        .collect();
    let (a, b) = (&teachers[0], &teachers[1]);
    let merged = distill_pair(a, b, "m", &DistillConfig::default(), 5).unwrap();
    let pair = symmetric_similarity(a, b).unwrap();
    let slack = 0.05 * a.bounds.range_norm();
    for t in [a, b] {
        let d = policy_similarity(&merged.student, t, &t.experience_states()).unwrap();
        assert!(d <= pair + slack, "{d} > {pair} + {slack}");
    }
}
