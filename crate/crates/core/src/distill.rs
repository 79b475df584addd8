//! Policy similarity and two-teacher distillation, used to keep the policy
//! bank within its size cap.

use serde::{Deserialize, Serialize};

use crate::bank::PolicyBank;
use crate::par::{self, ExecMode};
use crate::rl::{Activations, Adam, Mlp, Policy, RunningNorm};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub init_log_std: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { epochs: 200, learning_rate: 1e-3, hidden: 64, init_log_std: -0.5 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.hidden == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("distill epochs, hidden and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One bank merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub iteration: usize,
    pub student_id: String,
    pub parent_ids: [String; 2],
    pub similarity: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub experience_ids: Vec<String>,
    pub trained_task_ids: Vec<String>,
    pub grouped_task_ids: Vec<String>,
}

/// `delta(i, j)`: mean L2 distance between the deterministic actions of
/// `pi_i` and `pi_j` over `states`.
pub fn policy_similarity(pi_i: &Policy, pi_j: &Policy, states: &[&[f64]]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Input(format!("no states to compare {} and {}", pi_i.policy_id, pi_j.policy_id)));
    }
    if pi_i.obs_dim() != pi_j.obs_dim() || pi_i.act_dim() != pi_j.act_dim() {
        return Err(Error::Input(format!("policies {} and {} have different shapes", pi_i.policy_id, pi_j.policy_id)));
    }
    let mut total = 0.0;
    for s in states {
        let a = pi_i.deterministic_action(s)?;
        let b = pi_j.deterministic_action(s)?;
        total += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / states.len() as f64)
}

/// `(delta(i,j) + delta(j,i)) / 2`, each on the other policy's experience.
pub fn symmetric_similarity(pi_i: &Policy, pi_j: &Policy) -> Result<f64> {
    let dij = policy_similarity(pi_i, pi_j, &pi_j.experience_states())?;
    let dji = policy_similarity(pi_j, pi_i, &pi_i.experience_states())?;
    Ok(0.5 * (dij + dji))
}

/// Indices `(i, j)` of the pair with the smallest symmetric similarity and
/// its value. Ties go to the lexicographically smallest `(id_i, id_j)` with
/// `id_i < id_j`.
pub fn most_similar_pair(policies: &[Policy], mode: ExecMode) -> Result<(usize, usize, f64)> {
    if policies.len() < 2 {
        return Err(Error::Input("need at least two policies to pick a pair".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..policies.len() {
        for j in i + 1..policies.len() {
            let (a, b) = if policies[i].policy_id <= policies[j].policy_id { (i, j) } else { (j, i) };
            pairs.push((a, b));
        }
    }
    let scores = par::try_map(mode, &pairs, |&(a, b)| symmetric_similarity(&policies[a], &policies[b]))?;
    let best = pairs
        .iter()
        .zip(&scores)
        .min_by(|(p, s), (q, t)| {
            s.total_cmp(t).then_with(|| {
                (&policies[p.0].policy_id, &policies[p.1].policy_id)
                    .cmp(&(&policies[q.0].policy_id, &policies[q.1].policy_id))
            })
        })
        .expect("at least one pair");
    Ok((best.0 .0, best.0 .1, *best.1))
}

/// Teacher targets on the student's input scale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KlBatch {
    /// Student-normalised observations.
    pub obs: Vec<Vec<f64>>,
    pub teacher_mean: Vec<Vec<f64>>,
    pub teacher_log_std: Vec<Vec<f64>>,
}

impl KlBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Adds every experience state of `teacher`.
    pub fn push_teacher(&mut self, teacher: &Policy, student_norm: &RunningNorm) -> Result<()> {
        for s in teacher.experience_states() {
            self.teacher_mean.push(teacher.mean(s)?);
            self.teacher_log_std.push(teacher.log_std.clone());
            self.obs.push(student_norm.normalize(s));
        }
        Ok(())
    }
}

/// `J = sum_s KL(teacher(.|s) || student(.|s))` on pre-squash diagonal
/// Gaussians, with optional accumulation of `dJ/d(actor, log_std)`.
pub fn kl_loss(actor: &Mlp, log_std: &[f64], batch: &KlBatch, mut grads: Option<(&mut [f64], &mut [f64])>) -> f64 {
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut acts = Activations::default();
    let mut dmean = vec![0.0; log_std.len()];
    let mut j = 0.0;
    for ((obs, tm), tls) in batch.obs.iter().zip(&batch.teacher_mean).zip(&batch.teacher_log_std) {
        actor.forward_into(obs, &mut acts);
        let sm = acts.output();
        for d in 0..log_std.len() {
            let diff = tm[d] - sm[d];
            let tvar = (2.0 * tls[d]).exp();
            let q = (tvar + diff * diff) * inv_var[d];
            j += log_std[d] - tls[d] + 0.5 * q - 0.5;
            dmean[d] = -diff * inv_var[d];
            if let Some((_, gs)) = grads.as_mut() {
                gs[d] += 1.0 - q;
            }
        }
        if let Some((ga, _)) = grads.as_mut() {
            actor.backward(&acts, &dmean, ga);
        }
    }
    j
}

/// Result of distilling two teachers.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub student: Policy,
    /// `J` after each accepted epoch, starting with the initial value.
    pub loss_curve: Vec<f64>,
}

impl Distilled {
    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().expect("curve holds the initial loss")
    }
}

/// Distils `pi_i` and `pi_j` into a freshly initialised student whose input
/// statistics are fit on both teachers' experience states.
pub fn distill_pair(
    pi_i: &Policy,
    pi_j: &Policy,
    student_id: &str,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Distilled> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let mut student =
        Policy::new(student_id, pi_i.obs_dim(), pi_i.bounds.clone(), cfg.hidden, cfg.init_log_std, &mut rng);
    let states: Vec<&[f64]> = pi_i.experience_states().into_iter().chain(pi_j.experience_states()).collect();
    student.obs_norm = RunningNorm::fit(pi_i.obs_dim(), states);
    distill_into(student, pi_i, pi_j, cfg)
}

/// Trains `student` (keeping its input normaliser) towards both teachers by
/// full-batch Adam. A step that would raise `J` is rejected and the step
/// size halved, so the recorded curve never increases.
pub fn distill_into(mut student: Policy, pi_i: &Policy, pi_j: &Policy, cfg: &DistillConfig) -> Result<Distilled> {
    if pi_i.act_dim() != pi_j.act_dim() || pi_i.obs_dim() != pi_j.obs_dim() {
        return Err(Error::Input("teachers have different shapes".into()));
    }
    if student.act_dim() != pi_i.act_dim() || student.obs_dim() != pi_i.obs_dim() {
        return Err(Error::Input("student shape does not match the teachers".into()));
    }
    let mut batch = KlBatch::default();
    batch.push_teacher(pi_i, &student.obs_norm)?;
    batch.push_teacher(pi_j, &student.obs_norm)?;
    if batch.is_empty() {
        return Err(Error::Input("teachers carry no experience states".into()));
    }

    let mut opt_actor = Adam::new(student.actor.n_params(), cfg.learning_rate);
    let mut opt_std = Adam::new(student.log_std.len(), cfg.learning_rate);
    let mut ga = vec![0.0; student.actor.n_params()];
    let mut gs = vec![0.0; student.log_std.len()];
    let mut j = kl_loss(&student.actor, &student.log_std, &batch, Some((&mut ga, &mut gs)));
    let mut curve = vec![j];
    for _ in 0..cfg.epochs {
        if !j.is_finite() {
            return Err(Error::Diverged(format!("distillation of {} produced J = {j}", student.policy_id)));
        }
        let (saved_actor, saved_std) = (student.actor.params.clone(), student.log_std.clone());
        opt_actor.step(&mut student.actor.params, &ga);
        opt_std.step(&mut student.log_std, &gs);
        student.clamp_log_std();
        ga.iter_mut().for_each(|g| *g = 0.0);
        gs.iter_mut().for_each(|g| *g = 0.0);
        let next = kl_loss(&student.actor, &student.log_std, &batch, Some((&mut ga, &mut gs)));
        if next <= j {
            j = next;
        } else {
            student.actor.params = saved_actor;
            student.log_std = saved_std;
            opt_actor.lr *= 0.5;
            opt_std.lr *= 0.5;
            ga.iter_mut().for_each(|g| *g = 0.0);
            gs.iter_mut().for_each(|g| *g = 0.0);
            kl_loss(&student.actor, &student.log_std, &batch, Some((&mut ga, &mut gs)));
        }
        curve.push(j);
    }

    student.provenance.parent_ids = vec![pi_i.policy_id.clone(), pi_j.policy_id.clone()];
    let mut trained = pi_i.provenance.trained_task_ids.clone();
    trained.extend(pi_j.provenance.trained_task_ids.iter().cloned());
    student.provenance.trained_task_ids = trained;
    student.experiences = pi_i.experiences.iter().chain(&pi_j.experiences).cloned().collect();
    student.final_eval_reward = None;
    Ok(Distilled { student, loss_curve: curve })
}

/// Merges most-similar pairs until the bank holds at most `n` policies.
/// Returns the records of the merges performed (also appended to the bank).
pub fn cap_bank(
    bank: &mut PolicyBank,
    n: usize,
    cfg: &DistillConfig,
    master_seed: u64,
    mode: ExecMode,
) -> Result<Vec<MergeRecord>> {
    if n == 0 {
        return Err(Error::Config("bank size cap must be >= 1".into()));
    }
    let mut done = Vec::new();
    while bank.len() > n {
        let (i, j, similarity) = most_similar_pair(&bank.policies, mode)?;
        let student_id = bank.next_merged_id();
        let seed = seed::derive(master_seed, "distill", &student_id);
        let d = distill_pair(&bank.policies[i], &bank.policies[j], &student_id, cfg, seed)?;
        let parents = [bank.policies[i].policy_id.clone(), bank.policies[j].policy_id.clone()];
        let mut grouped = bank.group(&parents[0]).to_vec();
        grouped.extend(bank.group(&parents[1]).iter().cloned());
        let record = MergeRecord {
            iteration: bank.iteration,
            student_id: student_id.clone(),
            parent_ids: parents.clone(),
            similarity,
            initial_loss: d.loss_curve[0],
            final_loss: d.final_loss(),
            experience_ids: d.student.experiences.iter().map(|e| e.id()).collect(),
            trained_task_ids: d.student.provenance.trained_task_ids.clone(),
            grouped_task_ids: grouped.clone(),
        };
        bank.remove(&parents[0])?;
        bank.remove(&parents[1])?;
        bank.insert(d.student, grouped)?;
        bank.merges.push(record.clone());
        done.push(record);
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::ActionBounds;
    use crate::rl::Experience;
    use approx::assert_abs_diff_eq;

    fn policy(id: &str, seed: u64) -> Policy {
        let mut p = Policy::new(id, 6, ActionBounds::for_cells(2), 8, -0.5, &mut seed::rng(seed));
        p.actor = Mlp::init(&p.actor.sizes, 1.0, &mut seed::rng(seed + 100));
        let mut rng = seed::rng(seed + 200);
        use rand::Rng;
        let states = (0..20).map(|_| (0..6).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        p.experiences.push(Experience { task_id: format!("t-{id}"), policy_id: id.into(), seed, states });
        p.provenance.trained_task_ids.push(format!("t-{id}"));
        p
    }

    #[test]
    fn self_similarity_is_zero() {
        let p = policy("a", 1);
        assert_eq!(policy_similarity(&p, &p, &p.experience_states()).unwrap(), 0.0);
    }

    #[test]
    fn pair_choice_and_ties() {
        let a = policy("a", 1);
        let mut b = policy("b", 2);
        let c = policy("c", 3);
        let mut a2 = a.clone();
        a2.policy_id = "z".into();
        let (i, j, d) =
            most_similar_pair(&[b.clone(), a.clone(), c.clone(), a2.clone()], ExecMode::Sequential).unwrap();
        assert_eq!((i, j, d), (1, 3, 0.0));
        // All three identical: the smallest id pair wins.
        b.actor = a.actor.clone();
        b.obs_norm = a.obs_norm.clone();
        let mut c2 = a.clone();
        c2.policy_id = "c".into();
        let (i, j, _) = most_similar_pair(&[c2, b, a], ExecMode::Sequential).unwrap();
        assert_eq!((i, j), (2, 1));
        assert!(most_similar_pair(&[c], ExecMode::Sequential).is_err());
    }

    #[test]
    fn identical_teachers_give_zero_initial_loss() {
        let p = policy("a", 4);
        let student = p.clone();
        let d = distill_into(student, &p, &p, &DistillConfig { epochs: 3, ..DistillConfig::default() }).unwrap();
        assert_abs_diff_eq!(d.loss_curve[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_never_increases() {
        let (a, b) = (policy("a", 5), policy("b", 6));
        let d = distill_pair(&a, &b, "m", &DistillConfig { epochs: 60, learning_rate: 0.05, ..Default::default() }, 7)
            .unwrap();
        assert!(d.loss_curve.windows(2).all(|w| w[1] <= w[0] + 1e-6));
        assert!(d.final_loss() < d.loss_curve[0]);
        assert_eq!(d.student.experiences.len(), 2);
        assert_eq!(d.student.provenance.parent_ids, vec!["a", "b"]);
    }
}
