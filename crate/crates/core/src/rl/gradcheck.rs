//! Central finite-difference checks for the hand-written gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{policy_loss, value_loss, Batch, Policy};

pub const FD_STEP: f64 = 1e-5;

/// Result of comparing analytic and numerical gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic[i]` against the central difference of `f` at `x` for
/// each `i` in `indices`.
pub fn check_indices(
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let mut probe = x.to_vec();
    let mut out = GradCheck { checked: 0, max_rel_error: 0.0 };
    for i in indices {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.checked += 1;
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic[i], numeric));
    }
    out
}

fn merge(a: GradCheck, b: GradCheck) -> GradCheck {
    GradCheck { checked: a.checked + b.checked, max_rel_error: a.max_rel_error.max(b.max_rel_error) }
}

/// Checks the clipped-surrogate gradient on `sample_size` random actor
/// parameters plus every log-std entry, and the value-loss gradient on
/// `sample_size` random critic parameters.
pub fn policy_gradient_check(
    policy: &Policy,
    batch: &Batch,
    clip: f64,
    sample_size: usize,
    rng: &mut impl Rng,
) -> GradCheck {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut ga = vec![0.0; policy.actor.n_params()];
    let mut gs = vec![0.0; policy.log_std.len()];
    policy_loss(&policy.actor, &policy.log_std, batch, &idx, clip, 0.0, Some((&mut ga, &mut gs)));

    let picks = sample(rng, ga.len(), sample_size.min(ga.len())).into_vec();
    let mut actor = policy.actor.clone();
    let actor_check = check_indices(&policy.actor.params, &ga, picks, |p| {
        actor.params.copy_from_slice(p);
        policy_loss(&actor, &policy.log_std, batch, &idx, clip, 0.0, None)
    });
    let std_check = check_indices(&policy.log_std, &gs, 0..gs.len(), |ls| {
        policy_loss(&policy.actor, ls, batch, &idx, clip, 0.0, None)
    });

    let mut gc = vec![0.0; policy.critic.n_params()];
    value_loss(&policy.critic, batch, &idx, Some(&mut gc));
    let picks = sample(rng, gc.len(), sample_size.min(gc.len())).into_vec();
    let mut critic = policy.critic.clone();
    let critic_check = check_indices(&policy.critic.params, &gc, picks, |p| {
        critic.params.copy_from_slice(p);
        value_loss(&critic, batch, &idx, None)
    });
    merge(merge(actor_check, std_check), critic_check)
}
