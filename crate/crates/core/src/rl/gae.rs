/// Generalised advantage estimation over a flat buffer.
///
/// `next_values[t]` is the value of the state reached after step `t` (zero
/// when that state is terminal). `ends[t]` marks the last step of a
/// trajectory segment, where the recursion restarts. Returns
/// `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    debug_assert!(values.len() == n && next_values.len() == n && ends.len() == n);
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if ends[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}
