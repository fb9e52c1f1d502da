use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Backward recursion `R_i = r_i + gamma * R_{i+1}` seeded with `bootstrap`;
/// a `done` flag at step `i` restarts the recursion from zero there.
/// Advantages are `A_i = R_i - V(s_i)`.
pub fn n_step_returns_and_advantages<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    bootstrap: T,
    gamma: T,
) -> Result<(Vec<T>, Vec<T>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::dim("rollout", &[rewards.len()], &[values.len().max(dones.len())]));
    }
    let mut returns = vec![T::zero(); rewards.len()];
    let mut acc = bootstrap;
    for i in (0..rewards.len()).rev() {
        if dones[i] {
            acc = T::zero();
        }
        acc = rewards[i] + gamma * acc;
        returns[i] = acc;
    }
    let adv = returns.iter().zip(values).map(|(&r, &v)| r - v).collect();
    Ok((returns, adv))
}
