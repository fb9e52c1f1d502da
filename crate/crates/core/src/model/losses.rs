use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

use super::{ActionMapMode, AgentModel, EncoderVars, Hyperparams, LatentStats};

/// `0.5 * sum(mu^2 + e^logvar - 1 - logvar)` per row, `[rows x 1]`.
pub fn kl_rows<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -T::one());
    let s = g.sum_rows(c);
    Ok(g.scale(s, T::lit(0.5)))
}

/// KL divergence of `N(mu, diag(e^logvar))` from the standard normal.
pub fn kl_standard_normal<T: Scalar>(stats: &LatentStats<T>) -> T {
    let half = T::lit(0.5);
    stats
        .mu
        .iter()
        .zip(&stats.logvar)
        .map(|(&m, &lv)| (half * (m * m + lv.exp_m1() - lv)).max(T::zero()))
        .sum()
}

/// Per-row Bernoulli negative log-likelihood of `targets`.
pub fn reconstruction_rows<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: Var) -> Result<Var> {
    g.bce_with_logits_rows(logits, targets)
}

/// `mean(recon) + beta * mean(kl)`.
pub fn ac_beta_vae_loss<T: Scalar>(g: &mut Graph<'_, T>, recon_rows: Var, kl_rows: Var, beta: T) -> Var {
    let r = g.mean(recon_rows);
    let k = g.mean(kl_rows);
    let bk = g.scale(k, beta);
    g.add(r, bk).expect("scalars")
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyLoss {
    pub loss: Var,
    /// `-mean(log pi(a) * A)`.
    pub pg: Var,
    /// Mean policy entropy.
    pub entropy: Var,
    pub log_probs: Var,
}

/// `-mean(log pi(a_i|h_i) * A_i) - c_H * mean(entropy)` with `A` held constant.
pub fn a2c_policy_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    actions: &[usize],
    advantages: &[T],
    entropy_coef: T,
) -> Result<PolicyLoss> {
    if actions.len() != advantages.len() {
        return Err(Error::dim("advantages", &[actions.len()], &[advantages.len()]));
    }
    let logp = g.log_softmax(logits);
    let taken = g.gather(logp, actions)?;
    let adv = g.constant(Tensor::matrix(advantages.len(), 1, advantages.to_vec())?);
    let weighted = g.mul(taken, adv)?;
    let m = g.mean(weighted);
    let pg = g.scale(m, -T::one());

    let p = g.softmax(logits);
    let plogp = g.mul(p, logp)?;
    let neg_h = g.sum_rows(plogp);
    let mean_neg_h = g.mean(neg_h);
    let entropy = g.scale(mean_neg_h, -T::one());

    let bonus = g.scale(mean_neg_h, entropy_coef);
    let loss = g.add(pg, bonus)?;
    Ok(PolicyLoss {
        loss,
        pg,
        entropy,
        log_probs: taken,
    })
}

/// `policy + alpha * ac`.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, policy: Var, ac: Var, alpha: T) -> Result<Var> {
    let w = g.scale(ac, alpha);
    g.add(policy, w)
}

/// `mean((R - V)^2)`.
pub fn critic_loss<T: Scalar>(g: &mut Graph<'_, T>, values: Var, returns: &[T]) -> Result<Var> {
    let r = g.constant(Tensor::matrix(returns.len(), 1, returns.to_vec())?);
    let d = g.sub(r, values)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// One minibatch of transitions as dense tensors.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a, T> {
    /// `[B x obs_dim]` current states.
    pub obs: &'a Tensor<T>,
    /// `[B x obs_dim]` next states (reconstruction targets).
    pub next_obs: &'a Tensor<T>,
    /// `[B x n]` reparameterization noise.
    pub eps: &'a Tensor<T>,
    pub actions: &'a [usize],
    pub advantages: &'a [T],
    pub returns: &'a [T],
}

/// Every intermediate and loss node of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub enc: EncoderVars,
    pub z: Var,
    pub action_map: Var,
    pub decoder_logits: Var,
    pub policy_logits: Var,
    pub recon_rows: Var,
    pub kl_rows: Var,
    pub ac: Var,
    pub policy: PolicyLoss,
    pub total: Var,
    pub values: Var,
    pub critic: Var,
}

impl<T: Scalar> AgentModel<T> {
    /// Builds the full loss graph: one encoder evaluation feeds the decoder
    /// path and both heads; the value head reads a detached copy of `h`.
    pub fn loss_graph<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        batch: &LossBatch<'p, T>,
        hp: &Hyperparams,
    ) -> Result<LossVars> {
        let rows = batch.obs.rows();
        let n = self.latent_dim();
        if batch.next_obs.shape() != batch.obs.shape() {
            return Err(Error::dim("next observations", batch.obs.shape(), batch.next_obs.shape()));
        }
        if batch.eps.shape() != [rows, n] {
            return Err(Error::dim("reparameterization noise", &[rows, n], batch.eps.shape()));
        }
        if batch.actions.len() != rows || batch.returns.len() != rows {
            return Err(Error::dim("batch actions/returns", &[rows], &[batch.actions.len().min(batch.returns.len())]));
        }
        let x = g.constant_ref(batch.obs);
        let enc = self.encode_graph(g, x)?;
        let z = self.reparameterize_graph(g, &enc, batch.eps.clone())?;
        let policy_logits = self.policy_logits_graph(g, enc.h)?;

        let table = action_map_table::<T>(&self.config)?;
        let amap = match (hp.action_map, hp.action_map_mode) {
            (false, _) => Tensor::zeros(&[rows, n]),
            (true, ActionMapMode::Sampled) => {
                let mut out = Vec::with_capacity(rows * n);
                for &a in batch.actions {
                    if a >= table.rows() {
                        return Err(Error::dim("action index", &[table.rows()], &[a]));
                    }
                    out.extend_from_slice(table.row(a));
                }
                Tensor::matrix(rows, n, out)?
            }
            (true, ActionMapMode::Probability) => {
                let mut probs = g.value(policy_logits).clone();
                let k = probs.cols();
                for r in 0..rows {
                    crate::numerics::softmax_in_place(&mut probs.data_mut()[r * k..(r + 1) * k]);
                }
                probs.matmul_t(&transpose(&table))?
            }
        };
        let action_map = g.constant(amap);
        let z_plus = g.add(z, action_map)?;
        let decoder_logits = self.decode_logits_graph(g, z_plus)?;
        let target = g.constant_ref(batch.next_obs);
        let recon_rows = reconstruction_rows(g, decoder_logits, target)?;
        let kl = kl_rows(g, enc.mu, enc.logvar)?;
        let ac = ac_beta_vae_loss(g, recon_rows, kl, T::lit(hp.beta));

        let policy = a2c_policy_loss(g, policy_logits, batch.actions, batch.advantages, T::lit(hp.entropy_coef))?;
        let total = total_loss(g, policy.loss, ac, T::lit(hp.alpha))?;

        let h_stop = g.detach(enc.h);
        let values = self.value_graph(g, h_stop)?;
        let critic = critic_loss(g, values, batch.returns)?;
        Ok(LossVars {
            enc,
            z,
            action_map,
            decoder_logits,
            policy_logits,
            recon_rows,
            kl_rows: kl,
            ac,
            policy,
            total,
            values,
            critic,
        })
    }
}

/// `[num_actions x n]`: row `a` is the action-mapping vector of action `a`.
pub fn action_map_table<T: Scalar>(config: &super::ModelConfig) -> Result<Tensor<T>> {
    use crate::env::DiscreteAction;
    let n = config.latent_dim;
    let m = config.action_dim;
    let mut data = Vec::with_capacity(DiscreteAction::COUNT * n);
    for a in DiscreteAction::ALL {
        let v = a.to_vector().0;
        let head: Vec<f64> = (0..m).map(|i| v.get(i).copied().unwrap_or(0.0)).collect();
        data.extend(super::make_action_map::<T>(&head, n)?);
    }
    Tensor::matrix(DiscreteAction::COUNT, n, data)
}

fn transpose<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.row(i)[j];
        }
    }
    Tensor::matrix(c, r, out).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check, Rng};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn kl_of(mu: &[f64], lv: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::matrix(1, mu.len(), mu.to_vec()).unwrap());
        let l = g.constant(Tensor::matrix(1, lv.len(), lv.to_vec()).unwrap());
        let k = kl_rows(&mut g, m, l).unwrap();
        g.value(k).item()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_of(&[0.0], &[0.0]), 0.0);
        assert!(close(kl_of(&[1.0], &[0.0]), 0.5, 1e-15));
        let e = std::f64::consts::E;
        assert!(close(kl_of(&[0.0], &[1.0]), 0.5 * (e - 2.0), 1e-15));
        assert!(close(0.5 * (e - 2.0), 0.3591, 1e-4));
        let stats = LatentStats { mu: vec![1.0, 0.0], logvar: vec![0.0, 1.0] };
        assert!(close(kl_standard_normal(&stats), 0.5 + 0.5 * (e - 2.0), 1e-15));
    }

    #[test]
    fn policy_loss_hand_value() {
        // two equal logits -> pi = 0.5 for each of two actions
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap());
        let p = a2c_policy_loss(&mut g, l, &[0], &[2.0], 0.0).unwrap();
        let v = g.value(p.loss).item();
        assert!(close(v, -(0.5f64).ln() * 2.0, 1e-12));
        assert!(close(v, 1.3863, 1e-4));
    }

    #[test]
    fn zero_advantage_leaves_entropy_term() {
        let mut g = Graph::<f64>::new();
        let logits = vec![0.1, -0.4, 1.2, 0.0, 0.5, 0.5, -1.0, 2.0, 0.3];
        let l = g.constant(Tensor::matrix(1, 9, logits.clone()).unwrap());
        let p = a2c_policy_loss(&mut g, l, &[4], &[0.0], 0.01).unwrap();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let h: f64 = logits
            .iter()
            .map(|v| {
                let p = (v - mx).exp() / z;
                -p * p.ln()
            })
            .sum();
        assert!(close(g.value(p.loss).item(), -0.01 * h, 1e-12));
        assert!(close(g.value(p.entropy).item(), h, 1e-12));
    }

    #[test]
    fn doubling_advantages_doubles_pg_term() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap());
        let a = a2c_policy_loss(&mut g, l, &[0, 2], &[0.7, -1.1], 0.01).unwrap();
        let b = a2c_policy_loss(&mut g, l, &[0, 2], &[1.4, -2.2], 0.01).unwrap();
        assert!(close(2.0 * g.value(a.pg).item(), g.value(b.pg).item(), 1e-12));
    }

    #[test]
    fn total_and_critic_arithmetic() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::scalar(2.0));
        let a = g.constant(Tensor::scalar(30.0));
        let t = total_loss(&mut g, p, a, 0.01).unwrap();
        assert!(close(g.value(t).item(), 2.3, 1e-12));
        let t0 = total_loss(&mut g, p, a, 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 2.0);
        let v = g.constant(Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap());
        let c = critic_loss(&mut g, v, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn ac_loss_composes_sub_ops() {
        let mut rng = Rng::new(8);
        let logits: Vec<f64> = (0..8).map(|_| rng.normal() * 3.0).collect();
        let targets: Vec<f64> = (0..8).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
        let mu = vec![0.3, -0.2, 1.0, 0.1];
        let lv = vec![-0.5, 0.2, 0.0, 0.4];
        let mut g = Graph::<f64>::new();
        let lo = g.constant(Tensor::matrix(2, 4, logits.clone()).unwrap());
        let ta = g.constant(Tensor::matrix(2, 4, targets.clone()).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, mu.clone()).unwrap());
        let l = g.constant(Tensor::matrix(2, 2, lv.clone()).unwrap());
        let r = reconstruction_rows(&mut g, lo, ta).unwrap();
        let k = kl_rows(&mut g, m, l).unwrap();
        let loss = ac_beta_vae_loss(&mut g, r, k, 4.0);

        // independent recomputation from probabilities
        let bce: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&l, &t)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 2.0;
        let kl: f64 = (0..2)
            .map(|r| kl_standard_normal(&LatentStats { mu: mu[r * 2..r * 2 + 2].to_vec(), logvar: lv[r * 2..r * 2 + 2].to_vec() }))
            .sum::<f64>()
            / 2.0;
        assert!(close(g.value(loss).item(), bce + 4.0 * kl, 1e-10));
        let zero_beta = ac_beta_vae_loss(&mut g, r, k, 0.0);
        assert!(close(g.value(loss).item() - g.value(zero_beta).item(), 4.0 * kl, 1e-10));
    }

    #[test]
    fn confident_reconstruction_approaches_zero() {
        let mut g = Graph::<f64>::new();
        let lo = g.constant(Tensor::matrix(1, 4, vec![40.0, -40.0, 40.0, -40.0]).unwrap());
        let ta = g.constant(Tensor::matrix(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let r = reconstruction_rows(&mut g, lo, ta).unwrap();
        assert!(g.value(r).item() < 1e-15);
    }

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            obs_dim: 16,
            latent_dim: 3,
            action_dim: 2,
            num_actions: 9,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            head_hidden: 5,
        }
    }

    struct Micro {
        obs: Tensor<f64>,
        next: Tensor<f64>,
        eps: Tensor<f64>,
        actions: Vec<usize>,
        adv: Vec<f64>,
        ret: Vec<f64>,
    }

    fn micro_batch(seed: u64) -> Micro {
        let mut rng = Rng::new(seed);
        let b = 3;
        let bits = |rng: &mut Rng| (0..b * 16).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect();
        Micro {
            obs: Tensor::matrix(b, 16, bits(&mut rng)).unwrap(),
            next: Tensor::matrix(b, 16, bits(&mut rng)).unwrap(),
            eps: Tensor::matrix(b, 3, (0..b * 3).map(|_| rng.normal()).collect()).unwrap(),
            actions: (0..b).map(|_| rng.below(9)).collect(),
            adv: (0..b).map(|_| rng.normal()).collect(),
            ret: (0..b).map(|_| rng.normal()).collect(),
        }
    }

    #[test]
    fn critic_gradient_stays_in_value_head() {
        let model: AgentModel<f64> = AgentModel::init(micro_config(), 4).unwrap();
        let mb = micro_batch(4);
        let batch = LossBatch {
            obs: &mb.obs,
            next_obs: &mb.next,
            eps: &mb.eps,
            actions: &mb.actions,
            advantages: &mb.adv,
            returns: &mb.ret,
        };
        let mut g = Graph::new();
        let vars = model.loss_graph(&mut g, &batch, &Hyperparams::default()).unwrap();
        let grads = g.backward(vars.critic).unwrap();
        assert!(grads.len() > 0);
        assert!(grads.iter().all(|(name, _)| name.starts_with("value.")));
        let total = g.backward(vars.total).unwrap();
        assert!(total.iter().all(|(name, _)| !name.starts_with("value.")));
        assert!(!g.requires_grad(vars.action_map));
    }

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        for seed in 0..3 {
            let mb = micro_batch(100 + seed);
            let base: AgentModel<f64> = AgentModel::init(micro_config(), seed).unwrap();
            let hp = Hyperparams { beta: 2.0, alpha: 0.5, ..Hyperparams::default() };
            let batch = LossBatch {
                obs: &mb.obs,
                next_obs: &mb.next,
                eps: &mb.eps,
                actions: &mb.actions,
                advantages: &mb.adv,
                returns: &mb.ret,
            };
            let sets = ["encoder", "decoder", "policy"];
            let flat = |m: &AgentModel<f64>| -> Vec<f64> {
                m.param_sets().iter().filter(|(n, _)| sets.contains(n)).flat_map(|(_, p)| p.flatten()).collect()
            };
            let load = |vals: &[f64]| {
                let mut m = base.clone();
                let mut off = 0;
                for (n, p) in m.param_sets_mut() {
                    if sets.contains(&n) {
                        off += p.assign_flat(&vals[off..]).unwrap();
                    }
                }
                m
            };
            let f = |vals: &[f64]| {
                let m = load(vals);
                let mut g = Graph::new();
                let v = m.loss_graph(&mut g, &batch, &hp).unwrap();
                g.value(v.total).item()
            };
            let mut g = Graph::new();
            let v = base.loss_graph(&mut g, &batch, &hp).unwrap();
            let grads = g.backward(v.total).unwrap();
            let analytic: Vec<f64> = base
                .param_sets()
                .iter()
                .filter(|(n, _)| sets.contains(n))
                .flat_map(|(_, p)| p.flatten_grads(&grads))
                .collect();
            let err = grad_check(f, &analytic, &flat(&base), 1e-6);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
