//! Synchronous advantage actor-critic loop with the action-conditional
//! beta-VAE objective on the shared encoder.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{DiscreteAction, EnvConfig, Observation, SpritesEnv};
use crate::error::{Error, Result};
use crate::model::{n_step_returns_and_advantages, observations_to_tensor, AgentModel, Hyperparams, LossBatch};
use crate::numerics::{adam_step, Adam, Graph, Rng, Tensor};
use crate::persist::{save_checkpoint, Checkpoint, RunConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Environment steps summed over all parallel environments.
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_num_envs")]
    pub num_envs: usize,
    /// Rollout length `k` per update.
    #[serde(default = "default_rollout_len")]
    pub rollout_len: usize,
    /// Environment steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    /// Encoder and decoder learning rate.
    #[serde(default = "default_lr_vae")]
    pub lr_vae: f64,
    #[serde(default = "default_lr_heads")]
    pub lr_policy: f64,
    #[serde(default = "default_lr_heads")]
    pub lr_critic: f64,
    /// Uniform random behavior policy; only the encoder and decoder learn.
    #[serde(default)]
    pub vae_only: bool,
}

fn default_total_steps() -> u64 {
    200_000
}
fn default_num_envs() -> usize {
    8
}
fn default_rollout_len() -> usize {
    8
}
fn default_lr_vae() -> f64 {
    1e-4
}
fn default_lr_heads() -> f64 {
    7e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: default_total_steps(),
            num_envs: default_num_envs(),
            rollout_len: default_rollout_len(),
            checkpoint_every: 0,
            seed: 0,
            lr_vae: default_lr_vae(),
            lr_policy: default_lr_heads(),
            lr_critic: default_lr_heads(),
            vae_only: false,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_update(&self) -> u64 {
        (self.num_envs * self.rollout_len) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_envs == 0 || self.rollout_len == 0 {
            return Err(Error::Config("num_envs and rollout_len must be positive".into()));
        }
        if self.total_steps % self.steps_per_update() != 0 {
            return Err(Error::Config(format!(
                "total_steps ({}) must be divisible by num_envs * rollout_len ({})",
                self.total_steps,
                self.steps_per_update()
            )));
        }
        if self.checkpoint_every % self.steps_per_update() != 0 {
            return Err(Error::Config(format!(
                "checkpoint_every ({}) must be a multiple of num_envs * rollout_len ({})",
                self.checkpoint_every,
                self.steps_per_update()
            )));
        }
        for (name, lr) in [("lr_vae", self.lr_vae), ("lr_policy", self.lr_policy), ("lr_critic", self.lr_critic)] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        // config files store integers as signed 64-bit values
        if i64::try_from(self.seed).is_err() || i64::try_from(self.total_steps).is_err() {
            return Err(Error::Config(format!("seed and total_steps must not exceed {}", i64::MAX)));
        }
        Ok(())
    }
}

/// Losses and statistics of one update, all evaluated before the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Environment steps consumed so far, including this update's rollout.
    pub step: u64,
    pub update: u64,
    pub policy_loss: f64,
    pub ac_loss: f64,
    pub critic_loss: f64,
    pub mean_return: f64,
    pub mean_kl: f64,
    pub mean_recon: f64,
    pub entropy: f64,
    /// Mean return of episodes that ended during this rollout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_return: Option<f64>,
}

impl UpdateReport {
    fn all_finite(&self) -> bool {
        [
            self.policy_loss,
            self.ac_loss,
            self.critic_loss,
            self.mean_return,
            self.mean_kl,
            self.mean_recon,
            self.entropy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Behavior policy used while collecting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Learned,
    UniformRandom,
}

/// Parallel environments plus the generator that drives sampling and
/// episode seeds.
#[derive(Clone, Debug)]
pub struct EnvPool {
    envs: Vec<SpritesEnv>,
    obs: Vec<Observation>,
    running: Vec<f64>,
    rng: Rng,
}

impl EnvPool {
    pub fn new(config: EnvConfig, count: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, 20);
        let mut envs = Vec::with_capacity(count);
        let mut obs = Vec::with_capacity(count);
        for _ in 0..count {
            let mut env = SpritesEnv::new(config);
            obs.push(env.reset(rng.next_u64()).0);
            envs.push(env);
        }
        EnvPool {
            envs,
            obs,
            running: vec![0.0; count],
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[SpritesEnv] {
        &self.envs
    }
}

/// `k` synchronous steps of every environment, rows ordered step-major
/// (`row = t * E + e`).
#[derive(Clone, Debug)]
pub struct RolloutBatch<T> {
    pub num_envs: usize,
    pub len: usize,
    pub obs: Tensor<T>,
    pub next_obs: Tensor<T>,
    pub eps: Tensor<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<T>,
    pub dones: Vec<bool>,
    pub values: Vec<T>,
    pub h: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
    pub log_probs: Vec<T>,
    /// Value of the state after the last step, per environment.
    pub bootstrap: Vec<T>,
    pub returns: Vec<T>,
    pub advantages: Vec<T>,
    pub finished_episodes: Vec<f64>,
}

impl<T: Scalar> RolloutBatch<T> {
    pub fn rows(&self) -> usize {
        self.actions.len()
    }

    pub fn loss_batch(&self) -> LossBatch<'_, T> {
        LossBatch {
            obs: &self.obs,
            next_obs: &self.next_obs,
            eps: &self.eps,
            actions: &self.actions,
            advantages: &self.advantages,
            returns: &self.returns,
        }
    }
}

/// Runs every environment of `pool` for `k` steps under a fixed model.
pub fn collect_rollout<T: Scalar>(
    pool: &mut EnvPool,
    model: &AgentModel<T>,
    k: usize,
    behavior: Behavior,
    gamma: f64,
) -> Result<RolloutBatch<T>> {
    let e_count = pool.len();
    if e_count == 0 || k == 0 {
        return Err(Error::usage("rollout needs at least one environment and one step"));
    }
    let n = model.latent_dim();
    let rows = e_count * k;
    let mut obs_rows: Vec<Observation> = Vec::with_capacity(rows);
    let mut next_rows: Vec<Observation> = Vec::with_capacity(rows);
    let mut eps = Vec::with_capacity(rows * n);
    let mut actions = Vec::with_capacity(rows);
    let mut rewards = Vec::with_capacity(rows);
    let mut dones = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows);
    let mut hs = Vec::with_capacity(rows);
    let mut zs = Vec::with_capacity(rows);
    let mut log_probs = Vec::with_capacity(rows);
    let mut finished = Vec::new();

    let learned = behavior == Behavior::Learned;
    for _ in 0..k {
        // the uniform behavior ignores the encoding, so it is computed for
        // the whole rollout at once below
        let step_stats = if learned {
            let refs: Vec<&Observation> = pool.obs.iter().collect();
            let stats = model.encode_batch(&observations_to_tensor::<T>(&refs)?)?;
            let h = Tensor::matrix(e_count, 2 * n, stats.iter().flat_map(|s| s.h()).collect())?;
            Some((stats, model.policy_probs_batch(&h)?, model.value_batch(&h)?))
        } else {
            None
        };
        for e in 0..e_count {
            let a = match &step_stats {
                Some((_, probs, _)) => {
                    let p: Vec<f64> = probs.row(e).iter().map(|v| v.as_f64()).collect();
                    pool.rng.categorical(&p)
                }
                None => pool.rng.below(DiscreteAction::COUNT),
            };
            let noise: Vec<T> = (0..n).map(|_| T::lit(pool.rng.normal())).collect();
            if let Some((stats, probs, vals)) = &step_stats {
                zs.push(crate::model::reparameterize_with(&stats[e], &noise));
                hs.push(stats[e].h());
                values.push(vals[e]);
                log_probs.push(T::lit(probs.row(e)[a].as_f64().max(f64::MIN_POSITIVE).ln()));
            }
            eps.extend(noise);
            let action = DiscreteAction::from_index(a).expect("policy over nine actions");
            let tr = pool.envs[e].step(action)?;
            pool.running[e] += tr.reward;
            obs_rows.push(pool.obs[e].clone());
            next_rows.push(tr.next_obs.clone());
            actions.push(a);
            rewards.push(T::lit(tr.reward));
            dones.push(tr.done);
            pool.obs[e] = if tr.done {
                finished.push(pool.running[e]);
                pool.running[e] = 0.0;
                let seed = pool.rng.next_u64();
                pool.envs[e].reset(seed).0
            } else {
                tr.next_obs
            };
        }
    }
    let obs_refs: Vec<&Observation> = obs_rows.iter().collect();
    let obs_tensor = observations_to_tensor(&obs_refs)?;
    if !learned {
        let stats = model.encode_batch(&obs_tensor)?;
        let h = Tensor::matrix(rows, 2 * n, stats.iter().flat_map(|s| s.h()).collect())?;
        let probs = model.policy_probs_batch(&h)?;
        let vals = model.value_batch(&h)?;
        for (i, st) in stats.iter().enumerate() {
            zs.push(crate::model::reparameterize_with(st, &eps[i * n..(i + 1) * n]));
            hs.push(st.h());
            values.push(vals[i]);
            log_probs.push(T::lit(probs.row(i)[actions[i]].as_f64().max(f64::MIN_POSITIVE).ln()));
        }
    }

    let refs: Vec<&Observation> = pool.obs.iter().collect();
    let stats = model.encode_batch(&observations_to_tensor::<T>(&refs)?)?;
    let h = Tensor::matrix(e_count, 2 * n, stats.iter().flat_map(|s| s.h()).collect())?;
    let bootstrap = model.value_batch(&h)?;

    let mut returns = vec![T::zero(); rows];
    let mut advantages = vec![T::zero(); rows];
    for e in 0..e_count {
        let idx: Vec<usize> = (0..k).map(|t| t * e_count + e).collect();
        let r: Vec<T> = idx.iter().map(|&i| rewards[i]).collect();
        let v: Vec<T> = idx.iter().map(|&i| values[i]).collect();
        let d: Vec<bool> = idx.iter().map(|&i| dones[i]).collect();
        let (ret, adv) = n_step_returns_and_advantages(&r, &v, &d, bootstrap[e], T::lit(gamma))?;
        for (j, &i) in idx.iter().enumerate() {
            returns[i] = ret[j];
            advantages[i] = adv[j];
        }
    }

    let next_refs: Vec<&Observation> = next_rows.iter().collect();
    Ok(RolloutBatch {
        num_envs: e_count,
        len: k,
        obs: obs_tensor,
        next_obs: observations_to_tensor(&next_refs)?,
        eps: Tensor::matrix(rows, n, eps)?,
        actions,
        rewards,
        dones,
        values,
        h: hs,
        z: zs,
        log_probs,
        bootstrap,
        returns,
        advantages,
        finished_episodes: finished,
    })
}

/// Learning rates for the four parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimizers {
    pub vae: Adam,
    pub policy: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Optimizers {
            vae: Adam::with_lr(cfg.lr_vae),
            policy: Adam::with_lr(cfg.lr_policy),
            critic: Adam::with_lr(cfg.lr_critic),
        }
    }
}

/// Evaluates every report quantity on the current parameters without
/// changing them.
pub fn evaluate_losses<T: Scalar>(
    model: &AgentModel<T>,
    batch: &RolloutBatch<T>,
    hp: &Hyperparams,
) -> Result<UpdateReport> {
    let lb = batch.loss_batch();
    let mut g = Graph::new();
    let vars = model.loss_graph(&mut g, &lb, hp)?;
    Ok(report_from(&g, &vars, batch))
}

fn mean_of<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64
}

fn report_from<T: Scalar>(g: &Graph<'_, T>, vars: &crate::model::LossVars, batch: &RolloutBatch<T>) -> UpdateReport {
    let finished = &batch.finished_episodes;
    UpdateReport {
        step: 0,
        update: 0,
        policy_loss: g.value(vars.policy.loss).item().as_f64(),
        ac_loss: g.value(vars.ac).item().as_f64(),
        critic_loss: g.value(vars.critic).item().as_f64(),
        mean_return: batch.returns.iter().map(|v| v.as_f64()).sum::<f64>() / batch.returns.len() as f64,
        mean_kl: mean_of(g.value(vars.kl_rows)),
        mean_recon: mean_of(g.value(vars.recon_rows)),
        entropy: g.value(vars.policy.entropy).item().as_f64(),
        episode_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
    }
}

/// One Adam step on encoder, decoder and policy from the total loss and one
/// on the value head from the critic loss. With `vae_only` the objective is
/// the action-conditional beta-VAE loss alone and both heads stay fixed.
pub fn train_update<T: Scalar>(
    model: &mut AgentModel<T>,
    batch: &RolloutBatch<T>,
    hp: &Hyperparams,
    opt: &Optimizers,
    vae_only: bool,
) -> Result<UpdateReport> {
    let (report, grads, critic_grads) = {
        let lb = batch.loss_batch();
        let mut g = Graph::new();
        let vars = model.loss_graph(&mut g, &lb, hp)?;
        let report = report_from(&g, &vars, batch);
        if !report.all_finite() {
            return Err(Error::Training {
                param: "loss".into(),
                reason: format!("non-finite loss: {report:?}"),
            });
        }
        let objective = if vae_only { vars.ac } else { vars.total };
        let grads = g.backward(objective)?;
        let critic = if vae_only { None } else { Some(g.backward(vars.critic)?) };
        (report, grads, critic)
    };
    adam_step(&mut model.encoder, &grads, &opt.vae)?;
    adam_step(&mut model.decoder, &grads, &opt.vae)?;
    if let Some(cg) = critic_grads {
        adam_step(&mut model.policy, &grads, &opt.policy)?;
        adam_step(&mut model.value, &cg, &opt.critic)?;
    }
    Ok(report)
}

/// Where a run writes its artifacts.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
}

/// Full training run. Reports go to `reports.jsonl` and checkpoints to
/// `checkpoint-<step>.json` / `checkpoint.json` under `out` when given.
pub fn train<T: Scalar>(
    config: &RunConfig,
    out: Option<RunOutput<'_>>,
    mut on_report: impl FnMut(&UpdateReport),
) -> Result<Checkpoint<T>> {
    config.validate()?;
    let tc = &config.train;
    let mut model: AgentModel<T> = AgentModel::init(config.model.clone(), tc.seed)?;
    let mut pool = EnvPool::new(config.env, tc.num_envs, tc.seed);
    let opt = Optimizers::from_config(tc);
    let behavior = if tc.vae_only {
        Behavior::UniformRandom
    } else {
        Behavior::Learned
    };

    let mut log = match &out {
        Some(o) => {
            fs::create_dir_all(o.dir)?;
            Some(BufWriter::new(File::create(o.dir.join("reports.jsonl"))?))
        }
        None => None,
    };
    let updates = tc.total_steps / tc.steps_per_update();
    let mut step = 0u64;
    let snapshot = |model: &AgentModel<T>, step: u64| Checkpoint {
        config: config.clone(),
        seed: tc.seed,
        step_count: step,
        model: model.clone(),
    };
    for u in 0..updates {
        let batch = collect_rollout(&mut pool, &model, tc.rollout_len, behavior, config.loss.gamma)?;
        step += tc.steps_per_update();
        let result = train_update(&mut model, &batch, &config.loss, &opt, tc.vae_only);
        let mut report = match result {
            Ok(r) => r,
            Err(e) => {
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                return Err(e);
            }
        };
        report.step = step;
        report.update = u + 1;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &report)?;
            w.write_all(b"\n")?;
        }
        on_report(&report);
        if let Some(o) = &out {
            if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step < tc.total_steps {
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                save_checkpoint(&o.dir.join(format!("checkpoint-{step}.json")), &snapshot(&model, step))?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let ckpt = snapshot(&model, step);
    if let Some(o) = &out {
        save_checkpoint(&o.dir.join("checkpoint.json"), &ckpt)?;
    }
    Ok(ckpt)
}

/// Episode returns of `episodes` full episodes, each seeded from `seed`.
pub fn evaluate_returns<T: Scalar>(
    model: &AgentModel<T>,
    env: EnvConfig,
    episodes: usize,
    seed: u64,
    behavior: Behavior,
) -> Result<Vec<f64>> {
    let mut rng = Rng::stream(seed, 30);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut sim = SpritesEnv::new(env);
        let mut obs = sim.reset(rng.next_u64()).0;
        let mut total = 0.0;
        loop {
            let a = match behavior {
                Behavior::UniformRandom => rng.below(DiscreteAction::COUNT),
                Behavior::Learned => {
                    let h = model.encode(&obs)?.h();
                    let p: Vec<f64> = model.policy_probs(&h)?.iter().map(|v| v.as_f64()).collect();
                    rng.categorical(&p)
                }
            };
            let tr = sim.step(DiscreteAction::from_index(a).expect("nine actions"))?;
            total += tr.reward;
            if tr.done {
                break;
            }
            obs = tr.next_obs;
        }
        out.push(total);
    }
    Ok(out)
}
