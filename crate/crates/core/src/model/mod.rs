//! Shared-encoder agent: encoder, reparameterization, action mapping,
//! next-state decoder, policy head and value head.
//!
//! The encoder output `h = [mu; logvar]` is the single feature consumed by
//! both the generative path and the actor-critic heads.

pub mod losses;
pub mod returns;

use serde::{Deserialize, Serialize};

use crate::env::{Observation, IMAGE_PIXELS};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax_in_place, Activation, Graph, ParamSet, Rng, Tensor, Var};
use crate::scalar::Scalar;

pub use losses::{
    a2c_policy_loss, ac_beta_vae_loss, action_map_table, critic_loss, kl_rows, kl_standard_normal, reconstruction_rows,
    total_loss, LossBatch, LossVars, PolicyLoss,
};
pub use returns::n_step_returns_and_advantages;

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Flattened observation size.
    #[serde(default = "default_obs_dim")]
    pub obs_dim: usize,
    /// Latent size `n`.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Number of action-mapped latent dims `m`.
    #[serde(default = "default_action_dim")]
    pub action_dim: usize,
    #[serde(default = "default_num_actions")]
    pub num_actions: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
}

fn default_obs_dim() -> usize {
    IMAGE_PIXELS
}
fn default_latent_dim() -> usize {
    10
}
fn default_action_dim() -> usize {
    4
}
fn default_num_actions() -> usize {
    9
}
fn default_encoder_hidden() -> Vec<usize> {
    vec![512, 256]
}
fn default_decoder_hidden() -> Vec<usize> {
    vec![256, 512]
}
fn default_head_hidden() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_dim: default_obs_dim(),
            latent_dim: default_latent_dim(),
            action_dim: default_action_dim(),
            num_actions: default_num_actions(),
            encoder_hidden: default_encoder_hidden(),
            decoder_hidden: default_decoder_hidden(),
            head_hidden: default_head_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.action_dim >= self.latent_dim {
            return Err(Error::Config(format!(
                "action_dim ({}) must be smaller than latent_dim ({})",
                self.action_dim, self.latent_dim
            )));
        }
        if self.action_dim == 0 || self.action_dim > crate::env::ACTION_DIM {
            return Err(Error::Config(format!(
                "action_dim must lie in 1..={}, got {}",
                crate::env::ACTION_DIM,
                self.action_dim
            )));
        }
        if self.num_actions != crate::env::DiscreteAction::COUNT {
            return Err(Error::Config(format!(
                "num_actions must be {}, got {}",
                crate::env::DiscreteAction::COUNT,
                self.num_actions
            )));
        }
        if self.obs_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// How actions enter the action-mapping vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMapMode {
    /// Unit vector of the action actually taken.
    #[default]
    Sampled,
    /// Expected action vector under the current policy.
    Probability,
}

/// Loss weights and return discounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_entropy_coef")]
    pub entropy_coef: f64,
    /// `false` decodes `z` alone (plain beta-VAE on `(s_t, s_{t+1})`).
    #[serde(default = "default_true")]
    pub action_map: bool,
    #[serde(default)]
    pub action_map_mode: ActionMapMode,
}

fn default_beta() -> f64 {
    20.0
}
fn default_alpha() -> f64 {
    0.01
}
fn default_gamma() -> f64 {
    0.99
}
fn default_entropy_coef() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            beta: default_beta(),
            alpha: default_alpha(),
            gamma: default_gamma(),
            entropy_coef: default_entropy_coef(),
            action_map: true,
            action_map_mode: ActionMapMode::Sampled,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.alpha >= 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("beta, alpha and entropy_coef must be non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Encoder output for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

impl<T: Scalar> LatentStats<T> {
    pub fn sigma(&self) -> Vec<T> {
        let half = T::lit(0.5);
        self.logvar.iter().map(|&lv| (half * lv).exp()).collect()
    }

    /// `concat(mu, logvar)`, the policy and value input.
    pub fn h(&self) -> Vec<T> {
        self.mu.iter().chain(&self.logvar).copied().collect()
    }

    pub fn from_h(h: &[T]) -> Self {
        let n = h.len() / 2;
        LatentStats {
            mu: h[..n].to_vec(),
            logvar: h[n..].to_vec(),
        }
    }
}

/// `z = mu + sigma * eps` with fresh standard normal `eps`.
pub fn reparameterize<T: Scalar>(stats: &LatentStats<T>, rng: &mut Rng) -> Vec<T> {
    let eps: Vec<T> = stats.mu.iter().map(|_| T::lit(rng.normal())).collect();
    reparameterize_with(stats, &eps)
}

pub fn reparameterize_with<T: Scalar>(stats: &LatentStats<T>, eps: &[T]) -> Vec<T> {
    stats
        .mu
        .iter()
        .zip(stats.sigma())
        .zip(eps)
        .map(|((&m, s), &e)| m + s * e)
        .collect()
}

/// Zero-pads an action vector to the latent size.
pub fn make_action_map<T: Scalar>(action: &[f64], latent_dim: usize) -> Result<Vec<T>> {
    if action.len() > latent_dim {
        return Err(Error::usage(format!(
            "action vector of length {} does not fit latent size {latent_dim}",
            action.len()
        )));
    }
    let mut out = vec![T::zero(); latent_dim];
    for (o, &a) in out.iter_mut().zip(action) {
        *o = T::lit(a);
    }
    Ok(out)
}

/// Graph handles produced by [`AgentModel::encode_graph`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub mu: Var,
    pub logvar: Var,
    pub h: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentModel<T> {
    pub config: ModelConfig,
    pub encoder: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub policy: ParamSet<T>,
    pub value: ParamSet<T>,
}

fn hidden_acts(hidden: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; hidden];
    acts.push(Activation::Identity);
    acts
}

impl<T: Scalar> AgentModel<T> {
    /// Fresh parameters; each parameter set draws from its own stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.latent_dim;
        let mut enc_sizes = vec![config.obs_dim];
        enc_sizes.extend(&config.encoder_hidden);
        enc_sizes.push(2 * n);
        let mut dec_sizes = vec![n];
        dec_sizes.extend(&config.decoder_hidden);
        dec_sizes.push(config.obs_dim);
        let encoder = ParamSet::init("encoder", &enc_sizes, &mut Rng::stream(seed, 10))?;
        let decoder = ParamSet::init("decoder", &dec_sizes, &mut Rng::stream(seed, 11))?;
        let policy = ParamSet::init(
            "policy",
            &[2 * n, config.head_hidden, config.num_actions],
            &mut Rng::stream(seed, 12),
        )?;
        let value = ParamSet::init("value", &[2 * n, config.head_hidden, 1], &mut Rng::stream(seed, 13))?;
        Ok(AgentModel {
            config,
            encoder,
            decoder,
            policy,
            value,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    pub fn param_sets(&self) -> [(&'static str, &ParamSet<T>); 4] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("policy", &self.policy),
            ("value", &self.value),
        ]
    }

    pub fn param_sets_mut(&mut self) -> [(&'static str, &mut ParamSet<T>); 4] {
        [
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
            ("policy", &mut self.policy),
            ("value", &mut self.value),
        ]
    }

    pub fn encoder_acts(&self) -> Vec<Activation> {
        hidden_acts(self.config.encoder_hidden.len())
    }

    pub fn decoder_acts(&self) -> Vec<Activation> {
        hidden_acts(self.config.decoder_hidden.len())
    }

    pub fn head_acts(&self) -> Vec<Activation> {
        hidden_acts(1)
    }

    /// Records `q(z|s)`: slices the raw output into `mu` and clamped `logvar`.
    pub fn encode_graph<'p>(&'p self, g: &mut Graph<'p, T>, obs: Var) -> Result<EncoderVars> {
        let n = self.latent_dim();
        let raw = self.encoder.forward(g, obs, &self.encoder_acts())?;
        let mu = g.slice_cols(raw, 0, n)?;
        let lv_raw = g.slice_cols(raw, n, 2 * n)?;
        let logvar = g.clamp(lv_raw, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        let h = g.concat_cols(mu, logvar)?;
        Ok(EncoderVars { mu, logvar, h })
    }

    /// `mu + exp(logvar / 2) * eps` with `eps` held constant.
    pub fn reparameterize_graph<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        enc: &EncoderVars,
        eps: Tensor<T>,
    ) -> Result<Var> {
        let e = g.constant(eps);
        let half = g.scale(enc.logvar, T::lit(0.5));
        let sigma = g.exp(half);
        let noise = g.mul(sigma, e)?;
        g.add(enc.mu, noise)
    }

    /// Decoder logits; probabilities are their sigmoid.
    pub fn decode_logits_graph<'p>(&'p self, g: &mut Graph<'p, T>, z_plus: Var) -> Result<Var> {
        self.decoder.forward(g, z_plus, &self.decoder_acts())
    }

    pub fn policy_logits_graph<'p>(&'p self, g: &mut Graph<'p, T>, h: Var) -> Result<Var> {
        self.policy.forward(g, h, &self.head_acts())
    }

    pub fn value_graph<'p>(&'p self, g: &mut Graph<'p, T>, h: Var) -> Result<Var> {
        self.value.forward(g, h, &self.head_acts())
    }

    fn check_obs(&self, obs: &Tensor<T>) -> Result<()> {
        if obs.cols() != self.config.obs_dim {
            return Err(Error::dim(
                "encoder input",
                &[obs.rows(), self.config.obs_dim],
                &[obs.rows(), obs.cols()],
            ));
        }
        Ok(())
    }

    /// Encodes a `[batch x obs_dim]` tensor.
    pub fn encode_batch(&self, obs: &Tensor<T>) -> Result<Vec<LatentStats<T>>> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let x = g.constant_ref(obs);
        let enc = self.encode_graph(&mut g, x)?;
        let (mu, lv) = (g.value(enc.mu), g.value(enc.logvar));
        Ok((0..mu.rows())
            .map(|r| LatentStats {
                mu: mu.row(r).to_vec(),
                logvar: lv.row(r).to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, obs: &Observation) -> Result<LatentStats<T>> {
        let batch = observations_to_tensor(&[obs])?;
        Ok(self.encode_batch(&batch)?.remove(0))
    }

    /// Per-pixel Bernoulli means for each row of `z_plus`.
    pub fn decode_batch(&self, z_plus: &Tensor<T>) -> Result<Tensor<T>> {
        if z_plus.cols() != self.latent_dim() {
            return Err(Error::dim(
                "decoder input",
                &[z_plus.rows(), self.latent_dim()],
                &[z_plus.rows(), z_plus.cols()],
            ));
        }
        let mut g = Graph::new();
        let z = g.constant_ref(z_plus);
        let logits = self.decode_logits_graph(&mut g, z)?;
        Ok(g.value(logits).map(sigmoid))
    }

    pub fn decode(&self, z_plus: &[T]) -> Result<Vec<T>> {
        let t = Tensor::matrix(1, z_plus.len(), z_plus.to_vec())?;
        Ok(self.decode_batch(&t)?.into_data())
    }

    /// Action probabilities for each row of `h`.
    pub fn policy_probs_batch(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_h(h)?;
        let mut g = Graph::new();
        let hv = g.constant_ref(h);
        let logits = self.policy_logits_graph(&mut g, hv)?;
        let mut out = g.value(logits).clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        Ok(out)
    }

    pub fn policy_probs(&self, h: &[T]) -> Result<Vec<T>> {
        let t = Tensor::matrix(1, h.len(), h.to_vec())?;
        Ok(self.policy_probs_batch(&t)?.into_data())
    }

    pub fn value_batch(&self, h: &Tensor<T>) -> Result<Vec<T>> {
        self.check_h(h)?;
        let mut g = Graph::new();
        let hv = g.constant_ref(h);
        let v = self.value_graph(&mut g, hv)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn value_of(&self, h: &[T]) -> Result<T> {
        let t = Tensor::matrix(1, h.len(), h.to_vec())?;
        Ok(self.value_batch(&t)?[0])
    }

    fn check_h(&self, h: &Tensor<T>) -> Result<()> {
        let width = 2 * self.latent_dim();
        if h.cols() != width {
            return Err(Error::dim("head input", &[h.rows(), width], &[h.rows(), h.cols()]));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.param_sets().iter().map(|(_, p)| p.num_params()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AgentModel<U> {
        let conv = |p: &ParamSet<T>| {
            ParamSet::from_layers(
                p.layers()
                    .iter()
                    .map(|l| crate::numerics::Dense {
                        name: l.name.clone(),
                        weight: l.weight.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect(),
            )
        };
        AgentModel {
            config: self.config.clone(),
            encoder: conv(&self.encoder),
            decoder: conv(&self.decoder),
            policy: conv(&self.policy),
            value: conv(&self.value),
        }
    }
}

/// Stacks observations into a `[batch x 4096]` tensor of zeros and ones.
pub fn observations_to_tensor<T: Scalar>(obs: &[&Observation]) -> Result<Tensor<T>> {
    if obs.is_empty() {
        return Err(Error::usage("empty observation batch"));
    }
    let mut data = Vec::with_capacity(obs.len() * IMAGE_PIXELS);
    for o in obs {
        data.extend(o.to_unit::<T>());
    }
    Tensor::matrix(obs.len(), IMAGE_PIXELS, data)
}
