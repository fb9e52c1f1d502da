//! Latent traversals, per-dimension effect sizes, and rollouts whose policy
//! input is edited by latent overrides.

mod frame;

use serde::{Deserialize, Serialize};

use crate::env::{DiscreteAction, EnvConfig, FactorState, Observation, SpritesEnv, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::model::{make_action_map, AgentModel, LatentStats};
use crate::numerics::Rng;
use crate::scalar::Scalar;

pub use frame::Frame;

/// One latent override: 1-based dim and the value its mean is set to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub dim: usize,
    pub value: f64,
}

fn check_dims(overrides: &[Override], n: usize) -> Result<()> {
    for o in overrides {
        if o.dim == 0 || o.dim > n {
            return Err(Error::usage(format!("overrides: dim {} outside 1..={n}", o.dim)));
        }
        if !o.value.is_finite() {
            return Err(Error::usage(format!("overrides: value for dim {} is not finite", o.dim)));
        }
    }
    Ok(())
}

fn apply<T: Scalar>(stats: &LatentStats<T>, overrides: &[Override]) -> LatentStats<T> {
    let mut out = stats.clone();
    for o in overrides {
        out.mu[o.dim - 1] = T::lit(o.value);
    }
    out
}

/// `decode(mu + a^map)` as probabilities in `f64`.
fn decode_mean<T: Scalar>(model: &AgentModel<T>, mu: &[T], action: DiscreteAction) -> Result<Vec<f64>> {
    let m = model.action_dim();
    let head: Vec<f64> = action.to_vector().0[..m].to_vec();
    let amap: Vec<T> = make_action_map(&head, model.latent_dim())?;
    let z: Vec<T> = mu.iter().zip(&amap).map(|(&a, &b)| a + b).collect();
    Ok(model.decode(&z)?.iter().map(|v| v.as_f64()).collect())
}

fn probs_f64<T: Scalar>(model: &AgentModel<T>, stats: &LatentStats<T>) -> Result<Vec<f64>> {
    Ok(model.policy_probs(&stats.h())?.iter().map(|v| v.as_f64()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalSpec {
    /// 1-based latent dim.
    pub dim: usize,
    pub grid: Vec<f64>,
    /// Set the other action-mapped means to zero.
    #[serde(default)]
    pub zero_other_mapped: bool,
    /// Action whose mapping vector is added before decoding.
    #[serde(default = "noop")]
    pub action: DiscreteAction,
}

fn noop() -> DiscreteAction {
    DiscreteAction::Noop
}

impl TraversalSpec {
    /// `steps` evenly spaced values from `min` to `max`.
    pub fn linspace(dim: usize, min: f64, max: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(min.is_finite() && max.is_finite()) || (steps > 1 && !(max > min)) {
            return Err(Error::usage(format!("invalid traversal grid {min}..{max} with {steps} steps")));
        }
        let grid = (0..steps)
            .map(|i| {
                if steps == 1 {
                    min
                } else {
                    min + (max - min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(TraversalSpec {
            dim,
            grid,
            zero_other_mapped: false,
            action: DiscreteAction::Noop,
        })
    }

    /// The reference range `[-2, 2]` with nine points.
    pub fn standard(dim: usize) -> Self {
        Self::linspace(dim, -2.0, 2.0, 9).expect("static grid")
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.dim == 0 || self.dim > n {
            return Err(Error::usage(format!("dim {} outside 1..={n}", self.dim)));
        }
        if self.grid.is_empty() || self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("traversal grid must be non-empty and finite"));
        }
        if self.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::usage("traversal grid must be increasing"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalPoint {
    pub value: f64,
    /// Decoded 64x64 probabilities.
    pub image: Vec<f64>,
    /// Policy over the nine actions given the edited `h`.
    pub policy: Vec<f64>,
}

/// Sweeps `mu[dim]` over the grid with `z = mu` and decodes each point.
pub fn traverse<T: Scalar>(
    model: &AgentModel<T>,
    base: &LatentStats<T>,
    spec: &TraversalSpec,
) -> Result<Vec<TraversalPoint>> {
    let n = model.latent_dim();
    spec.validate(n)?;
    if base.mu.len() != n {
        return Err(Error::dim("traversal base", &[n], &[base.mu.len()]));
    }
    let mut start = base.clone();
    if spec.zero_other_mapped {
        for i in 0..model.action_dim() {
            if i + 1 != spec.dim {
                start.mu[i] = T::zero();
            }
        }
    }
    spec.grid
        .iter()
        .map(|&v| {
            let stats = apply(&start, &[Override { dim: spec.dim, value: v }]);
            Ok(TraversalPoint {
                value: v,
                image: decode_mean(model, &stats.mu, spec.action)?,
                policy: probs_f64(model, &stats)?,
            })
        })
        .collect()
}

/// Zero latent with unit variance, the base used when no observation is given.
pub fn zero_base<T: Scalar>(n: usize) -> LatentStats<T> {
    LatentStats {
        mu: vec![T::zero(); n],
        logvar: vec![T::zero(); n],
    }
}

/// Summary columns of [`EffectReport`].
pub const SUMMARIES: [&str; 5] = ["heart_x", "heart_y", "heart_scale", "heart_rot", "distractor_variance"];

/// Heart pose estimate from a decoded frame: centroid, size and
/// second-moment orientation of the pixels above one half, plus the pixel
/// variance of the remaining region.
pub fn image_summary(image: &[f64]) -> [f64; 5] {
    let side = IMAGE_SIDE as f64;
    let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &p) in image.iter().enumerate() {
        if p > 0.5 {
            let (r, c) = ((i / IMAGE_SIDE) as f64 + 0.5, (i % IMAGE_SIDE) as f64 + 0.5);
            w += 1.0;
            sx += c;
            sy += r;
        }
    }
    let (cx, cy) = if w > 0.0 { (sx / w, sy / w) } else { (side / 2.0, side / 2.0) };
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    let (mut bg_n, mut bg_s, mut bg_ss) = (0.0, 0.0, 0.0);
    for (i, &p) in image.iter().enumerate() {
        if p > 0.5 {
            let (r, c) = ((i / IMAGE_SIDE) as f64 + 0.5, (i % IMAGE_SIDE) as f64 + 0.5);
            m20 += (c - cx).powi(2);
            m02 += (r - cy).powi(2);
            m11 += (c - cx) * (r - cy);
        } else {
            bg_n += 1.0;
            bg_s += p;
            bg_ss += p * p;
        }
    }
    let orientation = if w > 0.0 { 0.5 * (2.0 * m11).atan2(m20 - m02) / std::f64::consts::PI } else { 0.0 };
    let bg_var = if bg_n > 0.0 { (bg_ss / bg_n - (bg_s / bg_n).powi(2)).max(0.0) } else { 0.0 };
    [cx / side, cy / side, w.sqrt() / side, orientation, bg_var]
}

/// `S[i][k]`: std of summary `k` across the grid of dim `i + 1`, averaged
/// over the base latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub summaries: Vec<String>,
    pub std: Vec<Vec<f64>>,
    pub bases: usize,
    pub grid: Vec<f64>,
}

impl EffectReport {
    /// Mean over the given 1-based dims of the four heart summary stds.
    pub fn mean_heart_std(&self, dims: impl IntoIterator<Item = usize>) -> f64 {
        let (mut s, mut k) = (0.0, 0usize);
        for d in dims {
            s += self.std[d - 1][..4].iter().sum::<f64>();
            k += 4;
        }
        if k == 0 {
            0.0
        } else {
            s / k as f64
        }
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Traverses every dim from every base and reports summary spreads.
///
/// Per-base contributions are summed in sorted order, so the report does not
/// depend on the order of `bases`.
pub fn effect_report<T: Scalar>(
    model: &AgentModel<T>,
    bases: &[LatentStats<T>],
    grid: &[f64],
) -> Result<EffectReport> {
    if bases.is_empty() {
        return Err(Error::usage("effect report needs at least one base latent"));
    }
    let n = model.latent_dim();
    let mut std = vec![vec![0.0; SUMMARIES.len()]; n];
    for (dim, row) in std.iter_mut().enumerate() {
        let spec = TraversalSpec {
            dim: dim + 1,
            grid: grid.to_vec(),
            zero_other_mapped: false,
            action: DiscreteAction::Noop,
        };
        let mut per_base: Vec<[f64; 5]> = Vec::with_capacity(bases.len());
        for b in bases {
            let sums: Vec<[f64; 5]> = traverse(model, b, &spec)?.iter().map(|p| image_summary(&p.image)).collect();
            let mut s = [0.0; 5];
            for (k, slot) in s.iter_mut().enumerate() {
                *slot = std_dev(&sums.iter().map(|x| x[k]).collect::<Vec<_>>());
            }
            per_base.push(s);
        }
        for (k, slot) in row.iter_mut().enumerate() {
            let mut vals: Vec<f64> = per_base.iter().map(|s| s[k]).collect();
            vals.sort_by(f64::total_cmp);
            *slot = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    Ok(EffectReport {
        summaries: SUMMARIES.iter().map(|s| s.to_string()).collect(),
        std,
        bases: bases.len(),
        grid: grid.to_vec(),
    })
}

/// How the decoded action is chosen in [`predict_with_override`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionChoice {
    Given(DiscreteAction),
    /// Drawn from the edited policy with a generator seeded by the value.
    Sample(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Decoded next-state probabilities.
    pub image: Vec<f64>,
    pub policy: Vec<f64>,
    pub value: f64,
    pub action: DiscreteAction,
    /// Means after overrides.
    pub mu: Vec<f64>,
}

impl Prediction {
    pub fn frame(&self) -> Frame {
        Frame::from_probabilities(&self.image)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.policy)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Encodes `obs`, overrides means, and reports the edited policy, value and
/// the decoded consequence of the chosen action.
pub fn predict_with_override<T: Scalar>(
    model: &AgentModel<T>,
    obs: &Observation,
    overrides: &[Override],
    action: ActionChoice,
) -> Result<Prediction> {
    check_dims(overrides, model.latent_dim())?;
    let stats = apply(&model.encode(obs)?, overrides);
    predict_from_stats(model, &stats, action)
}

pub fn predict_from_stats<T: Scalar>(
    model: &AgentModel<T>,
    stats: &LatentStats<T>,
    action: ActionChoice,
) -> Result<Prediction> {
    let policy = probs_f64(model, stats)?;
    let action = match action {
        ActionChoice::Given(a) => a,
        ActionChoice::Sample(seed) => {
            DiscreteAction::from_index(Rng::stream(seed, 90).categorical(&policy)).expect("nine actions")
        }
    };
    Ok(Prediction {
        image: decode_mean(model, &stats.mu, action)?,
        value: model.value_of(&stats.h())?.as_f64(),
        policy,
        action,
        mu: stats.mu.iter().map(|v| v.as_f64()).collect(),
    })
}

/// One `(steps, dim, value)` pin: active for `start <= t < end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub start: usize,
    pub end: usize,
    pub dim: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverrideSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl OverrideSchedule {
    pub fn pin(dim: usize, value: f64, steps: usize) -> Self {
        OverrideSchedule {
            entries: vec![ScheduleEntry {
                start: 0,
                end: steps,
                dim,
                value,
            }],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for e in &self.entries {
            if e.dim == 0 || e.dim > n {
                return Err(Error::usage(format!("schedule: dim {} outside 1..={n}", e.dim)));
            }
            if e.start >= e.end {
                return Err(Error::usage(format!("schedule: empty step range {}..{}", e.start, e.end)));
            }
            if !e.value.is_finite() {
                return Err(Error::usage("schedule: values must be finite"));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                if a.dim == b.dim && a.start < b.end && b.start < a.end {
                    return Err(Error::usage(format!("schedule: overlapping ranges for dim {}", a.dim)));
                }
            }
        }
        Ok(())
    }

    /// Overrides in force at step `t`, ordered by dim.
    pub fn at(&self, t: usize) -> Vec<Override> {
        let mut out: Vec<Override> = self
            .entries
            .iter()
            .filter(|e| e.start <= t && t < e.end)
            .map(|e| Override {
                dim: e.dim,
                value: e.value,
            })
            .collect();
        out.sort_by_key(|o| o.dim);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub action: DiscreteAction,
    pub reward: f64,
    pub done: bool,
    /// Policy the action was drawn from.
    pub policy: Vec<f64>,
    pub applied_overrides: Vec<Override>,
    /// Frame after the step.
    pub frame: Frame,
    pub factors: FactorState,
}

/// Environment, sampling stream and step counter of one governed episode.
/// The command line and the service drive episodes through this type.
#[derive(Clone, Debug)]
pub struct GovernedEpisode {
    env: SpritesEnv,
    rng: Rng,
    seed: u64,
    step_index: usize,
}

impl GovernedEpisode {
    pub fn new(env: EnvConfig, seed: u64) -> Self {
        let mut sim = SpritesEnv::new(env);
        sim.reset(seed);
        GovernedEpisode {
            env: sim,
            rng: Rng::stream(seed, 80),
            seed,
            step_index: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn observation(&self) -> &Observation {
        self.env.observation()
    }

    pub fn factors(&self) -> &FactorState {
        self.env.factors()
    }

    pub fn is_done(&self) -> bool {
        self.env.is_done()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Acts with the policy on the overridden encoding, or with `action`
    /// when given. The policy is evaluated either way so the record carries
    /// it.
    pub fn step<T: Scalar>(
        &mut self,
        model: &AgentModel<T>,
        overrides: &[Override],
        action: Option<DiscreteAction>,
    ) -> Result<StepRecord> {
        check_dims(overrides, model.latent_dim())?;
        if self.env.is_done() {
            return Err(Error::Protocol("step called after the episode finished".into()));
        }
        let stats = apply(&model.encode(self.env.observation())?, overrides);
        let policy = probs_f64(model, &stats)?;
        let action = match action {
            Some(a) => a,
            None => DiscreteAction::from_index(self.rng.categorical(&policy)).expect("nine actions"),
        };
        let tr = self.env.step(action)?;
        let record = StepRecord {
            step_index: self.step_index,
            action,
            reward: tr.reward,
            done: tr.done,
            policy,
            applied_overrides: overrides.to_vec(),
            frame: Frame::from_observation(&tr.next_obs),
            factors: tr.next_factors,
        };
        self.step_index += 1;
        Ok(record)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub schedule: OverrideSchedule,
    pub initial_frame: Frame,
    pub initial_factors: FactorState,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    /// Net heart displacement along x over the episode.
    pub fn horizontal_displacement(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.factors.heart.x) - self.initial_factors.heart.x
    }
}

/// Runs a full episode with the policy acting on overridden encodings.
pub fn govern_rollout<T: Scalar>(
    model: &AgentModel<T>,
    env: EnvConfig,
    schedule: &OverrideSchedule,
    seed: u64,
) -> Result<EpisodeTrace> {
    schedule.validate(model.latent_dim())?;
    let mut ep = GovernedEpisode::new(env, seed);
    let mut trace = EpisodeTrace {
        seed,
        schedule: schedule.clone(),
        initial_frame: Frame::from_observation(ep.observation()),
        initial_factors: *ep.factors(),
        steps: Vec::new(),
    };
    while !ep.is_done() {
        let overrides = schedule.at(ep.step_index());
        trace.steps.push(ep.step(model, &overrides, None)?);
    }
    Ok(trace)
}

/// Re-runs a trace's seed and schedule and checks every record matches.
pub fn replay_matches<T: Scalar>(model: &AgentModel<T>, env: EnvConfig, trace: &EpisodeTrace) -> Result<bool> {
    Ok(&govern_rollout(model, env, &trace.schedule, trace.seed)? == trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor;

    fn model() -> AgentModel<f32> {
        AgentModel::init(
            ModelConfig {
                encoder_hidden: vec![16],
                decoder_hidden: vec![16],
                head_hidden: 8,
                ..ModelConfig::default()
            },
            7,
        )
        .unwrap()
    }

    fn base(m: &AgentModel<f32>, seed: u64) -> LatentStats<f32> {
        let mut env = SpritesEnv::new(EnvConfig::default());
        m.encode(&env.reset(seed).0).unwrap()
    }

    #[test]
    fn nine_point_grid_gives_nine_images() {
        let m = model();
        let pts = traverse(&m, &base(&m, 1), &TraversalSpec::standard(3)).unwrap();
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().all(|p| p.image.len() == 4096 && p.policy.len() == 9));
        assert_eq!(pts[0].value, -2.0);
        assert_eq!(pts[8].value, 2.0);
        assert!((pts[4].value).abs() < 1e-15);
    }

    #[test]
    fn repeated_grid_values_repeat_images() {
        let m = model();
        let spec = TraversalSpec {
            grid: vec![0.5, 0.5],
            ..TraversalSpec::standard(1)
        };
        let pts = traverse(&m, &base(&m, 2), &spec).unwrap();
        assert_eq!(pts[0].image, pts[1].image);
    }

    #[test]
    fn traversal_at_base_value_reproduces_plain_decode() {
        let m = model();
        let b = base(&m, 3);
        let spec = TraversalSpec {
            grid: vec![b.mu[4] as f64],
            ..TraversalSpec::standard(5)
        };
        let pts = traverse(&m, &b, &spec).unwrap();
        let plain: Vec<f64> = m.decode(&b.mu).unwrap().iter().map(|&v| v as f64).collect();
        assert_eq!(pts[0].image, plain);
    }

    #[test]
    fn out_of_range_dims_are_usage_errors() {
        let m = model();
        let b = base(&m, 1);
        assert!(matches!(traverse(&m, &b, &TraversalSpec::standard(0)), Err(Error::Usage(_))));
        assert!(matches!(traverse(&m, &b, &TraversalSpec::standard(11)), Err(Error::Usage(_))));
        let mut env = SpritesEnv::new(EnvConfig::default());
        let obs = env.reset(1).0;
        let err = predict_with_override(&m, &obs, &[Override { dim: 11, value: 0.0 }], ActionChoice::Sample(0));
        assert!(matches!(err, Err(Error::Usage(ref msg)) if msg.contains("overrides")));
    }

    #[test]
    fn identity_overrides_match_plain_prediction() {
        let m = model();
        let mut env = SpritesEnv::new(EnvConfig::default());
        let obs = env.reset(4).0;
        let plain = predict_with_override(&m, &obs, &[], ActionChoice::Given(DiscreteAction::Left)).unwrap();
        let stats = m.encode(&obs).unwrap();
        let own: Vec<Override> = stats
            .mu
            .iter()
            .enumerate()
            .map(|(i, &v)| Override {
                dim: i + 1,
                value: v as f64,
            })
            .collect();
        let same = predict_with_override(&m, &obs, &own, ActionChoice::Given(DiscreteAction::Left)).unwrap();
        assert_eq!(plain, same);
        let a = predict_with_override(&m, &obs, &[], ActionChoice::Sample(9)).unwrap();
        let b = predict_with_override(&m, &obs, &[], ActionChoice::Sample(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn summary_of_rendered_heart_tracks_pose() {
        use crate::env::{render_heart, Pose};
        let pose = Pose {
            x: 0.3,
            y: 0.6,
            scale: 0.15,
            rot: 0.0,
        };
        let img: Vec<f64> = render_heart(&pose).pixels().iter().map(|&p| p as f64).collect();
        let s = image_summary(&img);
        assert!((s[0] - 0.3).abs() < 0.02, "{s:?}");
        // the lobes pull the centroid above the implicit-curve origin
        assert!((s[1] - 0.6).abs() < 0.05, "{s:?}");
        assert_eq!(s[4], 0.0);
    }

    #[test]
    fn constant_decoder_has_no_effects() {
        let mut m = model();
        for l in m.decoder.layers_mut() {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let bases: Vec<_> = (0..3).map(|s| base(&m, s)).collect();
        let r = effect_report(&m, &bases, &TraversalSpec::standard(1).grid).unwrap();
        assert!(r.std.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn effect_report_ignores_base_order() {
        let m = model();
        let bases: Vec<_> = (0..4).map(|s| base(&m, s)).collect();
        let mut rev = bases.clone();
        rev.reverse();
        let grid = TraversalSpec::standard(1).grid;
        let a = effect_report(&m, &bases, &grid).unwrap();
        let b = effect_report(&m, &rev, &grid).unwrap();
        assert_eq!(a, b);
        assert!(a.std.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn empty_schedule_matches_ungoverned_episode() {
        let m = model();
        let env = EnvConfig {
            horizon: 12,
            ..EnvConfig::default()
        };
        let a = govern_rollout(&m, env, &OverrideSchedule::default(), 5).unwrap();
        let mut ep = GovernedEpisode::new(env, 5);
        let mut steps = Vec::new();
        while !ep.is_done() {
            steps.push(ep.step(&m, &[], None).unwrap());
        }
        assert_eq!(a.steps, steps);
        assert_eq!(a.steps.len(), 12);
    }

    #[test]
    fn traces_replay_from_json() {
        let m = model();
        let env = EnvConfig {
            horizon: 10,
            ..EnvConfig::default()
        };
        let sched = OverrideSchedule {
            entries: vec![
                ScheduleEntry {
                    start: 0,
                    end: 5,
                    dim: 2,
                    value: 2.0,
                },
                ScheduleEntry {
                    start: 3,
                    end: 10,
                    dim: 1,
                    value: -1.0,
                },
            ],
        };
        let trace = govern_rollout(&m, env, &sched, 8).unwrap();
        assert_eq!(trace.steps[4].applied_overrides.len(), 2);
        assert_eq!(trace.steps[6].applied_overrides, vec![Override { dim: 1, value: -1.0 }]);
        let json = serde_json::to_string(&trace).unwrap();
        let back: EpisodeTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, trace);
        assert!(replay_matches(&m, env, &back).unwrap());
        assert_eq!(govern_rollout(&m, env, &sched, 8).unwrap(), trace);
    }

    #[test]
    fn schedule_validation() {
        let overlap = OverrideSchedule {
            entries: vec![
                ScheduleEntry {
                    start: 0,
                    end: 5,
                    dim: 2,
                    value: 1.0,
                },
                ScheduleEntry {
                    start: 4,
                    end: 8,
                    dim: 2,
                    value: 0.0,
                },
            ],
        };
        assert!(overlap.validate(10).is_err());
        assert!(OverrideSchedule::pin(11, 1.0, 5).validate(10).is_err());
        assert!(OverrideSchedule::pin(10, 1.0, 5).validate(10).is_ok());
    }

    #[test]
    fn stepping_a_finished_episode_is_a_protocol_error() {
        let m = model();
        let env = EnvConfig {
            horizon: 1,
            ..EnvConfig::default()
        };
        let mut ep = GovernedEpisode::new(env, 0);
        ep.step(&m, &[], None).unwrap();
        assert!(matches!(ep.step(&m, &[], None), Err(Error::Protocol(_))));
    }
}
