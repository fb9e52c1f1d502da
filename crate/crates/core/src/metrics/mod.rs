//! Disentanglement and completeness of latent codes with respect to the
//! heart's ground-truth factors, from regression-forest importances.

pub mod forest;

use serde::{Deserialize, Serialize};

use crate::env::{DiscreteAction, EnvConfig, Observation, SpritesEnv, POS_RANGE, SCALE_RANGE};
use crate::error::{Error, Result};
use crate::model::{observations_to_tensor, AgentModel};
use crate::numerics::Rng;
use crate::scalar::Scalar;

pub use forest::{Features, ForestParams, RegressionForest, RegressionTree};

/// Factor names, in column order of [`ImportanceMatrix`].
pub const FACTORS: [&str; 4] = ["x", "y", "scale", "rot"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default = "default_trees")]
    pub trees: usize,
    /// Candidate depths; the one with the lowest validation error is used.
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    /// Features per split; 0 means a third of the code size.
    #[serde(default)]
    pub max_features: usize,
    /// Random actions taken after each reset, drawn uniformly from `0..=max`.
    #[serde(default = "default_max_actions")]
    pub max_random_actions: usize,
}

fn default_samples() -> usize {
    10_000
}
fn default_validation() -> f64 {
    0.2
}
fn default_trees() -> usize {
    20
}
fn default_depths() -> Vec<usize> {
    vec![2, 4, 8, 16]
}
fn default_max_actions() -> usize {
    4
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            samples: default_samples(),
            validation_fraction: default_validation(),
            trees: default_trees(),
            depths: default_depths(),
            max_features: 0,
            max_random_actions: default_max_actions(),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.trees == 0 || self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::Config("trees and depths must be positive".into()));
        }
        Ok(())
    }
}

/// Codes and ground-truth heart factors, one row per sampled state.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationDataset {
    pub code_dim: usize,
    /// `[N x code_dim]`.
    pub codes: Vec<f64>,
    /// `[N x 4]` raw factors: x, y, scale, rot.
    pub factors: Vec<[f64; 4]>,
}

impl RepresentationDataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn code(&self, i: usize) -> &[f64] {
        &self.codes[i * self.code_dim..(i + 1) * self.code_dim]
    }

    /// Regression targets scaled to `[0, 1]`: x, y, scale, and rotation as
    /// the pair `(sin + 1) / 2`, `(cos + 1) / 2`.
    pub fn targets(&self) -> [Vec<f64>; 5] {
        let norm = |v: f64, r: (f64, f64)| (v - r.0) / (r.1 - r.0);
        let col = |f: &dyn Fn(&[f64; 4]) -> f64| self.factors.iter().map(f).collect::<Vec<_>>();
        [
            col(&|f| norm(f[0], POS_RANGE)),
            col(&|f| norm(f[1], POS_RANGE)),
            col(&|f| norm(f[2], SCALE_RANGE)),
            col(&|f| 0.5 * (f[3].sin() + 1.0)),
            col(&|f| 0.5 * (f[3].cos() + 1.0)),
        ]
    }
}

/// Resets to a fresh episode, takes up to `max_random_actions` random
/// actions and records `(mu, heart factors)` of the reached state.
pub fn collect_dataset<T: Scalar>(
    model: &AgentModel<T>,
    env: EnvConfig,
    n: usize,
    max_random_actions: usize,
    seed: u64,
) -> Result<RepresentationDataset> {
    let mut rng = Rng::stream(seed, 50);
    let mut sim = SpritesEnv::new(env);
    let mut obs: Vec<Observation> = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut o = sim.reset(rng.next_u64()).0;
        let k = rng.below(max_random_actions + 1);
        for _ in 0..k {
            let a = DiscreteAction::from_index(rng.below(DiscreteAction::COUNT)).expect("nine actions");
            let tr = sim.step(a)?;
            o = tr.next_obs;
        }
        let h = sim.factors().heart;
        factors.push([h.x, h.y, h.scale, h.rot]);
        obs.push(o);
    }
    let dim = model.latent_dim();
    let mut codes = Vec::with_capacity(n * dim);
    for chunk in obs.chunks(256) {
        let refs: Vec<&Observation> = chunk.iter().collect();
        for s in model.encode_batch(&observations_to_tensor::<T>(&refs)?)? {
            codes.extend(s.mu.iter().map(|v| v.as_f64()));
        }
    }
    Ok(RepresentationDataset {
        code_dim: dim,
        codes,
        factors,
    })
}

/// Non-negative `[n x F]` importances of code dims for factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub dims: usize,
    pub factors: usize,
    /// Row-major, `dims x factors`.
    pub values: Vec<f64>,
}

impl ImportanceMatrix {
    pub fn new(dims: usize, factors: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims * factors || dims == 0 || factors == 0 {
            return Err(Error::dim("importance matrix", &[dims, factors], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("importances must be finite and non-negative".into()));
        }
        Ok(ImportanceMatrix {
            dims,
            factors,
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.factors + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dims).map(|i| self.get(i, j)).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.factors..(i + 1) * self.factors]
    }

    /// Each non-zero column rescaled to sum one.
    pub fn column_normalized(&self) -> ImportanceMatrix {
        let mut out = self.clone();
        for j in 0..self.factors {
            let s: f64 = self.column(j).iter().sum();
            if s > 0.0 {
                for i in 0..self.dims {
                    out.values[i * self.factors + j] /= s;
                }
            }
        }
        out
    }
}

/// `1 - H_base(p)` for a probability vector.
fn one_minus_entropy(p: &[f64], base: usize) -> f64 {
    if base < 2 {
        return 1.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    1.0 - h / (base as f64).ln()
}

/// Per-dim disentanglement and its importance-weighted average.
///
/// Columns are normalized first, so every factor carries equal total weight
/// and the scores do not depend on per-factor importance scales.
pub fn disentanglement_scores(r: &ImportanceMatrix) -> (Vec<f64>, f64) {
    let r = r.column_normalized();
    let total: f64 = r.values.iter().sum();
    let mut per = Vec::with_capacity(r.dims);
    let mut avg = 0.0;
    for i in 0..r.dims {
        let row = r.row(i);
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            log::warn!("code dim {} has zero importance for every factor", i + 1);
            per.push(0.0);
            continue;
        }
        let p: Vec<f64> = row.iter().map(|v| v / s).collect();
        let d = one_minus_entropy(&p, r.factors).clamp(0.0, 1.0);
        per.push(d);
        avg += d * s / total;
    }
    (per, if total > 0.0 { avg } else { 0.0 })
}

/// Per-factor completeness and its unweighted mean.
pub fn completeness_scores(r: &ImportanceMatrix) -> (Vec<f64>, f64) {
    let mut per = Vec::with_capacity(r.factors);
    for j in 0..r.factors {
        let col = r.column(j);
        let s: f64 = col.iter().sum();
        if s <= 0.0 {
            log::warn!("factor {} has zero importance in every code dim", j + 1);
            per.push(0.0);
            continue;
        }
        let p: Vec<f64> = col.iter().map(|v| v / s).collect();
        per.push(one_minus_entropy(&p, r.dims).clamp(0.0, 1.0));
    }
    let avg = per.iter().sum::<f64>() / per.len() as f64;
    (per, avg)
}

/// Forest fit summary for one regression target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetFit {
    pub target: String,
    pub depth: usize,
    pub validation_mse: f64,
    /// `1 - mse / var` on the validation split.
    pub validation_r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceFit {
    pub matrix: ImportanceMatrix,
    pub fits: Vec<TargetFit>,
}

/// Fits one forest per target and assembles the `[n x 4]` importance
/// matrix; the sine and cosine rotation importances are summed.
pub fn fit_importance_matrix(
    data: &RepresentationDataset,
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<ImportanceFit> {
    if data.len() < 10 {
        return Err(Error::Data(format!("{} samples are too few to score", data.len())));
    }
    cfg.validate()?;
    let n = data.code_dim;
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::stream(seed, 60).shuffle(&mut order);
    let n_val = ((data.len() as f64) * cfg.validation_fraction).round().max(1.0) as usize;
    let (val, train) = order.split_at(n_val);
    let x = Features {
        data: &data.codes,
        cols: n,
    };
    let max_depth = *cfg.depths.iter().max().expect("validated");
    let max_features = if cfg.max_features == 0 {
        (n / 3).max(1)
    } else {
        cfg.max_features
    };
    let names = ["x", "y", "scale", "rot_sin", "rot_cos"];
    let targets = data.targets();
    let mut values = vec![0.0; n * FACTORS.len()];
    let mut fits = Vec::new();
    for (t, y) in targets.iter().enumerate() {
        let column = t.min(3);
        let mean = val.iter().map(|&i| y[i]).sum::<f64>() / val.len() as f64;
        let var = val.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>() / val.len() as f64;
        let train_mean = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
        if train.iter().all(|&i| (y[i] - train_mean).abs() < 1e-12) {
            log::warn!("factor `{}` is constant; assigning uniform importances", names[t]);
            for i in 0..n {
                values[i * FACTORS.len() + column] += 1.0 / n as f64;
            }
            fits.push(TargetFit {
                target: names[t].into(),
                depth: 0,
                validation_mse: 0.0,
                validation_r2: 0.0,
            });
            continue;
        }
        let params = ForestParams {
            trees: cfg.trees,
            max_features,
            max_depth,
            min_samples_split: 2,
            seed: Rng::stream(seed, 70 + t as u64).next_u64(),
        };
        let forest = RegressionForest::fit(x, y, train, &params);
        let (depth, mse) = cfg
            .depths
            .iter()
            .map(|&d| (d, forest.mse(x, y, val, d)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("validated");
        for (i, imp) in forest.importances(depth).into_iter().enumerate() {
            values[i * FACTORS.len() + column] += imp;
        }
        fits.push(TargetFit {
            target: names[t].into(),
            depth,
            validation_mse: mse,
            validation_r2: if var > 0.0 { 1.0 - mse / var } else { 0.0 },
        });
    }
    Ok(ImportanceFit {
        matrix: ImportanceMatrix::new(n, FACTORS.len(), values)?,
        fits,
    })
}

/// Metric report as written by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_dim_disentanglement: Vec<f64>,
    pub per_factor_completeness: Vec<f64>,
    pub avg_disentanglement: f64,
    pub avg_completeness: f64,
    pub importance: ImportanceMatrix,
    pub fits: Vec<TargetFit>,
    pub config: MetricsConfig,
    pub samples: usize,
    pub seed: u64,
}

/// Dataset collection, forest fitting and scoring in one call.
pub fn evaluate<T: Scalar>(
    model: &AgentModel<T>,
    env: EnvConfig,
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let data = collect_dataset(model, env, cfg.samples, cfg.max_random_actions, seed)?;
    let fit = fit_importance_matrix(&data, cfg, seed)?;
    let (pd, ad) = disentanglement_scores(&fit.matrix);
    let (pc, ac) = completeness_scores(&fit.matrix);
    Ok(MetricsReport {
        per_dim_disentanglement: pd,
        per_factor_completeness: pc,
        avg_disentanglement: ad,
        avg_completeness: ac,
        importance: fit.matrix,
        fits: fit.fits,
        config: cfg.clone(),
        samples: data.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(dims: usize, f: usize, v: &[f64]) -> ImportanceMatrix {
        ImportanceMatrix::new(dims, f, v.to_vec()).unwrap()
    }

    #[test]
    fn disentanglement_hand_values() {
        // columns already sum to one, so normalization is a no-op
        let r = m(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let (d, _) = disentanglement_scores(&r);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - (1.0 - 3f64.ln() / 4f64.ln())).abs() < 1e-15);

        let r = m(2, 4, &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
        let (d, _) = disentanglement_scores(&r);
        assert!((d[0] - 0.5).abs() < 1e-15);

        let r = m(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        assert!(disentanglement_scores(&r).0[0].abs() < 1e-15);
    }

    #[test]
    fn completeness_hand_values() {
        let mut v = vec![0.0; 10];
        v[3] = 2.0;
        assert_eq!(completeness_scores(&m(10, 1, &v)).0[0], 1.0);
        assert!(completeness_scores(&m(10, 1, &[0.3; 10])).0[0].abs() < 1e-15);
        let mut v = vec![0.0; 10];
        v[0] = 0.5;
        v[1] = 0.5;
        let c = completeness_scores(&m(10, 1, &v)).0[0];
        assert!((c - (1.0 - 2f64.ln() / 10f64.ln())).abs() < 1e-15);
        assert!((c - 0.699).abs() < 1e-3);
    }

    #[test]
    fn weighted_average_uses_row_mass() {
        let r = m(2, 2, &[0.75, 0.0, 0.25, 1.0]);
        let (d, avg) = disentanglement_scores(&r);
        let p = [0.2, 0.8];
        let d1 = 1.0 - (-p[0] * f64::ln(p[0]) - p[1] * f64::ln(p[1])) / 2f64.ln();
        assert_eq!(d[0], 1.0);
        assert!((d[1] - d1).abs() < 1e-12);
        assert!((avg - (0.75 / 2.0 + d1 * 1.25 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_and_columns_score_zero() {
        let r = m(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(disentanglement_scores(&r).0[0], 0.0);
        assert_eq!(completeness_scores(&r).0[1], 0.0);
    }

    fn synthetic(n: usize, seed: u64, f: impl Fn(&[f64]) -> [f64; 4]) -> RepresentationDataset {
        let mut rng = Rng::new(seed);
        let mut codes = Vec::new();
        let mut factors = Vec::new();
        for _ in 0..n {
            let c: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            factors.push(f(&c));
            codes.extend(c);
        }
        RepresentationDataset {
            code_dim: 6,
            codes,
            factors,
        }
    }

    fn small_cfg() -> MetricsConfig {
        MetricsConfig {
            trees: 10,
            depths: vec![2, 4, 8],
            ..MetricsConfig::default()
        }
    }

    fn lift(c: f64, r: (f64, f64)) -> f64 {
        r.0 + c * (r.1 - r.0)
    }

    #[test]
    fn copied_factor_is_attributed_to_its_dim() {
        let data = synthetic(1500, 1, |c| {
            [lift(c[2], POS_RANGE), lift(c[4], POS_RANGE), lift(c[0], SCALE_RANGE), c[5] * std::f64::consts::TAU]
        });
        let fit = fit_importance_matrix(&data, &small_cfg(), 3).unwrap();
        let argmax = |j: usize| {
            let col = fit.matrix.column(j);
            (0..6).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap()
        };
        assert_eq!([argmax(0), argmax(1), argmax(2), argmax(3)], [2, 4, 0, 5]);
        assert!(fit.fits[0].validation_r2 > 0.95);
    }

    #[test]
    fn shuffled_labels_are_unpredictable() {
        let data = synthetic(1500, 2, |_| [0.0; 4]);
        let mut rng = Rng::new(77);
        let mut data = data;
        for f in data.factors.iter_mut() {
            *f = [
                rng.uniform_range(POS_RANGE.0, POS_RANGE.1),
                rng.uniform_range(POS_RANGE.0, POS_RANGE.1),
                rng.uniform_range(SCALE_RANGE.0, SCALE_RANGE.1),
                rng.uniform_range(0.0, std::f64::consts::TAU),
            ];
        }
        let fit = fit_importance_matrix(&data, &small_cfg(), 3).unwrap();
        for t in &fit.fits {
            assert!(t.validation_r2 <= 0.1, "{t:?}");
        }
    }

    #[test]
    fn redundant_dims_share_importance() {
        let mut data = synthetic(1500, 3, |c| {
            [lift(c[1], POS_RANGE), lift(c[3], POS_RANGE), lift(c[4], SCALE_RANGE), c[5] * std::f64::consts::TAU]
        });
        for i in 0..data.len() {
            data.codes[i * 6] = data.codes[i * 6 + 1];
        }
        let fit = fit_importance_matrix(&data, &small_cfg(), 3).unwrap();
        let col = fit.matrix.column(0);
        let s: f64 = col.iter().sum();
        assert!(col[0] / s < 0.9 && col[1] / s < 0.9, "{col:?}");
        assert!((col[0] + col[1]) / s > 0.8, "{col:?}");
    }

    #[test]
    fn constant_factor_gets_uniform_column() {
        let data = synthetic(200, 4, |c| [0.5, lift(c[0], POS_RANGE), 0.1, c[1]]);
        let fit = fit_importance_matrix(&data, &small_cfg(), 1).unwrap();
        let col = fit.matrix.column(0);
        assert!(col.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn empty_dataset_is_refused() {
        let data = RepresentationDataset {
            code_dim: 3,
            codes: vec![],
            factors: vec![],
        };
        assert!(matches!(fit_importance_matrix(&data, &small_cfg(), 0), Err(Error::Data(_))));
    }
}
