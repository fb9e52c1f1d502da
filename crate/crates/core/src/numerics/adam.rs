use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamSet};
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
///
/// Entries of `grads` that do not name a tensor of `params` are ignored;
/// tensors without an entry are updated with a zero gradient. No tensor is
/// modified when any relevant gradient is non-finite or mis-shaped.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, grads: &Gradients<T>, opt: &Adam) -> Result<()> {
    if !(opt.lr > 0.0) {
        return Err(Error::usage(format!("learning rate must be positive, got {}", opt.lr)));
    }
    let names: Vec<String> = params.named_tensors().map(|(n, _)| n).collect();
    for (name, t) in params.named_tensors() {
        if let Some(g) = grads.get(&name) {
            if g.len() != t.len() {
                return Err(Error::dim(format!("gradient of `{name}`"), t.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Training {
                    param: name,
                    reason: "non-finite gradient".into(),
                });
            }
        }
    }

    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let (one, lr, eps) = (T::one(), T::lit(opt.lr), T::lit(opt.eps));
    for name in names {
        let grad = grads.get(&name).map(|g| g.data());
        let state = params.adam_state_mut(&name).expect("optimizer state mirrors parameters");
        state.step_count += 1;
        let t = state.step_count as i32;
        let c1 = one - T::lit(opt.beta1.powi(t));
        let c2 = one - T::lit(opt.beta2.powi(t));
        let (m, v) = (state.m.data_mut(), state.v.data_mut());
        let update: Vec<T> = m
            .iter_mut()
            .zip(v.iter_mut())
            .enumerate()
            .map(|(i, (m, v))| {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                lr * (*m / c1) / ((*v / c2).sqrt() + eps)
            })
            .collect();
        let p = params.tensor_mut(&name).expect("name taken from params");
        p.data_mut().iter_mut().zip(update).for_each(|(p, u)| *p -= u);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Dense, Tensor};

    fn scalar_set(v: f64) -> ParamSet<f64> {
        ParamSet::from_layers(vec![Dense {
            name: "p".into(),
            weight: Tensor::from_f64(&[1, 1], &[v]).unwrap(),
            bias: Tensor::from_f64(&[1], &[0.0]).unwrap(),
        }])
    }

    fn grad(g: f64) -> Gradients<f64> {
        let mut gr = Gradients::default();
        gr.insert("p.weight", Tensor::from_f64(&[1, 1], &[g]).unwrap());
        gr
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = scalar_set(1.25);
        adam_step(&mut p, &grad(0.0), &Adam::with_lr(0.1)).unwrap();
        assert_eq!(p.layers()[0].weight.item(), 1.25);
        assert_eq!(p.adam_state("p.weight").unwrap().step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_set(0.0);
        adam_step(&mut p, &grad(1.0), &Adam::with_lr(0.1)).unwrap();
        // m_hat = v_hat = 1 => update = 0.1 / (1 + 1e-8)
        let w = p.layers()[0].weight.item();
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn two_steps_follow_hand_unrolled_recursion() {
        let mut p = scalar_set(0.0);
        let opt = Adam::with_lr(0.1);
        adam_step(&mut p, &grad(1.0), &opt).unwrap();
        adam_step(&mut p, &grad(1.0), &opt).unwrap();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.layers()[0].weight.item() - x).abs() < 1e-14);
        let st = p.adam_state("p.weight").unwrap();
        assert!((st.m.item() - m).abs() < 1e-15 && (st.v.item() - v).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_params() {
        let mut p = scalar_set(0.5);
        let err = adam_step(&mut p, &grad(f64::NAN), &Adam::with_lr(0.1)).unwrap_err();
        match err {
            Error::Training { param, .. } => assert_eq!(param, "p.weight"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.layers()[0].weight.item(), 0.5);
        assert_eq!(p.adam_state("p.weight").unwrap().step_count, 0);
    }
}
