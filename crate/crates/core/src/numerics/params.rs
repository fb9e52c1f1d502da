use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Rng, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Softmax => g.softmax(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer, `weight: [out x in]`, `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step_count: u64,
}

/// Ordered dense layers plus per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    layers: Vec<Dense<T>>,
    adam: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `sizes` lists layer widths including the input, e.g. `[4096, 512, 20]`.
    pub fn init(prefix: &str, sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::usage(format!("invalid layer sizes {sizes:?} for `{prefix}`")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| T::lit(rng.uniform_range(-limit, limit)))
                    .collect();
                Ok(Dense {
                    name: format!("{prefix}.{i}"),
                    weight: Tensor::matrix(fan_out, fan_in, weights)?,
                    bias: Tensor::zeros(&[fan_out]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(layers))
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Self {
        let mut set = ParamSet {
            layers,
            adam: BTreeMap::new(),
        };
        set.reset_optimizer();
        set
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = self
            .named_tensors()
            .map(|(name, t)| {
                let state = AdamState {
                    m: Tensor::zeros(t.shape()),
                    v: Tensor::zeros(t.shape()),
                    step_count: 0,
                };
                (name, state)
            })
            .collect();
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `(name, tensor)` pairs in layer order, weight before bias.
    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.weight_name(), &l.weight), (l.bias_name(), &l.bias)])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layers.iter_mut().find_map(|l| {
            if l.weight_name() == name {
                Some(&mut l.weight)
            } else if l.bias_name() == name {
                Some(&mut l.bias)
            } else {
                None
            }
        })
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState<T>> {
        self.adam.get(name)
    }

    pub fn adam_state_mut(&mut self, name: &str) -> Option<&mut AdamState<T>> {
        self.adam.get_mut(name)
    }

    pub(crate) fn set_adam_state(&mut self, name: &str, state: AdamState<T>) -> Result<()> {
        match self.adam.get_mut(name) {
            Some(slot) => {
                *slot = state;
                Ok(())
            }
            None => Err(Error::Data(format!("no parameter named `{name}`"))),
        }
    }

    /// All parameters concatenated in [`ParamSet::named_tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.named_tensors().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`]; returns the number of values consumed.
    pub fn assign_flat(&mut self, values: &[T]) -> Result<usize> {
        let total = self.num_params();
        if values.len() < total {
            return Err(Error::dim("flat parameters", &[total], &[values.len()]));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in [&mut layer.weight, &mut layer.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(offset)
    }

    /// Gradients laid out like [`ParamSet::flatten`], zero where absent.
    pub fn flatten_grads(&self, grads: &Gradients<T>) -> Vec<T> {
        self.named_tensors()
            .flat_map(|(name, t)| match grads.get(&name) {
                Some(g) => g.data().to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    /// Records the layer stack on `g`, one activation per layer.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        input: Var,
        activations: &[Activation],
    ) -> Result<Var> {
        if activations.len() != self.layers.len() {
            return Err(Error::usage(format!(
                "{} activations given for {} layers",
                activations.len(),
                self.layers.len()
            )));
        }
        let mut x = input;
        for (layer, act) in self.layers.iter().zip(activations) {
            let width = g.value(x).cols();
            if width != layer.in_dim() {
                return Err(Error::dim(
                    format!("layer `{}` input", layer.name),
                    &[g.value(x).rows(), layer.in_dim()],
                    &[g.value(x).rows(), width],
                ));
            }
            let w = g.param(layer.weight_name(), &layer.weight);
            let b = g.param(layer.bias_name(), &layer.bias);
            let pre = g.linear(x, w, b)?;
            x = act.apply(g, pre);
        }
        Ok(x)
    }
}

/// Untracked evaluation of an MLP: returns the last layer's output.
pub fn forward_mlp<T: Scalar>(
    params: &ParamSet<T>,
    input: &Tensor<T>,
    activations: &[Activation],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant_ref(input);
    let y = params.forward(&mut g, x, activations)?;
    Ok(g.value(y).clone())
}
