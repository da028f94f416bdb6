use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{Activation, Graph, Matrix, ParamStore, Rng, Var};
use crate::error::Result;

/// Affine map `x·W + b` stored as `<name>.w` (d_in×d_out) and `<name>.b` (1×d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Gaussian weights with standard deviation `std` (1/√d_in when `None`), zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, std: Option<f64>, trainable: bool) {
        let std = std.unwrap_or(1.0 / (self.d_in as f64).sqrt());
        store.insert(
            self.weight_name(),
            rng.normal_matrix(self.d_in, self.d_out, std),
            trainable,
        );
        store.insert(self.bias_name(), Matrix::zeros(1, self.d_out), trainable);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let xw = g.tape.matmul(x, w)?;
        g.tape.add_bias(xw, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Relu,
    #[default]
    Gelu,
    Sigmoid,
    Tanh,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Self {
        match k {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Sigmoid => Activation::Sigmoid,
            ActivationKind::Tanh => Activation::Tanh,
        }
    }
}

/// Two-layer perceptron `l2(act(l1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize, activation: Activation) -> Self {
        Mlp {
            l1: Linear::new(format!("{name}.l1"), d_in, hidden),
            l2: Linear::new(format!("{name}.l2"), hidden, d_out),
            activation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.l1.init(store, rng, None, true);
        self.l2.init(store, rng, None, true);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.tape.activation(h, self.activation);
        self.l2.forward(g, h)
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }
}
