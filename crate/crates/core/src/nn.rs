//! Small network building blocks over the tape.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParameterStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}/weight"),
            Tensor::uniform([in_dim, out_dim], -bound, bound, rng),
        )?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros([out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

/// Fully connected network with a shared hidden activation and linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().chain(std::iter::once(&out_dim)).enumerate() {
            layers.push(Linear::new(store, &format!("{name}/l{i}"), prev, h, rng)?);
            prev = h;
        }
        Ok(Self { layers, activation })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i != last {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn last_layer(&self) -> &Linear {
        self.layers.last().unwrap()
    }
}

/// Gated recurrent cell.
///
/// ```text
/// r  = sigmoid(x W_r + h U_r + b_r)
/// u  = sigmoid(x W_u + h U_u + b_u)
/// c  = tanh(x W_c + r * (h U_c) + b_c)
/// h' = (1 - u) * h + u * c
/// ```
///
/// `W = [W_r W_u W_c]` and `U = [U_r U_u U_c]` are stored fused. The bias
/// lives on the input side only.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden_weight: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}/input"), in_dim, 3 * hidden_dim, rng)?;
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let hidden_weight = store.add(
            format!("{name}/hidden/weight"),
            Tensor::uniform([hidden_dim, 3 * hidden_dim], -bound, bound, rng),
        )?;
        Ok(Self {
            input,
            hidden_weight,
            in_dim,
            hidden_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let n = self.hidden_dim;
        let gx = self.input.forward(p, x)?;
        let gh = h.matmul(p.get(self.hidden_weight))?;
        let r = gx.slice_cols(0, n)?.add(gh.slice_cols(0, n)?)?.sigmoid();
        let u = gx.slice_cols(n, 2 * n)?.add(gh.slice_cols(n, 2 * n)?)?.sigmoid();
        let c = gx
            .slice_cols(2 * n, 3 * n)?
            .add(r.mul(gh.slice_cols(2 * n, 3 * n)?)?)?
            .tanh();
        // h + u * (c - h)
        h.add(u.mul(c.sub(h)?)?)
    }
}
