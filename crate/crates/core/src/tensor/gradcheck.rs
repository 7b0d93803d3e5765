//! Finite-difference gradient checks for every differentiable tape op.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// How one input of a case is drawn.
#[derive(Clone, Debug)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub low: f64,
    pub high: f64,
    /// Values closer than `0.02` to any of these are pushed away, keeping
    /// samples off non-differentiable points.
    pub avoid: Vec<f64>,
}

impl InputSpec {
    pub fn uniform(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            low: -2.0,
            high: 2.0,
            avoid: Vec::new(),
        }
    }

    pub fn positive(shape: &[usize]) -> Self {
        Self {
            low: 0.2,
            high: 2.0,
            ..Self::uniform(shape)
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let mut t = Tensor::uniform(self.shape.clone(), self.low, self.high, rng);
        for v in t.data_mut() {
            for &k in &self.avoid {
                if (*v - k).abs() < 0.02 {
                    *v = k + 0.05_f64.copysign(*v - k);
                }
            }
        }
        t
    }
}

pub type CaseFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<InputSpec>,
    pub forward: CaseFn,
}

fn range(shape: &[usize], low: f64, high: f64) -> InputSpec {
    InputSpec {
        low,
        high,
        ..InputSpec::uniform(shape)
    }
}

fn case(name: &'static str, inputs: Vec<InputSpec>, forward: CaseFn) -> OpCase {
    OpCase { name, inputs, forward }
}

/// One case per op, plus broadcast forms and a small composite.
pub fn registered_ops() -> Vec<OpCase> {
    let m = |r, c| InputSpec::uniform(&[r, c]);
    vec![
        case("add", vec![m(3, 4), m(3, 4)], |_, v| v[0].add(v[1])),
        case("add_row_broadcast", vec![m(3, 4), InputSpec::uniform(&[4])], |_, v| v[0].add(v[1])),
        case("sub", vec![m(3, 4), m(3, 4)], |_, v| v[0].sub(v[1])),
        case("sub_scalar_broadcast", vec![InputSpec::uniform(&[1]), m(2, 3)], |_, v| v[0].sub(v[1])),
        case("mul", vec![m(3, 4), m(3, 4)], |_, v| v[0].mul(v[1])),
        case("mul_row_broadcast", vec![m(3, 4), InputSpec::uniform(&[4])], |_, v| v[0].mul(v[1])),
        case("div", vec![m(3, 4), InputSpec::positive(&[3, 4])], |_, v| v[0].div(v[1])),
        case("minimum_left", vec![range(&[3, 4], -2.0, -0.1), range(&[3, 4], 0.1, 2.0)], |_, v| {
            v[0].minimum(v[1])
        }),
        case("minimum_right", vec![range(&[3, 4], 0.1, 2.0), range(&[3, 4], -2.0, -0.1)], |_, v| {
            v[0].minimum(v[1])
        }),
        case(
            "minimum_mixed",
            vec![InputSpec {
                avoid: vec![0.3],
                ..m(3, 4)
            }],
            |t, v| v[0].minimum(t.constant(Tensor::full([3, 4], 0.3))),
        ),
        case("neg", vec![m(3, 4)], |_, v| Ok(v[0].neg())),
        case("tanh", vec![m(3, 4)], |_, v| Ok(v[0].tanh())),
        case("sigmoid", vec![m(3, 4)], |_, v| Ok(v[0].sigmoid())),
        case("softplus", vec![m(3, 4)], |_, v| Ok(v[0].softplus())),
        case("exp", vec![m(3, 4)], |_, v| Ok(v[0].exp())),
        case("log", vec![InputSpec::positive(&[3, 4])], |_, v| Ok(v[0].log())),
        case("sqrt", vec![InputSpec::positive(&[3, 4])], |_, v| Ok(v[0].sqrt())),
        case("square", vec![m(3, 4)], |_, v| Ok(v[0].square())),
        case(
            "elu",
            vec![InputSpec {
                avoid: vec![0.0],
                ..m(3, 4)
            }],
            |_, v| Ok(v[0].elu()),
        ),
        case("scale", vec![m(3, 4)], |_, v| Ok(v[0].scale(-1.7))),
        case("shift", vec![m(3, 4)], |_, v| Ok(v[0].shift(0.6))),
        case(
            "clamp_min",
            vec![InputSpec {
                avoid: vec![0.3],
                ..m(3, 4)
            }],
            |_, v| Ok(v[0].clamp_min(0.3)),
        ),
        case("matmul", vec![m(4, 3), m(3, 5)], |_, v| v[0].matmul(v[1])),
        case("concat", vec![m(3, 2), m(3, 4), m(3, 1)], |t, v| t.concat(v)),
        case("slice_cols", vec![m(3, 6)], |_, v| v[0].slice_cols(1, 4)),
        case("reshape", vec![m(3, 4)], |_, v| v[0].reshape([2, 6])),
        case("sum", vec![m(3, 4)], |_, v| Ok(v[0].sum())),
        case("mean", vec![m(3, 4)], |_, v| Ok(v[0].mean())),
        case("sum_last", vec![m(3, 4)], |_, v| Ok(v[0].sum_last())),
        case("matmul_composite", vec![m(4, 3), m(3, 3), InputSpec::uniform(&[3])], |_, v| {
            Ok(v[0].matmul(v[1])?.add(v[2])?.tanh().square())
        }),
    ]
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)` over
/// every input element, using central differences with step `h`.
pub fn check_case(case: &OpCase, seed: u64, h: f64) -> Result<f64> {
    let mut rng = seeded(seed, 0);
    let inputs: Vec<Tensor> = case.inputs.iter().map(|s| s.draw(&mut rng)).collect();

    // Projects the output onto fixed random weights so every output element
    // contributes to the scalar.
    let weights = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.forward)(&tape, &vars)?;
        Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng)
    };
    let objective = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.forward)(&tape, &vars)?;
        Ok(out.mul(tape.constant(weights.clone()))?.sum().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (case.forward)(&tape, &vars)?;
    let root = out.mul(tape.constant(weights.clone()))?.sum();
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::MissingGradient(format!("{} input {k}", case.name)))?;
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
