use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParamSet;
use super::tape::{ParamVars, Tape, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network with `widths = [fan_in, hidden.., fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

/// Glorot-uniform weights, zero bias.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::matrix(fan_in, fan_out, data).expect("sized by construction")
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(shape_err(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self { prefix: prefix.into(), widths, activation })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn fan_in(&self) -> usize {
        self.widths[0]
    }

    pub fn fan_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}l{i}.w", self.prefix)
    }

    fn b_name(&self, i: usize) -> String {
        format!("{}l{i}.b", self.prefix)
    }

    /// Adds this network's leaves to `params`. With `zero_last` the output
    /// layer starts at zero.
    pub fn init_into(&self, params: &mut ParamSet, rng: &mut impl Rng, zero_last: bool) -> Result<()> {
        for i in 0..self.n_layers() {
            let (fi, fo) = (self.widths[i], self.widths[i + 1]);
            let w = if zero_last && i + 1 == self.n_layers() { Array::zeros(&[fi, fo]) } else { glorot(rng, fi, fo) };
            params.insert(self.w_name(i), w)?;
            params.insert(self.b_name(i), Array::zeros(&[fo]))?;
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut impl Rng, zero_last: bool) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        self.init_into(&mut p, rng, zero_last)?;
        Ok(p)
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.fan_in() {
            return Err(shape_err(format!("input width {} does not match fan-in {}", tape.value(x).cols(), self.fan_in())));
        }
        let mut h = x;
        for i in 0..self.n_layers() {
            let z = tape.matmul(h, vars.get(&self.w_name(i))?)?;
            h = tape.add_row(z, vars.get(&self.b_name(i))?)?;
            if i + 1 < self.n_layers() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Gradient-free evaluation on a `[batch, fan_in]` (or `[fan_in]`) input.
    pub fn forward(&self, params: &ParamSet, input: &Array) -> Result<Array> {
        let x = as_matrix(input)?;
        let mut tape = Tape::new();
        let vars = bind_subset(&mut tape, params, &self.prefix)?;
        let xv = tape.constant(x);
        let y = self.forward_tape(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}

fn as_matrix(input: &Array) -> Result<Array> {
    match input.shape().len() {
        1 => input.clone().reshape(vec![1, input.len()]),
        2 => Ok(input.clone()),
        _ => Err(shape_err(format!("expected rank 1 or 2 input, got {:?}", input.shape()))),
    }
}

/// Binds only leaves whose names start with `prefix`, as constants.
pub(crate) fn bind_subset(tape: &mut Tape, params: &ParamSet, prefix: &str) -> Result<ParamVars> {
    let mut sub = ParamSet::new();
    for (name, arr) in params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        sub.insert(name, arr.clone())?;
    }
    let vars = tape.bind_params(&sub);
    Ok(vars)
}

/// Evaluates a plain perceptron described by `widths` whose leaves live in
/// `params` under the empty prefix.
pub fn mlp_forward(params: &ParamSet, input: &Array, widths: &[usize], activation: Activation) -> Result<Array> {
    let net = Mlp::new("", widths.to_vec(), activation)?;
    net.forward(params, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let net = Mlp::new("", vec![3, 5, 2], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = net.init(&mut rng, false).unwrap();
        p.scale_in_place(0.0);
        let y = mlp_forward(&p, &Array::vector(vec![1.0, -2.0, 3.0]), &[3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = ParamSet::new();
        let mut eye = Array::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        p.insert("l0.w", eye).unwrap();
        p.insert("l0.b", Array::zeros(&[4])).unwrap();
        let x = Array::vector(vec![0.5, -1.0, 2.0, 7.0]);
        let y = mlp_forward(&p, &x, &[4, 4], Activation::Relu).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn deterministic_and_checks_width() {
        let net = Mlp::new("", vec![8, 16, 3], Activation::Tanh).unwrap();
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(11), false).unwrap();
        let x = Array::vector((0..8).map(|i| i as f64 * 0.1).collect());
        let a = net.forward(&p, &x).unwrap();
        let b = net.forward(&p, &x).unwrap();
        assert_eq!(a, b);
        assert!(net.forward(&p, &Array::vector(vec![0.0; 7])).is_err());
    }
}
