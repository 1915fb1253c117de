use crate::error::{Error, Result};
use crate::numcore::tensor::{self as k, Tensor};
use crate::numcore::{ParamSet, Tape, Var};
use crate::rng::Rng;

/// A fully connected stack stored in a [`ParamSet`] as `{prefix}.w{i}` and
/// `{prefix}.b{i}`. Hidden layers use tanh; the last layer is linear unless
/// `tanh_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    /// Input size followed by every layer's output size.
    pub sizes: Vec<usize>,
    pub tanh_output: bool,
}

impl Mlp {
    pub fn new(prefix: &str, input: usize, layers: &[usize], tanh_output: bool) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(layers);
        Mlp {
            prefix: prefix.to_string(),
            sizes,
            tanh_output,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn w_name(&self, i: usize) -> String {
        format!("{}.w{i}", self.prefix)
    }

    pub fn b_name(&self, i: usize) -> String {
        format!("{}.b{i}", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        for i in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[i], self.sizes[i + 1]);
            params.insert(self.w_name(i), Tensor::glorot(fan_in, fan_out, rng))?;
            params.insert(self.b_name(i), Tensor::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// Checks that `params` holds every layer with the expected shape.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        for i in 0..self.n_layers() {
            let want = [
                (self.w_name(i), (self.sizes[i], self.sizes[i + 1])),
                (self.b_name(i), (1, self.sizes[i + 1])),
            ];
            for (name, shape) in want {
                match params.get(&name) {
                    Some(t) if t.shape() == shape => {}
                    Some(t) => {
                        return Err(Error::format(
                            "policy parameters",
                            format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()),
                        ))
                    }
                    None => {
                        return Err(Error::format(
                            "policy parameters",
                            format!("missing tensor `{name}`"),
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    fn activate(&self, i: usize) -> bool {
        i + 1 < self.n_layers() || self.tanh_output
    }

    /// Row-batched forward pass.
    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                lhs: x.shape(),
                rhs: (x.rows(), self.input_dim()),
            });
        }
        let mut h = x.clone();
        for i in 0..self.n_layers() {
            let xw = k::matmul(&h, params.value(&self.w_name(i)))?;
            h = k::add_row(&xw, params.value(&self.b_name(i)))?;
            if self.activate(i) {
                h = k::tanh(&h);
            }
        }
        Ok(h)
    }

    pub fn on_tape(&self, params: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                lhs: tape.value(x).shape(),
                rhs: (tape.value(x).rows(), self.input_dim()),
            });
        }
        let mut h = x;
        for i in 0..self.n_layers() {
            let w = params.bind(tape, &self.w_name(i));
            let b = params.bind(tape, &self.b_name(i));
            let xw = tape.matmul(h, w)?;
            h = tape.add_row(xw, b)?;
            if self.activate(i) {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}
