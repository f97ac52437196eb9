use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected network: ReLU between layers, identity at the output.
/// Weights are stored `in x out` so a batch of row vectors multiplies on
/// the left.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// An [`MlpParams`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl MlpParams {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                (
                    Tensor::matrix(w[0], w[1], weight).unwrap().with_grad(),
                    Tensor::matrix(1, w[1], bias).unwrap().with_grad(),
                )
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| (Tensor::zeros(vec![w[0], w[1]]).with_grad(), Tensor::zeros(vec![1, w[1]]).with_grad()))
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |(w, _)| w.shape[0])
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.shape[1])
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].0.shape[1] != pair[1].0.shape[0] {
                return Err(Error::Shape { op: "mlp", left: pair[0].0.shape.clone(), right: pair[1].0.shape.clone() });
            }
        }
        for (w, b) in &self.layers {
            if b.shape != [1, w.shape[1]] {
                return Err(Error::Shape { op: "mlp bias", left: w.shape.clone(), right: b.shape.clone() });
            }
            if w.data.iter().chain(&b.data).any(|x| !x.is_finite()) {
                return Err(Error::Validation("non-finite MLP weight".into()));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp { layers: self.layers.iter().map(|(w, b)| (tape.tensor(w), tape.tensor(b))).collect() }
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, *w)?;
            h = tape.add_row(z, *b)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}
