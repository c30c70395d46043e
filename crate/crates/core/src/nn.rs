//! Dense layers, MLPs, parameter init, and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};

/// Negative slope used by every leaky rectifier in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Glorot-uniform init for a `rows x cols` weight matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// One dense layer: `x . w + b` with `w: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: glorot(input, output, rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }
}

/// Bound tape handles for one dense layer.
#[derive(Clone, Copy)]
pub struct DenseVars<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl Dense {
    pub fn bind<'t>(&self, tape: &'t Tape, leaves: &mut Vec<Var<'t>>) -> DenseVars<'t> {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        leaves.push(w);
        leaves.push(b);
        DenseVars { w, b }
    }

    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        vec![&self.w, &self.b]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

impl<'t> DenseVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        x.matmul(self.w).add_row(self.b)
    }
}

/// A stack of dense layers with leaky-rectifier activations between them.
/// `activate_last` controls whether the final layer is also activated.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activate_last: bool,
}

impl Mlp {
    /// `dims` = [input, hidden..., output]; needs at least one layer.
    pub fn new(dims: &[usize], activate_last: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, leaves: &mut Vec<Var<'t>>) -> MlpVars<'t> {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape, leaves)).collect(),
            activate_last: self.activate_last,
        }
    }

    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| l.arrays()).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.arrays_mut())
            .collect()
    }
}

#[derive(Clone)]
pub struct MlpVars<'t> {
    pub layers: Vec<DenseVars<'t>>,
    pub activate_last: bool,
}

impl<'t> MlpVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h);
            if i < last || self.activate_last {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h
    }
}

/// Adam with per-array moment buffers, matched by position to the parameter
/// list handed to [`Adam::step`].
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let update = m.mapv(|x| x / b1t) / &(v.mapv(|x| (x / b2t).sqrt() + self.eps));
            **p -= &(update * self.lr);
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_forward_matches_manual_product() {
        let tape = Tape::new();
        let layer = Dense {
            w: array![[1.0, 2.0], [3.0, 4.0]],
            b: array![[0.5, -0.5]],
        };
        let mut leaves = Vec::new();
        let vars = layer.bind(&tape, &mut leaves);
        let x = tape.constant(array![[1.0, 1.0]]);
        let y = vars.forward(x).value();
        assert_eq!(y, array![[4.5, 5.5]]);
    }

    #[test]
    fn mlp_hidden_layers_are_activated() {
        let tape = Tape::new();
        let mlp = Mlp {
            layers: vec![
                Dense {
                    w: array![[-1.0]],
                    b: array![[0.0]],
                },
                Dense {
                    w: array![[1.0]],
                    b: array![[0.0]],
                },
            ],
            activate_last: false,
        };
        let mut leaves = Vec::new();
        let vars = mlp.bind(&tape, &mut leaves);
        let x = tape.constant(array![[2.0]]);
        // hidden: leaky(-2) = -0.02, output layer linear
        let y = vars.forward(x).value();
        assert!((y[[0, 0]] + 0.02).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With a single constant gradient, the bias-corrected first Adam
        // update is -lr * g / (|g| + eps) = -lr * sign(g).
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.3, -0.7]];
        let mut opt = Adam::new(0.1, &[(1, 2)]);
        opt.step(&mut [&mut p], &[g]);
        assert!((p[[0, 0]] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[[0, 1]] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![array![[3.0, 0.0]], array![[0.0, 4.0]]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let new_sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum();
        assert!((new_sq.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn glorot_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(glorot(4, 3, &mut a), glorot(4, 3, &mut b));
    }
}
