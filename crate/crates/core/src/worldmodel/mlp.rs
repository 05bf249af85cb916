use crate::diffcore::{self, concat, gemm, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Rows at or below this count use plain loops instead of packed GEMM.
pub(crate) const SMALL_ROWS: usize = 4;

/// `out = x * w` for `x: [rows, k]`, `w: [k, n]`, plus `bias`.
pub(crate) fn affine(x: &[f64], rows: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    let k = w.len() / n;
    if rows <= SMALL_ROWS {
        for r in 0..rows {
            let o = &mut out[r * n..(r + 1) * n];
            o.copy_from_slice(bias);
            for (i, &xi) in x[r * k..(r + 1) * k].iter().enumerate() {
                for (oj, wij) in o.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                    *oj += xi * wij;
                }
            }
        }
    } else {
        for r in 0..rows {
            out[r * n..(r + 1) * n].copy_from_slice(bias);
        }
        gemm(rows, k, n, x, (k, 1), w, (n, 1), out, true);
    }
}

/// Fully connected net with tanh hidden layers and a linear output layer.
/// Weights are stored `[fan_in, fan_out]` so a batch `[B, fan_in]` multiplies
/// on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Uniform fan-in init; `zero_last` zeroes the output layer.
    pub fn new(sizes: &[usize], rng: &mut Rng, zero_last: bool) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for l in 0..n {
            let (i, o) = (sizes[l], sizes[l + 1]);
            if zero_last && l == n - 1 {
                weights.push(Tensor::zeros(&[i, o]));
                biases.push(Tensor::zeros(&[o]));
            } else {
                weights.push(diffcore::uniform_init(rng, i, &[i, o]));
                biases.push(diffcore::uniform_init(rng, i, &[o]));
            }
        }
        Ok(Mlp { weights, biases })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let n = sizes.len() - 1;
        Mlp {
            weights: (0..n).map(|l| Tensor::zeros(&[sizes[l], sizes[l + 1]])).collect(),
            biases: (0..n).map(|l| Tensor::zeros(&[sizes[l + 1]])).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].shape()[0]];
        s.extend(self.weights.iter().map(|w| w.shape()[1]));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameters interleaved as `W0, b0, W1, b1, ...`.
    pub fn params(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != 2 * self.weights.len() {
            return Err(Error::Contract("parameter count does not match layers".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("set_params", dst.shape(), src.shape()));
            }
            *dst = src;
        }
        Ok(())
    }

    /// Records the parameters on `tape`, as differentiable leaves if `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params()
            .into_iter()
            .map(|p| if trainable { tape.var(p) } else { tape.constant(p) })
            .collect()
    }

    /// Forward pass of `x: [B, in]` through parameters bound by [`Mlp::bind`].
    pub fn forward_on<'t>(bound: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let layers = bound.len() / 2;
        let mut h = *x;
        for l in 0..layers {
            h = h.matmul(&bound[2 * l])?.add(&bound[2 * l + 1])?;
            if l + 1 < layers {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass over `rows` stacked inputs.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let layers = self.weights.len();
        let mut h = x.to_vec();
        for l in 0..layers {
            let mut out = vec![0.0; rows * self.biases[l].len()];
            affine(&h, rows, self.weights[l].data(), self.biases[l].data(), &mut out);
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        h
    }
}

/// Concatenation helper used by both the world model and the init network.
pub(crate) fn join<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    concat(&[*a, *b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn tape_and_direct_forward_agree() {
        let mut r = rng::stream(1, "t");
        let m = Mlp::new(&[5, 7, 3], &mut r, false).unwrap();
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = Mlp::forward_on(&p, &xv).unwrap();
        let direct = m.forward(x.data(), 4);
        for (a, b) in y.value().data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.sizes(), vec![5, 7, 3]);
        assert_eq!(m.param_count(), 5 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut r = rng::stream(2, "t");
        let m = Mlp::new(&[3, 8, 8, 2], &mut r, true).unwrap();
        assert!(m.forward(&[0.3, -1.0, 2.0], 1).iter().all(|&v| v == 0.0));
    }
}
