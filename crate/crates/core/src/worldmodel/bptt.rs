//! Tape-free backpropagation through a world-model rollout, used by the
//! gradient planners where the tape's per-node bookkeeping dominates the cost.

use super::mlp::{affine, SMALL_ROWS};
use super::WorldModel;
use crate::diffcore::gemm;

/// `out = dy * w^T` for `dy: [rows, n]`, `w: [k, n]`.
fn back(dy: &[f64], rows: usize, w: &[f64], k: usize, out: &mut [f64]) {
    let n = w.len() / k;
    if rows <= SMALL_ROWS {
        for r in 0..rows {
            let d = &dy[r * n..(r + 1) * n];
            for i in 0..k {
                out[r * k + i] = w[i * n..(i + 1) * n].iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
    } else {
        gemm(rows, n, k, dy, (n, 1), w, (1, n), out, false);
    }
}

impl WorldModel {
    /// Per-row losses `sum_t c_t ||z_{t+1} - goal||^2` of `rows` action
    /// sequences (`actions: [rows, H * d_a]`, all starting from `z1`) and the
    /// gradient of their sum with respect to `actions`.
    pub fn goal_loss_and_grad(
        &self,
        z1: &[f64],
        goal: &[f64],
        actions: &[f64],
        rows: usize,
        coefficients: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (dz, da) = (self.latent_dim, self.action_dim);
        let horizon = coefficients.len();
        let width = horizon * da;
        let din = dz + da;
        let layers = self.mlp.weights.len();
        let sizes: Vec<usize> = self.mlp.biases.iter().map(|b| b.len()).collect();

        // Forward: inputs and hidden activations of every step.
        let mut inputs = vec![0.0; horizon * rows * din];
        let mut hidden: Vec<Vec<f64>> = (0..layers - 1).map(|l| vec![0.0; horizon * rows * sizes[l]]).collect();
        let mut latents = vec![0.0; (horizon + 1) * rows * dz];
        for r in 0..rows {
            latents[r * dz..(r + 1) * dz].copy_from_slice(z1);
        }
        let mut out = vec![0.0; rows * dz];
        for t in 0..horizon {
            let x = &mut inputs[t * rows * din..(t + 1) * rows * din];
            for r in 0..rows {
                x[r * din..r * din + dz].copy_from_slice(&latents[(t * rows + r) * dz..(t * rows + r + 1) * dz]);
                x[r * din + dz..(r + 1) * din].copy_from_slice(&actions[r * width + t * da..r * width + (t + 1) * da]);
            }
            for l in 0..layers {
                let w = self.mlp.weights[l].data();
                let b = self.mlp.biases[l].data();
                let n = sizes[l];
                let (prev, rest) = hidden.split_at_mut(l);
                let src: &[f64] = if l == 0 {
                    &inputs[t * rows * din..(t + 1) * rows * din]
                } else {
                    let k = sizes[l - 1];
                    &prev[l - 1][t * rows * k..(t + 1) * rows * k]
                };
                if l + 1 < layers {
                    let dst = &mut rest[0][t * rows * n..(t + 1) * rows * n];
                    affine(src, rows, w, b, dst);
                    dst.iter_mut().for_each(|v| *v = v.tanh());
                } else {
                    affine(src, rows, w, b, &mut out);
                }
            }
            let (done, next) = latents.split_at_mut((t + 1) * rows * dz);
            let next = &mut next[..rows * dz];
            next.copy_from_slice(&out);
            if self.residual {
                for (v, z) in next.iter_mut().zip(&done[t * rows * dz..]) {
                    *v += z;
                }
            }
        }

        let mut losses = vec![0.0; rows];
        for (t, &c) in coefficients.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (r, l) in losses.iter_mut().enumerate() {
                let z = &latents[((t + 1) * rows + r) * dz..((t + 1) * rows + r + 1) * dz];
                *l += c * z.iter().zip(goal).map(|(a, g)| (a - g) * (a - g)).sum::<f64>();
            }
        }

        // Backward through time.
        let mut grad = vec![0.0; rows * width];
        let mut gz = vec![0.0; rows * dz];
        let mut dx = vec![0.0; rows * din];
        let mut bufs: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; rows * n]).collect();
        for t in (0..horizon).rev() {
            let c = coefficients[t];
            if c != 0.0 {
                let z = &latents[(t + 1) * rows * dz..(t + 2) * rows * dz];
                for (i, g) in gz.iter_mut().enumerate() {
                    *g += 2.0 * c * (z[i] - goal[i % dz]);
                }
            }
            bufs[layers - 1].copy_from_slice(&gz);
            for l in (0..layers).rev() {
                let w = self.mlp.weights[l].data();
                let k = if l == 0 { din } else { sizes[l - 1] };
                let (lower, upper) = bufs.split_at_mut(l);
                let dy = &upper[0];
                if l == 0 {
                    back(dy, rows, w, k, &mut dx);
                } else {
                    let dst = &mut lower[l - 1];
                    back(dy, rows, w, k, dst);
                    let h = &hidden[l - 1][t * rows * k..(t + 1) * rows * k];
                    for (d, hv) in dst.iter_mut().zip(h) {
                        *d *= 1.0 - hv * hv;
                    }
                }
            }
            for r in 0..rows {
                grad[r * width + t * da..r * width + (t + 1) * da].copy_from_slice(&dx[r * din + dz..(r + 1) * din]);
                let g = &mut gz[r * dz..(r + 1) * dz];
                let src = &dx[r * din..r * din + dz];
                if self.residual {
                    g.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                } else {
                    g.copy_from_slice(src);
                }
            }
        }
        (losses, grad)
    }
}
