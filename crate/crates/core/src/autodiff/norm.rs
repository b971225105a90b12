//! Mean/variance normalization.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

impl Graph {
    /// Normalizes to zero mean and unit (biased) variance along `axis`,
    /// independently for every position of the remaining axes.
    pub fn normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(Error::arg(format!("normalize axis {axis} out of range for {dims:?}")));
        }
        let (outer, n, inner) = self.value(x).shape().split_at_axis(axis);
        if n < 2 {
            return Err(Error::arg(format!(
                "normalization over a single element is undefined (shape {dims:?}, axis {axis})"
            )));
        }
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| xv[at(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (xv[at(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[o * inner + i] = r;
                for k in 0..n {
                    y[at(k)] = (xv[at(k)] - mean) * r;
                }
            }
        }
        let value = Tensor::from_vec(dims, y)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |g, _, y| {
                let (gd, yd) = (g.data(), y.data());
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mg = (0..n).map(|k| gd[at(k)]).sum::<f64>() / n as f64;
                        let mgy = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum::<f64>() / n as f64;
                        let r = inv_std[o * inner + i];
                        for k in 0..n {
                            gx[at(k)] = r * (gd[at(k)] - mg - yd[at(k)] * mgy);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(g.dims().to_vec(), gx).unwrap())]
            }),
        ))
    }

    /// Layer normalization along `axis` followed by the affine map
    /// `gamma ⊙ y + beta`; `gamma`/`beta` broadcast against `x`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var) -> Result<Var> {
        let y = self.normalize(x, axis)?;
        let y = self.mul(y, gamma)?;
        self.add(y, beta)
    }

    /// Instance normalization of `[C, D, H, W]`: every channel normalized
    /// over its `D·H·W` samples, then a per-channel affine map with
    /// `gamma`, `beta` shaped `[C, 1, 1, 1]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::arg(format!("instance_norm expects [C,D,H,W], got {dims:?}")));
        }
        let flat = self.reshape(x, &[dims[0], dims[1] * dims[2] * dims[3]])?;
        let y = self.normalize(flat, 1)?;
        let y = self.reshape(y, &dims)?;
        let y = self.mul(y, gamma)?;
        self.add(y, beta)
    }
}
