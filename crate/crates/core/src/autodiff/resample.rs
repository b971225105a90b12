//! Linear maps applied along one axis: lateral resampling and the basis
//! products used by the spectral transforms.

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Linear interpolation, half-pixel centres (align-corners false). The
    /// outermost half cell is linearly extrapolated from the two nearest
    /// samples, so affine ramps are reproduced exactly.
    TrilinearUp,
    /// Keeps every `in / out`-th sample; requires an integer ratio.
    StridedDown,
    /// Averages `out` near-equal partitions of the input.
    AdaptivePool,
}

/// `[out, in]` matrix of the 1D resampling map.
pub fn resample_matrix(n_in: usize, n_out: usize, mode: ResampleMode) -> Result<Tensor> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::arg(format!("resample target {n_out} from {n_in} must be at least 1")));
    }
    let mut m = Tensor::zeros(&[n_out, n_in]);
    match mode {
        ResampleMode::TrilinearUp => {
            if n_in == 1 {
                for o in 0..n_out {
                    m.set(&[o, 0], 1.0);
                }
                return Ok(m);
            }
            let ratio = n_in as f64 / n_out as f64;
            for o in 0..n_out {
                let src = (o as f64 + 0.5) * ratio - 0.5;
                let i0 = (src.floor().max(0.0) as usize).min(n_in - 2);
                let lam = src - i0 as f64;
                m.set(&[o, i0], 1.0 - lam);
                m.set(&[o, i0 + 1], lam);
            }
        }
        ResampleMode::StridedDown => {
            if n_in % n_out != 0 {
                return Err(Error::arg(format!("strided resample needs {n_out} to divide {n_in}")));
            }
            let s = n_in / n_out;
            for o in 0..n_out {
                m.set(&[o, o * s], 1.0);
            }
        }
        ResampleMode::AdaptivePool => {
            for o in 0..n_out {
                let start = o * n_in / n_out;
                let end = ((o + 1) * n_in).div_ceil(n_out);
                let w = 1.0 / (end - start) as f64;
                for i in start..end {
                    m.set(&[o, i], w);
                }
            }
        }
    }
    Ok(m)
}

impl Graph {
    /// Applies `matrix: [out, in]` along `axis`.
    pub fn axis_map(&mut self, x: Var, axis: usize, matrix: Arc<Tensor>) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let md = matrix.dims();
        if axis >= dims.len() || md.len() != 2 || md[1] != dims[axis] {
            return Err(Error::shape("axis_map", &dims, md));
        }
        let (n_out, n_in) = (md[0], md[1]);
        let (outer, _, inner) = self.value(x).shape().split_at_axis(axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            gemm_acc(
                matrix.data(),
                &xv[o * n_in * inner..(o + 1) * n_in * inner],
                &mut out[o * n_out * inner..(o + 1) * n_out * inner],
                n_out,
                n_in,
                inner,
            );
        }
        let mut out_dims = dims.clone();
        out_dims[axis] = n_out;
        let value = Tensor::from_vec(out_dims, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut gx = vec![0.0; outer * n_in * inner];
                for o in 0..outer {
                    gemm_tn_acc(
                        matrix.data(),
                        &gd[o * n_out * inner..(o + 1) * n_out * inner],
                        &mut gx[o * n_in * inner..(o + 1) * n_in * inner],
                        n_in,
                        n_out,
                        inner,
                    );
                }
                vec![Some(Tensor::from_vec(dims.clone(), gx).unwrap())]
            }),
        ))
    }

    /// Resamples the two lateral axes of `[C, D, H, W]` to `target = (H', W')`.
    /// The depth axis is left untouched.
    pub fn resample(&mut self, x: Var, target: (usize, usize), mode: ResampleMode) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::arg(format!("resample expects [C,D,H,W], got {dims:?}")));
        }
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::arg("resample target must be at least 1"));
        }
        let mut y = x;
        for (axis, n_out) in [(2, target.0), (3, target.1)] {
            let n_in = dims[axis];
            if n_in == n_out {
                continue;
            }
            let m = Arc::new(resample_matrix(n_in, n_out, mode)?);
            y = self.axis_map(y, axis, m)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsampling_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 3, 5], 1.25));
        let y = g.resample(x, (6, 10), ResampleMode::TrilinearUp).unwrap();
        assert_eq!(g.dims(y), &[2, 4, 6, 10]);
        assert!(g.value(y).data().iter().all(|v| (v - 1.25).abs() < 1e-14));
    }

    #[test]
    fn up_then_pool_recovers_bilinear_ramp() {
        let ramp = Tensor::from_fn(&[1, 2, 4, 6], |i| 0.3 + 1.5 * i[2] as f64 - 0.7 * i[3] as f64);
        let mut g = Graph::new();
        let x = g.constant(ramp.clone());
        let up = g.resample(x, (8, 12), ResampleMode::TrilinearUp).unwrap();
        let back = g.resample(up, (4, 6), ResampleMode::AdaptivePool).unwrap();
        assert!(g.value(back).max_abs_diff(&ramp) <= 1e-9);
    }

    #[test]
    fn adaptive_pool_uneven_partitions() {
        let m = resample_matrix(5, 2, ResampleMode::AdaptivePool).unwrap();
        // partitions [0,3) and [2,5)
        assert_eq!(m.data(), &[1. / 3., 1. / 3., 1. / 3., 0., 0., 0., 0., 1. / 3., 1. / 3., 1. / 3.]);
    }

    #[test]
    fn strided_down_picks_samples() {
        let m = resample_matrix(6, 3, ResampleMode::StridedDown).unwrap();
        assert_eq!(m.at(&[2, 4]), 1.0);
        assert!(resample_matrix(5, 2, ResampleMode::StridedDown).is_err());
    }

    #[test]
    fn zero_target_rejected() {
        assert!(resample_matrix(4, 0, ResampleMode::TrilinearUp).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.resample(x, (0, 2), ResampleMode::AdaptivePool).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 2, 3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 2, 6, 8], -1.0, 1.0, &mut rng);
        let rep = check_gradients(&[x], 1e-5, |g, v| {
            let up = g.resample(v[0], (6, 8), ResampleMode::TrilinearUp)?;
            let wc = g.constant(w.clone());
            let p = g.mul(up, wc)?;
            let p = g.mul(p, up)?;
            let pooled = g.resample(p, (2, 3), ResampleMode::AdaptivePool)?;
            Ok(g.sum_all(pooled))
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }
}
