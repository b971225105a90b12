//! Differentiable orthonormal 3D DCT-II, anisotropic frequency weighting
//! and 2D DFT magnitude/phase.
//!
//! The DCT is applied separably: one `[n, n]` basis product per axis, with
//! `D[u, x] = α_u · cos(π u (2x + 1) / 2n)`, `α_0 = √(1/n)` and
//! `α_u = √(2/n)` otherwise. `D` is orthogonal, so the inverse is `Dᵀ`.
//! Basis matrices are built once per size and shared process-wide.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Bins whose magnitude falls below this get a zero phase gradient.
pub const PHASE_GRAD_FLOOR: f64 = 1e-8;

type BasisCache = RwLock<HashMap<(usize, bool), Arc<Tensor>>>;

fn basis_cache() -> &'static BasisCache {
    static CACHE: OnceLock<BasisCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Orthonormal DCT-II basis `[n, n]` (or its transpose when `inverse`).
pub fn dct_basis(n: usize, inverse: bool) -> Arc<Tensor> {
    if let Some(m) = basis_cache().read().unwrap().get(&(n, inverse)) {
        return Arc::clone(m);
    }
    let forward = Tensor::from_fn(&[n, n], |i| {
        let (u, x) = (i[0], i[1]);
        let alpha = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        alpha * (PI * u as f64 * (2 * x + 1) as f64 / (2 * n) as f64).cos()
    });
    let m = Arc::new(if inverse { forward.transpose2().unwrap() } else { forward });
    basis_cache()
        .write()
        .unwrap()
        .entry((n, inverse))
        .or_insert(m)
        .clone()
}

/// DCT (or inverse DCT) applied along each of `axes`.
pub fn dct_along(g: &mut Graph, x: Var, axes: &[usize], inverse: bool) -> Result<Var> {
    let mut y = x;
    for &a in axes {
        let n = *g
            .dims(y)
            .get(a)
            .ok_or_else(|| Error::arg(format!("DCT axis {a} out of range")))?;
        y = g.axis_map(y, a, dct_basis(n, inverse))?;
    }
    Ok(y)
}

/// DCT-II coefficients of a `[C, M, N, P]` field.
#[derive(Clone, Debug)]
pub struct FreqTensor {
    pub coeffs: Var,
    pub source_shape: Shape,
}

/// Per-channel learnable frequency exponents `[C, 3]`, one `(E_u, E_w, E_p)`
/// row per channel.
#[derive(Clone, Copy, Debug)]
pub struct FreqBandParams {
    pub exponents: Var,
}

fn check_rank4(dims: &[usize], op: &'static str) -> Result<()> {
    if dims.len() != 4 {
        return Err(Error::shape(op, dims, &[0, 0, 0, 0]));
    }
    Ok(())
}

/// Orthonormal 3D DCT-II over the trailing three axes of `[C, M, N, P]`.
pub fn dct3(g: &mut Graph, x: Var) -> Result<FreqTensor> {
    check_rank4(g.dims(x), "dct3")?;
    let source_shape = g.value(x).shape().clone();
    let coeffs = dct_along(g, x, &[1, 2, 3], false)?;
    Ok(FreqTensor {
        coeffs,
        source_shape,
    })
}

/// Inverse of [`dct3`].
pub fn idct3(g: &mut Graph, f: &FreqTensor) -> Result<Var> {
    if g.dims(f.coeffs) != f.source_shape.dims() {
        return Err(Error::shape("idct3", g.dims(f.coeffs), f.source_shape.dims()));
    }
    dct_along(g, f.coeffs, &[1, 2, 3], true)
}

/// Squared normalized frequency coordinate `(k / max(n - 1, 1))²`.
fn norm_freq_sq(n: usize) -> Vec<f64> {
    let denom = (n.max(2) - 1) as f64;
    (0..n).map(|k| (k as f64 / denom).powi(2)).collect()
}

/// Weight tensor `W[c, u, w, p] = exp(-(E_u û² + E_w ŵ² + E_p p̂²))`.
pub fn freq_weights(dims: &[usize], exponents: &Tensor) -> Result<Tensor> {
    check_rank4(dims, "freq_weights")?;
    let c = dims[0];
    if exponents.dims() != [c, 3] {
        return Err(Error::shape("apply_freq_weight", exponents.dims(), &[c, 3]));
    }
    let (fu, fw, fp) = (norm_freq_sq(dims[1]), norm_freq_sq(dims[2]), norm_freq_sq(dims[3]));
    let e = exponents.data();
    let mut out = Vec::with_capacity(dims.iter().product());
    for ch in 0..c {
        let (eu, ew, ep) = (e[3 * ch], e[3 * ch + 1], e[3 * ch + 2]);
        for &u in &fu {
            for &w in &fw {
                for &p in &fp {
                    let v = (-(eu * u + ew * w + ep * p)).exp();
                    if !v.is_finite() {
                        return Err(Error::NonFiniteWeight { channel: ch });
                    }
                    out.push(v);
                }
            }
        }
    }
    Tensor::from_vec(dims.to_vec(), out)
}

/// Multiplies every coefficient by its channel's frequency weight.
/// Gradients flow to both the coefficients and the exponents.
pub fn apply_freq_weight(
    g: &mut Graph,
    f: &FreqTensor,
    params: &FreqBandParams,
) -> Result<FreqTensor> {
    let dims = g.dims(f.coeffs).to_vec();
    let weights = freq_weights(&dims, g.value(params.exponents))?;
    let value = g.value(f.coeffs).zip_map(&weights, |a, b| a * b)?;
    let (fu, fw, fp) = (norm_freq_sq(dims[1]), norm_freq_sq(dims[2]), norm_freq_sq(dims[3]));
    let coeffs = g.push(
        value,
        &[f.coeffs, params.exponents],
        Box::new(move |grad, _, out| {
            let gf = grad.zip_map(&weights, |a, b| a * b).unwrap();
            // d out / d E_u = -û² · out, likewise for w, p
            let (gd, od) = (grad.data(), out.data());
            let mut ge = vec![0.0; dims[0] * 3];
            let mut k = 0;
            for ch in 0..dims[0] {
                for &u in &fu {
                    for &w in &fw {
                        for &p in &fp {
                            let s = gd[k] * od[k];
                            ge[3 * ch] -= s * u;
                            ge[3 * ch + 1] -= s * w;
                            ge[3 * ch + 2] -= s * p;
                            k += 1;
                        }
                    }
                }
            }
            vec![Some(gf), Some(Tensor::from_vec(vec![dims[0], 3], ge).unwrap())]
        }),
    );
    Ok(FreqTensor {
        coeffs,
        source_shape: f.source_shape.clone(),
    })
}

struct DftBasis {
    cos_h: Vec<f64>,
    sin_h: Vec<f64>,
    cos_w: Vec<f64>,
    sin_w: Vec<f64>,
    h: usize,
    w: usize,
}

impl DftBasis {
    fn new(h: usize, w: usize) -> Self {
        let table = |n: usize, f: fn(f64) -> f64| -> Vec<f64> {
            (0..n * n)
                .map(|i| f(2.0 * PI * ((i / n) * (i % n) % n) as f64 / n as f64))
                .collect()
        };
        DftBasis {
            cos_h: table(h, f64::cos),
            sin_h: table(h, f64::sin),
            cos_w: table(w, f64::cos),
            sin_w: table(w, f64::sin),
            h,
            w,
        }
    }

    /// `out = a[h,h] · x[h,w] · b[w,w]` (all bases are symmetric).
    fn sandwich(&self, a: &[f64], x: &[f64], b: &[f64], sign: f64, out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let mut xb = vec![0.0; h * w];
        crate::tensor::gemm_acc(x, b, &mut xb, h, w, w);
        let mut axb = vec![0.0; h * w];
        crate::tensor::gemm_acc(a, &xb, &mut axb, h, h, w);
        for (o, v) in out.iter_mut().zip(axb) {
            *o += sign * v;
        }
    }

    /// Real and imaginary parts of one `[h, w]` plane.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.h * self.w;
        let (mut re, mut im) = (vec![0.0; n], vec![0.0; n]);
        self.sandwich(&self.cos_h, x, &self.cos_w, 1.0, &mut re);
        self.sandwich(&self.sin_h, x, &self.sin_w, -1.0, &mut re);
        self.sandwich(&self.sin_h, x, &self.cos_w, -1.0, &mut im);
        self.sandwich(&self.cos_h, x, &self.sin_w, -1.0, &mut im);
        (re, im)
    }

    /// Adjoint of [`DftBasis::forward`].
    fn adjoint(&self, g_re: &[f64], g_im: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.h * self.w];
        self.sandwich(&self.cos_h, g_re, &self.cos_w, 1.0, &mut gx);
        self.sandwich(&self.sin_h, g_re, &self.sin_w, -1.0, &mut gx);
        self.sandwich(&self.sin_h, g_im, &self.cos_w, -1.0, &mut gx);
        self.sandwich(&self.cos_h, g_im, &self.sin_w, -1.0, &mut gx);
        gx
    }
}

/// Complex 2D DFT over the trailing two axes: `(real, imaginary)`.
pub fn dft2(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::arg("dft2 needs at least two axes"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let basis = DftBasis::new(h, w);
    let mut re = Vec::with_capacity(x.numel());
    let mut im = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(h * w) {
        let (r, i) = basis.forward(plane);
        re.extend(r);
        im.extend(i);
    }
    Ok((Tensor::from_vec(dims.to_vec(), re)?, Tensor::from_vec(dims.to_vec(), im)?))
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_phase(d: f64) -> f64 {
    let mut r = d.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Magnitude `|F|` and phase `atan2(Im, Re)` of the 2D DFT of the trailing
/// two axes of `x`, both differentiable with respect to `x`.
pub fn dft2_mag_phase(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let (re, im) = dft2(g.value(x))?;
    let dims = re.dims().to_vec();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let mag = re.zip_map(&im, f64::hypot)?;
    let phase = im.zip_map(&re, f64::atan2)?;
    let re = Arc::new(re);
    let im = Arc::new(im);

    let (r1, i1) = (Arc::clone(&re), Arc::clone(&im));
    let mag_var = g.push(
        mag,
        &[x],
        Box::new(move |grad, _, out| {
            let basis = DftBasis::new(h, w);
            let mut gx = Vec::with_capacity(grad.numel());
            let plane = h * w;
            for p in 0..grad.numel() / plane {
                let s = p * plane..(p + 1) * plane;
                let (mut g_re, mut g_im) = (vec![0.0; plane], vec![0.0; plane]);
                for k in 0..plane {
                    let m = out.data()[s.start + k];
                    if m > 0.0 {
                        let gv = grad.data()[s.start + k];
                        g_re[k] = gv * r1.data()[s.start + k] / m;
                        g_im[k] = gv * i1.data()[s.start + k] / m;
                    }
                }
                gx.extend(basis.adjoint(&g_re, &g_im));
            }
            vec![Some(Tensor::from_vec(grad.dims().to_vec(), gx).unwrap())]
        }),
    );
    let phase_var = g.push(
        phase,
        &[x],
        Box::new(move |grad, _, _| {
            let basis = DftBasis::new(h, w);
            let mut gx = Vec::with_capacity(grad.numel());
            let plane = h * w;
            for p in 0..grad.numel() / plane {
                let s = p * plane..(p + 1) * plane;
                let (mut g_re, mut g_im) = (vec![0.0; plane], vec![0.0; plane]);
                for k in 0..plane {
                    let (r, i) = (re.data()[s.start + k], im.data()[s.start + k]);
                    let m2 = r * r + i * i;
                    if m2.sqrt() >= PHASE_GRAD_FLOOR {
                        let gv = grad.data()[s.start + k];
                        g_re[k] = -gv * i / m2;
                        g_im[k] = gv * r / m2;
                    }
                }
                gx.extend(basis.adjoint(&g_re, &g_im));
            }
            vec![Some(Tensor::from_vec(grad.dims().to_vec(), gx).unwrap())]
        }),
    );
    Ok((mag_var, phase_var))
}
