//! Elementwise, linear-algebra and shape operations.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

const LEAKY_SLOPE: f64 = 0.01;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Sigmoid,
    Silu,
    /// Tanh approximation of GELU.
    Gelu,
    /// Slope 0.01 below zero.
    LeakyRelu,
    Abs,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    fn forward(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            UnaryOp::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            UnaryOp::Abs => x.abs(),
        }
    }

    /// Derivative at input `x` given output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            UnaryOp::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Output dims when broadcasting two equal-rank shapes, each axis equal or 1.
fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `dims` viewed inside `out`, zero along broadcast axes.
fn view_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; dims.len()];
    let mut s = 1;
    for i in (0..dims.len()).rev() {
        strides[i] = if dims[i] == 1 && out[i] != 1 { 0 } else { s };
        s *= dims[i];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every output element.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let last = rank - 1;
    let inner = out[last];
    let (ia, ib) = (sa[last], sb[last]);
    let outer: usize = out[..last].iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the outer multi-index
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `target` along broadcast axes.
fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.dims() == target {
        return g.clone();
    }
    let out = g.dims().to_vec();
    let st = view_strides(target, &out);
    let zero = vec![0; out.len()];
    let mut acc = Tensor::zeros(target);
    let gd = g.data();
    let ad = acc.data_mut();
    for_each_broadcast(&out, &st, &zero, |o, t, _| ad[t] += gd[o]);
    acc
}

impl Graph {
    /// Binary elementwise operation with equal-rank broadcasting.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let out = broadcast_dims(&ad, &bd).ok_or_else(|| Error::shape("elementwise", &ad, &bd))?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = if ad == bd {
            let f: fn(f64, f64) -> f64 = match op {
                BinaryOp::Add => |x: f64, y: f64| x + y,
                BinaryOp::Sub => |x: f64, y: f64| x - y,
                BinaryOp::Mul => |x: f64, y: f64| x * y,
            };
            av.zip_map(bv, f)?
        } else {
            let (sa, sb) = (view_strides(&ad, &out), view_strides(&bd, &out));
            let mut res = Tensor::zeros(&out);
            let (x, y) = (av.data(), bv.data());
            let r = res.data_mut();
            for_each_broadcast(&out, &sa, &sb, |o, i, j| {
                r[o] = match op {
                    BinaryOp::Add => x[i] + y[j],
                    BinaryOp::Sub => x[i] - y[j],
                    BinaryOp::Mul => x[i] * y[j],
                }
            });
            res
        };
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0], p[1]);
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.scale(-1.0)),
                    BinaryOp::Mul => {
                        if a.dims() == b.dims() {
                            (
                                g.zip_map(b, |x, y| x * y).unwrap(),
                                g.zip_map(a, |x, y| x * y).unwrap(),
                            )
                        } else {
                            let out = g.dims().to_vec();
                            let sa = view_strides(a.dims(), &out);
                            let sb = view_strides(b.dims(), &out);
                            let mut ga = Tensor::zeros(&out);
                            let mut gb = Tensor::zeros(&out);
                            let (gd, ad, bd) = (g.data(), a.data(), b.data());
                            let (gam, gbm) = (ga.data_mut(), gb.data_mut());
                            for_each_broadcast(&out, &sa, &sb, |o, i, j| {
                                gam[o] = gd[o] * bd[j];
                                gbm[o] = gd[o] * ad[i];
                            });
                            (ga, gb)
                        }
                    }
                };
                vec![Some(reduce_to(&ga, a.dims())), Some(reduce_to(&gb, b.dims()))]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        if matches!(op, UnaryOp::LeakyRelu | UnaryOp::Abs) {
            let xs = self.value(a).data().to_vec();
            self.record_branches(&xs);
        }
        let value = self.value(a).map(|x| op.forward(x));
        self.push(
            value,
            &[a],
            Box::new(move |g, p, y| {
                let x = p[0];
                let mut gx = g.clone();
                for ((gv, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *gv *= op.derivative(xv, yv);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::LeakyRelu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, &[a], Box::new(move |g, _, _| vec![Some(g.scale(s))]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape("matmul", &ad, &bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, p, _| {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g.data(), p[1].data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(p[0].data(), g.data(), &mut gb, k, m, n);
                vec![
                    Some(Tensor::from_vec(vec![m, k], ga).unwrap()),
                    Some(Tensor::from_vec(vec![k, n], gb).unwrap()),
                ]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let in_dims = self.dims(a).to_vec();
        let value = self.value(a).clone().reshape(dims)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, _, _| vec![Some(g.clone().reshape(&in_dims).unwrap())]),
        ))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, _, _| vec![Some(g.permute(&inverse).unwrap())]),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.dims(a).len() != 2 {
            return Err(Error::arg("transpose expects a matrix"));
        }
        self.permute(a, &[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .dims(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::arg(format!("concat axis {axis} out of range")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            let ok = d.len() == first.len()
                && d.iter().enumerate().all(|(i, &x)| i == axis || x == first[i]);
            if !ok {
                return Err(Error::shape("concat", &first, d));
            }
            lens.push(d[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_dims = first.clone();
        out_dims[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut start = 0;
        for (&p, &len) in parts.iter().zip(&lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            start += len;
        }
        let value = Tensor::from_vec(out_dims, out)?;
        Ok(self.push(
            value,
            parts,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut start = 0;
                p.iter()
                    .zip(&lens)
                    .map(|(pv, &len)| {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + start) * inner;
                            part.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        start += len;
                        Some(Tensor::from_vec(pv.dims().to_vec(), part).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::arg(format!(
                "slice [{start}, {}) along axis {axis} of {dims:?}",
                start + len
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let full = dims[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_dims = dims.clone();
        out_dims[axis] = len;
        let value = Tensor::from_vec(out_dims, out)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, _, _| {
                let mut ga = Tensor::zeros(&dims);
                let gd = g.data();
                let gm = ga.data_mut();
                for o in 0..outer {
                    let d = (o * full + start) * inner;
                    gm[d..d + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(ga)]
            }),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let dims = self.dims(a).to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&dims, g.data()[0]))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let dims = self.dims(a).to_vec();
        let n = *dims.last().unwrap();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(
            value,
            &[a],
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
