//! 3D convolution over `[C, D, H, W]` feature maps.
//!
//! Cross-correlation convention: `out[o, z, y, x] = b[o] + Σ w[o, i, a, b, c] ·
//! in_pad[i, z·sz + a, y·sy + b, x·sx + c]`. The kernel is never flipped.
//! Padding is "same" padding of `(k - 1) / 2` per axis. Reflection mirrors
//! about the edge sample without repeating it, so `[a b c]` pads to
//! `b [a b c] b`.

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: Padding,
    pub groups: usize,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            padding: Padding::Reflect,
            groups: 1,
        }
    }
}

/// Source index for each padded position, `None` for zero fill.
fn pad_map(n: usize, pad: usize, mode: Padding) -> Result<Vec<Option<usize>>> {
    if mode == Padding::Reflect && pad >= n && pad > 0 {
        return Err(Error::arg(format!(
            "reflection padding of {pad} needs an extent above {pad}, got {n}"
        )));
    }
    Ok((0..n + 2 * pad)
        .map(|i| {
            if i >= pad && i < pad + n {
                Some(i - pad)
            } else {
                match mode {
                    Padding::Zero => None,
                    Padding::Reflect if i < pad => Some(pad - i),
                    Padding::Reflect => Some(2 * (n - 1) - (i - pad)),
                }
            }
        })
        .collect())
}

struct Geometry {
    cin: usize,
    cout: usize,
    groups: usize,
    k: [usize; 3],
    stride: [usize; 3],
    out: [usize; 3],
    maps: [Vec<Option<usize>>; 3],
    input: [usize; 3],
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 5 {
            return Err(Error::shape("conv3d", x, w));
        }
        let groups = spec.groups.max(1);
        let (cin, cout) = (x[0], w[0]);
        if cin % groups != 0 || cout % groups != 0 || w[1] != cin / groups {
            return Err(Error::shape("conv3d", x, w));
        }
        let k = [w[2], w[3], w[4]];
        if k.iter().any(|&k| k % 2 == 0) {
            return Err(Error::arg(format!("conv3d kernel {k:?} must have odd extents")));
        }
        if spec.stride.iter().any(|&s| s == 0) {
            return Err(Error::arg("conv3d stride must be positive"));
        }
        let input = [x[1], x[2], x[3]];
        let mut padded = [0; 3];
        let mut out = [0; 3];
        let mut maps: [Vec<Option<usize>>; 3] = Default::default();
        for a in 0..3 {
            let pad = (k[a] - 1) / 2;
            maps[a] = pad_map(input[a], pad, spec.padding)?;
            padded[a] = input[a] + 2 * pad;
            if k[a] > padded[a] {
                return Err(Error::arg(format!(
                    "conv3d kernel {k:?} larger than padded input {padded:?}"
                )));
            }
            out[a] = (padded[a] - k[a]) / spec.stride[a] + 1;
        }
        Ok(Geometry {
            cin,
            cout,
            groups,
            k,
            stride: spec.stride,
            out,
            maps,
            input,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == [1, 1, 1] && self.groups == 1
    }

    fn positions(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    /// Source offset inside one input channel for every (tap, output
    /// position) pair, tap-major; `None` marks zero padding.
    fn gather_table(&self) -> Vec<Option<usize>> {
        let [kd, kh, kw] = self.k;
        let [od, oh, ow] = self.out;
        let [_, h, w] = self.input;
        let mut t = Vec::with_capacity(self.taps() * self.positions());
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    for z in 0..od {
                        let sz = self.maps[0][z * self.stride[0] + a];
                        for y in 0..oh {
                            let sy = self.maps[1][y * self.stride[1] + b];
                            for x in 0..ow {
                                let sx = self.maps[2][x * self.stride[2] + c];
                                t.push(match (sz, sy, sx) {
                                    (Some(z), Some(y), Some(x)) => Some((z * h + y) * w + x),
                                    _ => None,
                                });
                            }
                        }
                    }
                }
            }
        }
        t
    }

    /// Column matrix `[Cin·taps, positions]`.
    fn im2col(&self, x: &[f64], table: &[Option<usize>]) -> Vec<f64> {
        let plane: usize = self.input.iter().product();
        let rows = table.len();
        let mut col = vec![0.0; self.cin * rows];
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for (dst, idx) in col[ci * rows..(ci + 1) * rows].iter_mut().zip(table) {
                if let Some(i) = idx {
                    *dst = src[*i];
                }
            }
        }
        col
    }

    /// Adjoint of [`Geometry::im2col`].
    fn col2im(&self, col: &[f64], table: &[Option<usize>]) -> Vec<f64> {
        let plane: usize = self.input.iter().product();
        let rows = table.len();
        let mut gx = vec![0.0; self.cin * plane];
        for ci in 0..self.cin {
            let dst = &mut gx[ci * plane..(ci + 1) * plane];
            for (v, idx) in col[ci * rows..(ci + 1) * rows].iter().zip(table) {
                if let Some(i) = idx {
                    dst[*i] += v;
                }
            }
        }
        gx
    }
}

impl Graph {
    /// 3D cross-correlation of `x: [Cin, D, H, W]` with
    /// `weight: [Cout, Cin / groups, kd, kh, kw]` and optional `bias: [Cout]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv3dSpec,
    ) -> Result<Var> {
        let geo = Geometry::new(self.dims(x), self.dims(weight), spec)?;
        if let Some(b) = bias {
            if self.dims(b) != [geo.cout] {
                return Err(Error::shape("conv3d bias", self.dims(b), &[geo.cout]));
            }
        }
        let [od, oh, ow] = geo.out;
        let n_out = od * oh * ow;
        let mut out = vec![0.0; geo.cout * n_out];
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        if geo.is_pointwise() {
            gemm_acc(wv, xv, &mut out, geo.cout, geo.cin, n_out);
        } else {
            let table = geo.gather_table();
            let col = geo.im2col(xv, &table);
            let (cig, cog, kk) = (geo.cin / geo.groups, geo.cout / geo.groups, geo.taps());
            for grp in 0..geo.groups {
                gemm_acc(
                    &wv[grp * cog * cig * kk..(grp + 1) * cog * cig * kk],
                    &col[grp * cig * kk * n_out..(grp + 1) * cig * kk * n_out],
                    &mut out[grp * cog * n_out..(grp + 1) * cog * n_out],
                    cog,
                    cig * kk,
                    n_out,
                );
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                for o in &mut out[co * n_out..(co + 1) * n_out] {
                    *o += bv;
                }
            }
        }
        let value = Tensor::from_vec(vec![geo.cout, od, oh, ow], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            value,
            &parents,
            Box::new(move |g, p, _| {
                let (xv, wv) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut gw = vec![0.0; wv.len()];
                let gx = if geo.is_pointwise() {
                    let mut gx = vec![0.0; xv.len()];
                    gemm_tn_acc(wv, gd, &mut gx, geo.cin, geo.cout, n_out);
                    gemm_nt_acc(gd, xv, &mut gw, geo.cout, n_out, geo.cin);
                    gx
                } else {
                    let table = geo.gather_table();
                    let col = geo.im2col(xv, &table);
                    let mut gcol = vec![0.0; col.len()];
                    let (cig, cog, kk) = (geo.cin / geo.groups, geo.cout / geo.groups, geo.taps());
                    for grp in 0..geo.groups {
                        let w_rng = grp * cog * cig * kk..(grp + 1) * cog * cig * kk;
                        let c_rng = grp * cig * kk * n_out..(grp + 1) * cig * kk * n_out;
                        let g_rng = grp * cog * n_out..(grp + 1) * cog * n_out;
                        gemm_nt_acc(&gd[g_rng.clone()], &col[c_rng.clone()], &mut gw[w_rng.clone()], cog, n_out, cig * kk);
                        gemm_tn_acc(&wv[w_rng], &gd[g_rng], &mut gcol[c_rng], cig * kk, cog, n_out);
                    }
                    geo.col2im(&gcol, &table)
                };
                let mut grads = vec![
                    Some(Tensor::from_vec(p[0].dims().to_vec(), gx).unwrap()),
                    Some(Tensor::from_vec(p[1].dims().to_vec(), gw).unwrap()),
                ];
                if has_bias {
                    let gb = gd.chunks(n_out).map(|c| c.iter().sum()).collect();
                    grads.push(Some(Tensor::from_vec(vec![geo.cout], gb).unwrap()));
                }
                grads
            }),
        ))
    }
}
