use super::{assemble::top_conductances, ConductanceNetwork, PowerMap, StackConfig, TemperatureField};
use super::{HEATSINK, NUM_LAYERS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `‖G·θ − Q‖ / ‖Q‖` at exit.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient on `G·θ = Q`, stopping at
/// relative residual `tol`. Fails after `20·n` iterations.
pub fn solve(
    cfg: &StackConfig,
    net: &ConductanceNetwork,
    tol: f64,
) -> Result<(TemperatureField, SolveStats)> {
    solve_capped(cfg, net, tol, 20 * net.n)
}

/// [`solve`] with an explicit iteration cap.
pub fn solve_capped(
    cfg: &StackConfig,
    net: &ConductanceNetwork,
    tol: f64,
    cap: usize,
) -> Result<(TemperatureField, SolveStats)> {
    let n = net.n;
    if n != cfg.num_nodes() {
        return Err(Error::shape("solve", &[n], &[cfg.num_nodes()]));
    }
    let dims = [NUM_LAYERS, cfg.rows, cfg.cols, 1];
    let q = &net.load;
    let q_norm = dot(q, q).sqrt();
    if q_norm == 0.0 {
        return Ok((
            TemperatureField { theta: Tensor::zeros(&dims), ambient: cfg.ambient },
            SolveStats { iterations: 0, relative_residual: 0.0 },
        ));
    }
    let inv_diag: Vec<f64> = net.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut x = vec![0.0; n];
    let mut r = q.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = 1.0;
    for it in 1..=cap {
        net.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            // exact breakdown: the residual is already at rounding level
            return Err(Error::NotConverged { iterations: it, residual: res });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt() / q_norm;
        if res <= tol {
            // confirm against the true residual, recurrences drift
            net.matvec(&x, &mut ap);
            let true_res = ap
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                / q_norm;
            if true_res <= tol {
                let theta = Tensor::from_vec(dims.to_vec(), x)?;
                return Ok((
                    TemperatureField { theta, ambient: cfg.ambient },
                    SolveStats { iterations: it, relative_residual: true_res },
                ));
            }
            for i in 0..n {
                r[i] = q[i] - ap[i];
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged { iterations: cap, residual: res })
}

/// `|Σ g_top·θ_top − Σ Q| / Σ Q`: heat leaving through the heatsink versus
/// heat injected. Zero when no power is applied.
pub fn energy_balance(cfg: &StackConfig, power: &PowerMap, field: &TemperatureField) -> f64 {
    let total = power.total();
    if total == 0.0 {
        return 0.0;
    }
    let plane = cfg.rows * cfg.cols;
    let top = &field.theta.data()[HEATSINK * plane..(HEATSINK + 1) * plane];
    let out: f64 = top_conductances(cfg).iter().zip(top).map(|(g, t)| g * t).sum();
    (out - total).abs() / total
}
