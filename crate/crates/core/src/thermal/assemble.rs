use super::{PowerMap, StackConfig, HEATSINK, NUM_LAYERS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric conductance matrix `G` in CSR form plus load vector `Q`.
#[derive(Clone, Debug)]
pub struct ConductanceNetwork {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    /// Nodal power, watts.
    pub load: Vec<f64>,
}

impl ConductanceNetwork {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.col_idx[k] == i)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .find(|&k| self.col_idx[k] == j)
            .map_or(0.0, |k| self.values[k])
    }

    /// Dense `[n, n]` copy.
    pub fn to_dense(&self) -> Tensor {
        let mut d = Tensor::zeros(&[self.n, self.n]);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                d.set(&[i, self.col_idx[k]], self.values[k]);
            }
        }
        d
    }
}

fn series(a: f64, b: f64) -> f64 {
    1.0 / (1.0 / a + 1.0 / b)
}

/// Conductance from each heatsink-top cell to ambient: half-cell conduction
/// in series with convection `h·A`. Indexed `row·C + col`.
pub fn top_conductances(cfg: &StackConfig) -> Vec<f64> {
    let (dx, dy) = cfg.cell_size();
    let area = dx * dy;
    let t = cfg.layers[HEATSINK].thickness;
    let mut g = Vec::with_capacity(cfg.rows * cfg.cols);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let k = cfg.cell_conductivity(HEATSINK, r, c);
            g.push(series(2.0 * k * area / t, cfg.htc * area));
        }
    }
    g
}

/// Builds the conductance network of `cfg` loaded with `power`.
///
/// * lateral neighbours: series of the two half cells, `k·t·dy/dx` along
///   columns and `k·t·dx/dy` along rows for equal conductivities;
/// * vertical neighbours: `1/g = t_i / (2 k_i A) + t_{i+1} / (2 k_{i+1} A)`;
/// * heatsink top: [`top_conductances`];
/// * everything else adiabatic.
pub fn assemble(cfg: &StackConfig, power: &PowerMap) -> Result<ConductanceNetwork> {
    cfg.validate_physics()?;
    if power.rows() != cfg.rows || power.cols() != cfg.cols {
        return Err(Error::shape(
            "assemble",
            &[cfg.rows, cfg.cols],
            &[power.rows(), power.cols()],
        ));
    }
    let n = cfg.num_nodes();
    let (dx, dy) = cfg.cell_size();
    let area = dx * dy;
    let mut diag = vec![0.0; n];
    let mut off: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(6); n];
    let mut couple = |i: usize, j: usize, g: f64| {
        diag[i] += g;
        diag[j] += g;
        off[i].push((j, -g));
        off[j].push((i, -g));
    };

    let k_of: Vec<f64> = (0..NUM_LAYERS)
        .flat_map(|l| (0..cfg.rows).flat_map(move |r| (0..cfg.cols).map(move |c| (l, r, c))))
        .map(|(l, r, c)| cfg.cell_conductivity(l, r, c))
        .collect();

    for l in 0..NUM_LAYERS {
        let t = cfg.layers[l].thickness;
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                let i = cfg.node(l, r, c);
                if c + 1 < cfg.cols {
                    let j = cfg.node(l, r, c + 1);
                    // each half cell: length dx/2, cross-section t·dy
                    let g = series(2.0 * k_of[i] * t * dy / dx, 2.0 * k_of[j] * t * dy / dx);
                    couple(i, j, g);
                }
                if r + 1 < cfg.rows {
                    let j = cfg.node(l, r + 1, c);
                    let g = series(2.0 * k_of[i] * t * dx / dy, 2.0 * k_of[j] * t * dx / dy);
                    couple(i, j, g);
                }
                if l + 1 < NUM_LAYERS {
                    let j = cfg.node(l + 1, r, c);
                    let t2 = cfg.layers[l + 1].thickness;
                    let g = series(2.0 * k_of[i] * area / t, 2.0 * k_of[j] * area / t2);
                    couple(i, j, g);
                }
            }
        }
    }
    for (cell, g) in top_conductances(cfg).into_iter().enumerate() {
        diag[HEATSINK * cfg.rows * cfg.cols + cell] += g;
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(7 * n);
    let mut values = Vec::with_capacity(7 * n);
    row_ptr.push(0);
    for i in 0..n {
        let mut row = std::mem::take(&mut off[i]);
        row.push((i, diag[i]));
        row.sort_by_key(|&(j, _)| j);
        for (j, v) in row {
            col_idx.push(j);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(ConductanceNetwork {
        n,
        row_ptr,
        col_idx,
        values,
        load: power.q.data().to_vec(),
    })
}
