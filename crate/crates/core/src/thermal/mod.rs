//! Compact thermal model of a four-layer chiplet stack.
//!
//! Layers, bottom to top: heat source (die), thermal interface material,
//! heat spreader, heatsink. Every layer is discretized on the same `R × C`
//! lateral grid spanning the heatsink footprint, one node per cell per
//! layer. The heatsink top convects to ambient; all other surfaces are
//! adiabatic. Unknowns are temperature rises `θ = T − T_amb`.

mod assemble;
mod solve;

use serde::{Deserialize, Serialize};

pub use assemble::{assemble, top_conductances, ConductanceNetwork};
pub use solve::{energy_balance, solve, solve_capped, SolveStats, DEFAULT_TOLERANCE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LAYERS: usize = 4;
pub const LAYER_NAMES: [&str; NUM_LAYERS] = ["source", "tim", "spreader", "heatsink"];
pub const SOURCE: usize = 0;
pub const HEATSINK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Meters.
    pub thickness: f64,
    /// Side of the square physical footprint, meters.
    pub side: f64,
    /// Isotropic conductivity, W/(m·K).
    pub conductivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub layers: [LayerSpec; NUM_LAYERS],
    /// Heat transfer coefficient at the heatsink top, W/(m²·K).
    pub htc: f64,
    /// Ambient temperature, K.
    pub ambient: f64,
    pub rows: usize,
    pub cols: usize,
    /// Conductivity multiplier for cells outside a layer's footprint.
    pub fill_factor: f64,
}

impl Default for StackConfig {
    /// 18 mm heatsink with a 10 mm die, on a 64 × 64 grid.
    fn default() -> Self {
        let layer = |t_mm: f64, l_mm: f64, k: f64| LayerSpec {
            thickness: t_mm * 1e-3,
            side: l_mm * 1e-3,
            conductivity: k,
        };
        StackConfig {
            layers: [
                layer(0.15, 10.0, 100.0),
                layer(0.02, 10.0, 4.0),
                layer(1.0, 14.0, 400.0),
                layer(6.9, 18.0, 400.0),
            ],
            htc: 1.2e4,
            ambient: 318.15,
            rows: 64,
            cols: 64,
            fill_factor: 0.05,
        }
    }
}

impl StackConfig {
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.rows = rows;
        self.cols = cols;
        self
    }

    /// Heatsink side length `s`.
    pub fn heatsink_side(&self) -> f64 {
        self.layers[HEATSINK].side
    }

    /// Full validation, including the `R, C ≥ 2` grid requirement used for
    /// datasets and networks.
    pub fn validate(&self) -> Result<()> {
        self.validate_physics()?;
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid {}x{} must be at least 2x2",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Geometry and material checks only. Any grid with at least one cell
    /// passes, so single-column chains can be assembled.
    pub fn validate_physics(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig("grid must have at least one cell".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let name = LAYER_NAMES[i];
            if !(l.thickness > 0.0 && l.thickness.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} thickness must be positive")));
            }
            if !(l.conductivity > 0.0 && l.conductivity.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} conductivity must be positive")));
            }
            if !(l.side > 0.0 && l.side.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} side must be positive")));
            }
        }
        for i in 0..NUM_LAYERS - 1 {
            if self.layers[i].side > self.layers[i + 1].side {
                return Err(Error::InvalidConfig(format!(
                    "{} side exceeds {} side",
                    LAYER_NAMES[i],
                    LAYER_NAMES[i + 1]
                )));
            }
        }
        if !(self.htc > 0.0 && self.htc.is_finite()) {
            return Err(Error::InvalidConfig("heat transfer coefficient must be positive".into()));
        }
        if !(self.fill_factor > 0.0 && self.fill_factor <= 1.0) {
            return Err(Error::InvalidConfig("fill factor must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        NUM_LAYERS * self.rows * self.cols
    }

    /// Node index `layer·R·C + row·C + col`.
    pub fn node(&self, layer: usize, row: usize, col: usize) -> usize {
        (layer * self.rows + row) * self.cols + col
    }

    /// Cell extents `(dx, dy)`: `dx` along columns, `dy` along rows.
    pub fn cell_size(&self) -> (f64, f64) {
        let s = self.heatsink_side();
        (s / self.cols as f64, s / self.rows as f64)
    }

    /// Whether the centre of cell `(row, col)` lies inside `layer`'s
    /// centred square footprint.
    pub fn in_footprint(&self, layer: usize, row: usize, col: usize) -> bool {
        let s = self.heatsink_side();
        let (dx, dy) = self.cell_size();
        let half = 0.5 * self.layers[layer].side * (1.0 + 1e-12);
        let x = (col as f64 + 0.5) * dx - 0.5 * s;
        let y = (row as f64 + 0.5) * dy - 0.5 * s;
        x.abs() <= half && y.abs() <= half
    }

    /// Inclusive-exclusive row/col ranges `(r0, r1, c0, c1)` covered by a
    /// layer's footprint.
    pub fn footprint_bounds(&self, layer: usize) -> Option<(usize, usize, usize, usize)> {
        let rows: Vec<usize> = (0..self.rows).filter(|&r| self.in_footprint(layer, r, self.cols / 2)).collect();
        let cols: Vec<usize> = (0..self.cols).filter(|&c| self.in_footprint(layer, self.rows / 2, c)).collect();
        match (rows.first(), rows.last(), cols.first(), cols.last()) {
            (Some(&r0), Some(&r1), Some(&c0), Some(&c1)) => Some((r0, r1 + 1, c0, c1 + 1)),
            _ => None,
        }
    }

    /// Effective conductivity of a cell: the layer's own inside the
    /// footprint, `fill_factor` times it outside.
    pub fn cell_conductivity(&self, layer: usize, row: usize, col: usize) -> f64 {
        let k = self.layers[layer].conductivity;
        if self.in_footprint(layer, row, col) {
            k
        } else {
            k * self.fill_factor
        }
    }
}

/// Per-cell dissipated power in watts, `[4, R, C, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerMap {
    pub q: Tensor,
}

impl PowerMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PowerMap {
            q: Tensor::zeros(&[NUM_LAYERS, rows, cols, 1]),
        }
    }

    pub fn new(q: Tensor) -> Result<Self> {
        let d = q.dims();
        if d.len() != 4 || d[0] != NUM_LAYERS || d[3] != 1 {
            return Err(Error::shape("PowerMap", d, &[NUM_LAYERS, 0, 0, 1]));
        }
        if q.data().iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::arg("power entries must be finite and non-negative"));
        }
        Ok(PowerMap { q })
    }

    pub fn rows(&self) -> usize {
        self.q.dims()[1]
    }

    pub fn cols(&self) -> usize {
        self.q.dims()[2]
    }

    /// Per-layer totals `Q_t[i] = Σ Q_s[i]`.
    pub fn layer_totals(&self) -> [f64; NUM_LAYERS] {
        let plane = self.rows() * self.cols();
        let mut t = [0.0; NUM_LAYERS];
        for (i, chunk) in self.q.data().chunks(plane).enumerate() {
            t[i] = chunk.iter().sum();
        }
        t
    }

    pub fn total(&self) -> f64 {
        self.q.sum()
    }
}

/// Steady-state temperature rise above ambient, `[4, R, C, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureField {
    pub theta: Tensor,
    pub ambient: f64,
}

impl TemperatureField {
    /// Absolute temperature `T = T_amb + θ`.
    pub fn absolute(&self) -> Tensor {
        self.theta.map(|v| v + self.ambient)
    }

    pub fn max_rise(&self) -> f64 {
        self.theta.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rise of one cell.
    pub fn at(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.theta.at(&[layer, row, col, 0])
    }
}
