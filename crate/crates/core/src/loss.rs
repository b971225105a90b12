//! Frequency-spatial hybrid loss, field metrics, and thermal gradient fields.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::spectral::{dft2, dft2_mag_phase, wrap_phase};
use crate::tensor::Tensor;

/// Phase bins whose ground-truth magnitude falls below this are ignored.
pub const PHASE_SKIP: f64 = 1e-8;
/// PSNR reported for an exact prediction.
pub const PSNR_CAP: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Spatial mean squared error.
    pub spatial: f64,
    /// Mean absolute magnitude difference.
    pub magnitude: f64,
    /// Mean absolute wrapped phase difference.
    pub phase: f64,
    /// `magnitude + β·phase`.
    pub frequency: f64,
    /// `spatial + α·frequency`.
    pub total: f64,
}

/// Records the hybrid loss of `pred` against `truth` on `g`.
///
/// Both fields are `[L, H, W]` (any leading shape works; the last two axes
/// are transformed). Returns the scalar loss node and its parts.
///
/// The DFT is scaled by `1/√(H·W)` so the magnitude term is independent of
/// resolution. Per layer, the phase term averages over bins where
/// `|F_truth| ≥ PHASE_SKIP`; layers are then averaged.
pub fn fsl(g: &mut Graph, pred: Var, truth: &Tensor, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let dims = g.dims(pred).to_vec();
    if dims != truth.dims() {
        return Err(Error::shape("fsl", &dims, truth.dims()));
    }
    if dims.len() < 2 {
        return Err(Error::arg("fsl needs at least two axes"));
    }
    if !g.value(pred).all_finite() || !truth.all_finite() {
        return Err(Error::NonFinite("fsl input".into()));
    }
    let (h, wd) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let plane = h * wd;
    let layers = truth.numel() / plane;
    let norm = 1.0 / (plane as f64).sqrt();

    let t = g.constant(truth.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    let spatial = g.mean_all(sq);

    let (t_re, t_im) = dft2(truth)?;
    let t_mag = t_re.zip_map(&t_im, |r, i| r.hypot(i) * norm)?;
    let t_phase = t_im.zip_map(&t_re, f64::atan2)?;

    let (p_mag, p_phase) = dft2_mag_phase(g, pred)?;
    let p_mag = g.scale(p_mag, norm);
    let tm = g.constant(t_mag.clone());
    let dmag = g.sub(p_mag, tm)?;
    let amag = g.abs(dmag);
    let magnitude = g.mean_all(amag);

    // per-bin weights: 1 / (kept bins in layer · layers), zero on skipped bins
    let mut weights = vec![0.0; truth.numel()];
    for (l, chunk) in t_mag.data().chunks(plane).enumerate() {
        let kept = chunk.iter().filter(|&&m| m >= PHASE_SKIP * norm).count();
        if kept == 0 {
            continue;
        }
        let wl = 1.0 / (kept * layers) as f64;
        for (k, &m) in chunk.iter().enumerate() {
            if m >= PHASE_SKIP * norm {
                weights[l * plane + k] = wl;
            }
        }
    }
    let raw = g.value(p_phase).zip_map(&t_phase, |a, b| a - b)?;
    let shift = raw.map(|d| wrap_phase(d) - d);
    let tp = g.constant(t_phase);
    let dphase = g.sub(p_phase, tp)?;
    let shift = g.constant(shift);
    let wrapped = g.add(dphase, shift)?;
    let aphase = g.abs(wrapped);
    let weights = g.constant(Tensor::from_vec(dims.clone(), weights)?);
    let weighted = g.mul(aphase, weights)?;
    let phase = g.sum_all(weighted);

    let bphase = g.scale(phase, w.beta);
    let frequency = g.add(magnitude, bphase)?;
    let afreq = g.scale(frequency, w.alpha);
    let total = g.add(spatial, afreq)?;

    let v = |g: &Graph, x: Var| g.value(x).data()[0];
    let breakdown = LossBreakdown {
        spatial: v(g, spatial),
        magnitude: v(g, magnitude),
        phase: v(g, phase),
        frequency: v(g, frequency),
        total: v(g, total),
    };
    Ok((total, breakdown))
}

/// Loss value without recording gradients for later use.
pub fn fsl_value(pred: &Tensor, truth: &Tensor, w: LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    Ok(fsl(&mut g, p, truth, w)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    /// Decibels.
    pub psnr: f64,
}

impl Metrics {
    /// Metrics of `pred` against `truth`; `peak` is the largest `|truth|`
    /// over the evaluation set.
    pub fn compute(pred: &[f64], truth: &[f64], peak: f64) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape("metrics", &[pred.len()], &[truth.len()]));
        }
        if truth.is_empty() {
            return Err(Error::arg("metrics of an empty set"));
        }
        let n = truth.len() as f64;
        let (mut se, mut ae, mut pe) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(truth) {
            let d = (p - t).abs();
            se += d * d;
            ae += d;
            pe += d / (t.abs() + 1e-8);
        }
        let rmse = (se / n).sqrt();
        Ok(Metrics {
            rmse,
            mae: ae / n,
            mape: 100.0 * pe / n,
            psnr: psnr(peak, rmse),
        })
    }
}

/// `20·log10(peak / rmse)`, capped at [`PSNR_CAP`].
pub fn psnr(peak: f64, rmse: f64) -> f64 {
    if rmse == 0.0 {
        return PSNR_CAP;
    }
    (20.0 * (peak / rmse).log10()).min(PSNR_CAP)
}

/// Per-layer central-difference temperature gradients, K per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    /// Along columns, `[L, R, C]`.
    pub gx: Tensor,
    /// Along rows, `[L, R, C]`.
    pub gy: Tensor,
}

/// Gradients of `t` (`[L, R, C]`): central differences inside, one-sided
/// differences on the borders.
pub fn gradient_field(t: &Tensor) -> Result<GradientField> {
    let d = t.dims();
    if d.len() != 3 || d[1] < 3 || d[2] < 3 {
        return Err(Error::arg(format!("gradient field needs [L, R≥3, C≥3], got {d:?}")));
    }
    let (l, r, c) = (d[0], d[1], d[2]);
    let x = t.data();
    let at = |k: usize, i: usize, j: usize| x[(k * r + i) * c + j];
    let deriv = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;
    let mut gx = Tensor::zeros(d);
    let mut gy = Tensor::zeros(d);
    for k in 0..l {
        for i in 0..r {
            for j in 0..c {
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(c - 1));
                let (i0, i1) = (i.saturating_sub(1), (i + 1).min(r - 1));
                gx.set(&[k, i, j], deriv(at(k, i, j0), at(k, i, j1), j1 - j0));
                gy.set(&[k, i, j], deriv(at(k, i0, j), at(k, i1, j), i1 - i0));
            }
        }
    }
    Ok(GradientField { gx, gy })
}

impl GradientField {
    pub fn magnitude(&self) -> Tensor {
        self.gx.zip_map(&self.gy, f64::hypot).unwrap()
    }

    /// Direction `atan2(gy, gx)` in radians.
    pub fn direction(&self) -> Tensor {
        self.gy.zip_map(&self.gx, f64::atan2).unwrap()
    }

    /// Copy with every layer scaled to unit maximum magnitude, for plots.
    pub fn normalized(&self) -> GradientField {
        let d = self.gx.dims();
        let plane = d[1] * d[2];
        let mag = self.magnitude();
        let mut gx = self.gx.clone();
        let mut gy = self.gy.clone();
        for (k, m) in mag.data().chunks(plane).enumerate() {
            let peak = m.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                let s = k * plane..(k + 1) * plane;
                gx.data_mut()[s.clone()].iter_mut().for_each(|v| *v /= peak);
                gy.data_mut()[s].iter_mut().for_each(|v| *v /= peak);
            }
        }
        GradientField { gx, gy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientScore {
    pub magnitude_rmse: f64,
    /// Mean angle between predicted and true gradients, radians. `None` when
    /// the true gradient vanishes everywhere.
    pub angular_error: Option<f64>,
}

/// Compares two gradient fields. Angles are averaged over cells whose true
/// magnitude exceeds the 10th percentile; a vanishing predicted gradient
/// counts as a right angle.
pub fn gradient_score(pred: &GradientField, truth: &GradientField) -> Result<GradientScore> {
    if pred.gx.dims() != truth.gx.dims() {
        return Err(Error::shape("gradient_score", pred.gx.dims(), truth.gx.dims()));
    }
    let pm = pred.magnitude();
    let tm = truth.magnitude();
    let n = tm.numel() as f64;
    let magnitude_rmse = (pm
        .data()
        .iter()
        .zip(tm.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let mut sorted = tm.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(sorted.len() - 1) / 10];
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..tm.numel() {
        let t = tm.data()[k];
        if t <= threshold || t == 0.0 {
            continue;
        }
        let p = pm.data()[k];
        let angle = if p == 0.0 {
            PI / 2.0
        } else {
            let dot = pred.gx.data()[k] * truth.gx.data()[k] + pred.gy.data()[k] * truth.gy.data()[k];
            (dot / (p * t)).clamp(-1.0, 1.0).acos()
        };
        total += angle;
        count += 1;
    }
    Ok(GradientScore {
        magnitude_rmse,
        angular_error: (count > 0).then(|| total / count as f64),
    })
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: u64,
    pub layer: usize,
    pub metrics: Metrics,
    pub gradient: GradientScore,
}

pub const METRIC_CSV_HEADER: &str =
    "sample_id,layer,rmse,mae,mape,psnr,grad_mag_rmse,grad_ang_err";

/// Per-layer rows for one predicted field `[L, R, C]`.
pub fn metric_rows(sample_id: u64, pred: &Tensor, truth: &Tensor, peak: f64) -> Result<Vec<MetricRow>> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("metric_rows", pred.dims(), truth.dims()));
    }
    let d = truth.dims();
    let plane = d[1] * d[2];
    let pg = gradient_field(pred)?;
    let tg = gradient_field(truth)?;
    let mut rows = Vec::with_capacity(d[0]);
    for l in 0..d[0] {
        let s = l * plane..(l + 1) * plane;
        let metrics = Metrics::compute(&pred.data()[s.clone()], &truth.data()[s.clone()], peak)?;
        let layer = |f: &GradientField| GradientField {
            gx: Tensor::from_vec(vec![1, d[1], d[2]], f.gx.data()[s.clone()].to_vec()).unwrap(),
            gy: Tensor::from_vec(vec![1, d[1], d[2]], f.gy.data()[s.clone()].to_vec()).unwrap(),
        };
        let gradient = gradient_score(&layer(&pg), &layer(&tg))?;
        rows.push(MetricRow { sample_id, layer: l, metrics, gradient });
    }
    Ok(rows)
}

pub fn write_metric_csv(out: &mut impl Write, rows: &[MetricRow]) -> Result<()> {
    writeln!(out, "{METRIC_CSV_HEADER}")?;
    for r in rows {
        let ang = r.gradient.angular_error.map_or(String::from("nan"), |a| a.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sample_id,
            r.layer,
            r.metrics.rmse,
            r.metrics.mae,
            r.metrics.mape,
            r.metrics.psnr,
            r.gradient.magnitude_rmse,
            ang
        )?;
    }
    Ok(())
}
