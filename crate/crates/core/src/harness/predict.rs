use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{encode_inputs, json_digest, make_sample, DatasetSpec, LayoutSpec};
use crate::error::{Error, Result};
use crate::loss::{gradient_field, metric_rows, GradientField, MetricRow};
use crate::net::NetConfig;
use crate::tensor::Tensor;
use crate::thermal::{assemble, energy_balance, solve, StackConfig, DEFAULT_TOLERANCE, NUM_LAYERS};

/// What to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictInput {
    /// The sample a dataset would generate for this seed.
    Seed(u64),
    /// An explicit layout on the nominal stack.
    Layout(LayoutSpec),
}

/// Columns of `temperature.csv`, kelvin above ambient.
pub const TEMPERATURE_CSV_HEADER: &str = "layer,row,col,pred,oracle,abs_error";
/// Columns of `gradient.csv`, kelvin per cell; directions in radians.
pub const GRADIENT_CSV_HEADER: &str =
    "layer,row,col,pred_gx,pred_gy,pred_mag,pred_dir,oracle_gx,oracle_gy,oracle_mag,oracle_dir,mag_error";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub input: PredictInput,
    pub rows: usize,
    pub cols: usize,
    pub n_sources: usize,
    pub total_power: f64,
    pub config_digest: String,
    /// Encoding, forward pass and gradient extraction.
    pub predict_seconds: f64,
    pub oracle_seconds: f64,
    pub max_abs_error: f64,
    /// Per layer, in kelvin.
    pub layers: Vec<MetricRow>,
    pub files: Vec<PathBuf>,
}

/// Prediction and oracle fields of one sample, `[4, R, C]` kelvin.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub pred: Tensor,
    pub oracle: Tensor,
    pub pred_gradient: GradientField,
    pub oracle_gradient: GradientField,
    pub summary: PredictionSummary,
}

fn solve_layout(stack: &StackConfig, layout: &LayoutSpec) -> Result<(StackConfig, Tensor)> {
    let power = layout.power_map();
    let net = assemble(stack, &power)?;
    let (field, _) = solve(stack, &net, DEFAULT_TOLERANCE)?;
    let residual = energy_balance(stack, &power, &field);
    if !(residual <= crate::dataset::MAX_ENERGY_RESIDUAL) {
        return Err(Error::Dataset(format!("energy residual {residual:e}")));
    }
    Ok((stack.clone(), field.theta))
}

/// Predicts one sample with a loaded checkpoint and compares it with the
/// thermal solver.
pub fn predict_sample(ckpt: &Checkpoint, spec: &DatasetSpec, input: &PredictInput) -> Result<Prediction> {
    let norm = &ckpt.manifest.normalization;
    let (rows, cols) = (spec.stack.rows, spec.stack.cols);
    let layout_grid = match input {
        PredictInput::Layout(l) => (l.rows, l.cols),
        PredictInput::Seed(_) => (rows, cols),
    };
    for (r, c) in [(rows, cols), layout_grid] {
        if (r, c) != (norm.rows, norm.cols) {
            return Err(Error::InvalidArgument(format!(
                "input grid {r}x{c} does not match the checkpoint grid {}x{}",
                norm.rows, norm.cols
            )));
        }
    }
    let net = ckpt.network()?;

    let started = Instant::now();
    let (stack, layout, oracle) = match input {
        PredictInput::Seed(seed) => {
            let s = make_sample(spec, *seed)?;
            (spec.sample_stack(*seed).0, s.meta.layout, s.target)
        }
        PredictInput::Layout(l) => {
            let (stack, theta) = solve_layout(&spec.stack, l)?;
            (stack, l.clone(), theta)
        }
    };
    let oracle_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let raw = encode_inputs(&stack, &layout)?;
    let x = norm.stats.standardize(&raw)?;
    let pred = net.predict(&ckpt.params, &x)?.scale(norm.theta_max);
    let pred_gradient = gradient_field(&pred)?;
    let predict_seconds = started.elapsed().as_secs_f64();

    let oracle = oracle.reshape(&[NUM_LAYERS, rows, cols])?;
    let oracle_gradient = gradient_field(&oracle)?;
    let peak = oracle.max_abs();
    let layers = metric_rows(layout.seed, &pred, &oracle, peak)?;
    let summary = PredictionSummary {
        input: input.clone(),
        rows,
        cols,
        n_sources: layout.n_sources(),
        total_power: layout.sources.iter().map(|s| s.power).sum(),
        config_digest: json_digest(&ckpt.manifest.net),
        predict_seconds,
        oracle_seconds,
        max_abs_error: pred.max_abs_diff(&oracle),
        layers,
        files: Vec::new(),
    };
    Ok(Prediction { pred, oracle, pred_gradient, oracle_gradient, summary })
}

/// Loads the checkpoint, predicts, and writes `temperature.csv`,
/// `gradient.csv` and `prediction.json` into `out`.
pub fn predict(
    checkpoint: &Path,
    expected: Option<&NetConfig>,
    spec: &DatasetSpec,
    input: &PredictInput,
    out: &Path,
) -> Result<Prediction> {
    let ckpt = Checkpoint::load(checkpoint, expected)?;
    let mut p = predict_sample(&ckpt, spec, input)?;
    fs::create_dir_all(out)?;
    let (r, c) = (p.summary.rows, p.summary.cols);

    let temperature = out.join("temperature.csv");
    let mut f = BufWriter::new(File::create(&temperature)?);
    writeln!(f, "{TEMPERATURE_CSV_HEADER}")?;
    for l in 0..NUM_LAYERS {
        for i in 0..r {
            for j in 0..c {
                let (a, b) = (p.pred.at(&[l, i, j]), p.oracle.at(&[l, i, j]));
                writeln!(f, "{l},{i},{j},{a},{b},{}", (a - b).abs())?;
            }
        }
    }
    f.flush()?;

    let gradient = out.join("gradient.csv");
    let mut f = BufWriter::new(File::create(&gradient)?);
    writeln!(f, "{GRADIENT_CSV_HEADER}")?;
    let (pm, pd) = (p.pred_gradient.magnitude(), p.pred_gradient.direction());
    let (om, od) = (p.oracle_gradient.magnitude(), p.oracle_gradient.direction());
    for l in 0..NUM_LAYERS {
        for i in 0..r {
            for j in 0..c {
                let k = [l, i, j];
                writeln!(
                    f,
                    "{l},{i},{j},{},{},{},{},{},{},{},{},{}",
                    p.pred_gradient.gx.at(&k),
                    p.pred_gradient.gy.at(&k),
                    pm.at(&k),
                    pd.at(&k),
                    p.oracle_gradient.gx.at(&k),
                    p.oracle_gradient.gy.at(&k),
                    om.at(&k),
                    od.at(&k),
                    (pm.at(&k) - om.at(&k)).abs()
                )?;
            }
        }
    }
    f.flush()?;

    let summary_path = out.join("prediction.json");
    p.summary.files = vec![temperature, gradient, summary_path.clone()];
    fs::write(&summary_path, serde_json::to_string_pretty(&p.summary)? + "\n")?;
    Ok(p)
}
