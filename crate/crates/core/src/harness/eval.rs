use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{forward_value, Prepared};
use crate::checkpoint::Checkpoint;
use crate::dataset::{build_dataset, Dataset, DatasetSpec, Jitter};
use crate::error::{Error, Result};
use crate::loss::{metric_rows, write_metric_csv, GradientScore, MetricRow, Metrics};
use crate::tensor::Tensor;
use crate::thermal::{LAYER_NAMES, NUM_LAYERS};

/// Split name shared by every evaluation set. Protocols differ in their
/// dataset spec, so their samples still differ.
pub const TEST_SPLIT: &str = "test";

/// Source counts of the generalization protocol.
pub const SOURCE_COUNTS: [usize; 3] = [10, 60, 80];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Test samples drawn like the training set.
    InDist,
    /// Every layer's conductivity scaled by 1.5.
    KPlus50,
    /// Every layer's conductivity scaled by 0.5.
    KMinus50,
    /// Exactly this many heat sources per layout.
    Sources(usize),
    /// Retrain and score every ablation variant.
    AblationGrid,
}

impl Protocol {
    /// The generalization protocols in report order.
    pub fn generalization() -> Vec<Protocol> {
        let mut out = vec![Protocol::InDist, Protocol::KPlus50, Protocol::KMinus50];
        out.extend(SOURCE_COUNTS.map(Protocol::Sources));
        out
    }

    /// Dataset spec of this protocol, derived from the training spec.
    pub fn dataset_spec(self, base: &DatasetSpec) -> Result<DatasetSpec> {
        let mut spec = base.clone();
        match self {
            Protocol::InDist => {}
            Protocol::KPlus50 => spec.k_jitter = Jitter::Fixed(0.5),
            Protocol::KMinus50 => spec.k_jitter = Jitter::Fixed(-0.5),
            Protocol::Sources(n) => spec.layout = spec.layout.with_count(n),
            Protocol::AblationGrid => {
                return Err(Error::arg("the ablation grid trains its own variants and has no single dataset"))
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::InDist => f.write_str("in-dist"),
            Protocol::KPlus50 => f.write_str("k+50"),
            Protocol::KMinus50 => f.write_str("k-50"),
            Protocol::Sources(n) => write!(f, "sources-{n}"),
            Protocol::AblationGrid => f.write_str("ablation-grid"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-dist" => Ok(Protocol::InDist),
            "k+50" => Ok(Protocol::KPlus50),
            "k-50" => Ok(Protocol::KMinus50),
            "ablation-grid" => Ok(Protocol::AblationGrid),
            _ => s
                .strip_prefix("sources-")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n > 0)
                .map(Protocol::Sources)
                .ok_or_else(|| {
                    Error::arg(format!(
                        "unknown protocol `{s}` (expected in-dist, k+50, k-50, sources-N or ablation-grid)"
                    ))
                }),
        }
    }
}

/// Gradient agreement pooled over samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    /// Root of the mean squared magnitude error over every cell.
    pub magnitude_rmse: f64,
    /// Mean of the per-field angular errors, radians.
    pub angular_error: Option<f64>,
}

impl GradientSummary {
    fn pool<'a>(scores: impl IntoIterator<Item = &'a GradientScore>) -> Self {
        let (mut sq, mut n, mut ang, mut m) = (0.0, 0usize, 0.0, 0usize);
        for s in scores {
            sq += s.magnitude_rmse * s.magnitude_rmse;
            n += 1;
            if let Some(a) = s.angular_error {
                ang += a;
                m += 1;
            }
        }
        GradientSummary {
            magnitude_rmse: (sq / n.max(1) as f64).sqrt(),
            angular_error: (m > 0).then(|| ang / m as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub name: String,
    pub metrics: Metrics,
    pub gradient: GradientSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub mean_sample_seconds: f64,
    pub max_sample_seconds: f64,
}

/// Scores of one checkpoint on one dataset. Fields are in normalized
/// units (`θ / theta_max` of the training set); gradients are per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub sample_count: usize,
    pub dataset_digest: String,
    pub spec_digest: String,
    pub split: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub archive_digest: String,
    pub theta_max: f64,
    /// Largest `|θ|` of the set, the PSNR peak.
    pub peak: f64,
    pub aggregate: Metrics,
    pub gradient: GradientSummary,
    pub per_layer: Vec<LayerReport>,
    /// RMSE of predicting the set's mean everywhere.
    pub baseline_rmse: f64,
    pub runtime: RuntimeStats,
}

/// Scores `ckpt` on every sample of `ds`. Returns the report and one
/// metric row per sample and layer.
pub fn evaluate_dataset(ckpt: &Checkpoint, ds: &Dataset, protocol: &str) -> Result<(EvalReport, Vec<MetricRow>)> {
    let norm = &ckpt.manifest.normalization;
    let net = ckpt.network()?;
    let set = Prepared::new(&ds.samples, norm)?;
    if set.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let started = Instant::now();
    let preds: Vec<(Tensor, f64)> = set
        .inputs
        .par_iter()
        .map(|x| {
            let t = Instant::now();
            Ok((forward_value(&net, &ckpt.params, x)?, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let total_seconds = started.elapsed().as_secs_f64();

    let peak = set.targets.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let mut rows = Vec::with_capacity(set.len() * NUM_LAYERS);
    for ((p, _), (t, &seed)) in preds.iter().zip(set.targets.iter().zip(&set.seeds)) {
        rows.extend(metric_rows(seed, p, t, peak)?);
    }

    let plane = norm.rows * norm.cols;
    let mut per_layer = Vec::with_capacity(NUM_LAYERS);
    for l in 0..NUM_LAYERS {
        let s = l * plane..(l + 1) * plane;
        let pv: Vec<f64> = preds.iter().flat_map(|(p, _)| p.data()[s.clone()].to_vec()).collect();
        let tv: Vec<f64> = set.targets.iter().flat_map(|t| t.data()[s.clone()].to_vec()).collect();
        per_layer.push(LayerReport {
            layer: l,
            name: LAYER_NAMES[l].to_string(),
            metrics: Metrics::compute(&pv, &tv, peak)?,
            gradient: GradientSummary::pool(rows.iter().filter(|r| r.layer == l).map(|r| &r.gradient)),
        });
    }
    let all_p: Vec<f64> = preds.iter().flat_map(|(p, _)| p.data().to_vec()).collect();
    let all_t: Vec<f64> = set.targets.iter().flat_map(|t| t.data().to_vec()).collect();
    let mean = all_t.iter().sum::<f64>() / all_t.len() as f64;
    let baseline = Metrics::compute(&vec![mean; all_t.len()], &all_t, peak)?;

    let times: Vec<f64> = preds.iter().map(|(_, s)| *s).collect();
    let m = &ds.manifest;
    let report = EvalReport {
        protocol: protocol.to_string(),
        sample_count: set.len(),
        dataset_digest: m.data_digest.clone(),
        spec_digest: m.spec_digest.clone(),
        split: m.split.clone(),
        master_seed: m.master_seed,
        seeds: set.seeds.clone(),
        config_digest: ckpt.manifest.config_digest.clone(),
        archive_digest: ckpt.manifest.archive_digest.clone(),
        theta_max: norm.theta_max,
        peak,
        aggregate: Metrics::compute(&all_p, &all_t, peak)?,
        gradient: GradientSummary::pool(rows.iter().map(|r| &r.gradient)),
        per_layer,
        baseline_rmse: baseline.rmse,
        runtime: RuntimeStats {
            total_seconds,
            mean_sample_seconds: times.iter().sum::<f64>() / times.len() as f64,
            max_sample_seconds: times.iter().cloned().fold(0.0, f64::max),
        },
    };
    Ok((report, rows))
}

/// Opens the dataset at `dir` when it was built from exactly these inputs,
/// otherwise (re)generates it.
pub fn ensure_dataset(
    spec: &DatasetSpec,
    n: usize,
    master_seed: u64,
    split: &str,
    dir: &Path,
    threads: usize,
) -> Result<Dataset> {
    if let Ok(m) = Dataset::read_manifest(dir) {
        if m.spec == *spec && m.count == n && m.master_seed == master_seed && m.split == split {
            if let Ok(ds) = Dataset::open(dir) {
                return Ok(ds);
            }
        }
    }
    build_dataset(spec, n, master_seed, split, dir, threads)?;
    Dataset::open(dir)
}

/// Directory of a protocol's evaluation set under a run directory.
pub fn protocol_data_dir(out: &Path, protocol: Protocol) -> PathBuf {
    out.join("data").join(protocol.to_string())
}

/// Evaluates the checkpoint at `checkpoint` under `protocol`, generating
/// the protocol's test set under `<out>/data` when needed. Writes
/// `report_<protocol>.json` and `metrics_<protocol>.csv` into `out`.
pub fn evaluate(checkpoint: &Path, protocol: Protocol, cfg: &TrainConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint, Some(&cfg.net))?;
    let spec = protocol.dataset_spec(&cfg.dataset)?;
    let norm = &ckpt.manifest.normalization;
    if (spec.stack.rows, spec.stack.cols) != (norm.rows, norm.cols) {
        return Err(Error::InvalidConfig(format!(
            "evaluation grid {}x{} does not match the checkpoint grid {}x{}",
            spec.stack.rows, spec.stack.cols, norm.rows, norm.cols
        )));
    }
    fs::create_dir_all(out)?;
    let ds = ensure_dataset(
        &spec,
        cfg.data.n_test,
        cfg.seed,
        TEST_SPLIT,
        &protocol_data_dir(out, protocol),
        cfg.data.thread_count(),
    )?;
    let (report, rows) = evaluate_dataset(&ckpt, &ds, &protocol.to_string())?;
    log::info!(
        "{protocol}: rmse {:.4e} (baseline {:.4e}) over {} samples",
        report.aggregate.rmse,
        report.baseline_rmse,
        report.sample_count
    );
    write_report(&report, &rows, out)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, rows: &[MetricRow], out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(out.join(format!("report_{}.json", report.protocol)), json + "\n")?;
    let mut csv = BufWriter::new(File::create(out.join(format!("metrics_{}.csv", report.protocol)))?);
    write_metric_csv(&mut csv, rows)?;
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_round_trip() {
        let mut all = Protocol::generalization();
        all.push(Protocol::AblationGrid);
        for p in all {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("sources-0".parse::<Protocol>().is_err());
        assert!("sources-x".parse::<Protocol>().is_err());
        assert!("k+49".parse::<Protocol>().is_err());
    }

    #[test]
    fn protocol_specs_change_only_their_knob() {
        let base = DatasetSpec::default();
        assert_eq!(Protocol::InDist.dataset_spec(&base).unwrap(), base);
        let k = Protocol::KMinus50.dataset_spec(&base).unwrap();
        assert_eq!(k.k_jitter, Jitter::Fixed(-0.5));
        assert_eq!((k.stack, k.layout), (base.stack.clone(), base.layout.clone()));
        let s = Protocol::Sources(60).dataset_spec(&base).unwrap();
        assert_eq!((s.layout.min_sources, s.layout.max_sources), (60, 60));
        assert_eq!(s.k_jitter, base.k_jitter);
        assert!(Protocol::AblationGrid.dataset_spec(&base).is_err());
    }
}
