use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{ensure_dataset, evaluate_dataset, protocol_data_dir, write_report, GradientSummary, Protocol, TEST_SPLIT};
use super::train::{train, BEST_CHECKPOINT};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::loss::Metrics;
use crate::net::{FsaHeatNet, NetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Full network trained on the spatial loss alone.
    SpatialLoss,
    NoFci,
    NoFreq,
    NoSpatial,
    /// Spatial branch only, plain skips, spatial loss.
    PlainCnn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::SpatialLoss,
        Variant::NoFci,
        Variant::NoFreq,
        Variant::NoSpatial,
        Variant::PlainCnn,
    ];

    /// `base` with every module enabled, then this variant's switches.
    pub fn apply(self, base: &NetConfig) -> NetConfig {
        let mut c = NetConfig {
            freq_branch: true,
            spatial_branch: true,
            fciformer: true,
            freq_loss: true,
            ..base.clone()
        };
        match self {
            Variant::Full => {}
            Variant::SpatialLoss => c.freq_loss = false,
            Variant::NoFci => c.fciformer = false,
            Variant::NoFreq => c.freq_branch = false,
            Variant::NoSpatial => c.spatial_branch = false,
            Variant::PlainCnn => {
                c.freq_branch = false;
                c.fciformer = false;
                c.freq_loss = false;
            }
        }
        c
    }

    /// Whether the full network's parameter `name` must be absent here.
    pub fn removes(self, name: &str) -> bool {
        let fci = name.starts_with("fci.");
        let freq = name.contains(".freq.");
        match self {
            Variant::Full | Variant::SpatialLoss => false,
            Variant::NoFci => fci,
            Variant::NoFreq => freq,
            Variant::NoSpatial => name.contains(".spatial."),
            Variant::PlainCnn => fci || freq,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::SpatialLoss => "spatial-loss",
            Variant::NoFci => "no-fci",
            Variant::NoFreq => "no-freq",
            Variant::NoSpatial => "no-spatial",
            Variant::PlainCnn => "plain-cnn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown ablation variant `{s}`")))
    }
}

/// Parameter-name comparison of a variant against the full network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub variant: Variant,
    pub full_tensors: usize,
    pub variant_tensors: usize,
    pub param_count: usize,
    /// Names of the full network missing from the variant.
    pub removed: Vec<String>,
    /// Names the variant should have dropped but kept.
    pub kept_unexpectedly: Vec<String>,
    /// Names the variant dropped although it should not have.
    pub removed_unexpectedly: Vec<String>,
    /// Names the full network does not have.
    pub added: Vec<String>,
    /// Frequency-loss weight the variant trains with.
    pub loss_alpha: f64,
    pub passed: bool,
}

pub fn audit(base: &TrainConfig, variant: Variant) -> Result<Audit> {
    let full = FsaHeatNet::new(Variant::Full.apply(&base.net))?;
    let cfg = TrainConfig { net: variant.apply(&base.net), ..base.clone() };
    let net = FsaHeatNet::new(cfg.net.clone())?;
    let names = |n: &FsaHeatNet| n.param_specs().into_iter().map(|s| s.name).collect::<BTreeSet<_>>();
    let (full_names, names) = (names(&full), names(&net));
    let removed: Vec<String> = full_names.difference(&names).cloned().collect();
    let kept_unexpectedly: Vec<String> = names.iter().filter(|n| variant.removes(n)).cloned().collect();
    let removed_unexpectedly: Vec<String> = removed.iter().filter(|n| !variant.removes(n)).cloned().collect();
    let added: Vec<String> = names.difference(&full_names).cloned().collect();
    let loss_alpha = cfg.loss_weights().alpha;
    let alpha_ok = (loss_alpha == 0.0) == matches!(variant, Variant::SpatialLoss | Variant::PlainCnn);
    let removes_any = full_names.iter().any(|n| variant.removes(n));
    let passed = kept_unexpectedly.is_empty()
        && removed_unexpectedly.is_empty()
        && added.is_empty()
        && alpha_ok
        && removes_any == !removed.is_empty();
    Ok(Audit {
        variant,
        full_tensors: full_names.len(),
        variant_tensors: names.len(),
        param_count: net.param_count(),
        removed,
        kept_unexpectedly,
        removed_unexpectedly,
        added,
        loss_alpha,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub run_dir: PathBuf,
    pub audit: Audit,
    pub best_epoch: usize,
    pub val_rmse: Option<f64>,
    pub test: Metrics,
    pub gradient: GradientSummary,
    pub baseline_rmse: f64,
}

/// A comparison the ablation is expected to show, checked but not
/// enforced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub claim: String,
    pub full_rmse: f64,
    pub other_rmse: f64,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_dataset_digest: String,
    pub test_dataset_digest: String,
    pub test_samples: usize,
    pub rows: Vec<AblationRow>,
    pub trends: Vec<Trend>,
    pub audits_passed: bool,
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,params,best_epoch,val_rmse,test_rmse,test_mae,test_mape,test_psnr,grad_mag_rmse,grad_ang_err,audit_passed";

/// Trains every variant on one shared training set and scores it on one
/// shared in-distribution test set. Each variant runs in `<out>/<variant>`.
pub fn ablate(cfg: &TrainConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let threads = cfg.data.thread_count();
    let train_dir = match &cfg.data.train_dir {
        Some(d) => d.clone(),
        None => {
            let d = out.join("data").join("train");
            ensure_dataset(&cfg.dataset, cfg.data.n_train, cfg.seed, "train", &d, threads)?;
            d
        }
    };
    let test = ensure_dataset(
        &cfg.dataset,
        cfg.data.n_test,
        cfg.seed,
        TEST_SPLIT,
        &protocol_data_dir(out, Protocol::InDist),
        threads,
    )?;

    let mut rows = Vec::with_capacity(Variant::ALL.len());
    let mut train_digest = String::new();
    for variant in Variant::ALL {
        let audit = audit(cfg, variant)?;
        let mut vcfg = TrainConfig { net: variant.apply(&cfg.net), ..cfg.clone() };
        vcfg.data.train_dir = Some(train_dir.clone());
        let run_dir = out.join(variant.to_string());
        log::info!("ablation variant {variant}: {} parameters", audit.param_count);
        let summary = train(&vcfg, &run_dir)?;
        train_digest = summary.dataset_digest.clone();
        let ckpt = Checkpoint::load(&run_dir.join(BEST_CHECKPOINT), Some(&vcfg.net))?;
        let (report, metric_rows) = evaluate_dataset(&ckpt, &test, &format!("ablation-{variant}"))?;
        write_report(&report, &metric_rows, &run_dir)?;
        rows.push(AblationRow {
            variant,
            run_dir,
            audit,
            best_epoch: summary.best_epoch,
            val_rmse: summary.best_val_rmse,
            test: report.aggregate,
            gradient: report.gradient,
            baseline_rmse: report.baseline_rmse,
        });
    }

    let full_rmse = rows[0].test.rmse;
    let trends = rows[1..]
        .iter()
        .map(|r| Trend {
            claim: format!("full beats {}", r.variant),
            full_rmse,
            other_rmse: r.test.rmse,
            observed: full_rmse < r.test.rmse,
        })
        .collect();
    let report = AblationReport {
        train_dataset_digest: train_digest,
        test_dataset_digest: test.manifest.data_digest.clone(),
        test_samples: test.len(),
        audits_passed: rows.iter().all(|r| r.audit.passed),
        rows,
        trends,
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join("ablation.json"), json + "\n")?;
    let mut csv = BufWriter::new(File::create(out.join("ablation.csv"))?);
    writeln!(csv, "{ABLATION_CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    for r in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.audit.param_count,
            r.best_epoch,
            opt(r.val_rmse),
            r.test.rmse,
            r.test.mae,
            r.test.mape,
            r.test.psnr,
            r.gradient.magnitude_rmse,
            opt(r.gradient.angular_error),
            r.audit.passed
        )?;
    }
    csv.flush()?;
    Ok(report)
}
