//! Procedural chiplet layouts, solved samples, and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and `samples.bin`. The binary
//! file is a sequence of records, one per sample, in manifest order:
//!
//! ```text
//! u64 seed
//! u64 n_in    then n_in  f64 values   (inputs, [4, R, C, 8] row-major)
//! u64 n_out   then n_out f64 values   (temperature rise, [4, R, C, 1])
//! ```
//!
//! All integers and floats are little-endian. Inputs are stored raw; the
//! manifest carries the per-channel statistics used to standardize them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::thermal::{
    assemble, energy_balance, solve, PowerMap, StackConfig, DEFAULT_TOLERANCE, HEATSINK,
    NUM_LAYERS, SOURCE,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const NUM_CHANNELS: usize = 8;
/// Geometry and heat-exchange channels come first; the last two carry power.
pub const GEOMETRY_CHANNELS: usize = 6;
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "thickness",
    "side",
    "heatsink_side",
    "conductivity",
    "htc",
    "footprint",
    "power",
    "layer_power",
];
/// Largest energy-balance residual accepted for a stored sample.
pub const MAX_ENERGY_RESIDUAL: f64 = 1e-8;

const MANIFEST_FILE: &str = "manifest.json";
const SAMPLES_FILE: &str = "samples.bin";
const WRITE_CHUNK: usize = 64;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn json_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutRanges {
    pub min_sources: usize,
    pub max_sources: usize,
    /// Gaussian power per source rectangle, watts.
    pub power_mean: f64,
    pub power_std: f64,
    /// Draws below this are rejected and redrawn.
    pub power_floor: f64,
    /// Largest rectangle side as a fraction of the die footprint side.
    pub max_extent: f64,
}

impl Default for LayoutRanges {
    fn default() -> Self {
        LayoutRanges {
            min_sources: 4,
            max_sources: 35,
            power_mean: 3.0,
            power_std: 1.4,
            power_floor: 0.1,
            max_extent: 0.25,
        }
    }
}

impl LayoutRanges {
    /// Ranges with a fixed source count.
    pub fn with_count(self, n: usize) -> Self {
        LayoutRanges {
            min_sources: n,
            max_sources: n,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_sources == 0 || self.min_sources > self.max_sources {
            return Err(Error::InvalidConfig(format!(
                "source count range [{}, {}] is empty or zero",
                self.min_sources, self.max_sources
            )));
        }
        if !(self.power_floor > 0.0) || !(self.power_std >= 0.0) || !self.power_mean.is_finite() {
            return Err(Error::InvalidConfig("power distribution must have positive floor and non-negative spread".into()));
        }
        if !(self.max_extent > 0.0 && self.max_extent <= 1.0) {
            return Err(Error::InvalidConfig("max_extent must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatSource {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    /// Total watts, spread evenly over the rectangle's cells.
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub sources: Vec<HeatSource>,
}

impl LayoutSpec {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    /// Source-layer power map; overlapping rectangles add.
    pub fn power_map(&self) -> PowerMap {
        let mut q = Tensor::zeros(&[NUM_LAYERS, self.rows, self.cols, 1]);
        for s in &self.sources {
            let per_cell = s.power / (s.height * s.width) as f64;
            for r in s.row..s.row + s.height {
                for c in s.col..s.col + s.width {
                    let v = q.at(&[SOURCE, r, c, 0]);
                    q.set(&[SOURCE, r, c, 0], v + per_cell);
                }
            }
        }
        PowerMap { q }
    }
}

/// Draws a layout inside the die footprint of `cfg`. Deterministic in `seed`.
pub fn generate_layout(seed: u64, cfg: &StackConfig, ranges: &LayoutRanges) -> Result<LayoutSpec> {
    ranges.validate()?;
    let (r0, r1, c0, c1) = cfg
        .footprint_bounds(SOURCE)
        .ok_or_else(|| Error::InvalidConfig("die footprint covers no cell".into()))?;
    let (fh, fw) = (r1 - r0, c1 - c0);
    if fh * fw < ranges.max_sources {
        return Err(Error::InvalidConfig(format!(
            "die footprint of {fh}x{fw} cells cannot host {} sources",
            ranges.max_sources
        )));
    }
    let max_h = ((fh as f64 * ranges.max_extent).round() as usize).clamp(1, fh);
    let max_w = ((fw as f64 * ranges.max_extent).round() as usize).clamp(1, fw);
    let power = Normal::new(ranges.power_mean, ranges.power_std)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(ranges.min_sources..=ranges.max_sources);
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        let height = rng.random_range(1..=max_h);
        let width = rng.random_range(1..=max_w);
        let row = rng.random_range(r0..=r1 - height);
        let col = rng.random_range(c0..=c1 - width);
        let mut p = power.sample(&mut rng);
        while p < ranges.power_floor {
            p = power.sample(&mut rng);
        }
        sources.push(HeatSource { row, col, height, width, power: p });
    }
    Ok(LayoutSpec {
        seed,
        rows: cfg.rows,
        cols: cfg.cols,
        sources,
    })
}

/// Per-layer conductivity perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    None,
    /// Independent multiplier `1 + u`, `u ~ U(−r, r)`, per layer.
    Uniform(f64),
    /// Every layer multiplied by exactly `1 + r`.
    Fixed(f64),
}

/// Everything that determines a sample apart from its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub stack: StackConfig,
    pub layout: LayoutRanges,
    pub k_jitter: Jitter,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            stack: StackConfig::default(),
            layout: LayoutRanges::default(),
            k_jitter: Jitter::Uniform(0.3),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        self.layout.validate()?;
        match self.k_jitter {
            Jitter::Uniform(r) if !(0.0..1.0).contains(&r) => {
                Err(Error::InvalidConfig(format!("uniform jitter {r} must lie in [0, 1)")))
            }
            Jitter::Fixed(r) if !(r > -1.0 && r.is_finite()) => {
                Err(Error::InvalidConfig(format!("fixed jitter {r} must exceed -1")))
            }
            _ => Ok(()),
        }
    }

    /// Stack with this sample's conductivity multipliers applied.
    pub fn sample_stack(&self, seed: u64) -> (StackConfig, [f64; NUM_LAYERS]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut mult = [1.0; NUM_LAYERS];
        for m in &mut mult {
            *m = match self.k_jitter {
                Jitter::None => 1.0,
                Jitter::Uniform(r) => 1.0 + rng.random_range(-r..=r),
                Jitter::Fixed(r) => 1.0 + r,
            };
        }
        let mut cfg = self.stack.clone();
        for (layer, m) in cfg.layers.iter_mut().zip(mult) {
            layer.conductivity *= m;
        }
        (cfg, mult)
    }
}

/// Raw input channels `[4, R, C, 8]` in [`CHANNEL_NAMES`] order.
pub fn encode_inputs(cfg: &StackConfig, layout: &LayoutSpec) -> Result<Tensor> {
    if layout.rows != cfg.rows || layout.cols != cfg.cols {
        return Err(Error::shape("encode_inputs", &[cfg.rows, cfg.cols], &[layout.rows, layout.cols]));
    }
    let power = layout.power_map();
    let totals = power.layer_totals();
    let s = cfg.heatsink_side();
    let mut x = Tensor::zeros(&[NUM_LAYERS, cfg.rows, cfg.cols, NUM_CHANNELS]);
    let data = x.data_mut();
    let mut i = 0;
    for (l, spec) in cfg.layers.iter().enumerate() {
        let h = if l == HEATSINK { cfg.htc } else { 0.0 };
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                let mask = if cfg.in_footprint(l, r, c) { 1.0 } else { 0.0 };
                let q = power.q.at(&[l, r, c, 0]);
                let cell = [spec.thickness, spec.side, s, spec.conductivity, h, mask, q, totals[l]];
                data[i..i + NUM_CHANNELS].copy_from_slice(&cell);
                i += NUM_CHANNELS;
            }
        }
    }
    Ok(x)
}

/// Per-channel mean and standard deviation over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
}

impl ChannelStats {
    /// Statistics over every cell of every input. Channels with zero spread
    /// keep `std = 0` and standardize to zero.
    pub fn compute<'a>(inputs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = [0.0; NUM_CHANNELS];
        let mut sq = [0.0; NUM_CHANNELS];
        let mut all: Vec<&Tensor> = Vec::new();
        for x in inputs {
            for cell in x.data().chunks(NUM_CHANNELS) {
                for ch in 0..NUM_CHANNELS {
                    sum[ch] += cell[ch];
                }
                count += 1;
            }
            all.push(x);
        }
        if count == 0 {
            return Err(Error::Dataset("cannot compute statistics of an empty set".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        // second pass for a stable variance
        for x in all {
            for cell in x.data().chunks(NUM_CHANNELS) {
                for ch in 0..NUM_CHANNELS {
                    sq[ch] += (cell[ch] - mean[ch]).powi(2);
                }
            }
        }
        let mut std = [0.0; NUM_CHANNELS];
        for ch in 0..NUM_CHANNELS {
            std[ch] = Self::spread_or_zero(mean[ch], (sq[ch] / count as f64).sqrt());
        }
        Ok(ChannelStats { mean, std })
    }

    /// Treats spreads at rounding level relative to the mean as constant channels.
fn spread_or_zero(mean: f64, std: f64) -> f64 {
    if std > 1e-9 * mean.abs() && std > 0.0 {
        std
    } else {
        0.0
    }
}

/// Z-scores `raw` channel by channel.
    pub fn standardize(&self, raw: &Tensor) -> Result<Tensor> {
        let d = raw.dims();
        if d.len() != 4 || d[3] != NUM_CHANNELS {
            return Err(Error::shape("standardize", d, &[NUM_LAYERS, 0, 0, NUM_CHANNELS]));
        }
        let mut out = raw.clone();
        for cell in out.data_mut().chunks_mut(NUM_CHANNELS) {
            for ch in 0..NUM_CHANNELS {
                cell[ch] = if self.std[ch] > 0.0 {
                    (cell[ch] - self.mean[ch]) / self.std[ch]
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

/// Standardized inputs; refuses to run without training statistics.
pub fn encode_standardized(
    cfg: &StackConfig,
    layout: &LayoutSpec,
    stats: Option<&ChannelStats>,
) -> Result<Tensor> {
    let stats = stats.ok_or_else(|| Error::Dataset("channel statistics are required to standardize inputs".into()))?;
    stats.standardize(&encode_inputs(cfg, layout)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub layout: LayoutSpec,
    pub config_digest: String,
    pub k_multipliers: [f64; NUM_LAYERS],
    pub energy_residual: f64,
    pub cg_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Raw channels `[4, R, C, 8]`.
    pub inputs: Tensor,
    /// Temperature rise `[4, R, C, 1]`, kelvin.
    pub target: Tensor,
    pub meta: SampleMeta,
}

/// Generates, solves and audits one sample.
pub fn make_sample(spec: &DatasetSpec, seed: u64) -> Result<Sample> {
    let wrap = |e: Error| Error::SampleFailed { seed, source: Box::new(e) };
    let (cfg, k_multipliers) = spec.sample_stack(seed);
    let layout = generate_layout(seed, &cfg, &spec.layout).map_err(wrap)?;
    let power = layout.power_map();
    let net = assemble(&cfg, &power).map_err(wrap)?;
    let (field, stats) = solve(&cfg, &net, DEFAULT_TOLERANCE).map_err(wrap)?;
    let energy_residual = energy_balance(&cfg, &power, &field);
    if !(energy_residual <= MAX_ENERGY_RESIDUAL) {
        return Err(wrap(Error::Dataset(format!("energy residual {energy_residual:e}"))));
    }
    let inputs = encode_inputs(&cfg, &layout).map_err(wrap)?;
    Ok(Sample {
        inputs,
        target: field.theta,
        meta: SampleMeta {
            seed,
            layout,
            config_digest: json_digest(&cfg),
            k_multipliers,
            energy_residual,
            cg_iterations: stats.iterations,
        },
    })
}

/// Seeds of a split: the first 8 bytes of `SHA-256(master ‖ split ‖ index)`.
/// Different split names give disjoint seed streams.
pub fn split_seeds(master: u64, split: &str, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(master.to_le_bytes());
            h.update(split.as_bytes());
            h.update([0]);
            h.update(i.to_le_bytes());
            u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub split: String,
    pub master_seed: u64,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: Vec<String>,
    pub spec: DatasetSpec,
    pub spec_digest: String,
    pub stats: ChannelStats,
    /// Largest temperature rise over the set, kelvin.
    pub theta_max: f64,
    /// SHA-256 of `samples.bin`.
    pub data_digest: String,
    pub samples: Vec<SampleMeta>,
}

/// Solves `n` samples of `spec` in parallel and writes them under `out`.
pub fn build_dataset(
    spec: &DatasetSpec,
    n: usize,
    master_seed: u64,
    split: &str,
    out: &Path,
    threads: usize,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::arg("dataset needs at least one sample"));
    }
    spec.validate()?;
    std::fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::arg(e.to_string()))?;
    let seeds = split_seeds(master_seed, split, n);
    let mut writer = BufWriter::new(File::create(out.join(SAMPLES_FILE))?);
    let mut hasher = Sha256::new();
    let mut metas = Vec::with_capacity(n);
    let mut stats_acc = StatsAccumulator::default();
    let mut theta_max = 0.0f64;
    for chunk in seeds.chunks(WRITE_CHUNK) {
        let samples: Vec<Sample> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&s| make_sample(spec, s))
                .collect::<Result<_>>()
        })?;
        for s in samples {
            let bytes = encode_record(&s);
            hasher.update(&bytes);
            writer.write_all(&bytes)?;
            stats_acc.add(&s.inputs);
            theta_max = s.target.data().iter().fold(theta_max, |m, &v| m.max(v));
            log::debug!("sample {} solved in {} iterations", s.meta.seed, s.meta.cg_iterations);
            metas.push(s.meta);
        }
    }
    writer.flush()?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        split: split.to_string(),
        master_seed,
        count: n,
        rows: spec.stack.rows,
        cols: spec.stack.cols,
        channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        spec: spec.clone(),
        spec_digest: json_digest(spec),
        stats: stats_acc.finish(),
        theta_max,
        data_digest: hex::encode(hasher.finalize()),
        samples: metas,
    };
    let mut f = BufWriter::new(File::create(out.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(manifest)
}

/// Streaming version of [`ChannelStats::compute`], accumulated in f64 sums
/// of shifted values so chunked generation needs no second pass.
#[derive(Default)]
struct StatsAccumulator {
    shift: Option<[f64; NUM_CHANNELS]>,
    count: usize,
    sum: [f64; NUM_CHANNELS],
    sq: [f64; NUM_CHANNELS],
}

impl StatsAccumulator {
    fn add(&mut self, x: &Tensor) {
        let shift = *self
            .shift
            .get_or_insert_with(|| x.data()[..NUM_CHANNELS].try_into().unwrap());
        for cell in x.data().chunks(NUM_CHANNELS) {
            for ch in 0..NUM_CHANNELS {
                let d = cell[ch] - shift[ch];
                self.sum[ch] += d;
                self.sq[ch] += d * d;
            }
            self.count += 1;
        }
    }

    fn finish(self) -> ChannelStats {
        let n = self.count as f64;
        let shift = self.shift.unwrap_or([0.0; NUM_CHANNELS]);
        let mut mean = [0.0; NUM_CHANNELS];
        let mut std = [0.0; NUM_CHANNELS];
        for ch in 0..NUM_CHANNELS {
            let m = self.sum[ch] / n;
            mean[ch] = shift[ch] + m;
            let var = (self.sq[ch] / n - m * m).max(0.0);
            std[ch] = ChannelStats::spread_or_zero(mean[ch], var.sqrt());
        }
        ChannelStats { mean, std }
    }
}

fn encode_record(s: &Sample) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * (s.inputs.numel() + s.target.numel()));
    out.extend_from_slice(&s.meta.seed.to_le_bytes());
    for t in [&s.inputs, &s.target] {
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_block(r: &mut impl Read, dims: &[usize]) -> Result<Tensor> {
    let n = read_u64(r)? as usize;
    let expected: usize = dims.iter().product();
    if n != expected {
        return Err(Error::Dataset(format!("record holds {n} values, expected {expected}")));
    }
    let mut bytes = vec![0u8; 8 * n];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(dims.to_vec(), data)
}

/// A dataset loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let f = File::open(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_reader(BufReader::new(f))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Loads every record and checks the payload digest.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let bytes = std::fs::read(dir.join(SAMPLES_FILE))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != manifest.data_digest {
            return Err(Error::Dataset(format!("{} digest mismatch", SAMPLES_FILE)));
        }
        let (rows, cols) = (manifest.rows, manifest.cols);
        let mut r = bytes.as_slice();
        let mut samples = Vec::with_capacity(manifest.count);
        for meta in &manifest.samples {
            let seed = read_u64(&mut r)?;
            if seed != meta.seed {
                return Err(Error::Dataset(format!("record seed {seed} does not match manifest seed {}", meta.seed)));
            }
            let inputs = read_block(&mut r, &[NUM_LAYERS, rows, cols, NUM_CHANNELS])?;
            let target = read_block(&mut r, &[NUM_LAYERS, rows, cols, 1])?;
            samples.push(Sample { inputs, target, meta: meta.clone() });
        }
        if !r.is_empty() {
            return Err(Error::Dataset(format!("{} trailing bytes after last record", r.len())));
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            stack: StackConfig::default().with_grid(16, 16),
            ..Default::default()
        }
    }

    #[test]
    fn layout_is_deterministic_and_inside_die() {
        let cfg = StackConfig::default().with_grid(32, 32);
        let ranges = LayoutRanges::default();
        let a = generate_layout(7, &cfg, &ranges).unwrap();
        assert_eq!(a, generate_layout(7, &cfg, &ranges).unwrap());
        assert_ne!(a, generate_layout(8, &cfg, &ranges).unwrap());
        let (r0, r1, c0, c1) = cfg.footprint_bounds(SOURCE).unwrap();
        for s in &a.sources {
            assert!(s.row >= r0 && s.row + s.height <= r1);
            assert!(s.col >= c0 && s.col + s.width <= c1);
        }
    }

    #[test]
    fn tiny_footprint_rejected() {
        let cfg = StackConfig::default().with_grid(4, 4);
        let ranges = LayoutRanges::default().with_count(30);
        assert!(generate_layout(1, &cfg, &ranges).is_err());
    }

    #[test]
    fn power_map_conserves_source_power() {
        let cfg = StackConfig::default().with_grid(24, 24);
        let layout = generate_layout(3, &cfg, &LayoutRanges::default()).unwrap();
        let total: f64 = layout.sources.iter().map(|s| s.power).sum();
        let p = layout.power_map();
        assert!((p.total() - total).abs() <= 1e-12 * total);
        assert_eq!(p.layer_totals()[1..], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn fixed_jitter_is_exact() {
        let spec = DatasetSpec {
            k_jitter: Jitter::Fixed(-0.5),
            ..small_spec()
        };
        let (cfg, mult) = spec.sample_stack(9);
        assert_eq!(mult, [0.5; 4]);
        for (a, b) in cfg.layers.iter().zip(&spec.stack.layers) {
            assert_eq!(a.conductivity, 0.5 * b.conductivity);
        }
    }

    #[test]
    fn streaming_stats_match_two_pass() {
        let spec = small_spec();
        let xs: Vec<Tensor> = (0..3).map(|s| make_sample(&spec, s).unwrap().inputs).collect();
        let direct = ChannelStats::compute(&xs).unwrap();
        let mut acc = StatsAccumulator::default();
        xs.iter().for_each(|x| acc.add(x));
        let streamed = acc.finish();
        for ch in 0..NUM_CHANNELS {
            let scale = direct.mean[ch].abs().max(direct.std[ch]).max(1e-300);
            assert!((direct.mean[ch] - streamed.mean[ch]).abs() <= 1e-9 * scale);
            assert!((direct.std[ch] - streamed.std[ch]).abs() <= 1e-6 * scale, "channel {ch}");
        }
    }

    #[test]
    fn missing_stats_rejected() {
        let cfg = StackConfig::default().with_grid(16, 16);
        let layout = generate_layout(1, &cfg, &LayoutRanges::default()).unwrap();
        assert!(encode_standardized(&cfg, &layout, None).is_err());
    }
}
