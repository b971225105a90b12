//! End-to-end acceptance checks. Each test prints one `PASS` or `FAIL` line
//! (written past the test harness's output capture) and then asserts it.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use fsaheat::autodiff::{check_directional, check_gradients, check_sampled, Graph, ParamMap, Var};
use fsaheat::checkpoint::Checkpoint;
use fsaheat::dataset::{build_dataset, Dataset, DatasetSpec};
use fsaheat::harness::train::normalization_of;
use fsaheat::harness::{ablate, evaluate, evaluate_dataset, fit, train, EvalReport, Prepared, Protocol, TrainConfig, TrainSummary};
use fsaheat::loss::{fsl, fsl_value, LossWeights};
use fsaheat::net::{init_params, DecoderLevel, EncoderBlock, FciFormer, FsaHeatNet, NetConfig, ParamSpec, PpNet};
use fsaheat::spectral::{dct3, idct3};
use fsaheat::thermal::{
    assemble, energy_balance, solve, PowerMap, StackConfig, TemperatureField, DEFAULT_TOLERANCE, HEATSINK, SOURCE,
};
use fsaheat::{Result, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Timing budgets assume the machine is not shared with other heavy tests.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn note(line: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "[acceptance] {line}").unwrap();
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    note(&format!("{} {criterion}: {detail}", if pass { "PASS" } else { "FAIL" }));
    assert!(pass, "{criterion}: {detail}");
}

fn random(dims: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(dims, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn desk_config() -> TrainConfig {
    TrainConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap()
}

// ---------------------------------------------------------------------------
// thermal oracle

fn full_footprint(rows: usize, cols: usize) -> StackConfig {
    let mut cfg = StackConfig::default().with_grid(rows, cols);
    let s = cfg.heatsink_side();
    for l in &mut cfg.layers {
        l.side = s;
    }
    cfg
}

#[test]
fn thermal_chain_oracle() {
    let _g = serial();
    let cfg = full_footprint(16, 16);
    let q_cell = 0.03;
    let mut q = Tensor::zeros(&[4, 16, 16, 1]);
    for r in 0..16 {
        for c in 0..16 {
            q.set(&[SOURCE, r, c, 0], q_cell);
        }
    }
    let power = PowerMap::new(q).unwrap();
    let started = Instant::now();
    let net = assemble(&cfg, &power).unwrap();
    let (field, _) = solve(&cfg, &net, DEFAULT_TOLERANCE).unwrap();
    let elapsed = started.elapsed();

    // series resistances of one column: half cells on each side of every
    // interface, then the convective film
    let (dx, dy) = cfg.cell_size();
    let area = dx * dy;
    let half = |l: usize| cfg.layers[l].thickness / (2.0 * cfg.layers[l].conductivity * area);
    let mut chain = [0.0; 4];
    chain[3] = q_cell * (half(3) + 1.0 / (cfg.htc * area));
    for l in (0..3).rev() {
        chain[l] = chain[l + 1] + q_cell * (half(l) + half(l + 1));
    }
    let mut worst = 0.0f64;
    for l in 0..4 {
        for r in 0..16 {
            for c in 0..16 {
                worst = worst.max((field.at(l, r, c) - chain[l]).abs());
            }
        }
    }
    let pass = worst <= 1e-8 && elapsed < Duration::from_secs(1);
    verdict(
        "thermal oracle vs series chain",
        pass,
        &format!("max |dtheta| {worst:.3e} K (tol 1e-8), solve {:.1} ms (limit 1 s)", elapsed.as_secs_f64() * 1e3),
    );
}

fn random_source_power(cfg: &StackConfig, rng: &mut ChaCha8Rng) -> PowerMap {
    let mut q = Tensor::zeros(&[4, cfg.rows, cfg.cols, 1]);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            if cfg.in_footprint(SOURCE, r, c) && rng.random_bool(0.4) {
                q.set(&[SOURCE, r, c, 0], rng.random_range(0.01..1.0));
            }
        }
    }
    PowerMap::new(q).unwrap()
}

/// Heat leaving through the convective film, from the field alone.
fn convective_outflow(cfg: &StackConfig, theta: &Tensor) -> f64 {
    let (dx, dy) = cfg.cell_size();
    let area = dx * dy;
    let mut out = 0.0;
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            if !cfg.in_footprint(HEATSINK, r, c) {
                continue;
            }
            let half = cfg.layers[HEATSINK].thickness / (2.0 * cfg.cell_conductivity(HEATSINK, r, c) * area);
            out += theta.at(&[HEATSINK, r, c, 0]) / (half + 1.0 / (cfg.htc * area));
        }
    }
    out
}

#[test]
fn thermal_dense_oracle_and_energy_balance() {
    let _g = serial();
    let cfg = StackConfig::default().with_grid(8, 8);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_source_power(&cfg, &mut rng);
        let net = assemble(&cfg, &p).unwrap();
        let m = DMatrix::from_row_slice(net.n, net.n, net.to_dense().data());
        let direct = m.cholesky().expect("conductance matrix must be SPD").solve(&DVector::from_column_slice(&net.load));
        let (field, _) = solve(&cfg, &net, DEFAULT_TOLERANCE).unwrap();
        for (a, b) in field.theta.data().iter().zip(direct.iter()) {
            worst = worst.max((a - b).abs());
        }
    }

    let dir = work_dir("energy");
    let spec = desk_config().dataset;
    let manifest = build_dataset(&spec, 100, 0, "energy", &dir, 1).unwrap();
    let ds = Dataset::open(&dir).unwrap();
    let mut worst_balance = 0.0f64;
    for s in &ds.samples {
        let (stack, _) = spec.sample_stack(s.meta.seed);
        let power = s.meta.layout.power_map();
        let field = TemperatureField { theta: s.target.clone(), ambient: stack.ambient };
        let independent = (convective_outflow(&stack, &s.target) - power.total()).abs() / power.total();
        worst_balance = worst_balance.max(independent).max(energy_balance(&stack, &power, &field));
    }
    let pass = worst <= 1e-8 && worst_balance <= 1e-8;
    verdict(
        "thermal oracle vs dense direct solve",
        pass,
        &format!(
            "100 cases at 8x8x4: max diff {worst:.3e} (tol 1e-8); energy residual over {} samples {worst_balance:.3e} (tol 1e-8)",
            manifest.count
        ),
    );
}

// ---------------------------------------------------------------------------
// spectral transforms

fn alpha(u: usize, n: usize) -> f64 {
    if u == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

fn basis(u: usize, x: usize, n: usize) -> f64 {
    (PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos()
}

/// Direct triple sum of the forward (`inverse = false`) or inverse transform.
fn triple_sum(x: &[f64], (m, n, p): (usize, usize, usize), inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n * p];
    for a in 0..m {
        for b in 0..n {
            for c in 0..p {
                let mut s = 0.0;
                for i in 0..m {
                    for j in 0..n {
                        for k in 0..p {
                            let v = x[(i * n + j) * p + k];
                            s += v * if inverse {
                                alpha(i, m) * alpha(j, n) * alpha(k, p) * basis(i, a, m) * basis(j, b, n) * basis(k, c, p)
                            } else {
                                alpha(a, m) * alpha(b, n) * alpha(c, p) * basis(a, i, m) * basis(b, j, n) * basis(c, k, p)
                            };
                        }
                    }
                }
                out[(a * n + b) * p + c] = s;
            }
        }
    }
    out
}

#[test]
fn spectral_equivalence() {
    let _g = serial();
    let dims = (4, 4, 2);
    let (mut fwd, mut inv, mut trip, mut parseval) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..10 {
        let x = random(&[3, 4, 4, 2], seed);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let f = dct3(&mut g, v).unwrap();
        let coeffs = g.value(f.coeffs).clone();
        let back = idct3(&mut g, &f).unwrap();
        let y = random(&[3, 4, 4, 2], 100 + seed);
        let mut g2 = Graph::new();
        let fy = g2.constant(y.clone());
        let fy = fsaheat::spectral::FreqTensor { coeffs: fy, source_shape: y.shape().clone() };
        let inv_y = idct3(&mut g2, &fy).unwrap();
        for ch in 0..3 {
            let s = ch * 32..(ch + 1) * 32;
            let naive = triple_sum(&x.data()[s.clone()], dims, false);
            for (a, b) in coeffs.data()[s.clone()].iter().zip(&naive) {
                fwd = fwd.max((a - b).abs());
            }
            let naive_inv = triple_sum(&y.data()[s.clone()], dims, true);
            for (a, b) in g2.value(inv_y).data()[s.clone()].iter().zip(&naive_inv) {
                inv = inv.max((a - b).abs());
            }
        }
        trip = trip.max(g.value(back).max_abs_diff(&x));
        let (es, ef) = (x.norm().powi(2), coeffs.norm().powi(2));
        parseval = parseval.max((es - ef).abs() / es);
    }
    let pass = fwd <= 1e-10 && inv <= 1e-10 && trip <= 1e-10 && parseval <= 1e-9;
    verdict(
        "spectral equivalence",
        pass,
        &format!(
            "4x4x2: forward vs triple sum {fwd:.2e}, inverse vs triple sum {inv:.2e} (tol 1e-10); round trip {trip:.2e} (tol 1e-10); Parseval rel {parseval:.2e} (tol 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// gradients

/// Worst relative error of sampled coordinate checks and random directional
/// checks of `⟨module(x), w⟩` over the extra inputs and every parameter.
fn module_error<F>(specs: &[ParamSpec], extra: Vec<Tensor>, coords: usize, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamMap, &[Var]) -> Result<Var>,
{
    let params: ParamMap = init_params(specs, 3)
        .into_iter()
        .map(|(k, v)| {
            let noise = random(v.dims(), k.len() as u64);
            (k, v.zip_map(&noise, |a, b| a + 0.1 * b).unwrap())
        })
        .collect();
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| params[n].clone()));
    let empty = ParamMap::new();
    let probe = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        for (n, &v) in names.iter().zip(&vars[n_extra..]) {
            g.bind(n, v);
        }
        let out = f(g, &empty, &vars[..n_extra])?;
        let w = g.constant(random(g.dims(out), 99));
        let prod = g.mul(out, w)?;
        Ok(g.sum_all(prod))
    };
    let sampled = check_sampled(&inputs, FD_STEP, coords, 7, &probe).unwrap();
    let directional = check_directional(&inputs, FD_STEP, 4, 8, &probe).unwrap();
    if sampled.checked < 10 * sampled.skipped {
        return f64::INFINITY;
    }
    sampled.max_rel_err.max(directional.max_rel_err)
}

#[test]
fn gradient_integrity() {
    let _g = serial();
    let micro = NetConfig::micro();
    let mut results: Vec<(String, f64)> = Vec::new();

    let block = EncoderBlock::new("b", 8, &micro);
    results.push((
        "encoder block".into(),
        module_error(&block.param_specs(), vec![random(&[8, 4, 8, 8], 1)], 6, |g, p, x| block.forward(g, p, x[0])),
    ));
    for (freq, spatial, name) in [(true, false, "frequency-only block"), (false, true, "spatial-only block")] {
        let cfg = NetConfig { freq_branch: freq, spatial_branch: spatial, ..micro.clone() };
        let b = EncoderBlock::new("b", 4, &cfg);
        results.push((
            name.into(),
            module_error(&b.param_specs(), vec![random(&[4, 4, 8, 8], 2)], 4, |g, p, x| b.forward(g, p, x[0])),
        ));
    }
    let pp = PpNet::new(&micro);
    results.push((
        "preprocessing net".into(),
        module_error(&pp.param_specs(), vec![random(&[6, 4, 8, 8], 3)], 8, |g, p, x| pp.forward(g, p, x[0])),
    ));
    let fci_cfg = NetConfig { heads: 1, ..micro.clone() };
    let fci = FciFormer::new(&fci_cfg);
    let stages: Vec<Tensor> =
        (0..4).map(|s| random(&[fci_cfg.stage_channels(s), 4, 16 >> s, 16 >> s], 10 + s as u64)).collect();
    results.push((
        "cross-scale attention".into(),
        module_error(&fci.param_specs(), stages, 3, |g, p, x| {
            let outs = fci.forward(g, p, x)?;
            let flat = outs
                .iter()
                .map(|&o| {
                    let n = g.dims(o).iter().product();
                    g.reshape(o, &[n])
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat(&flat, 0)
        }),
    ));
    for (level, coarse, fine) in [(1, 4, 8), (3, 4, 4)] {
        let dec = DecoderLevel::new(level, &micro);
        let cin = micro.stage_channels((level + 1).min(3));
        let x = random(&[cin, 4, coarse, coarse], 20);
        let lateral = random(&[micro.stage_channels(level), 4, fine, fine], 21);
        results.push((
            format!("decoder level {level}"),
            module_error(&dec.param_specs(), vec![x, lateral], 4, |g, p, v| dec.forward(g, p, v[0], v[1])),
        ));
    }
    let net = FsaHeatNet::new(micro.clone()).unwrap();
    let truth = Tensor::uniform(&[4, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(30));
    results.push((
        "full micro network through the hybrid loss".into(),
        module_error(&net.param_specs(), vec![random(&[8, 4, 16, 16], 31)], 1, |g, p, v| {
            let y = net.forward(g, p, v[0])?;
            let y = g.reshape(y, &[4, 16, 16])?;
            Ok(fsl(g, y, &truth, LossWeights::default())?.0)
        }),
    ));
    let pred = random(&[4, 8, 8], 40).map(|v| v + 2.0);
    let t = random(&[4, 8, 8], 41).map(|v| v + 2.0);
    let loss = check_gradients(&[pred], 1e-6, |g, v| Ok(fsl(g, v[0], &t, LossWeights::default())?.0)).unwrap();
    results.push(("hybrid loss".into(), if loss.checked >= 10 * loss.skipped { loss.max_rel_err } else { f64::INFINITY }));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    for (name, err) in &results {
        note(&format!("  gradient check {name}: max rel err {err:.2e}"));
    }
    verdict(
        "gradient integrity",
        worst <= GRAD_TOL,
        &format!("{} checks, worst relative error {worst:.2e} (tol 1e-4)", results.len()),
    );
}

// ---------------------------------------------------------------------------
// training

fn probe_config() -> TrainConfig {
    let mut cfg = TrainConfig { net: NetConfig::micro(), ..TrainConfig::default() }.with_grid(16);
    cfg.seed = 0;
    cfg.data.n_train = 8;
    cfg.data.val_fraction = 0.0;
    cfg.optim.batch_size = 1;
    cfg.optim.epochs = 500;
    cfg.optim.lr = 2e-3;
    cfg.optim.lr_min = 2e-5;
    cfg
}

fn mean_fsl(net: &FsaHeatNet, params: &ParamMap, set: &Prepared, w: LossWeights) -> f64 {
    let mut total = 0.0;
    for (x, t) in set.inputs.iter().zip(&set.targets) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = net.forward(&mut g, params, v).unwrap();
        let pred = g.value(y).clone().reshape(t.dims()).unwrap();
        total += fsl_value(&pred, t, w).unwrap().total;
    }
    total / set.len() as f64
}

#[test]
fn overfit_probe() {
    let _g = serial();
    let cfg = probe_config();
    let dir = work_dir("overfit");
    let started = Instant::now();
    build_dataset(&cfg.dataset, cfg.data.n_train, cfg.seed, "train", &dir, 1).unwrap();
    let ds = Dataset::open(&dir).unwrap();
    let set = Prepared::new(&ds.samples, &normalization_of(&ds).unwrap()).unwrap();
    let net = FsaHeatNet::new(cfg.net.clone()).unwrap();
    let w = cfg.loss_weights();
    let initial = mean_fsl(&net, &net.init_params(cfg.seed), &set, w);
    let mut best = (f64::INFINITY, 0);
    fit(&net, &cfg, &set, None, |log, params| {
        if log.epoch % 10 == 0 || log.epoch == cfg.optim.epochs {
            let v = mean_fsl(&net, params, &set, w);
            if v < best.0 {
                best = (v, log.epoch);
            }
        }
        Ok(())
    })
    .unwrap();
    let elapsed = started.elapsed();
    let ratio = best.0 / initial;
    verdict(
        "overfit probe",
        ratio < 0.02 && elapsed < Duration::from_secs(600),
        &format!(
            "8 samples at 16x16, alpha {} beta {}: fsl {initial:.4e} -> {:.4e} at epoch {} ({:.2}% of initial, limit 2%), {:.0} s (limit 600 s)",
            w.alpha,
            w.beta,
            best.0,
            best.1,
            100.0 * ratio,
            elapsed.as_secs_f64()
        ),
    );
}

struct DeskRun {
    cfg: TrainConfig,
    out: PathBuf,
    summary: TrainSummary,
    report: EvalReport,
    elapsed: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = desk_config();
        let out = work_dir("desk");
        let started = Instant::now();
        let summary = train(&cfg, &out).unwrap();
        let report = evaluate(&summary.best_checkpoint, Protocol::InDist, &cfg, &out).unwrap();
        DeskRun { cfg, out, summary, report, elapsed: started.elapsed() }
    })
}

#[test]
fn desk_scale_learning() {
    let _g = serial();
    let run = desk_run();
    let r = &run.report;
    for e in &run.summary.log {
        note(&format!(
            "  desk epoch {:3}: L_s {:.3e} fsl {:.3e} val rmse {:.4e}",
            e.epoch,
            e.spatial,
            e.fsl,
            e.val_rmse.unwrap_or(f64::NAN)
        ));
    }
    // the optimizer saw these samples, so they should fit at least as well as the held-out ones
    let ds = Dataset::open(&run.summary.dataset_dir).unwrap();
    let seen = Dataset { samples: ds.samples[..run.summary.train_samples].to_vec(), manifest: ds.manifest.clone() };
    let ckpt = Checkpoint::load(&run.summary.best_checkpoint, Some(&run.cfg.net)).unwrap();
    let (own, _) = evaluate_dataset(&ckpt, &seen, "train").unwrap();
    note(&format!(
        "  desk own-training-set rmse {:.4e} vs logged validation rmse {:.4e}",
        own.aggregate.rmse,
        run.summary.best_val_rmse.unwrap_or(f64::NAN)
    ));
    let ratio = r.aggregate.rmse / r.baseline_rmse;
    let pass = r.sample_count == 100
        && run.summary.train_samples + run.summary.val_samples == 500
        && ratio <= 0.5
        && run.elapsed < Duration::from_secs(7200);
    verdict(
        "desk-scale learning",
        pass,
        &format!(
            "32x32, {} train / {} test: test rmse {:.4e} vs baseline {:.4e} (ratio {ratio:.3}, limit 0.5), best epoch {}, {:.0} s (limit 7200 s)",
            run.summary.train_samples + run.summary.val_samples,
            r.sample_count,
            r.aggregate.rmse,
            r.baseline_rmse,
            run.summary.best_epoch,
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn generalization_protocols() {
    let _g = serial();
    let run = desk_run();
    let mut complete = true;
    let mut lines = Vec::new();
    for p in Protocol::generalization() {
        let report = evaluate(&run.summary.best_checkpoint, p, &run.cfg, &run.out).unwrap();
        let spec: DatasetSpec = p.dataset_spec(&run.cfg.dataset).unwrap();
        let again = work_dir(&format!("regen-{p}"));
        let m = build_dataset(&spec, report.sample_count, report.master_seed, &report.split, &again, 1).unwrap();
        let same_seeds = m.samples.iter().map(|s| s.seed).collect::<Vec<_>>() == report.seeds;
        let finite = report.aggregate.rmse.is_finite()
            && report.per_layer.iter().all(|l| l.metrics.rmse.is_finite() && l.metrics.mae.is_finite());
        let ok = report.sample_count == run.cfg.data.n_test
            && report.per_layer.len() == 4
            && finite
            && m.data_digest == report.dataset_digest
            && same_seeds;
        complete &= ok;
        let layers: Vec<String> =
            report.per_layer.iter().map(|l| format!("{} {:.4e}", l.name, l.metrics.rmse)).collect();
        lines.push(format!(
            "  {p}: rmse {:.4e} (baseline {:.4e}), mape {:.2}%, per layer [{}], regenerated identically: {}",
            report.aggregate.rmse,
            report.baseline_rmse,
            report.aggregate.mape,
            layers.join(", "),
            m.data_digest == report.dataset_digest
        ));
    }
    for l in &lines {
        note(l);
    }
    verdict(
        "generalization protocol mechanics",
        complete,
        &format!("{} protocols regenerated deterministically with complete per-layer reports", lines.len()),
    );
}

fn ablation_config() -> TrainConfig {
    let desk = desk_config();
    let mut cfg = TrainConfig { net: desk.net.clone(), loss: LossWeights::default(), seed: 0, ..TrainConfig::default() }.with_grid(16);
    cfg.data.n_train = 100;
    cfg.data.n_test = 40;
    cfg.data.val_fraction = 0.1;
    cfg.optim = desk.optim.clone();
    cfg.optim.epochs = 8;
    cfg
}

#[test]
fn ablation_grid() {
    let _g = serial();
    let cfg = ablation_config();
    let out = work_dir("ablation");
    let report = ablate(&cfg, &out).unwrap();
    for row in &report.rows {
        note(&format!(
            "  {}: {} parameters, removed {} tensors, test rmse {:.4e} (baseline {:.4e}), audit {}",
            row.variant,
            row.audit.param_count,
            row.audit.removed.len(),
            row.test.rmse,
            row.baseline_rmse,
            if row.audit.passed { "pass" } else { "FAIL" }
        ));
    }
    for t in &report.trends {
        note(&format!(
            "  trend {}: {:.4e} vs {:.4e} ({})",
            t.claim,
            t.full_rmse,
            t.other_rmse,
            if t.observed { "observed" } else { "not observed" }
        ));
    }
    let trained = report.rows.len() == 6 && report.rows.iter().all(|r| r.test.rmse.is_finite());
    let audits = report.audits_passed && report.rows.iter().all(|r| r.audit.passed);
    verdict(
        "ablation grid",
        trained && audits,
        &format!("{} variants trained and reported, structural audits {}", report.rows.len(), if audits { "exact" } else { "failed" }),
    );
}

// ---------------------------------------------------------------------------
// receptive field

#[test]
fn receptive_field() {
    let _g = serial();
    let mut unreached = 0;
    let mut cells = 0;
    for (grid, seed) in [(16, 5u64), (32, 6)] {
        let net = FsaHeatNet::new(NetConfig::micro()).unwrap();
        assert!(net.config.freq_branch);
        let params = net.init_params(seed);
        let x = random(&[8, 4, grid, grid], 100 + seed);
        let mut bumped = x.clone();
        bumped.set(&[6, 0, 3, grid - 4], bumped.at(&[6, 0, 3, grid - 4]) + 1.0);
        let first = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let stages = net.encode(&mut g, &params, v).unwrap();
            g.value(stages[0]).clone()
        };
        let (a, b) = (first(x), first(bumped));
        let c0 = a.dims()[0];
        let plane = a.numel() / c0;
        for cell in 0..plane {
            let reach = (0..c0).map(|c| (a.data()[c * plane + cell] - b.data()[c * plane + cell]).abs()).fold(0.0, f64::max);
            cells += 1;
            if reach == 0.0 {
                unreached += 1;
            }
        }
    }
    verdict(
        "global receptive field",
        unreached == 0,
        &format!("single-cell perturbation changed {} of {cells} first-stage cells at 16x16 and 32x32", cells - unreached),
    );
}
