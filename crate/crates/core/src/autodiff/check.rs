//! Central finite-difference gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all checked
    /// coordinates (or, for directional checks, the worst direction).
    pub max_rel_err: f64,
    /// Same measure restricted to each input.
    pub per_input: Vec<f64>,
    /// Norm of the analytic gradient per input.
    pub analytic_norms: Vec<f64>,
    /// Probes compared against the analytic gradient.
    pub checked: usize,
    /// Probes discarded because `x ± step` fell on different sides of a
    /// kink (see [`Graph::branch_signature`]), where central differences
    /// do not estimate the derivative.
    pub skipped: usize,
    pub evaluations: usize,
}

struct Eval {
    value: f64,
    branches: Vec<i8>,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<Eval>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::arg("gradient check needs a scalar function"));
    }
    Ok(Eval { value: v.data()[0], branches: g.branch_signature().to_vec() })
}

/// Analytic gradients and the branch signature at `inputs`.
fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<i8>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let gs = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
    Ok((gs, g.branch_signature().to_vec()))
}

fn same_region(a: &[i8], b: &[i8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x * y >= 0)
}

/// Central difference, or `None` when the two probes straddle a kink.
fn central(plus: Eval, minus: Eval, base: &[i8], step: f64) -> Option<f64> {
    (same_region(&plus.branches, base) && same_region(&minus.branches, base))
        .then(|| (plus.value - minus.value) / (2.0 * step))
}

fn rel(diff_sq: f64, a_sq: f64, n_sq: f64) -> f64 {
    let denom = a_sq.max(n_sq).sqrt();
    if denom == 0.0 {
        diff_sq.sqrt()
    } else {
        diff_sq.sqrt() / denom
    }
}

/// Checks every coordinate of every input against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_sampled(inputs, step, usize::MAX, 0, f)
}

/// Like [`check_gradients`] but checks at most `max_coords` randomly chosen
/// coordinates per input.
pub fn check_sampled<F>(
    inputs: &[Tensor],
    step: f64,
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    use rand::seq::index::sample;
    let (grads, base) = analytic(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let (mut tot_d, mut tot_a, mut tot_n) = (0.0, 0.0, 0.0);
    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut checked, mut skipped, mut evaluations) = (0, 0, 0);
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + step;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[c] = orig - step;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[c] = orig;
            evaluations += 2;
            let Some(num) = central(fp, fm, &base, step) else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let ana = grads[i].data()[c];
            d2 += (num - ana).powi(2);
            a2 += ana * ana;
            n2 += num * num;
        }
        per_input.push(rel(d2, a2, n2));
        tot_d += d2;
        tot_a += a2;
        tot_n += n2;
    }
    Ok(GradReport {
        max_rel_err: rel(tot_d, tot_a, tot_n),
        per_input,
        analytic_norms: grads.iter().map(Tensor::norm).collect(),
        checked,
        skipped,
        evaluations,
    })
}

/// Compares the directional derivative `⟨∇f, v⟩` with a central difference
/// along `n_dirs` random unit directions `v` spanning all inputs jointly.
/// Directions that straddle a kink are replaced, up to `4·n_dirs` draws.
pub fn check_directional<F>(
    inputs: &[Tensor],
    step: f64,
    n_dirs: usize,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (grads, base) = analytic(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped, mut evaluations) = (0, 0, 0);
    while checked < n_dirs && checked + skipped < 4 * n_dirs {
        let mut dirs: Vec<Tensor> = inputs
            .iter()
            .map(|t| Tensor::uniform(t.dims(), -1.0, 1.0, &mut rng))
            .collect();
        let len = dirs.iter().map(|d| d.norm().powi(2)).sum::<f64>().sqrt();
        for d in &mut dirs {
            *d = d.scale(1.0 / len);
        }
        let ana: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |s: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| t.zip_map(d, |a, b| a + s * b).unwrap())
                .collect()
        };
        let (fp, fm) = (eval(&f, &shifted(step))?, eval(&f, &shifted(-step))?);
        evaluations += 2;
        let Some(num) = central(fp, fm, &base, step) else {
            skipped += 1;
            continue;
        };
        checked += 1;
        let denom = ana.abs().max(num.abs());
        let err = if denom == 0.0 { 0.0 } else { (ana - num).abs() / denom };
        worst = worst.max(err);
    }
    Ok(GradReport {
        max_rel_err: worst,
        per_input: Vec::new(),
        analytic_norms: grads.iter().map(Tensor::norm).collect(),
        checked,
        skipped,
        evaluations,
    })
}
