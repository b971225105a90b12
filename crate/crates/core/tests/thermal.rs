use fsaheat::thermal::{
    assemble, energy_balance, solve, PowerMap, StackConfig, TemperatureField, DEFAULT_TOLERANCE,
    HEATSINK, SOURCE,
};
use fsaheat::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn full_footprint(rows: usize, cols: usize) -> StackConfig {
    let mut cfg = StackConfig::default().with_grid(rows, cols);
    let s = cfg.heatsink_side();
    for l in &mut cfg.layers {
        l.side = s;
    }
    cfg
}

fn random_source_power(cfg: &StackConfig, rng: &mut ChaCha8Rng) -> PowerMap {
    let mut q = Tensor::zeros(&[4, cfg.rows, cfg.cols, 1]);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            if rng.random_bool(0.4) {
                q.set(&[SOURCE, r, c, 0], rng.random_range(0.01..1.0));
            }
        }
    }
    PowerMap::new(q).unwrap()
}

fn run(cfg: &StackConfig, p: &PowerMap) -> TemperatureField {
    let net = assemble(cfg, p).unwrap();
    solve(cfg, &net, DEFAULT_TOLERANCE).unwrap().0
}

#[test]
fn hand_assembled_two_by_two() {
    let mut cfg = StackConfig::default().with_grid(2, 2);
    // shrink the die so its 2x2 cells fall outside the footprint and use the fill conductivity
    cfg.layers[0].side = 8e-3;
    cfg.layers[1].side = 8e-3;
    let net = assemble(&cfg, &PowerMap::zeros(2, 2)).unwrap();

    let d = cfg.heatsink_side() / 2.0;
    let area = d * d;
    let k = |l: usize| {
        let base = cfg.layers[l].conductivity;
        if l < 2 { base * 0.05 } else { base }
    };
    let t = |l: usize| cfg.layers[l].thickness;
    let idx = |l: usize, r: usize, c: usize| l * 4 + r * 2 + c;
    let mut g = [[0.0f64; 16]; 16];
    let mut link = |a: usize, b: usize, cond: f64| {
        g[a][a] += cond;
        g[b][b] += cond;
        g[a][b] -= cond;
        g[b][a] -= cond;
    };
    for l in 0..4 {
        // square cells: k t d / d in series halves of equal k gives k t
        let lateral = k(l) * t(l);
        link(idx(l, 0, 0), idx(l, 0, 1), lateral);
        link(idx(l, 1, 0), idx(l, 1, 1), lateral);
        link(idx(l, 0, 0), idx(l, 1, 0), lateral);
        link(idx(l, 0, 1), idx(l, 1, 1), lateral);
    }
    for l in 0..3 {
        let r = t(l) / (2.0 * k(l) * area) + t(l + 1) / (2.0 * k(l + 1) * area);
        for cell in 0..4 {
            link(l * 4 + cell, (l + 1) * 4 + cell, 1.0 / r);
        }
    }
    let r_top = t(3) / (2.0 * k(3) * area) + 1.0 / (cfg.htc * area);
    for cell in 0..4 {
        g[12 + cell][12 + cell] += 1.0 / r_top;
    }

    let dense = net.to_dense();
    for i in 0..16 {
        for j in 0..16 {
            let a = dense.at(&[i, j]);
            assert!(
                (a - g[i][j]).abs() <= 1e-12 * g[i][i].abs(),
                "G[{i},{j}] = {a}, hand = {}",
                g[i][j]
            );
        }
    }
}

#[test]
fn uniform_power_matches_series_chain() {
    let cfg = full_footprint(16, 16);
    let q_cell = 0.02;
    let mut q = Tensor::zeros(&[4, 16, 16, 1]);
    for r in 0..16 {
        for c in 0..16 {
            q.set(&[SOURCE, r, c, 0], q_cell);
        }
    }
    let field = run(&cfg, &PowerMap::new(q).unwrap());

    let (dx, dy) = cfg.cell_size();
    let area = dx * dy;
    let half_r = |l: usize| cfg.layers[l].thickness / (2.0 * cfg.layers[l].conductivity * area);
    // all heat of a column passes through every interface below the top
    let mut chain = [0.0; 4];
    chain[3] = q_cell * (half_r(3) + 1.0 / (cfg.htc * area));
    for l in (0..3).rev() {
        chain[l] = chain[l + 1] + q_cell * (half_r(l) + half_r(l + 1));
    }
    let mut worst = 0.0f64;
    for l in 0..4 {
        for r in 0..16 {
            for c in 0..16 {
                worst = worst.max((field.at(l, r, c) - chain[l]).abs());
            }
        }
    }
    assert!(worst <= 1e-8, "max deviation {worst}");
}

#[test]
fn matches_dense_cholesky() {
    let cfg = StackConfig::default().with_grid(8, 8);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_source_power(&cfg, &mut rng);
        let net = assemble(&cfg, &p).unwrap();
        let dense = net.to_dense();
        let m = DMatrix::from_row_slice(net.n, net.n, dense.data());
        let chol = m.cholesky().expect("conductance matrix must be SPD");
        let x = chol.solve(&DVector::from_column_slice(&net.load));
        let (field, _) = solve(&cfg, &net, DEFAULT_TOLERANCE).unwrap();
        let diff = field
            .theta
            .data()
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-8, "seed {seed}: {diff}");
        assert!(energy_balance(&cfg, &p, &field) <= 1e-8);
    }
}

#[test]
fn superposition() {
    let cfg = StackConfig::default().with_grid(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p1 = random_source_power(&cfg, &mut rng);
    let p2 = random_source_power(&cfg, &mut rng);
    let (a, b) = (1.7, 0.4);
    let combo = PowerMap::new(
        p1.q.scale(a)
            .zip_map(&p2.q.scale(b), |x, y| x + y)
            .unwrap(),
    )
    .unwrap();
    let t1 = run(&cfg, &p1).theta;
    let t2 = run(&cfg, &p2).theta;
    let t12 = run(&cfg, &combo).theta;
    let expect = t1.scale(a).zip_map(&t2.scale(b), |x, y| x + y).unwrap();
    assert!(t12.max_abs_diff(&expect) <= 1e-8 * expect.max_abs());
}

#[test]
fn raising_one_cell_never_cools_anything() {
    let cfg = StackConfig::default().with_grid(6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = random_source_power(&cfg, &mut rng);
    let base = run(&cfg, &p).theta;
    for &(r, c) in &[(0, 0), (2, 3), (5, 1)] {
        let mut q = p.q.clone();
        q.set(&[SOURCE, r, c, 0], q.at(&[SOURCE, r, c, 0]) + 0.3);
        let hotter = run(&cfg, &PowerMap::new(q).unwrap()).theta;
        for (h, b) in hotter.data().iter().zip(base.data()) {
            assert!(h - b >= -1e-10);
        }
    }
}

#[test]
fn hottest_cell_on_powered_source_layer() {
    let cfg = StackConfig::default().with_grid(12, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let field = run(&cfg, &random_source_power(&cfg, &mut rng));
    let plane = 144;
    let data = field.theta.data();
    let argmax = (0..data.len())
        .max_by(|&i, &j| data[i].total_cmp(&data[j]))
        .unwrap();
    assert_eq!(argmax / plane, SOURCE);
    assert!(data.iter().all(|&v| v >= -1e-9));
}

#[test]
fn stronger_convection_cools() {
    let cfg = StackConfig::default().with_grid(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = random_source_power(&cfg, &mut rng);
    let before = run(&cfg, &p).max_rise();
    let cooled = StackConfig { htc: 2.0 * cfg.htc, ..cfg.clone() };
    let after = run(&cooled, &p).max_rise();
    assert!(after < before);
    // heatsink top rows all carry convective terms
    let net = assemble(&cfg, &p).unwrap();
    let plane = 64;
    for cell in 0..plane {
        let i = HEATSINK * plane + cell;
        let row_sum: f64 = (0..net.n).map(|j| net.get(i, j)).sum();
        assert!(row_sum > 0.0);
    }
}
