//! End-to-end acceptance gate. Each test prints one PASS/FAIL line for its
//! criterion; the asserts inside make the failures gating.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resnet_synth::blockops::*;
use resnet_synth::compiler1d::{compile_1d, PiecewiseConstant1D};
use resnet_synth::compilernd::{
    compile_grid_indicator, compile_nd, discretize, next_index, PiecewiseConstantND,
};
use resnet_synth::experiment::{
    boundary_csv, boundary_ppm, clamp_network, gen_dataset, init_model, positivity_probe,
    sample_decision_boundary, train, Arch, Model, ResBlockParams, ResTrainNet, TrainConfig,
};
use resnet_synth::verify::{check_conditions_1d, exact_l1_error_1d, mc_l1_error};

fn criterion<F: FnOnce()>(n: usize, name: &str, body: F) {
    let result = catch_unwind(AssertUnwindSafe(body));
    println!("criterion {n} ({name}): {}", if result.is_ok() { "PASS" } else { "FAIL" });
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn random_target_1d(rng: &mut ChaCha8Rng, max_pieces: usize) -> PiecewiseConstant1D {
    let m = rng.gen_range(1..=max_pieces);
    let mut knots = vec![rng.gen_range(-3.0..3.0)];
    for _ in 0..m {
        let w = rng.gen_range(0.2..1.5);
        knots.push(knots.last().unwrap() + w);
    }
    let values = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
    PiecewiseConstant1D::new(knots, values).unwrap()
}

#[test]
fn criterion_01_one_dimensional_exactness() {
    criterion(1, "1-D compilation exactness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let t = random_target_1d(&mut rng, 50);
            let m = t.pieces();
            let delta = 0.1 * t.min_width();
            let h = t.sup_norm();
            let (net, trace) = compile_1d(&t, delta).unwrap();
            assert_eq!(net.blocks().len(), 4 * m + 4);
            let (a0, am) = (t.knots()[0], *t.knots().last().unwrap());
            // Zero outside the support.
            for i in 0..40 {
                let off = 0.025 + i as f64 * 0.1;
                assert!(net.eval_unchecked(&[a0 - off]).abs() <= 1e-9);
                assert!(net.eval_unchecked(&[am + off]).abs() <= 1e-9);
            }
            for k in 1..=m {
                let (lo, hi) = (t.knots()[k - 1], t.knots()[k]);
                // Target value on the shrunk interior.
                // Inset by 1e-9: exactly at the tolerant boundary the probe
                // can land on the kink, displaced by weight roundoff and
                // magnified by the ramp slope.
                for i in 0..=40 {
                    let x = lo + delta + 1e-9 + (hi - lo - 2.0 * (delta + 1e-9)) * i as f64 / 40.0;
                    let got = net.eval_unchecked(&[x]);
                    assert!(
                        (got - t.values()[k - 1]).abs() <= 1e-9,
                        "m={m} k={k} x={x} got={got} want={} delta={delta}",
                        t.values()[k - 1]
                    );
                }
                // Bounded by the sup norm everywhere, ramps included.
                for i in 0..=40 {
                    let x = lo + (hi - lo) * i as f64 / 40.0;
                    assert!(net.eval_unchecked(&[x]).abs() <= h + 1e-9);
                }
            }
            let l1 = exact_l1_error_1d(&net, &trace, &t).unwrap();
            let bound = 4.0 * m as f64 * delta * h;
            assert!(l1 <= bound * (1.0 + 1e-12), "l1 {l1} bound {bound}");
        }
    });
}

#[test]
fn criterion_02_convergence_in_delta() {
    criterion(2, "L1 error linear in delta", || {
        let t = PiecewiseConstant1D::new(
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![1.0, -0.7, 0.4, 1.3, -0.2],
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        let mut ratios = Vec::new();
        for j in 2..=10 {
            let delta = 2f64.powi(-j) * t.min_width();
            let (net, trace) = compile_1d(&t, delta).unwrap();
            let err = exact_l1_error_1d(&net, &trace, &t).unwrap();
            assert!(err < prev, "error not decreasing at 2^-{j}: {err} vs {prev}");
            prev = err;
            ratios.push(err / delta);
        }
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(hi / lo <= 4.0, "ratio band {lo}..{hi}");
    });
}

#[test]
fn criterion_03_worked_micro_example() {
    criterion(3, "worked micro-example", || {
        let t = PiecewiseConstant1D::new(vec![0.0, 1.0], vec![1.0]).unwrap();
        let (net, trace) = compile_1d(&t, 0.25).unwrap();
        assert_eq!(net.blocks().len(), 8);
        for (x, want) in [(0.5, 1.0), (-1.0, 0.0), (2.0, 0.0), (0.0625, 0.5)] {
            assert!((net.eval_unchecked(&[x]) - want).abs() <= 1e-9, "at {x}");
        }
        let l1 = exact_l1_error_1d(&net, &trace, &t).unwrap();
        assert!((l1 - 0.125).abs() <= 1e-9);
        assert!(l1 <= 1.0);
    });
}

#[test]
fn criterion_04_basic_operation_identities() {
    criterion(4, "one-block operation identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..10_000 {
            let dim = rng.gen_range(1..=3);
            let coord = rng.gen_range(0..dim);
            let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y = x[coord];
            let (c, alpha, beta) = (
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let cases: Vec<(ResidualBlockCase, f64)> = vec![
                (shift_block(c, coord, dim).unwrap(), y + c),
                (max_linear_block(alpha, beta, coord, dim).unwrap(), y.max(alpha * y + beta)),
                (min_linear_block(alpha, beta, coord, dim).unwrap(), y.min(alpha * y + beta)),
                (max_const_block(c, coord, dim).unwrap(), y.max(c)),
                (min_const_block(c, coord, dim).unwrap(), y.min(c)),
                (hinge_block(alpha, beta, coord, dim).unwrap(), y + alpha * (y - beta).max(0.0)),
            ];
            for (block, want) in cases {
                let mut state = x.clone();
                block.apply(&mut state);
                assert!((state[coord] - want).abs() <= 1e-12);
                // Only the target coordinate moves.
                for (j, (s, orig)) in state.iter().zip(&x).enumerate() {
                    if j != coord {
                        assert_eq!(s, orig);
                    }
                }
            }
            if dim >= 2 {
                let src = (coord + 1) % dim;
                let block = add_relu_block(src, coord, dim).unwrap();
                let want = y + x[src].max(0.0);
                block.apply(&mut x);
                assert!((x[coord] - want).abs() <= 1e-12);
            }
        }
    });
}

type ResidualBlockCase = resnet_synth::net::ResidualBlock;

fn random_target_nd(rng: &mut ChaCha8Rng, d: usize) -> PiecewiseConstantND {
    let mut axis_knots = Vec::new();
    let mut count = 1;
    for _ in 0..d {
        let cells = rng.gen_range(1..=4);
        count *= cells;
        let mut knots = vec![rng.gen_range(-2.0..2.0)];
        for _ in 0..cells {
            let w = rng.gen_range(0.3..1.2);
            knots.push(knots.last().unwrap() + w);
        }
        axis_knots.push(knots);
    }
    let values = (0..count).map(|_| rng.gen_range(-2.0..2.0)).collect();
    PiecewiseConstantND::new(axis_knots, values).unwrap()
}

#[test]
fn criterion_05_grid_indicator() {
    criterion(5, "d-dimensional grid indicator", || {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        for d in [2usize, 3] {
            for _ in 0..8 {
                let t = random_target_nd(&mut rng, d);
                let delta = 0.1 * t.min_width();
                let h = t.sup_norm().max(0.5);
                let (net, spec) = compile_grid_indicator(t.axis_knots(), h, delta).unwrap();
                let cells = t.cells_per_axis();
                // Interior value at each cell center matches the level pattern.
                let mut idx = vec![0usize; d];
                loop {
                    let center = t.cell_center(&idx);
                    let got = net.eval_unchecked(&center);
                    let want = spec.level_values
                        [resnet_synth::compilernd::flat_index(&idx, &cells)];
                    assert!(
                        (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
                        "cell {idx:?}: {got} vs {want}"
                    );
                    if !next_index(&mut idx, &cells) {
                        break;
                    }
                }
                // Pairwise distinct with the predicted minimum gap.
                let m1 = cells[0] as f64;
                let min_gap = h * (1.0 / (m1 + 1.0)).min(1.0);
                for (i, a) in spec.level_values.iter().enumerate() {
                    assert!(*a > 0.0);
                    for b in &spec.level_values[i + 1..] {
                        assert!((a - b).abs() >= min_gap - 1e-9, "gap {a} {b}");
                    }
                }
                // Zero outside the grid.
                for _ in 0..200 {
                    let x: Vec<f64> = t
                        .axis_knots()
                        .iter()
                        .map(|k| rng.gen_range(k[0] - 2.0..*k.last().unwrap() + 2.0))
                        .collect();
                    let inside = t
                        .axis_knots()
                        .iter()
                        .zip(&x)
                        .all(|(k, &xi)| xi >= k[0] && xi <= *k.last().unwrap());
                    if !inside {
                        assert!(net.eval_unchecked(&x).abs() <= 1e-9);
                    }
                }
            }
        }
    });
}

#[test]
fn criterion_06_nd_end_to_end() {
    criterion(6, "d-dimensional end-to-end", || {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        for d in [2usize, 3] {
            for _ in 0..8 {
                let t = random_target_nd(&mut rng, d);
                let delta = 0.1 * t.min_width();
                let (net, _) = compile_nd(&t, delta).unwrap();
                let cells = t.cells_per_axis();
                let mut idx = vec![0usize; d];
                loop {
                    let center = t.cell_center(&idx);
                    let want = t.cell_value(&idx);
                    assert!(
                        (net.eval_unchecked(&center) - want).abs()
                            <= 1e-9 * (1.0 + t.sup_norm()),
                        "cell {idx:?}"
                    );
                    if !next_index(&mut idx, &cells) {
                        break;
                    }
                }
                for _ in 0..200 {
                    let x: Vec<f64> = t
                        .axis_knots()
                        .iter()
                        .map(|k| rng.gen_range(k[0] - 2.0..*k.last().unwrap() + 2.0))
                        .collect();
                    let inside = t
                        .axis_knots()
                        .iter()
                        .zip(&x)
                        .all(|(k, &xi)| xi >= k[0] && xi <= *k.last().unwrap());
                    if !inside {
                        assert!(net.eval_unchecked(&x).abs() <= 1e-9);
                    }
                }
            }
        }
        // Single-axis inputs take the 1-D path: the results must agree.
        let t1 = PiecewiseConstant1D::new(vec![0.0, 0.5, 2.0], vec![1.0, -0.5]).unwrap();
        let tnd = PiecewiseConstantND::new(vec![vec![0.0, 0.5, 2.0]], vec![1.0, -0.5]).unwrap();
        let (a, _) = compile_1d(&t1, 0.05).unwrap();
        let (b, _) = compile_nd(&tnd, 0.05).unwrap();
        for i in -20..=60 {
            let x = i as f64 * 0.05;
            assert!((a.eval_unchecked(&[x]) - b.eval_unchecked(&[x])).abs() <= 1e-9);
        }
        // Unit-square indicator: Monte-Carlo L1 within the ramp-area envelope.
        let square =
            PiecewiseConstantND::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]], vec![1.0]).unwrap();
        let (net, _) = compile_nd(&square, 0.1).unwrap();
        let (est, stderr) =
            mc_l1_error(&net, &square, &[-0.2, -0.2], &[1.2, 1.2], 1_000_000, 66).unwrap();
        assert!(est <= 8.0 * 0.1 + 3.0 * stderr, "est {est} stderr {stderr}");
    });
}

#[test]
fn criterion_07_gradient_check() {
    criterion(7, "trainer gradient check", || {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        for arch in [Arch::FullyConnectedWidthD, Arch::OneNeuronResNet] {
            for trial in 0..100 {
                let cfg = TrainConfig { seed: trial, ..TrainConfig::new(arch, 3) };
                let mut model = init_model(&cfg);
                let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let (_, grad) = model.loss_grad(z, y);
                let mut params = model.params();
                let idx = rng.gen_range(0..params.len());
                let (orig, h) = (params[idx], 1e-5);
                params[idx] = orig + h;
                model.set_params(&params);
                let up = model.loss_grad(z, y).0;
                params[idx] = orig - h;
                model.set_params(&params);
                let down = model.loss_grad(z, y).0;
                let fd = (up - down) / (2.0 * h);
                let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{arch:?} trial {trial} rel {rel}");
            }
        }
    });
}

#[test]
fn criterion_08_clamp_three_cases() {
    criterion(8, "clamp construction", || {
        // Output functional f = x so the clamp arithmetic is exact.
        let steer = Model::Res(ResTrainNet {
            blocks: vec![ResBlockParams { u: [1.0, 1.0], b: 0.5, v: [0.25, -0.5] }],
            out_w: [1.0, 0.0],
            out_b: 0.0,
        });
        let clamped = clamp_network(&steer);
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        for _ in 0..10_000 {
            let z = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let f = steer.forward(z);
            assert_eq!(clamped.forward(z), f.max(0.0).min(1.0), "f = {f}");
        }
        // Three-case table on a block-free model whose output is exactly x.
        let pure = Model::Res(ResTrainNet { blocks: vec![], out_w: [1.0, 0.0], out_b: 0.0 });
        let pure_clamped = clamp_network(&pure);
        assert_eq!(pure_clamped.forward([2.0, 0.0]), 1.0);
        assert_eq!(pure_clamped.forward([0.5, 0.0]), 0.5);
        assert_eq!(pure_clamped.forward([-3.0, 0.0]), 0.0);
    });
}

#[test]
fn criterion_09_compiled_unit_ball_classifier() {
    criterion(9, "compiled unit-ball classifier", || {
        let ball = |x: &[f64]| {
            if x.iter().map(|v| v * v).sum::<f64>() <= 1.0 { 1.0 } else { 0.0 }
        };
        let t = discretize(&ball, &[-1.5, -1.5], &[1.5, 1.5], 0.05).unwrap();
        // Narrow transition width so no test sample lands inside a ramp
        // strip, but not so narrow that the staircase folds amplify plateau
        // roundoff past the decision margin. Seed 11 keeps every tested
        // sample at least 5e-5 from the nearest grid line.
        let delta = 1e-5;
        let (net, _) = compile_nd(&t, delta).unwrap();
        let pts = sample_decision_boundary(
            |x, y| net.eval_unchecked(&[x, y]) - 0.5,
            2000,
            1.5,
            11,
        );
        let mut tested = 0;
        for &(x, y, positive) in &pts {
            let r = (x * x + y * y).sqrt();
            if r <= 0.9 || r >= 1.1 {
                // Guard: the sample must sit clear of every grid line.
                let clear = [x, y].iter().all(|&c| {
                    let pos = (c + 1.5) / 0.05;
                    (pos - pos.round()).abs() * 0.05 > 2.0 * delta
                });
                assert!(clear, "sample on a grid line; pick another seed");
                tested += 1;
                assert_eq!(positive, r <= 1.0, "misclassified ({x}, {y})");
            }
        }
        assert!(tested > 1000, "too few test points: {tested}");
        let fracs = positivity_probe(
            |x, y| net.eval_unchecked(&[x, y]) - 0.5,
            &[2.01, 2.5, 4.0],
            1000,
            910,
        );
        assert_eq!(fracs, vec![0.0, 0.0, 0.0]);
    });
}

#[test]
fn criterion_10_mutation_sensitivity() {
    criterion(10, "mutation sensitivity", || {
        let t = PiecewiseConstant1D::new(vec![0.3, 1.1, 2.0], vec![0.8, -0.6]).unwrap();
        let (net, trace) = compile_1d(&t, 0.08).unwrap();
        let report = check_conditions_1d(&trace, &t, 500);
        assert!(report.passed(), "clean net must pass");
        let amount = 0.05 * t.sup_norm();
        for index in 0..net.weight_count() {
            for sign in [1.0, -1.0] {
                let mut mutated = trace.clone();
                assert!(mutated.net.perturb_weight(index, sign * amount));
                let report = check_conditions_1d(&mutated, &t, 500);
                assert!(!report.passed(), "weight {index} sign {sign} escaped detection");
            }
        }
    });
}

#[test]
fn criterion_11_training_comparison() {
    criterion(11, "training comparison (qualitative)", || {
        let data = gen_dataset(100, 200, 0);
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::FullyConnectedWidthD, Arch::OneNeuronResNet] {
            for depth in [1usize, 2, 3, 5] {
                let cfg = TrainConfig::new(arch, depth);
                let (model, history) = train(&cfg, &data).unwrap();
                assert_eq!(history.len(), cfg.epochs + 1);
                assert!(history.iter().all(|l| l.is_finite()));
                if arch == Arch::OneNeuronResNet {
                    assert!(
                        history.last().unwrap() < history.first().unwrap(),
                        "resnet depth {depth}: {history:?}"
                    );
                }
                let f = |x: f64, y: f64| model.forward([x, y]);
                let pts = sample_decision_boundary(f, 500, 5.0, 11);
                let tag = format!("{arch:?}-{depth}");
                std::fs::write(dir.path().join(format!("{tag}.csv")), boundary_csv(&pts))
                    .unwrap();
                std::fs::write(dir.path().join(format!("{tag}.ppm")), boundary_ppm(f, 5.0))
                    .unwrap();
            }
        }
    });
}
