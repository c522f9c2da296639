//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line.

use std::io::Write;
use std::time::Instant;

use igc::engine::{
    benchmark, compose_dense_kernel, dense_conv, forward_block, BlockKernel, BlockMode,
    FactorWeights, FeatureMap, Shape,
};
use igc::permutation::{build_chain, Regime};
use igc::planner::{
    balance_check, flop_count, ordered_factorizations, param_count, param_lower_bound, BlockKind,
    NetworkRecipe, StageSpec,
};
use igc::structure::{verify_complementary, GroupConvSpec, Mode, PermutationSpec};
use igc::train::{
    column, finite_diff_check, record_block, synth_dataset, train, BlockVars, Tape, TrainConfig,
    Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, pass: bool, detail: String) {
    let line = format!(
        "criterion {n}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // Raw handle, so the line shows without --nocapture.
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    ((value - target) / target).abs() <= tol
}

fn reference_blocks() -> [(usize, Vec<usize>, u64, f64); 6] {
    [
        (64, vec![1, 64], 4672, 4700.0),
        (96, vec![1, 96], 10080, 10000.0),
        (128, vec![1, 128], 17536, 17000.0),
        (144, vec![1, 12, 12], 4752, 4700.0),
        (256, vec![1, 16, 16], 10496, 10000.0),
        (361, vec![1, 19, 19], 16967, 17000.0),
    ]
}

#[test]
fn criterion_1_block_params() {
    let mut failures = Vec::new();
    for (c, k, want, approx) in reference_blocks() {
        let q = param_count(c, 9, &k).unwrap();
        if q != want || !within(q as f64, approx, 0.05) {
            failures.push(format!("C={c} K={k:?}: {q}"));
        }
    }
    report(
        1,
        failures.is_empty(),
        format!("6 block sizes exact, within 5% {failures:?}"),
    );
}

#[test]
fn criterion_2_block_flops() {
    let mut failures = Vec::new();
    for (c, k, want, _) in reference_blocks() {
        let chain = build_chain(c, 9, &k, Regime::Separated).unwrap();
        let f = flop_count(&chain, 32, 32, 1).unwrap();
        if f != want * 1024 {
            failures.push(format!("C={c}: {f}"));
        }
    }
    let x = flop_count(
        &build_chain(64, 9, &[1, 64], Regime::Separated).unwrap(),
        32,
        32,
        1,
    )
    .unwrap();
    let pass = failures.is_empty() && x == 4_784_128 && within(x as f64, 4.8e6, 0.01);
    report(2, pass, format!("xception C=64 {x} flops {failures:?}"));
}

#[test]
fn criterion_3_jensen_bound() {
    let start = Instant::now();
    let (mut tuples, mut equalities, mut violations) = (0usize, 0usize, Vec::new());
    for c in 1..=64usize {
        for l in 1..=5usize {
            for s in [1usize, 9] {
                let bound = param_lower_bound(c, s, l);
                for regime in [Regime::Coupled, Regime::Separated] {
                    for k in ordered_factorizations(c, l) {
                        if regime == Regime::Separated && k[0] != 1 {
                            continue;
                        }
                        tuples += 1;
                        let q = param_count(c, s, &k).unwrap() as f64;
                        // Jensen equality needs S*K_1 = K_2 = ... = K_L in either regime.
                        let balanced = balance_check(s, &k, Regime::Coupled).balanced;
                        let tight = (q - bound).abs() <= 1e-12 * q;
                        if q < bound * (1.0 - 1e-12) || tight != balanced {
                            violations.push(format!("C={c} S={s} K={k:?} Q={q} bound={bound}"));
                        }
                        equalities += usize::from(balanced);
                    }
                }
            }
        }
    }
    report(
        3,
        violations.is_empty(),
        format!(
            "{tuples} tuples, {equalities} at equality, {} violations {:?} in {:.2?}",
            violations.len(),
            violations.iter().take(3).collect::<Vec<_>>(),
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_4_exactly_one_path() {
    let start = Instant::now();
    let (mut chains, mut failures) = (0usize, Vec::new());
    for c in 1..=64usize {
        for l in 1..=5usize {
            for regime in [Regime::Coupled, Regime::Separated] {
                for k in ordered_factorizations(c, l) {
                    if regime == Regime::Separated && k[0] != 1 {
                        continue;
                    }
                    chains += 1;
                    let chain = build_chain(c, 9, &k, regime).unwrap();
                    let r = verify_complementary(&chain, Mode::Strict).unwrap();
                    if !(r.pass && r.min_paths == 1 && r.max_paths == 1) {
                        failures.push(format!("C={c} K={k:?} {regime:?}"));
                    }
                }
            }
        }
    }
    report(
        4,
        failures.is_empty(),
        format!(
            "{chains} chains, {} failures {:?} in {:.2?}",
            failures.len(),
            failures.first(),
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_5_dense_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut cases) = (0.0f64, 0usize);
    while cases < 120 {
        let c = rng.gen_range(2..=32usize);
        let l = rng.gen_range(1..=4usize);
        let regime = if rng.gen_bool(0.5) {
            Regime::Coupled
        } else {
            Regime::Separated
        };
        let tuples: Vec<Vec<usize>> = ordered_factorizations(c, l)
            .into_iter()
            .filter(|k| regime == Regime::Coupled || k[0] == 1)
            .collect();
        let Some(k) = tuples.choose(&mut rng) else {
            continue;
        };
        let s = *[1usize, 9].choose(&mut rng).unwrap();
        let chain = build_chain(c, s, k, regime).unwrap();
        let kernel = BlockKernel::<f64>::random(&chain, &mut rng).unwrap();
        let dense = compose_dense_kernel(&chain, &kernel).unwrap();
        let side = rng.gen_range(1..=8usize);
        let x = FeatureMap::random(Shape::new(rng.gen_range(1..=2), c, side, side), &mut rng);
        let stride = rng.gen_range(1..=2usize);
        let a = forward_block(&x, &chain, &kernel, BlockMode::Linear, stride).unwrap();
        let b = dense_conv(&x, &dense, stride).unwrap();
        worst = worst.max(a.max_relative_error(&b));
        cases += 1;
    }
    report(
        5,
        worst < 1e-10,
        format!(
            "{cases} random chains, max relative error {worst:.2e} in {:.2?}",
            start.elapsed()
        ),
    );
}

fn rand_column(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> FeatureMap<f64> {
    column((0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, spec: &GroupConvSpec) -> FeatureMap<f64> {
    column(
        FactorWeights::<f64>::random(spec.clone(), rng, 0.5)
            .unwrap()
            .data()
            .to_vec(),
    )
    .unwrap()
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> igc::Result<Var>>;
type Case = (String, Vec<FeatureMap<f64>>, LossFn);

/// `(name, params, loss)` cases for one seed; the first group is linear in
/// every parameter, the second is not.
fn gradient_cases(seed: u64) -> (Vec<Case>, Vec<Case>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut linear: Vec<Case> = Vec::new();
    let mut nonlinear: Vec<Case> = Vec::new();
    let shape = Shape::new(2, 8, 5, 5);

    let specs = [
        GroupConvSpec::depthwise(8, 9).unwrap(),
        GroupConvSpec::pointwise(8, 4).unwrap(),
        GroupConvSpec::new(8, 12, 2, 9).unwrap(),
        GroupConvSpec::loose(8, 8, 3, 3, 1).unwrap(),
    ];
    for spec in specs {
        let stride = rng.gen_range(1..=2);
        let probe_shape = Shape::new(
            2,
            spec.channels_out,
            5usize.div_ceil(stride),
            5usize.div_ceil(stride),
        );
        let probe = FeatureMap::random(probe_shape, &mut rng);
        let params = vec![
            FeatureMap::random(shape, &mut rng),
            weights(&mut rng, &spec),
        ];
        let name = format!(
            "conv G={} S={} stride {stride}",
            spec.branches, spec.spatial_taps
        );
        linear.push((
            name,
            params,
            Box::new(move |t, v| {
                let y = t.conv(v[0], v[1], &spec, stride)?;
                t.dot(y, &probe)
            }),
        ));
    }

    let mut map: Vec<usize> = (0..8).collect();
    map.shuffle(&mut rng);
    let perm = PermutationSpec::new(map).unwrap();
    let probe = FeatureMap::random(shape, &mut rng);
    linear.push((
        "permute".into(),
        vec![FeatureMap::random(shape, &mut rng)],
        Box::new(move |t, v| {
            let y = t.permute(v[0], &perm)?;
            t.dot(y, &probe)
        }),
    ));

    let probe = FeatureMap::random(shape, &mut rng);
    linear.push((
        "affine".into(),
        vec![
            FeatureMap::random(shape, &mut rng),
            rand_column(&mut rng, 8, 0.5, 1.5),
            rand_column(&mut rng, 8, -1.0, 1.0),
        ],
        Box::new(move |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            t.dot(y, &probe)
        }),
    ));

    let probe = FeatureMap::random(Shape::new(2, 3, 1, 1), &mut rng);
    linear.push((
        "pool+linear".into(),
        vec![
            FeatureMap::random(shape, &mut rng),
            rand_column(&mut rng, 24, -1.0, 1.0),
            rand_column(&mut rng, 3, -1.0, 1.0),
        ],
        Box::new(move |t, v| {
            let p = t.pool(v[0])?;
            let y = t.linear(p, v[1], v[2])?;
            t.dot(y, &probe)
        }),
    ));

    let probe = FeatureMap::random(shape, &mut rng);
    linear.push((
        "add".into(),
        vec![
            FeatureMap::random(shape, &mut rng),
            FeatureMap::random(shape, &mut rng),
        ],
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            t.dot(y, &probe)
        }),
    ));

    // Nonlinear: relu, batch norm, softmax cross-entropy, the full block.
    let probe = FeatureMap::random(shape, &mut rng);
    nonlinear.push((
        "relu".into(),
        vec![FeatureMap::random(shape, &mut rng)],
        Box::new(move |t, v| {
            let y = t.relu(v[0]);
            t.dot(y, &probe)
        }),
    ));

    let probe = FeatureMap::random(shape, &mut rng);
    nonlinear.push((
        "batch norm".into(),
        vec![
            FeatureMap::random(shape, &mut rng),
            rand_column(&mut rng, 8, 0.5, 1.5),
            rand_column(&mut rng, 8, -1.0, 1.0),
        ],
        Box::new(move |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2])?;
            t.dot(y, &probe)
        }),
    ));

    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    nonlinear.push((
        "cross entropy".into(),
        vec![FeatureMap::random(Shape::new(4, 5, 1, 1), &mut rng)],
        Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
    ));

    let chain = build_chain(8, 9, &[1, 2, 4], Regime::Separated).unwrap();
    let depth = chain.depth();
    let mut params: Vec<FeatureMap<f64>> = chain
        .factors()
        .iter()
        .map(|f| weights(&mut rng, f))
        .collect();
    for f in chain.factors() {
        params.push(rand_column(&mut rng, f.channels_out, 0.5, 1.5));
        params.push(rand_column(&mut rng, f.channels_out, -0.3, 0.3));
    }
    let x = FeatureMap::random(shape, &mut rng);
    params.push(x);
    let stride = rng.gen_range(1..=2);
    let probe = FeatureMap::random(
        Shape::new(2, 8, 5usize.div_ceil(stride), 5usize.div_ceil(stride)),
        &mut rng,
    );
    nonlinear.push((
        format!("nonlinear block stride {stride}"),
        params,
        Box::new(move |t, v| {
            let vars = BlockVars {
                weights: v[..depth].to_vec(),
                affine: Some(
                    (0..depth)
                        .map(|l| (v[depth + 2 * l], v[depth + 2 * l + 1]))
                        .collect(),
                ),
            };
            let y = record_block(
                t,
                v[3 * depth],
                &chain,
                &vars,
                BlockMode::NonlinearIgcv2,
                stride,
            )?;
            t.dot(y, &probe)
        }),
    ));
    (linear, nonlinear)
}

/// Input gradient through the factorized block equals the one through the
/// composed dense kernel.
fn chain_rule_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let chain = build_chain(12, 9, &[1, 3, 4], Regime::Separated).unwrap();
    let kernel = BlockKernel::<f64>::random(&chain, &mut rng).unwrap();
    let dense = compose_dense_kernel(&chain, &kernel).unwrap();
    let x = FeatureMap::random(Shape::new(2, 12, 6, 6), &mut rng);

    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let vars = BlockVars {
        weights: kernel
            .factors
            .iter()
            .map(|w| t.leaf(column(w.data().to_vec()).unwrap()))
            .collect(),
        affine: None,
    };
    let y = record_block(&mut t, xv, &chain, &vars, BlockMode::Linear, 1).unwrap();
    let loss = t.half_squared_norm(y).unwrap();
    let factored = t.backward(loss).unwrap().dense(xv, x.shape());

    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let spec = GroupConvSpec::dense(12, 12, 9).unwrap();
    let w = t.leaf(column(dense.data.clone()).unwrap());
    let y = t.conv(xv, w, &spec, 1).unwrap();
    let loss = t.half_squared_norm(y).unwrap();
    let composed = t.backward(loss).unwrap().dense(xv, x.shape());
    factored.max_relative_error(&composed)
}

#[test]
fn criterion_6_gradient_checks() {
    let start = Instant::now();
    let (mut worst_linear, mut worst_nonlinear, mut worst_chain) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    let seeds = 20;
    for seed in 0..seeds {
        let (linear, nonlinear) = gradient_cases(seed);
        for (group, tol, worst) in [
            (linear, 1e-6, &mut worst_linear),
            (nonlinear, 1e-5, &mut worst_nonlinear),
        ] {
            for (name, params, loss) in group {
                let r = finite_diff_check(&params, loss, tol).unwrap();
                *worst = worst.max(r.max_relative_error);
                if !r.pass {
                    failures.push(format!("seed {seed} {name}: {:.2e}", r.max_relative_error));
                }
            }
        }
        worst_chain = worst_chain.max(chain_rule_error(seed));
    }
    let pass = failures.is_empty() && worst_chain < 1e-8;
    report(
        6,
        pass,
        format!(
            "{seeds} seeds, linear max {worst_linear:.2e}, nonlinear max {worst_nonlinear:.2e}, \
             factored vs composed input gradient {worst_chain:.2e}, failures {failures:?} in {:.2?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_7_trainability() {
    let start = Instant::now();
    let mut stage = StageSpec::new(BlockKind::Igcv2, 16, 6, 1);
    stage.branch_widths = Some(vec![4, 4]);
    stage.nonlinear = true;
    let recipe = NetworkRecipe::plain(stage, 2, 3);
    let seed = 0;
    let data = synth_dataset(2, 2000, seed).unwrap();
    let config = TrainConfig {
        epochs: 30,
        batch_size: 64,
        seed,
        target_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let run = || train(&recipe, &data, &config, None, |_| Ok(())).unwrap();
    let first = run();
    let second = run();
    let last = first.metrics.last().unwrap();
    let deterministic = first.metrics == second.metrics
        && first
            .network
            .params()
            .iter()
            .zip(second.network.params())
            .all(|(a, b)| a.values == b.values);
    report(
        7,
        last.train_acc >= 0.95 && last.epoch <= 30 && deterministic,
        format!(
            "train accuracy {:.4} after {} epochs, deterministic {deterministic}, {:.1?} for two runs",
            last.train_acc,
            last.epoch,
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_8_network_budgets() {
    let c416 = NetworkRecipe::cifar(BlockKind::Igcv2Star, 416, 20, 10, Some(8))
        .unwrap()
        .count(32, 32)
        .unwrap();
    let x35 = NetworkRecipe::cifar(BlockKind::Xception, 35, 8, 100, None)
        .unwrap()
        .count(32, 32)
        .unwrap();
    let a = c416.total_params as f64;
    let b = x35.total_params as f64;
    report(
        8,
        within(a, 0.65e6, 0.10) && within(b, 0.056e6, 0.10),
        format!(
            "IGCV2*-C416/D20 {} ({:+.1}% of 0.65M), Xception-C35/D8 {} ({:+.1}% of 0.056M)",
            c416.total_params,
            100.0 * (a / 0.65e6 - 1.0),
            x35.total_params,
            100.0 * (b / 0.056e6 - 1.0)
        ),
    );
}

fn reduced(a: u64, b: u64) -> [u64; 2] {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    [a / x, b / x]
}

#[test]
fn criterion_9_benchmark_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut lines = Vec::new();
    let mut pass = true;
    for (c, k) in [
        (64, vec![1, 64]),
        (64, vec![1, 8, 8]),
        (256, vec![1, 256]),
        (256, vec![1, 16, 16]),
    ] {
        let chain = build_chain(c, 9, &k, Regime::Separated).unwrap();
        let kernel = BlockKernel::<f32>::random(&chain, &mut rng).unwrap();
        let side = if c == 256 { 16 } else { 32 };
        let r = benchmark(&chain, &kernel, Shape::new(1, c, side, side), 1, 3).unwrap();
        let factored = flop_count(&chain, side, side, 1).unwrap();
        let dense = (c * c * 9 * side * side) as u64;
        let exact = r.factorized_flops == factored
            && r.dense_flops == dense
            && r.theoretical_ratio == reduced(factored, dense)
            && r.theoretical_ratio_value == factored as f64 / dense as f64;
        pass &= exact && r.factorized_seconds > 0.0 && r.dense_seconds > 0.0;
        lines.push(format!(
            "C={c} K={k:?}: flops {}/{} exact {exact}, time {:.2}ms vs {:.2}ms (ratio {:.3})",
            r.theoretical_ratio[0],
            r.theoretical_ratio[1],
            r.factorized_seconds * 1e3,
            r.dense_seconds * 1e3,
            r.time_ratio
        ));
    }
    report(9, pass, lines.join("; "));
}
