use std::path::Path;
use std::process::{Command, Output};

use igc::engine::{io, BlockKernel};
use igc::permutation::{build_chain, Regime};
use igc::planner::{BlockKind, NetworkRecipe, StageSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn igc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igc"))
        .args(args)
        .current_dir(dir)
        .env("IGC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn write_chain(dir: &Path, name: &str, c: usize, k: &[usize]) {
    let chain = build_chain(c, 9, k, Regime::Separated).unwrap();
    std::fs::write(dir.join(name), chain.to_json()).unwrap();
}

#[test]
fn plan_ranks_balanced_design_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = igc(
        &[
            "plan",
            "--channels",
            "144",
            "--spatial",
            "9",
            "--regime",
            "separated",
            "--depth",
            "3",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(
        v["candidates"][0]["branch_widths"],
        serde_json::json!([1, 12, 12])
    );
    assert_eq!(v["candidates"][0]["params"], 4752);
    assert_eq!(v["best_depth"], 7);
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn plan_prime_width_has_only_trivial_factorizations() {
    let dir = tempfile::tempdir().unwrap();
    let out = igc(&["plan", "--channels", "7", "--depth", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let cands = v["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 1);
    assert_eq!(cands[0]["branch_widths"], serde_json::json!([1, 7]));
}

#[test]
fn plan_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = igc(&["plan", "--channels", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = igc(&["plan", "--channels", "8", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = igc(
        &[
            "plan",
            "--channels",
            "8",
            "--depth",
            "2",
            "--branch-width",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = igc(&["plan", "--channels", "7", "--depth", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "structural");
    let out = igc(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), "good.json", 64, &[1, 8, 8]);
    let out = igc(&["verify", "good.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["pass"], true);

    let broken = build_chain(64, 9, &[1, 8, 8], Regime::Separated)
        .unwrap()
        .with_identity_interleaves();
    std::fs::write(dir.path().join("bad.json"), broken.to_json()).unwrap();
    let out = igc(&["verify", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v = stdout_json(&out);
    assert!(v["covered_fraction"].as_f64().unwrap() < 1.0);
    let out = igc(&["verify", "bad.json", "--loose"], dir.path());
    assert_eq!(out.status.code(), Some(0));

    let single =
        igc::structure::FactorChain::single(igc::structure::GroupConvSpec::dense(8, 8, 9).unwrap())
            .unwrap();
    std::fs::write(dir.path().join("single.json"), single.to_json()).unwrap();
    assert_eq!(
        igc(&["verify", "single.json"], dir.path()).status.code(),
        Some(0)
    );

    std::fs::write(dir.path().join("junk.json"), "{\"version\": 1}").unwrap();
    let out = igc(&["verify", "junk.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "json");
}

#[test]
fn compose_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), "chain.json", 16, &[1, 4, 4]);
    let chain = build_chain(16, 9, &[1, 4, 4], Regime::Separated).unwrap();
    let kernel = BlockKernel::<f64>::random(&chain, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    std::fs::write(dir.path().join("raw.bin"), io::encode_weights(&kernel)).unwrap();
    std::fs::write(
        dir.path().join("k.kernel"),
        io::encode_block_kernel(&chain, &kernel).unwrap(),
    )
    .unwrap();

    for (src, out) in [
        ("raw.bin", "a.kernel"),
        ("raw.bin", "b.kernel"),
        ("k.kernel", "c.kernel"),
    ] {
        let o = igc(&["compose", "chain.json", src, "--out", out], dir.path());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let a = std::fs::read(dir.path().join("a.kernel")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.kernel")).unwrap());
    assert_eq!(a, std::fs::read(dir.path().join("c.kernel")).unwrap());
    let dense = io::decode_dense_kernel::<f64>(&a).unwrap();
    assert_eq!(
        dense,
        igc::engine::compose_dense_kernel(&chain, &kernel).unwrap()
    );

    std::fs::write(dir.path().join("short.bin"), [0u8; 24]).unwrap();
    let o = igc(
        &["compose", "chain.json", "short.bin", "--out", "x.kernel"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn count_reports_xception_block() {
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), "x.json", 64, &[1, 64]);
    let out = igc(&["count", "x.json", "--input-size", "32,32"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["params"], 4672);
    assert_eq!(v["flops"], 4_784_128);

    let recipe = NetworkRecipe::cifar(BlockKind::Xception, 35, 8, 100, None).unwrap();
    std::fs::write(dir.path().join("net.json"), recipe.to_json()).unwrap();
    let v = stdout_json(&igc(&["count", "net.json"], dir.path()));
    assert_eq!(
        v["total_params"],
        recipe.count(32, 32).unwrap().total_params
    );

    let out = igc(&["count", "x.json", "--input-size", "32"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_ratio_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), "x.json", 64, &[1, 64]);
    let out = igc(
        &["bench", "x.json", "--input", "1,64,8,8", "--reps", "3"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    assert_eq!(v["theoretical_ratio"], serde_json::json!([73, 576]));
    let out = igc(
        &["bench", "x.json", "--input", "1,64,8,8", "--reps", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = igc(&["bench", "x.json", "--input", "1,32,8,8"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_metrics_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut stage = StageSpec::new(BlockKind::Igcv2, 8, 2, 1);
    stage.branch_widths = Some(vec![2, 4]);
    let recipe = NetworkRecipe::plain(stage, 2, 3);
    std::fs::write(dir.path().join("recipe.json"), recipe.to_json()).unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        r#"{"epochs": 2, "batch_size": 32, "synthetic": {"classes": 2, "samples": 128, "seed": 3}}"#,
    )
    .unwrap();
    let out = igc(
        &[
            "train",
            "recipe.json",
            "synthetic",
            "config.json",
            "--out",
            "m.jsonl",
            "--checkpoints",
            "ck",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines: Vec<Value> = std::fs::read_to_string(dir.path().join("m.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["epoch"], 2);
    assert!(dir.path().join("ck").read_dir().unwrap().next().is_some());

    std::fs::write(dir.path().join("hot.json"), r#"{"epochs": 3, "learning_rate": 1e6, "momentum": 0.0, "synthetic": {"classes": 2, "samples": 64}}"#).unwrap();
    let out = igc(
        &[
            "train",
            "recipe.json",
            "synthetic",
            "hot.json",
            "--out",
            "h.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "diverged");

    std::fs::write(dir.path().join("bad.bin"), [0u8; 100]).unwrap();
    let out = igc(
        &[
            "train",
            "recipe.json",
            "bad.bin",
            "config.json",
            "--out",
            "b.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "ingestion");
}
