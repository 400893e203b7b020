use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn msvox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msvox"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msvox(args);
    assert!(
        out.status.success(),
        "msvox {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .unwrap_or_else(|| panic!("not key=value: {l:?}"));
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A one-scale bundle (16³ blocks) trained briefly on synthetic planes.
fn small_bundle(dir: &TempDir, name: &str, seed: &str) -> PathBuf {
    let out = p(dir, name);
    ok(&[
        "train",
        "--synthetic",
        "plane",
        "--count",
        "3",
        "--epochs",
        "2",
        "--num-scales",
        "1",
        "--seed",
        seed,
        "--out",
        s(&out),
    ]);
    out
}

/// A small integer cloud spanning a few 16³ blocks on a 64³ grid.
fn write_cloud(path: &Path) -> usize {
    let mut pts = Vec::new();
    for x in 0..40u32 {
        for y in 0..40u32 {
            let z = (x + 2 * y) / 5 + 3;
            pts.push((x, y, z));
        }
    }
    let mut text = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pts.len()
    );
    for (x, y, z) in &pts {
        text.push_str(&format!("{x} {y} {z}\n"));
    }
    std::fs::write(path, text).unwrap();
    pts.len()
}

#[test]
fn encode_decode_round_trip_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let bundle = small_bundle(&dir, "b.msvb", "1");
    let input = p(&dir, "in.ply");
    let points = write_cloud(&input);

    // Canonicalize the input through voxelize (integer pass-through).
    let canon = p(&dir, "canon.ply");
    ok(&["voxelize", s(&input), "-n", "6", "-o", s(&canon)]);
    let coded = p(&dir, "c.msvx");
    let report = kv(&ok(&[
        "encode",
        s(&canon),
        "--bundle",
        s(&bundle),
        "-o",
        s(&coded),
    ]));
    assert_eq!(report["occupied_voxels"], points.to_string());
    let decoded = p(&dir, "out.ply");
    ok(&[
        "decode",
        s(&coded),
        "--bundle",
        s(&bundle),
        "-o",
        s(&decoded),
    ]);
    assert_eq!(
        std::fs::read(&canon).unwrap(),
        std::fs::read(&decoded).unwrap()
    );

    // stats recomputes the same rate from the file alone.
    let stats = kv(&ok(&["stats", s(&coded), "--bundle", s(&bundle)]));
    let file_bytes: u64 = stats["file_bytes"].parse().unwrap();
    assert_eq!(file_bytes, std::fs::metadata(&coded).unwrap().len());
    let segments: u64 = ["header_bytes", "octree_bytes", "payload_bytes"]
        .iter()
        .map(|k| stats[*k].parse::<u64>().unwrap())
        .sum();
    assert_eq!(segments, file_bytes);
    assert_eq!(stats["bpov"], report["bpov"]);
    assert!(stats.contains_key("octree_percent"));
}

#[test]
fn pruned_mode_round_trips() {
    let dir = TempDir::new().unwrap();
    let bundle = small_bundle(&dir, "b.msvb", "2");
    let input = p(&dir, "in.ply");
    write_cloud(&input);
    let coded = p(&dir, "c.msvx");
    ok(&[
        "encode",
        s(&input),
        "--bundle",
        s(&bundle),
        "-o",
        s(&coded),
        "--prune-empty-parents",
    ]);
    assert_eq!(
        kv(&ok(&["stats", s(&coded)]))["prune_empty_parents"],
        "true"
    );
    let decoded = p(&dir, "out.ply");
    ok(&[
        "decode",
        s(&coded),
        "--bundle",
        s(&bundle),
        "-o",
        s(&decoded),
    ]);
    let canon = p(&dir, "canon.ply");
    ok(&["voxelize", s(&input), "-n", "6", "-o", s(&canon)]);
    assert_eq!(
        std::fs::read(&canon).unwrap(),
        std::fs::read(&decoded).unwrap()
    );
}

#[test]
fn wrong_bundle_exits_with_fingerprint_code() {
    let dir = TempDir::new().unwrap();
    let a = small_bundle(&dir, "a.msvb", "3");
    let b = small_bundle(&dir, "b.msvb", "4");
    let input = p(&dir, "in.ply");
    write_cloud(&input);
    let coded = p(&dir, "c.msvx");
    ok(&["encode", s(&input), "--bundle", s(&a), "-o", s(&coded)]);
    let out = msvox(&[
        "decode",
        s(&coded),
        "--bundle",
        s(&b),
        "-o",
        s(&p(&dir, "x.ply")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn training_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = small_bundle(&dir, "a.msvb", "5");
    let b = small_bundle(&dir, "b.msvb", "5");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let input = p(&dir, "in.ply");
    write_cloud(&input);
    ok(&[
        "encode",
        s(&input),
        "--bundle",
        s(&a),
        "-o",
        s(&p(&dir, "c.msvx")),
    ]);
}

#[test]
fn zero_learning_rate_keeps_the_loss() {
    let dir = TempDir::new().unwrap();
    let curve = p(&dir, "loss.txt");
    ok(&[
        "train",
        "--synthetic",
        "sphere-shell",
        "--count",
        "2",
        "--epochs",
        "3",
        "--num-scales",
        "1",
        "--lr",
        "0",
        "--out",
        s(&p(&dir, "b.msvb")),
        "--loss-curve",
        s(&curve),
    ]);
    let text = std::fs::read_to_string(&curve).unwrap();
    let mut by_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        by_model
            .entry(f[0].into())
            .or_default()
            .push(f[2].parse().unwrap());
    }
    assert_eq!(by_model.len(), 9);
    for (name, losses) in by_model {
        assert_eq!(losses.len(), 3);
        for l in &losses {
            assert!((l - losses[0]).abs() < 1e-5, "{name}: {losses:?}");
        }
    }
}

#[test]
fn bench_reports_counts_and_baseline() {
    let dir = TempDir::new().unwrap();
    let bundle = small_bundle(&dir, "b.msvb", "6");
    let input = p(&dir, "in.ply");
    write_cloud(&input);
    let report = kv(&ok(&[
        "bench",
        s(&input),
        "--bundle",
        s(&bundle),
        "--baseline",
    ]));
    // One scale on 16³ blocks: 8³ base steps plus 8 group passes.
    assert_eq!(report["decode_evals_per_block"], "520");
    assert_eq!(report["per_voxel_evals_per_block"], "4096");
    let blocks: u64 = report["blocks"].parse().unwrap();
    assert_eq!(report["decode_evals"], (520 * blocks).to_string());
    assert!(report.contains_key("baseline.bpov"));
    assert!(report.contains_key("encode_secs"));
}

#[test]
fn voxelize_quantizes_real_coordinates() {
    let dir = TempDir::new().unwrap();
    let input = p(&dir, "real.ply");
    std::fs::write(
        &input,
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nend_header\n\
         -1.5 0 0\n0.5 0.25 2\n2.5 1 1\n",
    )
    .unwrap();
    let out = p(&dir, "vox.ply");
    let summary = kv(&ok(&["voxelize", s(&input), "-n", "2", "-o", s(&out)]));
    assert_eq!(summary["points"], "3");
    let text = std::fs::read_to_string(&out).unwrap();
    let body: Vec<&str> = text
        .lines()
        .skip_while(|l| *l != "end_header")
        .skip(1)
        .collect();
    // Extent 4 maps onto [0, 3] with scale 0.75; output is in raster (z, y, x) order.
    assert_eq!(body, ["0 0 0", "3 1 1", "2 0 2"]);
}

#[test]
fn errors_have_distinct_exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad.ply");
    std::fs::write(
        &bad,
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n",
    )
    .unwrap();
    let out = msvox(&["voxelize", s(&bad), "-n", "4", "-o", s(&p(&dir, "o.ply"))]);
    assert_eq!(out.status.code(), Some(1));

    let junk = p(&dir, "junk.msvx");
    std::fs::write(&junk, b"NOPE0000000000000000000000000").unwrap();
    assert_eq!(msvox(&["stats", s(&junk)]).status.code(), Some(1));

    assert_eq!(msvox(&["encode"]).status.code(), Some(2));
    assert_eq!(msvox(&["train", "--out", "x"]).status.code(), Some(2));
}
