use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prism::data::{background, list_pngs, load_image, save_image, Manifest};
use prism::metrics::{psnr_y, ssim_y};
use tempfile::TempDir;

fn prism(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn gen_data(dir: &Path, count: usize, size: usize) -> std::path::PathBuf {
    let o = prism(&[
        "gen-data",
        "--out",
        arg(dir),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("manifest.csv")
}

#[test]
fn verify_single_suite_succeeds() {
    let o = prism(&["verify", "--suite", "wavelet"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("PASS wavelet.perfect_reconstruction"));
    assert!(out.contains("checklist:"));
}

#[test]
fn corrupted_backward_is_caught() {
    let o = prism(&["verify", "--suite", "tensor", "--corrupt-backward", "exp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL grad.exp"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(prism(&["verify", "--suite", "nonsense"]).status.code(), Some(2));
    assert_eq!(prism(&["--set", "bogus_key=1", "train"]).status.code(), Some(2));
    assert_eq!(prism(&["train"]).status.code(), Some(2));
}

#[test]
fn gen_data_writes_pairs() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(dir.path(), 3, 16);
    let m = Manifest::read(&manifest).unwrap();
    assert_eq!(m.len(), 3);
    for pair in m.load_all().unwrap() {
        assert_eq!(pair.rainy.shape(), &[3, 16, 16]);
    }
}

#[test]
fn train_then_derain_round_trip() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 2, 16);
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("loss.csv");
    let sets = [
        format!("manifest={}", manifest.display()),
        format!("checkpoint={}", ckpt.display()),
        format!("loss_log={}", log.display()),
        "steps=3".to_string(),
        "batch_size=1".to_string(),
    ];
    let mut args: Vec<&str> = sets.iter().flat_map(|s| ["--set", s.as_str()]).collect();
    args.push("train");
    let o = prism(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(&log).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.starts_with("step,stage1_char,stage1_edge,stage2_char,stage2_edge,stage2_wav,stage3_char,stage3_edge,total"));

    let input = dir.path().join("data").join("rainy");
    let output = dir.path().join("out");
    let o = prism(&[
        "--set",
        &sets[1],
        "derain",
        "--input",
        arg(&input),
        "--output",
        arg(&output),
        "--all-stages",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n_in = list_pngs(&input).unwrap().len();
    assert_eq!(list_pngs(&output).unwrap().len(), n_in);
    for s in 1..=3 {
        assert_eq!(list_pngs(&output.join(format!("stage{s}"))).unwrap().len(), n_in);
    }
}

#[test]
fn metrics_of_identical_dirs() {
    let dir = TempDir::new().unwrap();
    for i in 0..2 {
        save_image(&dir.path().join(format!("{i}.png")), &background(16, 16, i)).unwrap();
    }
    let csv = dir.path().join("m.csv");
    let o = prism(&["metrics", "--pred", arg(dir.path()), "--gt", arg(dir.path()), "--csv", arg(&csv)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PSNR 100.0000 dB, SSIM 1.000000"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn metrics_match_library_on_fixture() {
    let dir = TempDir::new().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    for i in 0..3u64 {
        let clean = background(16, 16, i);
        let noisy = clean.map(|v| (v + 0.05 * ((v * 97.0 + i as f32).sin())).clamp(0.0, 1.0));
        save_image(&gt.join(format!("img{i}.png")), &clean).unwrap();
        save_image(&pred.join(format!("img{i}.png")), &noisy).unwrap();
    }
    save_image(&pred.join("extra.png"), &background(16, 16, 9)).unwrap();
    let csv = dir.path().join("m.csv");
    let o = prism(&["metrics", "--pred", arg(&pred), "--gt", arg(&gt), "--csv", arg(&csv)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("file,psnr_y,ssim_y"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let (a, b) = (load_image(&pred.join(f[0])).unwrap(), load_image(&gt.join(f[0])).unwrap());
        let psnr: f64 = f[1].parse().unwrap();
        let ssim: f64 = f[2].parse().unwrap();
        assert!((psnr - psnr_y(&a, &b).unwrap()).abs() < 1e-5, "{row}");
        assert!((ssim - ssim_y(&a, &b).unwrap()).abs() < 1e-5, "{row}");
    }
}

#[test]
fn metrics_with_nothing_matched_fails() {
    let dir = TempDir::new().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    save_image(&pred.join("a.png"), &background(16, 16, 0)).unwrap();
    save_image(&gt.join("b.png"), &background(16, 16, 0)).unwrap();
    assert_eq!(prism(&["metrics", "--pred", arg(&pred), "--gt", arg(&gt)]).status.code(), Some(1));
}

#[test]
fn ablate_prints_seven_rows() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(dir.path(), 3, 16);
    let set = format!("manifest={}", manifest.display());
    let o = prism(&[
        "--set",
        &set,
        "--set",
        "steps=2",
        "--set",
        "batch_size=1",
        "ablate",
        "--held-out",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let rows: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("stage ") || l.starts_with("module "))
        .collect();
    assert_eq!(rows.len(), 7, "{out}");
    let mut params: Vec<u64> = rows[..6].iter().map(|l| l[36..45].trim().parse().unwrap()).collect();
    params.sort_unstable();
    params.dedup();
    assert_eq!(params.len(), 6, "{out}");
}

#[test]
fn zero_head_checkpoint_derains_to_input() {
    use prism::config::RunConfig;
    use prism::pipeline::Prism;

    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::default();
    let (model, mut store) = Prism::build(cfg.pipeline(), cfg.seed).unwrap();
    for p in model.head_prefixes() {
        store.zero_prefix(p);
    }
    let ckpt = dir.path().join("zero.ckpt");
    prism::checkpoint::save(&ckpt, &store, Some(cfg.seed)).unwrap();
    let input = dir.path().join("in");
    for i in 0..2 {
        save_image(&input.join(format!("{i}.png")), &background(16, 24, i)).unwrap();
    }
    let output = dir.path().join("out");
    let o = prism(&[
        "derain",
        "--checkpoint",
        arg(&ckpt),
        "--input",
        arg(&input),
        "--output",
        arg(&output),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for path in list_pngs(&input).unwrap() {
        let restored = load_image(&output.join(path.file_name().unwrap())).unwrap();
        assert_eq!(restored, load_image(&path).unwrap());
    }
}
