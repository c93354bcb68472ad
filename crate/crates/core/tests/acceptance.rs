//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use prism::ablation::{ablate, Section, ROWS};
use prism::checkpoint;
use prism::data::{generate_dataset, PairedSample, RainConfig};
use prism::pipeline::{PipelineConfig, Prism};
use prism::train::{evaluate, train, TrainConfig};
use prism::verify::{self, Options, Prim, SuiteReport};
use sha2::{Digest, Sha256};

const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);

enum Outcome {
    Pass(String),
    Fail(String),
    NotApplicable(String),
}

struct Checks<'a> {
    reports: &'a [SuiteReport],
    problems: Vec<String>,
}

impl<'a> Checks<'a> {
    fn new(reports: &'a [SuiteReport]) -> Self {
        Self {
            reports,
            problems: Vec::new(),
        }
    }

    /// Requires a passing check whose tolerance is no looser than `tol`.
    fn require(&mut self, name: &str, tol: f64) {
        match self.reports.iter().find_map(|r| r.get(name)) {
            None => self.problems.push(format!("{name} not run")),
            Some(c) if !c.passed => self.problems.push(format!("{name} failed: {c}")),
            Some(c) if c.tolerance > tol => self
                .problems
                .push(format!("{name} tolerance {:.1e} looser than {tol:.1e}", c.tolerance)),
            Some(_) => {}
        }
    }

    fn coords(&self, name: &str) -> Option<usize> {
        let c = self.reports.iter().find_map(|r| r.get(name))?;
        c.detail.split(' ').next()?.parse().ok()
    }

    fn finish(self, ok: String) -> Outcome {
        if self.problems.is_empty() {
            Outcome::Pass(ok)
        } else {
            Outcome::Fail(self.problems.join("; "))
        }
    }
}

fn gradient_integrity(reports: &[SuiteReport], elapsed: Duration) -> Outcome {
    let mut c = Checks::new(reports);
    let prims: Vec<String> = Prim::ALL.iter().map(|p| format!("grad.{}", p.name())).collect();
    for name in &prims {
        c.require(name, 1e-3);
    }
    let blocks = [
        "ha_block",
        "spatial_branch",
        "wavelet_branch",
        "hdmamba_block",
        "cenet",
        "sfnet",
        "rnet",
        "global_loss",
    ];
    let mut fewest = usize::MAX;
    for b in blocks {
        let name = format!("grad.{b}");
        c.require(&name, 1e-3);
        match c.coords(&name) {
            Some(n) if n >= 30 => fewest = fewest.min(n),
            n => c.problems.push(format!("{name} sampled {n:?} coordinates, need 30")),
        }
    }
    if elapsed >= GRAD_BUDGET {
        c.problems.push(format!("verification took {:.0}s", elapsed.as_secs_f64()));
    }
    c.finish(format!(
        "{} primitives and {} blocks within 1e-3, at least {fewest} coordinates per block, {:.1}s",
        prims.len(),
        blocks.len(),
        elapsed.as_secs_f64()
    ))
}

fn oracle_equivalence(reports: &[SuiteReport]) -> Outcome {
    let mut c = Checks::new(reports);
    c.require("ssm.scan_naive_oracle", 1e-6);
    c.require("wavelet.dwt_separable_oracle", 1e-5);
    c.require("wavelet.perfect_reconstruction", 1e-5);
    c.require("attention.wattn_dense_oracle", 1e-5);
    c.require("wavelet.energy_preserved", 1e-4);
    c.finish("scan at lengths 1/7/64/256, DWT oracle and reconstruction, dense attention, DWT energy".into())
}

fn loss_identities(reports: &[SuiteReport]) -> Outcome {
    let mut c = Checks::new(reports);
    c.require("losses.charbonnier_equal_is_eps", 1e-9);
    c.require("losses.edge_shift_invariant", 1e-6);
    c.require("losses.wavelet_equal_is_zero", 1e-12);
    c.require("losses.global_identity_total", 1e-6);
    c.finish("Charbonnier floor, edge shift invariance, zero wavelet loss, global total 0.00315".into())
}

fn structural(reports: &[SuiteReport]) -> Outcome {
    let mut c = Checks::new(reports);
    c.require("hdmamba.fuse_convex", 1e-12);
    c.require("ssm.hard_routing_one_hot", 0.0);
    c.require("ssm.reorder_roundtrip", 0.0);
    c.require("pipeline.zero_head_identity", 1e-6);
    c.require("pipeline.all_heads_zero_identity", 1e-6);
    c.finish("fusion on 1000 triples, one-hot routing, 100 reorder roundtrips, zero-head identity".into())
}

struct ToyRun {
    initial: f64,
    last: f64,
    psnr_rainy: f64,
    psnr_restored: f64,
    elapsed: Duration,
}

fn train_once(train_pairs: &[PairedSample], held_out: &[PairedSample], cfg: &TrainConfig, ckpt: &Path) -> prism::Result<ToyRun> {
    let start = Instant::now();
    let (model, mut store) = Prism::build(PipelineConfig::tiny(), cfg.seed)?;
    let hist = train(&model, &mut store, train_pairs, cfg, None)?;
    let elapsed = start.elapsed();
    checkpoint::save(ckpt, &store, Some(cfg.seed))?;
    let eval = evaluate(&model, &store, held_out)?;
    Ok(ToyRun {
        initial: hist.first().map_or(f64::NAN, |b| b.total),
        last: hist.last().map_or(f64::NAN, |b| b.total),
        psnr_rainy: eval.psnr_rainy,
        psnr_restored: eval.psnr_restored,
        elapsed,
    })
}

fn toy_training(run: &prism::Result<ToyRun>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("training error: {e}")),
    };
    let ratio = run.last / run.initial;
    let gain = run.psnr_restored - run.psnr_rainy;
    let text = format!(
        "loss {:.4} -> {:.4} (ratio {ratio:.3}), held-out PSNR {:.2} -> {:.2} dB (gain {gain:.2}), {:.1}s",
        run.initial,
        run.last,
        run.psnr_rainy,
        run.psnr_restored,
        run.elapsed.as_secs_f64()
    );
    if ratio <= 0.5 && gain >= 0.5 && run.elapsed <= TRAIN_BUDGET {
        Outcome::Pass(text)
    } else {
        Outcome::Fail(text)
    }
}

fn digest(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    match (digest(first), digest(second)) {
        (Ok(a), Ok(b)) if a == b => Outcome::Pass(format!("both checkpoints hash to {}", &a[..16])),
        (Ok(a), Ok(b)) => Outcome::Fail(format!("hashes differ: {} vs {}", &a[..16], &b[..16])),
        (a, b) => Outcome::Fail(format!("could not hash checkpoints: {:?} {:?}", a.err(), b.err())),
    }
}

fn ablation(train_pairs: &[PairedSample], held_out: &[PairedSample], cfg: &TrainConfig) -> Outcome {
    match ablate(PipelineConfig::tiny(), cfg, train_pairs, held_out) {
        Ok(table) => {
            println!("{table}");
            let labels_match = table
                .rows
                .iter()
                .zip(ROWS)
                .all(|(r, (s, l, v))| r.section == s && r.label == l && r.variant == v);
            let finite = table
                .rows
                .iter()
                .all(|r| r.final_loss.is_finite() && r.eval.psnr_restored.is_finite());
            let stage = table.rows.iter().filter(|r| r.section == Section::Stage).count();
            let text = format!(
                "{} rows ({stage} stage, {} module), every variant trained",
                table.rows.len(),
                table.rows.len() - stage
            );
            if table.rows.len() == 7 && labels_match && finite {
                Outcome::Pass(text)
            } else {
                Outcome::Fail(text)
            }
        }
        Err(e) => Outcome::Fail(format!("ablation error: {e}")),
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let rain = RainConfig {
        seed: 1,
        ..RainConfig::default()
    };
    let pairs = generate_dataset(12, 32, 32, &rain, dir.path())
        .and_then(|m| m.load_all())
        .expect("synthetic dataset");
    let (train_pairs, held_out) = pairs.split_at(8);
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 2,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let reports = verify::run("all", &Options::default()).expect("verification suites");
    let verify_elapsed = start.elapsed();

    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    let run = train_once(train_pairs, held_out, &cfg, &first);
    let rerun = train_once(train_pairs, held_out, &cfg, &second);

    let outcomes = [
        (
            "headline benchmark reproduction",
            Outcome::NotApplicable("requires the full mixed training set and GPU-scale training; criteria 2-8 substitute".into()),
        ),
        ("gradient integrity", gradient_integrity(&reports, verify_elapsed)),
        ("oracle equivalence", oracle_equivalence(&reports)),
        ("loss identities", loss_identities(&reports)),
        ("toy training", toy_training(&run)),
        ("structural invariants", structural(&reports)),
        (
            "determinism",
            match rerun {
                Ok(_) => determinism(&first, &second),
                Err(e) => Outcome::Fail(format!("second run failed: {e}")),
            },
        ),
        ("ablation harness", ablation(train_pairs, held_out, &cfg)),
    ];

    let mut failed = 0;
    for (i, (name, outcome)) in outcomes.iter().enumerate() {
        let (tag, text) = match outcome {
            Outcome::Pass(t) => ("PASS", t),
            Outcome::Fail(t) => {
                failed += 1;
                ("FAIL", t)
            }
            Outcome::NotApplicable(t) => ("N/A ", t),
        };
        println!("{tag} criterion {} {name}: {text}", i + 1);
    }
    println!("acceptance: {} of {} criteria failed", failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
