//! Acceptance criteria 1-8. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbcc::experiment::{self, Variant};
use dbcc::oracles::{self, rate_allowance, OracleOptions, OracleReport, Suite};
use dbcc::train::{self, TrainConfig, Trainer};
use dbcc::{imageio, pipeline, synth, CodecNet32, ModelConfig, Tensor32};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn suite_outcome(reports: &[OracleReport]) -> Outcome {
    let failed: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| r.to_string()).collect();
    let worst = reports
        .iter()
        .map(|r| format!("{} {:.3e}", r.id, r.value))
        .collect::<Vec<_>>()
        .join(", ");
    if failed.is_empty() {
        outcome(true, format!("{} cases [{worst}]", reports.len()))
    } else {
        outcome(false, failed.join("; "))
    }
}

/// A random test image: either a procedural scene or uniform noise.
fn random_image(rng: &mut ChaCha8Rng) -> Tensor32 {
    let w = rng.gen_range(16..=200);
    let h = rng.gen_range(16..=200);
    if rng.gen_bool(0.8) {
        imageio::rgb_to_tensor(&synth::scene(w, h, rng.gen()))
    } else {
        Tensor32::uniform(&[3, h as usize, w as usize], 0.0, 1.0, rng)
    }
}

/// Criteria 1 and 2 share the same 100 images.
fn lossless_and_rate() -> (Outcome, Outcome) {
    let net = CodecNet32::new(ModelConfig::desk(0.015), &mut ChaCha8Rng::seed_from_u64(2024)).expect("desk model");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut exact, mut within, mut odd_sizes) = (0, 0, 0);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut errors = Vec::new();
    for i in 0..100 {
        let img = random_image(&mut rng);
        let d = img.dims4().expect("image dims");
        if !d.h.is_multiple_of(64) || !d.w.is_multiple_of(64) {
            odd_sizes += 1;
        }
        let run = || -> dbcc::Result<(bool, f64, f64)> {
            let c = pipeline::compress(&net, &img)?;
            let dec = pipeline::decompress(&net, &c.bytes)?;
            let l = &c.latents;
            let same = dec.z_hat == l.z_hat && dec.y1_hat == l.y1_hat && dec.y2_hat == l.y2_hat && dec.image.shape() == img.shape();
            let (by, bz) = net.estimate_rate(l)?;
            Ok((same, c.payload_bits() as f64, by + bz))
        };
        match run() {
            Ok((same, actual, est)) => {
                exact += same as usize;
                let gap = (actual - est).abs() - rate_allowance(est);
                worst_gap = worst_gap.max(gap);
                within += (gap <= 0.0) as usize;
            }
            Err(e) => errors.push(format!("image {i}: {e}")),
        }
    }
    let c1 = outcome(
        exact == 100,
        format!("{exact}/100 bit-exact latents ({odd_sizes} sizes not multiples of 64){}", errs(&errors)),
    );
    let c2 = outcome(
        within == 100,
        format!("{within}/100 within 2% + 512 bits; worst margin {worst_gap:+.1} bits{}", errs(&errors)),
    );
    (c1, c2)
}

fn errs(e: &[String]) -> String {
    if e.is_empty() {
        String::new()
    } else {
        format!("; errors: {}", e.join("; "))
    }
}

fn training_smoke(data: &[Tensor32], held: &[Tensor32]) -> Outcome {
    let cfg = TrainConfig::desk(0.015, 2000);
    match oracles::smoke_train(cfg, ModelConfig::desk(0.015), data, held, 0) {
        Ok((run, _)) => {
            let ratio = run.final_loss / run.early_loss;
            let gain = run.psnr_after - run.psnr_before;
            outcome(
                ratio <= 0.7 && gain >= 3.0,
                format!(
                    "loss ratio {ratio:.3} (early {:.3}, final {:.3}); held-out PSNR {:.2} -> {:.2} dB ({gain:+.2})",
                    run.early_loss, run.final_loss, run.psnr_before, run.psnr_after
                ),
            )
        }
        Err(e) => outcome(false, format!("training failed: {e}")),
    }
}

/// Iterations per model for the lambda-ordering check.
const ORDER_ITERS: u64 = 600;

fn lambda_ordering(data: &[Tensor32], held: &[Tensor32]) -> Outcome {
    let score = |lambda: f64, seed: u64| -> dbcc::Result<(f64, f64)> {
        let mut cfg = TrainConfig::desk(lambda, ORDER_ITERS);
        cfg.seed = seed;
        let net = CodecNet32::new(ModelConfig::desk(lambda), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut t = Trainer::new(net, cfg)?;
        train::train_loop(&mut t, data, &Default::default(), |_| {})?;
        let scores = held.iter().map(|x| experiment::score_image(&t.net, x)).collect::<dbcc::Result<Vec<_>>>()?;
        let avg = experiment::average(&scores).expect("held-out images");
        Ok((avg.bpp, avg.psnr))
    };
    let mut notes = Vec::new();
    for (attempt, seed) in [(1, 0u64), (2, 1)] {
        match (score(0.0032, seed), score(0.03, seed)) {
            (Ok((b_lo, p_lo)), Ok((b_hi, p_hi))) => {
                let ok = b_hi >= b_lo && p_hi >= p_lo;
                notes.push(format!(
                    "attempt {attempt} (seed {seed}): lambda 0.0032 {b_lo:.4} bpp {p_lo:.2} dB, lambda 0.03 {b_hi:.4} bpp {p_hi:.2} dB"
                ));
                if ok {
                    return outcome(true, notes.join("; "));
                }
            }
            (a, b) => notes.push(format!("attempt {attempt}: {:?} {:?}", a.err(), b.err())),
        }
    }
    outcome(false, notes.join("; "))
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let csv = dir.path().join("ablation.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_dbcc"))
        .args(["ablate", "--variants", "ci,tb,groups", "--iters", "100", "--out"])
        .arg(&csv)
        .output()
        .expect("run dbcc ablate");
    let stdout = String::from_utf8_lossy(&out.stdout);
    if !out.status.success() {
        return outcome(false, format!("ablate exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let text = std::fs::read_to_string(&csv).unwrap_or_default();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some(experiment::ABLATION_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    let want = [Variant::Full, Variant::NoCi, Variant::NoTb, Variant::Groups10].map(|v| v.label());
    let bytes = |label: &str| -> u64 {
        rows.iter().find(|r| r[0] == label).and_then(|r| r.get(4)).and_then(|v| v.parse().ok()).unwrap_or(0)
    };
    let shared = stdout.contains("y1-path bitstreams identical: true");
    let groups_larger = bytes("groups=10") > bytes("full");
    let shape_ok = header_ok && labels == want && rows.iter().all(|r| r.len() == 5);
    eprintln!("{}", text.trim_end());
    outcome(
        shape_ok && shared && groups_larger,
        format!(
            "csv shape {shape_ok}; w/o CI shares y1-path bitstream {shared}; model_bytes groups=10 {} > groups=5 {}: {groups_larger}",
            bytes("groups=10"),
            bytes("full"),
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome, secs: f64| {
        println!(
            "criterion {n} {}: {name}: {} ({secs:.0}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o, secs));
    };
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };

    if want(1) || want(2) {
        let t = Instant::now();
        let (c1, c2) = lossless_and_rate();
        let secs = t.elapsed().as_secs_f64();
        if want(1) {
            report(1, "entropy-coding losslessness", outcome(c1.pass && secs <= 300.0, c1.detail), secs);
        }
        if want(2) {
            report(2, "rate-estimate fidelity", c2, secs);
        }
    }
    if want(3) {
        let (o, secs) = timed(&mut || suite_outcome(&oracles::run_oracles(Suite::Grad)));
        report(3, "gradient correctness", outcome(o.pass && secs <= 600.0, o.detail), secs);
    }
    if want(4) {
        let (o, secs) = timed(&mut || suite_outcome(&oracles::run_oracles(Suite::Causality)));
        report(4, "causality and conditionality", o, secs);
    }
    if want(5) || want(6) {
        let (data, held) = oracles::smoke_data(&OracleOptions::default()).expect("training data");
        if want(5) {
            let (o, secs) = timed(&mut || training_smoke(&data, &held));
            report(5, "training smoke", outcome(o.pass && secs <= 1800.0, o.detail), secs);
        }
        if want(6) {
            let (o, secs) = timed(&mut || lambda_ordering(&data, &held));
            report(6, "lambda ordering", o, secs);
        }
    }
    if want(7) {
        let (o, secs) = timed(&mut || suite_outcome(&oracles::run_oracles(Suite::Metrics)));
        report(7, "metrics oracles", o, secs);
    }
    if want(8) {
        let (o, secs) = timed(&mut ablation);
        report(8, "ablation harness", o, secs);
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
