//! Acceptance gate: checks every acceptance criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion. Exits non-zero if any fail.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use rand::Rng;
use sdcs::codec::MeasurementFile;
use sdcs::cs::{BlockGeometry, Ratio};
use sdcs::data::{encode_pgm, list_pgm_files, load_pgm, parse_pgm, save_pgm, GrayImage, PgmMode};
use sdcs::metrics::{psnr, psnr_from_mse, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use sdcs::models::ModelSpec;
use sdcs::rng::{stream_rng, Stream};
use sdcs::selfcheck::{model_gradient_check, perturbed_model, random_batch};
use sdcs::tensor::Tensor;
use sdcs::train::{masked_grad_check, validate_rvg};
use sdcs::Checkpoint;

const TOY_EPOCHS: &str = "30";
const TOY_PATCHES: &str = "2000";
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn sdcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdcs")).args(args).output().expect("run sdcs")
}

fn data(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(sub)
}

fn load_dir(sub: &str) -> Vec<GrayImage> {
    list_pgm_files(data(sub)).unwrap().iter().map(|p| load_pgm(p).unwrap()).collect()
}

fn pct(p: u32) -> Ratio {
    Ratio::percent(p).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = stream_rng(seed, Stream::Patches);
    GrayImage::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let g = BlockGeometry::square(4).unwrap();
    let rm = Ratio::new(0.5).unwrap();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (label, spec) in [
        ("mlp[16,64,16]", ModelSpec::Mlp { hidden: vec![64] }),
        ("unfolded K=2", ModelSpec::Unfolded { phases: 2 }),
    ] {
        for batch in 0..10u64 {
            let seed = 1000 + batch;
            let model = perturbed_model(g, rm, &spec, seed).unwrap();
            let mut rng = stream_rng(seed, Stream::Ratios);
            let x = random_batch(16, 4, &mut rng);
            let actives: Vec<usize> = (0..4).map(|_| model.active(pct(rng.random_range(1..=50))).unwrap()).collect();
            let report = model_gradient_check(&model, &x, &actives, None).unwrap();
            worst = worst.max(report.max_rel_error());
            if !report.passes(1e-6) {
                failures.push(format!("{label} batch {batch}"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "max relative error {worst:.2e} over 20 batches in {:.1}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failed: {failures:?}") }
        ),
    )
}

fn masked_gradients() -> Outcome {
    let g = BlockGeometry::square(8).unwrap();
    let rm = Ratio::new(0.5).unwrap();
    let set = [1, 10, 25, 50];
    let mut worst: f64 = 0.0;
    let mut tails = true;
    let mut pairs = 0;
    for spec in [ModelSpec::default_mlp(64), ModelSpec::Unfolded { phases: 2 }] {
        let model = perturbed_model(g, rm, &spec, 77).unwrap();
        for &p in &set {
            for &q in &set {
                let x = random_batch(64, 2, &mut stream_rng(p as u64 * 100 + q as u64, Stream::Patches));
                let blocks = [Tensor::vector(x.column(0)), Tensor::vector(x.column(1))];
                let r = masked_grad_check(&model, &[&blocks[0], &blocks[1]], &[pct(p), pct(q)]).unwrap();
                worst = worst.max(r.max_deviation());
                tails &= r.sampling_tail_zero && r.init_tail_zero;
                pairs += 1;
            }
        }
    }
    outcome(
        worst < 1e-12 && tails,
        format!("{pairs} ratio pairs at N=64, max deviation {worst:.2e}, tails exactly zero: {tails}"),
    )
}

fn prefix_consistency(ck: &Path, work: &Path) -> Outcome {
    let model = Checkpoint::load(ck).unwrap().model;
    let img = data("test").join("camera.pgm");
    let set = [1, 10, 25, 50];
    let enc = |p: u32| {
        let out = work.join(format!("m{p}.sdcm"));
        let o = sdcs(&[
            "encode", "--checkpoint", ck.to_str().unwrap(), "--input", img.to_str().unwrap(), "--rs",
            &pct(p).to_string(), "--output", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let files: Vec<PathBuf> = set.iter().map(|&p| enc(p)).collect();
    let mut pairs = 0;
    let mut bad = Vec::new();
    for (i, &rs) in set.iter().enumerate() {
        for (j, &rr) in set.iter().enumerate().take(i + 1) {
            let from_high = MeasurementFile::load(&files[i]).unwrap().decode(&model, pct(rr)).unwrap();
            let direct = MeasurementFile::load(&files[j]).unwrap().decode(&model, pct(rr)).unwrap();
            let pgm = |src: &Path, name: String| {
                let out = work.join(name);
                let o = sdcs(&[
                    "decode", "--checkpoint", ck.to_str().unwrap(), "--input", src.to_str().unwrap(), "--rr",
                    &pct(rr).to_string(), "--output", out.to_str().unwrap(),
                ]);
                assert!(o.status.success());
                fs::read(out).unwrap()
            };
            let same_pgm = pgm(&files[i], format!("d{rs}_{rr}.pgm")) == pgm(&files[j], format!("d{rr}_{rr}.pgm"));
            if from_high.data() != direct.data() || !same_pgm {
                bad.push(format!("{rs}%->{rr}%"));
            }
            pairs += 1;
        }
    }
    outcome(
        bad.is_empty(),
        format!("{pairs} (R_S, R_R) pairs bit-identical via library and CLI{}", if bad.is_empty() { String::new() } else { format!("; mismatched {bad:?}") }),
    )
}

struct ToyRun {
    checkpoint: PathBuf,
    dir: PathBuf,
    elapsed: Duration,
}

fn toy_train(work: &Path, strategy: &str, seed: u64) -> ToyRun {
    let dir = work.join(format!("{strategy}_{seed}"));
    let (train, val, out) = (data("train"), data("val"), dir.clone());
    let seed_s = seed.to_string();
    let mut args = vec![
        "train", "--data", train.to_str().unwrap(), "--val", val.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--block", "16", "--rm", "0.5", "--family", "unfolded", "--phases", "4", "--epochs", TOY_EPOCHS, "--patches",
        TOY_PATCHES, "--seed", &seed_s,
    ];
    if strategy == "fixed" {
        args.extend(["--strategy", "fixed", "--ratio", "0.5"]);
    }
    let start = Instant::now();
    let o = sdcs(&args);
    let elapsed = start.elapsed();
    assert!(o.status.success(), "training failed: {}", String::from_utf8_lossy(&o.stderr));
    ToyRun {
        checkpoint: dir.join("checkpoint.sdcs"),
        dir,
        elapsed,
    }
}

/// Mean test-set PSNR of the full reconstruction and of the linear estimate.
fn test_psnr(ck: &Path, p: u32) -> (f64, f64) {
    let model = Checkpoint::load(ck).unwrap().model;
    let test = load_dir("test");
    let (mut full, mut init) = (0.0, 0.0);
    for img in &test {
        let t = img.to_tensor();
        let x = GrayImage::from_tensor_clamped(&model.reconstruct_image(&t, pct(p), pct(p)).unwrap()).unwrap();
        let x0 = GrayImage::from_tensor_clamped(&model.initial_image(&t, pct(p), pct(p)).unwrap()).unwrap();
        full += psnr(img, &x).unwrap();
        init += psnr(img, &x0).unwrap();
    }
    (full / test.len() as f64, init / test.len() as f64)
}

fn scalable_benefit(run: &ToyRun) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = run.elapsed < Duration::from_secs(30 * 60);
    for p in [10, 25, 50] {
        let (full, init) = test_psnr(&run.checkpoint, p);
        ok &= full - init >= 1.0;
        parts.push(format!("{p}%: {full:.2} vs X0 {init:.2} dB"));
    }
    outcome(ok, format!("{} (train {:.0}s)", parts.join(", "), run.elapsed.as_secs_f64()))
}

fn fixed_vs_scalable(scalable: &[ToyRun], fixed: &[ToyRun]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for ((s, f), seed) in scalable.iter().zip(fixed).zip(SEEDS) {
        let (ps, _) = test_psnr(&s.checkpoint, 10);
        let (pf, _) = test_psnr(&f.checkpoint, 10);
        wins += usize::from(ps - pf >= 1.0);
        parts.push(format!("seed {seed}: scalable {ps:.2} vs fixed {pf:.2} dB"));
    }
    outcome(wins >= 2, format!("{wins}/3 seeds hold at 10% ({})", parts.join("; ")))
}

/// Window-by-window SSIM with a directly built 2-D Gaussian and two-pass moments.
fn naive_ssim(x: &GrayImage, y: &GrayImage) -> f64 {
    let k = SSIM_WINDOW;
    let c = (k as f64 - 1.0) / 2.0;
    let mut w2 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            w2[i * k + j] = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut sum = 0.0;
    let mut count = 0.0;
    for r in 0..=x.height() - k {
        for s in 0..=x.width() - k {
            let at = |img: &GrayImage, i: usize| img.get(r + i / k, s + i % k);
            let mx: f64 = (0..k * k).map(|i| w2[i] * at(x, i)).sum();
            let my: f64 = (0..k * k).map(|i| w2[i] * at(y, i)).sum();
            let vx: f64 = (0..k * k).map(|i| w2[i] * (at(x, i) - mx).powi(2)).sum();
            let vy: f64 = (0..k * k).map(|i| w2[i] * (at(y, i) - my).powi(2)).sum();
            let cv: f64 = (0..k * k).map(|i| w2[i] * (at(x, i) - mx) * (at(y, i) - my)).sum();
            sum += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    sum / count
}

fn metrics() -> Outcome {
    let p20 = psnr_from_mse(1e-2);
    let p40 = psnr_from_mse(1e-4);
    let x = random_image(32, 29, 1);
    let self_ssim = ssim(&x, &x).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let a = random_image(32, 29, 10 + seed);
        let b = random_image(32, 29, 20 + seed);
        let mixed = GrayImage::new(32, 29, a.pixels().iter().zip(b.pixels()).map(|(u, v)| 0.7 * u + 0.3 * v).collect()).unwrap();
        worst = worst.max((ssim(&a, &mixed).unwrap() - naive_ssim(&a, &mixed)).abs());
    }
    outcome(
        p20 == 20.0 && p40 == 40.0 && self_ssim == 1.0 && worst < 1e-10,
        format!("psnr {p20} / {p40} dB, ssim(x,x) = {self_ssim}, max |ssim - reference| = {worst:.2e}"),
    )
}

fn parse_log(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn round_trips(run: &ToyRun, work: &Path) -> Outcome {
    let ck = Checkpoint::load(&run.checkpoint).unwrap();
    let rows = parse_log(&run.dir.join("train_log.csv"));
    let logged = &rows[ck.epoch - 1];
    let report = validate_rvg(&ck.model, &load_dir("val"), &sdcs::cs::default_validation_ratios()).unwrap();
    let rvg_exact = report.psnr[..] == logged[2..logged.len() - 1] && report.mean == logged[logged.len() - 1];

    let img = random_image(37, 41, 5);
    let mut pgm_dev: f64 = 0.0;
    for mode in [PgmMode::Plain, PgmMode::Raw] {
        let path = work.join("roundtrip.pgm");
        save_pgm(&img, &path, mode).unwrap();
        let back = load_pgm(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            pgm_dev = pgm_dev.max((a - b).abs());
        }
        assert_eq!(parse_pgm(&encode_pgm(&img, mode).unwrap()).unwrap(), back);
    }

    let test = load_pgm(data("test").join("chelsea.pgm")).unwrap().to_tensor();
    let full = MeasurementFile::encode(&ck.model, &test, pct(40)).unwrap();
    let path = work.join("truncated.sdcm");
    full.truncate(pct(10)).unwrap().save(&path).unwrap();
    let truncated = MeasurementFile::load(&path).unwrap();
    let trunc_ok = truncated.decode(&ck.model, pct(10)).unwrap() == full.decode(&ck.model, pct(10)).unwrap()
        && truncated == MeasurementFile::encode(&ck.model, &test, pct(10)).unwrap();

    outcome(
        rvg_exact && pgm_dev <= 1.0 / 510.0 && trunc_ok,
        format!(
            "checkpoint RVG bit-exact: {rvg_exact}; PGM max deviation {pgm_dev:.2e} (limit {:.2e}); truncated file decodes identically: {trunc_ok}",
            1.0 / 510.0
        ),
    )
}

fn selfcheck_and_determinism(ck: &Path, work: &Path) -> Outcome {
    let start = Instant::now();
    let clean = sdcs(&["selfcheck"]);
    let elapsed = start.elapsed();
    let clean_ok = clean.status.success() && elapsed < Duration::from_secs(60);

    let mut faults_caught = true;
    for (fault, property) in [
        ("matmul", "gradient_fd_unfolded"),
        ("relu", "gradient_fd_mlp"),
        ("mask_mul", "masked_gradient_identity"),
    ] {
        let o = sdcs(&["selfcheck", "--inject-fault", fault]);
        let text = String::from_utf8_lossy(&o.stdout);
        faults_caught &= o.status.code() == Some(1)
            && text.lines().any(|l| l.starts_with("FAIL") && l.contains(property));
    }

    let img = data("test").join("camera.pgm");
    let (ck, img) = (ck.to_str().unwrap(), img.to_str().unwrap());
    let m = work.join("det.sdcm");
    let d = work.join("det.pgm");
    let e = work.join("det_eval");
    let t = work.join("det_train");
    let commands: Vec<Vec<String>> = vec![
        vec!["encode", "--checkpoint", ck, "--input", img, "--rs", "0.3", "--output", m.to_str().unwrap()],
        vec!["decode", "--checkpoint", ck, "--input", m.to_str().unwrap(), "--rr", "0.2", "--output", d.to_str().unwrap()],
        vec!["eval", "--checkpoint", ck, "--images", data("test").to_str().unwrap(), "--out", e.to_str().unwrap()],
        vec![
            "train", "--data", data("train").to_str().unwrap(), "--val", data("val").to_str().unwrap(), "--out",
            t.to_str().unwrap(), "--block", "8", "--phases", "2", "--epochs", "2", "--patches", "128", "--batch-size", "16",
            "--seed", "9",
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    let snapshot = || -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = Vec::new();
        for entry in fs::read_dir(work).unwrap().chain(fs::read_dir(&e).unwrap()).chain(fs::read_dir(&t).unwrap()) {
            let p = entry.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if p.is_file() && (name.starts_with("det") || p.parent() == Some(&e) || p.parent() == Some(&t)) {
                files.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
        files.sort();
        files
    };
    let run_all = || {
        for c in &commands {
            let refs: Vec<&str> = c.iter().map(String::as_str).collect();
            let o = sdcs(&refs);
            assert!(o.status.success(), "{:?}: {}", c, String::from_utf8_lossy(&o.stderr));
        }
    };
    run_all();
    let first = snapshot();
    run_all();
    let second = snapshot();
    let deterministic = first == second && !first.is_empty();

    outcome(
        clean_ok && faults_caught && deterministic,
        format!(
            "selfcheck exit {:?} in {:.1}s; injected faults caught: {faults_caught}; {} output files bit-identical on repeat: {deterministic}",
            clean.status.code(),
            elapsed.as_secs_f64(),
            first.len()
        ),
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("{} [{id}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "finite-difference gradients", gradient_check());
    report(2, "masked gradient identities", masked_gradients());
    report(6, "metrics", metrics());

    eprintln!("training {} toy models ({} epochs each)...", 2 * SEEDS.len(), TOY_EPOCHS);
    let scalable: Vec<ToyRun> = SEEDS.iter().map(|&s| toy_train(work.path(), "scalable", s)).collect();
    let fixed: Vec<ToyRun> = SEEDS.iter().map(|&s| toy_train(work.path(), "fixed", s)).collect();

    report(3, "prefix consistency", prefix_consistency(&scalable[0].checkpoint, work.path()));
    report(4, "scalable training beats linear initialization", scalable_benefit(&scalable[0]));
    report(5, "fixed-ratio model degrades at 10%", fixed_vs_scalable(&scalable, &fixed));
    report(7, "round-trips", round_trips(&scalable[0], work.path()));
    report(8, "selfcheck and determinism", selfcheck_and_determinism(&scalable[0].checkpoint, work.path()));

    let failed = results.iter().filter(|(_, _, o)| !o.passed).count();
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
