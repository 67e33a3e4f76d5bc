use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlic::codec::{save_checkpoint, CodecConfig};
use dlic::eval::datasets::{pixel_art, vector_art};
use dlic::{end_to_end_encode, AdaptationConfig, CodecModel32, Image32};
use tempfile::TempDir;

struct Env {
    root: TempDir,
    checkpoint: PathBuf,
    image: PathBuf,
}

fn setup() -> Env {
    let root = TempDir::new().unwrap();
    let mut model = CodecModel32::new(CodecConfig::default(), 5).unwrap();
    model.lambda = 0.01;
    let checkpoint = root.path().join("base.dlck");
    save_checkpoint(&model, &checkpoint).unwrap();
    let image = root.path().join("tile.png");
    write_png(&image, &pixel_art(0, 24, 3));
    Env { root, checkpoint, image }
}

fn write_png(path: &Path, img: &Image32) {
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .unwrap()
        .save(path)
        .unwrap();
}

fn dlic(env: &Env, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlic"))
        .args(args)
        .env("DLIC_RUN_ROOT", env.root.path().join("runs"))
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .split_whitespace()
        .find_map(|t| t.strip_prefix(key).and_then(|t| t.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn run_dir(env: &Env, name: &str) -> PathBuf {
    env.root.path().join("runs").join(name)
}

const QUICK: [&str; 6] = ["--steps-latent", "4", "--steps-model", "4", "--warmup", "2"];

#[test]
fn encode_then_decode_reproduces_reported_psnr() {
    let env = setup();
    let ck = env.checkpoint.to_str().unwrap();
    let img = env.image.to_str().unwrap();
    let mut args = vec!["encode", "--run", "enc", "--checkpoint", ck, "--input", img, "--fixed-layers", "2"];
    args.extend(QUICK);
    let enc = ok(&dlic(&env, &args));
    let blob = run_dir(&env, "enc").join("tile.dlic");
    assert!(blob.exists());
    assert!(run_dir(&env, "enc").join("trace.csv").exists());
    assert!(run_dir(&env, "enc").join("report.toml").exists());
    let snapshot = std::fs::read_to_string(run_dir(&env, "enc").join("config.toml")).unwrap();
    assert!(snapshot.contains("n1 = 4"), "{snapshot}");

    let dec = ok(&dlic(
        &env,
        &["decode", "--run", "dec", "--checkpoint", ck, "--input", blob.to_str().unwrap(), "--reference", img],
    ));
    assert_eq!(field(&enc, "psnr_db"), field(&dec, "psnr_db"));
    let decoded = image::open(run_dir(&env, "dec").join("tile.png")).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (24, 24));
}

#[test]
fn zero_steps_matches_base_codec_size() {
    let env = setup();
    let ck = env.checkpoint.to_str().unwrap();
    let img = env.image.to_str().unwrap();
    ok(&dlic(
        &env,
        &["encode", "--run", "zero", "--checkpoint", ck, "--input", img, "--steps-latent", "0", "--steps-model", "0", "--warmup", "0"],
    ));
    let size = std::fs::metadata(run_dir(&env, "zero").join("tile.dlic")).unwrap().len();
    let model: CodecModel32 = dlic::codec::load_checkpoint(&env.checkpoint).unwrap();
    let x = image::open(&env.image).unwrap().to_rgb8();
    let x = Image32::from_rgb8(24, 24, x.as_raw()).unwrap();
    let base = end_to_end_encode(&x, &model, &AdaptationConfig::zero()).unwrap();
    assert_eq!(size as usize, base.blob.total_bytes());
}

#[test]
fn same_config_same_bytes() {
    let env = setup();
    let ck = env.checkpoint.to_str().unwrap();
    let img = env.image.to_str().unwrap();
    let mut blobs = Vec::new();
    for run in ["a", "b"] {
        let mut args = vec!["encode", "--run", run, "--checkpoint", ck, "--input", img, "--dynamic", "--seed", "9"];
        args.extend(QUICK);
        ok(&dlic(&env, &args));
        blobs.push(std::fs::read(run_dir(&env, run).join("tile.dlic")).unwrap());
        blobs.push(std::fs::read(run_dir(&env, run).join("trace.csv")).unwrap());
    }
    assert_eq!(blobs[0], blobs[2]);
    assert_eq!(blobs[1], blobs[3]);
}

#[test]
fn config_file_with_flag_override() {
    let env = setup();
    let cfg = env.root.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "run = \"from-file\"\ncheckpoint = {:?}\ninput = {:?}\n[adapt]\nn1 = 3\nn2 = 3\nwarmup = 1\nvariant = \"bias_only\"\n",
            env.checkpoint, env.image
        ),
    )
    .unwrap();
    ok(&dlic(&env, &["encode", "--config", cfg.to_str().unwrap(), "--steps-model", "2"]));
    let snapshot = std::fs::read_to_string(run_dir(&env, "from-file").join("config.toml")).unwrap();
    assert!(snapshot.contains("n1 = 3"));
    assert!(snapshot.contains("n2 = 2"));
    assert!(snapshot.contains("variant = \"bias_only\""));
}

#[test]
fn train_writes_checkpoint_and_loss_log() {
    let env = setup();
    let out = ok(&dlic(
        &env,
        &["train", "--run", "t", "--synthetic", "natural", "--count", "2", "--size", "32", "--steps", "3", "--lambda", "0.03"],
    ));
    assert!(out.contains("trained 3 steps"));
    let model: CodecModel32 = dlic::codec::load_checkpoint(run_dir(&env, "t").join("model.dlck")).unwrap();
    assert_eq!(model.lambda, 0.03);
    let log = std::fs::read_to_string(run_dir(&env, "t").join("train_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn eval_of_a_curve_against_itself_is_zero() {
    let env = setup();
    let mut model = CodecModel32::new(CodecConfig::default(), 6).unwrap();
    model.lambda = 0.1;
    let second = env.root.path().join("second.dlck");
    save_checkpoint(&model, &second).unwrap();
    let cks = format!("{},{}", env.checkpoint.display(), second.display());
    let mut args = vec![
        "eval", "--run", "ev", "--checkpoints", &cks, "--synthetic", "ood", "--count", "2", "--size", "16", "--modes", "fixed-0",
    ];
    args.extend(QUICK);
    let out = ok(&dlic(&env, &args));
    assert!(out.contains("bd_rate fixed-0 vs fixed-0: 0.0000%"), "{out}");
    let dir = run_dir(&env, "ev");
    let records = std::fs::read_to_string(dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 2 * 2);
    assert!(dir.join("rd.svg").exists());

    // Tables regenerate byte-identically from the stored records.
    let bd = std::fs::read(dir.join("bd_rate.csv")).unwrap();
    let svg = std::fs::read(dir.join("rd.svg")).unwrap();
    let rec = dir.join("records.csv");
    ok(&dlic(&env, &["eval", "--run", "ev2", "--from-records", rec.to_str().unwrap()]));
    assert_eq!(std::fs::read(run_dir(&env, "ev2").join("bd_rate.csv")).unwrap(), bd);
    assert_eq!(std::fs::read(run_dir(&env, "ev2").join("rd.svg")).unwrap(), svg);
}

#[test]
fn parallel_eval_matches_serial_records() {
    let env = setup();
    let mut model = CodecModel32::new(CodecConfig::default(), 6).unwrap();
    model.lambda = 0.1;
    let second = env.root.path().join("second.dlck");
    save_checkpoint(&model, &second).unwrap();
    let cks = format!("{},{}", env.checkpoint.display(), second.display());
    let mut tables = Vec::new();
    for (run, jobs) in [("serial", "1"), ("parallel", "2")] {
        let mut args = vec![
            "eval", "--run", run, "--jobs", jobs, "--checkpoints", &cks, "--synthetic", "vector", "--count", "3", "--size", "16",
            "--modes", "fixed-0,fixed-1",
        ];
        args.extend(QUICK);
        ok(&dlic(&env, &args));
        let text = std::fs::read_to_string(run_dir(&env, run).join("records.csv")).unwrap();
        // wall-clock seconds are the only column allowed to differ
        let stripped: Vec<String> = text
            .lines()
            .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
            .collect();
        tables.push(stripped);
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn onestep_build_and_encode() {
    let env = setup();
    let ck = env.checkpoint.to_str().unwrap();
    ok(&dlic(
        &env,
        &[
            "onestep-build", "--run", "bank", "--checkpoint", ck, "--synthetic", "ood", "--count", "4", "--size", "16",
            "--clusters", "2", "--fit-steps", "3",
        ],
    ));
    let bank = run_dir(&env, "bank").join("bank.dlcb");
    assert!(bank.exists());
    let img = env.root.path().join("v.png");
    write_png(&img, &vector_art(9, 16, 4));
    let out = ok(&dlic(
        &env,
        &[
            "onestep-encode", "--run", "one", "--checkpoint", ck, "--bank", bank.to_str().unwrap(), "--input",
            img.to_str().unwrap(),
        ],
    ));
    let blob = run_dir(&env, "one").join("v.dlic");
    let dec = ok(&dlic(
        &env,
        &["decode", "--run", "one-dec", "--checkpoint", ck, "--input", blob.to_str().unwrap(), "--reference", img.to_str().unwrap()],
    ));
    assert_eq!(field(&out, "psnr_db"), field(&dec, "psnr_db"));
}

fn code(out: &Output) -> i32 {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("dlic: error["), "{err}");
    out.status.code().unwrap()
}

#[test]
fn failures_exit_nonzero_by_kind() {
    let env = setup();
    let ck = env.checkpoint.to_str().unwrap();
    let img = env.image.to_str().unwrap();
    // missing file
    assert_eq!(code(&dlic(&env, &["encode", "--checkpoint", "/nonexistent.dlck", "--input", img])), 3);
    // missing required path
    assert_eq!(code(&dlic(&env, &["encode", "--checkpoint", ck])), 2);
    // unknown variant
    assert_eq!(code(&dlic(&env, &["encode", "--checkpoint", ck, "--input", img, "--variant", "nope"])), 2);
    // warmup beyond decoder steps
    assert_eq!(
        code(&dlic(&env, &["encode", "--checkpoint", ck, "--input", img, "--steps-model", "1", "--warmup", "5"])),
        6
    );
    // malformed config file
    let bad = env.root.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"x\"").unwrap();
    assert_eq!(code(&dlic(&env, &["encode", "--config", bad.to_str().unwrap()])), 2);
    // corrupt blob
    let junk = env.root.path().join("junk.dlic");
    std::fs::write(&junk, b"DLIC\x01garbage").unwrap();
    assert_eq!(code(&dlic(&env, &["decode", "--checkpoint", ck, "--input", junk.to_str().unwrap()])), 4);
    // clap usage errors keep clap's own exit code
    assert_eq!(dlic(&env, &["encode", "--fixed-layers", "1", "--dynamic"]).status.code(), Some(2));
}
