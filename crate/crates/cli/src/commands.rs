//! One function per subcommand. Every artifact lands in the run directory.

use std::path::{Path, PathBuf};

use dlic::adapt::write_trace_csv;
use dlic::bitstream::CompressedBlob;
use dlic::codec::{load_checkpoint, save_checkpoint, train_base};
use dlic::eval::datasets::{generate, natural_like, out_of_domain, pixel_art, vector_art};
use dlic::eval::{
    bar_plot_svg, curve, curves_from_records, evaluate, frequency_rows, gate_frequency_from_records, rd_plot_svg,
    read_csv, sweep_method, sweep_table, write_csv, RdRecord, DYNAMIC_METHOD,
};
use dlic::{bd_rate, build_bank, end_to_end_encode, psnr, AdaptationConfig, ClusterBank, CodecModel32, GateMode, Image32};
use serde::Serialize;

use crate::config::{parse_mode, DataConfig, RunConfig};
use crate::error::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Context {
    /// The configured output (relative paths land in the run directory) or
    /// `default` inside it.
    fn output(&self, default: &str) -> PathBuf {
        self.dir.join(self.cfg.output.as_deref().unwrap_or(Path::new(default)))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Config(format!("missing --{what}")))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    write_file(path, text)
}

fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    write_file(path, buf)
}

fn read_png(path: &Path) -> Result<Image32, CliError> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_rgb8();
    Ok(Image32::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())?)
}

fn write_png(path: &Path, img: &Image32) -> Result<(), CliError> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| CliError::Io(format!("{}: bad image buffer", path.display())))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    buf.save(path).map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path) -> Result<CodecModel32, CliError> {
    load_checkpoint(path).map_err(|e| match e {
        dlic::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn load_images(data: &DataConfig) -> Result<Vec<Image32>, CliError> {
    if let Some(dir) = &data.images {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(CliError::Config(format!("no PNG images in {}", dir.display())));
        }
        return paths.iter().map(|p| read_png(p)).collect();
    }
    let (n, size, seed) = (data.count, data.size, data.seed);
    if n == 0 || size == 0 {
        return Err(CliError::Config("synthetic data needs count > 0 and size > 0".into()));
    }
    Ok(match data.synthetic.as_str() {
        "natural" => generate(natural_like, n, size, seed),
        "pixel" => generate(pixel_art, n, size, seed),
        "vector" => generate(vector_art, n, size, seed),
        "ood" => out_of_domain(n, size, seed),
        other => {
            return Err(CliError::Config(format!(
                "unknown synthetic set '{other}' (natural, pixel, vector, ood)"
            )))
        }
    })
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let images = load_images(&ctx.cfg.data)?;
    let cfg = ctx.cfg.train_config();
    let (model, report) = train_base(&images, &cfg)?;
    let out = ctx.output("model.dlck");
    save_checkpoint(&model, &out).map_err(|e| CliError::io(&out, e))?;
    let rows: Vec<LossRow> = report
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    write_rows(&ctx.artifact("train_loss.csv"), &rows)?;
    println!(
        "trained {} steps at lambda {}: loss {:.4} -> {:.4}; checkpoint {}",
        cfg.steps,
        cfg.lambda,
        report.initial_loss,
        report.final_loss,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EncodeReport {
    input: String,
    blob: String,
    bytes: usize,
    header_bytes: usize,
    model_stream_bytes: usize,
    content_stream_bytes: usize,
    bpp: f64,
    psnr_db: f64,
    gates: String,
    estimated_bits: f64,
    cluster: Option<usize>,
}

fn gate_string(blob: &CompressedBlob) -> String {
    blob.header.gates.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn report_for(input: &Path, out: &Path, blob: &CompressedBlob, psnr_db: f64, estimated_bits: f64, cluster: Option<usize>) -> EncodeReport {
    EncodeReport {
        input: input.display().to_string(),
        blob: out.display().to_string(),
        bytes: blob.total_bytes(),
        header_bytes: blob.header_len(),
        model_stream_bytes: blob.model_stream.len(),
        content_stream_bytes: blob.content_stream.len(),
        bpp: blob.bpp(),
        psnr_db,
        gates: gate_string(blob),
        estimated_bits,
        cluster,
    }
}

fn print_report(r: &EncodeReport) {
    println!(
        "psnr_db={} bpp={:.6} bytes={} gates={} blob={}",
        r.psnr_db, r.bpp, r.bytes, r.gates, r.blob
    );
}

pub fn encode(ctx: &Context) -> Result<(), CliError> {
    let model = load_model(require(&ctx.cfg.checkpoint, "checkpoint")?)?;
    let input = require(&ctx.cfg.input, "input")?;
    let image = read_png(input)?;
    let enc = end_to_end_encode(&image, &model, &ctx.cfg.adapt_config())?;
    let out = ctx.output(&format!("{}.dlic", stem(input)));
    write_file(&out, enc.blob.to_bytes())?;
    let mut trace = Vec::new();
    write_trace_csv(&enc.result.loss_trace, &mut trace)?;
    write_file(&ctx.artifact("trace.csv"), trace)?;
    let estimated = enc.result.estimated_bits(&model)? + 8.0 * enc.blob.header_len() as f64;
    let report = report_for(input, &out, &enc.blob, enc.psnr, estimated, None);
    write_toml(&ctx.artifact("report.toml"), &report)?;
    print_report(&report);
    Ok(())
}

#[derive(Serialize)]
struct DecodeReport {
    blob: String,
    output: String,
    height: usize,
    width: usize,
    psnr_db: Option<f64>,
}

pub fn decode(ctx: &Context) -> Result<(), CliError> {
    let model = load_model(require(&ctx.cfg.checkpoint, "checkpoint")?)?;
    let input = require(&ctx.cfg.input, "input")?;
    let bytes = std::fs::read(input).map_err(|e| CliError::io(input, e))?;
    let blob = CompressedBlob::from_bytes(&bytes)?;
    let image = dlic::unpack(&blob, &model)?;
    let out = ctx.output(&format!("{}.png", stem(input)));
    write_png(&out, &image)?;
    let psnr_db = match &ctx.cfg.reference {
        Some(r) => Some(psnr(&read_png(r)?, &image)?),
        None => None,
    };
    let report = DecodeReport {
        blob: input.display().to_string(),
        output: out.display().to_string(),
        height: image.height(),
        width: image.width(),
        psnr_db,
    };
    write_toml(&ctx.artifact("decode.toml"), &report)?;
    match psnr_db {
        Some(p) => println!("psnr_db={p} output={}", out.display()),
        None => println!("output={}", out.display()),
    }
    Ok(())
}

/// `evaluate` split across `jobs` threads by image; output order and image
/// indices match the serial run.
fn evaluate_parallel(
    images: &[Image32],
    models: &[CodecModel32],
    config: &AdaptationConfig,
    modes: &[(String, GateMode)],
    jobs: usize,
) -> Result<Vec<RdRecord>, CliError> {
    if jobs <= 1 || images.len() <= 1 {
        return Ok(evaluate(images, models, config, modes)?);
    }
    let chunk = images.len().div_ceil(jobs);
    let parts: Vec<dlic::Result<Vec<RdRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| s.spawn(move || evaluate(part, models, config, modes)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let parts = parts.into_iter().collect::<dlic::Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(images.len() * models.len() * modes.len());
    for m in 0..models.len() {
        for (c, part) in parts.iter().enumerate() {
            let per_model = part.len() / models.len();
            for r in &part[m * per_model..(m + 1) * per_model] {
                out.push(RdRecord {
                    image: r.image + c * chunk,
                    ..r.clone()
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct BdRow {
    method: String,
    anchor: String,
    bd_rate: f64,
}

/// Derived tables and plots; a pure function of the records.
fn write_tables(ctx: &Context, records: &[RdRecord]) -> Result<(), CliError> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    let (sweep, methods): (Vec<&str>, Vec<&str>) = order.into_iter().partition(|m| m.starts_with("steps="));
    let curves = curves_from_records(records)?;
    if let Some(anchor) = methods.first() {
        let a = curve(&curves, anchor)?;
        let mut rows = Vec::new();
        for m in &methods {
            let bd = bd_rate(curve(&curves, m)?, a)?;
            println!("bd_rate {m} vs {anchor}: {bd:.4}%");
            rows.push(BdRow {
                method: m.to_string(),
                anchor: anchor.to_string(),
                bd_rate: bd,
            });
        }
        write_rows(&ctx.artifact("bd_rate.csv"), &rows)?;
        let shown: Vec<_> = curves.iter().filter(|c| methods.contains(&c.method.as_str())).cloned().collect();
        write_file(&ctx.artifact("rd.svg"), rd_plot_svg(&shown, "Rate-distortion"))?;
    }
    if methods.contains(&DYNAMIC_METHOD) {
        let freq = gate_frequency_from_records(records, DYNAMIC_METHOD)?;
        write_rows(&ctx.artifact("gate_frequency.csv"), &frequency_rows(&freq))?;
        write_file(
            &ctx.artifact("gate_frequency.svg"),
            bar_plot_svg(&freq, "Gate open frequency", "decoder layer"),
        )?;
    }
    if !sweep.is_empty() {
        let mut grid: Vec<usize> = sweep
            .iter()
            .filter_map(|m| m.trim_start_matches("steps=").parse().ok())
            .filter(|&s| s > 0)
            .collect();
        grid.sort_unstable();
        let sweep_records: Vec<RdRecord> = records.iter().filter(|r| r.method.starts_with("steps=")).cloned().collect();
        let rows = sweep_table(&sweep_records, &grid)?;
        for r in &rows {
            println!("sweep steps={} wall={:.2}s bd_rate={:.4}%", r.steps, r.wall_seconds, r.bd_rate);
        }
        write_rows(&ctx.artifact("sweep.csv"), &rows)?;
    }
    Ok(())
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let records = if let Some(path) = &cfg.eval.from_records {
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        read_csv::<RdRecord, _>(file)?
    } else {
        if cfg.eval.checkpoints.is_empty() {
            return Err(CliError::Config("missing --checkpoints".into()));
        }
        let models = cfg
            .eval
            .checkpoints
            .iter()
            .map(|p| load_model(p))
            .collect::<Result<Vec<_>, _>>()?;
        let images = load_images(&cfg.data)?;
        let modes = cfg
            .eval
            .modes
            .iter()
            .map(|m| Ok((m.clone(), parse_mode(m)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let adapt = cfg.adapt_config();
        let mut records = evaluate_parallel(&images, &models, &adapt, &modes, cfg.jobs)?;
        if !cfg.eval.sweep.is_empty() {
            let mut grid = cfg.eval.sweep.clone();
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CliError::Config("sweep grid must be strictly ascending".into()));
            }
            if grid[0] != 0 {
                grid.insert(0, 0);
            }
            for s in grid {
                let c = AdaptationConfig {
                    n1: s,
                    n2: s,
                    warmup: adapt.warmup.min(s),
                    ..adapt.clone()
                };
                let modes = [(sweep_method(s), GateMode::Dynamic)];
                records.extend(evaluate_parallel(&images, &models, &c, &modes, cfg.jobs)?);
            }
        }
        records
    };
    let path = ctx.artifact("records.csv");
    if cfg.eval.from_records.as_deref() != Some(path.as_path()) {
        write_rows(&path, &records)?;
    }
    write_tables(ctx, &records)
}

pub fn onestep_build(ctx: &Context) -> Result<(), CliError> {
    let model = load_model(require(&ctx.cfg.checkpoint, "checkpoint")?)?;
    let corpus = load_images(&ctx.cfg.data)?;
    let bank = build_bank(&corpus, &model, &ctx.cfg.onestep_config())?;
    let out = ctx.output("bank.dlcb");
    write_file(&out, bank.to_bytes())?;
    println!("bank with {} clusters on layer {}: {}", bank.len(), bank.layer_index + 1, out.display());
    Ok(())
}

pub fn onestep_encode(ctx: &Context) -> Result<(), CliError> {
    let model = load_model(require(&ctx.cfg.checkpoint, "checkpoint")?)?;
    let bank_path = require(&ctx.cfg.bank, "bank")?;
    let bank = ClusterBank::load(bank_path).map_err(|e| match e {
        dlic::Error::Io(io) => CliError::io(bank_path, io),
        other => other.into(),
    })?;
    let input = require(&ctx.cfg.input, "input")?;
    let image = read_png(input)?;
    let enc = dlic::onestep_encode(&image, &model, &bank)?;
    let out = ctx.output(&format!("{}.dlic", stem(input)));
    write_file(&out, enc.blob.to_bytes())?;
    let report = report_for(input, &out, &enc.blob, enc.psnr, enc.blob.total_bits() as f64, Some(enc.cluster));
    write_toml(&ctx.artifact("report.toml"), &report)?;
    print_report(&report);
    Ok(())
}
