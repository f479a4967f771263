//! One function per subcommand. Each creates its own run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;
use procam_core::baseline::{run_two_step, uncompensated, Variant};
use procam_core::diffcore::Checkpoint;
use procam_core::gradsuite::{run_suite, GradReport};
use procam_core::photometric::PhotometricNet;
use procam_core::simulator::{make_dataset, Dataset, SetupMeta, SimSetup};
use procam_core::textures::procedural_image;
use procam_core::training::{
    init_model, init_photometric, score, simplify_residuals, write_curves, CompenModel, Preset, SimplifiedModel, SimplifyResiduals, TrainConfig,
    TrainReport, Trainer,
};
use procam_core::{Image, Metrics};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::output::RunDir;
use crate::protocol::{closed_loop_image, full_model_protocol, panel, simplified_protocol, throughput};

/// Uses `explicit`, else `config.toml` next to an input artifact, else defaults.
pub fn resolve_config(explicit: Option<&Path>, beside: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    if let Some(p) = beside.map(|d| d.join("config.toml")).filter(|p| p.exists()) {
        return RunConfig::load(&p);
    }
    Ok(RunConfig::default())
}

fn write_json(dir: &RunDir, name: &str, value: &impl Serialize) -> Result<()> {
    dir.write(name, serde_json::to_string_pretty(value)? + "\n")
}

fn load_setup(path: &Path) -> Result<SimSetup> {
    let file = if path.is_dir() { path.join("setup.meta") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let meta: SetupMeta = toml::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    Ok(meta.setup()?)
}

fn tag(ck: &mut Checkpoint, cfg: &RunConfig) -> Result<()> {
    ck.set_meta("run.config", cfg.to_toml()?);
    ck.set_meta("run.config_hash", cfg.hash()?);
    Ok(())
}

#[derive(Args, Clone, Debug, Default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square resolution of both devices.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Builds a setup from the configuration and writes its dataset.
pub fn simulate(a: &SimulateArgs) -> Result<PathBuf> {
    let mut cfg = resolve_config(a.config.as_deref(), None)?;
    cfg.preset = a.preset.unwrap_or(cfg.preset);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.size = a.size.or(cfg.size);
    cfg.dataset.train = a.train.or(cfg.dataset.train);
    cfg.dataset.val = a.val.unwrap_or(cfg.dataset.val);
    let setup = SimSetup::new(cfg.seed, cfg.sim_params())?;
    let data = make_dataset(&setup, &cfg.sources(), cfg.n_train(), cfg.dataset.val)?;
    let dir = RunDir::create("simulate", a.out.as_deref(), &cfg.output_root())?;
    data.save(&dir.path, &setup.meta())?;
    setup.fov_mask().save_png(dir.join("fov_truth.png"))?;
    dir.write_config(&cfg)?;
    info!("dataset written to {}", dir.path.display());
    Ok(dir.path)
}

/// The setup-independent photometric initialization, cached under the output root.
pub fn pretrained(cfg: &RunConfig, width: usize) -> Result<PhotometricNet<f32>> {
    let key = format!("{}\nwidth = {width}\n", toml::to_string(&cfg.pretrain)?);
    let digest = Sha256::digest(key.as_bytes());
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    let dir = cfg.output_root().join("pretrained");
    let path = dir.join(format!("photometric-w{width}-{hex}.ck"));
    if path.exists() {
        info!("loading photometric initialization {}", path.display());
        return Ok(PhotometricNet::load_from(&Checkpoint::load(&path)?)?);
    }
    info!("pre-initializing the photometric network ({} iterations)", cfg.pretrain.iterations);
    let (net, losses) = init_photometric(width, &cfg.pretrain)?;
    info!("pretrain loss {:.4} -> {:.4}", losses[0], losses.last().copied().unwrap_or(f64::NAN));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut ck = Checkpoint::default();
    net.save_into(&mut ck);
    let tmp = dir.join(format!(".{}.{}", std::process::id(), hex));
    ck.save(&tmp)?;
    fs::rename(&tmp, &path).with_context(|| format!("moving {} into place", path.display()))?;
    Ok(net)
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Freeze the grid refinement stage at the identity.
    NoRefine,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    /// Continue from a `state.ck` or `model.ck` of an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Photometric initialization checkpoint instead of the cached one.
    #[arg(long)]
    pub photo_init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub no_refine: bool,
    pub train_pairs: usize,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub summary: TrainSummary,
}

/// Calibrates, initializes and trains; writes `model.ck`, `curves.csv`,
/// `summary.json` and the display geometry.
pub fn train(a: &TrainArgs) -> Result<TrainOutcome> {
    let mut cfg = resolve_config(a.config.as_deref(), Some(&a.data))?;
    cfg.preset = a.preset.unwrap_or(cfg.preset);
    cfg.train.iterations = a.iterations.or(cfg.train.iterations);
    if a.ablation == Some(Ablation::NoRefine) {
        cfg.train.no_refine = Some(true);
    }
    let (data, _) = Dataset::load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::resume(&Checkpoint::load(p)?, &data)?;
            if let Some(n) = a.iterations {
                t.cfg.iterations = n;
                t.cfg.validate()?;
            }
            t
        }
        None => {
            let photo = match &a.photo_init {
                Some(p) => PhotometricNet::load_from(&Checkpoint::load(p)?)?,
                None => pretrained(&cfg, cfg.model.photo_width)?,
            };
            let model = init_model(&data, &cfg.model, photo, cfg.seed)?;
            Trainer::new(model, &data, cfg.train_config())?
        }
    };
    let dir = RunDir::create("train", a.out.as_deref(), &cfg.output_root())?;
    dir.write_config(&cfg)?;
    trainer.model.geometry.save(dir.join("geometry"))?;
    let state = dir.join("state.ck");
    let report = trainer.run_with(|t| {
        let mut ck = t.state_checkpoint()?;
        ck.set_meta("run.config_hash", cfg.hash().unwrap_or_default());
        ck.save(&state)
    })?;
    let mut ck = trainer.state_checkpoint()?;
    tag(&mut ck, &cfg)?;
    ck.set_meta("run.train_pairs", data.train_cam.len().to_string());
    ck.save(dir.join("model.ck"))?;
    fs::remove_file(&state).ok();
    write_curves(&trainer.curve, dir.join("curves.csv"))?;
    let summary = TrainSummary {
        config_hash: cfg.hash()?,
        no_refine: trainer.cfg.no_refine,
        train_pairs: data.train_cam.len(),
        report,
    };
    write_json(&dir, "summary.json", &summary)?;
    info!(
        "validation PSNR {:.2} -> {:.2} dB, SSIM {:.4} -> {:.4}",
        summary.report.initial.metrics.psnr, summary.report.last.metrics.psnr, summary.report.initial.metrics.ssim, summary.report.last.metrics.ssim
    );
    Ok(TrainOutcome { dir: dir.path, summary })
}

#[derive(Args, Clone, Debug, Default)]
pub struct SimplifyArgs {
    /// `model.ck` from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe images used for the equivalence residuals and timing.
    #[arg(long, default_value_t = 10)]
    pub probes: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimplifySummary {
    pub residuals: SimplifyResiduals,
    pub full_bytes: usize,
    pub simplified_bytes: usize,
    /// Images per second, one image per call.
    pub full_throughput: f64,
    pub simplified_throughput: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug)]
pub struct SimplifyOutcome {
    pub dir: PathBuf,
    pub summary: SimplifySummary,
}

fn trained_model(ck: &Checkpoint) -> Result<CompenModel> {
    let model = CompenModel::from_checkpoint(ck)?;
    let iterations: usize = ck.meta("train.iteration").and_then(|s| s.parse().ok()).unwrap_or(0);
    if iterations == 0 {
        bail!("checkpoint has not been trained");
    }
    Ok(model)
}

/// Replaces the warping cascade by its grid and trims the surface branch.
pub fn simplify(a: &SimplifyArgs) -> Result<SimplifyOutcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let full = trained_model(&ck)?;
    let simple = full.simplify()?;
    let (ch, cw) = full.geometry.camera_dims();
    let probes: Vec<Image> = (0..a.probes.max(1) as u64).map(|i| procedural_image(0x9b0be, i, ch, cw)).collect();
    let batch = Image::stack::<f32>(&probes.iter().collect::<Vec<_>>());
    let residuals = simplify_residuals(&full, &simple, &batch)?;
    // One frame per call, as in deployment.
    let frames: Vec<_> = probes.iter().map(|p| p.to_tensor::<f32>()).collect();
    let min = Duration::from_millis(500);
    let full_throughput = throughput(frames.len(), min, || frames.iter().try_for_each(|x| Ok(full.predict(x).map(drop)?)))?;
    let simplified_throughput = throughput(frames.len(), min, || frames.iter().try_for_each(|x| Ok(simple.predict(x).map(drop)?)))?;
    let mut out = simple.to_checkpoint()?;
    for key in ["run.config", "run.config_hash", "run.train_pairs", "train.config"] {
        if let Some(v) = ck.meta(key) {
            out.set_meta(key, v);
        }
    }
    let full_bytes = full.to_checkpoint()?.to_bytes().len();
    let cfg = match ck.meta("run.config") {
        Some(t) => toml::from_str(t)?,
        None => RunConfig::default(),
    };
    let dir = RunDir::create("simplify", a.out.as_deref(), &cfg.output_root())?;
    out.save(dir.join("simplified.ck"))?;
    let summary = SimplifySummary {
        residuals,
        full_bytes,
        simplified_bytes: out.to_bytes().len(),
        full_throughput,
        simplified_throughput,
        speedup: simplified_throughput / full_throughput,
    };
    write_json(&dir, "residuals.json", &summary)?;
    info!(
        "residuals warp {:.2e} photometric {:.2e}; {} -> {} bytes; {:.1}x faster",
        residuals.warp, residuals.photometric, summary.full_bytes, summary.simplified_bytes, summary.speedup
    );
    Ok(SimplifyOutcome { dir: dir.path, summary })
}

/// A simplified model from either checkpoint kind.
pub fn load_deployable(path: &Path) -> Result<SimplifiedModel> {
    let ck = Checkpoint::load(path)?;
    match ck.meta("model.kind") {
        Some("simplified") => Ok(SimplifiedModel::from_checkpoint(&ck)?),
        _ => Ok(trained_model(&ck)?.simplify()?),
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct CompensateArgs {
    /// Simplified (or full) model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Desired image at the projector resolution.
    #[arg(long)]
    pub image: PathBuf,
    /// Dataset directory or `setup.meta` of a simulated setup to capture the result with.
    #[arg(long)]
    pub setup: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub train: usize,
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn new(method: impl Into<String>, train: usize, m: Metrics) -> Self {
        Self {
            method: method.into(),
            train,
            psnr: m.psnr,
            rmse: m.rmse,
            ssim: m.ssim,
        }
    }
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CompensateOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
}

/// `z' = A z`, `z* = π'†(z')`; with a setup, also captures `z*` and plain `z`.
pub fn compensate(a: &CompensateArgs) -> Result<CompensateOutcome> {
    let model = load_deployable(&a.model)?;
    let z = Image::load_png(&a.image)?;
    let g = &model.geometry;
    if z.dims() != (g.desired_height, g.desired_width) {
        bail!(
            "desired image is {}×{}, the model expects {}×{}",
            z.dims().1,
            z.dims().0,
            g.desired_width,
            g.desired_height
        );
    }
    let dir = RunDir::create("compensate", a.out.as_deref(), &RunConfig::default().output_root())?;
    let mut rows = Vec::new();
    match &a.setup {
        Some(p) => {
            let setup = load_setup(p)?;
            let r = closed_loop_image(&model, &setup, &z)?;
            let want = r.desired.crop(r.rect);
            let comp = Metrics::compute(&r.compensated.crop(r.rect), &want)?;
            let unc = Metrics::compute(&r.uncompensated.crop(r.rect), &want)?;
            rows.push(MetricRow::new("uncompensated", 0, unc));
            rows.push(MetricRow::new("compensated", 0, comp));
            r.desired.save_png(dir.join("z_prime.png"))?;
            r.compensation.save_png(dir.join("z_star.png"))?;
            r.compensated.save_png(dir.join("capture.png"))?;
            r.uncompensated.save_png(dir.join("uncompensated.png"))?;
            write_rows(&dir.join("report.csv"), &rows)?;
            info!("PSNR {:.2} dB (uncompensated {:.2} dB)", comp.psnr, unc.psnr);
        }
        None => {
            let desired = g.apply_fit(&z)?;
            desired.save_png(dir.join("z_prime.png"))?;
            model.compensate(&desired)?.save_png(dir.join("z_star.png"))?;
        }
    }
    Ok(CompensateOutcome { dir: dir.path, rows })
}

#[derive(Args, Clone, Debug, Default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained or simplified checkpoints; repeatable.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    /// Two-step methods to include; repeatable.
    #[arg(long)]
    pub baseline: Vec<Variant>,
    /// Validation images rendered as comparison panels.
    #[arg(long, default_value_t = 4)]
    pub panels: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct EvaluateOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
}

fn model_label(path: &Path) -> Result<String> {
    let ck = Checkpoint::load(path)?;
    let no_refine = ck
        .meta("train.config")
        .and_then(|t| serde_json::from_str::<TrainConfig>(t).ok())
        .is_some_and(|c| c.no_refine);
    Ok(if no_refine { "compennet++ w/o refine".into() } else { "compennet++".into() })
}

/// Scores every requested method on the validation set and renders panels of
/// surface, uncompensated capture, target and each method's projector input.
pub fn evaluate(a: &EvaluateArgs) -> Result<EvaluateOutcome> {
    let cfg = resolve_config(a.config.as_deref(), Some(&a.data))?;
    let (data, meta) = Dataset::load(&a.data)?;
    let n_train = data.train_cam.len();
    let mut rows = vec![MetricRow::new("uncompensated", 0, uncompensated(&data)?)];
    let mut outputs: Vec<Vec<Image>> = Vec::new();
    for p in &a.model {
        let ck = Checkpoint::load(p)?;
        let (preds, v) = match ck.meta("model.kind") {
            Some("simplified") => simplified_protocol(&SimplifiedModel::from_checkpoint(&ck)?, &data)?,
            _ => full_model_protocol(&trained_model(&ck)?, &data)?,
        };
        let pairs = ck.meta("run.train_pairs").and_then(|s| s.parse().ok()).unwrap_or(n_train);
        rows.push(MetricRow::new(model_label(p)?, pairs, v.metrics));
        outputs.push(preds);
    }
    if !a.baseline.is_empty() {
        let setup = meta.setup()?;
        for &v in &a.baseline {
            let init = if v == Variant::CompennetSl { Some(pretrained(&cfg, cfg.baseline.photo_width)?) } else { None };
            let r = run_two_step(v, &setup, &data, &cfg.baseline, init.as_ref())?;
            rows.push(MetricRow::new(format!("{} w/ SL", v.name()), r.train_samples, r.validation.metrics));
            outputs.push(r.predictions);
        }
    }
    let dir = RunDir::create("evaluate", a.out.as_deref(), &cfg.output_root())?;
    write_rows(&dir.join("table.csv"), &rows)?;
    for i in 0..a.panels.min(data.val_cam.len()) {
        let mut imgs = vec![&data.surface, &data.val_cam[i], &data.val_proj[i]];
        imgs.extend(outputs.iter().map(|o| &o[i]));
        panel(&imgs).save_png(dir.join(format!("panel_{i:03}.png")))?;
    }
    let order: Vec<&str> = rows[1..].iter().map(|r| r.method.as_str()).collect();
    dir.write("panels.txt", format!("surface, uncompensated, target, {}\n", order.join(", ")))?;
    for r in &rows {
        info!("{:<28} #train {:>4}  PSNR {:>7.3}  RMSE {:.4}  SSIM {:.4}", r.method, r.train, r.psnr, r.rmse, r.ssim);
    }
    Ok(EvaluateOutcome { dir: dir.path, rows })
}

#[derive(Args, Clone, Debug, Default)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Methods to run; all when omitted. Repeatable.
    #[arg(long)]
    pub variant: Vec<Variant>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineRow {
    pub method: String,
    pub train: usize,
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub sl_invalid_fraction: Option<f64>,
    pub sl_filled_fraction: Option<f64>,
}

/// Runs the structured-light two-step methods and writes `baseline.csv`.
pub fn baseline(a: &BaselineArgs) -> Result<(PathBuf, Vec<BaselineRow>)> {
    let cfg = resolve_config(a.config.as_deref(), Some(&a.data))?;
    let (data, meta) = Dataset::load(&a.data)?;
    let setup = meta.setup()?;
    let variants = if a.variant.is_empty() { Variant::ALL.to_vec() } else { a.variant.clone() };
    let u = uncompensated(&data)?;
    let mut rows = vec![BaselineRow {
        method: "uncompensated".into(),
        train: 0,
        psnr: u.psnr,
        rmse: u.rmse,
        ssim: u.ssim,
        sl_invalid_fraction: None,
        sl_filled_fraction: None,
    }];
    for v in variants {
        let init = if v == Variant::CompennetSl { Some(pretrained(&cfg, cfg.baseline.photo_width)?) } else { None };
        let r = run_two_step(v, &setup, &data, &cfg.baseline, init.as_ref())?;
        let m = r.validation.metrics;
        info!("{:<14} PSNR {:.3}  RMSE {:.4}  SSIM {:.4}", v.name(), m.psnr, m.rmse, m.ssim);
        rows.push(BaselineRow {
            method: format!("{} w/ SL", v.name()),
            train: r.train_samples,
            psnr: m.psnr,
            rmse: m.rmse,
            ssim: m.ssim,
            sl_invalid_fraction: Some(r.invalid_fraction),
            sl_filled_fraction: Some(r.filled_fraction),
        });
    }
    let dir = RunDir::create("baseline", a.out.as_deref(), &cfg.output_root())?;
    let path = dir.join("baseline.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((dir.path, rows))
}

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Runs every finite-difference check; fails when any stage exceeds its tolerance.
pub fn gradcheck(a: &GradcheckArgs) -> Result<Vec<GradReport>> {
    let reports = run_suite(a.seed)?;
    for r in &reports {
        println!(
            "{:<28} max rel err {:.3e}  {:>6.2}s  {}",
            r.name,
            r.max_rel_error,
            r.seconds,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(reports)
}

/// Scores a trained checkpoint on a dataset directory with the paper protocol.
pub fn validation_of(model: &Path, data: &Path) -> Result<Metrics> {
    let (d, _) = Dataset::load(data)?;
    let (preds, _) = full_model_protocol(&trained_model(&Checkpoint::load(model)?)?, &d)?;
    Ok(score(&preds, &d.val_proj)?.metrics)
}
