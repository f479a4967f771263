//! Loss, task-specific initialization and the end-to-end optimization loop.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::DisplayGeometry;
use crate::diffcore::sampler::{grid_sample, grid_sample_backward};
use crate::diffcore::ssim::l1_ssim_loss;
use crate::diffcore::{Checkpoint, Param, Parameterized};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask, Metrics, SamplingGrid};
use crate::photometric::{trim_surface_branch, PhotometricNet, TrimmedPhotometricNet};
use crate::simulator::Dataset;
use crate::tensor::{Real, Tensor};
use crate::textures::procedural_image;
use crate::warp::{simplify_warp, AffineParams, TpsParams, WarpingNet, SMALL_INIT};

/// `ℓ1 + (1 − SSIM)` between a prediction and its target.
pub fn loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(l1_ssim_loss(pred, target, false)?.0.f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Fast,
    Faster,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "fast" => Ok(Self::Fast),
            "faster" => Ok(Self::Faster),
            other => Err(Error::InvalidInput(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First (0-based) iteration that runs at the decayed rate.
    pub lr_decay_at: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub val_every: usize,
    pub seed: u64,
    /// Freeze the refinement stage at the identity.
    pub no_refine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (iterations, batch_size, lr_decay_at) = match preset {
            Preset::Full => (1500, 48, 1000),
            Preset::Fast => (1000, 24, 667),
            Preset::Faster => (500, 16, 333),
        };
        Self {
            preset,
            iterations,
            batch_size,
            learning_rate: 1e-3,
            lr_decay_at,
            lr_decay_factor: 5.0,
            weight_decay: 1e-4,
            val_every: 100,
            seed: 0,
            no_refine: false,
        }
    }

    /// The full preset with the CPU-sized batch of 16.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            ..Self::preset(Preset::Full)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("train config: {m}")));
        if self.iterations == 0 || self.batch_size == 0 || self.val_every == 0 {
            return bad("iterations, batch size and validation interval must be positive");
        }
        if !(self.learning_rate > 0.0 && self.lr_decay_factor > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rate and decay factor must be positive");
        }
        if self.lr_decay_at >= self.iterations {
            return bad("decay iteration must come before the last iteration");
        }
        Ok(())
    }

    /// Learning rate used by 0-based iteration `i`.
    pub fn lr_at(&self, i: usize) -> f64 {
        if i < self.lr_decay_at {
            self.learning_rate
        } else {
            self.learning_rate / self.lr_decay_factor
        }
    }
}

/// Widths of the two sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub photo_width: usize,
    pub refine_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            photo_width: 32,
            refine_width: 32,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter; frozen parameters keep their moments at zero.
    pub fn step<T: Real>(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to a different parameter set");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let grads = p.grad.data();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k].f64() + self.weight_decay * w.f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let step = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                *w = T::lit(w.f64() - step);
            }
        }
    }

    fn save_into(&self, ck: &mut Checkpoint) {
        ck.set_meta("adam.t", self.t.to_string());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.insert(format!("adam.m.{i}"), vec![m.len()], m.clone());
            ck.insert(format!("adam.v.{i}"), vec![v.len()], v.clone());
        }
    }

    fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        self.t = ck.meta("adam.t").and_then(|s| s.parse().ok()).unwrap_or(0);
        self.m.clear();
        self.v.clear();
        let mut i = 0;
        while let (Ok(m), Ok(v)) = (ck.get(&format!("adam.m.{i}")), ck.get(&format!("adam.v.{i}"))) {
            self.m.push(m.values.clone());
            self.v.push(v.values.clone());
            i += 1;
        }
        Ok(())
    }
}

/// WarpingNet initialization: the affine stage maps the output frame onto the FOV
/// bounding rectangle, TPS kernel weights and refinement weights start near zero.
pub fn init_warp(geom: &DisplayGeometry, proj_dims: (usize, usize), refine_width: usize, seed: u64) -> Result<WarpingNet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = WarpingNet::new(proj_dims.0, proj_dims.1, refine_width, SMALL_INIT, &mut rng)?;
    net.set_affine(&bounding_rect_affine(geom)?);
    net.set_tps(&TpsParams::small_random(SMALL_INIT, &mut rng));
    Ok(net)
}

/// Normalized affine taking output pixel centers at the frame corners to the
/// corner pixel centers of the bounding rectangle.
pub fn bounding_rect_affine(geom: &DisplayGeometry) -> Result<AffineParams> {
    let r = geom.bounding_rect;
    if r.w < 2 || r.h < 2 {
        return Err(Error::DegenerateRect(r.w, r.h));
    }
    let (ch, cw) = geom.camera_dims();
    let n = crate::imaging::norm_coord;
    let (u0, u1) = (n(r.x, cw), n(r.x + r.w - 1, cw));
    let (v0, v1) = (n(r.y, ch), n(r.y + r.h - 1, ch));
    Ok(AffineParams::scale_translate((u1 - u0) / 2.0, (v1 - v0) / 2.0, (u1 + u0) / 2.0, (v1 + v0) / 2.0))
}

/// Settings of the setup-independent photometric pre-initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub textures: usize,
    pub size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            textures: 64,
            size: 32,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0x5eed,
        }
    }
}

/// A colorful surface texture `ṡ` for pre-initialization: a procedural image dimmed
/// by a random level.
fn pretrain_surface(rng: &mut impl Rng, seed: u64, size: usize) -> Image {
    let level: f32 = rng.random_range(0.0..0.8);
    let mut s = procedural_image(seed, rng.random(), size, size);
    s.data_mut().iter_mut().for_each(|v| *v *= level);
    s
}

/// Minibatch images sharing one surface texture during pre-initialization.
const PRETRAIN_GROUP: usize = 2;

/// Trains a fresh network to regress `max(0, x − ṡ)`, the linear channel-independent
/// compensation, with the rate divided by 5 for the last third. Returns the network
/// and the per-iteration loss.
pub fn init_photometric(width: usize, cfg: &PretrainConfig) -> Result<(PhotometricNet<f32>, Vec<f64>)> {
    if !cfg.size.is_multiple_of(4) || cfg.textures == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidInput("pretrain size must be divisible by 4 with textures and batch > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PhotometricNet::<f32>::new(width, &mut rng);
    // Every eighth input is a plain color.
    let textures: Vec<Image> = (0..cfg.textures as u64)
        .map(|i| {
            if i % 8 == 7 {
                Image::filled(cfg.size, cfg.size, std::array::from_fn(|_| rng.random()))
            } else {
                procedural_image(cfg.seed, i, cfg.size, cfg.size)
            }
        })
        .collect();
    let mut adam = Adam::new(0.0);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        net.zero_grad();
        let mut l = 0.0;
        let groups = cfg.batch_size.div_ceil(PRETRAIN_GROUP);
        for g in 0..groups {
            let st = pretrain_surface(&mut rng, cfg.seed ^ 0xa5a5, cfg.size).to_tensor::<f32>();
            let n = PRETRAIN_GROUP.min(cfg.batch_size - g * PRETRAIN_GROUP);
            let xs: Vec<&Image> = (0..n).map(|_| &textures[rng.random_range(0..textures.len())]).collect();
            let x = Image::stack::<f32>(&xs);
            let mut target = x.clone();
            for item in 0..target.n() {
                target
                    .item_mut(item)
                    .iter_mut()
                    .zip(st.data())
                    .for_each(|(t, &sv)| *t = (*t - sv).max(0.0));
            }
            let (y, tape) = net.forward(&x, &st)?;
            let (lg, dy) = l1_ssim_loss(&y, &target, true)?;
            l += lg as f64 / groups as f64;
            net.backward(&tape, &dy.expect("gradient requested"), false);
        }
        if !l.is_finite() {
            return Err(Error::Divergence { iteration: it, loss: l });
        }
        let lr = if 3 * it < 2 * cfg.iterations { cfg.learning_rate } else { cfg.learning_rate / 5.0 };
        adam.step(net.params_mut(), lr);
        losses.push(l);
        if (it + 1) % 100 == 0 {
            debug!("pretrain {}/{}: loss {l:.4}", it + 1, cfg.iterations);
        }
    }
    Ok((net, losses))
}

/// Stacks camera images and zeroes everything outside `mask`.
pub fn masked_stack(images: &[Image], mask: &Mask) -> Result<Tensor<f32>> {
    if let Some(bad) = images.iter().find(|i| i.dims() != mask.dims()) {
        return Err(Error::ShapeMismatch(format!("camera image {:?} vs mask {:?}", bad.dims(), mask.dims())));
    }
    let refs: Vec<&Image> = images.iter().collect();
    let mut t = Image::stack::<f32>(&refs);
    apply_mask(&mut t, mask);
    Ok(t)
}

fn apply_mask<T: Real>(t: &mut Tensor<T>, mask: &Mask) {
    let plane = mask.data();
    for chunk in t.data_mut().chunks_mut(plane.len()) {
        chunk.iter_mut().zip(plane).filter(|(_, &m)| !m).for_each(|(v, _)| *v = T::zero());
    }
}

fn tensor_images(t: &Tensor<f32>) -> Vec<Image> {
    (0..t.n()).map(|i| Image::from_tensor(t, i)).collect()
}

fn check_camera(t: &Tensor<f32>, mask: &Mask) -> Result<()> {
    if t.c() != 3 || (t.h(), t.w()) != mask.dims() {
        return Err(Error::ShapeMismatch(format!("camera batch {:?} vs mask {:?}", t.shape(), mask.dims())));
    }
    Ok(())
}

fn write_geometry(geom: &DisplayGeometry, ck: &mut Checkpoint) -> Result<()> {
    let json = serde_json::to_string(geom).map_err(|e| Error::Format {
        what: "geometry",
        detail: e.to_string(),
    })?;
    ck.set_meta("geometry", json);
    let (h, w) = geom.fov_mask.dims();
    let values = geom.fov_mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    ck.insert("geometry.fov_mask", vec![h, w], values);
    Ok(())
}

fn read_geometry(ck: &Checkpoint) -> Result<DisplayGeometry> {
    let bad = |detail: String| Error::Format {
        what: "checkpoint",
        detail,
    };
    let json = ck.meta("geometry").ok_or_else(|| bad("missing display geometry".into()))?;
    let mut geom: DisplayGeometry = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    let arr = ck.get("geometry.fov_mask")?;
    if arr.shape.len() != 2 {
        return Err(bad("FOV mask must be 2-D".into()));
    }
    let (h, w) = (arr.shape[0], arr.shape[1]);
    geom.fov_mask = Mask::from_fn(h, w, |y, x| arr.values[y * w + x] > 0.5);
    Ok(geom)
}

/// The learnable compensation model `π†(x̃; s̃) = F†(T⁻¹(x̃); T⁻¹(s̃))`.
#[derive(Clone, Debug)]
pub struct CompenModel {
    pub warp: WarpingNet<f32>,
    pub photo: PhotometricNet<f32>,
    /// Camera-frame surface capture, already restricted to the FOV.
    pub surface: Tensor<f32>,
    pub geometry: DisplayGeometry,
}

impl CompenModel {
    pub fn new(warp: WarpingNet<f32>, photo: PhotometricNet<f32>, surface: &Image, geometry: DisplayGeometry) -> Result<Self> {
        let surface = masked_stack(std::slice::from_ref(surface), &geometry.fov_mask)?;
        Ok(Self {
            warp,
            photo,
            surface,
            geometry,
        })
    }

    /// Output (projector) resolution.
    pub fn proj_dims(&self) -> (usize, usize) {
        self.warp.dims()
    }

    /// Full inference on raw camera images; the warp is evaluated separately for the
    /// input batch and for the surface image, as in the unsimplified network.
    pub fn predict(&self, cam: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_camera(cam, &self.geometry.fov_mask)?;
        let mut x = cam.clone();
        apply_mask(&mut x, &self.geometry.fov_mask);
        let xw = grid_sample(&x, &self.warp.grid()?);
        let sw = grid_sample(&self.surface, &self.warp.grid()?);
        self.photo.infer(&xw, &sw)
    }

    /// Accumulates parameter gradients of the loss on a pre-masked camera batch.
    /// Returns the loss and, if requested, the gradient w.r.t. that batch.
    pub fn accumulate_gradients(&mut self, cam: &Tensor<f32>, target: &Tensor<f32>, want_cam_grad: bool) -> Result<(f64, Option<Tensor<f32>>)> {
        let (grid, wtape) = self.warp.forward()?;
        let xw = grid_sample(cam, &grid);
        let sw = grid_sample(&self.surface, &grid);
        let (y, ptape) = self.photo.forward(&xw, &sw)?;
        let (l, dy) = l1_ssim_loss(&y, target, true)?;
        let (dxw, dsw) = self.photo.backward(&ptape, &dy.expect("gradient requested"), true);
        let (h, w) = grid.dims();
        let mut dgrid = SamplingGrid::zeros(h, w);
        let mut dcam = want_cam_grad.then(|| Tensor::zeros(cam.shape()));
        grid_sample_backward(cam, &grid, &dxw.expect("input gradient requested"), dcam.as_mut(), Some(&mut dgrid));
        grid_sample_backward(&self.surface, &grid, &dsw, None, Some(&mut dgrid));
        self.warp.backward(&wtape, &dgrid);
        Ok((l as f64, dcam))
    }

    /// Loss and its gradient w.r.t. raw (unmasked) camera inputs.
    pub fn camera_gradient(&mut self, cam: &Tensor<f32>, target: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        check_camera(cam, &self.geometry.fov_mask)?;
        let mut x = cam.clone();
        apply_mask(&mut x, &self.geometry.fov_mask);
        let (l, d) = self.accumulate_gradients(&x, target, true)?;
        let mut d = d.expect("camera gradient requested");
        apply_mask(&mut d, &self.geometry.fov_mask);
        Ok((l, d))
    }

    pub fn zero_grad(&mut self) {
        self.warp.zero_grad();
        self.photo.zero_grad();
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v = self.warp.params_mut();
        v.extend(self.photo.params_mut());
        v
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.set_meta("model.kind", "full");
        self.warp.save_into(&mut ck);
        self.photo.save_into(&mut ck);
        ck.insert_tensor("model.surface", &self.surface);
        write_geometry(&self.geometry, &mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("model.kind") != Some("full") {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "not a full (unsimplified) model".into(),
            });
        }
        Ok(Self {
            warp: WarpingNet::load_from(ck)?,
            photo: PhotometricNet::load_from(ck)?,
            surface: ck.tensor("model.surface")?,
            geometry: read_geometry(ck)?,
        })
    }

    /// Replaces the warping cascade by its grid and the surface branch by constant biases.
    pub fn simplify(&self) -> Result<SimplifiedModel> {
        let grid = simplify_warp(&self.warp)?;
        let sw = grid_sample(&self.surface, &grid);
        Ok(SimplifiedModel {
            photo: trim_surface_branch(&self.photo, &sw)?,
            grid,
            geometry: self.geometry.clone(),
        })
    }
}

/// The deployed model: one fixed sampling grid and a trimmed compensation network.
#[derive(Clone, Debug)]
pub struct SimplifiedModel {
    pub grid: SamplingGrid<f32>,
    pub photo: TrimmedPhotometricNet<f32>,
    pub geometry: DisplayGeometry,
}

impl SimplifiedModel {
    pub fn predict(&self, cam: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_camera(cam, &self.geometry.fov_mask)?;
        let mut x = cam.clone();
        apply_mask(&mut x, &self.geometry.fov_mask);
        self.photo.infer(&grid_sample(&x, &self.grid))
    }

    /// `z* = π'†(z')` for one camera-frame desired image.
    pub fn compensate(&self, desired_cam: &Image) -> Result<Image> {
        Ok(Image::from_tensor(&self.predict(&desired_cam.to_tensor())?, 0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.set_meta("model.kind", "simplified");
        ck.insert_tensor("model.grid", &self.grid.to_tensor());
        self.photo.save_into(&mut ck);
        write_geometry(&self.geometry, &mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("model.kind") != Some("simplified") {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "not a simplified model".into(),
            });
        }
        Ok(Self {
            grid: SamplingGrid::from_tensor(&ck.tensor("model.grid")?),
            photo: TrimmedPhotometricNet::load_from(ck)?,
            geometry: read_geometry(ck)?,
        })
    }
}

/// Differences between the full and simplified paths on probe images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimplifyResiduals {
    /// Max abs difference of probe images warped by the cascade vs the stored grid.
    pub warp: f64,
    /// Max abs difference of the final outputs.
    pub photometric: f64,
}

pub fn simplify_residuals(full: &CompenModel, simple: &SimplifiedModel, cam: &Tensor<f32>) -> Result<SimplifyResiduals> {
    let mut x = cam.clone();
    apply_mask(&mut x, &full.geometry.fov_mask);
    let warp = grid_sample(&x, &full.warp.grid()?).max_abs_diff(&grid_sample(&x, &simple.grid));
    let photometric = full.predict(cam)?.max_abs_diff(&simple.predict(cam)?);
    Ok(SimplifyResiduals { warp, photometric })
}

/// Mean validation loss and metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub metrics: Metrics,
}

/// Scores predictions against targets: `ℓ1 + (1 − SSIM)` and PSNR/RMSE/SSIM per pair, averaged.
pub fn score(preds: &[Image], targets: &[Image]) -> Result<Validation> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut all = Vec::with_capacity(preds.len());
    let mut loss = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let m = Metrics::compute(p, t)?;
        let l1 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / p.data().len() as f64;
        loss += l1 + 1.0 - m.ssim;
        all.push(m);
    }
    Ok(Validation {
        loss: loss / preds.len() as f64,
        metrics: Metrics::mean(&all),
    })
}

/// Runs `f` over `batch`-sized chunks of `t` and concatenates the resulting images.
pub fn predict_batched(t: &Tensor<f32>, batch: usize, mut f: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(t.n());
    let idx: Vec<usize> = (0..t.n()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(tensor_images(&f(&t.gather(chunk))?));
    }
    Ok(out)
}

/// One line of the training curve; validation columns are filled every `val_every` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
    pub val_rmse: Option<f64>,
    pub val_ssim: Option<f64>,
}

pub fn write_curves(rows: &[CurveRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "curve CSV",
        detail: format!("{}: {e}", path.display()),
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: Validation,
    pub last: Validation,
    pub iterations: usize,
    pub seconds: f64,
}

const EVAL_BATCH: usize = 16;

/// Owns a model, its optimizer state and the masked training tensors.
pub struct Trainer {
    pub model: CompenModel,
    pub cfg: TrainConfig,
    pub curve: Vec<CurveRow>,
    iteration: usize,
    adam: Adam,
    cam: Tensor<f32>,
    proj: Tensor<f32>,
    val_cam: Tensor<f32>,
    val_proj: Vec<Image>,
}

impl Trainer {
    pub fn new(mut model: CompenModel, data: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.train_cam.is_empty() || data.train_cam.len() != data.train_proj.len() {
            return Err(Error::InvalidInput("training set is empty or unpaired".into()));
        }
        if data.val_cam.is_empty() || data.val_cam.len() != data.val_proj.len() {
            return Err(Error::InvalidInput("validation set is empty or unpaired".into()));
        }
        if let Some(p) = data.train_proj.iter().chain(&data.val_proj).find(|p| p.dims() != model.proj_dims()) {
            return Err(Error::ShapeMismatch(format!("projector image {:?}, model output {:?}", p.dims(), model.proj_dims())));
        }
        if cfg.no_refine {
            model.warp.disable_refine();
        }
        let mask = &model.geometry.fov_mask;
        let cam = masked_stack(&data.train_cam, mask)?;
        let val_cam = Image::stack::<f32>(&data.val_cam.iter().collect::<Vec<_>>());
        check_camera(&val_cam, mask)?;
        let adam = Adam::new(cfg.weight_decay);
        Ok(Self {
            proj: Image::stack(&data.train_proj.iter().collect::<Vec<_>>()),
            cam,
            val_cam,
            val_proj: data.val_proj.clone(),
            model,
            cfg,
            curve: Vec::new(),
            iteration: 0,
            adam,
        })
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Minibatch indices of 0-based iteration `i`; a pure function of seed and iteration.
    pub fn batch_indices(&self, i: usize) -> Vec<usize> {
        let n = self.cam.n();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rand::seq::index::sample(&mut rng, n, self.cfg.batch_size.min(n)).into_vec()
    }

    /// One optimization step; returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let i = self.iteration;
        let idx = self.batch_indices(i);
        let (x, y) = (self.cam.gather(&idx), self.proj.gather(&idx));
        self.model.zero_grad();
        let (l, _) = self.model.accumulate_gradients(&x, &y, false)?;
        if !l.is_finite() {
            return Err(Error::Divergence { iteration: i, loss: l });
        }
        let lr = self.cfg.lr_at(i);
        self.adam.step(self.model.params_mut(), lr);
        self.iteration += 1;
        Ok(l)
    }

    pub fn validate(&self) -> Result<Validation> {
        let preds = predict_batched(&self.val_cam, EVAL_BATCH, |b| self.model.predict(b))?;
        score(&preds, &self.val_proj)
    }

    fn log_validation(&mut self, loss: Option<f64>) -> Result<Validation> {
        let v = self.validate()?;
        info!(
            "iter {:>5}: val loss {:.4}  PSNR {:.3}  RMSE {:.4}  SSIM {:.4}",
            self.iteration, v.loss, v.metrics.psnr, v.metrics.rmse, v.metrics.ssim
        );
        self.curve.push(CurveRow {
            iteration: self.iteration,
            loss,
            lr: self.cfg.lr_at(self.iteration.saturating_sub(1)),
            val_loss: Some(v.loss),
            val_psnr: Some(v.metrics.psnr),
            val_rmse: Some(v.metrics.rmse),
            val_ssim: Some(v.metrics.ssim),
        });
        Ok(v)
    }

    /// Trains until the configured iteration count, validating at start, every
    /// `val_every` iterations and at the end.
    pub fn run(&mut self) -> Result<TrainReport> {
        self.run_with(|_| Ok(()))
    }

    /// [`Trainer::run`], calling `on_validate` after every validation.
    pub fn run_with(&mut self, mut on_validate: impl FnMut(&Trainer) -> Result<()>) -> Result<TrainReport> {
        let start = Instant::now();
        let initial = if self.iteration == 0 {
            self.log_validation(None)?
        } else {
            self.curve
                .iter()
                .find(|r| r.iteration == 0)
                .and_then(row_validation)
                .map_or_else(|| self.validate(), Ok)?
        };
        let mut last = initial;
        while !self.is_done() {
            let lr = self.cfg.lr_at(self.iteration);
            let l = self.step()?;
            if self.iteration.is_multiple_of(self.cfg.val_every) || self.is_done() {
                last = self.log_validation(Some(l))?;
                on_validate(self)?;
            } else {
                self.curve.push(CurveRow {
                    iteration: self.iteration,
                    loss: Some(l),
                    lr,
                    val_loss: None,
                    val_psnr: None,
                    val_rmse: None,
                    val_ssim: None,
                });
            }
        }
        if let Some(v) = self.curve.last().and_then(row_validation) {
            last = v;
        }
        Ok(TrainReport {
            initial,
            last,
            iterations: self.iteration,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Model, optimizer moments, iteration counter and curve so far.
    pub fn state_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        self.adam.save_into(&mut ck);
        ck.set_meta("train.iteration", self.iteration.to_string());
        let enc = |e: serde_json::Error| Error::Format {
            what: "train state",
            detail: e.to_string(),
        };
        ck.set_meta("train.config", serde_json::to_string(&self.cfg).map_err(enc)?);
        ck.set_meta("train.curve", serde_json::to_string(&self.curve).map_err(enc)?);
        Ok(ck)
    }

    /// Continues a run from [`Trainer::state_checkpoint`] output.
    pub fn resume(ck: &Checkpoint, data: &Dataset) -> Result<Self> {
        let dec = |e: serde_json::Error| Error::Format {
            what: "train state",
            detail: e.to_string(),
        };
        let missing = |k: &str| Error::Format {
            what: "train state",
            detail: format!("missing `{k}`"),
        };
        let cfg: TrainConfig = serde_json::from_str(ck.meta("train.config").ok_or_else(|| missing("train.config"))?).map_err(dec)?;
        let mut t = Self::new(CompenModel::from_checkpoint(ck)?, data, cfg)?;
        t.adam.load_from(ck)?;
        t.iteration = ck
            .meta("train.iteration")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| missing("train.iteration"))?;
        t.curve = serde_json::from_str(ck.meta("train.curve").ok_or_else(|| missing("train.curve"))?).map_err(dec)?;
        Ok(t)
    }
}

fn row_validation(r: &CurveRow) -> Option<Validation> {
    Some(Validation {
        loss: r.val_loss?,
        metrics: Metrics {
            psnr: r.val_psnr?,
            rmse: r.val_rmse?,
            ssim: r.val_ssim?,
        },
    })
}

/// Builds an initialized model for a dataset: FOV mask and rectangles from the
/// surface and dark captures, then both initializations.
pub fn init_model(data: &Dataset, model: &ModelConfig, photo: PhotometricNet<f32>, seed: u64) -> Result<CompenModel> {
    let proj_dims = data
        .train_proj
        .first()
        .map(Image::dims)
        .ok_or_else(|| Error::InvalidInput("empty training set".into()))?;
    if photo.width() != model.photo_width {
        return Err(Error::InvalidInput(format!(
            "pre-initialized photometric width {} differs from configured {}",
            photo.width(),
            model.photo_width
        )));
    }
    let geometry = DisplayGeometry::from_captures(&data.surface, &data.dark, proj_dims)?;
    let warp = init_warp(&geometry, proj_dims, model.refine_width, seed)?;
    CompenModel::new(warp, photo, &data.surface, geometry)
}
