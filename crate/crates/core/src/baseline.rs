//! Two-step comparison methods: gray-code structured light for geometry, then a
//! per-pixel thin-plate-spline color transfer or a photometric-only network.

use std::collections::VecDeque;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::ssim::l1_ssim_loss;
use crate::diffcore::Parameterized;
use crate::error::{Error, Result};
use crate::imaging::{norm_coord, Image, Mask, Metrics, SamplingGrid};
use crate::photometric::PhotometricNet;
use crate::simulator::{Dataset, SimSetup};
use crate::training::{predict_batched, score, Adam, TrainConfig, Validation};

/// Anything that can project an image and return the camera capture.
pub trait ProCam {
    fn proj_dims(&self) -> (usize, usize);
    fn cam_dims(&self) -> (usize, usize);
    fn capture(&self, x: &Image) -> Result<Image>;
}

impl ProCam for SimSetup {
    fn proj_dims(&self) -> (usize, usize) {
        SimSetup::proj_dims(self)
    }

    fn cam_dims(&self) -> (usize, usize) {
        SimSetup::cam_dims(self)
    }

    fn capture(&self, x: &Image) -> Result<Image> {
        SimSetup::capture(self, x)
    }
}

/// Bits needed to index `n` positions.
pub fn code_bits(n: usize) -> usize {
    (usize::BITS - (n.max(2) - 1).leading_zeros()) as usize
}

/// All-white, all-black, then a pattern and its complement for every column bit
/// (most significant first) followed by every row bit.
pub fn graycode_patterns(proj_w: usize, proj_h: usize) -> Result<Vec<Image>> {
    if proj_w < 2 || proj_h < 2 {
        return Err(Error::InvalidInput(format!("projector must be at least 2×2, got {proj_w}×{proj_h}")));
    }
    let mut out = vec![Image::gray(proj_h, proj_w, 1.0), Image::gray(proj_h, proj_w, 0.0)];
    for (bits, by_col) in [(code_bits(proj_w), true), (code_bits(proj_h), false)] {
        for b in (0..bits).rev() {
            let on = |i: usize, j: usize| {
                let k = if by_col { j } else { i };
                (k ^ (k >> 1)) >> b & 1 == 1
            };
            out.push(Image::from_fn(proj_h, proj_w, |i, j| [if on(i, j) { 1.0 } else { 0.0 }; 3]));
            out.push(Image::from_fn(proj_h, proj_w, |i, j| [if on(i, j) { 0.0 } else { 1.0 }; 3]));
        }
    }
    Ok(out)
}

/// Decoded correspondences.
#[derive(Clone, Debug)]
pub struct SlMapping {
    pub proj_dims: (usize, usize),
    /// Per camera pixel, the decoded projector pixel `(column, row)`.
    pub decoded: Vec<Option<(u32, u32)>>,
    pub valid: Mask,
    /// Projector frame → normalized camera coordinates, defined everywhere.
    pub inverse: SamplingGrid<f64>,
    pub invalid_fraction: f64,
    /// Projector pixels whose inverse was interpolated rather than observed.
    pub filled_fraction: f64,
}

fn luminance(img: &Image, k: usize) -> f32 {
    let plane = img.height() * img.width();
    (img.data()[k] + img.data()[plane + k] + img.data()[2 * plane + k]) / 3.0
}

/// Decodes captures ordered as [`graycode_patterns`]. A camera pixel is valid when
/// its white-minus-black contrast reaches `min_contrast` and the decoded position
/// lies inside the projector frame.
pub fn decode(captures: &[Image], proj_dims: (usize, usize), min_contrast: f32) -> Result<SlMapping> {
    let (ph, pw) = proj_dims;
    let (bx, by) = (code_bits(pw), code_bits(ph));
    if captures.len() != 2 + 2 * (bx + by) {
        return Err(Error::InvalidInput(format!(
            "expected {} captures for a {pw}×{ph} projector, got {}",
            2 + 2 * (bx + by),
            captures.len()
        )));
    }
    let (ch, cw) = captures[0].dims();
    if captures.iter().any(|c| c.dims() != (ch, cw)) {
        return Err(Error::ShapeMismatch("captures differ in size".into()));
    }
    let read = |k: usize, first: usize, bits: usize| {
        let mut g = 0usize;
        for b in 0..bits {
            let (p, q) = (&captures[first + 2 * b], &captures[first + 2 * b + 1]);
            g = g << 1 | usize::from(luminance(p, k) > luminance(q, k));
        }
        // Gray to binary.
        let mut v = g;
        let mut s = g >> 1;
        while s != 0 {
            v ^= s;
            s >>= 1;
        }
        v
    };
    let mut decoded = vec![None; ch * cw];
    for (k, d) in decoded.iter_mut().enumerate() {
        if luminance(&captures[0], k) - luminance(&captures[1], k) < min_contrast {
            continue;
        }
        let (x, y) = (read(k, 2, bx), read(k, 2 + 2 * bx, by));
        if x < pw && y < ph {
            *d = Some((x as u32, y as u32));
        }
    }
    let valid = Mask::from_fn(ch, cw, |i, j| decoded[i * cw + j].is_some());
    if valid.is_empty() {
        return Err(Error::AllInvalidDecode);
    }
    let invalid_fraction = 1.0 - valid.count() as f64 / (ch * cw) as f64;
    let (inverse, filled_fraction) = densify(&decoded, (ch, cw), proj_dims);
    Ok(SlMapping {
        proj_dims,
        decoded,
        valid,
        inverse,
        invalid_fraction,
        filled_fraction,
    })
}

/// Projector → camera grid: the mean camera position of every observed projector
/// pixel, holes seeded from the nearest observed pixel and relaxed towards the
/// average of their neighbours.
fn densify(decoded: &[Option<(u32, u32)>], (ch, cw): (usize, usize), (ph, pw): (usize, usize)) -> (SamplingGrid<f64>, f64) {
    let mut sum = vec![(0.0, 0.0, 0usize); ph * pw];
    for (k, d) in decoded.iter().enumerate() {
        if let Some((x, y)) = d {
            let s = &mut sum[*y as usize * pw + *x as usize];
            s.0 += norm_coord(k % cw, cw);
            s.1 += norm_coord(k / cw, ch);
            s.2 += 1;
        }
    }
    let known: Vec<bool> = sum.iter().map(|s| s.2 > 0).collect();
    let mut val: Vec<(f64, f64)> = sum.iter().map(|s| if s.2 > 0 { (s.0 / s.2 as f64, s.1 / s.2 as f64) } else { (0.0, 0.0) }).collect();
    let holes = known.iter().filter(|k| !**k).count();
    let neighbours = |k: usize| {
        let (i, j) = (k / pw, k % pw);
        let mut n = Vec::with_capacity(4);
        if i > 0 {
            n.push(k - pw);
        }
        if i + 1 < ph {
            n.push(k + pw);
        }
        if j > 0 {
            n.push(k - 1);
        }
        if j + 1 < pw {
            n.push(k + 1);
        }
        n
    };
    if holes > 0 {
        let mut seen = known.clone();
        let mut queue: VecDeque<usize> = (0..ph * pw).filter(|&k| known[k]).collect();
        while let Some(k) = queue.pop_front() {
            for n in neighbours(k) {
                if !seen[n] {
                    seen[n] = true;
                    val[n] = val[k];
                    queue.push_back(n);
                }
            }
        }
        for _ in 0..4 * (ph + pw) {
            let prev = val.clone();
            let mut change: f64 = 0.0;
            for k in (0..ph * pw).filter(|&k| !known[k]) {
                let ns = neighbours(k);
                let m = ns.len() as f64;
                let u = ns.iter().map(|&n| prev[n].0).sum::<f64>() / m;
                let v = ns.iter().map(|&n| prev[n].1).sum::<f64>() / m;
                change = change.max((u - val[k].0).abs()).max((v - val[k].1).abs());
                val[k] = (u, v);
            }
            if change < 1e-7 {
                break;
            }
        }
    }
    let grid = SamplingGrid::from_fn(ph, pw, |i, j| val[i * pw + j]);
    (grid, holes as f64 / (ph * pw) as f64)
}

/// Projects the gray-code sequence and decodes it.
pub fn structured_light(pro: &impl ProCam, min_contrast: f32) -> Result<SlMapping> {
    let (ph, pw) = pro.proj_dims();
    let caps = graycode_patterns(pw, ph)?
        .iter()
        .map(|p| pro.capture(p))
        .collect::<Result<Vec<_>>>()?;
    decode(&caps, (ph, pw), min_contrast)
}

impl SlMapping {
    /// Camera images resampled into the projector frame.
    pub fn warp(&self, cam: &Image) -> Result<Image> {
        crate::imaging::bilinear_sample(cam, &self.inverse)
    }

    /// Mean endpoint error against a reference grid, in projector-frame pixel units of the camera.
    pub fn endpoint_error(&self, reference: &SamplingGrid<f64>, cam_dims: (usize, usize)) -> f64 {
        self.inverse.mean_endpoint_error(reference, cam_dims, |_, _| true)
    }
}

/// `φ(r) = r`, the biharmonic kernel in three dimensions.
#[inline]
fn tps3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// A smoothing thin-plate spline from RGB to RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorSpline {
    pub centers: Vec<[f64; 3]>,
    /// Kernel weights per output channel, then four affine coefficients `[1, r, g, b]`.
    pub weights: Vec<[f64; 3]>,
    pub affine: [[f64; 3]; 4],
}

impl ColorSpline {
    /// Solves `[K − λI, P; Pᵀ, 0] [w; a] = [y; 0]`. The kernel `r` is conditionally
    /// negative definite, so smoothing subtracts `λ` on the diagonal.
    pub fn fit(inputs: &[[f64; 3]], outputs: &[[f64; 3]], lambda: f64) -> Result<Self> {
        let n = inputs.len();
        if n != outputs.len() || n < 4 {
            return Err(Error::DegenerateSamples(format!("{n} samples")));
        }
        let m = n + 4;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = tps3(&inputs[i], &inputs[j]) - if i == j { lambda } else { 0.0 };
            }
            let p = [1.0, inputs[i][0], inputs[i][1], inputs[i][2]];
            for (k, &pk) in p.iter().enumerate() {
                a[(i, n + k)] = pk;
                a[(n + k, i)] = pk;
            }
        }
        let lu = a.lu();
        let mut weights = vec![[0.0; 3]; n];
        let mut affine = [[0.0; 3]; 4];
        for c in 0..3 {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = outputs[i][c];
            }
            let sol = lu
                .solve(&rhs)
                .filter(|s| s.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::DegenerateSamples("singular spline system (coplanar or repeated colors)".into()))?;
            for i in 0..n {
                weights[i][c] = sol[i];
            }
            for k in 0..4 {
                affine[k][c] = sol[n + k];
            }
        }
        Ok(Self {
            centers: inputs.to_vec(),
            weights,
            affine,
        })
    }

    pub fn eval(&self, x: &[f64; 3]) -> [f64; 3] {
        let mut out: [f64; 3] = std::array::from_fn(|c| self.affine[0][c] + self.affine[1][c] * x[0] + self.affine[2][c] * x[1] + self.affine[3][c] * x[2]);
        for (ctr, w) in self.centers.iter().zip(&self.weights) {
            let r = tps3(x, ctr);
            for c in 0..3 {
                out[c] += w[c] * r;
            }
        }
        out
    }
}

/// Least-squares exponent `g` of `captured ≈ k · projected^g` over all channels of
/// the sample pairs, clamped to `[1, 3]`.
fn response_exponent(captured: &[Image], projected: &[Image]) -> f64 {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (c, p) in captured.iter().zip(projected) {
        for (&cv, &pv) in c.data().iter().zip(p.data()).step_by(7) {
            if pv >= 0.1 && cv >= 1e-3 {
                let (x, y) = ((pv as f64).ln(), (cv as f64).ln());
                n += 1.0;
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
            }
        }
    }
    let den = n * sxx - sx * sx;
    if n < 2.0 || den.abs() < 1e-12 {
        return 1.0;
    }
    ((n * sxy - sx * sy) / den).clamp(1.0, 3.0)
}

/// Per-pixel (or per-block) color splines mapping a captured color to the projector input producing it.
#[derive(Clone, Debug)]
pub struct TpsColorModel {
    pub dims: (usize, usize),
    /// Captured colors enter the splines as `c^(1/gamma)`, which makes a power-law
    /// display response close to linear.
    pub gamma: f64,
    pub block: usize,
    pub splines: Vec<ColorSpline>,
}

/// Sample pairs per projector pixel: `(captured, projected)` images, both projector-frame.
pub fn fit_tps_color(captured: &[Image], projected: &[Image], block: usize, lambda: f64) -> Result<TpsColorModel> {
    let dims = captured.first().map(Image::dims).ok_or_else(|| Error::DegenerateSamples("no samples".into()))?;
    if captured.len() != projected.len() || captured.iter().chain(projected).any(|i| i.dims() != dims) {
        return Err(Error::ShapeMismatch("color samples differ in count or size".into()));
    }
    if captured.len() < 20 {
        return Err(Error::DegenerateSamples(format!("{} samples, need at least 20", captured.len())));
    }
    let block = block.max(1);
    let (h, w) = dims;
    let gamma = response_exponent(captured, projected);
    let encode = |c: f64| c.max(0.0).powf(1.0 / gamma);
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let pixel = |img: &Image, i0: usize, j0: usize| -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for i in i0..(i0 + block).min(h) {
            for j in j0..(j0 + block).min(w) {
                let p = img.pixel(i, j);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    };
    let splines = (0..bh * bw)
        .into_par_iter()
        .map(|b| {
            let (i0, j0) = (b / bw * block, b % bw * block);
            let xs: Vec<[f64; 3]> = captured.iter().map(|c| pixel(c, i0, j0).map(encode)).collect();
            let ys: Vec<[f64; 3]> = projected.iter().map(|p| pixel(p, i0, j0)).collect();
            ColorSpline::fit(&xs, &ys, lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TpsColorModel { dims, gamma, block, splines })
}

impl TpsColorModel {
    /// Projector input predicted for a projector-frame captured image, clamped to `[0, 1]`.
    pub fn apply(&self, captured: &Image) -> Result<Image> {
        if captured.dims() != self.dims {
            return Err(Error::ShapeMismatch(format!("{:?} vs model {:?}", captured.dims(), self.dims)));
        }
        let bw = self.dims.1.div_ceil(self.block);
        let mut out = Image::from_fn(self.dims.0, self.dims.1, |i, j| {
            let p = captured.pixel(i, j);
            let s = &self.splines[(i / self.block) * bw + j / self.block];
            s.eval(&p.map(|v| (v as f64).max(0.0).powf(1.0 / self.gamma))).map(|v| v as f32)
        });
        out.clamp_unit();
        Ok(out)
    }
}

/// The 5³ plain colors (levels 0, 0.25, …, 1 per channel).
pub fn plain_colors() -> Vec<[f32; 3]> {
    let mut v = Vec::with_capacity(125);
    for r in 0..5 {
        for g in 0..5 {
            for b in 0..5 {
                v.push([r as f32 / 4.0, g as f32 / 4.0, b as f32 / 4.0]);
            }
        }
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TpsPlain,
    TpsTextured,
    CompennetSl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::TpsPlain, Variant::TpsTextured, Variant::CompennetSl];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::TpsPlain => "tps_plain",
            Variant::TpsTextured => "tps_textured",
            Variant::CompennetSl => "compennet_sl",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown baseline `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub min_contrast: f32,
    /// Spline smoothing; zero interpolates the samples exactly.
    pub lambda: f64,
    /// 1 fits every pixel; larger values share one spline per block.
    pub block: usize,
    pub photo_width: usize,
    pub compennet: TrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            min_contrast: 0.05,
            lambda: 1e-3,
            block: 4,
            photo_width: 32,
            compennet: TrainConfig::desk(),
        }
    }
}

/// Validation metrics of one two-step method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineReport {
    pub variant: Variant,
    pub validation: Validation,
    pub invalid_fraction: f64,
    pub filled_fraction: f64,
    pub train_samples: usize,
    /// Compensated projector inputs for the validation captures.
    #[serde(skip)]
    pub predictions: Vec<Image>,
}

/// Scores camera captures directly against the projector images they came from.
pub fn uncompensated(data: &Dataset) -> Result<Metrics> {
    Ok(score(&data.val_cam, &data.val_proj)?.metrics)
}

/// Photometric-only compensation network trained on SL-registered pairs.
pub fn train_photometric(
    net: &mut PhotometricNet<f32>,
    inputs: &[Image],
    surface: &Image,
    targets: &[Image],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let x = Image::stack::<f32>(&inputs.iter().collect::<Vec<_>>());
    let y = Image::stack::<f32>(&targets.iter().collect::<Vec<_>>());
    let s = surface.to_tensor::<f32>();
    let mut adam = Adam::new(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let idx = rand::seq::index::sample(&mut rng, x.n(), cfg.batch_size.min(x.n())).into_vec();
        net.zero_grad();
        let (pred, tape) = net.forward(&x.gather(&idx), &s)?;
        let (l, dy) = l1_ssim_loss(&pred, &y.gather(&idx), true)?;
        let l = l as f64;
        if !l.is_finite() {
            return Err(Error::Divergence { iteration: i, loss: l });
        }
        net.backward(&tape, &dy.expect("gradient requested"), false);
        adam.step(net.params_mut(), cfg.lr_at(i));
        losses.push(l);
    }
    Ok(losses)
}

/// Runs one two-step method end to end and scores it on the validation set.
///
/// `photo_init` seeds the network of the `compennet_sl` variant.
pub fn run_two_step(
    variant: Variant,
    pro: &impl ProCam,
    data: &Dataset,
    cfg: &BaselineConfig,
    photo_init: Option<&PhotometricNet<f32>>,
) -> Result<BaselineReport> {
    let sl = structured_light(pro, cfg.min_contrast)?;
    info!(
        "{}: SL decode invalid {:.1}%, filled {:.1}%",
        variant.name(),
        100.0 * sl.invalid_fraction,
        100.0 * sl.filled_fraction
    );
    let warp_all = |imgs: &[Image]| imgs.iter().map(|c| sl.warp(c)).collect::<Result<Vec<_>>>();
    let val_in = warp_all(&data.val_cam)?;
    let (preds, train_samples) = match variant {
        Variant::TpsPlain | Variant::TpsTextured => {
            let (captured, projected) = if variant == Variant::TpsPlain {
                let (ph, pw) = pro.proj_dims();
                let proj: Vec<Image> = plain_colors().into_iter().map(|c| Image::filled(ph, pw, c)).collect();
                let caps = proj.iter().map(|p| pro.capture(p).and_then(|c| sl.warp(&c))).collect::<Result<Vec<_>>>()?;
                (caps, proj)
            } else {
                (warp_all(&data.train_cam)?, data.train_proj.clone())
            };
            let model = fit_tps_color(&captured, &projected, cfg.block, cfg.lambda)?;
            let preds = val_in.iter().map(|c| model.apply(c)).collect::<Result<Vec<_>>>()?;
            (preds, captured.len())
        }
        Variant::CompennetSl => {
            let mut net = match photo_init {
                Some(n) => n.clone(),
                None => PhotometricNet::new(cfg.photo_width, &mut ChaCha8Rng::seed_from_u64(cfg.compennet.seed)),
            };
            let train_in = warp_all(&data.train_cam)?;
            let surface = sl.warp(&data.surface)?;
            train_photometric(&mut net, &train_in, &surface, &data.train_proj, &cfg.compennet)?;
            let s = surface.to_tensor::<f32>();
            let x = Image::stack::<f32>(&val_in.iter().collect::<Vec<_>>());
            let preds = predict_batched(&x, 16, |b| net.infer(b, &s))?;
            (preds, train_in.len())
        }
    };
    Ok(BaselineReport {
        variant,
        validation: score(&preds, &data.val_proj)?,
        invalid_fraction: sl.invalid_fraction,
        filled_fraction: sl.filled_fraction,
        train_samples,
        predictions: preds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{apply_homography, homography_from_points, SimParams};
    use nalgebra::Matrix3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Camera pixel `(x, y)` sees projector point `h·(x, y)`, nearest-neighbour, black outside.
    struct HomographyProCam {
        cam: (usize, usize),
        proj: (usize, usize),
        h: Matrix3<f64>,
        noise: f32,
    }

    impl HomographyProCam {
        fn new(noise: f32) -> Self {
            let cam = (80, 80);
            let proj = (48, 48);
            let quad = [(9.0, 12.0), (70.0, 8.0), (73.0, 68.0), (6.0, 71.0)];
            let corners = [(0.0, 0.0), (47.0, 0.0), (47.0, 47.0), (0.0, 47.0)];
            let h = homography_from_points(&quad, &corners).unwrap();
            Self { cam, proj, h, noise }
        }

        fn truth(&self) -> SamplingGrid<f64> {
            let inv = self.h.try_inverse().unwrap();
            let (ch, cw) = self.cam;
            SamplingGrid::from_fn(self.proj.0, self.proj.1, |i, j| {
                let (x, y) = apply_homography(&inv, j as f64, i as f64);
                (2.0 * x / (cw - 1) as f64 - 1.0, 2.0 * y / (ch - 1) as f64 - 1.0)
            })
        }
    }

    impl ProCam for HomographyProCam {
        fn proj_dims(&self) -> (usize, usize) {
            self.proj
        }

        fn cam_dims(&self) -> (usize, usize) {
            self.cam
        }

        fn capture(&self, x: &Image) -> Result<Image> {
            let mut rng = ChaCha8Rng::seed_from_u64(x.mean().to_bits());
            let normal = Normal::new(0.0f32, self.noise.max(1e-12)).unwrap();
            let (ph, pw) = self.proj;
            Ok(Image::from_fn(self.cam.0, self.cam.1, |i, j| {
                let (u, v) = apply_homography(&self.h, j as f64, i as f64);
                let (u, v) = (u.round(), v.round());
                let base = if u >= 0.0 && v >= 0.0 && (u as usize) < pw && (v as usize) < ph {
                    x.pixel(v as usize, u as usize)
                } else {
                    [0.0; 3]
                };
                base.map(|c| if self.noise > 0.0 { c + normal.sample(&mut rng) } else { c })
            }))
        }
    }

    fn endpoint_errors(a: &SamplingGrid<f64>, b: &SamplingGrid<f64>, (ch, cw): (usize, usize)) -> Vec<f64> {
        let (h, w) = a.dims();
        let mut e = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let ((x0, y0), (x1, y1)) = (a.get(i, j), b.get(i, j));
                e.push(((x0 - x1) * (cw - 1) as f64 / 2.0).hypot((y0 - y1) * (ch - 1) as f64 / 2.0));
            }
        }
        e
    }

    #[test]
    fn pattern_counts_and_complements() {
        assert_eq!(graycode_patterns(800, 600).unwrap().len(), 42);
        assert_eq!(graycode_patterns(256, 256).unwrap().len(), 34);
        let p = graycode_patterns(64, 48).unwrap();
        for k in (2..p.len()).step_by(2) {
            assert!(p[k].data().iter().zip(p[k + 1].data()).all(|(a, b)| a + b == 1.0));
        }
        assert!(graycode_patterns(1, 8).is_err());
    }

    #[test]
    fn identity_decode_is_exact() {
        let (h, w) = (24, 40);
        let caps = graycode_patterns(w, h).unwrap();
        let sl = decode(&caps, (h, w), 0.05).unwrap();
        for i in 0..h {
            for j in 0..w {
                assert_eq!(sl.decoded[i * w + j], Some((j as u32, i as u32)));
            }
        }
        assert_eq!(sl.invalid_fraction, 0.0);
        assert_eq!(sl.filled_fraction, 0.0);
        let e = endpoint_errors(&sl.inverse, &SamplingGrid::identity(h, w), (h, w));
        assert!(e.iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn homography_decode_within_a_pixel() {
        let pc = HomographyProCam::new(0.0);
        let sl = structured_light(&pc, 0.05).unwrap();
        let e = endpoint_errors(&sl.inverse, &pc.truth(), pc.cam);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        assert!(mean <= 1.0, "mean endpoint error {mean}");
        assert!(sl.invalid_fraction > 0.0);
    }

    #[test]
    fn noisy_decode_median_within_two_pixels() {
        let pc = HomographyProCam::new(0.02);
        let sl = structured_light(&pc, 0.05).unwrap();
        let mut e = endpoint_errors(&sl.inverse, &pc.truth(), pc.cam);
        e.sort_by(f64::total_cmp);
        assert!(e[e.len() / 2] <= 2.0, "median {}", e[e.len() / 2]);
    }

    #[test]
    fn black_captures_fail_to_decode() {
        let caps = vec![Image::gray(8, 8, 0.0); 2 + 2 * (3 + 3)];
        assert!(matches!(decode(&caps, (8, 8), 0.05), Err(Error::AllInvalidDecode)));
        assert!(decode(&caps[..5], (8, 8), 0.05).is_err());
    }

    fn random_colors(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()
    }

    #[test]
    fn spline_interpolates_samples() {
        let xs = random_colors(60, 1);
        let ys: Vec<[f64; 3]> = xs.iter().map(|x| [x[0] * x[1], (3.0 * x[2]).sin(), x[0].powi(3)]).collect();
        let s = ColorSpline::fit(&xs, &ys, 0.0).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let p = s.eval(x);
            for c in 0..3 {
                assert!((p[c] - y[c]).abs() <= 1e-3);
            }
        }
    }

    /// Plain-color samples through a per-channel response, as 2×2 images.
    fn plain_samples(response: impl Fn(f32) -> f32) -> (Vec<Image>, Vec<Image>) {
        let proj: Vec<Image> = plain_colors().into_iter().map(|c| Image::filled(2, 2, c)).collect();
        let caps = proj.iter().map(|p| Image::filled(2, 2, p.pixel(0, 0).map(&response))).collect();
        (caps, proj)
    }

    #[test]
    fn identity_response_gives_identity_model() {
        let (caps, proj) = plain_samples(|v| v);
        let model = fit_tps_color(&caps, &proj, 1, 0.0).unwrap();
        for x in random_colors(200, 2) {
            let c = x.map(|v| v as f32);
            let y = model.apply(&Image::filled(2, 2, c)).unwrap().pixel(1, 1);
            assert!((0..3).all(|k| (y[k] - c[k]).abs() <= 0.02), "{c:?} -> {y:?}");
        }
    }

    #[test]
    fn gamma_response_is_inverted() {
        let (caps, proj) = plain_samples(|v| v.powf(2.2));
        let model = fit_tps_color(&caps, &proj, 1, 0.0).unwrap();
        for k in 0..=80 {
            let v = 0.1 + k as f32 * 0.01;
            let y = model.apply(&Image::gray(2, 2, v.powf(2.2))).unwrap().pixel(0, 0);
            assert!(y.iter().all(|&c| (c - v).abs() <= 0.03), "{v} -> {y:?}");
        }
    }

    #[test]
    fn spline_rejects_degenerate_samples() {
        let xs = vec![[0.5; 3]; 10];
        assert!(ColorSpline::fit(&xs, &xs, 0.0).is_err());
        assert!(ColorSpline::fit(&xs[..3], &xs[..3], 0.0).is_err());
    }

    #[test]
    fn plain_tps_compensates_ideal_setup() {
        let setup = SimSetup::new(0, SimParams::identity(16)).unwrap();
        let proj: Vec<Image> = plain_colors().into_iter().map(|c| Image::filled(16, 16, c)).collect();
        let caps: Vec<Image> = proj.iter().map(|p| setup.capture(p).unwrap()).collect();
        let model = fit_tps_color(&caps, &proj, 4, 0.0).unwrap();
        assert_eq!(model.splines.len(), 16);
        let target = Image::from_fn(16, 16, |i, j| [i as f32 / 15.0, j as f32 / 15.0, 0.5]);
        let x = model.apply(&setup.capture(&target).unwrap()).unwrap();
        assert!(x.max_abs_diff(&target) <= 0.02);
    }
}
