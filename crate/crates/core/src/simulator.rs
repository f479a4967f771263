//! Deterministic projector-camera forward model used as ground truth.
//!
//! A capture is `clamp(V ⊙ (M · warp(x)^γ) ⊙ a + a ⊙ e + noise)`: the projector
//! image is warped into the camera frame, passed through a per-channel gamma
//! and a color-mixing matrix, modulated by vignetting and surface albedo, and
//! lit by low-frequency ambient light. Every field is a function of normalized
//! coordinates drawn from the setup seed, so a seed describes the same setup at
//! any resolution.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bilinear_sample, norm_coord, Image, Mask, SamplingGrid};
use crate::textures::{fractal_noise, procedural_image};

/// Pixel distances in the parameters are expressed at this reference width.
pub const REFERENCE_SIZE: f64 = 256.0;

const FIXED_POINT_TOL: f64 = 1e-4;
const FIXED_POINT_ITERS: usize = 50;
/// Low-frequency cosine modes (0.25–1 cycles per frame) and their amplitude weight.
const COARSE_MODES: (usize, f64, f64, f64) = (4, 0.25, 1.0, 1.0);
/// Weaker high-frequency modes (3–5 cycles per frame), finer than the TPS lattice resolves.
const FINE_MODES: (usize, f64, f64, f64) = (4, 3.0, 5.0, 0.35);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Identity,
    Homography,
    /// Homography plus a smooth displacement field.
    Full,
}

/// Knobs of a simulated setup. Distances are in pixels at 256×256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub cam_height: usize,
    pub cam_width: usize,
    pub proj_height: usize,
    pub proj_width: usize,
    pub geometry: GeometryKind,
    pub max_displacement_px: f64,
    /// Fraction of the camera frame left dark around the projected quad, per side.
    pub fov_inset: f64,
    /// Random perturbation of the quad corners, as a fraction of the frame.
    pub corner_jitter: f64,
    /// When false, gamma, mixing, albedo, ambient and vignetting are all identity.
    pub photometric: bool,
    pub noise_sigma: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            cam_height: 256,
            cam_width: 256,
            proj_height: 256,
            proj_width: 256,
            geometry: GeometryKind::Full,
            max_displacement_px: 8.0,
            fov_inset: 0.12,
            corner_jitter: 0.05,
            photometric: true,
            noise_sigma: 0.005,
        }
    }
}

impl SimParams {
    /// Same setup at a square resolution `size` for both devices.
    pub fn at_size(mut self, size: usize) -> Self {
        self.cam_height = size;
        self.cam_width = size;
        self.proj_height = size;
        self.proj_width = size;
        self
    }

    /// Every transform is the identity and there is no noise.
    pub fn identity(size: usize) -> Self {
        Self {
            geometry: GeometryKind::Identity,
            photometric: false,
            noise_sigma: 0.0,
            fov_inset: 0.0,
            corner_jitter: 0.0,
            ..Self::default()
        }
        .at_size(size)
    }

    fn validate(&self) -> Result<()> {
        if self.cam_height < 2 || self.cam_width < 2 || self.proj_height < 2 || self.proj_width < 2 {
            return Err(Error::InvalidInput("device resolutions must be at least 2×2".into()));
        }
        if !(0.0..0.45).contains(&self.fov_inset) || !(0.0..0.2).contains(&self.corner_jitter) {
            return Err(Error::InvalidInput("fov_inset must be in [0, 0.45) and corner_jitter in [0, 0.2)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_displacement_px >= 0.0) {
            return Err(Error::InvalidInput("noise and displacement must be non-negative".into()));
        }
        Ok(())
    }
}

/// One cosine mode of the displacement field, in normalized camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Mode {
    fu: f64,
    fv: f64,
    phase: f64,
    ax: f64,
    ay: f64,
}

/// Ground-truth simulator state; immutable after construction.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub seed: u64,
    pub params: SimParams,
    /// Camera-normalized → projector-normalized homography.
    pub homography: Matrix3<f64>,
    modes: Vec<Mode>,
    pub mixing: [[f64; 3]; 3],
    pub gamma: [f64; 3],
    pub albedo: Image,
    pub ambient: Image,
    pub vignetting: Image,
    /// Camera-frame grid of projector coordinates (the forward warp).
    capture_grid: SamplingGrid<f64>,
}

/// Maps four source points onto four destination points.
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let ((x, y), (u, v)) = (src[k], dst[k]);
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidInput("degenerate homography correspondences".into()))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

pub fn apply_homography(h: &Matrix3<f64>, u: f64, v: f64) -> (f64, f64) {
    let p = h * Vector3::new(u, v, 1.0);
    (p[0] / p[2], p[1] / p[2])
}

/// FNV-1a over the image's bit patterns and dimensions.
fn image_hash(x: &Image) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(&(x.height() as u64).to_le_bytes());
    eat(&(x.width() as u64).to_le_bytes());
    for v in x.data() {
        eat(&v.to_bits().to_le_bytes());
    }
    h
}

impl SimSetup {
    pub fn new(seed: u64, params: SimParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, cw) = (params.cam_height, params.cam_width);

        // Geometry: the projector frame lands on a jittered inset quad of the camera frame.
        let homography = if params.geometry == GeometryKind::Identity {
            Matrix3::identity()
        } else {
            let m = 1.0 - 2.0 * params.fov_inset;
            let j = 2.0 * params.corner_jitter;
            let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
            let quad: [(f64, f64); 4] =
                std::array::from_fn(|k| (corners[k].0 * m + rng.random_range(-j..=j), corners[k].1 * m + rng.random_range(-j..=j)));
            homography_from_points(&quad, &corners)?
        };
        let mut modes = Vec::new();
        if params.geometry == GeometryKind::Full && params.max_displacement_px > 0.0 {
            for (count, lo, hi, weight) in [COARSE_MODES, FINE_MODES] {
                for _ in 0..count {
                    let r: f64 = rng.random_range(lo..hi);
                    let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    modes.push(Mode {
                        fu: r * t.cos(),
                        fv: r * t.sin(),
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                        ax: weight * rng.random_range(-1.0..1.0),
                        ay: weight * rng.random_range(-1.0..1.0),
                    });
                }
            }
            // Normalize on a fixed lattice so the amplitude does not depend on resolution.
            let mut peak: f64 = 0.0;
            for i in 0..=64 {
                for k in 0..=64 {
                    let (dx, dy) = displacement(&modes, norm_coord(k, 65), norm_coord(i, 65));
                    peak = peak.max(dx.hypot(dy));
                }
            }
            let amp = params.max_displacement_px * 2.0 / (REFERENCE_SIZE - 1.0);
            for m in &mut modes {
                m.ax *= amp / peak;
                m.ay *= amp / peak;
            }
        }

        let (mixing, gamma, albedo, ambient, vignetting) = if params.photometric {
            let mut mixing = [[0.0; 3]; 3];
            for (r, row) in mixing.iter_mut().enumerate() {
                let mut off = 0.0;
                for (c, v) in row.iter_mut().enumerate() {
                    if r != c {
                        *v = rng.random_range(0.0..0.15);
                        off += *v;
                    }
                }
                row[r] = 1.0 - off;
            }
            let gamma = std::array::from_fn(|_| rng.random_range(1.5..2.4));
            let mut albedo = fractal_noise(ch, cw, 3, 3, &mut rng);
            let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.0));
            for c in 0..3 {
                albedo.plane_mut(c).iter_mut().for_each(|v| *v = (0.35 + 0.65 * *v) * tint[c]);
            }
            let mut ambient = fractal_noise(ch, cw, 2, 1, &mut rng);
            let level: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.12));
            for c in 0..3 {
                ambient.plane_mut(c).iter_mut().for_each(|v| *v = level[c] * (0.6 + 0.4 * *v));
            }
            let (ou, ov): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let rmax = (1.0 + ou.abs()).hypot(1.0 + ov.abs());
            let vignetting = Image::from_fn(ch, cw, |y, x| {
                let r = (norm_coord(x, cw) - ou).hypot(norm_coord(y, ch) - ov) / rmax;
                [(1.0 - 0.3 * r * r) as f32; 3]
            });
            (mixing, gamma, albedo, ambient, vignetting)
        } else {
            (
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                [1.0; 3],
                Image::gray(ch, cw, 1.0),
                Image::gray(ch, cw, 0.0),
                Image::gray(ch, cw, 1.0),
            )
        };

        let mut setup = Self {
            seed,
            params,
            homography,
            modes,
            mixing,
            gamma,
            albedo,
            ambient,
            vignetting,
            capture_grid: SamplingGrid::zeros(2, 2),
        };
        setup.capture_grid = if setup.params.geometry == GeometryKind::Identity {
            SamplingGrid::identity(ch, cw)
        } else {
            SamplingGrid::from_fn(ch, cw, |i, j| setup.forward_warp(norm_coord(j, cw), norm_coord(i, ch)))
        };
        Ok(setup)
    }

    /// Camera-normalized position → projector-normalized position.
    pub fn forward_warp(&self, u: f64, v: f64) -> (f64, f64) {
        let (pu, pv) = apply_homography(&self.homography, u, v);
        let (du, dv) = displacement(&self.modes, u, v);
        (pu + du, pv + dv)
    }

    pub fn cam_dims(&self) -> (usize, usize) {
        (self.params.cam_height, self.params.cam_width)
    }

    pub fn proj_dims(&self) -> (usize, usize) {
        (self.params.proj_height, self.params.proj_width)
    }

    /// The capture without sensor noise and before the final clamp.
    pub fn capture_linear(&self, x: &Image) -> Result<Image> {
        if x.dims() != self.proj_dims() {
            return Err(Error::ShapeMismatch(format!(
                "projector image is {:?}, setup expects {:?}",
                x.dims(),
                self.proj_dims()
            )));
        }
        let warped = bilinear_sample(x, &self.capture_grid)?;
        let (h, w) = self.cam_dims();
        let mut out = Image::new(h, w);
        let g = self.gamma;
        for y in 0..h {
            for xx in 0..w {
                let p = warped.pixel(y, xx);
                let lin: [f64; 3] = std::array::from_fn(|c| (p[c].max(0.0) as f64).powf(g[c]));
                let a = self.albedo.pixel(y, xx);
                let e = self.ambient.pixel(y, xx);
                let vig = self.vignetting.get(0, y, xx) as f64;
                let rgb = std::array::from_fn(|c| {
                    let m = self.mixing[c];
                    let mixed = m[0] * lin[0] + m[1] * lin[1] + m[2] * lin[2];
                    (vig * mixed * a[c] as f64 + (a[c] * e[c]) as f64) as f32
                });
                out.set_pixel(y, xx, rgb);
            }
        }
        Ok(out)
    }

    /// `x̃ = T(F(x))`; the noise is a deterministic function of the seed and `x`.
    pub fn capture(&self, x: &Image) -> Result<Image> {
        let mut out = self.capture_linear(x)?;
        if self.params.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ image_hash(x));
            let normal = Normal::new(0.0f32, self.params.noise_sigma as f32).expect("valid sigma");
            out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        out.clamp_unit();
        Ok(out)
    }

    /// Capture of the plain gray projector image `x0 = 0.5`.
    pub fn surface_capture(&self) -> Result<Image> {
        let (h, w) = self.proj_dims();
        self.capture(&Image::gray(h, w, 0.5))
    }

    pub fn dark_capture(&self) -> Result<Image> {
        let (h, w) = self.proj_dims();
        self.capture(&Image::gray(h, w, 0.0))
    }

    /// Camera pixels whose footprint centre lands on a projector pixel.
    pub fn fov_mask(&self) -> Mask {
        let (h, w) = self.cam_dims();
        let (ph, pw) = self.proj_dims();
        let (mu, mv) = (1.0 + 1.0 / (pw as f64 - 1.0), 1.0 + 1.0 / (ph as f64 - 1.0));
        Mask::from_fn(h, w, |i, j| {
            let (u, v) = self.capture_grid.get(i, j);
            u.abs() <= mu && v.abs() <= mv
        })
    }

    /// The forward warp as a camera-frame grid of projector coordinates.
    pub fn capture_grid(&self) -> &SamplingGrid<f64> {
        &self.capture_grid
    }

    /// Projector-frame grid of camera coordinates inverting the forward warp.
    pub fn ground_truth_grid(&self, h: usize, w: usize) -> Result<SamplingGrid<f64>> {
        if self.params.geometry == GeometryKind::Identity {
            return Ok(SamplingGrid::identity(h, w));
        }
        let inv = self
            .homography
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("singular homography".into()))?;
        let mut grid = SamplingGrid::zeros(h, w);
        for i in 0..h {
            let pv = norm_coord(i, h);
            for j in 0..w {
                let pu = norm_coord(j, w);
                let mut c = apply_homography(&inv, pu, pv);
                let mut converged = self.modes.is_empty();
                for _ in 0..FIXED_POINT_ITERS {
                    let (du, dv) = displacement(&self.modes, c.0, c.1);
                    let next = apply_homography(&inv, pu - du, pv - dv);
                    let step = (next.0 - c.0).abs().max((next.1 - c.1).abs());
                    c = next;
                    if step < FIXED_POINT_TOL {
                        converged = true;
                        break;
                    }
                }
                if !converged || !c.0.is_finite() || !c.1.is_finite() {
                    return Err(Error::NonConvergence { row: i, col: j });
                }
                grid.set(i, j, c.0, c.1);
            }
        }
        Ok(grid)
    }

    pub fn meta(&self) -> SetupMeta {
        SetupMeta {
            seed: self.seed,
            params: self.params.clone(),
            derived: DerivedSummary {
                gamma: self.gamma,
                mixing: self.mixing,
                homography: std::array::from_fn(|r| std::array::from_fn(|c| self.homography[(r, c)])),
            },
        }
    }
}

fn displacement(modes: &[Mode], u: f64, v: f64) -> (f64, f64) {
    let mut d = (0.0, 0.0);
    for m in modes {
        let c = (std::f64::consts::PI * (m.fu * u + m.fv * v) + m.phase).cos();
        d.0 += m.ax * c;
        d.1 += m.ay * c;
    }
    d
}

/// Human-readable record of a setup; the seed and parameters regenerate it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupMeta {
    pub seed: u64,
    pub params: SimParams,
    pub derived: DerivedSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedSummary {
    pub gamma: [f64; 3],
    pub mixing: [[f64; 3]; 3],
    pub homography: [[f64; 3]; 3],
}

impl SetupMeta {
    pub fn setup(&self) -> Result<SimSetup> {
        SimSetup::new(self.seed, self.params.clone())
    }
}

/// Where projector source images come from.
#[derive(Clone, Debug)]
pub enum Sources {
    Procedural { seed: u64 },
    /// PNG files, taken in lexicographic order and resized to the projector resolution.
    Directory(PathBuf),
}

impl Sources {
    fn take(&self, n: usize, h: usize, w: usize) -> Result<Vec<Image>> {
        match self {
            Sources::Procedural { seed } => Ok((0..n as u64).map(|i| procedural_image(*seed, i, h, w)).collect()),
            Sources::Directory(dir) => {
                let mut files: Vec<PathBuf> = fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                files.sort();
                if files.len() < n {
                    return Err(Error::InsufficientSources {
                        needed: n,
                        available: files.len(),
                    });
                }
                files[..n].iter().map(|p| load_resized(p, h, w)).collect()
            }
        }
    }
}

fn load_resized(path: &Path, h: usize, w: usize) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    Ok(Image::from_fn(h, w, |y, x| {
        let p = img.get_pixel(x as u32, y as u32).0;
        std::array::from_fn(|c| p[c] as f32 / 255.0)
    }))
}

/// Projector/camera pairs captured through one setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train_proj: Vec<Image>,
    pub train_cam: Vec<Image>,
    pub val_proj: Vec<Image>,
    pub val_cam: Vec<Image>,
    pub surface: Image,
    pub dark: Image,
}

/// Captures `n_train + n_val` source images; the first `n_train` form the training set.
pub fn make_dataset(setup: &SimSetup, sources: &Sources, n_train: usize, n_val: usize) -> Result<Dataset> {
    let (h, w) = setup.proj_dims();
    let images = sources.take(n_train + n_val, h, w)?;
    let caps = images.iter().map(|x| setup.capture(x)).collect::<Result<Vec<_>>>()?;
    let mut images = images;
    let mut caps = caps;
    let val_proj = images.split_off(n_train);
    let val_cam = caps.split_off(n_train);
    info!("captured {n_train} training and {n_val} validation pairs");
    Ok(Dataset {
        train_proj: images,
        train_cam: caps,
        val_proj,
        val_cam,
        surface: setup.surface_capture()?,
        dark: setup.dark_capture()?,
    })
}

impl Dataset {
    /// Writes `setup.meta`, `surface.png`, `dark.png` and the `train/` and `val/` pairs.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &SetupMeta) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["train", "val"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let text = toml::to_string_pretty(meta).map_err(|e| Error::Format {
            what: "setup.meta",
            detail: e.to_string(),
        })?;
        let p = dir.join("setup.meta");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.surface.save_png(dir.join("surface.png"))?;
        self.dark.save_png(dir.join("dark.png"))?;
        for (sub, proj, cam) in [("train", &self.train_proj, &self.train_cam), ("val", &self.val_proj, &self.val_cam)] {
            for (i, (p, c)) in proj.iter().zip(cam).enumerate() {
                p.save_png(dir.join(sub).join(format!("{i:04}_proj.png")))?;
                c.save_png(dir.join(sub).join(format!("{i:04}_cam.png")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, SetupMeta)> {
        let dir = dir.as_ref();
        let p = dir.join("setup.meta");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: SetupMeta = toml::from_str(&text).map_err(|e| Error::Format {
            what: "setup.meta",
            detail: e.to_string(),
        })?;
        let pairs = |sub: &str| -> Result<(Vec<Image>, Vec<Image>)> {
            let (mut proj, mut cam) = (Vec::new(), Vec::new());
            for i in 0.. {
                let pp = dir.join(sub).join(format!("{i:04}_proj.png"));
                if !pp.exists() {
                    break;
                }
                proj.push(Image::load_png(&pp)?);
                cam.push(Image::load_png(dir.join(sub).join(format!("{i:04}_cam.png")))?);
            }
            Ok((proj, cam))
        };
        let (train_proj, train_cam) = pairs("train")?;
        let (val_proj, val_cam) = pairs("val")?;
        if train_proj.is_empty() {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("no training pairs in {}", dir.display()),
            });
        }
        Ok((
            Self {
                train_proj,
                train_cam,
                val_proj,
                val_cam,
                surface: Image::load_png(dir.join("surface.png"))?,
                dark: Image::load_png(dir.join("dark.png"))?,
            },
            meta,
        ))
    }
}
