//! Image, sampling-grid and mask containers plus the PSNR / RMSE / SSIM metrics.
//!
//! Images are three-channel planar (`CHW`) `f32` rasters with values in `[0, 1]`.
//! Grids store interleaved `(u, v)` source coordinates normalized with
//! align-corners semantics: `-1` and `+1` land on the centers of the first and
//! last source pixel.

use std::path::Path;

use crate::diffcore::{sampler, ssim as dssim};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Cap reported by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 300.0;

pub const CHANNELS: usize = 3;

/// Three-channel planar raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn gray(height: usize, width: usize, v: f32) -> Self {
        Self::filled(height, width, [v; 3])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        let plane = height * width;
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    img.data[c * plane + y * width + x] = v;
                }
            }
        }
        img
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel maximum over channels.
    pub fn max_channel(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| self.data[i].max(self.data[n + i]).max(self.data[2 * n + i]))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Zeroes every pixel where `mask` is false.
    pub fn masked(&self, mask: &Mask) -> Self {
        assert_eq!(self.dims(), mask.dims());
        let mut out = self.clone();
        let n = self.height * self.width;
        for c in 0..CHANNELS {
            for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(&mask.data) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Copies the sub-rectangle `(x, y, w, h)`.
    pub fn crop(&self, rect: Rect) -> Self {
        Self::from_fn(rect.h, rect.w, |y, x| self.pixel(rect.y + y, rect.x + x))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Stacks same-sized images into a batch tensor.
    pub fn stack<T: Real>(images: &[&Image]) -> Tensor<T> {
        let (h, w) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            assert_eq!(img.dims(), (h, w), "stack: size mismatch");
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec([images.len(), CHANNELS, h, w], data)
    }

    /// Extracts batch item `n` of a 3-channel tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Self {
        assert_eq!(t.c(), CHANNELS);
        Self {
            height: t.h(),
            width: t.w(),
            data: t.item(n).iter().map(|v| v.f64() as f32).collect(),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Ok(Self::from_fn(h, w, |y, x| {
            let p = rgb.get_pixel(x as u32, y as u32).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        }))
    }

    /// Writes an 8-bit PNG with `0 -> 0` and `1 -> 255` (values clamped).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x).map(to_u8);
                buf.put_pixel(x as u32, y as u32, image::Rgb(p));
            }
        }
        buf.save(path.as_ref())?;
        Ok(())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

/// Per-pixel boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn bounding_rect(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| [if self.get(y, x) { 1.0 } else { 0.0 }; 3])
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                buf.put_pixel(x as u32, y as u32, image::Luma([if self.get(y, x) { 255 } else { 0 }]));
            }
        }
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let g = image::open(path.as_ref())?.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        Ok(Self::from_fn(h, w, |y, x| g.get_pixel(x as u32, y as u32).0[0] >= 128))
    }
}

/// Field of normalized source coordinates, one `(u, v)` pair per output pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<T = f64> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Normalized align-corners coordinate of pixel index `i` along an axis of length `n`.
#[inline]
pub fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

impl<T: Real> SamplingGrid<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); 2 * height * width],
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |i, j| (norm_coord(j, width), norm_coord(i, height)))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut g = Self::zeros(height, width);
        for i in 0..height {
            for j in 0..width {
                let (u, v) = f(i, j);
                g.set(i, j, T::lit(u), T::lit(v));
            }
        }
        g
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x2 grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> (T, T) {
        let k = 2 * (i * self.width + j);
        (self.data[k], self.data[k + 1])
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, u: T, v: T) {
        let k = 2 * (i * self.width + j);
        self.data[k] = u;
        self.data[k + 1] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> SamplingGrid<U> {
        SamplingGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// Channel-planar `[1, 2, h, w]` view used by the refinement network.
    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.height * self.width;
        let mut data = vec![T::zero(); 2 * n];
        for k in 0..n {
            data[k] = self.data[2 * k];
            data[n + k] = self.data[2 * k + 1];
        }
        Tensor::from_vec([1, 2, self.height, self.width], data)
    }

    pub fn from_tensor(t: &Tensor<T>) -> Self {
        assert_eq!(t.n(), 1);
        assert_eq!(t.c(), 2);
        let n = t.h() * t.w();
        let src = t.data();
        let mut data = vec![T::zero(); 2 * n];
        for k in 0..n {
            data[2 * k] = src[k];
            data[2 * k + 1] = src[n + k];
        }
        Self {
            height: t.h(),
            width: t.w(),
            data,
        }
    }

    /// Mean endpoint distance in source pixels, over entries where `include` is set.
    pub fn mean_endpoint_error(
        &self,
        other: &Self,
        src_dims: (usize, usize),
        mut include: impl FnMut(usize, usize) -> bool,
    ) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let sx = (src_dims.1 as f64 - 1.0) / 2.0;
        let sy = (src_dims.0 as f64 - 1.0) / 2.0;
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..self.height {
            for j in 0..self.width {
                if !include(i, j) {
                    continue;
                }
                let (a, b) = self.get(i, j);
                let (c, d) = other.get(i, j);
                let dx = (a - c).f64() * sx;
                let dy = (b - d).f64() * sy;
                sum += (dx * dx + dy * dy).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Bilinear sampling `φ(img; grid)` with zero padding outside the source.
pub fn bilinear_sample(img: &Image, grid: &SamplingGrid<f64>) -> Result<Image> {
    if !grid.is_finite() {
        return Err(Error::NonFinite("sampling grid"));
    }
    let out = sampler::grid_sample(&img.to_tensor::<f64>(), grid);
    Ok(Image::from_tensor(&out, 0))
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn sum_sq_diff(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Peak signal-to-noise ratio in dB with unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mse = sum_sq_diff(a, b) / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Root of the squared difference summed over channels and averaged over pixels.
pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    Ok((sum_sq_diff(a, b) / (a.height * a.width) as f64).sqrt())
}

/// Mean SSIM (11x11 Gaussian window, σ = 1.5) averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (v, _) = dssim::ssim(&a.to_tensor::<f64>(), &b.to_tensor::<f64>(), false)?;
    Ok(v)
}

/// The three reported metrics for one image pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl Metrics {
    pub fn compute(a: &Image, b: &Image) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            rmse: rmse(a, b)?,
            ssim: ssim(a, b)?,
        })
    }

    /// Arithmetic mean of each metric.
    pub fn mean(items: &[Metrics]) -> Self {
        let n = items.len().max(1) as f64;
        Self {
            psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
            rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
            ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identity_grid_reproduces_image_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (h, w) in [(5, 7), (64, 64), (13, 2)] {
            let img = random_image(h, w, &mut rng);
            let out = bilinear_sample(&img, &SamplingGrid::identity(h, w)).unwrap();
            assert_eq!(out.max_abs_diff(&img), 0.0);
        }
    }

    #[test]
    fn constant_image_stays_constant_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Image::gray(9, 11, 0.7);
        let grid = SamplingGrid::from_fn(6, 5, |_, _| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)));
        let out = bilinear_sample(&img, &grid).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn two_by_two_center_sample() {
        // Scalar oracle: average of the four taps at the exact center.
        let oracle = 0.25 * (0.0 + 1.0 + 0.5 + 0.25);
        let img = Image::from_fn(2, 2, |y, x| {
            let v = [[0.0, 1.0], [0.5, 0.25]][y][x];
            [v; 3]
        });
        let grid = SamplingGrid::from_fn(1, 1, |_, _| (0.0, 0.0));
        let out = bilinear_sample(&img, &grid).unwrap();
        assert!((out.get(0, 0, 0) as f64 - oracle).abs() < 1e-7);
        assert!((oracle - 0.4375).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_is_zero_and_nan_rejected() {
        let img = Image::gray(4, 4, 1.0);
        let grid = SamplingGrid::from_fn(1, 2, |_, j| if j == 0 { (-3.0, 0.0) } else { (0.0, 5.0) });
        let out = bilinear_sample(&img, &grid).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let bad = SamplingGrid::from_fn(1, 1, |_, _| (f64::NAN, 0.0));
        assert!(matches!(bilinear_sample(&img, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn psnr_rmse_reference_values() {
        let a = Image::new(16, 16);
        let b = Image::gray(16, 16, 0.5);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
        assert!((rmse(&a, &b).unwrap() - 0.8660).abs() < 1e-4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(rmse(&b, &b).unwrap(), 0.0);
        assert!(psnr(&a, &Image::new(8, 8)).is_err());
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(12, 10, &mut rng);
        let b = random_image(12, 10, &mut rng);
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..10 {
                    let d = a.get(c, y, x) as f64 - b.get(c, y, x) as f64;
                    acc += d * d;
                }
            }
        }
        let want = 10.0 * (1.0 / (acc / 360.0)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_self_is_one_and_inverse_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Image::from_fn(24, 24, |_, _| [if rng.random::<bool>() { 1.0 } else { 0.0 }; 3]);
        let inv = Image::from_fn(24, 24, |y, xx| x.pixel(y, xx).map(|v| 1.0 - v));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &inv).unwrap() < 0.0);
        assert!(ssim(&Image::new(8, 8), &Image::new(8, 8)).is_err());
    }

    #[test]
    fn bounding_rect_and_iou() {
        let m = Mask::from_fn(10, 10, |y, x| (2..5).contains(&y) && (3..8).contains(&x));
        assert_eq!(m.bounding_rect(), Some(Rect::new(3, 2, 5, 3)));
        assert_eq!(m.iou(&m), 1.0);
        assert_eq!(Mask::new(4, 4, false).bounding_rect(), None);
    }
}
