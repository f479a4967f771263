//! Projector field-of-view mask, displayable rectangle and desired-image fit.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bilinear_sample, Image, Mask, Rect, SamplingGrid};
use crate::warp::AffineParams;

pub const OTSU_BINS: usize = 256;

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f32) as usize).min(OTSU_BINS - 1)
}

/// Otsu's threshold over a 256-bin histogram of values in `[0, 1]`.
///
/// Pixels with `v >= threshold` form the foreground. Thresholds sit on bin
/// edges; when several consecutive edges reach the maximum (an empty gap
/// between modes) the midpoint of the first such run is returned.
pub fn otsu_threshold(values: &[f32]) -> Result<f32> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("otsu input"));
        }
        hist[bin_of(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::ConstantImage);
    }
    let total = values.len() as f64;
    let center = |k: usize| (k as f64 + 0.5) / OTSU_BINS as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(k, &c)| c as f64 * center(k)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut between = [-1.0f64; OTSU_BINS];
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += c as f64 * center(k);
        let w1 = total - w0;
        if w0 > 0.0 && w1 > 0.0 {
            let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
            between[k] = w0 * w1 * (m0 - m1) * (m0 - m1);
        }
    }
    Ok(plateau_threshold(&between))
}

/// Midpoint (as a threshold) of the first run of maximal entries of `score`.
fn plateau_threshold(score: &[f64]) -> f32 {
    let best = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = score.iter().position(|&v| v == best).unwrap_or(0);
    let last = first + score[first..].iter().take_while(|&&v| v == best).count() - 1;
    (first + last + 2) as f32 / (2 * OTSU_BINS) as f32
}

fn morph(mask: &Mask, erode: bool) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(h, w, |y, x| {
        let mut acc = erode;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                // Outside the image is neutral: it never erodes nor dilates.
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let v = mask.get(yy as usize, xx as usize);
                if erode {
                    acc &= v;
                } else {
                    acc |= v;
                }
            }
        }
        acc
    })
}

pub fn erode(mask: &Mask) -> Mask {
    morph(mask, true)
}

pub fn dilate(mask: &Mask) -> Mask {
    morph(mask, false)
}

/// 3×3 opening: removes foreground specks.
pub fn open(mask: &Mask) -> Mask {
    dilate(&erode(mask))
}

/// 3×3 closing: removes background specks.
pub fn close(mask: &Mask) -> Mask {
    erode(&dilate(mask))
}

fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut v = Vec::with_capacity(4);
    if y > 0 {
        v.push((y - 1, x));
    }
    if y + 1 < h {
        v.push((y + 1, x));
    }
    if x > 0 {
        v.push((y, x - 1));
    }
    if x + 1 < w {
        v.push((y, x + 1));
    }
    v.into_iter()
}

/// Keeps the largest 4-connected foreground component (the first found on ties).
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for (yy, xx) in neighbours4(p / w, p % w, h, w) {
                let q = yy * w + xx;
                if mask.data()[q] && label[q] == 0 {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Mask::from_fn(h, w, |y, x| best.1 != 0 && label[y * w + x] == best.1)
}

/// Sets every background pixel not 4-connected to the image border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !mask.get(y, x) {
                outside[y * w + x] = true;
                queue.push_back(y * w + x);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        for (yy, xx) in neighbours4(p / w, p % w, h, w) {
            let q = yy * w + xx;
            if !mask.data()[q] && !outside[q] {
                outside[q] = true;
                queue.push_back(q);
            }
        }
    }
    Mask::from_fn(h, w, |y, x| !outside[y * w + x])
}

/// Camera pixels lit by the projector: Otsu on the max-channel illumination
/// difference, 3×3 open then close, largest 4-connected component, holes filled.
pub fn fov_mask(surface: &Image, dark: &Image) -> Result<Mask> {
    if surface.dims() != dark.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", surface.dims(), dark.dims())));
    }
    let (h, w) = surface.dims();
    let diff: Vec<f32> = (0..h * w)
        .map(|k| (0..3).map(|c| surface.plane(c)[k] - dark.plane(c)[k]).fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let t = match otsu_threshold(&diff) {
        Ok(t) => t,
        Err(Error::ConstantImage) => return Err(Error::EmptyMask),
        Err(e) => return Err(e),
    };
    let raw = Mask::from_fn(h, w, |y, x| diff[y * w + x] >= t);
    let mask = fill_holes(&largest_component(&close(&open(&raw))));
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Summed-area table of mask *complement* with a zero first row and column.
struct HoleCounts {
    w1: usize,
    table: Vec<u32>,
}

impl HoleCounts {
    fn new(mask: &Mask) -> Self {
        let (h, w) = mask.dims();
        let w1 = w + 1;
        let mut table = vec![0u32; (h + 1) * w1];
        for y in 0..h {
            let mut row = 0;
            for x in 0..w {
                row += (!mask.get(y, x)) as u32;
                table[(y + 1) * w1 + x + 1] = table[y * w1 + x + 1] + row;
            }
        }
        Self { w1, table }
    }

    fn holes(&self, y: usize, x: usize, h: usize, w: usize) -> u32 {
        let t = &self.table;
        let w1 = self.w1;
        t[(y + h) * w1 + x + w] + t[y * w1 + x] - t[y * w1 + x + w] - t[(y + h) * w1 + x]
    }
}

fn width_for(h: usize, aspect: f64) -> usize {
    ((h as f64 * aspect).round() as usize).max(1)
}

/// First (row-major) placement of an `h × w` window free of holes.
fn place(counts: &HoleCounts, dims: (usize, usize), h: usize, w: usize) -> Option<Rect> {
    let (mh, mw) = dims;
    if h > mh || w > mw {
        return None;
    }
    for y in 0..=mh - h {
        for x in 0..=mw - w {
            if counts.holes(y, x, h, w) == 0 {
                return Some(Rect::new(x, y, w, h));
            }
        }
    }
    None
}

/// Largest axis-aligned rectangle with width `round(height · aspect)` inside the mask.
///
/// Binary search on the height; ties are broken by the smallest `(y, x)`.
pub fn optimal_rect(mask: &Mask, aspect: f64) -> Result<Rect> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !(aspect > 0.0 && aspect.is_finite()) {
        return Err(Error::InvalidInput(format!("aspect ratio must be positive, got {aspect}")));
    }
    let counts = HoleCounts::new(mask);
    let dims = mask.dims();
    let (mut lo, mut hi) = (0usize, dims.0);
    let mut best = None;
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        match place(&counts, dims, mid, width_for(mid, aspect)) {
            Some(r) => {
                best = Some(r);
                lo = mid;
            }
            None => hi = mid - 1,
        }
    }
    if lo == 0 {
        return Err(Error::DegenerateRect(0, 0));
    }
    // The last feasible probe may not be `lo` itself.
    Ok(match best {
        Some(r) if r.h == lo => r,
        _ => place(&counts, dims, lo, width_for(lo, aspect)).expect("feasible by search"),
    })
}

/// Uniform scale and translation (in pixels) placing a `desired` image centered in `rect`.
///
/// Maps desired-image pixel coordinates to camera pixel coordinates.
pub fn fit_affine(rect: Rect, desired: (usize, usize)) -> AffineParams {
    let (dh, dw) = (desired.0 as f64, desired.1 as f64);
    let s = (rect.w as f64 / dw).min(rect.h as f64 / dh);
    // Pixel footprints: [-0.5, d - 0.5] onto the centered sub-rectangle.
    let x0 = rect.x as f64 - 0.5 + (rect.w as f64 - s * dw) / 2.0;
    let y0 = rect.y as f64 - 0.5 + (rect.h as f64 - s * dh) / 2.0;
    AffineParams::scale_translate(s, s, x0 + 0.5 * s, y0 + 0.5 * s)
}

pub fn optimal_display_area(mask: &Mask, aspect: f64, desired: (usize, usize)) -> Result<(Rect, AffineParams)> {
    let rect = optimal_rect(mask, aspect)?;
    Ok((rect, fit_affine(rect, desired)))
}

/// Everything the compensation pipeline needs to know about the display region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplayGeometry {
    #[serde(skip, default = "empty_mask")]
    pub fov_mask: Mask,
    pub bounding_rect: Rect,
    pub optimal_rect: Rect,
    /// Desired-image pixels → camera pixels.
    pub fit_affine: AffineParams,
    pub desired_height: usize,
    pub desired_width: usize,
}

fn empty_mask() -> Mask {
    Mask::new(0, 0, false)
}

impl DisplayGeometry {
    pub fn from_captures(surface: &Image, dark: &Image, desired: (usize, usize)) -> Result<Self> {
        Self::from_mask(fov_mask(surface, dark)?, desired)
    }

    pub fn from_mask(fov_mask: Mask, desired: (usize, usize)) -> Result<Self> {
        let bounding_rect = fov_mask.bounding_rect().ok_or(Error::EmptyMask)?;
        let (optimal_rect, fit_affine) = optimal_display_area(&fov_mask, desired.1 as f64 / desired.0 as f64, desired)?;
        Ok(Self {
            fov_mask,
            bounding_rect,
            optimal_rect,
            fit_affine,
            desired_height: desired.0,
            desired_width: desired.1,
        })
    }

    pub fn camera_dims(&self) -> (usize, usize) {
        self.fov_mask.dims()
    }

    /// The fit as a normalized sampling transform: camera-normalized → desired-normalized.
    pub fn fit_sampling_affine(&self) -> AffineParams {
        let (ch, cw) = self.camera_dims();
        let (dh, dw) = (self.desired_height as f64, self.desired_width as f64);
        let a = &self.fit_affine.0;
        let (s, tx, ty) = (a[0], a[2], a[5]);
        // u_c → c_x = (u_c + 1)(W_c - 1)/2 → z_x = (c_x - tx)/s → u_z = 2 z_x/(W_z - 1) - 1.
        let ku = (cw as f64 - 1.0) / 2.0 / s * 2.0 / (dw - 1.0);
        let bu = ((cw as f64 - 1.0) / 2.0 - tx) / s * 2.0 / (dw - 1.0) - 1.0;
        let kv = (ch as f64 - 1.0) / 2.0 / s * 2.0 / (dh - 1.0);
        let bv = ((ch as f64 - 1.0) / 2.0 - ty) / s * 2.0 / (dh - 1.0) - 1.0;
        AffineParams::scale_translate(ku, kv, bu, bv)
    }

    /// `z' = A z`: the desired image placed into the optimal rectangle of a camera-sized frame.
    pub fn apply_fit(&self, z: &Image) -> Result<Image> {
        if z.dims() != (self.desired_height, self.desired_width) {
            return Err(Error::ShapeMismatch(format!(
                "desired image is {:?}, geometry expects {:?}",
                z.dims(),
                (self.desired_height, self.desired_width)
            )));
        }
        let (ch, cw) = self.camera_dims();
        let a = self.fit_sampling_affine();
        let r = self.optimal_rect;
        let grid = SamplingGrid::from_fn(ch, cw, |i, j| {
            if i < r.y || j < r.x || i >= r.y + r.h || j >= r.x + r.w {
                (-2.0, -2.0)
            } else {
                a.apply(crate::imaging::norm_coord(j, cw), crate::imaging::norm_coord(i, ch))
            }
        });
        bilinear_sample(z, &grid)
    }

    /// Writes `geometry.toml` and `fov_mask.png` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            what: "geometry",
            detail: e.to_string(),
        })?;
        let p = dir.join("geometry.toml");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.fov_mask.save_png(dir.join("fov_mask.png"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("geometry.toml");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut g: Self = toml::from_str(&text).map_err(|e| Error::Format {
            what: "geometry",
            detail: e.to_string(),
        })?;
        g.fov_mask = Mask::load_png(dir.join("fov_mask.png"))?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn bimodal_threshold_separates() {
        let v: Vec<f32> = (0..100).map(|i| if i % 2 == 0 { 0.2 } else { 0.8 }).collect();
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.2 && t <= 0.8);
        assert!(matches!(otsu_threshold(&[0.4; 10]), Err(Error::ConstantImage)));
    }

    #[test]
    fn gaussian_mixture_threshold_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (Normal::new(0.25f32, 0.05).unwrap(), Normal::new(0.75f32, 0.05).unwrap());
        let v: Vec<f32> = (0..20000).map(|i| if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) }).collect();
        let t = otsu_threshold(&v).unwrap();
        assert!((t - 0.5).abs() <= 0.05, "threshold {t}");
    }

    fn rect_mask(h: usize, w: usize, r: Rect) -> Mask {
        Mask::from_fn(h, w, |y, x| y >= r.y && y < r.y + r.h && x >= r.x && x < r.x + r.w)
    }

    #[test]
    fn salt_noise_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Rect::new(10, 14, 30, 22);
        let truth = rect_mask(64, 64, r);
        let surface = Image::from_fn(64, 64, |y, x| {
            let salt = rng.random_bool(0.01);
            [if salt { 1.0 } else if truth.get(y, x) { 0.8 } else { 0.1 }; 3]
        });
        let dark = Image::gray(64, 64, 0.05);
        assert_eq!(fov_mask(&surface, &dark).unwrap(), truth);
    }

    #[test]
    fn identical_captures_are_rejected() {
        let img = Image::gray(16, 16, 0.3);
        assert!(matches!(fov_mask(&img, &img), Err(Error::EmptyMask)));
    }

    #[test]
    fn holes_and_small_components() {
        let mut m = rect_mask(20, 20, Rect::new(2, 2, 10, 10));
        m.set(6, 6, false);
        m.set(18, 18, true);
        let out = fill_holes(&largest_component(&m));
        assert_eq!(out, rect_mask(20, 20, Rect::new(2, 2, 10, 10)));
    }

    #[test]
    fn full_mask_gives_full_frame_and_identity_fit() {
        let m = Mask::new(30, 40, true);
        let g = DisplayGeometry::from_mask(m, (30, 40)).unwrap();
        assert_eq!(g.optimal_rect, Rect::new(0, 0, 40, 30));
        let a = g.fit_sampling_affine();
        for (p, q) in a.0.iter().zip(AffineParams::identity().0) {
            assert!((p - q).abs() < 1e-12);
        }
        let z = Image::from_fn(30, 40, |y, x| [y as f32 / 30.0, x as f32 / 40.0, 0.5]);
        assert!(g.apply_fit(&z).unwrap().max_abs_diff(&z) < 1e-6);
    }

    #[test]
    fn inscribed_square_in_circle() {
        let r = 40.0;
        let m = Mask::from_fn(128, 128, |y, x| {
            let (dy, dx) = (y as f64 - 63.5, x as f64 - 63.5);
            dx * dx + dy * dy <= r * r
        });
        let rect = optimal_rect(&m, 1.0).unwrap();
        assert_eq!(rect.w, rect.h);
        assert!((rect.w as f64 - r * 2f64.sqrt()).abs() <= 1.0, "side {}", rect.w);
    }

    #[test]
    fn fit_preserves_aspect_and_stays_inside() {
        let rect = Rect::new(5, 7, 40, 30);
        let a = fit_affine(rect, (60, 80));
        assert_eq!(a.0[0], a.0[4]);
        assert_eq!((a.0[1], a.0[3]), (0.0, 0.0));
        let (x, y) = (a.apply(-0.5, -0.5), a.apply(79.5, 59.5));
        assert!(x.0 >= 4.5 - 1e-9 && x.1 >= 6.5 - 1e-9);
        assert!(y.0 <= 44.5 + 1e-9 && y.1 <= 36.5 + 1e-9);
    }

    #[test]
    fn geometry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = rect_mask(32, 32, Rect::new(3, 4, 20, 18));
        let g = DisplayGeometry::from_mask(m, (32, 32)).unwrap();
        g.save(dir.path()).unwrap();
        assert_eq!(DisplayGeometry::load(dir.path()).unwrap(), g);
    }
}
