//! Procedural source images: value-noise octaves, gradients, shapes and glyph strokes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::Image;

/// Smooth value noise on a `cells × cells` lattice, bilinearly interpolated with smoothstep.
fn value_noise(h: usize, w: usize, cells: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f32 / h as f32 * cells as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..w {
            let fx = x as f32 / w as f32 * cells as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let a = lattice[y0 * n + x0];
            let b = lattice[y0 * n + x0 + 1];
            let c = lattice[(y0 + 1) * n + x0];
            let d = lattice[(y0 + 1) * n + x0 + 1];
            out[y * w + x] = (a * (1.0 - sx) + b * sx) * (1.0 - sy) + (c * (1.0 - sx) + d * sx) * sy;
        }
    }
    out
}

/// Multi-octave colored noise in `[0, 1]`.
pub fn fractal_noise(h: usize, w: usize, base_cells: usize, octaves: usize, rng: &mut impl Rng) -> Image {
    let mut img = Image::new(h, w);
    for c in 0..3 {
        let mut acc = vec![0.0f32; h * w];
        let mut amp = 1.0;
        let mut total = 0.0;
        for o in 0..octaves {
            let layer = value_noise(h, w, base_cells << o, rng);
            acc.iter_mut().zip(&layer).for_each(|(a, b)| *a += amp * b);
            total += amp;
            amp *= 0.5;
        }
        img.plane_mut(c).iter_mut().zip(&acc).for_each(|(p, a)| *p = a / total);
    }
    stretch(&mut img);
    img
}

/// Rescales each channel to span `[0, 1]`.
fn stretch(img: &mut Image) {
    for c in 0..3 {
        let p = img.plane_mut(c);
        let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            p.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn blend(img: &mut Image, y: usize, x: usize, rgb: [f32; 3], alpha: f32) {
    let p = img.pixel(y, x);
    img.set_pixel(y, x, std::array::from_fn(|c| p[c] * (1.0 - alpha) + rgb[c] * alpha));
}

fn linear_gradient(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let (a, b) = (random_color(rng), random_color(rng));
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    Image::from_fn(h, w, |y, x| {
        let u = (x as f32 / w as f32 - 0.5) * dx + (y as f32 / h as f32 - 0.5) * dy + 0.5;
        let t = u.clamp(0.0, 1.0);
        std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t)
    })
}

fn draw_shapes(img: &mut Image, count: usize, rng: &mut impl Rng) {
    let (h, w) = img.dims();
    for _ in 0..count {
        let color = random_color(rng);
        let alpha = rng.random_range(0.5..1.0);
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let r = rng.random_range(0.04..0.25) * h.min(w) as f32;
        let circle = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if circle {
                    px * px + py * py <= r * r
                } else {
                    px.abs() <= r && py.abs() <= 0.6 * r
                };
                if inside {
                    blend(img, y, x, color, alpha);
                }
            }
        }
    }
}

/// Random 5×7 bitmap glyphs laid out in a text-like row.
fn draw_glyphs(img: &mut Image, rng: &mut impl Rng) {
    let (h, w) = img.dims();
    let scale = (h.min(w) / 48).max(1);
    let (gw, gh) = (6 * scale, 8 * scale);
    if w < gw * 2 || h < gh * 2 {
        return;
    }
    let rows = rng.random_range(1..=3);
    let color = random_color(rng);
    for _ in 0..rows {
        let y0 = rng.random_range(0..h - gh);
        let mut x0 = rng.random_range(0..w / 4);
        while x0 + gw < w {
            let bits: u64 = rng.random();
            for gy in 0..7 {
                for gx in 0..5 {
                    if bits >> (gy * 5 + gx) & 1 == 1 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                let (y, x) = (y0 + gy * scale + sy, x0 + gx * scale + sx);
                                if y < h && x < w {
                                    blend(img, y, x, color, 0.9);
                                }
                            }
                        }
                    }
                }
            }
            x0 += gw;
        }
    }
}

/// The `index`-th procedural image of the stream identified by `seed`.
pub fn procedural_image(seed: u64, index: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut img = match rng.random_range(0..3) {
        0 => fractal_noise(h, w, rng.random_range(2..5), 4, &mut rng),
        1 => linear_gradient(h, w, &mut rng),
        _ => {
            let mut a = fractal_noise(h, w, 2, 3, &mut rng);
            let b = linear_gradient(h, w, &mut rng);
            a.data_mut().iter_mut().zip(b.data()).for_each(|(p, q)| *p = 0.5 * *p + 0.5 * q);
            a
        }
    };
    let shapes = rng.random_range(0..6);
    draw_shapes(&mut img, shapes, &mut rng);
    if rng.random_bool(0.4) {
        draw_glyphs(&mut img, &mut rng);
    }
    img.clamp_unit();
    img
}
