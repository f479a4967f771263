//! SSIM and ℓ1 losses with analytic gradients.
//!
//! SSIM uses an 11x11 Gaussian window (σ = 1.5) evaluated at every position
//! where the window fits entirely inside the image, computed independently per
//! channel and averaged.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut t = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable valid-mode filter of an `h x w` plane.
fn filter_valid<T: Real>(src: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = T::zero();
            for (t, &v) in taps.iter().zip(&row[x..x + k]) {
                acc += *t * v;
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let src_row = &tmp[(y + t) * ow..(y + t + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(src_row) {
                *d += tap * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `oh x ow` map back to `h x w`.
fn filter_valid_adjoint<T: Real>(g: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let src = &g[y * ow..(y + 1) * ow];
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += tap * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &v) in src.iter().enumerate() {
            for (t, &tap) in taps.iter().enumerate() {
                dst[x + t] += tap * v;
            }
        }
    }
    out
}

/// Mean SSIM between `a` and `b` and, optionally, its gradient w.r.t. `a`.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, want_grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let [n, c, h, w] = a.shape();
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps: Vec<T> = gaussian_taps().iter().map(|&v| T::lit(v)).collect();
    let c1 = T::lit(K1 * K1);
    let c2 = T::lit(K2 * K2);
    let two = T::lit(2.0);
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let count = T::lit((n * c * oh * ow) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Tensor::zeros(a.shape()));
    let plane = h * w;
    for item in 0..n {
        for ch in 0..c {
            let x = &a.item(item)[ch * plane..(ch + 1) * plane];
            let y = &b.item(item)[ch * plane..(ch + 1) * plane];
            let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
            let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
            let xy: Vec<T> = x.iter().zip(y).map(|(&p, &q)| p * q).collect();
            let mx = filter_valid(x, h, w, &taps);
            let my = filter_valid(y, h, w, &taps);
            let exx = filter_valid(&xx, h, w, &taps);
            let eyy = filter_valid(&yy, h, w, &taps);
            let exy = filter_valid(&xy, h, w, &taps);
            let m = oh * ow;
            let (mut g_mx, mut g_exx, mut g_exy) = if want_grad {
                (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m])
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            for p in 0..m {
                let (ux, uy) = (mx[p], my[p]);
                let sxx = exx[p] - ux * ux;
                let syy = eyy[p] - uy * uy;
                let sxy = exy[p] - ux * uy;
                let a1 = two * ux * uy + c1;
                let a2 = two * sxy + c2;
                let b1 = ux * ux + uy * uy + c1;
                let b2 = sxx + syy + c2;
                let s = (a1 * a2) / (b1 * b2);
                total += s;
                if want_grad {
                    g_mx[p] = s * (two * uy / a1 - two * ux / b1 - two * uy / a2 + two * ux / b2) / count;
                    g_exx[p] = -s / b2 / count;
                    g_exy[p] = two * s / a2 / count;
                }
            }
            if let Some(gr) = grad.as_mut() {
                let d_mx = filter_valid_adjoint(&g_mx, h, w, &taps);
                let d_exx = filter_valid_adjoint(&g_exx, h, w, &taps);
                let d_exy = filter_valid_adjoint(&g_exy, h, w, &taps);
                let dst = &mut gr.item_mut(item)[ch * plane..(ch + 1) * plane];
                for k in 0..plane {
                    dst[k] = d_mx[k] + two * x[k] * d_exx[k] + y[k] * d_exy[k];
                }
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean absolute error and its gradient w.r.t. `a`.
pub fn l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, want_grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let count = T::lit(a.len() as f64);
    let total: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q).abs()).sum();
    let grad = want_grad.then(|| {
        let inv = T::one() / count;
        Tensor::from_vec(
            a.shape(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| {
                    if p > q {
                        inv
                    } else if p < q {
                        -inv
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        )
    });
    Ok((total / count, grad))
}

/// Photometric training loss `mean|a - b| + (1 - SSIM(a, b))` and its gradient.
pub fn l1_ssim_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>, want_grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    let (l, gl) = l1(a, b, want_grad)?;
    let (s, gs) = ssim(a, b, want_grad)?;
    let grad = match (gl, gs) {
        (Some(mut gl), Some(gs)) => {
            gl.data_mut().iter_mut().zip(gs.data()).for_each(|(p, &q)| *p -= q);
            Some(gl)
        }
        _ => None,
    };
    Ok((l + T::one() - s, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random()).collect())
    }

    /// Direct sliding-window SSIM with a full 2-D window.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let t = gaussian_taps();
        let [n, c, h, w] = a.shape();
        let (c1, c2) = ((K1 * K1), (K2 * K2));
        let mut total = 0.0;
        let mut cnt = 0.0;
        for item in 0..n {
            for ch in 0..c {
                for y in 0..=h - WINDOW {
                    for x in 0..=w - WINDOW {
                        let (mut mx, mut my) = (0.0, 0.0);
                        for i in 0..WINDOW {
                            for j in 0..WINDOW {
                                let wt = t[i] * t[j];
                                mx += wt * a.at(item, ch, y + i, x + j);
                                my += wt * b.at(item, ch, y + i, x + j);
                            }
                        }
                        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                        for i in 0..WINDOW {
                            for j in 0..WINDOW {
                                let wt = t[i] * t[j];
                                let dx = a.at(item, ch, y + i, x + j) - mx;
                                let dy = b.at(item, ch, y + i, x + j) - my;
                                vx += wt * dx * dx;
                                vy += wt * dy * dy;
                                cxy += wt * dx * dy;
                            }
                        }
                        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        cnt += 1.0;
                    }
                }
            }
        }
        total / cnt
    }

    #[test]
    fn matches_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_t([2, 3, 16, 14], &mut rng);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v = (*v * 0.6 + rng.random::<f64>() * 0.3).min(1.0));
        let (s, _) = ssim(&a, &b, false).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_t([1, 3, 20, 20], &mut rng);
        let b = rand_t([1, 3, 20, 20], &mut rng);
        let (s1, _) = ssim(&a, &b, false).unwrap();
        let (s2, _) = ssim(&b, &a, false).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn loss_of_identical_images_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = rand_t([1, 3, 16, 16], &mut rng);
        let (l, _) = l1_ssim_loss(&a, &a, false).unwrap();
        assert!(l.abs() < 1e-12);
    }
}
