//! Differentiable bilinear sampling with zero padding.

use crate::imaging::SamplingGrid;
use crate::tensor::{Real, Tensor};

/// Continuous source position (in pixels) of a normalized coordinate.
///
/// Positions within a few ulps of an integer are snapped so that the identity
/// grid reproduces its input bit-for-bit.
#[inline]
pub(crate) fn unnormalize<T: Real>(u: T, n: usize) -> T {
    let half = T::lit((n as f64 - 1.0) / 2.0);
    let x = (u + T::one()) * half;
    let r = x.round();
    let tol = T::epsilon() * T::lit(4.0 * n as f64);
    if (x - r).abs() <= tol {
        r
    } else {
        x
    }
}

/// The four bilinear taps of a position: `(x0, y0, fx, fy)`.
#[inline]
fn taps<T: Real>(x: T, y: T) -> (isize, isize, T, T) {
    let x0 = x.floor();
    let y0 = y.floor();
    (
        x0.to_isize().unwrap_or(isize::MIN / 2),
        y0.to_isize().unwrap_or(isize::MIN / 2),
        x - x0,
        y - y0,
    )
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Samples every batch item of `img` at the shared `grid`.
pub fn grid_sample<T: Real>(img: &Tensor<T>, grid: &SamplingGrid<T>) -> Tensor<T> {
    let [n, c, h, w] = img.shape();
    let (oh, ow) = grid.dims();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let gd = grid.data();
    let one = T::one();
    for b in 0..n {
        for ch in 0..c {
            let plane = &img.item(b)[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out.item_mut(b)[ch * oh * ow..(ch + 1) * oh * ow];
            for (k, d) in dst.iter_mut().enumerate() {
                let x = unnormalize(gd[2 * k], w);
                let y = unnormalize(gd[2 * k + 1], h);
                let (x0, y0, fx, fy) = taps(x, y);
                let mut acc = T::zero();
                let w00 = (one - fx) * (one - fy);
                let w01 = fx * (one - fy);
                let w10 = (one - fx) * fy;
                let w11 = fx * fy;
                if w00 != T::zero() {
                    acc += w00 * fetch(plane, h, w, y0, x0);
                }
                if w01 != T::zero() {
                    acc += w01 * fetch(plane, h, w, y0, x0 + 1);
                }
                if w10 != T::zero() {
                    acc += w10 * fetch(plane, h, w, y0 + 1, x0);
                }
                if w11 != T::zero() {
                    acc += w11 * fetch(plane, h, w, y0 + 1, x0 + 1);
                }
                *d = acc;
            }
        }
    }
    out
}

/// Reverse pass of [`grid_sample`]. Gradients are accumulated into `dimg`
/// and/or `dgrid` when provided.
pub fn grid_sample_backward<T: Real>(
    img: &Tensor<T>,
    grid: &SamplingGrid<T>,
    dout: &Tensor<T>,
    mut dimg: Option<&mut Tensor<T>>,
    mut dgrid: Option<&mut SamplingGrid<T>>,
) {
    let [n, c, h, w] = img.shape();
    let (oh, ow) = grid.dims();
    assert_eq!(dout.shape(), [n, c, oh, ow]);
    let gd = grid.data();
    let one = T::one();
    let sx = T::lit((w as f64 - 1.0) / 2.0);
    let sy = T::lit((h as f64 - 1.0) / 2.0);
    for k in 0..oh * ow {
        let x = unnormalize(gd[2 * k], w);
        let y = unnormalize(gd[2 * k + 1], h);
        let (x0, y0, fx, fy) = taps(x, y);
        let (mut gu, mut gv) = (T::zero(), T::zero());
        for b in 0..n {
            for ch in 0..c {
                let g = dout.item(b)[ch * oh * ow + k];
                if g == T::zero() {
                    continue;
                }
                let plane = &img.item(b)[ch * h * w..(ch + 1) * h * w];
                if dgrid.is_some() {
                    let v00 = fetch(plane, h, w, y0, x0);
                    let v01 = fetch(plane, h, w, y0, x0 + 1);
                    let v10 = fetch(plane, h, w, y0 + 1, x0);
                    let v11 = fetch(plane, h, w, y0 + 1, x0 + 1);
                    gu += g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    gv += g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if let Some(di) = dimg.as_deref_mut() {
                    let dplane = &mut di.item_mut(b)[ch * h * w..(ch + 1) * h * w];
                    let mut put = |yy: isize, xx: isize, wt: T| {
                        if xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize && wt != T::zero() {
                            dplane[yy as usize * w + xx as usize] += wt * g;
                        }
                    };
                    put(y0, x0, (one - fx) * (one - fy));
                    put(y0, x0 + 1, fx * (one - fy));
                    put(y0 + 1, x0, (one - fx) * fy);
                    put(y0 + 1, x0 + 1, fx * fy);
                }
            }
        }
        if let Some(dg) = dgrid.as_deref_mut() {
            let d = dg.data_mut();
            d[2 * k] += gu * sx;
            d[2 * k + 1] += gv * sy;
        }
    }
}
