//! 2-D convolution and transposed convolution via im2col + GEMM.

use rand::Rng;

use super::param::{Param, Parameterized};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Real, Tensor};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a forward convolution over `input` samples.
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (oh*ow)` column matrix.
pub(crate) fn im2col<T: Real>(
    img: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    debug_assert_eq!(col.len(), c * k * k * plane);
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ch * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image (accumulating).
pub(crate) fn col2im<T: Real>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
    img: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ch * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Standard convolution, weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geom: ConvGeom,
}

impl<T: Real> Conv2d<T> {
    /// PyTorch-style default initialization: uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * geom.kernel * geom.kernel) as f64).sqrt();
        Self::uniform(name, in_ch, out_ch, geom, bound, rng)
    }

    pub fn uniform(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        Self {
            weight: Param::uniform(format!("{name}.weight"), [out_ch, in_ch, k, k], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), [1, out_ch, 1, 1], bound, rng),
            geom,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.weight.value.c()
    }

    pub fn out_ch(&self) -> usize {
        self.weight.value.n()
    }

    fn kk_in(&self) -> usize {
        self.in_ch() * self.geom.kernel * self.geom.kernel
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.in_ch(), "{}: channel mismatch", self.weight.name);
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (self.geom.out_size(h), self.geom.out_size(w));
        let oc = self.out_ch();
        let plane = oh * ow;
        let mut y = Tensor::zeros([x.n(), oc, oh, ow]);
        let mut col = vec![T::zero(); self.kk_in() * plane];
        let bias = self.bias.value.data();
        for n in 0..x.n() {
            im2col(x.item(n), (x.c(), h, w), self.geom, (oh, ow), &mut col);
            let out = y.item_mut(n);
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
            matmul_acc(oc, self.kk_in(), plane, self.weight.value.data(), &col, out);
        }
        y
    }

    /// Accumulates parameter gradients and optionally returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (dy.h(), dy.w());
        let oc = self.out_ch();
        let plane = oh * ow;
        let kk_in = self.kk_in();
        let mut col = vec![T::zero(); kk_in * plane];
        let mut dcol = vec![T::zero(); kk_in * plane];
        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.n() {
            let g = dy.item(n);
            if self.bias.requires_grad {
                for (o, chunk) in g.chunks(plane).enumerate() {
                    self.bias.grad.data_mut()[o] += chunk.iter().copied().sum::<T>();
                }
            }
            if self.weight.requires_grad {
                im2col(x.item(n), (x.c(), h, w), self.geom, (oh, ow), &mut col);
                matmul_nt_acc(oc, plane, kk_in, g, &col, self.weight.grad.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                dcol.iter_mut().for_each(|v| *v = T::zero());
                matmul_tn_acc(kk_in, oc, plane, self.weight.value.data(), g, &mut dcol);
                col2im(&dcol, (x.c(), h, w), self.geom, (oh, ow), dx.item_mut(n));
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution, weight layout `[in, out, k, k]`, with output padding
/// so that stride-2 / kernel-3 / pad-1 layers exactly double the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geom: ConvGeom,
    pub output_padding: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        output_padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((out_ch * geom.kernel * geom.kernel) as f64).sqrt();
        Self::uniform(name, in_ch, out_ch, geom, output_padding, bound, rng)
    }

    pub fn uniform(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        output_padding: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        Self {
            weight: Param::uniform(format!("{name}.weight"), [in_ch, out_ch, k, k], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), [1, out_ch, 1, 1], bound, rng),
            geom,
            output_padding,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.weight.value.n()
    }

    pub fn out_ch(&self) -> usize {
        self.weight.value.c()
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - 1) * self.geom.stride + self.geom.kernel + self.output_padding - 2 * self.geom.pad
    }

    fn kk_out(&self) -> usize {
        self.out_ch() * self.geom.kernel * self.geom.kernel
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.in_ch(), "{}: channel mismatch", self.weight.name);
        let (ih, iw) = (x.h(), x.w());
        let (oh, ow) = (self.out_size(ih), self.out_size(iw));
        let oc = self.out_ch();
        let plane = ih * iw;
        let kk_out = self.kk_out();
        let mut y = Tensor::zeros([x.n(), oc, oh, ow]);
        let mut col = vec![T::zero(); kk_out * plane];
        let bias = self.bias.value.data();
        for n in 0..x.n() {
            col.iter_mut().for_each(|v| *v = T::zero());
            matmul_tn_acc(kk_out, self.in_ch(), plane, self.weight.value.data(), x.item(n), &mut col);
            let out = y.item_mut(n);
            col2im(&col, (oc, oh, ow), self.geom, (ih, iw), out);
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        let (ih, iw) = (x.h(), x.w());
        let (oh, ow) = (dy.h(), dy.w());
        let oc = self.out_ch();
        let plane = ih * iw;
        let kk_out = self.kk_out();
        let mut col = vec![T::zero(); kk_out * plane];
        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.n() {
            let g = dy.item(n);
            if self.bias.requires_grad {
                for (o, chunk) in g.chunks(oh * ow).enumerate() {
                    self.bias.grad.data_mut()[o] += chunk.iter().copied().sum::<T>();
                }
            }
            im2col(g, (oc, oh, ow), self.geom, (ih, iw), &mut col);
            if self.weight.requires_grad {
                matmul_nt_acc(self.in_ch(), plane, kk_out, x.item(n), &col, self.weight.grad.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                matmul_acc(self.in_ch(), kk_out, plane, self.weight.value.data(), &col, dx.item_mut(n));
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
