//! Central finite-difference gradient checker and the differentiable-primitive contract.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::act;
use super::conv::{Conv2d, ConvGeom, ConvTranspose2d};
use super::param::Parameterized;
use super::{sampler, ssim};
use crate::error::{Error, Result};
use crate::imaging::SamplingGrid;
use crate::tensor::Tensor;

/// Default step and pass threshold used by every gradient suite.
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Compares the analytic gradient of `f` with central differences.
///
/// `f` returns `(value, gradient)`. At most `max_coords` coordinates are probed
/// (chosen with a fixed seed). Returns the largest
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64, max_coords: usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let (v0, analytic) = f(params);
    let (v1, _) = f(params);
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::NonDeterministic((v0 - v1).abs()));
    }
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let coords: Vec<usize> = if params.len() <= max_coords {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        sample(&mut rng, params.len(), max_coords).into_vec()
    };
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = p[i];
        p[i] = orig + eps;
        let (fp, _) = f(&p);
        p[i] = orig - eps;
        let (fm, _) = f(&p);
        p[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The differentiable building blocks every network in this crate is made of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Conv2d,
    Conv2dStride2,
    ConvTranspose2dStride2,
    Add,
    Multiply,
    Relu,
    LeakyRelu,
    BilinearImage,
    BilinearGrid,
    L1Loss,
    SsimLoss,
    AffineMap,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::Conv2dStride2 => "conv2d_stride2",
            Primitive::ConvTranspose2dStride2 => "conv_transpose2d_stride2",
            Primitive::Add => "add",
            Primitive::Multiply => "multiply",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::BilinearImage => "bilinear_sample_image",
            Primitive::BilinearGrid => "bilinear_sample_grid",
            Primitive::L1Loss => "l1_loss",
            Primitive::SsimLoss => "ssim_loss",
            Primitive::AffineMap => "affine_map",
        }
    }
}

/// Every primitive that has a forward and reverse implementation.
pub fn primitive_set() -> &'static [Primitive] {
    use Primitive::*;
    &[
        Conv2d,
        Conv2dStride2,
        ConvTranspose2dStride2,
        Add,
        Multiply,
        Relu,
        LeakyRelu,
        BilinearImage,
        BilinearGrid,
        L1Loss,
        SsimLoss,
        AffineMap,
    ]
}

fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs a randomized double-precision gradient check of one primitive.
///
/// Vector-valued primitives are reduced to scalars with a fixed random
/// projection; both the input and (where present) the weight gradients are checked.
pub fn check_primitive(p: Primitive, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DEFAULT_EPS;
    match p {
        Primitive::Conv2d | Primitive::Conv2dStride2 => {
            let stride = if p == Primitive::Conv2d { 1 } else { 2 };
            let conv = Conv2d::<f64>::new("c", 3, 4, ConvGeom::new(3, stride, 1), &mut rng);
            let xs = [2, 3, 8, 8];
            let x0 = rand_vec(xs.iter().product(), -1.0, 1.0, &mut rng);
            let ys = conv.forward(&Tensor::from_vec(xs, x0.clone())).shape();
            let r = rand_vec(ys.iter().product(), -1.0, 1.0, &mut rng);
            let nw = conv.num_params();
            let mut all = conv.flat_values();
            all.extend(&x0);
            grad_check(
                |v| {
                    let mut c = conv.clone();
                    c.set_flat_values(&v[..nw]);
                    c.zero_grad();
                    let x = Tensor::from_vec(xs, v[nw..].to_vec());
                    let y = c.forward(&x);
                    let dy = Tensor::from_vec(ys, r.clone());
                    let dx = c.backward(&x, &dy, true).unwrap();
                    let mut g = c.flat_grads();
                    g.extend(dx.data());
                    (dot(y.data(), &r), g)
                },
                &all,
                eps,
                400,
            )
        }
        Primitive::ConvTranspose2dStride2 => {
            let conv = ConvTranspose2d::<f64>::new("t", 4, 3, ConvGeom::new(3, 2, 1), 1, &mut rng);
            let xs = [2, 4, 4, 5];
            let x0 = rand_vec(xs.iter().product(), -1.0, 1.0, &mut rng);
            let ys = conv.forward(&Tensor::from_vec(xs, x0.clone())).shape();
            let r = rand_vec(ys.iter().product(), -1.0, 1.0, &mut rng);
            let nw = conv.num_params();
            let mut all = conv.flat_values();
            all.extend(&x0);
            grad_check(
                |v| {
                    let mut c = conv.clone();
                    c.set_flat_values(&v[..nw]);
                    c.zero_grad();
                    let x = Tensor::from_vec(xs, v[nw..].to_vec());
                    let y = c.forward(&x);
                    let dx = c.backward(&x, &Tensor::from_vec(ys, r.clone()), true).unwrap();
                    let mut g = c.flat_grads();
                    g.extend(dx.data());
                    (dot(y.data(), &r), g)
                },
                &all,
                eps,
                400,
            )
        }
        Primitive::Add | Primitive::Multiply => {
            let n = 50;
            let r = rand_vec(n, -1.0, 1.0, &mut rng);
            let v0 = rand_vec(2 * n, -1.0, 1.0, &mut rng);
            let mul = p == Primitive::Multiply;
            grad_check(
                |v| {
                    let (a, b) = v.split_at(n);
                    let mut val = 0.0;
                    let mut g = vec![0.0; 2 * n];
                    for i in 0..n {
                        if mul {
                            val += r[i] * a[i] * b[i];
                            g[i] = r[i] * b[i];
                            g[n + i] = r[i] * a[i];
                        } else {
                            val += r[i] * (a[i] + b[i]);
                            g[i] = r[i];
                            g[n + i] = r[i];
                        }
                    }
                    (val, g)
                },
                &v0,
                eps,
                400,
            )
        }
        Primitive::Relu | Primitive::LeakyRelu => {
            let n = 60;
            let shape = [1, 1, 6, 10];
            let r = rand_vec(n, -1.0, 1.0, &mut rng);
            // Keep samples away from the kink at zero.
            let v0: Vec<f64> = rand_vec(n, 0.05, 1.0, &mut rng)
                .into_iter()
                .map(|v| if rng.random::<bool>() { v } else { -v })
                .collect();
            let leaky = p == Primitive::LeakyRelu;
            grad_check(
                |v| {
                    let mut y = Tensor::from_vec(shape, v.to_vec());
                    if leaky {
                        act::leaky_relu(&mut y);
                    } else {
                        act::relu(&mut y);
                    }
                    let mut dy = Tensor::from_vec(shape, r.clone());
                    if leaky {
                        act::leaky_relu_backward(&y, &mut dy);
                    } else {
                        act::relu_backward(&y, &mut dy);
                    }
                    (dot(y.data(), &r), dy.into_vec())
                },
                &v0,
                eps,
                400,
            )
        }
        Primitive::BilinearImage | Primitive::BilinearGrid => {
            let is = [2, 3, 6, 7];
            let img0 = rand_vec(is.iter().product(), 0.0, 1.0, &mut rng);
            let (gh, gw) = (4, 5);
            let grid0 = rand_vec(2 * gh * gw, -1.15, 1.15, &mut rng);
            let r = rand_vec(2 * 3 * gh * gw, -1.0, 1.0, &mut rng);
            let wrt_grid = p == Primitive::BilinearGrid;
            let (x0, fixed) = if wrt_grid { (grid0.clone(), img0.clone()) } else { (img0.clone(), grid0.clone()) };
            grad_check(
                |v| {
                    let (img, grid) = if wrt_grid {
                        (Tensor::from_vec(is, fixed.clone()), SamplingGrid::from_vec(gh, gw, v.to_vec()).unwrap())
                    } else {
                        (Tensor::from_vec(is, v.to_vec()), SamplingGrid::from_vec(gh, gw, fixed.clone()).unwrap())
                    };
                    let out = sampler::grid_sample(&img, &grid);
                    let dout = Tensor::from_vec(out.shape(), r.clone());
                    let mut dimg = Tensor::zeros(is);
                    let mut dgrid = SamplingGrid::zeros(gh, gw);
                    sampler::grid_sample_backward(&img, &grid, &dout, Some(&mut dimg), Some(&mut dgrid));
                    let g = if wrt_grid { dgrid.data().to_vec() } else { dimg.into_vec() };
                    (dot(out.data(), &r), g)
                },
                &x0,
                eps,
                400,
            )
        }
        Primitive::L1Loss | Primitive::SsimLoss => {
            let shape = [1, 3, 16, 16];
            let n: usize = shape.iter().product();
            let target = Tensor::from_vec(shape, rand_vec(n, 0.0, 1.0, &mut rng));
            let x0 = rand_vec(n, 0.0, 1.0, &mut rng);
            let use_ssim = p == Primitive::SsimLoss;
            grad_check(
                |v| {
                    let x = Tensor::from_vec(shape, v.to_vec());
                    let (val, g) = if use_ssim {
                        ssim::ssim(&x, &target, true).unwrap()
                    } else {
                        ssim::l1(&x, &target, true).unwrap()
                    };
                    (val, g.unwrap().into_vec())
                },
                &x0,
                eps,
                400,
            )
        }
        Primitive::AffineMap => {
            // y = A x + b with A (2x3), x (3); checked w.r.t. A, b and x jointly.
            let r = rand_vec(2, -1.0, 1.0, &mut rng);
            let v0 = rand_vec(11, -1.0, 1.0, &mut rng);
            grad_check(
                |v| {
                    let (a, rest) = v.split_at(6);
                    let (b, x) = rest.split_at(2);
                    let mut g = vec![0.0; 11];
                    let mut val = 0.0;
                    for i in 0..2 {
                        let yi = a[3 * i] * x[0] + a[3 * i + 1] * x[1] + a[3 * i + 2] * x[2] + b[i];
                        val += r[i] * yi;
                        for j in 0..3 {
                            g[3 * i + j] = r[i] * x[j];
                            g[8 + j] += r[i] * a[3 * i + j];
                        }
                        g[6 + i] = r[i];
                    }
                    (val, g)
                },
                &v0,
                eps,
                400,
            )
        }
    }
}
