//! Double-precision finite-difference checks of every differentiable stage.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::gradcheck::{check_primitive, grad_check, primitive_set, DEFAULT_EPS, DEFAULT_THRESHOLD};
use crate::diffcore::{sampler, ssim, Parameterized};
use crate::error::Result;
use crate::imaging::SamplingGrid;
use crate::photometric::PhotometricNet;
use crate::tensor::Tensor;
use crate::warp::{affine_grid, affine_grid_backward, compose_grids, compose_grids_backward, TpsBasis, TpsParams, WarpingNet, TPS_PER_DIM};

/// Coordinates probed per check.
const PROBES: usize = 300;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_grid(h: usize, w: usize, span: f64, rng: &mut impl Rng) -> SamplingGrid<f64> {
    SamplingGrid::from_vec(h, w, rand_vec(2 * h * w, -span, span, rng)).unwrap()
}

fn report(name: &str, start: Instant, err: f64) -> GradReport {
    GradReport {
        name: name.to_string(),
        max_rel_error: err,
        passed: err <= DEFAULT_THRESHOLD,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn check_affine_grid(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (7, 9);
    let r = rand_vec(2 * h * w, -1.0, 1.0, &mut rng);
    let p0 = rand_vec(6, -1.0, 1.0, &mut rng);
    grad_check(
        |p| {
            let g = affine_grid(p, h, w);
            let dg = SamplingGrid::from_vec(h, w, r.clone()).unwrap();
            (dot(g.data(), &r), affine_grid_backward(&dg).to_vec())
        },
        &p0,
        DEFAULT_EPS,
        PROBES,
    )
}

pub fn check_tps_grid(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (10, 12);
    let basis = TpsBasis::<f64>::new(h, w);
    let r = rand_vec(2 * h * w, -1.0, 1.0, &mut rng);
    let p0 = TpsParams::small_random(0.05, &mut rng).0;
    grad_check(
        |p| {
            let g = basis.grid(p);
            let dg = SamplingGrid::from_vec(h, w, r.clone()).unwrap();
            (dot(g.data(), &r), basis.backward(&dg))
        },
        &p0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// Gradient of grid composition w.r.t. both the coarse field and the fine positions.
pub fn check_compose(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (6, 7);
    let r = rand_vec(2 * h * w, -1.0, 1.0, &mut rng);
    let mut v0 = random_grid(h, w, 1.0, &mut rng).data().to_vec();
    v0.extend(random_grid(h, w, 1.05, &mut rng).data());
    let n = 2 * h * w;
    grad_check(
        |v| {
            let coarse = SamplingGrid::from_vec(h, w, v[..n].to_vec()).unwrap();
            let fine = SamplingGrid::from_vec(h, w, v[n..].to_vec()).unwrap();
            let out = compose_grids(&coarse, &fine);
            let mut dc = SamplingGrid::zeros(h, w);
            let mut df = SamplingGrid::zeros(h, w);
            let dout = SamplingGrid::from_vec(h, w, r.clone()).unwrap();
            compose_grids_backward(&coarse, &fine, &dout, Some(&mut dc), Some(&mut df));
            let mut g = dc.data().to_vec();
            g.extend(df.data());
            (dot(out.data(), &r), g)
        },
        &v0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// The refinement network w.r.t. its weights and its input grid.
pub fn check_refine_net(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 16);
    let mut net = WarpingNet::<f64>::new(h, w, 3, 0.3, &mut rng)?;
    net.set_tps(&TpsParams::small_random(0.05, &mut rng));
    let refine = net.refine.clone();
    let g0 = random_grid(h, w, 1.0, &mut rng);
    let r = rand_vec(2 * h * w, -1.0, 1.0, &mut rng);
    let np = refine.num_params();
    let mut v0 = refine.flat_values();
    v0.extend(g0.data());
    grad_check(
        |v| {
            let mut m = refine.clone();
            m.set_flat_values(&v[..np]);
            m.zero_grad();
            let g = SamplingGrid::from_vec(h, w, v[np..].to_vec()).unwrap();
            let (out, tape) = m.forward(&g).unwrap();
            let dg = m.backward(&tape, &SamplingGrid::from_vec(h, w, r.clone()).unwrap());
            let mut grad = m.flat_grads();
            grad.extend(dg.data());
            (dot(out.data(), &r), grad)
        },
        &v0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// The whole warping cascade (affine, TPS, composition, refinement) w.r.t. all parameters.
pub fn check_warping_net(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 16);
    let mut net = WarpingNet::<f64>::new(h, w, 2, 0.3, &mut rng)?;
    net.set_affine(&crate::warp::AffineParams([0.8, 0.05, 0.02, -0.03, 0.85, 0.01]));
    net.set_tps(&TpsParams::small_random(0.01, &mut rng));
    let r = rand_vec(2 * h * w, -1.0, 1.0, &mut rng);
    let v0 = net.flat_values();
    grad_check(
        |v| {
            let mut m = net.clone();
            m.set_flat_values(v);
            m.zero_grad();
            let (g, tape) = m.forward().unwrap();
            m.backward(&tape, &SamplingGrid::from_vec(h, w, r.clone()).unwrap());
            (dot(g.data(), &r), m.flat_grads())
        },
        &v0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// The compensation network w.r.t. its weights, the input batch and the surface image.
pub fn check_photometric_net(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PhotometricNet::<f64>::new(2, &mut rng);
    let xs = [2, 3, 8, 8];
    let ss = [1, 3, 8, 8];
    let nx: usize = xs.iter().product();
    let ns: usize = ss.iter().product();
    let r = rand_vec(nx, -1.0, 1.0, &mut rng);
    let np = net.num_params();
    let mut v0 = net.flat_values();
    v0.extend(rand_vec(nx, 0.3, 0.7, &mut rng));
    v0.extend(rand_vec(ns, 0.0, 1.0, &mut rng));
    grad_check(
        |v| {
            let mut m = net.clone();
            m.set_flat_values(&v[..np]);
            m.zero_grad();
            let x = Tensor::from_vec(xs, v[np..np + nx].to_vec());
            let s = Tensor::from_vec(ss, v[np + nx..].to_vec());
            let (y, tape) = m.forward(&x, &s).unwrap();
            let (dx, ds) = m.backward(&tape, &Tensor::from_vec(xs, r.clone()), true);
            let mut g = m.flat_grads();
            g.extend(dx.unwrap().data());
            g.extend(ds.data());
            (dot(y.data(), &r), g)
        },
        &v0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// `ℓ1 + (1 − SSIM)` on a random 32×32 pair.
pub fn check_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 3, 32, 32];
    let n: usize = shape.iter().product();
    let target = Tensor::from_vec(shape, rand_vec(n, 0.0, 1.0, &mut rng));
    let v0 = rand_vec(n, 0.0, 1.0, &mut rng);
    grad_check(
        |v| {
            let (l, g) = ssim::l1_ssim_loss(&Tensor::from_vec(shape, v.to_vec()), &target, true).unwrap();
            (l, g.unwrap().into_vec())
        },
        &v0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// Samples a warped image through a TPS grid and checks the gradient w.r.t. the TPS coefficients.
pub fn check_sampled_tps(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (12, 12);
    let basis = TpsBasis::<f64>::new(h, w);
    let img = Tensor::from_vec([1, 3, 12, 12], rand_vec(3 * h * w, 0.0, 1.0, &mut rng));
    let r = rand_vec(3 * h * w, -1.0, 1.0, &mut rng);
    let mut p0 = TpsParams::small_random(0.02, &mut rng).0;
    // Shrink slightly so samples stay off the pixel lattice.
    p0[1] = 0.93;
    p0[TPS_PER_DIM + 2] = 0.91;
    grad_check(
        |p| {
            let g = basis.grid(p);
            let out = sampler::grid_sample(&img, &g);
            let mut dg = SamplingGrid::zeros(h, w);
            sampler::grid_sample_backward(&img, &g, &Tensor::from_vec(out.shape(), r.clone()), None, Some(&mut dg));
            (dot(out.data(), &r), basis.backward(&dg))
        },
        &p0,
        DEFAULT_EPS,
        PROBES,
    )
}

/// Runs every check: the primitive contract, then each network stage.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for &p in primitive_set() {
        let t = Instant::now();
        let err = check_primitive(p, seed)?;
        out.push(report(&format!("primitive/{}", p.name()), t, err));
    }
    type Check = fn(u64) -> Result<f64>;
    let stages: [(&str, Check); 8] = [
        ("warp/affine_grid", check_affine_grid),
        ("warp/tps_grid", check_tps_grid),
        ("warp/compose_grids", check_compose),
        ("warp/tps_then_sample", check_sampled_tps),
        ("warp/refine_net", check_refine_net),
        ("warp/warping_net", check_warping_net),
        ("photometric/net", check_photometric_net),
        ("training/l1_ssim_loss", check_loss),
    ];
    for (name, f) in stages {
        let t = Instant::now();
        let err = f(seed)?;
        out.push(report(name, t, err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_stage_passes() {
        for r in run_suite(7).unwrap() {
            eprintln!("{:<40} {:.3e}", r.name, r.max_rel_error);
            assert!(r.passed, "{} failed with {}", r.name, r.max_rel_error);
        }
    }
}
