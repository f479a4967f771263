//! Cascaded geometric correction: affine → thin-plate spline → grid refinement.
//!
//! All stages produce [`SamplingGrid`]s in the projector frame whose values are
//! normalized camera coordinates. The affine and TPS grids are composed in grid
//! space and refined by a small encoder-decoder, so the camera image is sampled
//! exactly once.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::act::{leaky_relu, leaky_relu_backward};
use crate::diffcore::sampler::{self, unnormalize};
use crate::diffcore::{Checkpoint, Conv2d, ConvGeom, ConvTranspose2d, Param, Parameterized};
use crate::error::{Error, Result};
use crate::imaging::{norm_coord, SamplingGrid};
use crate::tensor::{matmul_acc, matmul_tn_acc, Real, Tensor};

/// Control points per side of the TPS lattice.
pub const TPS_LATTICE: usize = 6;
/// Coefficients per output dimension: three affine terms plus one weight per control point.
pub const TPS_PER_DIM: usize = 3 + TPS_LATTICE * TPS_LATTICE;
/// Coordinate written where a composed grid has a non-finite fine position.
pub const OUT_OF_BOUNDS: f64 = -2.0;
/// Scale of the small uniform initialization of TPS kernel weights and refinement weights.
pub const SMALL_INIT: f64 = 1e-4;

/// Row-major 2×3 matrix mapping normalized output coordinates to normalized source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams(pub [f64; 6]);

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    /// Uniform scale `s` about the origin followed by translation `(tx, ty)`.
    pub fn scale_translate(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Self([sx, 0.0, tx, 0.0, sy, ty])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * u + m[1] * v + m[2], m[3] * u + m[4] * v + m[5])
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        Self([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    /// Rejects non-finite matrices; warns when the linear part is nearly singular.
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters"));
        }
        if self.determinant().abs() < 1e-6 {
            warn!("affine matrix is nearly singular (det = {:e})", self.determinant());
        }
        Ok(())
    }
}

/// `grid(i, j) = p · (u_j, v_i, 1)`.
pub fn affine_grid<T: Real>(p: &[T], h: usize, w: usize) -> SamplingGrid<T> {
    assert_eq!(p.len(), 6);
    assert!(h >= 2 && w >= 2, "grid must be at least 2×2");
    let mut g = SamplingGrid::zeros(h, w);
    for i in 0..h {
        let v = T::lit(norm_coord(i, h));
        for j in 0..w {
            let u = T::lit(norm_coord(j, w));
            g.set(i, j, p[0] * u + p[1] * v + p[2], p[3] * u + p[4] * v + p[5]);
        }
    }
    g
}

/// Gradient of a scalar w.r.t. the six affine parameters given its gradient w.r.t. the grid.
pub fn affine_grid_backward<T: Real>(dgrid: &SamplingGrid<T>) -> [T; 6] {
    let (h, w) = dgrid.dims();
    let mut g = [T::zero(); 6];
    for i in 0..h {
        let v = T::lit(norm_coord(i, h));
        for j in 0..w {
            let u = T::lit(norm_coord(j, w));
            let (du, dv) = dgrid.get(i, j);
            g[0] += du * u;
            g[1] += du * v;
            g[2] += du;
            g[3] += dv * u;
            g[4] += dv * v;
            g[5] += dv;
        }
    }
    g
}

/// Normalized position of control point `k` on the fixed lattice.
pub fn tps_control_point(k: usize) -> (f64, f64) {
    let n = TPS_LATTICE;
    (norm_coord(k % n, n), norm_coord(k / n, n))
}

/// Radial kernel `U(r) = r² ln r`, with `U(0) = 0`.
pub fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// TPS coefficients, laid out per output dimension as `[a0, a1, a2, w_0 .. w_35]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsParams(pub Vec<f64>);

impl Default for TpsParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl TpsParams {
    pub fn identity() -> Self {
        let mut p = vec![0.0; 2 * TPS_PER_DIM];
        p[1] = 1.0;
        p[TPS_PER_DIM + 2] = 1.0;
        Self(p)
    }

    /// Identity affine part with kernel weights drawn uniformly in `±bound`.
    pub fn small_random(bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::identity();
        for d in 0..2 {
            for k in 3..TPS_PER_DIM {
                p.0[d * TPS_PER_DIM + k] = rng.random_range(-bound..=bound);
            }
        }
        p
    }
}

/// Precomputed design matrix `[1, u, v, U(|(u,v) - c_k|)...]`, one row per output pixel.
#[derive(Clone, Debug)]
pub struct TpsBasis<T> {
    h: usize,
    w: usize,
    rows: Vec<T>,
}

impl<T: Real> TpsBasis<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut rows = Vec::with_capacity(h * w * TPS_PER_DIM);
        for i in 0..h {
            let v = norm_coord(i, h);
            for j in 0..w {
                let u = norm_coord(j, w);
                rows.extend([T::one(), T::lit(u), T::lit(v)]);
                for k in 0..TPS_LATTICE * TPS_LATTICE {
                    let (cu, cv) = tps_control_point(k);
                    rows.push(T::lit(tps_kernel((u - cu).hypot(v - cv))));
                }
            }
        }
        Self { h, w, rows }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Evaluates the spline for coefficients `p` (length 78).
    pub fn grid(&self, p: &[T]) -> SamplingGrid<T> {
        assert_eq!(p.len(), 2 * TPS_PER_DIM);
        // Coefficients as a 39×2 matrix (column d = dimension d).
        let mut pm = vec![T::zero(); TPS_PER_DIM * 2];
        for d in 0..2 {
            for k in 0..TPS_PER_DIM {
                pm[k * 2 + d] = p[d * TPS_PER_DIM + k];
            }
        }
        let mut out = vec![T::zero(); self.h * self.w * 2];
        matmul_acc(self.h * self.w, TPS_PER_DIM, 2, &self.rows, &pm, &mut out);
        SamplingGrid::from_vec(self.h, self.w, out).expect("sized by construction")
    }

    /// Gradient w.r.t. the 78 coefficients given the gradient w.r.t. the grid.
    pub fn backward(&self, dgrid: &SamplingGrid<T>) -> Vec<T> {
        let mut pm = vec![T::zero(); TPS_PER_DIM * 2];
        matmul_tn_acc(TPS_PER_DIM, self.h * self.w, 2, &self.rows, dgrid.data(), &mut pm);
        let mut g = vec![T::zero(); 2 * TPS_PER_DIM];
        for d in 0..2 {
            for k in 0..TPS_PER_DIM {
                g[d * TPS_PER_DIM + k] = pm[k * 2 + d];
            }
        }
        g
    }
}

/// Evaluates the thin-plate spline grid at `h × w`.
pub fn tps_grid<T: Real>(p: &[T], h: usize, w: usize) -> SamplingGrid<T> {
    TpsBasis::new(h, w).grid(p)
}

/// Locates a normalized coordinate inside the coarse grid for composition.
///
/// Returns the cell origin and (possibly extrapolating) fractional offset, or
/// `None` for a non-finite position.
#[inline]
fn compose_cell<T: Real>(u: T, n: usize) -> Option<(usize, T)> {
    let x = unnormalize(u, n);
    if !x.is_finite() {
        return None;
    }
    let x0 = x.floor().max(T::zero()).to_usize().unwrap_or(0).min(n - 2);
    Some((x0, x - T::lit(x0 as f64)))
}

/// `φ(coarse; fine)`: samples the coarse coordinate field at the fine grid's positions.
///
/// Inside the coarse grid the field is interpolated bilinearly; outside it is
/// extrapolated from the nearest border cell, which is exact for affine fields
/// and keeps a gradient flowing back towards the support.
pub fn compose_grids<T: Real>(coarse: &SamplingGrid<T>, fine: &SamplingGrid<T>) -> SamplingGrid<T> {
    let (ch, cw) = coarse.dims();
    assert!(ch >= 2 && cw >= 2);
    let (h, w) = fine.dims();
    let oob = T::lit(OUT_OF_BOUNDS);
    let one = T::one();
    let mut out = SamplingGrid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let (fu, fv) = fine.get(i, j);
            match (compose_cell(fu, cw), compose_cell(fv, ch)) {
                (Some((x0, tx)), Some((y0, ty))) => {
                    let (a, b) = coarse.get(y0, x0);
                    let (c, d) = coarse.get(y0, x0 + 1);
                    let (e, f) = coarse.get(y0 + 1, x0);
                    let (g, k) = coarse.get(y0 + 1, x0 + 1);
                    let w00 = (one - tx) * (one - ty);
                    let w01 = tx * (one - ty);
                    let w10 = (one - tx) * ty;
                    let w11 = tx * ty;
                    out.set(
                        i,
                        j,
                        w00 * a + w01 * c + w10 * e + w11 * g,
                        w00 * b + w01 * d + w10 * f + w11 * k,
                    );
                }
                _ => out.set(i, j, oob, oob),
            }
        }
    }
    out
}

/// Reverse pass of [`compose_grids`]; accumulates into the provided gradients.
pub fn compose_grids_backward<T: Real>(
    coarse: &SamplingGrid<T>,
    fine: &SamplingGrid<T>,
    dout: &SamplingGrid<T>,
    mut dcoarse: Option<&mut SamplingGrid<T>>,
    mut dfine: Option<&mut SamplingGrid<T>>,
) {
    let (ch, cw) = coarse.dims();
    let (h, w) = fine.dims();
    let one = T::one();
    let sx = T::lit((cw as f64 - 1.0) / 2.0);
    let sy = T::lit((ch as f64 - 1.0) / 2.0);
    for i in 0..h {
        for j in 0..w {
            let (fu, fv) = fine.get(i, j);
            let (Some((x0, tx)), Some((y0, ty))) = (compose_cell(fu, cw), compose_cell(fv, ch)) else {
                continue;
            };
            let (gu, gv) = dout.get(i, j);
            let taps = [
                (y0, x0, (one - tx) * (one - ty)),
                (y0, x0 + 1, tx * (one - ty)),
                (y0 + 1, x0, (one - tx) * ty),
                (y0 + 1, x0 + 1, tx * ty),
            ];
            if let Some(dc) = dcoarse.as_deref_mut() {
                for &(yy, xx, wt) in &taps {
                    let (a, b) = dc.get(yy, xx);
                    dc.set(yy, xx, a + wt * gu, b + wt * gv);
                }
            }
            if let Some(df) = dfine.as_deref_mut() {
                let (a, b) = coarse.get(y0, x0);
                let (c, d) = coarse.get(y0, x0 + 1);
                let (e, f) = coarse.get(y0 + 1, x0);
                let (g, k) = coarse.get(y0 + 1, x0 + 1);
                // d(out)/d(tx) and d(out)/d(ty) for both output channels.
                let dtx_u = (one - ty) * (c - a) + ty * (g - e);
                let dtx_v = (one - ty) * (d - b) + ty * (k - f);
                let dty_u = (one - tx) * (e - a) + tx * (g - c);
                let dty_v = (one - tx) * (f - b) + tx * (k - d);
                let du = (gu * dtx_u + gv * dtx_v) * sx;
                let dv = (gu * dty_u + gv * dty_v) * sy;
                let (p, q) = df.get(i, j);
                df.set(i, j, p + du, q + dv);
            }
        }
    }
}

/// Three-level encoder-decoder predicting a residual displacement for a grid.
#[derive(Clone, Debug)]
pub struct RefineNet<T> {
    pub e1: Conv2d<T>,
    pub e2: Conv2d<T>,
    pub e3: Conv2d<T>,
    pub d2: ConvTranspose2d<T>,
    pub d1: ConvTranspose2d<T>,
    pub d0: ConvTranspose2d<T>,
    pub out: Conv2d<T>,
}

/// Activations kept by [`RefineNet::forward`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct RefineTape<T> {
    input: Tensor<T>,
    e1: Tensor<T>,
    e2: Tensor<T>,
    e3: Tensor<T>,
    p2: Tensor<T>,
    s2: Tensor<T>,
    p1: Tensor<T>,
    s1: Tensor<T>,
    d0: Tensor<T>,
}

impl<T: Real> RefineNet<T> {
    /// Base width `c` gives encoder widths `c, 2c, 4c`. Weights and the output
    /// bias are uniform in `±bound`; hidden biases keep the fan-in default so the
    /// residual starts near zero without starving the hidden units.
    pub fn new(c: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let down = ConvGeom::new(3, 2, 1);
        let same = ConvGeom::new(3, 1, 1);
        let mut net = Self {
            e1: Conv2d::new("refine.e1", 2, c, down, rng),
            e2: Conv2d::new("refine.e2", c, 2 * c, down, rng),
            e3: Conv2d::new("refine.e3", 2 * c, 4 * c, down, rng),
            d2: ConvTranspose2d::new("refine.d2", 4 * c, 2 * c, down, 1, rng),
            d1: ConvTranspose2d::new("refine.d1", 2 * c, c, down, 1, rng),
            d0: ConvTranspose2d::new("refine.d0", c, c, down, 1, rng),
            out: Conv2d::new("refine.out", c, 2, same, rng),
        };
        for p in net.params_mut() {
            if p.name.ends_with(".weight") || p.name == "refine.out.bias" {
                *p = Param::uniform(p.name.clone(), p.value.shape(), bound, rng);
            }
        }
        net
    }

    pub fn width(&self) -> usize {
        self.e1.out_ch()
    }

    /// `g + Net(g)`.
    pub fn forward(&self, g: &SamplingGrid<T>) -> Result<(SamplingGrid<T>, RefineTape<T>)> {
        let (h, w) = g.dims();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidInput(format!("refinement needs sizes divisible by 8, got {h}×{w}")));
        }
        let input = g.to_tensor();
        let mut e1 = self.e1.forward(&input);
        leaky_relu(&mut e1);
        let mut e2 = self.e2.forward(&e1);
        leaky_relu(&mut e2);
        let mut e3 = self.e3.forward(&e2);
        leaky_relu(&mut e3);
        let mut p2 = self.d2.forward(&e3);
        leaky_relu(&mut p2);
        let mut s2 = p2.clone();
        s2.add_assign(&e2);
        let mut p1 = self.d1.forward(&s2);
        leaky_relu(&mut p1);
        let mut s1 = p1.clone();
        s1.add_assign(&e1);
        let mut d0 = self.d0.forward(&s1);
        leaky_relu(&mut d0);
        let mut y = self.out.forward(&d0);
        y.add_assign(&input);
        let tape = RefineTape {
            input,
            e1,
            e2,
            e3,
            p2,
            s2,
            p1,
            s1,
            d0,
        };
        Ok((SamplingGrid::from_tensor(&y), tape))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input grid.
    pub fn backward(&mut self, tape: &RefineTape<T>, dy: &SamplingGrid<T>) -> SamplingGrid<T> {
        let dy = dy.to_tensor();
        let mut dd0 = self.out.backward(&tape.d0, &dy, true).unwrap();
        leaky_relu_backward(&tape.d0, &mut dd0);
        let ds1 = self.d0.backward(&tape.s1, &dd0, true).unwrap();
        let mut dp1 = ds1.clone();
        leaky_relu_backward(&tape.p1, &mut dp1);
        let mut ds2 = self.d1.backward(&tape.s2, &dp1, true).unwrap();
        let mut dp2 = ds2.clone();
        leaky_relu_backward(&tape.p2, &mut dp2);
        let mut de3 = self.d2.backward(&tape.e3, &dp2, true).unwrap();
        leaky_relu_backward(&tape.e3, &mut de3);
        // e2 feeds both e3 and the skip into s2.
        ds2.add_assign(&self.e3.backward(&tape.e2, &de3, true).unwrap());
        let mut de2 = ds2;
        leaky_relu_backward(&tape.e2, &mut de2);
        let mut de1 = ds1;
        de1.add_assign(&self.e2.backward(&tape.e1, &de2, true).unwrap());
        leaky_relu_backward(&tape.e1, &mut de1);
        let mut dx = self.e1.backward(&tape.input, &de1, true).unwrap();
        dx.add_assign(&dy);
        SamplingGrid::from_tensor(&dx)
    }
}

impl<T: Real> Parameterized<T> for RefineNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        v.extend(self.e1.params());
        v.extend(self.e2.params());
        v.extend(self.e3.params());
        v.extend(self.d2.params());
        v.extend(self.d1.params());
        v.extend(self.d0.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        v.extend(self.e1.params_mut());
        v.extend(self.e2.params_mut());
        v.extend(self.e3.params_mut());
        v.extend(self.d2.params_mut());
        v.extend(self.d1.params_mut());
        v.extend(self.d0.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// Refines `g` with `net`: `g + Net(g)`.
pub fn refine_grid<T: Real>(net: &RefineNet<T>, g: &SamplingGrid<T>) -> Result<SamplingGrid<T>> {
    Ok(net.forward(g)?.0)
}

/// The learnable warping network: affine, TPS and refinement parameters at a fixed output size.
#[derive(Clone, Debug)]
pub struct WarpingNet<T> {
    pub affine: Param<T>,
    pub tps: Param<T>,
    pub refine: RefineNet<T>,
    /// When false the refinement stage is skipped (identity) and its weights are frozen.
    pub use_refine: bool,
    basis: TpsBasis<T>,
}

/// Intermediate grids of one [`WarpingNet::forward`] call.
#[derive(Clone, Debug)]
pub struct WarpTape<T> {
    pub affine: SamplingGrid<T>,
    pub tps: SamplingGrid<T>,
    pub composed: SamplingGrid<T>,
    refine: Option<RefineTape<T>>,
}

impl<T: Real> WarpingNet<T> {
    /// Identity affine and TPS, refinement weights in `±refine_bound`.
    pub fn new(h: usize, w: usize, width: usize, refine_bound: f64, rng: &mut impl Rng) -> Result<Self> {
        if !h.is_multiple_of(8) || !w.is_multiple_of(8) || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!("warp size must be a positive multiple of 8, got {h}×{w}")));
        }
        Ok(Self {
            affine: Param::new("warp.affine", to_tensor(&AffineParams::identity().0)),
            tps: Param::new("warp.tps", to_tensor(&TpsParams::identity().0)),
            refine: RefineNet::new(width, refine_bound, rng),
            use_refine: true,
            basis: TpsBasis::new(h, w),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.basis.dims()
    }

    pub fn affine_params(&self) -> AffineParams {
        let d = self.affine.value.data();
        AffineParams(std::array::from_fn(|i| d[i].f64()))
    }

    pub fn set_affine(&mut self, a: &AffineParams) {
        self.affine.value = to_tensor(&a.0);
    }

    pub fn tps_params(&self) -> TpsParams {
        TpsParams(self.tps.value.data().iter().map(|v| v.f64()).collect())
    }

    pub fn set_tps(&mut self, p: &TpsParams) {
        assert_eq!(p.0.len(), 2 * TPS_PER_DIM);
        self.tps.value = to_tensor(&p.0);
    }

    /// Freezes refinement at the identity map (the no-refine ablation).
    pub fn disable_refine(&mut self) {
        self.use_refine = false;
        for p in self.refine.params_mut() {
            p.requires_grad = false;
        }
    }

    /// Builds `W(φ(Ω_aff; Ω_TPS))`.
    pub fn forward(&self) -> Result<(SamplingGrid<T>, WarpTape<T>)> {
        let (h, w) = self.dims();
        let affine = affine_grid(self.affine.value.data(), h, w);
        let tps = self.basis.grid(self.tps.value.data());
        let composed = compose_grids(&affine, &tps);
        let (grid, refine) = if self.use_refine {
            let (g, t) = self.refine.forward(&composed)?;
            (g, Some(t))
        } else {
            (composed.clone(), None)
        };
        Ok((
            grid,
            WarpTape {
                affine,
                tps,
                composed,
                refine,
            },
        ))
    }

    pub fn grid(&self) -> Result<SamplingGrid<T>> {
        Ok(self.forward()?.0)
    }

    /// Accumulates gradients of every stage from the gradient w.r.t. the final grid.
    pub fn backward(&mut self, tape: &WarpTape<T>, dgrid: &SamplingGrid<T>) {
        let dcomposed = match &tape.refine {
            Some(rt) => self.refine.backward(rt, dgrid),
            None => dgrid.clone(),
        };
        let (h, w) = self.dims();
        let mut daff = SamplingGrid::zeros(h, w);
        let mut dtps = SamplingGrid::zeros(h, w);
        compose_grids_backward(&tape.affine, &tape.tps, &dcomposed, Some(&mut daff), Some(&mut dtps));
        if self.affine.requires_grad {
            let g = affine_grid_backward(&daff);
            self.affine.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if self.tps.requires_grad {
            let g = self.basis.backward(&dtps);
            self.tps.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    pub fn cast<U: Real>(&self) -> WarpingNet<U> {
        let (h, w) = self.dims();
        let mut out = WarpingNet {
            affine: Param::new("warp.affine", self.affine.value.cast()),
            tps: Param::new("warp.tps", self.tps.value.cast()),
            refine: RefineNet::<U>::new(self.refine.width(), 0.0, &mut ChaCha8Rng::seed_from_u64(0)),
            use_refine: self.use_refine,
            basis: TpsBasis::new(h, w),
        };
        out.affine.requires_grad = self.affine.requires_grad;
        out.tps.requires_grad = self.tps.requires_grad;
        for (dst, src) in out.refine.params_mut().into_iter().zip(self.refine.params()) {
            dst.value = src.value.cast();
            dst.requires_grad = src.requires_grad;
        }
        out
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let (h, w) = self.dims();
        ck.set_meta("warp.height", h.to_string());
        ck.set_meta("warp.width", w.to_string());
        ck.set_meta("warp.refine_width", self.refine.width().to_string());
        ck.set_meta("warp.use_refine", self.use_refine.to_string());
        ck.insert_params("warp", self);
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let h = meta_usize(ck, "warp.height")?;
        let w = meta_usize(ck, "warp.width")?;
        let width = meta_usize(ck, "warp.refine_width")?;
        let mut net = Self::new(h, w, width, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_params("warp", &mut net)?;
        if ck.meta("warp.use_refine") == Some("false") {
            net.disable_refine();
        }
        Ok(net)
    }
}

impl<T: Real> Parameterized<T> for WarpingNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.affine, &self.tps];
        v.extend(self.refine.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.affine, &mut self.tps];
        v.extend(self.refine.params_mut());
        v
    }
}

pub(crate) fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta(key).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
        what: "checkpoint",
        detail: format!("missing or invalid `{key}`"),
    })
}

fn to_tensor<T: Real>(v: &[f64]) -> Tensor<T> {
    Tensor::from_vec([1, 1, 1, v.len()], v.iter().map(|&x| T::lit(x)).collect())
}

/// `T⁻¹(img)`: one grid evaluation and one sampling of every batch item.
pub fn warp_image<T: Real>(net: &WarpingNet<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    if !img.is_finite() {
        return Err(Error::NonFinite("warp input"));
    }
    Ok(sampler::grid_sample(img, &net.grid()?))
}

/// Collapses the cascade into its final grid.
pub fn simplify_warp<T: Real>(net: &WarpingNet<T>) -> Result<SamplingGrid<T>> {
    net.grid()
}

const GRID_MAGIC: &[u8; 4] = b"PGRD";

/// Writes a grid as `PGRD`, `u32` height, `u32` width, then `(u, v)` pairs as little-endian `f32`.
pub fn write_flat_grid<T: Real>(grid: &SamplingGrid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + grid.data().len() * 4);
    buf.write_all(GRID_MAGIC).unwrap();
    buf.write_all(&(grid.height() as u32).to_le_bytes()).unwrap();
    buf.write_all(&(grid.width() as u32).to_le_bytes()).unwrap();
    for v in grid.data() {
        buf.write_all(&(v.f64() as f32).to_le_bytes()).unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flat_grid(path: impl AsRef<Path>) -> Result<SamplingGrid<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::Format {
        what: "flat grid",
        detail: d.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != GRID_MAGIC {
        return Err(bad("bad magic"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + h * w * 8 {
        return Err(bad("length does not match header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SamplingGrid::from_vec(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{bilinear_sample, Image};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identity_and_translation_affine_grids() {
        let g = affine_grid(&AffineParams::identity().0, 5, 7);
        assert_eq!(g.max_abs_diff(&SamplingGrid::identity(5, 7)), 0.0);
        let t = affine_grid(&[1.0, 0.0, 0.5, 0.0, 1.0, 0.0], 5, 7);
        for i in 0..5 {
            for j in 0..7 {
                let (u, v) = t.get(i, j);
                assert!((u - norm_coord(j, 7) - 0.5).abs() < 1e-15);
                assert_eq!(v, norm_coord(i, 5));
            }
        }
    }

    #[test]
    fn affine_grid_matches_loop_oracle() {
        let mut r = rng();
        let p: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let g = affine_grid(&p, 9, 6);
        for i in 0..9 {
            for j in 0..6 {
                let u = 2.0 * j as f64 / 5.0 - 1.0;
                let v = 2.0 * i as f64 / 8.0 - 1.0;
                let (a, b) = g.get(i, j);
                assert!((a - (p[0] * u + p[1] * v + p[2])).abs() < 1e-7);
                assert!((b - (p[3] * u + p[4] * v + p[5])).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn tps_identity_and_affine_part() {
        let g = tps_grid(&TpsParams::identity().0, 8, 8);
        assert!(g.max_abs_diff(&SamplingGrid::identity(8, 8)) < 1e-12);
        let a = [0.9, 0.1, -0.2, -0.05, 1.1, 0.3];
        let mut p = vec![0.0; 78];
        p[..3].copy_from_slice(&[a[2], a[0], a[1]]);
        p[39..42].copy_from_slice(&[a[5], a[3], a[4]]);
        let g = tps_grid(&p, 8, 8);
        assert!(g.max_abs_diff(&affine_grid(&a, 8, 8)) < 1e-12);
    }

    #[test]
    fn tps_single_weight_matches_scalar_formula() {
        let mut p = TpsParams::identity().0;
        p[3 + 14] = 0.3;
        let (h, w) = (10, 12);
        let g = tps_grid(&p, h, w);
        let (cu, cv) = tps_control_point(14);
        for &(i, j) in &[(0, 0), (3, 4), (5, 11), (9, 2), (7, 7)] {
            let u = norm_coord(j, w);
            let v = norm_coord(i, h);
            let r = ((u - cu).powi(2) + (v - cv).powi(2)).sqrt();
            let expect = u + 0.3 * if r == 0.0 { 0.0 } else { r * r * r.ln() };
            assert!((g.get(i, j).0 - expect).abs() < 1e-12);
            assert!((g.get(i, j).1 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_identities() {
        let mut r = rng();
        let g = SamplingGrid::<f64>::from_fn(8, 9, |_, _| (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        let id = SamplingGrid::identity(8, 9);
        assert_eq!(compose_grids(&g, &id).max_abs_diff(&g), 0.0);
        assert!(compose_grids(&id, &g).max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn composition_of_affines_is_matrix_product() {
        let a = AffineParams([0.8, 0.1, 0.05, -0.1, 0.9, -0.02]);
        let b = AffineParams([0.7, -0.05, 0.1, 0.08, 0.75, 0.0]);
        let ga = affine_grid(&a.0, 16, 16);
        let gb = affine_grid(&b.0, 16, 16);
        let expect = affine_grid(&a.compose(&b).0, 16, 16);
        assert!(compose_grids(&ga, &gb).max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn outside_positions_extrapolate() {
        let fine = SamplingGrid::from_fn(2, 2, |_, _| (1.5, -1.25));
        let a = AffineParams([0.5, 0.1, 0.2, -0.1, 0.8, 0.05]);
        let out = compose_grids(&affine_grid(&a.0, 4, 4), &fine);
        let (u, v) = out.get(0, 0);
        let (eu, ev) = a.apply(1.5, -1.25);
        assert!((u - eu).abs() < 1e-12 && (v - ev).abs() < 1e-12);
        let nan = SamplingGrid::from_fn(1, 1, |_, _| (f64::NAN, 0.0));
        assert_eq!(compose_grids(&SamplingGrid::identity(4, 4), &nan).get(0, 0), (OUT_OF_BOUNDS, OUT_OF_BOUNDS));
    }

    #[test]
    fn zero_refinement_is_identity() {
        let mut net = RefineNet::<f64>::new(4, 0.1, &mut rng());
        net.zero_weights();
        let mut r = rng();
        let g = SamplingGrid::<f64>::from_fn(16, 16, |_, _| (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        assert_eq!(refine_grid(&net, &g).unwrap().max_abs_diff(&g), 0.0);
        assert!(refine_grid(&net, &SamplingGrid::<f64>::identity(12, 16)).is_err());
    }

    #[test]
    fn small_init_refinement_stays_small() {
        let net = RefineNet::<f64>::new(32, SMALL_INIT, &mut rng());
        let g = SamplingGrid::identity(32, 32);
        assert!(refine_grid(&net, &g).unwrap().max_abs_diff(&g) <= 1e-2);
    }

    fn smooth_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            [
                0.5 + 0.4 * (3.0 * u).sin() * (2.0 * v).cos(),
                0.5 + 0.3 * (2.5 * v + u).sin(),
                0.4 + 0.3 * u * v,
            ]
        })
    }

    fn smooth_net() -> WarpingNet<f64> {
        let mut r = rng();
        let mut net = WarpingNet::<f64>::new(64, 64, 4, 0.0, &mut r).unwrap();
        net.set_affine(&AffineParams([0.85, 0.05, 0.03, -0.04, 0.8, -0.05]));
        net.set_tps(&TpsParams::small_random(0.003, &mut r));
        net.disable_refine();
        net
    }

    #[test]
    fn grid_space_composition_matches_triple_sampling() {
        let net = smooth_net();
        let img = smooth_image(64, 64);
        let (grid, tape) = net.forward().unwrap();
        let once = bilinear_sample(&img, &grid).unwrap();
        let twice = bilinear_sample(&bilinear_sample(&img, &tape.affine).unwrap(), &tape.tps).unwrap();
        // Only where the TPS grid stays a pixel inside the intermediate image;
        // elsewhere its zero padding bleeds into the triple-sampled result.
        let inside = |t: f64| t.abs() <= 1.0 - 2.0 / 63.0;
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for y in 0..64 {
            for x in 0..64 {
                let (u, v) = tape.tps.get(y, x);
                if !(inside(u) && inside(v)) {
                    continue;
                }
                count += 1;
                for c in 0..3 {
                    worst = worst.max((once.get(c, y, x) - twice.get(c, y, x)).abs() as f64);
                }
            }
        }
        assert!(count > 3000);
        assert!(worst <= 0.02, "max diff {worst}");
    }

    #[test]
    fn affine_only_warp_equals_single_sample() {
        let mut r = rng();
        let mut net = WarpingNet::<f64>::new(32, 32, 4, 0.0, &mut r).unwrap();
        net.set_affine(&AffineParams([0.7, 0.1, 0.1, -0.1, 0.8, 0.05]));
        net.refine.zero_weights();
        let img = smooth_image(32, 32).to_tensor::<f64>();
        let full = warp_image(&net, &img).unwrap();
        let direct = sampler::grid_sample(&img, &affine_grid(&net.affine_params().0, 32, 32));
        assert!(full.max_abs_diff(&direct) <= 1e-12);
    }

    #[test]
    fn simplified_grid_reproduces_full_warp() {
        let mut r = rng();
        let mut net = WarpingNet::<f64>::new(32, 32, 4, 0.01, &mut r).unwrap();
        net.set_tps(&TpsParams::small_random(0.02, &mut r));
        let grid = simplify_warp(&net).unwrap();
        for _ in 0..3 {
            let img = Image::from_fn(32, 32, |_, _| [r.random(), r.random(), r.random()]).to_tensor::<f64>();
            let a = warp_image(&net, &img).unwrap();
            let b = sampler::grid_sample(&img, &grid);
            assert!(a.max_abs_diff(&b) <= 1e-6);
        }
        let id = WarpingNet::<f64>::new(16, 16, 4, 0.0, &mut r).unwrap();
        assert!(simplify_warp(&id).unwrap().max_abs_diff(&SamplingGrid::identity(16, 16)) < 1e-12);
    }

    #[test]
    fn flat_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SamplingGrid::<f64>::from_fn(3, 4, |i, j| (i as f64 * 0.25, j as f64 * -0.5));
        let p = dir.path().join("g.pgrd");
        write_flat_grid(&g, &p).unwrap();
        assert_eq!(read_flat_grid(&p).unwrap(), g);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng();
        let mut net = WarpingNet::<f32>::new(16, 24, 4, 0.01, &mut r).unwrap();
        net.set_tps(&TpsParams::small_random(0.02, &mut r));
        let mut ck = Checkpoint::new();
        net.save_into(&mut ck);
        let back = WarpingNet::<f32>::load_from(&ck).unwrap();
        assert_eq!(back.grid().unwrap(), net.grid().unwrap());
    }
}
