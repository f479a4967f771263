//! Photometric compensation network conditioned on the warped surface image.
//!
//! Two branches share a topology (two stride-2 convolutions, then one at the
//! same resolution). Surface-branch features are added into the backbone at
//! each depth; those sums are constant for a fixed surface, so trimming stores
//! them as bias maps and drops the branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::act::{clamp_unit, clamp_unit_backward, leaky_relu, leaky_relu_backward};
use crate::diffcore::{Checkpoint, Conv2d, ConvGeom, ConvTranspose2d, Param, Parameterized};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::tensor::{Real, Tensor};
use crate::warp::meta_usize;

const DOWN: ConvGeom = ConvGeom::new(3, 2, 1);
const SAME: ConvGeom = ConvGeom::new(3, 1, 1);

/// Surface features at the three merge depths.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceFeatures<T> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
}

impl<T: Real> SurfaceFeatures<T> {
    pub fn len(&self) -> usize {
        self.f1.len() + self.f2.len() + self.f3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SurfaceBranch<T> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
    pub c3: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct SurfaceTape<T> {
    input: Tensor<T>,
    feats: SurfaceFeatures<T>,
}

impl<T: Real> SurfaceBranch<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv2d::new("surface.c1", 3, c, DOWN, rng),
            c2: Conv2d::new("surface.c2", c, 2 * c, DOWN, rng),
            c3: Conv2d::new("surface.c3", 2 * c, 4 * c, SAME, rng),
        }
    }

    /// `s` must hold a single surface image.
    pub fn forward(&self, s: &Tensor<T>) -> (SurfaceFeatures<T>, SurfaceTape<T>) {
        let mut f1 = self.c1.forward(s);
        leaky_relu(&mut f1);
        let mut f2 = self.c2.forward(&f1);
        leaky_relu(&mut f2);
        let mut f3 = self.c3.forward(&f2);
        leaky_relu(&mut f3);
        let feats = SurfaceFeatures { f1, f2, f3 };
        (
            feats.clone(),
            SurfaceTape {
                input: s.clone(),
                feats,
            },
        )
    }

    /// Returns the gradient w.r.t. the surface image.
    pub fn backward(&mut self, tape: &SurfaceTape<T>, d: &SurfaceFeatures<T>) -> Tensor<T> {
        let f = &tape.feats;
        let mut d3 = d.f3.clone();
        leaky_relu_backward(&f.f3, &mut d3);
        let mut d2 = d.f2.clone();
        d2.add_assign(&self.c3.backward(&f.f2, &d3, true).unwrap());
        leaky_relu_backward(&f.f2, &mut d2);
        let mut d1 = d.f1.clone();
        d1.add_assign(&self.c2.backward(&f.f1, &d2, true).unwrap());
        leaky_relu_backward(&f.f1, &mut d1);
        self.c1.backward(&tape.input, &d1, true).unwrap()
    }
}

impl<T: Real> Parameterized<T> for SurfaceBranch<T> {
    fn params(&self) -> Vec<&Param<T>> {
        [&self.c1, &self.c2, &self.c3].into_iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        v.extend(self.c1.params_mut());
        v.extend(self.c2.params_mut());
        v.extend(self.c3.params_mut());
        v
    }
}

/// Input-image branch, residual blocks and decoder.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
    pub c3: Conv2d<T>,
    pub res1: Conv2d<T>,
    pub res2: Conv2d<T>,
    pub up1: ConvTranspose2d<T>,
    pub up2: ConvTranspose2d<T>,
    pub out: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneTape<T> {
    x: Tensor<T>,
    p1: Tensor<T>,
    a1: Tensor<T>,
    p2: Tensor<T>,
    a2: Tensor<T>,
    p3: Tensor<T>,
    a3: Tensor<T>,
    r1: Tensor<T>,
    r2: Tensor<T>,
    u1: Tensor<T>,
    u2: Tensor<T>,
    pre: Tensor<T>,
}

impl<T: Real> Backbone<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv2d::new("backbone.c1", 3, c, DOWN, rng),
            c2: Conv2d::new("backbone.c2", c, 2 * c, DOWN, rng),
            c3: Conv2d::new("backbone.c3", 2 * c, 4 * c, SAME, rng),
            res1: Conv2d::new("backbone.res1", 4 * c, 4 * c, SAME, rng),
            res2: Conv2d::new("backbone.res2", 4 * c, 4 * c, SAME, rng),
            up1: ConvTranspose2d::new("backbone.up1", 4 * c, 2 * c, DOWN, 1, rng),
            up2: ConvTranspose2d::new("backbone.up2", 2 * c, c, DOWN, 1, rng),
            out: Conv2d::new("backbone.out", c, 3, SAME, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.c1.out_ch()
    }

    /// `clamp(dec(res(enc(x) + feats)) + x)`; the tape is only filled when requested.
    pub fn forward(&self, x: &Tensor<T>, feats: &SurfaceFeatures<T>, keep: bool) -> (Tensor<T>, Option<BackboneTape<T>>) {
        let mut p1 = self.c1.forward(x);
        leaky_relu(&mut p1);
        let mut a1 = p1.clone();
        a1.add_broadcast(&feats.f1);
        let mut p2 = self.c2.forward(&a1);
        leaky_relu(&mut p2);
        let mut a2 = p2.clone();
        a2.add_broadcast(&feats.f2);
        let mut p3 = self.c3.forward(&a2);
        leaky_relu(&mut p3);
        let mut a3 = p3.clone();
        a3.add_broadcast(&feats.f3);
        let mut r1 = self.res1.forward(&a3);
        r1.add_assign(&a3);
        leaky_relu(&mut r1);
        let mut r2 = self.res2.forward(&r1);
        r2.add_assign(&r1);
        leaky_relu(&mut r2);
        let mut u1 = self.up1.forward(&r2);
        leaky_relu(&mut u1);
        let mut u2 = self.up2.forward(&u1);
        leaky_relu(&mut u2);
        let mut pre = self.out.forward(&u2);
        pre.add_assign(x);
        let mut y = pre.clone();
        clamp_unit(&mut y);
        let tape = keep.then(|| BackboneTape {
            x: x.clone(),
            p1,
            a1,
            p2,
            a2,
            p3,
            a3,
            r1,
            r2,
            u1,
            u2,
            pre,
        });
        (y, tape)
    }

    /// Returns `(dL/dx, dL/dfeats)`; feature gradients are summed over the batch.
    pub fn backward(&mut self, t: &BackboneTape<T>, dy: &Tensor<T>, want_dx: bool) -> (Option<Tensor<T>>, SurfaceFeatures<T>) {
        let mut dpre = dy.clone();
        clamp_unit_backward(&t.pre, &mut dpre);
        let mut du2 = self.out.backward(&t.u2, &dpre, true).unwrap();
        leaky_relu_backward(&t.u2, &mut du2);
        let mut du1 = self.up2.backward(&t.u1, &du2, true).unwrap();
        leaky_relu_backward(&t.u1, &mut du1);
        let mut dr2 = self.up1.backward(&t.r2, &du1, true).unwrap();
        leaky_relu_backward(&t.r2, &mut dr2);
        let mut dr1 = dr2.clone();
        dr1.add_assign(&self.res2.backward(&t.r1, &dr2, true).unwrap());
        leaky_relu_backward(&t.r1, &mut dr1);
        let mut da3 = dr1.clone();
        da3.add_assign(&self.res1.backward(&t.a3, &dr1, true).unwrap());
        let f3 = da3.sum_batch();
        let mut dp3 = da3;
        leaky_relu_backward(&t.p3, &mut dp3);
        let da2 = self.c3.backward(&t.a2, &dp3, true).unwrap();
        let f2 = da2.sum_batch();
        let mut dp2 = da2;
        leaky_relu_backward(&t.p2, &mut dp2);
        let da1 = self.c2.backward(&t.a1, &dp2, true).unwrap();
        let f1 = da1.sum_batch();
        let mut dp1 = da1;
        leaky_relu_backward(&t.p1, &mut dp1);
        let dx = self.c1.backward(&t.x, &dp1, want_dx).map(|mut d| {
            d.add_assign(&dpre);
            d
        });
        (dx, SurfaceFeatures { f1, f2, f3 })
    }

    /// Elements of every intermediate activation for one `h × w` input.
    fn activation_elements(&self, h: usize, w: usize) -> usize {
        let c = self.width();
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        // input, p1/a1, p2/a2, p3/a3, r1, r2, u1, u2, output
        3 * h * w + 2 * c * h2 * w2 + 2 * 2 * c * h4 * w4 + 4 * 4 * c * h4 * w4 + 2 * c * h2 * w2 + c * h * w + 3 * h * w
    }
}

impl<T: Real> Parameterized<T> for Backbone<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for c in [&self.c1, &self.c2, &self.c3, &self.res1, &self.res2] {
            v.extend(c.params());
        }
        v.extend(self.up1.params());
        v.extend(self.up2.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        v.extend(self.c1.params_mut());
        v.extend(self.c2.params_mut());
        v.extend(self.c3.params_mut());
        v.extend(self.res1.params_mut());
        v.extend(self.res2.params_mut());
        v.extend(self.up1.params_mut());
        v.extend(self.up2.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// The full compensation network `F†(x; s)`.
#[derive(Clone, Debug)]
pub struct PhotometricNet<T> {
    pub backbone: Backbone<T>,
    pub surface: SurfaceBranch<T>,
}

#[derive(Clone, Debug)]
pub struct PhotoTape<T> {
    backbone: BackboneTape<T>,
    surface: SurfaceTape<T>,
}

/// Element counts used to compare the memory footprint of the full and trimmed paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferCount {
    pub parameters: usize,
    pub activations: usize,
}

impl BufferCount {
    pub fn total(&self) -> usize {
        self.parameters + self.activations
    }
}

fn check_sizes<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    if x.c() != 3 || s.c() != 3 || s.n() != 1 || x.h() != s.h() || x.w() != s.w() {
        return Err(Error::ShapeMismatch(format!("input {:?} vs surface {:?}", x.shape(), s.shape())));
    }
    check_divisible(x)
}

fn check_divisible<T: Real>(x: &Tensor<T>) -> Result<()> {
    if !x.h().is_multiple_of(4) || !x.w().is_multiple_of(4) || x.h() == 0 || x.w() == 0 {
        return Err(Error::InvalidInput(format!("image size {}×{} not divisible by 4", x.h(), x.w())));
    }
    Ok(())
}

impl<T: Real> PhotometricNet<T> {
    /// Base width `c` gives branch widths `c, 2c, 4c`.
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            backbone: Backbone::new(c, rng),
            surface: SurfaceBranch::new(c, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.backbone.width()
    }

    /// Batched forward pass; `s` is a single warped surface image shared by the batch.
    pub fn forward(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<(Tensor<T>, PhotoTape<T>)> {
        check_sizes(x, s)?;
        let (feats, surface) = self.surface.forward(s);
        let (y, tape) = self.backbone.forward(x, &feats, true);
        Ok((
            y,
            PhotoTape {
                backbone: tape.unwrap(),
                surface,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        check_sizes(x, s)?;
        let (feats, _) = self.surface.forward(s);
        Ok(self.backbone.forward(x, &feats, false).0)
    }

    /// Accumulates parameter gradients; returns `(dL/dx, dL/ds)`.
    pub fn backward(&mut self, tape: &PhotoTape<T>, dy: &Tensor<T>, want_dx: bool) -> (Option<Tensor<T>>, Tensor<T>) {
        let (dx, dfeats) = self.backbone.backward(&tape.backbone, dy, want_dx);
        let ds = self.surface.backward(&tape.surface, &dfeats);
        (dx, ds)
    }

    pub fn buffers(&self, h: usize, w: usize) -> BufferCount {
        let c = self.width();
        let feats = c * (h / 2) * (w / 2) + 2 * c * (h / 4) * (w / 4) + 4 * c * (h / 4) * (w / 4);
        BufferCount {
            parameters: self.num_params(),
            activations: self.backbone.activation_elements(h, w) + 3 * h * w + feats,
        }
    }

    pub fn cast<U: Real>(&self) -> PhotometricNet<U> {
        let mut out = PhotometricNet::<U>::new(self.width(), &mut ChaCha8Rng::seed_from_u64(0));
        for (d, s) in out.params_mut().into_iter().zip(self.params()) {
            d.value = s.value.cast();
            d.requires_grad = s.requires_grad;
        }
        out
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.set_meta("photo.width", self.width().to_string());
        ck.set_meta("photo.trimmed", "false");
        ck.insert_params("photo", self);
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("photo.trimmed") == Some("true") {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "photometric network is trimmed".into(),
            });
        }
        let mut net = Self::new(meta_usize(ck, "photo.width")?, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_params("photo", &mut net)?;
        Ok(net)
    }
}

impl<T: Real> Parameterized<T> for PhotometricNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.backbone.params();
        v.extend(self.surface.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.backbone.params_mut();
        v.extend(self.surface.params_mut());
        v
    }
}

/// `F†(x_warped; s_warped)` for a single image.
pub fn compensate(net: &PhotometricNet<f32>, x_warped: &Image, s_warped: &Image) -> Result<Image> {
    if x_warped.dims() != s_warped.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x_warped.dims(), s_warped.dims())));
    }
    let y = net.infer(&x_warped.to_tensor(), &s_warped.to_tensor())?;
    Ok(Image::from_tensor(&y, 0))
}

/// Backbone with the surface branch replaced by constant bias maps.
#[derive(Clone, Debug)]
pub struct TrimmedPhotometricNet<T> {
    pub backbone: Backbone<T>,
    pub bias: SurfaceFeatures<T>,
}

/// Runs the surface branch once on `s_warped` and keeps its outputs as biases.
pub fn trim_surface_branch<T: Real>(net: &PhotometricNet<T>, s_warped: &Tensor<T>) -> Result<TrimmedPhotometricNet<T>> {
    check_sizes(s_warped, s_warped)?;
    let (bias, _) = net.surface.forward(s_warped);
    Ok(TrimmedPhotometricNet {
        backbone: net.backbone.clone(),
        bias,
    })
}

impl<T: Real> TrimmedPhotometricNet<T> {
    pub fn dims(&self) -> (usize, usize) {
        (self.bias.f1.h() * 2, self.bias.f1.w() * 2)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_divisible(x)?;
        if (x.h(), x.w()) != self.dims() || x.c() != 3 {
            return Err(Error::ShapeMismatch(format!("input {:?}, trimmed for {:?}", x.shape(), self.dims())));
        }
        Ok(self.backbone.forward(x, &self.bias, false).0)
    }

    pub fn buffers(&self) -> BufferCount {
        let (h, w) = self.dims();
        BufferCount {
            parameters: self.backbone.num_params() + self.bias.len(),
            activations: self.backbone.activation_elements(h, w),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.set_meta("photo.width", self.backbone.width().to_string());
        ck.set_meta("photo.trimmed", "true");
        ck.insert_params("photo", &self.backbone);
        ck.insert_tensor("photo.bias.f1", &self.bias.f1);
        ck.insert_tensor("photo.bias.f2", &self.bias.f2);
        ck.insert_tensor("photo.bias.f3", &self.bias.f3);
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("photo.trimmed") != Some("true") {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "photometric network is not trimmed".into(),
            });
        }
        let mut backbone = Backbone::new(meta_usize(ck, "photo.width")?, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_params("photo", &mut backbone)?;
        Ok(Self {
            backbone,
            bias: SurfaceFeatures {
                f1: ck.tensor("photo.bias.f1")?,
                f2: ck.tensor("photo.bias.f2")?,
                f3: ck.tensor("photo.bias.f3")?,
            },
        })
    }
}
