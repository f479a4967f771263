//! Evaluation protocols shared by the commands and the acceptance suite.

use std::time::{Duration, Instant};

use anyhow::Result;
use procam_core::simulator::{Dataset, SimSetup};
use procam_core::training::{predict_batched, score, CompenModel, SimplifiedModel, Validation};
use procam_core::{Image, Rect, Tensor};

/// Projector inputs predicted from validation captures, scored against the
/// projector images that produced them.
pub fn paper_protocol(predict: impl FnMut(&Tensor<f32>) -> procam_core::Result<Tensor<f32>>, data: &Dataset) -> Result<(Vec<Image>, Validation)> {
    let cam = Image::stack::<f32>(&data.val_cam.iter().collect::<Vec<_>>());
    let preds = predict_batched(&cam, 16, predict)?;
    let v = score(&preds, &data.val_proj)?;
    Ok((preds, v))
}

pub fn full_model_protocol(model: &CompenModel, data: &Dataset) -> Result<(Vec<Image>, Validation)> {
    paper_protocol(|b| model.predict(b), data)
}

pub fn simplified_protocol(model: &SimplifiedModel, data: &Dataset) -> Result<(Vec<Image>, Validation)> {
    paper_protocol(|b| model.predict(b), data)
}

/// One desired image pushed through the deployed pipeline.
#[derive(Clone, Debug)]
pub struct ClosedLoopImage {
    /// `z' = A z` in the camera frame.
    pub desired: Image,
    /// `z*`, the projector input.
    pub compensation: Image,
    /// Camera capture of `z*`.
    pub compensated: Image,
    /// Camera capture of `z` projected as is.
    pub uncompensated: Image,
    pub rect: Rect,
}

pub fn closed_loop_image(model: &SimplifiedModel, setup: &SimSetup, z: &Image) -> Result<ClosedLoopImage> {
    let desired = model.geometry.apply_fit(z)?;
    let compensation = model.compensate(&desired)?;
    Ok(ClosedLoopImage {
        compensated: setup.capture(&compensation)?,
        uncompensated: setup.capture(z)?,
        desired,
        compensation,
        rect: model.geometry.optimal_rect,
    })
}

/// Captures of compensated and plain projections scored against `z'` inside the
/// optimal displayable rectangle.
#[derive(Clone, Copy, Debug)]
pub struct ClosedLoop {
    pub compensated: Validation,
    pub uncompensated: Validation,
}

pub fn closed_loop(model: &SimplifiedModel, setup: &SimSetup, desired: &[Image]) -> Result<ClosedLoop> {
    let (mut comp, mut unc, mut want) = (Vec::new(), Vec::new(), Vec::new());
    for z in desired {
        let r = closed_loop_image(model, setup, z)?;
        comp.push(r.compensated.crop(r.rect));
        unc.push(r.uncompensated.crop(r.rect));
        want.push(r.desired.crop(r.rect));
    }
    Ok(ClosedLoop {
        compensated: score(&comp, &want)?,
        uncompensated: score(&unc, &want)?,
    })
}

/// Items per second of `f`, which processes `items` per call; repeats for at least `min`.
pub fn throughput(items: usize, min: Duration, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let start = Instant::now();
    let mut calls = 0usize;
    while calls < 2 || start.elapsed() < min {
        f()?;
        calls += 1;
    }
    Ok((calls * items) as f64 / start.elapsed().as_secs_f64())
}

/// Images side by side on a white background, top-aligned.
pub fn panel(images: &[&Image]) -> Image {
    const GAP: usize = 2;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum::<usize>() + GAP * images.len().saturating_sub(1);
    let mut out = Image::gray(h, w.max(1), 1.0);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set_pixel(y, x0 + x, img.pixel(y, x));
            }
        }
        x0 += img.width() + GAP;
    }
    out
}
