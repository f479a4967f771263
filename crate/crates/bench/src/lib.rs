//! Shared fixtures for the benchmarks.

use procam_core::photometric::PhotometricNet;
use procam_core::simulator::{make_dataset, Dataset, SimParams, SimSetup, Sources};
use procam_core::training::{init_model, CompenModel, ModelConfig};
use procam_core::{Image, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A simulated setup at `size`² with a few captured pairs.
pub fn dataset(size: usize, n: usize) -> (SimSetup, Dataset) {
    let setup = SimSetup::new(1, SimParams::default().at_size(size)).expect("setup");
    let data = make_dataset(&setup, &Sources::Procedural { seed: 7 }, n, n).expect("dataset");
    (setup, data)
}

/// An initialized (untrained) model; inference cost does not depend on training.
pub fn model(data: &Dataset, cfg: ModelConfig) -> CompenModel {
    let photo = PhotometricNet::new(cfg.photo_width, &mut ChaCha8Rng::seed_from_u64(3));
    init_model(data, &cfg, photo, 3).expect("model")
}

pub fn batch(images: &[Image]) -> Tensor<f32> {
    Image::stack(&images.iter().collect::<Vec<_>>())
}
