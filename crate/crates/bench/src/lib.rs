//! Shared fixtures for the benchmarks.

use usg_core::phantom::ImageSize;
use usg_core::{build_dataset, Dataset, DemoPlan, ModelConfig, PhantomConfig, QualityModel, Variant};

/// A small balanced dataset and an untrained model at `side`×`side`.
///
/// Inference cost does not depend on the weights, so the model is left untrained.
pub fn fixture(side: usize, samples: usize) -> (Dataset, QualityModel) {
    let phantom = PhantomConfig::with_image(side, side, 1);
    let data = build_dataset(&DemoPlan::standard(samples, 20), &phantom, 0, Some(0.378)).expect("fixture dataset");
    let config = ModelConfig::desk(Variant::Net4).with_image(ImageSize {
        height: side,
        width: side,
        channels: 1,
    });
    let model = QualityModel::build(config, 0).expect("fixture model");
    (data, model)
}
