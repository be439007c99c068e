//! Fixtures shared by the benchmarks.

use restora_core::image;
use restora_core::model::{Model, ModelConfig};
use restora_core::scenes;
use restora_core::tensor::Tensor;

/// A freshly initialized model with one task of each kind registered.
pub fn model() -> Model {
    let mut m = Model::new(ModelConfig::default(), 0).expect("default config is valid");
    for (id, kind) in [("pir", "pir"), ("cls", "classification"), ("seg", "segmentation")] {
        m.add_task(id, kind.parse().expect("known kind")).expect("fresh task id");
    }
    m
}

pub fn batch(n: usize, size: usize) -> Tensor {
    let imgs: Vec<Tensor> = scenes::generate_many(n, size, 7).into_iter().map(|s| s.image).collect();
    image::stack(&imgs)
}
