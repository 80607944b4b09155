//! Fixtures shared by the benchmarks.

use defkt_core::data::{prepare_clients, synth_dataset, synth_test_set};
use defkt_core::nn::init_params;
use defkt_core::{
    Batch, ExperimentSetup, HyperParams, ModelSpec, PartitionConfig, PartitionMode, SynthConfig,
};
use ndarray::Array2;

/// A deterministic batch of `rows` MNIST-shaped inputs in `[0, 1]`.
pub fn mnist_like_batch(rows: usize) -> Batch {
    let inputs = Array2::from_shape_fn((rows, 784), |(i, j)| {
        ((i * 31 + j * 17) % 256) as f64 / 255.0
    });
    Batch::new(inputs, (0..rows).map(|i| i % 10).collect()).expect("labels match rows")
}

/// Ten non-IID clients on 784-dimensional blobs with the MNIST MLP.
pub fn mlp_setup(per_class: usize, rounds: usize) -> ExperimentSetup {
    let cfg = SynthConfig {
        classes: 10,
        per_class,
        dims: 784,
        sigma: 1.0,
        seed: 1,
    };
    let spec = ModelSpec::mnist_mlp();
    let partition = PartitionConfig {
        clients: 10,
        mode: PartitionMode::NonIid {
            classes_per_client: 2,
        },
        seed: 1,
    };
    ExperimentSetup {
        initial: init_params(&spec, 1),
        clients: prepare_clients(&synth_dataset(&cfg).expect("valid config"), &partition, 0.8)
            .expect("enough samples"),
        test: synth_test_set(&cfg, 10).expect("valid config"),
        spec,
        hyper: HyperParams {
            rounds,
            ..HyperParams::default()
        },
        eval_every: rounds.max(1),
    }
}
