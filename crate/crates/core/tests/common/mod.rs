#![allow(dead_code)]

use std::path::Path;

use flowparts::datagen::{write_dataset, GenConfig, SplitSizes};
use flowparts::model::ModelConfig;
use flowparts::training::{Precision, TrainConfig};

pub fn tiny_gen(size: usize, train: usize, seed: u64) -> GenConfig {
    GenConfig {
        height: size,
        width: size,
        splits: SplitSizes {
            train,
            val: 4,
            test: 4,
        },
        scale_min: 0.25,
        scale_max: 0.45,
        max_translation_px: 2,
        seed,
        ..GenConfig::default()
    }
}

pub fn tiny_model(size: usize) -> ModelConfig {
    ModelConfig {
        num_capsules: 3,
        capsule_dim: 8,
        height: size,
        width: size,
        encoder_channels: vec![4, 8],
        encoder_hidden: 16,
        norm_groups: 2,
        decoder_layers: 2,
        decoder_width: 12,
        canonical_grid: 6,
        ..ModelConfig::default()
    }
}

pub fn tiny_train(data: &Path, size: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 1,
        batch_size: 4,
        micro_batch: 2,
        model: tiny_model(size),
        dataset_dir: Some(data.to_path_buf()),
        checkpoint_every: 0,
        log_every: 1,
        val_samples: 4,
        precision: Precision::F64,
        deterministic: true,
        ..TrainConfig::default()
    }
}

pub fn make_dataset(dir: &Path, size: usize, train: usize) {
    write_dataset(&tiny_gen(size, train, 7), dir).unwrap();
}
