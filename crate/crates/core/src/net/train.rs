//! End-to-end training: triplet assembly with per-epoch resampled random
//! negatives, shuffled mini-batches, Adam on both branches.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::image_branch::{ImageArch, ImageEmbedderParams};
use super::loss;
use super::point_branch::{PointArch, PointEmbedderParams};
use super::{NetError, TrainConfig};
use crate::detect2d::Patch;
use crate::detect3d::LocalVolume;

/// One training example: an anchor patch, the volume of the same keypoint,
/// and a volume from a different keypoint.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Patch,
    pub positive: LocalVolume,
    pub negative: LocalVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean batch loss per epoch; length equals the configured epochs.
    pub loss_history: Vec<f64>,
    /// Triplets consumed over the whole run.
    pub triplets: usize,
}

/// Keypoint identity for negative sampling: exact source position.
fn keypoint_key(vol: &LocalVolume) -> [u64; 3] {
    let p = vol.source_keypoint.position;
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

/// Trains both branches on (patch, volume) pairs of matching keypoints.
/// Negatives are drawn per epoch, uniformly among volumes whose source
/// keypoint differs from the anchor's. Deterministic given the seed.
pub fn train(
    dataset: &[(Patch, LocalVolume)],
    config: &TrainConfig,
) -> Result<(ImageEmbedderParams, PointEmbedderParams, TrainStats), NetError> {
    config.validate().map_err(NetError::Config)?;
    train_with(
        dataset,
        config,
        ImageArch::with_descriptor_dim(config.d),
        PointArch::with_descriptor_dim(config.d),
    )
}

/// Training core with explicit architectures. The descriptor dimensions of
/// both architectures must agree; `config.d` is ignored in favor of them.
pub fn train_with(
    dataset: &[(Patch, LocalVolume)],
    config: &TrainConfig,
    image_arch: ImageArch,
    point_arch: PointArch,
) -> Result<(ImageEmbedderParams, PointEmbedderParams, TrainStats), NetError> {
    let n = dataset.len();
    let keys: Vec<[u64; 3]> = dataset.iter().map(|(_, vol)| keypoint_key(vol)).collect();
    let distinct = {
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.len()
    };
    if n < 2 || distinct < 2 {
        return Err(NetError::DatasetTooSmall { pairs: n, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let image_seed: u64 = rng.random();
    let point_seed: u64 = rng.random();
    let mut params_i = ImageEmbedderParams::init(image_arch, image_seed)?;
    let mut params_m = PointEmbedderParams::init(point_arch, point_seed)?;
    let mut adam_i = AdamState::new(&params_i.tensors());
    let mut adam_m = AdamState::new(&params_m.tensors());

    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let negatives: Vec<usize> = (0..n)
            .map(|i| loop {
                let j = rng.random_range(0..n);
                if keys[j] != keys[i] {
                    break j;
                }
            })
            .collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Triplet> = chunk
                .iter()
                .map(|&i| Triplet {
                    anchor: dataset[i].0.clone(),
                    positive: dataset[i].1.clone(),
                    negative: dataset[negatives[i]].1.clone(),
                })
                .collect();
            let (batch_loss, grads) = loss::backward(&params_i, &params_m, &batch, config.alpha)?;
            adam_step(&mut params_i.tensors_mut(), &grads.image.tensors(), &mut adam_i, config)?;
            adam_step(&mut params_m.tensors_mut(), &grads.point.tensors(), &mut adam_m, config)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    let triplets = n * config.epochs;
    Ok((params_i, params_m, TrainStats { loss_history: history, triplets }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect2d::Keypoint2D;
    use crate::detect3d::Keypoint3D;
    use crate::geometry::{Pixel2, Point3, Vec3};

    /// Pairs whose patch and volume both encode the keypoint id: the patch
    /// is a sinusoid with id-dependent frequency, the volume clusters
    /// around an id-dependent direction. Learnable at tiny widths.
    fn toy_dataset(pairs: usize, classes: usize, side: usize, seed: u64) -> Vec<(Patch, LocalVolume)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pairs)
            .map(|i| {
                let class = i % classes;
                let freq = (class + 1) as f64;
                let phase = rng.random_range(0.0..0.3);
                let pixels: Vec<f64> = (0..side * side)
                    .map(|p| {
                        let x = (p % side) as f64 / side as f64;
                        (std::f64::consts::TAU * freq * (x + phase)).sin() * 0.4
                    })
                    .collect();
                let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
                let pixels = pixels.into_iter().map(|v| v - mean).collect();
                let patch = Patch {
                    pixels,
                    source_keypoint: Keypoint2D {
                        position: Pixel2::new(class as f64, 0.0),
                        scale: 1.0,
                        response: 1.0,
                    },
                };
                let angle = std::f64::consts::TAU * class as f64 / classes as f64;
                let center = Vec3::new(0.6 * angle.cos(), 0.6 * angle.sin(), 0.0);
                let points: Vec<Vec3> = (0..32)
                    .map(|_| {
                        center
                            + Vec3::new(
                                rng.random_range(-0.1..0.1),
                                rng.random_range(-0.1..0.1),
                                rng.random_range(-0.1..0.1),
                            )
                    })
                    .collect();
                let volume = LocalVolume {
                    points,
                    source_keypoint: Keypoint3D {
                        position: Point3::new(class as f64, 0.0, 0.0),
                        saliency: 1.0,
                        neighbor_count: 32,
                    },
                    original_count: 32,
                };
                (patch, volume)
            })
            .collect()
    }

    fn tiny_archs(d: usize) -> (ImageArch, PointArch) {
        (
            ImageArch { conv_channels: [4, 6, 8], head_hidden: 16, d, input_side: 32 },
            PointArch { mlp_channels: [8, 12, 16], head_hidden: 16, d },
        )
    }

    #[test]
    fn single_keypoint_dataset_is_rejected() {
        let mut data = toy_dataset(6, 3, 32, 1);
        for (_, vol) in &mut data {
            vol.source_keypoint.position = Point3::new(0.0, 0.0, 0.0);
        }
        let err = train(&data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, NetError::DatasetTooSmall { pairs: 6, distinct: 1 }));
    }

    #[test]
    fn untrained_loss_starts_near_ln_two() {
        let data = toy_dataset(12, 4, 32, 2);
        let config = TrainConfig { epochs: 1, batch_size: 4, seed: 3, ..TrainConfig::default() };
        let (archs_i, archs_m) = tiny_archs(16);
        let (_, _, stats) = train_with(&data, &config, archs_i, archs_m).unwrap();
        assert_eq!(stats.loss_history.len(), 1);
        assert!((stats.loss_history[0] - std::f64::consts::LN_2).abs() < 0.15);
    }

    #[test]
    fn training_on_separable_toy_data_drives_loss_down() {
        let data = toy_dataset(30, 5, 32, 4);
        let config = TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (archs_i, archs_m) = tiny_archs(16);
        let (_, _, stats) = train_with(&data, &config, archs_i, archs_m).unwrap();
        assert_eq!(stats.loss_history.len(), 40);
        assert!(stats.loss_history.iter().all(|l| l.is_finite()));
        let first = stats.loss_history[0];
        let last = *stats.loss_history.last().unwrap();
        assert!(last < 0.4, "final loss {last} (started at {first})");
    }

    #[test]
    fn identical_seeds_give_identical_history() {
        let data = toy_dataset(10, 5, 32, 6);
        let config = TrainConfig { epochs: 3, batch_size: 4, seed: 9, ..TrainConfig::default() };
        let (archs_i, archs_m) = tiny_archs(16);
        let (pi_a, pm_a, stats_a) = train_with(&data, &config, archs_i, archs_m).unwrap();
        let (pi_b, pm_b, stats_b) = train_with(&data, &config, archs_i, archs_m).unwrap();
        assert_eq!(stats_a.loss_history, stats_b.loss_history);
        assert_eq!(pi_a, pi_b);
        assert_eq!(pm_a, pm_b);
    }
}
