//! Seeded fixture builders shared by the net test modules.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::detect2d::{Keypoint2D, Patch};
use crate::detect3d::{Keypoint3D, LocalVolume};
use crate::geometry::{Pixel2, Point3, Vec3};

/// Zero-mean random patch with the given side.
pub(crate) fn test_patch(side: usize, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels: Vec<f64> = (0..side * side).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
    for p in &mut pixels {
        *p -= mean;
    }
    Patch {
        pixels,
        source_keypoint: Keypoint2D { position: Pixel2::new(0.0, 0.0), scale: 1.0, response: 1.0 },
    }
}

/// Random unit-ball volume with n points, keypoint at the origin.
pub(crate) fn test_volume(n: usize, seed: u64) -> LocalVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm() <= 1.0 {
            points.push(p);
        }
    }
    LocalVolume {
        points,
        source_keypoint: Keypoint3D {
            position: Point3::new(0.0, 0.0, 0.0),
            saliency: 1.0,
            neighbor_count: n,
        },
        original_count: n,
    }
}
