//! Central finite-difference verification of the analytic triplet-loss
//! gradients, on deliberately tiny layer widths so a probe costs two full
//! forward passes of a small net.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::image_branch::{embed_image, ImageArch, ImageEmbedderParams};
use super::loss::{self, triplet_loss};
use super::point_branch::{embed_points, PointArch, PointEmbedderParams};
use super::train::Triplet;
use crate::detect2d::{Keypoint2D, Patch};
use crate::detect3d::{Keypoint3D, LocalVolume};
use crate::geometry::{Pixel2, Point3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub image_arch: ImageArch,
    pub point_arch: PointArch,
    /// Points per random volume.
    pub volume_points: usize,
    pub alpha: f64,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    /// Probed entries per tensor: the largest-gradient entry plus random
    /// picks.
    pub probes_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            image_arch: ImageArch { conv_channels: [3, 4, 5], head_hidden: 6, d: 6, input_side: 32 },
            point_arch: PointArch { mlp_channels: [4, 6, 8], head_hidden: 6, d: 6 },
            volume_points: 40,
            alpha: 5.0,
            step: 1e-5,
            seed: 7,
            probes_per_tensor: 4,
        }
    }
}

/// Maximum relative error between analytic and numeric gradients over
/// `trials` random triplets. Healthy backward passes land below 1e-4.
pub fn gradient_check(config: &GradCheckConfig, trials: usize) -> f64 {
    run(config, trials, false)
}

/// Same check with one analytic gradient entry (the globally largest)
/// deliberately doubled; verifies the checker itself would catch a broken
/// backward pass.
pub fn gradient_check_corrupted(config: &GradCheckConfig, trials: usize) -> f64 {
    run(config, trials, true)
}

fn random_patch(side: usize, rng: &mut ChaCha8Rng) -> Patch {
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

fn random_volume(n: usize, rng: &mut ChaCha8Rng) -> LocalVolume {
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
        source_keypoint: Keypoint3D { position: Point3::new(0.0, 0.0, 0.0), saliency: 1.0, neighbor_count: n },
        original_count: n,
    }
}

fn forward_loss(pi: &ImageEmbedderParams, pm: &PointEmbedderParams, t: &Triplet, alpha: f64) -> f64 {
    let a = embed_image(pi, &t.anchor).expect("finite forward");
    let p = embed_points(pm, &t.positive).expect("finite forward");
    let n = embed_points(pm, &t.negative).expect("finite forward");
    triplet_loss(&a, &p, &n, alpha)
}

/// Central difference at the given step, or None if halving the step
/// moves the estimate: that means the window straddles a ReLU or max-pool
/// kink, where a finite difference does not measure the subgradient the
/// backward pass is defined to return.
fn numeric_image(
    pi: &ImageEmbedderParams,
    pm: &PointEmbedderParams,
    t: &Triplet,
    alpha: f64,
    tensor: usize,
    entry: usize,
    step: f64,
) -> Option<f64> {
    let eval = |h: f64| {
        let mut work = pi.clone();
        work.tensors_mut()[tensor].1.data_mut()[entry] += h;
        let plus = forward_loss(&work, pm, t, alpha);
        work.tensors_mut()[tensor].1.data_mut()[entry] -= 2.0 * h;
        let minus = forward_loss(&work, pm, t, alpha);
        (plus - minus) / (2.0 * h)
    };
    accept_smooth(eval(step), eval(step / 2.0))
}

fn numeric_point(
    pi: &ImageEmbedderParams,
    pm: &PointEmbedderParams,
    t: &Triplet,
    alpha: f64,
    tensor: usize,
    entry: usize,
    step: f64,
) -> Option<f64> {
    let eval = |h: f64| {
        let mut work = pm.clone();
        work.tensors_mut()[tensor].1.data_mut()[entry] += h;
        let plus = forward_loss(pi, &work, t, alpha);
        work.tensors_mut()[tensor].1.data_mut()[entry] -= 2.0 * h;
        let minus = forward_loss(pi, &work, t, alpha);
        (plus - minus) / (2.0 * h)
    };
    accept_smooth(eval(step), eval(step / 2.0))
}

fn accept_smooth(full: f64, half: f64) -> Option<f64> {
    if relative_error(full, half) <= 1e-4 {
        Some(half)
    } else {
        None
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Probe entries for one gradient tensor: its largest-magnitude entry,
/// then seeded random picks.
fn probe_entries(grad: &[f64], probes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut entries = Vec::with_capacity(probes);
    let argmax = grad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    entries.push(argmax);
    while entries.len() < probes.min(grad.len()) {
        let i = rng.random_range(0..grad.len());
        if !entries.contains(&i) {
            entries.push(i);
        }
    }
    entries
}

fn run(config: &GradCheckConfig, trials: usize, corrupt: bool) -> f64 {
    assert_eq!(
        config.image_arch.d, config.point_arch.d,
        "branch descriptor dimensions must agree"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut pi = ImageEmbedderParams::init(config.image_arch, rng.random()).expect("valid arch");
        let mut pm = PointEmbedderParams::init(config.point_arch, rng.random()).expect("valid arch");
        // Zero-initialized biases park whole layers exactly on the ReLU
        // kink (a fully clamped row makes the next pre-activation equal
        // its bias); jitter every entry so the check runs at a generic
        // point.
        for (_, tensor) in pi.tensors_mut().into_iter().chain(pm.tensors_mut()) {
            for v in tensor.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let triplet = Triplet {
            anchor: random_patch(config.image_arch.input_side, &mut rng),
            positive: random_volume(config.volume_points, &mut rng),
            negative: random_volume(config.volume_points, &mut rng),
        };
        let (_, mut grads) = loss::backward(&pi, &pm, std::slice::from_ref(&triplet), config.alpha)
            .expect("finite gradients");

        if corrupt {
            // Double the globally largest gradient entry.
            let mut best: Option<(bool, usize, usize, f64)> = None;
            for (is_image, params) in [(true, grads.image.tensors()), (false, grads.point.tensors())] {
                for (k, (_, tensor)) in params.iter().enumerate() {
                    for (j, &g) in tensor.data().iter().enumerate() {
                        if best.is_none() || g.abs() > best.unwrap().3 {
                            best = Some((is_image, k, j, g.abs()));
                        }
                    }
                }
            }
            if let Some((is_image, k, j, _)) = best {
                let mut tensors = if is_image { grads.image.tensors_mut() } else { grads.point.tensors_mut() };
                tensors[k].1.data_mut()[j] *= 2.0;
            }
        }

        for (k, (_, grad)) in grads.image.tensors().iter().enumerate() {
            for &j in &probe_entries(grad.data(), config.probes_per_tensor, &mut rng) {
                if let Some(numeric) = numeric_image(&pi, &pm, &triplet, config.alpha, k, j, config.step) {
                    worst = worst.max(relative_error(grad.data()[j], numeric));
                }
            }
        }
        for (k, (_, grad)) in grads.point.tensors().iter().enumerate() {
            for &j in &probe_entries(grad.data(), config.probes_per_tensor, &mut rng) {
                if let Some(numeric) = numeric_point(&pi, &pm, &triplet, config.alpha, k, j, config.step) {
                    worst = worst.max(relative_error(grad.data()[j], numeric));
                }
            }
        }
    }
    worst
}
