//! 3D keypoint detection on point-cloud maps: ground-plane removal,
//! ISS-style eigenvalue saliency, non-max suppression and local volume
//! extraction for the point-cloud descriptor branch.

use nalgebra as na;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Point3, Vec3};
use crate::kdtree::KdTree;
use crate::ply::PointCloud;

/// RANSAC plane fit settings for ground removal.
pub const PLANE_INLIER_DIST: f64 = 0.2;
pub const PLANE_ITERATIONS: usize = 200;
/// The dominant plane is removed only when it holds at least this fraction
/// of the cloud (keeps building walls intact) ...
pub const PLANE_MIN_INLIER_FRACTION: f64 = 0.30;
/// ... and its normal is within this angle of the up axis.
pub const PLANE_MAX_TILT_DEG: f64 = 15.0;

const MIN_CLOUD_FOR_PLANE: usize = 50;

/// Candidates whose smallest eigenvalue is below this floor (m²) are
/// dropped. Zero-curvature surfaces otherwise emit λ3 = 0 keypoints at the
/// sample boundary, where in-plane scatter turns anisotropic and both ratio
/// tests pass vacuously.
pub const SALIENCY_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum Detect3dError {
    #[error("cloud has {got} points, ground removal needs at least {need}")]
    TooFewPoints { got: usize, need: usize },
    #[error("ground removal left no points")]
    TooFewPointsRemaining,
}

/// A detected 3D interest point. `saliency` is the smallest covariance
/// eigenvalue (m²) of its neighborhood; `neighbor_count` counts cloud
/// points within the salient radius, the point itself included.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint3D {
    pub position: Point3,
    pub saliency: f64,
    pub neighbor_count: usize,
}

/// Fixed-size, keypoint-centered, unit-sphere-scaled neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolume {
    /// Exactly `pad_count` vectors with norm ≤ 1.
    pub points: Vec<Vec3>,
    pub source_keypoint: Keypoint3D,
    /// Neighbor count before padding or subsampling.
    pub original_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IssParams {
    pub salient_radius: f64,
    pub nms_radius: f64,
    pub gamma21: f64,
    pub gamma32: f64,
    pub min_neighbors: usize,
}

impl Default for IssParams {
    fn default() -> Self {
        Self {
            salient_radius: 1.0,
            nms_radius: 0.5,
            gamma21: 0.9,
            gamma32: 0.9,
            min_neighbors: 10,
        }
    }
}

impl IssParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.salient_radius > 0.0 && self.nms_radius > 0.0) {
            return Err("iss radii must be positive".into());
        }
        for (name, g) in [("gamma21", self.gamma21), ("gamma32", self.gamma32)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(format!("{name} must lie in (0,1), got {g}"));
            }
        }
        Ok(())
    }
}

/// Fits the dominant plane by RANSAC and removes its inliers when the plane
/// is large (≥ 30% of the cloud) and near-horizontal (normal within 15° of
/// `up_axis`); otherwise the cloud is returned unchanged.
pub fn remove_ground_plane(
    cloud: &PointCloud,
    up_axis: &Vec3,
    seed: u64,
) -> Result<PointCloud, Detect3dError> {
    let n = cloud.len();
    if n < MIN_CLOUD_FOR_PLANE {
        return Err(Detect3dError::TooFewPoints { got: n, need: MIN_CLOUD_FOR_PLANE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = &cloud.points;

    let mut best: Option<(usize, Point3, Vec3)> = None;
    for _ in 0..PLANE_ITERATIONS {
        let a = pts[rng.random_range(0..n)];
        let b = pts[rng.random_range(0..n)];
        let c = pts[rng.random_range(0..n)];
        let normal = (b - a).cross(&(c - a));
        if normal.norm() < 1e-12 {
            continue;
        }
        let normal = normal.normalize();
        let inliers = pts.iter().filter(|p| (normal.dot(&(*p - a))).abs() <= PLANE_INLIER_DIST).count();
        if best.as_ref().is_none_or(|(count, _, _)| inliers > *count) {
            best = Some((inliers, a, normal));
        }
    }

    let Some((count, anchor, normal)) = best else {
        return Ok(cloud.clone());
    };
    let up = up_axis.normalize();
    let tilt_deg = normal.dot(&up).abs().clamp(0.0, 1.0).acos().to_degrees();
    if (count as f64) < PLANE_MIN_INLIER_FRACTION * n as f64 || tilt_deg > PLANE_MAX_TILT_DEG {
        return Ok(cloud.clone());
    }

    let keep: Vec<bool> = pts
        .iter()
        .map(|p| (normal.dot(&(p - anchor))).abs() > PLANE_INLIER_DIST)
        .collect();
    let points: Vec<Point3> = pts.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    if points.is_empty() {
        return Err(Detect3dError::TooFewPointsRemaining);
    }
    let intensity = cloud.intensity.as_ref().map(|vals| {
        vals.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect()
    });
    Ok(PointCloud { points, intensity, frame: cloud.frame.clone() })
}

/// Covariance eigenvalues of a neighborhood, descending (λ1 ≥ λ2 ≥ λ3).
fn covariance_eigenvalues(points: &[Point3], neighbors: &[usize]) -> [f64; 3] {
    let n = neighbors.len() as f64;
    let mut mean = Vec3::zeros();
    for &j in neighbors {
        mean += points[j].coords;
    }
    mean /= n;
    let mut cov = Mat3::zeros();
    for &j in neighbors {
        let d = points[j].coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let mut ev: Vec<f64> = na::SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [ev[0], ev[1], ev[2]]
}

fn iss_candidate(points: &[Point3], neighbors: &[usize], params: &IssParams) -> Option<f64> {
    if neighbors.len() < params.min_neighbors {
        return None;
    }
    let [l1, l2, l3] = covariance_eigenvalues(points, neighbors);
    // Ratio tests in product form so zero eigenvalues reject cleanly.
    if l3 > SALIENCY_FLOOR && l2 < params.gamma21 * l1 && l3 < params.gamma32 * l2 {
        Some(l3)
    } else {
        None
    }
}

/// ISS keypoints: points whose neighborhood covariance has well-separated
/// eigenvalues, non-max suppressed on λ3, sorted by descending saliency.
pub fn detect_iss(cloud: &PointCloud, params: &IssParams) -> Vec<Keypoint3D> {
    let pts = &cloud.points;
    if pts.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::from_points(pts).expect("non-empty cloud");
    let mut candidates = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let neighbors = tree
            .within_radius(&[p.x, p.y, p.z], params.salient_radius)
            .expect("dimension fixed at 3");
        if let Some(saliency) = iss_candidate(pts, &neighbors, params) {
            candidates.push(Keypoint3D {
                position: pts[i],
                saliency,
                neighbor_count: neighbors.len(),
            });
        }
    }
    nms_keypoints_3d(&candidates, params.nms_radius)
}

/// Greedy non-max suppression in descending saliency order (ties by input
/// index): a keypoint survives iff no already-kept keypoint lies within
/// `radius`. Output order is the greedy order, i.e. descending saliency.
pub fn nms_keypoints_3d(kps: &[Keypoint3D], radius: f64) -> Vec<Keypoint3D> {
    let mut order: Vec<usize> = (0..kps.len()).collect();
    order.sort_by(|&a, &b| kps[b].saliency.total_cmp(&kps[a].saliency).then(a.cmp(&b)));
    let r2 = radius * radius;
    let mut kept: Vec<Keypoint3D> = Vec::new();
    for idx in order {
        let kp = &kps[idx];
        let suppressed = kept
            .iter()
            .any(|k| (k.position - kp.position).norm_squared() <= r2);
        if !suppressed {
            kept.push(kp.clone());
        }
    }
    kept
}

/// Rejection diagnostics for `extract_volume`.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("volume rejected: only {neighbor_count} neighbors")]
pub struct VolumeRejected {
    pub neighbor_count: usize,
}

/// Gathers the neighborhood of `kp`, centers it on the keypoint, scales it
/// into the unit sphere by `1/radius`, and pads (resampling with
/// replacement) or uniformly subsamples (without replacement) to exactly
/// `pad_count` points. Deterministic given `seed`.
pub fn extract_volume(
    cloud: &PointCloud,
    kp: &Keypoint3D,
    radius: f64,
    min_points: usize,
    pad_count: usize,
    seed: u64,
) -> Result<LocalVolume, VolumeRejected> {
    let tree = KdTree::from_points(&cloud.points).expect("non-empty cloud");
    extract_volume_indexed(&cloud.points, &tree, kp, radius, min_points, pad_count, seed)
}

/// `extract_volume` against a prebuilt index, for callers extracting many
/// volumes from the same cloud.
pub fn extract_volume_indexed(
    points: &[Point3],
    tree: &KdTree,
    kp: &Keypoint3D,
    radius: f64,
    min_points: usize,
    pad_count: usize,
    seed: u64,
) -> Result<LocalVolume, VolumeRejected> {
    let q = kp.position;
    let neighbors = tree
        .within_radius(&[q.x, q.y, q.z], radius)
        .expect("dimension fixed at 3");
    let count = neighbors.len();
    if count < min_points {
        return Err(VolumeRejected { neighbor_count: count });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if count > pad_count {
        // Partial Fisher-Yates: pad_count distinct draws.
        let mut idx: Vec<usize> = (0..count).collect();
        for i in 0..pad_count {
            let j = rng.random_range(i..count);
            idx.swap(i, j);
        }
        let mut head = idx[..pad_count].to_vec();
        head.sort_unstable();
        head
    } else {
        (0..count).collect()
    };
    while picked.len() < pad_count {
        picked.push(rng.random_range(0..count));
    }

    let inv_r = 1.0 / radius;
    let out: Vec<Vec3> = picked
        .iter()
        .map(|&i| (points[neighbors[i]] - q) * inv_r)
        .collect();
    Ok(LocalVolume {
        points: out,
        source_keypoint: kp.clone(),
        original_count: count,
    })
}
