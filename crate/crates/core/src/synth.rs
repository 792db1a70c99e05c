//! Synthetic corridor scenes with exact ground truth: a point-cloud map on a
//! flat ground plane, a camera trajectory walking the corridor, rendered
//! grayscale frames, cross-modal correspondence labeling, and a dataset
//! writer. Everything is deterministic in the config seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect2d::{
    extract_patch, nms_keypoints_2d, preprocess_patch, Keypoint2D, Patch, RawPatch, PATCH_SIZE,
};
use crate::detect3d::{extract_volume_indexed, nms_keypoints_3d, Keypoint3D, LocalVolume};
use crate::geometry::{look_at_pose, project, CameraIntrinsics, Pixel2, Point3, PoseSE3, Vec3};
use crate::image::GrayImage;
use crate::kdtree::KdTree;
use crate::net::Triplet;
use crate::ply::PointCloud;

/// Lateral sinusoidal sway of the corridor centerline, meters.
const SWAY_AMPLITUDE: f64 = 1.5;
const SWAY_WAVELENGTH: f64 = 80.0;
const CAMERA_HEIGHT: f64 = 1.6;
/// Ground strip sampled to this distance either side of the centerline.
const GROUND_HALF_WIDTH: f64 = 15.0;
/// Structures keep this far from the map ends.
const STRUCTURE_END_MARGIN: f64 = 10.0;
/// Structure base centers sit this far from the centerline, either side.
const LATERAL_MIN: f64 = 3.0;
const LATERAL_MAX: f64 = 8.0;
/// First camera sits here; the trajectory must stay inside the extent.
const TRAJECTORY_START_X: f64 = 8.0;
/// Submaps keep map points within their frame bounding box plus this margin.
const SUBMAP_POINT_MARGIN: f64 = 10.0;
/// Edge length of the value-noise cells that texture structure surfaces.
const TEXTURE_CELL: f64 = 0.3;
/// Bright marker caps cover box top corners and the top centers of cylinders
/// and spheres out to this distance, meters. They give geometric landmarks a
/// matching photometric blob, the way survey targets mark reference points on
/// real facades.
const CORNER_CAP_RADIUS: f64 = 0.18;
const CORNER_CAP_INTENSITY: f64 = 0.95;
/// Cap sampling density multiplier over the base surface density.
const CORNER_CAP_OVERSAMPLE: f64 = 20.0;
/// A splat survives the depth test within this slack of the pixel minimum.
const SPLAT_DEPTH_SLACK_ABS: f64 = 0.1;
const SPLAT_DEPTH_SLACK_REL: f64 = 0.02;
/// Pixels no splat reaches render as this
const BACKGROUND: f64 = 0.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
    #[error("dataset too small: {pairs} pairs over {distinct} distinct 3d keypoints, need 2 of each")]
    DatasetTooSmall { pairs: usize, distinct: usize },
    #[error("failed to encode dataset file: {0}")]
    Encode(String),
    #[error("failed to read dataset file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    /// Boxes, cylinders and spheres placed along the corridor.
    pub n_structures: usize,
    /// Map side length in meters; the corridor runs the x axis across it.
    pub extent: f64,
    /// Surface sampling density for ground and structure points.
    pub points_per_m2: f64,
    pub camera_count: usize,
    /// Spacing between consecutive camera positions, meters.
    pub camera_spacing: f64,
    pub intrinsics: CameraIntrinsics,
    /// Trajectory arc length per submap, meters.
    pub submap_length: f64,
    /// Amplitude of the value-noise texture added to point intensity, in [0, 1].
    pub texture_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_structures: 40,
            extent: 300.0,
            points_per_m2: 48.0,
            camera_count: 220,
            camera_spacing: 1.25,
            intrinsics: CameraIntrinsics {
                fx: 320.0,
                fy: 320.0,
                cx: 256.0,
                cy: 192.0,
                width: 512,
                height: 384,
            },
            submap_length: 60.0,
            texture_noise: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::ConfigInvalid(msg));
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad(format!("extent must be positive, got {}", self.extent));
        }
        if !(self.points_per_m2 > 0.0 && self.points_per_m2.is_finite()) {
            return bad(format!("points_per_m2 must be positive, got {}", self.points_per_m2));
        }
        if self.camera_count == 0 {
            return bad("camera_count must be at least 1".into());
        }
        if !(self.camera_spacing > 0.0 && self.camera_spacing.is_finite()) {
            return bad(format!("camera_spacing must be positive, got {}", self.camera_spacing));
        }
        if !(self.submap_length > 0.0 && self.submap_length.is_finite()) {
            return bad(format!("submap_length must be positive, got {}", self.submap_length));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return bad(format!("texture_noise must lie in [0, 1], got {}", self.texture_noise));
        }
        let end = TRAJECTORY_START_X + (self.camera_count - 1) as f64 * self.camera_spacing;
        if end > self.extent - TRAJECTORY_START_X {
            return bad(format!(
                "trajectory ends at x = {end:.1} m, outside the mapped extent {} m",
                self.extent
            ));
        }
        self.intrinsics.validate().map_err(SynthError::ConfigInvalid)
    }
}

/// A generated scene: the full map, the ground-truth camera trajectory, and
/// one rendered image per trajectory frame. Frame ids index `images`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub map: PointCloud,
    pub trajectory: Vec<(usize, PoseSE3)>,
    pub images: Vec<GrayImage>,
}

/// Corridor centerline: y as a function of x.
fn path_y(x: f64) -> f64 {
    SWAY_AMPLITUDE * (2.0 * std::f64::consts::PI * x / SWAY_WAVELENGTH).sin()
}

fn path_slope(x: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI / SWAY_WAVELENGTH;
    SWAY_AMPLITUDE * w * (w * x).cos()
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Value noise in [-0.5, 0.5], constant within a 0.3 m lattice cell and keyed
/// by the owning structure, so nearby surface points share an albedo blotch.
fn texture_field(structure_id: u64, p: &Point3) -> f64 {
    let cell = |v: f64| (v / TEXTURE_CELL).floor() as i64 as u64;
    let mut h = splitmix64(structure_id ^ 0xA076_1D64_78BD_642F);
    h = splitmix64(h ^ cell(p.x));
    h = splitmix64(h ^ cell(p.y));
    h = splitmix64(h ^ cell(p.z));
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn light_direction() -> Vec3 {
    Vec3::new(0.35, -0.45, 0.82).normalize()
}

/// Lambertian shade under the fixed light plus per-structure value noise.
fn point_intensity(structure_id: u64, p: &Point3, normal: &Vec3, texture_noise: f64) -> f64 {
    let shade = 0.5 + 0.3 * normal.dot(&light_direction());
    (shade + texture_noise * texture_field(structure_id, p)).clamp(0.02, 0.98)
}

enum Shape {
    Box { w: f64, d: f64, h: f64 },
    Cylinder { r: f64, h: f64 },
    Sphere { r: f64 },
}

impl Shape {
    fn surface_area(&self) -> f64 {
        match *self {
            // Five faces; the bottom sits on the ground and is never seen.
            Shape::Box { w, d, h } => 2.0 * h * (w + d) + w * d,
            Shape::Cylinder { r, h } => {
                2.0 * std::f64::consts::PI * r * h + std::f64::consts::PI * r * r
            }
            Shape::Sphere { r } => 4.0 * std::f64::consts::PI * r * r,
        }
    }

    /// One point uniform over the surface, in local coordinates with the base
    /// at z = 0 (sphere: center at z = r). Returns position and outward normal.
    fn sample_local(&self, rng: &mut ChaCha8Rng) -> (Point3, Vec3) {
        match *self {
            Shape::Box { w, d, h } => {
                let (hw, hd) = (w / 2.0, d / 2.0);
                let sides = [d * h, d * h, w * h, w * h, w * d];
                let total: f64 = sides.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                for (i, a) in sides.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.random::<f64>();
                let v = rng.random::<f64>();
                match face {
                    0 => (Point3::new(hw, (u - 0.5) * d, v * h), Vec3::x()),
                    1 => (Point3::new(-hw, (u - 0.5) * d, v * h), -Vec3::x()),
                    2 => (Point3::new((u - 0.5) * w, hd, v * h), Vec3::y()),
                    3 => (Point3::new((u - 0.5) * w, -hd, v * h), -Vec3::y()),
                    _ => (Point3::new((u - 0.5) * w, (v - 0.5) * d, h), Vec3::z()),
                }
            }
            Shape::Cylinder { r, h } => {
                let lateral = 2.0 * std::f64::consts::PI * r * h;
                let total = lateral + std::f64::consts::PI * r * r;
                if rng.random_range(0.0..total) < lateral {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let z = rng.random_range(0.0..h);
                    let n = Vec3::new(theta.cos(), theta.sin(), 0.0);
                    (Point3::new(r * n.x, r * n.y, z), n)
                } else {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let rr = r * rng.random::<f64>().sqrt();
                    (Point3::new(rr * theta.cos(), rr * theta.sin(), h), Vec3::z())
                }
            }
            Shape::Sphere { r } => {
                let z = rng.random_range(-1.0f64..1.0);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).max(0.0).sqrt();
                let n = Vec3::new(s * theta.cos(), s * theta.sin(), z);
                (Point3::new(r * n.x, r * n.y, r + r * n.z), n)
            }
        }
    }
}

/// Builds the map, trajectory and rendered frames for `config`. The same
/// config always produces bit-identical output.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut points = Vec::new();
    let mut intensity = Vec::new();

    for sid in 0..config.n_structures as u64 {
        // Mostly boxes: their marked corners anchor the cross-modal
        // correspondences, cylinders and spheres act as distractors.
        let shape = match rng.random_range(0..5u32) {
            0..=2 => Shape::Box {
                w: rng.random_range(2.5..4.5),
                d: rng.random_range(2.5..4.5),
                h: rng.random_range(2.0..5.0),
            },
            3 => Shape::Cylinder { r: rng.random_range(0.6..1.5), h: rng.random_range(2.0..5.0) },
            _ => Shape::Sphere { r: rng.random_range(0.8..2.0) },
        };
        let base_x = rng.random_range(STRUCTURE_END_MARGIN..config.extent - STRUCTURE_END_MARGIN);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let base_y = path_y(base_x) + side * rng.random_range(LATERAL_MIN..LATERAL_MAX);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let (cos_y, sin_y) = (yaw.cos(), yaw.sin());
        let to_world = |lp: Point3| {
            Point3::new(
                base_x + cos_y * lp.x - sin_y * lp.y,
                base_y + sin_y * lp.x + cos_y * lp.y,
                lp.z,
            )
        };
        let count = (shape.surface_area() * config.points_per_m2).round().max(1.0) as usize;
        for _ in 0..count {
            let (lp, ln) = shape.sample_local(&mut rng);
            let p = to_world(lp);
            let n = Vec3::new(cos_y * ln.x - sin_y * ln.y, sin_y * ln.x + cos_y * ln.y, ln.z);
            intensity.push(point_intensity(sid, &p, &n, config.texture_noise));
            points.push(p);
        }
        let r = CORNER_CAP_RADIUS;
        if let Shape::Box { w, d, h } = shape {
            let cap_area = 3.0 * r * r;
            let per_corner =
                (cap_area * config.points_per_m2 * CORNER_CAP_OVERSAMPLE).round().max(6.0) as usize;
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let corner = Point3::new(sx * w / 2.0, sy * d / 2.0, h);
                points.push(to_world(corner));
                intensity.push(CORNER_CAP_INTENSITY);
                for _ in 0..per_corner {
                    let a = rng.random_range(0.0..r);
                    let b = rng.random_range(0.0..r);
                    let lp = match rng.random_range(0..3u32) {
                        // Top face, then the two side faces meeting the corner.
                        0 => Point3::new(corner.x - sx * a, corner.y - sy * b, h),
                        1 => Point3::new(corner.x, corner.y - sy * a, h - b),
                        _ => Point3::new(corner.x - sx * a, corner.y, h - b),
                    };
                    points.push(to_world(lp));
                    intensity.push(CORNER_CAP_INTENSITY);
                }
            }
        }
        // Cylinders and spheres carry one survey disk on top.
        let top = match shape {
            Shape::Cylinder { h, .. } => Some(Point3::new(0.0, 0.0, h)),
            Shape::Sphere { r } => Some(Point3::new(0.0, 0.0, 2.0 * r)),
            Shape::Box { .. } => None,
        };
        if let Some(top) = top {
            let cap_area = std::f64::consts::PI * r * r;
            let per_cap =
                (cap_area * config.points_per_m2 * CORNER_CAP_OVERSAMPLE).round().max(6.0) as usize;
            points.push(to_world(top));
            intensity.push(CORNER_CAP_INTENSITY);
            for _ in 0..per_cap {
                let rr = r * rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let lp = Point3::new(top.x + rr * theta.cos(), top.y + rr * theta.sin(), top.z);
                points.push(to_world(lp));
                intensity.push(CORNER_CAP_INTENSITY);
            }
        }
                let cap_area = std::f64::consts::PI * r * r;
                let per_cap = (cap_area * config.points_per_m2 * CORNER_CAP_OVERSAMPLE)
                    .round()
                    .max(6.0) as usize;
                points.push(to_world(top));
                intensity.push(CORNER_CAP_INTENSITY);
                for _ in 0..per_cap {
                    let rr = r * rng.random::<f64>().sqrt();
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let lp =
                        Point3::new(top.x + rr * theta.cos(), top.y + rr * theta.sin(), top.z);
                    points.push(to_world(lp));
                    intensity.push(CORNER_CAP_INTENSITY);
                }
            }
        }
    }

    let ground_area = config.extent * 2.0 * GROUND_HALF_WIDTH;
    let ground_count = (ground_area * config.points_per_m2).round() as usize;
    for _ in 0..ground_count {
        let x = rng.random_range(0.0..config.extent);
        let off = rng.random_range(-GROUND_HALF_WIDTH..GROUND_HALF_WIDTH);
        let p = Point3::new(x, path_y(x) + off, 0.0);
        intensity.push(point_intensity(u64::MAX, &p, &Vec3::z(), config.texture_noise));
        points.push(p);
    }

    let map = PointCloud::with_intensity(points, Some(intensity), "map")
        .expect("generated points are finite");

    let trajectory: Vec<(usize, PoseSE3)> = (0..config.camera_count)
        .map(|i| {
            let x = TRAJECTORY_START_X + i as f64 * config.camera_spacing;
            let center = Point3::new(x, path_y(x), CAMERA_HEIGHT);
            let forward = Vec3::new(1.0, path_slope(x), 0.0);
            (i, look_at_pose(&center, &forward, &Vec3::z()))
        })
        .collect();

    let images = trajectory
        .iter()
        .map(|(_, pose)| render_frame(&map, pose, &config.intrinsics))
        .collect();

    Ok(Scene { map, trajectory, images })
}

/// Bilinear footprint of a splat at (u, v): the four surrounding pixels and
/// their weights. Weights sum to 1; callers drop out-of-bounds entries.
fn footprint(u: f64, v: f64) -> [(i64, i64, f64); 4] {
    let (i0f, j0f) = (u.floor(), v.floor());
    let (fu, fv) = (u - i0f, v - j0f);
    let (i0, j0) = (i0f as i64, j0f as i64);
    [
        (i0, j0, (1.0 - fu) * (1.0 - fv)),
        (i0 + 1, j0, fu * (1.0 - fv)),
        (i0, j0 + 1, (1.0 - fu) * fv),
        (i0 + 1, j0 + 1, fu * fv),
    ]
}

struct SplatStats {
    /// Points that deposited any weight.
    splatted: usize,
    /// Of those, points whose deposited weight centroid lies within 0.5 px of
    /// the analytic projection.
    consistent: usize,
}

/// Renders the map into a frame by z-buffered point splatting. A point is
/// visible when its depth is within a small slack of the depth buffer at its
/// nearest pixel; visible points spread over a 2x2 bilinear footprint and
/// pixels average their splats, weighted.
pub fn render_frame(map: &PointCloud, pose: &PoseSE3, k: &CameraIntrinsics) -> GrayImage {
    render_frame_audited(map, pose, k).0
}

fn render_frame_audited(
    map: &PointCloud,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> (GrayImage, SplatStats) {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut splats: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (i, p) in map.points.iter().enumerate() {
        let pc = pose.transform(p);
        if pc.z <= 0.05 {
            continue;
        }
        let u = k.fx * pc.x / pc.z + k.cx;
        let v = k.fy * pc.y / pc.z + k.cy;
        if u <= -1.0 || u >= w as f64 || v <= -1.0 || v >= h as f64 {
            continue;
        }
        let val = map.intensity.as_ref().map_or(0.5, |vals| vals[i]);
        splats.push((u, v, pc.z, val));
    }

    let mut zbuf = vec![f64::INFINITY; w * h];
    for &(u, v, z, _) in &splats {
        for (px, py, wt) in footprint(u, v) {
            if wt > 0.0 && px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                let at = py as usize * w + px as usize;
                if z < zbuf[at] {
                    zbuf[at] = z;
                }
            }
        }
    }

    let mut acc = vec![0.0f64; w * h];
    let mut wsum = vec![0.0f64; w * h];
    let mut stats = SplatStats { splatted: 0, consistent: 0 };
    for &(u, v, z, val) in &splats {
        // Visibility is decided once per splat, against the depth buffer at
        // its nearest pixel; a visible splat deposits its whole footprint.
        let ni = (u.round() as i64).clamp(0, w as i64 - 1) as usize;
        let nj = (v.round() as i64).clamp(0, h as i64 - 1) as usize;
        let slack = SPLAT_DEPTH_SLACK_ABS + SPLAT_DEPTH_SLACK_REL * z;
        if z > zbuf[nj * w + ni] + slack {
            continue;
        }
        let (mut wtot, mut cu, mut cv) = (0.0, 0.0, 0.0);
        for (px, py, wt) in footprint(u, v) {
            if wt > 0.0 && px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                let at = py as usize * w + px as usize;
                acc[at] += wt * val;
                wsum[at] += wt;
                wtot += wt;
                cu += wt * px as f64;
                cv += wt * py as f64;
            }
        }
        if wtot > 0.0 {
            stats.splatted += 1;
            let (du, dv) = (cu / wtot - u, cv / wtot - v);
            if (du * du + dv * dv).sqrt() <= 0.5 {
                stats.consistent += 1;
            }
        }
    }

    let data = acc
        .iter()
        .zip(&wsum)
        .map(|(a, ws)| if *ws > 1e-12 { a / ws } else { BACKGROUND })
        .collect();
    (GrayImage::new(w, h, data).expect("intrinsics sizes are nonzero"), stats)
}

/// A contiguous stretch of trajectory plus the nearby slice of the map.
#[derive(Debug, Clone)]
pub struct Submap {
    pub id: usize,
    /// (frame id, ground-truth pose), in trajectory order. Frame ids index
    /// the owning scene's `images`.
    pub frames: Vec<(usize, PoseSE3)>,
    /// Map points within the frames' xy bounding box plus a 10 m margin.
    pub cloud: PointCloud,
}

/// Partitions the trajectory into submaps by cumulative arc length, `length`
/// meters each, the remainder forming the final submap. Every frame lands in
/// exactly one submap.
/// Partitions a trajectory into contiguous groups by accumulated camera-center
/// arc length, one group per `length` meters. Returns indices into
/// `trajectory`; every index appears exactly once, in order.
pub fn assign_submap_frames(trajectory: &[(usize, PoseSE3)], length: f64) -> Vec<Vec<usize>> {
    assert!(length > 0.0, "submap length must be positive");
    if trajectory.is_empty() {
        return Vec::new();
    }
    let centers: Vec<Point3> = trajectory
        .iter()
        .map(|(_, pose)| Point3::from(*pose.invert().translation()))
        .collect();
    let mut cum = vec![0.0f64];
    for pair in centers.windows(2) {
        cum.push(cum.last().unwrap() + (pair[1] - pair[0]).norm());
    }
    let total = *cum.last().unwrap();
    // The small slack keeps accumulated rounding error in `cum` from minting
    // an extra submap when the trajectory length is an exact multiple.
    let n_submaps = ((total / length - 1e-9).ceil() as usize).max(1);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_submaps];
    for i in 0..trajectory.len() {
        let idx = ((cum[i] / length).floor() as usize).min(n_submaps - 1);
        groups[idx].push(i);
    }
    groups
}

pub fn split_submaps(scene: &Scene, length: f64) -> Vec<Submap> {
    let groups = assign_submap_frames(&scene.trajectory, length);
    let centers: Vec<Point3> = scene
        .trajectory
        .iter()
        .map(|(_, pose)| Point3::from(*pose.invert().translation()))
        .collect();

    let mut frames: Vec<Vec<(usize, PoseSE3)>> = Vec::with_capacity(groups.len());
    let mut bounds = Vec::with_capacity(groups.len());
    for group in &groups {
        frames.push(group.iter().map(|&i| scene.trajectory[i].clone()).collect());
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &i in group {
            b.0 = b.0.min(centers[i].x);
            b.1 = b.1.max(centers[i].x);
            b.2 = b.2.min(centers[i].y);
            b.3 = b.3.max(centers[i].y);
        }
        bounds.push(b);
    }

    frames
        .into_iter()
        .zip(bounds)
        .enumerate()
        .map(|(id, (frames, (x0, x1, y0, y1)))| {
            let m = SUBMAP_POINT_MARGIN;
            let keep: Vec<usize> = scene
                .map
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    p.x >= x0 - m && p.x <= x1 + m && p.y >= y0 - m && p.y <= y1 + m
                })
                .map(|(i, _)| i)
                .collect();
            let points = keep.iter().map(|&i| scene.map.points[i]).collect();
            let intensity = scene
                .map
                .intensity
                .as_ref()
                .map(|vals| keep.iter().map(|&i| vals[i]).collect());
            let cloud = PointCloud::with_intensity(points, intensity, format!("submap_{id}"))
                .expect("subset of a valid cloud");
            Submap { id, frames, cloud }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelParams {
    /// A view supports a correspondence when the projected 3D keypoint lands
    /// strictly closer than this to its nearest 2D keypoint, pixels.
    pub max_pixel_dist: f64,
    /// Minimum supporting views for a correspondence to be kept.
    pub min_support_views: usize,
    /// Non-max suppression radius over 3D keypoints, meters.
    pub nms_radius_3d: f64,
    /// Non-max suppression radius over 2D keypoints per frame, pixels.
    pub nms_radius_2d: f64,
    /// Neighborhood radius for the point volume, meters.
    pub volume_radius: f64,
    /// Reject keypoints with fewer neighbors than this inside the radius.
    pub volume_min_points: usize,
    /// Volumes are padded or subsampled to exactly this many points.
    pub volume_pad: usize,
    /// Patch window side at scale 1, pixels.
    pub patch_base: usize,
    /// Reject 2D keypoints blurrier than this scale.
    pub patch_scale_cap: f64,
    pub seed: u64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            max_pixel_dist: 3.0,
            min_support_views: 3,
            nms_radius_3d: 4.0,
            nms_radius_2d: 32.0,
            volume_radius: 1.0,
            volume_min_points: 100,
            volume_pad: 1024,
            patch_base: 256,
            patch_scale_cap: 4.0,
            seed: 0,
        }
    }
}

impl LabelParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_pixel_dist > 0.0) {
            return Err(format!("max_pixel_dist must be positive, got {}", self.max_pixel_dist));
        }
        if self.min_support_views == 0 {
            return Err("min_support_views must be at least 1".into());
        }
        if !(self.nms_radius_3d > 0.0) || !(self.nms_radius_2d > 0.0) {
            return Err("non-max suppression radii must be positive".into());
        }
        if !(self.volume_radius > 0.0) {
            return Err(format!("volume_radius must be positive, got {}", self.volume_radius));
        }
        if self.volume_min_points == 0 || self.volume_pad < self.volume_min_points {
            return Err(format!(
                "need 1 <= volume_min_points <= volume_pad, got {} and {}",
                self.volume_min_points, self.volume_pad
            ));
        }
        if self.patch_base < 8 {
            return Err(format!("patch_base must be at least 8, got {}", self.patch_base));
        }
        if !(self.patch_scale_cap > 0.0) {
            return Err(format!("patch_scale_cap must be positive, got {}", self.patch_scale_cap));
        }
        Ok(())
    }
}

/// One cross-modal training example: an image patch and a point volume that
/// observe the same 3D keypoint.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub patch: Patch,
    pub volume: LocalVolume,
    pub keypoint2d: Keypoint2D,
    pub keypoint3d: Keypoint3D,
    /// Frames that verified the correspondence; at least 3 by construction.
    pub support_views: usize,
}

/// Labels 2D-3D correspondences inside one submap. Each 3D keypoint is
/// projected into every submap frame with the ground-truth pose; a frame
/// supports it when the nearest 2D keypoint lies strictly within
/// `max_pixel_dist`. Keypoints supported by at least `min_support_views`
/// frames yield one pair per supporting view, subject to the volume and patch
/// extraction filters. Output order and content are deterministic.
///
/// `images` and `kps2d` are indexed by frame id, covering the whole scene.
pub fn label_correspondences(
    submap: &Submap,
    images: &[GrayImage],
    kps2d: &[Vec<Keypoint2D>],
    kps3d: &[Keypoint3D],
    k: &CameraIntrinsics,
    params: &LabelParams,
) -> Vec<LabeledPair> {
    if submap.cloud.points.is_empty() || submap.frames.is_empty() {
        return Vec::new();
    }
    let kept3d = nms_keypoints_3d(kps3d, params.nms_radius_3d);
    let thinned2d: Vec<Vec<Keypoint2D>> = submap
        .frames
        .iter()
        .map(|&(id, _)| nms_keypoints_2d(&kps2d[id], params.nms_radius_2d))
        .collect();
    let tree = KdTree::from_points(&submap.cloud.points).expect("cloud checked non-empty");

    let mut pairs = Vec::new();
    for (ki, kp3) in kept3d.iter().enumerate() {
        let mut supports: Vec<(usize, usize)> = Vec::new();
        for (fi, (_, pose)) in submap.frames.iter().enumerate() {
            let Some(px) = project(&kp3.position, pose, k) else { continue };
            if !k.contains(&px) {
                continue;
            }
            let nearest = thinned2d[fi]
                .iter()
                .enumerate()
                .map(|(j, kp2)| (j, (kp2.position - px).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, dist)) = nearest {
                if dist < params.max_pixel_dist {
                    supports.push((fi, j));
                }
            }
        }
        if supports.len() < params.min_support_views {
            continue;
        }
        let vol_seed = params.seed ^ splitmix64(ki as u64 + 1);
        let Ok(volume) = extract_volume_indexed(
            &submap.cloud.points,
            &tree,
            kp3,
            params.volume_radius,
            params.volume_min_points,
            params.volume_pad,
            vol_seed,
        ) else {
            continue;
        };
        for &(fi, j) in &supports {
            let kp2 = thinned2d[fi][j].clone();
            let frame_id = submap.frames[fi].0;
            let Ok(raw) = extract_patch(&images[frame_id], &kp2, params.patch_base, params.patch_scale_cap)
            else {
                continue;
            };
            pairs.push(LabeledPair {
                patch: preprocess_patch(&raw, &kp2),
                volume: volume.clone(),
                keypoint2d: kp2,
                keypoint3d: kp3.clone(),
                support_views: supports.len(),
            });
        }
    }
    pairs
}

fn keypoint_key(kp: &Keypoint3D) -> (u64, u64, u64) {
    (kp.position.x.to_bits(), kp.position.y.to_bits(), kp.position.z.to_bits())
}

/// Builds one triplet per pair: the pair's patch as anchor, its own volume as
/// positive, and the volume of a uniformly drawn pair with a different 3D
/// keypoint as negative.
pub fn make_triplets(pairs: &[LabeledPair], seed: u64) -> Result<Vec<Triplet>, SynthError> {
    let distinct: BTreeSet<_> = pairs.iter().map(|p| keypoint_key(&p.keypoint3d)).collect();
    if pairs.len() < 2 || distinct.len() < 2 {
        return Err(SynthError::DatasetTooSmall { pairs: pairs.len(), distinct: distinct.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs
        .iter()
        .map(|pair| {
            let anchor_key = keypoint_key(&pair.keypoint3d);
            let negative = loop {
                let j = rng.random_range(0..pairs.len());
                if keypoint_key(&pairs[j].keypoint3d) != anchor_key {
                    break pairs[j].volume.clone();
                }
            };
            Triplet { anchor: pair.patch.clone(), positive: pair.volume.clone(), negative }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Submap ids held out for evaluation: the final 10%, at least one.
    pub test_submaps: Vec<usize>,
}

fn fmt_pose_row(id: usize, pose: &PoseSE3) -> String {
    let m = pose.to_row_major();
    let mut row = id.to_string();
    for v in m {
        let _ = write!(row, ",{v}");
    }
    row.push('\n');
    row
}

/// How many trailing submaps form the evaluation split: 10% rounded, at
/// least one whenever any submap exists.
pub fn test_submap_count(n_submaps: usize) -> usize {
    if n_submaps == 0 {
        0
    } else {
        ((n_submaps as f64 * 0.1).round() as usize).clamp(1, n_submaps)
    }
}

/// Writes a scene and its labeled pairs as a dataset directory:
///
/// * `map.ply`, ASCII with x, y, z, intensity
/// * `trajectory.csv`, frame id and the 12 row-major [R|t] values
/// * `images/frame_<id>.pgm`, 8-bit, one per frame
/// * `pairs/patch_<id>.pgm` (pixels remapped from [-1, 1] to 8-bit),
///   `pairs/volume_<id>.ply`, and `pairs/index.csv` with keypoint
///   coordinates, scale, support count, submap id and split tag
///
/// Pairs from the final 10% of submaps (at least one) are tagged `test`,
/// the rest `train`. `pairs[i]` must belong to `submaps[i]`.
pub fn write_dataset(
    dir: &Path,
    scene: &Scene,
    submaps: &[Submap],
    pairs: &[Vec<LabeledPair>],
) -> Result<DatasetSummary, SynthError> {
    assert_eq!(submaps.len(), pairs.len(), "one pair list per submap");
    let enc = |e: &dyn std::fmt::Display| SynthError::Encode(e.to_string());
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("pairs"))?;

    scene.map.write_ply(&dir.join("map.ply")).map_err(|e| enc(&e))?;

    let mut traj = String::from("frame,r00,r01,r02,tx,r10,r11,r12,ty,r20,r21,r22,tz\n");
    for (id, pose) in &scene.trajectory {
        traj.push_str(&fmt_pose_row(*id, pose));
    }
    fs::write(dir.join("trajectory.csv"), traj)?;

    for (id, img) in scene.images.iter().enumerate() {
        img.write_pgm(&dir.join(format!("images/frame_{id:06}.pgm"))).map_err(|e| enc(&e))?;
    }

    let test_from = submaps.len() - test_submap_count(submaps.len());

    let mut index = String::from("pair,submap,split,u,v,scale,support_views,x,y,z\n");
    let mut pair_id = 0usize;
    let (mut train_pairs, mut test_pairs) = (0, 0);
    for (si, (submap, list)) in submaps.iter().zip(pairs).enumerate() {
        let split = if si >= test_from { "test" } else { "train" };
        for pair in list {
            let pixels: Vec<f64> = pair
                .patch
                .pixels
                .iter()
                .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect();
            GrayImage::new(PATCH_SIZE, PATCH_SIZE, pixels)
                .map_err(|e| enc(&e))?
                .write_pgm(&dir.join(format!("pairs/patch_{pair_id:06}.pgm")))
                .map_err(|e| enc(&e))?;
            let vol_points: Vec<Point3> = pair.volume.points.iter().map(|v| Point3::from(*v)).collect();
            PointCloud::new(vol_points, format!("pair_{pair_id:06}"))
                .map_err(|e| enc(&e))?
                .write_ply(&dir.join(format!("pairs/volume_{pair_id:06}.ply")))
                .map_err(|e| enc(&e))?;
            let (kp2, kp3) = (&pair.keypoint2d, &pair.keypoint3d);
            let _ = writeln!(
                index,
                "{pair_id},{},{split},{},{},{},{},{},{},{}",
                submap.id,
                kp2.position.x,
                kp2.position.y,
                kp2.scale,
                pair.support_views,
                kp3.position.x,
                kp3.position.y,
                kp3.position.z,
            );
            if split == "test" {
                test_pairs += 1;
            } else {
                train_pairs += 1;
            }
            pair_id += 1;
        }
    }
    fs::write(dir.join("pairs/index.csv"), index)?;

    Ok(DatasetSummary {
        train_pairs,
        test_pairs,
        test_submaps: (test_from..submaps.len()).map(|si| submaps[si].id).collect(),
    })
}

/// One labeled pair read back from a dataset directory.
#[derive(Debug, Clone)]
pub struct StoredPair {
    pub pair: LabeledPair,
    pub submap: usize,
    pub test: bool,
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T, SynthError> {
    s.trim()
        .parse()
        .map_err(|_| SynthError::Parse(format!("line {line}: bad {what} value {s:?}")))
}

/// Reads `trajectory.csv` back as (frame id, pose) rows.
pub fn read_trajectory(dir: &Path) -> Result<Vec<(usize, PoseSE3)>, SynthError> {
    let text = fs::read_to_string(dir.join("trajectory.csv"))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(SynthError::Parse(format!(
                "trajectory.csv line {ln}: expected 13 fields, got {}",
                fields.len()
            )));
        }
        let id = parse_field(fields[0], "frame id", ln)?;
        let mut m = [0.0f64; 12];
        for (j, field) in fields[1..].iter().enumerate() {
            m[j] = parse_field(field, "pose entry", ln)?;
        }
        out.push((id, PoseSE3::from_row_major(&m)));
    }
    if out.is_empty() {
        return Err(SynthError::Parse("trajectory.csv has no pose rows".into()));
    }
    Ok(out)
}

/// Reads `pairs/index.csv` and the patch and volume files it references.
///
/// Patches are re-centered to zero mean after the 8-bit quantization of the
/// PGM roundtrip. Detector responses, saliencies and pre-padding neighbor
/// counts are not part of the on-disk format and read back as zero or the
/// padded point count; keypoint positions roundtrip exactly.
pub fn read_pairs(dir: &Path) -> Result<Vec<StoredPair>, SynthError> {
    let text = fs::read_to_string(dir.join("pairs/index.csv"))?;
    let bad = |e: &dyn std::fmt::Display| SynthError::Parse(e.to_string());
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(SynthError::Parse(format!(
                "index.csv line {ln}: expected 10 fields, got {}",
                fields.len()
            )));
        }
        let pid: usize = parse_field(fields[0], "pair id", ln)?;
        let submap = parse_field(fields[1], "submap id", ln)?;
        let test = match fields[2] {
            "train" => false,
            "test" => true,
            other => {
                return Err(SynthError::Parse(format!("line {ln}: unknown split tag {other:?}")))
            }
        };
        let u = parse_field(fields[3], "u", ln)?;
        let v = parse_field(fields[4], "v", ln)?;
        let scale = parse_field(fields[5], "scale", ln)?;
        let support_views = parse_field(fields[6], "support_views", ln)?;
        let x = parse_field(fields[7], "x", ln)?;
        let y = parse_field(fields[8], "y", ln)?;
        let z = parse_field(fields[9], "z", ln)?;

        let img = GrayImage::read_pgm(&dir.join(format!("pairs/patch_{pid:06}.pgm")))
            .map_err(|e| bad(&e))?;
        if img.width() != PATCH_SIZE || img.height() != PATCH_SIZE {
            return Err(SynthError::Parse(format!(
                "patch {pid} is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
                img.width(),
                img.height()
            )));
        }
        let keypoint2d = Keypoint2D { position: Pixel2::new(u, v), scale, response: 0.0 };
        let pixels: Vec<f64> = img.data().iter().map(|p| p * 2.0 - 1.0).collect();
        let patch = preprocess_patch(&RawPatch { side: PATCH_SIZE, pixels }, &keypoint2d);

        let cloud = PointCloud::read_ply(&dir.join(format!("pairs/volume_{pid:06}.ply")))
            .map_err(|e| bad(&e))?;
        let keypoint3d =
            Keypoint3D { position: Point3::new(x, y, z), saliency: 0.0, neighbor_count: cloud.points.len() };
        let volume = LocalVolume {
            points: cloud.points.iter().map(|p| p.coords).collect(),
            source_keypoint: keypoint3d.clone(),
            original_count: cloud.points.len(),
        };

        out.push(StoredPair {
            pair: LabeledPair { patch, volume, keypoint2d, keypoint3d, support_views },
            submap,
            test,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect2d::detect_dog_keypoints;
    use crate::detect3d::{detect_iss, remove_ground_plane, Detect3dError, IssParams};
    use crate::geometry::{Mat3, Pixel2};

    fn small_config() -> SceneConfig {
        SceneConfig {
            seed: 9,
            n_structures: 8,
            extent: 70.0,
            points_per_m2: 30.0,
            camera_count: 12,
            camera_spacing: 1.5,
            intrinsics: CameraIntrinsics {
                fx: 160.0,
                fy: 160.0,
                cx: 128.0,
                cy: 96.0,
                width: 256,
                height: 192,
            },
            submap_length: 60.0,
            texture_noise: 0.3,
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let cases = [
            SceneConfig { extent: -1.0, ..SceneConfig::default() },
            SceneConfig { points_per_m2: 0.0, ..SceneConfig::default() },
            SceneConfig { camera_count: 0, ..SceneConfig::default() },
            SceneConfig { texture_noise: 1.5, ..SceneConfig::default() },
            SceneConfig { submap_length: 0.0, ..SceneConfig::default() },
            // 400 cameras at 1.25 m overrun the 300 m extent.
            SceneConfig { camera_count: 400, ..SceneConfig::default() },
        ];
        for config in cases {
            assert!(
                matches!(generate_scene(&config), Err(SynthError::ConfigInvalid(_))),
                "config should be rejected: {config:?}"
            );
        }
        assert!(SceneConfig::default().validate().is_ok());
    }

    #[test]
    fn scene_generation_is_bit_identical() {
        let config = small_config();
        let a = generate_scene(&config).unwrap();
        let b = generate_scene(&config).unwrap();
        assert_eq!(a.map.points, b.map.points);
        assert_eq!(a.map.intensity, b.map.intensity);
        assert_eq!(a.images, b.images);
        assert_eq!(a.trajectory.len(), b.trajectory.len());
        for ((ia, pa), (ib, pb)) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(ia, ib);
            assert_eq!(pa.to_row_major(), pb.to_row_major());
        }
        for v in a.map.intensity.as_ref().unwrap() {
            assert!((0.02..=0.98).contains(v), "intensity {v} out of range");
        }
    }

    #[test]
    fn trajectory_walks_the_corridor() {
        let config = small_config();
        let scene = generate_scene(&config).unwrap();
        let centers: Vec<Point3> = scene
            .trajectory
            .iter()
            .map(|(_, pose)| Point3::from(*pose.invert().translation()))
            .collect();
        assert!((centers[0].x - 8.0).abs() < 1e-12);
        for c in &centers {
            assert!((c.z - 1.6).abs() < 1e-12);
        }
        for pair in centers.windows(2) {
            let d = (pair[1] - pair[0]).norm();
            assert!((d - config.camera_spacing).abs() < 0.02 * config.camera_spacing);
        }
        // A point on the path well ahead of the camera lands near the
        // principal point, at the height of the horizon.
        let (_, pose) = &scene.trajectory[0];
        let ahead = Point3::new(20.0, path_y(20.0), CAMERA_HEIGHT);
        let px = project(&ahead, pose, &config.intrinsics).unwrap();
        assert!((px.x - config.intrinsics.cx).abs() < 30.0, "u = {}", px.x);
        assert!((px.y - config.intrinsics.cy).abs() < 5.0, "v = {}", px.y);
    }

    #[test]
    fn ground_only_scene_yields_no_3d_keypoints() {
        let config = SceneConfig {
            n_structures: 0,
            camera_count: 4,
            extent: 40.0,
            points_per_m2: 12.0,
            ..small_config()
        };
        let scene = generate_scene(&config).unwrap();
        let kps = match remove_ground_plane(&scene.map, &Vec3::z(), 7) {
            Ok(cleaned) => detect_iss(&cleaned, &IssParams::default()),
            // The plane was the whole cloud; nothing left to detect on.
            Err(Detect3dError::TooFewPointsRemaining) => Vec::new(),
            Err(e) => panic!("unexpected ground removal failure: {e}"),
        };
        assert!(kps.is_empty(), "expected no keypoints, got {}", kps.len());
    }

    #[test]
    fn rendered_splats_match_analytic_projection() {
        let config = small_config();
        let scene = generate_scene(&config).unwrap();
        let (_, pose) = &scene.trajectory[6];
        let (_, stats) = render_frame_audited(&scene.map, pose, &config.intrinsics);
        assert!(stats.splatted > 5_000, "only {} splatted points", stats.splatted);
        let frac = stats.consistent as f64 / stats.splatted as f64;
        assert!(frac >= 0.95, "only {frac:.4} of splats consistent");
    }

    #[test]
    fn renderer_occludes_far_points() {
        let k = CameraIntrinsics { fx: 32.0, fy: 32.0, cx: 32.0, cy: 32.0, width: 64, height: 64 };
        let near = Point3::new(0.0, 0.0, 5.0);
        let far_behind_near = Point3::new(0.05, 0.0, 50.0);
        let far_alone = Point3::new(12.5, 0.0, 50.0);
        let cloud = PointCloud::with_intensity(
            vec![near, far_behind_near, far_alone],
            Some(vec![0.9, 0.1, 0.1]),
            "occlusion",
        )
        .unwrap();
        let img = render_frame(&cloud, &PoseSE3::identity(), &k);
        assert!(img.get(32, 32) > 0.7, "near point lost: {}", img.get(32, 32));
        assert!(
            img.get(40, 32) > 0.05 && img.get(40, 32) < 0.3,
            "lone far point wrong: {}",
            img.get(40, 32)
        );
    }

    /// Straight-line scene along x with unit-ish spacing and a trivial map.
    fn line_scene(count: usize, spacing: f64, map_points: Vec<Point3>) -> Scene {
        let map = PointCloud::new(map_points, "line").unwrap();
        let trajectory: Vec<(usize, PoseSE3)> = (0..count)
            .map(|i| {
                let center = Point3::new(i as f64 * spacing, 0.0, 1.6);
                (i, look_at_pose(&center, &Vec3::x(), &Vec3::z()))
            })
            .collect();
        let images = (0..count)
            .map(|_| GrayImage::new(16, 16, vec![0.0; 256]).unwrap())
            .collect();
        Scene { map, trajectory, images }
    }

    #[test]
    fn submap_split_examples() {
        // 181 frames, 1 m apart: 180 m of trajectory over 60 m submaps.
        let scene = line_scene(181, 1.0, vec![Point3::new(0.0, 0.0, 0.0)]);
        let submaps = split_submaps(&scene, 60.0);
        assert_eq!(submaps.len(), 3);
        assert_eq!(submaps[0].frames.len(), 60);
        assert_eq!(submaps[1].frames.len(), 60);
        assert_eq!(submaps[2].frames.len(), 61);
        let mut seen: Vec<usize> =
            submaps.iter().flat_map(|s| s.frames.iter().map(|(id, _)| *id)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..181).collect::<Vec<_>>(), "frames must cover exactly once");

        // 59 m of trajectory stays a single submap.
        let scene = line_scene(60, 1.0, vec![Point3::new(0.0, 0.0, 0.0)]);
        assert_eq!(split_submaps(&scene, 60.0).len(), 1);
    }

    #[test]
    fn submaps_carry_nearby_map_points() {
        let points = vec![
            Point3::new(30.0, 0.0, 0.0),
            Point3::new(75.0, 0.0, 2.0),
            Point3::new(150.0, 40.0, 0.0),
            Point3::new(65.0, 0.0, 1.0),
        ];
        let scene = line_scene(181, 1.0, points);
        let submaps = split_submaps(&scene, 60.0);
        let has = |s: &Submap, p: &Point3| s.cloud.points.iter().any(|q| q == p);
        assert!(has(&submaps[0], &Point3::new(30.0, 0.0, 0.0)));
        assert!(!has(&submaps[1], &Point3::new(30.0, 0.0, 0.0)));
        assert!(has(&submaps[1], &Point3::new(75.0, 0.0, 2.0)));
        assert!(!has(&submaps[0], &Point3::new(75.0, 0.0, 2.0)));
        for s in &submaps {
            assert!(!has(s, &Point3::new(150.0, 40.0, 0.0)), "40 m lateral point kept");
        }
        // Within the 10 m margin of both the first and second submap.
        assert!(has(&submaps[0], &Point3::new(65.0, 0.0, 1.0)));
        assert!(has(&submaps[1], &Point3::new(65.0, 0.0, 1.0)));
    }

    struct CornerFixture {
        submap: Submap,
        images: Vec<GrayImage>,
        kps2d: Vec<Vec<Keypoint2D>>,
        kps3d: Vec<Keypoint3D>,
        k: CameraIntrinsics,
        params: LabelParams,
    }

    /// Cameras in a row staring at a dense blob of points around one 3D
    /// keypoint, each frame holding one 2D keypoint displaced from the exact
    /// projection by `offsets[frame]` pixels along u.
    fn corner_fixture(offsets: &[f64]) -> CornerFixture {
        let k = CameraIntrinsics { fx: 64.0, fy: 64.0, cx: 64.0, cy: 64.0, width: 128, height: 128 };
        let target = Point3::new(0.0, 0.0, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut points = vec![target];
        while points.len() < 151 {
            let d = Vec3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            );
            if d.norm() <= 0.8 {
                points.push(target + d);
            }
        }
        let cloud = PointCloud::new(points, "fixture").unwrap();
        let mut frames = Vec::new();
        let mut images = Vec::new();
        let mut kps2d = Vec::new();
        for (i, off) in offsets.iter().enumerate() {
            let cx = -0.6 + 0.4 * i as f64;
            let pose = PoseSE3::new(Mat3::identity(), Vec3::new(-cx, 0.0, 0.0));
            let px = project(&target, &pose, &k).unwrap();
            kps2d.push(vec![Keypoint2D {
                position: Pixel2::new(px.x + off, px.y),
                scale: 1.0,
                response: 1.0,
            }]);
            images.push(GrayImage::new(128, 128, vec![0.5; 128 * 128]).unwrap());
            frames.push((i, pose));
        }
        let submap = Submap { id: 0, frames, cloud };
        let kps3d = vec![Keypoint3D { position: target, saliency: 1.0, neighbor_count: 150 }];
        let params = LabelParams { patch_base: 64, ..LabelParams::default() };
        CornerFixture { submap, images, kps2d, kps3d, k, params }
    }

    #[test]
    fn blob_on_corner_accepted_with_four_views() {
        let f = corner_fixture(&[0.0, 0.0, 0.0, 0.0]);
        let pairs =
            label_correspondences(&f.submap, &f.images, &f.kps2d, &f.kps3d, &f.k, &f.params);
        assert_eq!(pairs.len(), 4, "one pair per supporting view");
        for pair in &pairs {
            assert_eq!(pair.support_views, 4);
            assert_eq!(pair.keypoint3d.position, Point3::new(0.0, 0.0, 5.0));
            assert_eq!(pair.patch.pixels.len(), PATCH_SIZE * PATCH_SIZE);
            assert_eq!(pair.volume.points.len(), f.params.volume_pad);
        }
    }

    #[test]
    fn two_views_are_not_enough() {
        let f = corner_fixture(&[0.0, 0.0]);
        let pairs =
            label_correspondences(&f.submap, &f.images, &f.kps2d, &f.kps3d, &f.k, &f.params);
        assert!(pairs.is_empty(), "2 views must be rejected, got {} pairs", pairs.len());
    }

    #[test]
    fn residual_beyond_threshold_does_not_count_as_support() {
        let f = corner_fixture(&[0.0, 3.5, 0.0, 0.0]);
        let pairs =
            label_correspondences(&f.submap, &f.images, &f.kps2d, &f.kps3d, &f.k, &f.params);
        assert_eq!(pairs.len(), 3, "the 3.5 px view must not contribute a pair");
        for pair in &pairs {
            assert_eq!(pair.support_views, 3);
        }

        let f = corner_fixture(&[0.0, 2.5, 0.0, 0.0]);
        let pairs =
            label_correspondences(&f.submap, &f.images, &f.kps2d, &f.kps3d, &f.k, &f.params);
        assert_eq!(pairs.len(), 4, "a 2.5 px residual still supports");
    }

    #[test]
    fn generated_scene_labels_are_sound() {
        let config = SceneConfig {
            seed: 5,
            n_structures: 14,
            extent: 80.0,
            points_per_m2: 48.0,
            camera_count: 28,
            camera_spacing: 1.25,
            submap_length: 60.0,
            texture_noise: 0.3,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&config).unwrap();
        let structures = remove_ground_plane(&scene.map, &Vec3::z(), 11).unwrap();
        let iss = IssParams { salient_radius: 0.6, ..IssParams::default() };
        let kps3d = detect_iss(&structures, &iss);
        assert!(kps3d.len() > 10, "only {} 3d keypoints", kps3d.len());
        let kps2d: Vec<Vec<Keypoint2D>> = scene
            .images
            .iter()
            .map(|img| detect_dog_keypoints(img, 4, 3, 0.02).unwrap())
            .collect();
        let submaps = split_submaps(&scene, config.submap_length);
        assert_eq!(submaps.len(), 1);
        let params = LabelParams::default();
        let pairs = label_correspondences(
            &submaps[0],
            &scene.images,
            &kps2d,
            &kps3d,
            &config.intrinsics,
            &params,
        );
        assert!(pairs.len() >= 8, "only {} labeled pairs", pairs.len());

        for pair in &pairs {
            assert!(pair.support_views >= 3);
            assert_eq!(pair.volume.points.len(), params.volume_pad);
            // Ground truth check: some submap frame reprojects the 3D
            // keypoint within the labeling threshold of the 2D keypoint.
            let sound = submaps[0].frames.iter().any(|(_, pose)| {
                project(&pair.keypoint3d.position, pose, &config.intrinsics)
                    .map(|px| (px - pair.keypoint2d.position).norm() < params.max_pixel_dist)
                    .unwrap_or(false)
            });
            assert!(sound, "pair at {:?} fails reprojection", pair.keypoint3d.position);
        }
    }

    /// Toy pair with a tiny patch and volume; only identity matters.
    fn toy_pair(kp_x: f64, tag: f64) -> LabeledPair {
        let kp3 = Keypoint3D {
            position: Point3::new(kp_x, 0.0, 0.0),
            saliency: 1.0,
            neighbor_count: 8,
        };
        LabeledPair {
            patch: Patch {
                pixels: vec![tag; 4],
                source_keypoint: Keypoint2D {
                    position: Pixel2::new(0.0, 0.0),
                    scale: 1.0,
                    response: 1.0,
                },
            },
            volume: LocalVolume {
                points: vec![Vec3::new(tag, 0.0, 0.0); 8],
                source_keypoint: kp3.clone(),
                original_count: 8,
            },
            keypoint2d: Keypoint2D {
                position: Pixel2::new(0.0, 0.0),
                scale: 1.0,
                response: 1.0,
            },
            keypoint3d: kp3,
            support_views: 3,
        }
    }

    #[test]
    fn triplets_with_two_pairs_force_the_other_volume() {
        let pairs = vec![toy_pair(1.0, 0.1), toy_pair(2.0, 0.2)];
        let triplets = make_triplets(&pairs, 3).unwrap();
        assert_eq!(triplets.len(), 2);
        assert_eq!(triplets[0].negative.source_keypoint.position.x, 2.0);
        assert_eq!(triplets[1].negative.source_keypoint.position.x, 1.0);
    }

    #[test]
    fn triplet_negatives_never_share_the_anchor_keypoint() {
        // Two pairs per keypoint, so a naive index-based draw would collide.
        let pairs: Vec<LabeledPair> = (0..3)
            .flat_map(|i| {
                let x = i as f64;
                [toy_pair(x, 0.1), toy_pair(x, 0.2)]
            })
            .collect();
        let mut draws = 0;
        for seed in 0..1700u64 {
            for (t, p) in make_triplets(&pairs, seed).unwrap().iter().zip(&pairs) {
                assert_ne!(
                    keypoint_key(&t.negative.source_keypoint),
                    keypoint_key(&p.keypoint3d),
                );
                draws += 1;
            }
        }
        assert!(draws >= 10_000);
    }

    #[test]
    fn triplets_too_few_pairs_or_keypoints_rejected() {
        let one = vec![toy_pair(1.0, 0.1)];
        assert!(matches!(
            make_triplets(&one, 0),
            Err(SynthError::DatasetTooSmall { pairs: 1, distinct: 1 })
        ));
        let same = vec![toy_pair(1.0, 0.1), toy_pair(1.0, 0.2), toy_pair(1.0, 0.3)];
        assert!(matches!(
            make_triplets(&same, 0),
            Err(SynthError::DatasetTooSmall { pairs: 3, distinct: 1 })
        ));
    }

    #[test]
    fn triplets_are_seed_deterministic() {
        let pairs: Vec<LabeledPair> =
            (0..8).map(|i| toy_pair(i as f64, 0.1 * i as f64)).collect();
        let a = make_triplets(&pairs, 17).unwrap();
        let b = make_triplets(&pairs, 17).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(
                ta.negative.source_keypoint.position,
                tb.negative.source_keypoint.position
            );
        }
    }

    #[test]
    fn dataset_directory_layout_and_split() {
        let scene = line_scene(181, 1.0, vec![Point3::new(1.0, 2.0, 3.0)]);
        let submaps = split_submaps(&scene, 60.0);
        assert_eq!(submaps.len(), 3);
        let full_pair = |x: f64| {
            let mut p = toy_pair(x, 0.3);
            p.patch.pixels = vec![0.25; PATCH_SIZE * PATCH_SIZE];
            p
        };
        let pairs = vec![
            vec![full_pair(1.0), full_pair(2.0)],
            vec![full_pair(3.0)],
            vec![full_pair(4.0)],
        ];
        let dir = tempfile::tempdir().unwrap();
        let summary = write_dataset(dir.path(), &scene, &submaps, &pairs).unwrap();
        assert_eq!(summary.train_pairs, 3);
        assert_eq!(summary.test_pairs, 1);
        assert_eq!(summary.test_submaps, vec![2]);

        assert!(dir.path().join("map.ply").is_file());
        let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let lines: Vec<&str> = traj.lines().collect();
        assert_eq!(lines.len(), 182);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 13);
        let values: Vec<f64> = fields[1..].iter().map(|f| f.parse().unwrap()).collect();
        assert_eq!(values, scene.trajectory[0].1.to_row_major().to_vec());

        for id in 0..181 {
            assert!(dir.path().join(format!("images/frame_{id:06}.pgm")).is_file());
        }
        for id in 0..4 {
            assert!(dir.path().join(format!("pairs/patch_{id:06}.pgm")).is_file());
            let vol =
                PointCloud::read_ply(&dir.path().join(format!("pairs/volume_{id:06}.ply"))).unwrap();
            assert_eq!(vol.points.len(), 8);
        }
        let index = fs::read_to_string(dir.path().join("pairs/index.csv")).unwrap();
        let rows: Vec<&str> = index.lines().collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0], "pair,submap,split,u,v,scale,support_views,x,y,z");
        for row in &rows[1..4] {
            assert!(row.contains(",train,"), "expected train tag in {row}");
        }
        assert!(rows[4].contains(",test,"), "expected test tag in {}", rows[4]);

        let traj_back = read_trajectory(dir.path()).unwrap();
        assert_eq!(traj_back.len(), scene.trajectory.len());
        for ((id_a, pose_a), (id_b, pose_b)) in traj_back.iter().zip(&scene.trajectory) {
            assert_eq!(id_a, id_b);
            let (a, b) = (pose_a.to_row_major(), pose_b.to_row_major());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let groups = assign_submap_frames(&traj_back, 60.0);
        assert_eq!(groups.len(), 3);
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 181);

        let stored = read_pairs(dir.path()).unwrap();
        assert_eq!(stored.len(), 4);
        assert_eq!(
            stored.iter().map(|s| s.submap).collect::<Vec<_>>(),
            vec![0, 0, 1, 2]
        );
        assert_eq!(
            stored.iter().map(|s| s.test).collect::<Vec<_>>(),
            vec![false, false, false, true]
        );
        for (s, orig) in stored.iter().zip(pairs.iter().flatten()) {
            assert_eq!(s.pair.keypoint3d.position, orig.keypoint3d.position);
            assert_eq!(s.pair.keypoint2d.position, orig.keypoint2d.position);
            assert_eq!(s.pair.keypoint2d.scale, orig.keypoint2d.scale);
            assert_eq!(s.pair.support_views, orig.support_views);
            assert_eq!(s.pair.volume.points.len(), orig.volume.points.len());
            for (a, b) in s.pair.volume.points.iter().zip(&orig.volume.points) {
                assert!((a - b).norm() < 1e-12, "volume points must roundtrip exactly");
            }
            let mean: f64 =
                s.pair.patch.pixels.iter().sum::<f64>() / s.pair.patch.pixels.len() as f64;
            assert!(mean.abs() < 1e-12, "reloaded patch must be zero-mean");
            let orig_mean: f64 =
                orig.patch.pixels.iter().sum::<f64>() / orig.patch.pixels.len() as f64;
            for (a, b) in s.pair.patch.pixels.iter().zip(&orig.patch.pixels) {
                assert!((a - (b - orig_mean)).abs() < 0.02, "patch pixels within quantization error");
            }
        }
    }
}
