//! End-to-end orchestration: dataset assembly, map database construction,
//! query localization, and evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect2d::{detect_dog_keypoints, extract_patch, preprocess_patch, Keypoint2D};
use crate::detect3d::{detect_iss, extract_volume_indexed, remove_ground_plane, Detect3dError, IssParams};
use crate::geometry::{rotation_error_deg, CameraIntrinsics, PoseSE3, Vec3};
use crate::image::GrayImage;
use crate::index::{build_index, knn, DescriptorDB, IndexError, MatchHypothesis};
use crate::kdtree::KdTree;
use crate::net::{embed_image, embed_points, ImageEmbedderParams, NetError, PointEmbedderParams, TrainConfig};
use crate::pnp::{ransac_pnp, RansacConfig};
use crate::ply::PointCloud;
use crate::synth::{
    assign_submap_frames, generate_scene, label_correspondences, split_submaps, splitmix64,
    test_submap_count, LabelParams, LabeledPair, Scene, SceneConfig, Submap, SynthError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("no keypoints survive map database construction")]
    EmptyDatabase,
    #[error("no labeled pairs in the evaluation split")]
    EmptyTestSet,
    #[error("no ground-truth pose for frame {frame}")]
    MissingGroundTruth { frame: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigInvalid(msg) => PipelineError::Config(msg),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<IndexError> for PipelineError {
    fn from(e: IndexError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

/// 2D keypoint detection and patch extraction settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Detect2dConfig {
    pub n_octaves: usize,
    pub scales_per_octave: usize,
    pub contrast_threshold: f64,
    /// Patch window side at scale 1, pixels.
    pub patch_base: usize,
    /// Reject keypoints blurrier than this scale.
    pub patch_scale_cap: f64,
}

impl Default for Detect2dConfig {
    fn default() -> Self {
        Self {
            n_octaves: 4,
            scales_per_octave: 3,
            contrast_threshold: 0.02,
            patch_base: 256,
            patch_scale_cap: 4.0,
        }
    }
}

impl Detect2dConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_octaves == 0 || self.scales_per_octave == 0 {
            return Err("n_octaves and scales_per_octave must be positive".into());
        }
        if !(self.contrast_threshold > 0.0) {
            return Err(format!("contrast_threshold must be positive, got {}", self.contrast_threshold));
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

/// 3D keypoint detection and volume extraction settings for map processing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Detect3dConfig {
    #[serde(flatten)]
    pub iss: IssParams,
    /// Seed for the ground-plane RANSAC.
    pub ground_seed: u64,
    /// Neighborhood radius for point volumes, meters.
    pub volume_radius: f64,
    pub volume_min_points: usize,
    pub volume_pad: usize,
    /// Seed for volume padding; each keypoint derives its own stream.
    pub volume_seed: u64,
}

impl Default for Detect3dConfig {
    fn default() -> Self {
        Self {
            iss: IssParams::default(),
            ground_seed: 11,
            volume_radius: 1.0,
            volume_min_points: 100,
            volume_pad: 1024,
            volume_seed: 0,
        }
    }
}

impl Detect3dConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.iss.validate()?;
        if !(self.volume_radius > 0.0) {
            return Err(format!("volume_radius must be positive, got {}", self.volume_radius));
        }
        if self.volume_min_points == 0 || self.volume_pad < self.volume_min_points {
            return Err(format!(
                "need 1 <= volume_min_points <= volume_pad, got {} and {}",
                self.volume_min_points, self.volume_pad
            ));
        }
        Ok(())
    }
}

/// Descriptor matching settings for localization.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MatchConfig {
    /// Candidates retrieved per query keypoint.
    pub k: usize,
    /// Optional pre-filter: candidates farther than this descriptor distance
    /// are dropped before pose estimation. Off by default.
    pub max_descriptor_distance: Option<f64>,
    /// Keep only the strongest-response query keypoints; 0 keeps all.
    pub max_query_keypoints: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { k: 5, max_descriptor_distance: None, max_query_keypoints: 0 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if let Some(d) = self.max_descriptor_distance {
            if !(d > 0.0) {
                return Err(format!("max_descriptor_distance must be positive, got {d}"));
            }
        }
        Ok(())
    }
}

/// Success thresholds and report shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Headline precision threshold, translation meters.
    pub precision_m: f64,
    /// Headline precision threshold, rotation degrees.
    pub precision_deg: f64,
    /// Second, tighter threshold reported alongside.
    pub tight_m: f64,
    pub tight_deg: f64,
    /// Largest k in the retrieval recall table.
    pub k_max: usize,
    /// Points on the success-vs-threshold curve.
    pub curve_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            precision_m: 10.0,
            precision_deg: 45.0,
            tight_m: 0.5,
            tight_deg: 2.0,
            k_max: 5,
            curve_samples: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("precision_m", self.precision_m),
            ("precision_deg", self.precision_deg),
            ("tight_m", self.tight_m),
            ("tight_deg", self.tight_deg),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.k_max == 0 {
            return Err("k_max must be at least 1".into());
        }
        if self.curve_samples < 2 {
            return Err(format!("curve_samples must be at least 2, got {}", self.curve_samples));
        }
        Ok(())
    }
}

/// Full run configuration; every section falls back to its defaults when
/// absent from the TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub label: LabelParams,
    pub detect2d: Detect2dConfig,
    pub detect3d: Detect3dConfig,
    pub train: TrainConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = PipelineError::Config;
        self.scene.validate().map_err(|e| bad(e.to_string()))?;
        self.label.validate().map_err(bad)?;
        self.detect2d.validate().map_err(bad)?;
        self.detect3d.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        self.matching.validate().map_err(bad)?;
        self.ransac.validate().map_err(|e| bad(e.to_string()))?;
        self.eval.validate().map_err(bad)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

/// Point counts after each map-processing stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapBuildCounts {
    pub input_points: usize,
    pub after_ground_removal: usize,
    pub iss_keypoints: usize,
    pub volumes_kept: usize,
}

/// Detects 3D keypoints on the ground-removed map, extracts and embeds their
/// volumes, and indexes the descriptors. A map whose points are entirely
/// explained by the ground plane yields `EmptyDatabase`.
pub fn build_map_db(
    map: &PointCloud,
    config: &Detect3dConfig,
    point_params: &PointEmbedderParams,
) -> Result<(DescriptorDB, MapBuildCounts), PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let structures = match remove_ground_plane(map, &Vec3::z(), config.ground_seed) {
        Ok(cloud) => cloud,
        Err(Detect3dError::TooFewPointsRemaining) => return Err(PipelineError::EmptyDatabase),
        Err(e) => return Err(PipelineError::Data(e.to_string())),
    };
    let keypoints = detect_iss(&structures, &config.iss);
    let mut counts = MapBuildCounts {
        input_points: map.points.len(),
        after_ground_removal: structures.points.len(),
        iss_keypoints: keypoints.len(),
        volumes_kept: 0,
    };
    if keypoints.is_empty() {
        return Err(PipelineError::EmptyDatabase);
    }

    let tree = KdTree::from_points(&structures.points)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let mut entries = Vec::new();
    for (i, kp) in keypoints.iter().enumerate() {
        let seed = config.volume_seed ^ splitmix64(i as u64 + 1);
        let Ok(volume) = extract_volume_indexed(
            &structures.points,
            &tree,
            kp,
            config.volume_radius,
            config.volume_min_points,
            config.volume_pad,
            seed,
        ) else {
            continue;
        };
        let descriptor = embed_points(point_params, &volume)?;
        entries.push((kp.clone(), descriptor));
    }
    counts.volumes_kept = entries.len();
    if entries.is_empty() {
        return Err(PipelineError::EmptyDatabase);
    }
    let db = build_index(entries)?;
    Ok((db, counts))
}

/// Why a frame produced no pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalizationFailure {
    /// No usable 2D keypoint survived detection and patch extraction.
    NoKeypoints,
    /// Pose estimation found no consensus.
    NotEnoughInliers,
}

mod pose_as_rows {
    use super::PoseSE3;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(pose: &Option<PoseSE3>, s: S) -> Result<S::Ok, S::Error> {
        pose.as_ref().map(|p| p.to_row_major().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PoseSE3>, D::Error> {
        let rows = Option::<Vec<f64>>::deserialize(d)?;
        rows.map(|v| {
            let arr: [f64; 12] = v
                .try_into()
                .map_err(|v: Vec<f64>| D::Error::custom(format!("pose needs 12 values, got {}", v.len())))?;
            Ok(PoseSE3::from_row_major(&arr))
        })
        .transpose()
    }
}

/// Outcome of localizing one query frame. Error fields are filled during
/// evaluation, once ground truth is at hand, and only for estimated poses.
/// Wall time is reported in the text table but kept out of the JSON report
/// so reruns with equal seeds produce equal bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub frame: usize,
    #[serde(with = "pose_as_rows")]
    pub pose: Option<PoseSE3>,
    pub failure: Option<LocalizationFailure>,
    pub translation_error_m: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub inlier_count: usize,
    pub candidate_count: usize,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl LocalizationResult {
    fn failed(frame: usize, failure: LocalizationFailure, candidate_count: usize, started: Instant) -> Self {
        Self {
            frame,
            pose: None,
            failure: Some(failure),
            translation_error_m: None,
            rotation_error_deg: None,
            inlier_count: 0,
            candidate_count,
            wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
        }
    }
}

/// Localizes one query image against the map database: 2D detection, patch
/// embedding, top-K retrieval, robust pose estimation. Per-frame problems
/// are recorded as failures in the result; `Err` is reserved for broken
/// caller contracts (empty database, branch/database dimension mismatch).
///
/// Pose estimation seeds its sampler with `ransac.seed` xor a hash of the
/// frame id, so batch runs are deterministic without repeating one stream.
pub fn localize(
    frame: usize,
    query: &GrayImage,
    db: &DescriptorDB,
    image_params: &ImageEmbedderParams,
    detect: &Detect2dConfig,
    matching: &MatchConfig,
    intrinsics: &CameraIntrinsics,
    ransac: &RansacConfig,
) -> Result<LocalizationResult, PipelineError> {
    if db.is_empty() {
        return Err(PipelineError::Data("localization queried an empty database".into()));
    }
    if db.descriptor_dim() != image_params.arch().d {
        return Err(PipelineError::Data(format!(
            "image branch emits {}-d descriptors but the database stores {}-d",
            image_params.arch().d,
            db.descriptor_dim()
        )));
    }
    let started = Instant::now();

    let mut keypoints = match detect_dog_keypoints(
        query,
        detect.n_octaves,
        detect.scales_per_octave,
        detect.contrast_threshold,
    ) {
        Ok(kps) => kps,
        Err(_) => return Ok(LocalizationResult::failed(frame, LocalizationFailure::NoKeypoints, 0, started)),
    };
    if matching.max_query_keypoints > 0 && keypoints.len() > matching.max_query_keypoints {
        keypoints.sort_by(|a, b| b.response.total_cmp(&a.response));
        keypoints.truncate(matching.max_query_keypoints);
    }

    let mut embedded: Vec<(Keypoint2D, crate::net::Descriptor)> = Vec::new();
    for kp in &keypoints {
        let Ok(raw) = extract_patch(query, kp, detect.patch_base, detect.patch_scale_cap) else {
            continue;
        };
        let patch = preprocess_patch(&raw, kp);
        embedded.push((kp.clone(), embed_image(image_params, &patch)?));
    }
    if embedded.is_empty() {
        return Ok(LocalizationResult::failed(frame, LocalizationFailure::NoKeypoints, 0, started));
    }
    let candidate_count = embedded.len() * matching.k.min(db.len());

    let mut hypotheses = Vec::with_capacity(embedded.len());
    for (kp, descriptor) in &embedded {
        let mut candidates = knn(db, descriptor, matching.k)?;
        if let Some(limit) = matching.max_descriptor_distance {
            candidates.retain(|(_, dist)| *dist <= limit);
        }
        if !candidates.is_empty() {
            hypotheses.push(MatchHypothesis { query: kp.clone(), candidates });
        }
    }

    let seeded = RansacConfig { seed: ransac.seed ^ splitmix64(frame as u64 + 1), ..ransac.clone() };
    match ransac_pnp(&hypotheses, intrinsics, &seeded) {
        Ok(estimate) => Ok(LocalizationResult {
            frame,
            pose: Some(estimate.pose),
            failure: None,
            translation_error_m: None,
            rotation_error_deg: None,
            inlier_count: estimate.inliers.len(),
            candidate_count,
            wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
        }),
        Err(_) => Ok(LocalizationResult::failed(
            frame,
            LocalizationFailure::NotEnoughInliers,
            candidate_count,
            started,
        )),
    }
}

/// One sample of the success-ratio curve. Both thresholds scale together,
/// anchored so the curve passes through the headline precision pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold_m: f64,
    pub threshold_deg: f64,
    pub success_ratio: f64,
}

/// Evaluation summary over a batch of localization results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Error averages cover successfully localized frames only.
    pub averages_over_successes_only: bool,
    pub precision_m: f64,
    pub precision_deg: f64,
    pub tight_m: f64,
    pub tight_deg: f64,
    pub frames: usize,
    pub success_ratio: f64,
    pub success_ratio_tight: f64,
    pub mean_translation_error_m: Option<f64>,
    pub mean_rotation_error_deg: Option<f64>,
    /// recall@k for k = 1..len; empty when retrieval recall was not run.
    pub recall_at_k: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    pub results: Vec<LocalizationResult>,
}

fn pose_errors(estimate: &PoseSE3, truth: &PoseSE3) -> (f64, f64) {
    let t = (Vec3::from(*estimate.invert().translation()) - Vec3::from(*truth.invert().translation())).norm();
    let r = rotation_error_deg(estimate.rotation(), truth.rotation());
    (t, r)
}

/// Scores localization results against ground-truth poses: fills per-frame
/// errors, counts successes under the headline and tight thresholds, and
/// samples the success-vs-threshold curve at log-spaced thresholds.
pub fn evaluate(
    results: &[LocalizationResult],
    ground_truth: &[(usize, PoseSE3)],
    config: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    if results.is_empty() {
        return Err(PipelineError::Data("no localization results to evaluate".into()));
    }
    let truth: BTreeMap<usize, &PoseSE3> = ground_truth.iter().map(|(id, p)| (*id, p)).collect();

    let mut scored = Vec::with_capacity(results.len());
    for result in results {
        let gt = truth
            .get(&result.frame)
            .ok_or(PipelineError::MissingGroundTruth { frame: result.frame })?;
        let mut r = result.clone();
        if let Some(pose) = &r.pose {
            let (t, rot) = pose_errors(pose, gt);
            r.translation_error_m = Some(t);
            r.rotation_error_deg = Some(rot);
        }
        scored.push(r);
    }

    let succeeded = |r: &LocalizationResult, tm: f64, td: f64| {
        matches!((r.translation_error_m, r.rotation_error_deg), (Some(t), Some(rot)) if t <= tm && rot <= td)
    };
    let n = scored.len() as f64;
    let successes: Vec<&LocalizationResult> =
        scored.iter().filter(|r| succeeded(r, config.precision_m, config.precision_deg)).collect();
    let success_ratio = successes.len() as f64 / n;
    let success_ratio_tight =
        scored.iter().filter(|r| succeeded(r, config.tight_m, config.tight_deg)).count() as f64 / n;

    let (mean_t, mean_r) = if successes.is_empty() {
        (None, None)
    } else {
        let k = successes.len() as f64;
        (
            Some(successes.iter().map(|r| r.translation_error_m.unwrap()).sum::<f64>() / k),
            Some(successes.iter().map(|r| r.rotation_error_deg.unwrap()).sum::<f64>() / k),
        )
    };

    // Log-spaced translation thresholds over 0.01 m .. 100 m; the rotation
    // threshold scales proportionally so the pair sweeps one tightness axis.
    let curve = (0..config.curve_samples)
        .map(|j| {
            let f = j as f64 / (config.curve_samples - 1) as f64;
            let threshold_m = 10f64.powf(-2.0 + 4.0 * f);
            let threshold_deg = config.precision_deg * threshold_m / config.precision_m;
            let hits = scored.iter().filter(|r| succeeded(r, threshold_m, threshold_deg)).count();
            CurvePoint { threshold_m, threshold_deg, success_ratio: hits as f64 / n }
        })
        .collect();

    Ok(EvalReport {
        schema_version: 1,
        averages_over_successes_only: true,
        precision_m: config.precision_m,
        precision_deg: config.precision_deg,
        tight_m: config.tight_m,
        tight_deg: config.tight_deg,
        frames: scored.len(),
        success_ratio,
        success_ratio_tight,
        mean_translation_error_m: mean_t,
        mean_rotation_error_deg: mean_r,
        recall_at_k: Vec::new(),
        curve,
        results: scored,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable companion to the JSON document; includes wall times.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "frames evaluated: {}", self.frames);
        let _ = writeln!(
            out,
            "success ratio at ({} m, {} deg): {:.3}",
            self.precision_m, self.precision_deg, self.success_ratio
        );
        let _ = writeln!(
            out,
            "success ratio at ({} m, {} deg): {:.3}",
            self.tight_m, self.tight_deg, self.success_ratio_tight
        );
        match (self.mean_translation_error_m, self.mean_rotation_error_deg) {
            (Some(t), Some(r)) => {
                let _ = writeln!(out, "mean errors over successes: {t:.4} m, {r:.4} deg");
            }
            _ => {
                let _ = writeln!(out, "mean errors over successes: n/a (no successes)");
            }
        }
        if !self.recall_at_k.is_empty() {
            let cells: Vec<String> =
                self.recall_at_k.iter().enumerate().map(|(i, r)| format!("@{}={:.3}", i + 1, r)).collect();
            let _ = writeln!(out, "retrieval recall: {}", cells.join(" "));
        }
        let _ = writeln!(out, "frame   status      t_err_m   r_err_deg  inliers  candidates  wall_ms");
        for r in &self.results {
            let status = match (&r.pose, &r.failure) {
                (Some(_), _) => "pose",
                (None, Some(LocalizationFailure::NoKeypoints)) => "no-keypoints",
                (None, _) => "no-inliers",
            };
            let fmt_opt = |v: Option<f64>| match v {
                Some(x) => format!("{x:9.4}"),
                None => format!("{:>9}", "-"),
            };
            let _ = writeln!(
                out,
                "{:<7} {:<11} {} {}  {:>7}  {:>10}  {:>7.1}",
                r.frame,
                status,
                fmt_opt(r.translation_error_m),
                fmt_opt(r.rotation_error_deg),
                r.inlier_count,
                r.candidate_count,
                r.wall_time_ms,
            );
        }
        out
    }
}

/// Fraction of test patches whose true 3D keypoint appears among their top-k
/// retrieved candidates, for k = 1..=k_max. Identity is the exact keypoint
/// position. Non-decreasing in k by construction.
pub fn recall_at_k(
    db: &DescriptorDB,
    pairs: &[LabeledPair],
    image_params: &ImageEmbedderParams,
    k_max: usize,
) -> Result<Vec<f64>, PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::EmptyTestSet);
    }
    if k_max == 0 {
        return Err(PipelineError::Config("k_max must be at least 1".into()));
    }
    let key = |p: &crate::geometry::Point3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
    let mut hits_by_rank = vec![0usize; k_max];
    for pair in pairs {
        let descriptor = embed_image(image_params, &pair.patch)?;
        let candidates = knn(db, &descriptor, k_max)?;
        let wanted = key(&pair.keypoint3d.position);
        if let Some(rank) = candidates.iter().position(|(kp, _)| key(&kp.position) == wanted) {
            hits_by_rank[rank] += 1;
        }
    }
    let mut recall = Vec::with_capacity(k_max);
    let mut cumulative = 0usize;
    for hits in hits_by_rank {
        cumulative += hits;
        recall.push(cumulative as f64 / pairs.len() as f64);
    }
    Ok(recall)
}

/// A generated scene with its submaps and per-submap labeled pairs.
#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub scene: Scene,
    pub submaps: Vec<Submap>,
    /// `pairs[i]` belongs to `submaps[i]`.
    pub pairs: Vec<Vec<LabeledPair>>,
}

impl BuiltDataset {
    /// Splits pairs into (train, test) exactly as the dataset writer tags
    /// them: the final 10% of submaps (at least one) are the test split.
    pub fn split_pairs(&self) -> (Vec<LabeledPair>, Vec<LabeledPair>) {
        let test_from = self.submaps.len() - test_submap_count(self.submaps.len());
        let train = self.pairs[..test_from].iter().flatten().cloned().collect();
        let test = self.pairs[test_from..].iter().flatten().cloned().collect();
        (train, test)
    }

    /// Frame ids belonging to test-split submaps.
    pub fn test_frames(&self) -> Vec<usize> {
        let test_from = self.submaps.len() - test_submap_count(self.submaps.len());
        self.submaps[test_from..]
            .iter()
            .flat_map(|sm| sm.frames.iter().map(|(id, _)| *id))
            .collect()
    }
}

/// Generates a scene and labels cross-modal correspondences per submap:
/// 3D keypoints from the ground-removed map, 2D keypoints from every frame,
/// then per-submap multi-view verification.
pub fn build_dataset(config: &PipelineConfig) -> Result<BuiltDataset, PipelineError> {
    config.validate()?;
    let scene = generate_scene(&config.scene)?;

    let keypoints3d = match remove_ground_plane(&scene.map, &Vec3::z(), config.detect3d.ground_seed) {
        Ok(structures) => detect_iss(&structures, &config.detect3d.iss),
        Err(Detect3dError::TooFewPointsRemaining) => Vec::new(),
        Err(e) => return Err(PipelineError::Data(e.to_string())),
    };

    let mut keypoints2d = Vec::with_capacity(scene.images.len());
    for image in &scene.images {
        let kps = detect_dog_keypoints(
            image,
            config.detect2d.n_octaves,
            config.detect2d.scales_per_octave,
            config.detect2d.contrast_threshold,
        )
        .map_err(|e| PipelineError::Data(e.to_string()))?;
        keypoints2d.push(kps);
    }

    let submaps = split_submaps(&scene, config.scene.submap_length);
    let pairs = submaps
        .iter()
        .map(|submap| {
            label_correspondences(
                submap,
                &scene.images,
                &keypoints2d,
                &keypoints3d,
                &config.scene.intrinsics,
                &config.label,
            )
        })
        .collect();

    Ok(BuiltDataset { scene, submaps, pairs })
}

/// Groups a stored trajectory into submaps and returns the frame ids of the
/// evaluation split, mirroring `BuiltDataset::test_frames` for datasets read
/// back from disk.
pub fn test_frames_of(trajectory: &[(usize, PoseSE3)], submap_length: f64) -> Vec<usize> {
    let groups = assign_submap_frames(trajectory, submap_length);
    let test_from = groups.len() - test_submap_count(groups.len());
    groups[test_from..]
        .iter()
        .flat_map(|group| group.iter().map(|&i| trajectory[i].0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    use crate::detect2d::{Patch, PATCH_SIZE};
    use crate::detect3d::{Keypoint3D, LocalVolume};
    use crate::geometry::{look_at_pose, Mat3, Pixel2, Point3};
    use crate::net::{train_with, ImageArch, PointArch};

    fn tiny_archs(d: usize) -> (ImageArch, PointArch) {
        (
            ImageArch { conv_channels: [6, 8, 12], head_hidden: 24, d, input_side: PATCH_SIZE },
            PointArch { mlp_channels: [16, 24, 32], head_hidden: 24, d },
        )
    }

    fn noise_patch(seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels: Vec<f64> =
            (0..PATCH_SIZE * PATCH_SIZE).map(|_| rng.random_range(0.0..1.0)).collect();
        let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
        pixels.iter_mut().for_each(|p| *p -= mean);
        Patch {
            pixels,
            source_keypoint: Keypoint2D { position: Pixel2::new(64.0, 64.0), scale: 1.0, response: 0.1 },
        }
    }

    fn noise_volume(seed: u64, keypoint: Keypoint3D) -> LocalVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
        let points: Vec<Vec3> = (0..64)
            .map(|_| loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() <= 1.0 {
                    break v;
                }
            })
            .collect();
        LocalVolume { points, source_keypoint: keypoint, original_count: 64 }
    }

    fn keypoint_at(x: f64) -> Keypoint3D {
        Keypoint3D { position: Point3::new(x, 0.0, 0.0), saliency: 1.0, neighbor_count: 64 }
    }

    /// Tight point clusters (one expected keypoint each), optionally sitting
    /// on a large ground plane.
    fn cluster_cloud(n_clusters: usize, with_plane: bool) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut points = Vec::new();
        for c in 0..n_clusters {
            let center = Point3::new(8.0 * c as f64, 3.0 * (c % 2) as f64, 2.0);
            for _ in 0..150 {
                // Anisotropic spread so the scatter eigenvalues decay.
                let offset = Vec3::new(
                    rng.random_range(-0.12..0.12),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.02..0.02),
                );
                points.push(center + offset);
            }
        }
        if with_plane {
            let (x0, x1) = (-5.0, 8.0 * n_clusters as f64 + 5.0);
            let mut x = x0;
            while x <= x1 {
                let mut y = -8.0;
                while y <= 8.0 {
                    points.push(Point3::new(x, y, 0.0));
                    y += 0.4;
                }
                x += 0.4;
            }
        }
        PointCloud::new(points, "clusters").unwrap()
    }

    fn cluster_detect3d() -> Detect3dConfig {
        Detect3dConfig {
            iss: IssParams { salient_radius: 0.6, ..IssParams::default() },
            ..Detect3dConfig::default()
        }
    }

    #[test]
    fn config_toml_defaults_sections_and_rejections() {
        let empty = PipelineConfig::from_toml("").unwrap();
        assert_eq!(empty.matching.k, 5);
        assert_eq!(empty.matching.max_descriptor_distance, None);
        assert_eq!(empty.train.d, 128);
        assert_eq!(empty.eval.precision_m, 10.0);
        assert_eq!(empty.detect3d.iss.salient_radius, 1.0);
        assert_eq!(empty.label.max_pixel_dist, 3.0);

        let custom = PipelineConfig::from_toml(
            "[detect3d]\nsalient_radius = 0.6\nvolume_pad = 512\n\n\
             [match]\nk = 3\nmax_descriptor_distance = 0.7\n\n\
             [scene]\nseed = 9\n\n[ransac]\nmin_inliers = 4\n",
        )
        .unwrap();
        assert_eq!(custom.detect3d.iss.salient_radius, 0.6);
        assert_eq!(custom.detect3d.volume_pad, 512);
        assert_eq!(custom.matching.k, 3);
        assert_eq!(custom.matching.max_descriptor_distance, Some(0.7));
        assert_eq!(custom.scene.seed, 9);
        assert_eq!(custom.ransac.min_inliers, 4);

        for bad in [
            "[match]\nk = 0\n",
            "[eval]\nk_max = 0\n",
            "[train]\nd = 100\n",
            "[detect3d]\nvolume_radius = -1.0\n",
            "[label]\nmin_support_views = 0\n",
            "[detect2d]\npatch_base = 4\n",
            "not toml at all [",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml(bad), Err(PipelineError::Config(_))),
                "expected config rejection for {bad:?}"
            );
        }
    }

    #[test]
    fn map_db_counts_determinism_and_empty_inputs() {
        let cloud = cluster_cloud(5, true);
        let config = cluster_detect3d();
        let (_, point_arch) = tiny_archs(16);
        let params = PointEmbedderParams::init(point_arch, 3).unwrap();

        let (db, counts) = build_map_db(&cloud, &config, &params).unwrap();
        assert_eq!(counts.input_points, cloud.points.len());
        assert!(counts.after_ground_removal < counts.input_points);
        assert!(counts.after_ground_removal >= 5 * 150);
        assert!(counts.iss_keypoints >= 5);
        assert_eq!(counts.volumes_kept, db.len());
        assert!(db.len() >= 5);
        for (_, descriptor) in db.entries() {
            assert!((descriptor.norm() - 1.0).abs() < 1e-6);
        }

        let (db2, counts2) = build_map_db(&cloud, &config, &params).unwrap();
        assert_eq!(counts, counts2);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        db.save(&p1).unwrap();
        db2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let plane_only = cluster_cloud(0, true);
        assert!(matches!(
            build_map_db(&plane_only, &config, &params),
            Err(PipelineError::EmptyDatabase)
        ));
    }

    #[test]
    fn localize_blank_image_and_dimension_mismatch() {
        let cloud = cluster_cloud(5, true);
        let config = cluster_detect3d();
        let (image_arch, point_arch) = tiny_archs(16);
        let point_params = PointEmbedderParams::init(point_arch, 3).unwrap();
        let (db, _) = build_map_db(&cloud, &config, &point_params).unwrap();

        let image_params = ImageEmbedderParams::init(image_arch, 4).unwrap();
        let blank = GrayImage::new(64, 64, vec![0.5; 64 * 64]).unwrap();
        let result = localize(
            7,
            &blank,
            &db,
            &image_params,
            &Detect2dConfig::default(),
            &MatchConfig::default(),
            &CameraIntrinsics { fx: 32.0, fy: 32.0, cx: 32.0, cy: 32.0, width: 64, height: 64 },
            &RansacConfig::default(),
        )
        .unwrap();
        assert_eq!(result.frame, 7);
        assert!(result.pose.is_none());
        assert_eq!(result.failure, Some(LocalizationFailure::NoKeypoints));
        assert_eq!(result.candidate_count, 0);
        assert_eq!(result.inlier_count, 0);

        let (narrow_arch, _) = tiny_archs(8);
        let narrow = ImageEmbedderParams::init(narrow_arch, 4).unwrap();
        assert!(matches!(
            localize(
                0,
                &blank,
                &db,
                &narrow,
                &Detect2dConfig::default(),
                &MatchConfig::default(),
                &CameraIntrinsics { fx: 32.0, fy: 32.0, cx: 32.0, cy: 32.0, width: 64, height: 64 },
                &RansacConfig::default(),
            ),
            Err(PipelineError::Data(_))
        ));
    }

    fn rot_z_deg(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn result_with_pose(frame: usize, pose: Option<PoseSE3>) -> LocalizationResult {
        LocalizationResult {
            frame,
            pose,
            failure: None,
            translation_error_m: None,
            rotation_error_deg: None,
            inlier_count: 5,
            candidate_count: 50,
            wall_time_ms: 1.0,
        }
    }

    #[test]
    fn evaluate_thresholds_averages_and_curve() {
        let identity = PoseSE3::new(Mat3::identity(), Vec3::zeros());
        let gt: Vec<(usize, PoseSE3)> =
            (0..4).map(|i| (i, identity.clone())).collect();

        let offset_11m = PoseSE3::new(Mat3::identity(), Vec3::new(-11.0, 0.0, 0.0));
        let mut failed = result_with_pose(2, None);
        failed.failure = Some(LocalizationFailure::NotEnoughInliers);
        failed.inlier_count = 0;
        let results = vec![
            result_with_pose(0, Some(identity.clone())),
            result_with_pose(1, Some(offset_11m)),
            failed,
        ];
        let report = evaluate(&results, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(report.frames, 3);
        assert!((report.success_ratio - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.success_ratio_tight - 1.0 / 3.0).abs() < 1e-12);
        assert!(report.mean_translation_error_m.unwrap().abs() < 1e-9);
        assert!(report.mean_rotation_error_deg.unwrap().abs() < 1e-9);
        assert_eq!(report.results[1].translation_error_m.map(|t| t.round()), Some(11.0));
        assert_eq!(report.results[2].translation_error_m, None);

        let rot = rot_z_deg(5.0);
        let success_1m_5deg = PoseSE3::new(rot, -(rot * Vec3::new(1.0, 0.0, 0.0)));
        let mut failed2 = result_with_pose(1, None);
        failed2.failure = Some(LocalizationFailure::NoKeypoints);
        let mixed = vec![result_with_pose(0, Some(success_1m_5deg)), failed2];
        let report = evaluate(&mixed, &gt, &EvalConfig::default()).unwrap();
        assert!((report.success_ratio - 0.5).abs() < 1e-12);
        assert!((report.mean_translation_error_m.unwrap() - 1.0).abs() < 1e-9);
        assert!((report.mean_rotation_error_deg.unwrap() - 5.0).abs() < 1e-9);

        assert_eq!(report.curve.len(), EvalConfig::default().curve_samples);
        for pair in report.curve.windows(2) {
            assert!(pair[1].threshold_m > pair[0].threshold_m);
            assert!(pair[1].success_ratio >= pair[0].success_ratio);
        }
        assert!((report.curve.last().unwrap().success_ratio - 0.5).abs() < 1e-12);

        assert!(matches!(
            evaluate(&[result_with_pose(99, None)], &gt, &EvalConfig::default()),
            Err(PipelineError::MissingGroundTruth { frame: 99 })
        ));
        assert!(matches!(
            evaluate(&[], &gt, &EvalConfig::default()),
            Err(PipelineError::Data(_))
        ));
    }

    #[test]
    fn report_json_is_deterministic_and_excludes_wall_time() {
        let identity = PoseSE3::new(Mat3::identity(), Vec3::zeros());
        let gt = vec![(0usize, identity.clone()), (1usize, identity.clone())];
        let mut failed = result_with_pose(1, None);
        failed.failure = Some(LocalizationFailure::NotEnoughInliers);
        let results = vec![result_with_pose(0, Some(identity)), failed];

        let a = evaluate(&results, &gt, &EvalConfig::default()).unwrap().to_json();
        let b = evaluate(&results, &gt, &EvalConfig::default()).unwrap().to_json();
        assert_eq!(a, b);

        let value: serde_json::Value = serde_json::from_str(&a).unwrap();
        let rows = value["results"].as_array().unwrap();
        assert!(rows[0].get("wall_time_ms").is_none());
        assert!(rows[0]["pose"].is_array());
        assert!(rows[0]["failure"].is_null());
        assert!(rows[1]["pose"].is_null());
        assert_eq!(rows[1]["failure"], serde_json::json!("NotEnoughInliers"));
        assert!(rows[1].get("translation_error_m").is_some());

        let back: EvalReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back.frames, 2);
        assert!(back.results[0].pose.is_some());
    }

    #[test]
    fn recall_exact_match_chance_level_and_empty() {
        let (image_arch, point_arch) = tiny_archs(16);
        let image_params = ImageEmbedderParams::init(image_arch, 5).unwrap();

        let pairs: Vec<LabeledPair> = (0..5)
            .map(|i| {
                let kp = keypoint_at(i as f64);
                LabeledPair {
                    patch: noise_patch(i),
                    volume: noise_volume(i, kp.clone()),
                    keypoint2d: Keypoint2D {
                        position: Pixel2::new(10.0, 10.0),
                        scale: 1.0,
                        response: 0.1,
                    },
                    keypoint3d: kp,
                    support_views: 3,
                }
            })
            .collect();
        let entries = pairs
            .iter()
            .map(|p| (p.keypoint3d.clone(), embed_image(&image_params, &p.patch).unwrap()))
            .collect();
        let db = build_index(entries).unwrap();
        let recall = recall_at_k(&db, &pairs, &image_params, 3).unwrap();
        assert_eq!(recall[0], 1.0);
        assert_eq!(recall, vec![1.0, 1.0, 1.0]);

        let point_params = PointEmbedderParams::init(point_arch, 6).unwrap();
        let volumes: Vec<LocalVolume> =
            (0..200).map(|i| noise_volume(1000 + i, keypoint_at(i as f64))).collect();
        let entries = volumes
            .iter()
            .map(|v| (v.source_keypoint.clone(), embed_points(&point_params, v).unwrap()))
            .collect();
        let big_db = build_index(entries).unwrap();
        let chance_pairs: Vec<LabeledPair> = (0..200)
            .map(|i| LabeledPair {
                patch: noise_patch(5000 + i),
                volume: volumes[i as usize].clone(),
                keypoint2d: Keypoint2D { position: Pixel2::new(10.0, 10.0), scale: 1.0, response: 0.1 },
                keypoint3d: volumes[i as usize].source_keypoint.clone(),
                support_views: 3,
            })
            .collect();
        let recall = recall_at_k(&big_db, &chance_pairs, &image_params, 10).unwrap();
        assert!(recall[0] <= 0.03, "untrained recall@1 should sit near 1/200, got {}", recall[0]);
        for k in 1..recall.len() {
            assert!(recall[k] >= recall[k - 1], "recall must be non-decreasing");
        }

        assert!(matches!(
            recall_at_k(&big_db, &[], &image_params, 5),
            Err(PipelineError::EmptyTestSet)
        ));
    }

    #[test]
    fn test_frames_split_matches_submap_rule() {
        let trajectory: Vec<(usize, PoseSE3)> = (0..11)
            .map(|i| {
                let center = Point3::new(i as f64, 0.0, 1.5);
                (i, look_at_pose(&center, &Vec3::x(), &Vec3::z()))
            })
            .collect();
        let test = test_frames_of(&trajectory, 5.2);
        assert_eq!(test, vec![6, 7, 8, 9, 10]);

        let groups = assign_submap_frames(&trajectory, 5.2);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0], vec![0, 1, 2, 3, 4, 5]);
    }

    fn lite_config() -> PipelineConfig {
        PipelineConfig {
            scene: SceneConfig {
                seed: 5,
                n_structures: 14,
                extent: 80.0,
                points_per_m2: 48.0,
                camera_count: 28,
                camera_spacing: 1.25,
                texture_noise: 0.3,
                submap_length: 20.0,
                ..SceneConfig::default()
            },
            detect3d: Detect3dConfig {
                iss: IssParams { salient_radius: 0.6, ..IssParams::default() },
                ..Detect3dConfig::default()
            },
            matching: MatchConfig {
                k: 5,
                max_descriptor_distance: Some(0.85),
                max_query_keypoints: 80,
            },
            ransac: RansacConfig {
                reprojection_threshold: 3.0,
                confidence: 0.999,
                max_iterations: 8000,
                min_inliers: 4,
                seed: 0,
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn end_to_end_trains_localizes_and_rejects_other_scene() {
        let config = lite_config();
        let built = build_dataset(&config).unwrap();
        assert!(built.submaps.len() >= 2, "scene should split into >= 2 submaps");
        let (train_pairs, _) = built.split_pairs();
        assert!(train_pairs.len() >= 6, "need trainable pairs, got {}", train_pairs.len());

        let dataset: Vec<(Patch, LocalVolume)> =
            train_pairs.iter().map(|p| (p.patch.clone(), p.volume.clone())).collect();
        let (image_arch, point_arch) = tiny_archs(16);
        let train_config = TrainConfig { epochs: 60, batch_size: 8, seed: 1, d: 64, ..TrainConfig::default() };
        let (image_params, point_params, stats) =
            train_with(&dataset, &train_config, image_arch, point_arch).unwrap();
        let first = *stats.loss_history.first().unwrap();
        let last = *stats.loss_history.last().unwrap();
        assert!((first - (2f64).ln()).abs() < 0.2, "initial loss should sit near ln 2, got {first}");
        assert!(last < first, "training should reduce the loss ({first} -> {last})");

        let (db, counts) = build_map_db(&built.scene.map, &config.detect3d, &point_params).unwrap();
        assert!(counts.volumes_kept >= 10);

        let train_frame_ids: Vec<usize> =
            built.submaps[0].frames.iter().map(|(id, _)| *id).step_by(2).collect();
        let mut results = Vec::new();
        for &frame in &train_frame_ids {
            let result = localize(
                frame,
                &built.scene.images[frame],
                &db,
                &image_params,
                &config.detect2d,
                &config.matching,
                &config.scene.intrinsics,
                &config.ransac,
            )
            .unwrap();
            let per_query = config.matching.k.min(db.len());
            assert_eq!(result.candidate_count % per_query, 0);
            assert!(result.inlier_count <= result.candidate_count);
            assert_eq!(result.pose.is_none(), result.failure.is_some());
            results.push(result);
        }
        let successes: Vec<&LocalizationResult> =
            results.iter().filter(|r| r.pose.is_some()).collect();
        assert!(
            !successes.is_empty(),
            "at least one training-submap frame should localize; failures: {:?}",
            results.iter().map(|r| r.failure).collect::<Vec<_>>()
        );

        let report = evaluate(&results, &built.scene.trajectory, &config.eval).unwrap();
        assert!(report.success_ratio > 0.0);
        let best = report
            .results
            .iter()
            .filter_map(|r| r.translation_error_m)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1.0, "best localized frame should land within 1 m, got {best}");
        assert_eq!(report.to_json(), evaluate(&results, &built.scene.trajectory, &config.eval).unwrap().to_json());

        let again = localize(
            train_frame_ids[0],
            &built.scene.images[train_frame_ids[0]],
            &db,
            &image_params,
            &config.detect2d,
            &config.matching,
            &config.scene.intrinsics,
            &config.ransac,
        )
        .unwrap();
        let first_result = &results[0];
        assert_eq!(
            again.pose.as_ref().map(|p| p.to_row_major()),
            first_result.pose.as_ref().map(|p| p.to_row_major())
        );
        assert_eq!(again.inlier_count, first_result.inlier_count);

        let mut other = config.scene.clone();
        other.seed = 77;
        let other_scene = generate_scene(&other).unwrap();
        let cross = localize(
            14,
            &other_scene.images[14],
            &db,
            &image_params,
            &config.detect2d,
            &config.matching,
            &config.scene.intrinsics,
            &config.ransac,
        )
        .unwrap();
        assert!(cross.pose.is_none(), "frames of a different scene must not localize");
    }
}
