//! Absolute camera pose from 2D-3D correspondences: an EPnP solver and a
//! RANSAC wrapper that consumes multi-candidate match hypotheses.

use nalgebra as na;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{orthonormalize, project, CameraIntrinsics, Mat3, Pixel2, Point3, PoseSE3, Vec3};
use crate::index::MatchHypothesis;

type DMat = na::DMatrix<f64>;
type DVec = na::DVector<f64>;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("recovered pose places the scene behind the camera")]
    BehindCamera,
    #[error("not enough inliers: found {found}, need {needed}")]
    NotEnoughInliers { found: usize, needed: usize },
    #[error("every sampled minimal set was degenerate")]
    AllSamplesDegenerate,
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Pixel2,
    pub point: Point3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier threshold in pixels.
    pub reprojection_threshold: f64,
    /// Target probability that at least one all-inlier sample was drawn.
    pub confidence: f64,
    pub max_iterations: u64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            reprojection_threshold: 5.0,
            confidence: 0.99,
            max_iterations: 5000,
            min_inliers: 12,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PoseError> {
        if !(self.reprojection_threshold > 0.0 && self.reprojection_threshold.is_finite()) {
            return Err(PoseError::InvalidConfig(format!(
                "reprojection_threshold must be positive, got {}",
                self.reprojection_threshold
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PoseError::InvalidConfig(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        if self.max_iterations == 0 {
            return Err(PoseError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.min_inliers < 4 {
            return Err(PoseError::InvalidConfig(format!(
                "min_inliers must be at least 4 (the minimal sample size), got {}",
                self.min_inliers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: PoseSE3,
    /// Indices into the hypothesis list, ascending.
    pub inliers: Vec<usize>,
    pub mean_reprojection_error: f64,
}

/// Pixel distance between the observed pixel and the projection of the 3D
/// point under `pose`. Points behind the camera map to +inf.
pub fn reprojection_error(pose: &PoseSE3, corr: &Correspondence, k: &CameraIntrinsics) -> f64 {
    match project(&corr.point, pose, k) {
        Some(px) => (px - corr.pixel).norm(),
        None => f64::INFINITY,
    }
}

const PLANARITY_RATIO: f64 = 1e-8;

struct ControlFrame {
    /// 4 control points in general position, 3 for near-planar scenes.
    control: Vec<Point3>,
    /// Barycentric coordinates, one row of `control.len()` weights per point.
    alphas: Vec<Vec<f64>>,
}

fn choose_control_frame(points: &[Point3]) -> Result<ControlFrame, PoseError> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p.coords - centroid;
        scatter += d * d.transpose();
    }
    scatter /= n;
    let eig = na::SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes: Vec<Vec3> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    if lambda[0] <= 1e-12 || lambda[1] <= PLANARITY_RATIO * lambda[0] {
        return Err(PoseError::DegenerateConfiguration(
            "3D points are collinear or coincident".into(),
        ));
    }
    let planar = lambda[2] <= PLANARITY_RATIO * lambda[0];

    let c0 = Point3::from(centroid);
    let mut control = vec![c0];
    let spread = if planar { 2 } else { 3 };
    for j in 0..spread {
        control.push(Point3::from(centroid + lambda[j].sqrt() * axes[j]));
    }

    let alphas = if planar {
        let d1 = control[1] - control[0];
        let d2 = control[2] - control[0];
        let g = na::Matrix2::new(d1.dot(&d1), d1.dot(&d2), d1.dot(&d2), d2.dot(&d2));
        let g_inv = g.try_inverse().ok_or_else(|| {
            PoseError::DegenerateConfiguration("planar control points are degenerate".into())
        })?;
        points
            .iter()
            .map(|p| {
                let d = p - control[0];
                let w = g_inv * na::Vector2::new(d1.dot(&d), d2.dot(&d));
                vec![1.0 - w.x - w.y, w.x, w.y]
            })
            .collect()
    } else {
        let basis = Mat3::from_columns(&[
            control[1] - control[0],
            control[2] - control[0],
            control[3] - control[0],
        ]);
        let inv = basis.try_inverse().ok_or_else(|| {
            PoseError::DegenerateConfiguration("control point basis is rank deficient".into())
        })?;
        points
            .iter()
            .map(|p| {
                let w = inv * (p - control[0]);
                vec![1.0 - w.x - w.y - w.z, w.x, w.y, w.z]
            })
            .collect()
    };
    Ok(ControlFrame { control, alphas })
}

/// Accumulates Mᵀ M for the 2n×3L projection system without storing M.
fn normal_matrix(corrs: &[Correspondence], alphas: &[Vec<f64>], k: &CameraIntrinsics) -> DMat {
    let l = alphas[0].len();
    let dim = 3 * l;
    let mut mtm = DMat::zeros(dim, dim);
    let mut row_u = vec![0.0; dim];
    let mut row_v = vec![0.0; dim];
    for (corr, alpha) in corrs.iter().zip(alphas) {
        for (j, &a) in alpha.iter().enumerate() {
            row_u[3 * j] = a * k.fx;
            row_u[3 * j + 1] = 0.0;
            row_u[3 * j + 2] = a * (k.cx - corr.pixel.x);
            row_v[3 * j] = 0.0;
            row_v[3 * j + 1] = a * k.fy;
            row_v[3 * j + 2] = a * (k.cy - corr.pixel.y);
        }
        for row in [&row_u, &row_v] {
            for a in 0..dim {
                if row[a] == 0.0 {
                    continue;
                }
                for b in a..dim {
                    mtm[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            mtm[(a, b)] = mtm[(b, a)];
        }
    }
    mtm
}

const SOLVE_MAX: usize = 6;

/// Solves the n×n system a·x = b (n ≤ 6, both row-major, overwritten) by
/// Gaussian elimination with partial pivoting. None when a pivot collapses
/// relative to the matrix scale.
fn solve_dense_small(n: usize, a: &mut [f64], b: &mut [f64]) -> Option<()> {
    debug_assert!(n <= SOLVE_MAX && a.len() >= n * n && b.len() >= n);
    let scale = a[..n * n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) {
        return None;
    }
    let floor = scale * 1e-14;
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() <= floor {
            return None;
        }
        if piv != col {
            for c in col..n {
                a.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        let inv = 1.0 / a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in (col + 1)..n {
            s -= a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    Some(())
}

/// Least squares for a tall system (rows×cols, cols ≤ 5) via normal
/// equations; None when singular beyond repair.
fn lsq_small(rows: usize, cols: usize, m: &[f64], rhs: &[f64]) -> Option<[f64; 5]> {
    debug_assert!(cols <= 5 && m.len() >= rows * cols);
    let mut ata = [0.0f64; 25];
    let mut atb = [0.0f64; 5];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for a in 0..cols {
            atb[a] += row[a] * rhs[r];
            for b in a..cols {
                ata[a * cols + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            ata[a * cols + b] = ata[b * cols + a];
        }
    }
    solve_dense_small(cols, &mut ata, &mut atb)?;
    Some(atb)
}

/// Gauss-Newton refinement of the null-space mixing weights against the
/// control-point pairwise distance constraints. 10 iterations, early exit
/// once the residual is at numerical zero.
fn refine_betas(dv: &[Vec<Vec3>], rho: &[f64], beta: &mut [f64]) {
    let nb = beta.len();
    let converged = (1e-13 * rho.iter().sum::<f64>()).powi(2);
    for _ in 0..10 {
        let mut jtj = [0.0f64; 16];
        let mut jtr = [0.0f64; 4];
        let mut jrow = [0.0f64; 4];
        let mut residual = 0.0;
        for (p, &dist_sq) in rho.iter().enumerate() {
            let mut cur = Vec3::zeros();
            for (k, b) in beta.iter().enumerate() {
                cur += *b * dv[k][p];
            }
            let r = dist_sq - cur.norm_squared();
            residual += r * r;
            for (k, j) in jrow[..nb].iter_mut().enumerate() {
                *j = 2.0 * cur.dot(&dv[k][p]);
            }
            for a in 0..nb {
                jtr[a] += jrow[a] * r;
                for b in 0..nb {
                    jtj[a * nb + b] += jrow[a] * jrow[b];
                }
            }
        }
        if residual < converged {
            return;
        }
        for d in 0..nb {
            jtj[d * nb + d] *= 1.0 + 1e-12;
        }
        if solve_dense_small(nb, &mut jtj, &mut jtr).is_none() {
            return;
        }
        for (b, d) in beta.iter_mut().zip(jtr.iter()) {
            *b += d;
        }
    }
}

/// Candidate mixing weights from the linearized distance constraints.
///
/// The unknown camera-frame control points are expressed as a combination of
/// the null-space basis vectors; each case solves for a subset of the
/// quadratic terms and backs out the weights, mirroring the three published
/// closed-form cases. With very few points the null space is genuinely
/// 4-dimensional and the leading-basis cases can start the refinement in the
/// wrong basin, so `enriched` additionally seeds every axis, axis pair and
/// axis triple.
fn beta_seeds(dv: &[Vec<Vec3>], rho: &[f64], enriched: bool) -> Vec<Vec<f64>> {
    let nb = dv.len();
    let np = rho.len();
    let dot = |a: usize, b: usize, p: usize| dv[a][p].dot(&dv[b][p]);
    let mut seeds: Vec<Vec<f64>> = Vec::new();

    // Case 1: x ≈ β0·v0 dominant, cross terms β0βk linearized.
    {
        let mut m = [0.0f64; 6 * 4];
        for p in 0..np {
            m[p * nb] = dot(0, 0, p);
            for k in 1..nb {
                m[p * nb + k] = 2.0 * dot(0, k, p);
            }
        }
        if let Some(x) = lsq_small(np, nb, &m, rho) {
            let mut beta = vec![0.0; nb];
            if x[0] < 0.0 {
                beta[0] = (-x[0]).sqrt();
                for k in 1..nb {
                    beta[k] = -x[k] / beta[0].max(1e-12);
                }
            } else {
                beta[0] = x[0].sqrt();
                for k in 1..nb {
                    beta[k] = x[k] / beta[0].max(1e-12);
                }
            }
            seeds.push(beta);
        }
    }

    // Case 2: two active weights a, b with all three quadratic terms solved.
    let case2 = |a: usize, b: usize, seeds: &mut Vec<Vec<f64>>| {
        let mut m = [0.0f64; 6 * 3];
        for p in 0..np {
            m[p * 3] = dot(a, a, p);
            m[p * 3 + 1] = 2.0 * dot(a, b, p);
            m[p * 3 + 2] = dot(b, b, p);
        }
        if let Some(x) = lsq_small(np, 3, &m, rho) {
            let mut beta = vec![0.0; nb];
            if x[0] < 0.0 {
                beta[a] = (-x[0]).sqrt();
                beta[b] = if x[2] < 0.0 { (-x[2]).sqrt() } else { 0.0 };
            } else {
                beta[a] = x[0].sqrt();
                beta[b] = if x[2] > 0.0 { x[2].sqrt() } else { 0.0 };
            }
            if x[1] < 0.0 {
                beta[a] = -beta[a];
            }
            seeds.push(beta);
        }
    };

    // Case 3: three active weights a, b, c; five quadratic terms.
    let case3 = |a: usize, b: usize, c: usize, seeds: &mut Vec<Vec<f64>>| {
        let mut m = [0.0f64; 6 * 5];
        for p in 0..np {
            m[p * 5] = dot(a, a, p);
            m[p * 5 + 1] = 2.0 * dot(a, b, p);
            m[p * 5 + 2] = dot(b, b, p);
            m[p * 5 + 3] = 2.0 * dot(a, c, p);
            m[p * 5 + 4] = 2.0 * dot(b, c, p);
        }
        if let Some(x) = lsq_small(np, 5, &m, rho) {
            let mut beta = vec![0.0; nb];
            if x[0] < 0.0 {
                beta[a] = (-x[0]).sqrt();
                beta[b] = if x[2] < 0.0 { (-x[2]).sqrt() } else { 0.0 };
            } else {
                beta[a] = x[0].sqrt();
                beta[b] = if x[2] > 0.0 { x[2].sqrt() } else { 0.0 };
            }
            if x[1] < 0.0 {
                beta[a] = -beta[a];
            }
            beta[c] = x[3] / beta[a].abs().max(1e-12).copysign(beta[a]);
            seeds.push(beta);
        }
    };

    if nb >= 2 {
        if enriched {
            for a in 0..nb {
                for b in (a + 1)..nb {
                    case2(a, b, &mut seeds);
                }
            }
        } else {
            case2(0, 1, &mut seeds);
        }
    }
    if nb >= 3 && np >= 5 {
        if enriched {
            for a in 0..nb {
                for b in (a + 1)..nb {
                    for c in (b + 1)..nb {
                        case3(a, b, c, &mut seeds);
                    }
                }
            }
        } else {
            case3(0, 1, 2, &mut seeds);
        }
    }
    if enriched {
        for axis in 0..nb {
            let num: f64 = (0..np).map(|p| dot(axis, axis, p) * rho[p]).sum();
            let den: f64 = (0..np).map(|p| dot(axis, axis, p).powi(2)).sum();
            if den > 1e-18 && num > 0.0 {
                let mut beta = vec![0.0; nb];
                beta[axis] = (num / den).sqrt();
                seeds.push(beta);
            }
        }
    }
    seeds
}

/// Rigid alignment (rotation + translation) mapping `world` onto `cam` in
/// least squares, with the reflection case folded back to a proper rotation.
fn rigid_align(world: &[Point3], cam: &[Vec3]) -> Option<(Mat3, Vec3)> {
    let n = world.len() as f64;
    let wbar = world.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let cbar = cam.iter().fold(Vec3::zeros(), |a, v| a + v) / n;
    let mut h = Mat3::zeros();
    for (p, c) in world.iter().zip(cam) {
        h += (p.coords - wbar) * (c - cbar).transpose();
    }
    let svd = na::SVD::new(h, true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut r = v_t.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut flipped = v_t;
        for c in 0..3 {
            flipped[(2, c)] = -flipped[(2, c)];
        }
        r = flipped.transpose() * u.transpose();
    }
    let r = orthonormalize(&r);
    let t = cbar - r * wbar;
    Some((r, t))
}

/// EPnP: estimates the world-to-camera pose from 2D-3D correspondences.
///
/// Expresses the points in barycentric coordinates of 4 control points
/// (3 for near-planar scenes), solves the projection system's null space,
/// fixes the mixing weights from the control-point distance constraints with
/// Gauss-Newton polish, and recovers [R|t] by rigid alignment. Among the
/// candidate weight solutions the one with the lowest total reprojection
/// error wins.
pub fn epnp(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<PoseSE3, PoseError> {
    epnp_impl(corrs, k, true)
}

/// `thorough` controls the seed set for ≤5-point problems. The RANSAC loop
/// turns it off for its minimal samples: a missed basin there only costs one
/// wasted iteration, which the confidence bound already accounts for, while
/// the cheap seed set runs several times faster.
fn epnp_impl(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    thorough: bool,
) -> Result<PoseSE3, PoseError> {
    if corrs.len() < 4 {
        return Err(PoseError::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {}",
            corrs.len()
        )));
    }
    let points: Vec<Point3> = corrs.iter().map(|c| c.point).collect();
    let frame = choose_control_frame(&points)?;
    let l = frame.control.len();
    let dim = 3 * l;
    let nb = if l == 4 { 4 } else { 2 };

    let mtm = normal_matrix(corrs, &frame.alphas, k);
    let eig = na::SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let basis: Vec<DVec> = order[..nb]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if basis.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(PoseError::DegenerateConfiguration(
            "projection system decomposition failed".into(),
        ));
    }

    let pairs: Vec<(usize, usize)> = (0..l)
        .flat_map(|i| ((i + 1)..l).map(move |j| (i, j)))
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (frame.control[i] - frame.control[j]).norm_squared())
        .collect();
    let dv: Vec<Vec<Vec3>> = basis
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|&(i, j)| {
                    Vec3::new(
                        v[3 * i] - v[3 * j],
                        v[3 * i + 1] - v[3 * j + 1],
                        v[3 * i + 2] - v[3 * j + 2],
                    )
                })
                .collect()
        })
        .collect();

    let mut best: Option<(f64, Mat3, Vec3)> = None;
    let mut saw_behind = false;
    let mut evaluated: Vec<Vec<f64>> = Vec::new();
    for mut beta in beta_seeds(&dv, &rho, thorough && corrs.len() <= 5 && l == 4) {
        refine_betas(&dv, &rho, &mut beta);
        let scale: f64 = beta.iter().map(|b| b.abs()).sum();
        if scale < 1e-12 {
            continue;
        }
        // The weights are sign-symmetric (the depth flip below absorbs the
        // difference), so canonicalize before duplicate-basin pruning.
        let lead = beta
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if beta[lead] < 0.0 {
            for b in &mut beta {
                *b = -*b;
            }
        }
        if evaluated
            .iter()
            .any(|e| e.iter().zip(&beta).map(|(a, b)| (a - b).abs()).sum::<f64>() < 1e-8 * scale)
        {
            continue;
        }
        evaluated.push(beta.clone());
        // Camera-frame control points, then all camera-frame points.
        let mut ccs = vec![Vec3::zeros(); l];
        for (j, cc) in ccs.iter_mut().enumerate() {
            for (b, v) in beta.iter().zip(&basis) {
                *cc += *b * Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]);
            }
        }
        let mut pcs: Vec<Vec3> = frame
            .alphas
            .iter()
            .map(|alpha| {
                alpha
                    .iter()
                    .zip(&ccs)
                    .fold(Vec3::zeros(), |acc, (a, cc)| acc + *a * cc)
            })
            .collect();
        // The null-space solution is determined up to sign; flip once if the
        // scene landed behind the camera.
        if pcs.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            for p in &mut pcs {
                *p = -*p;
            }
        }
        let Some((r, t)) = rigid_align(&points, &pcs) else { continue };
        let pose = PoseSE3::new(r, t);
        let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / points.len() as f64;
        if pose.transform(&Point3::from(centroid)).z <= 0.0 {
            saw_behind = true;
            continue;
        }
        let total: f64 = corrs.iter().map(|c| reprojection_error(&pose, c, k)).sum();
        if best.as_ref().is_none_or(|(b, _, _)| total < *b) {
            best = Some((total, r, t));
        }
    }
    match best {
        Some((_, r, t)) => Ok(PoseSE3::new(r, t)),
        None if saw_behind => Err(PoseError::BehindCamera),
        None => Err(PoseError::DegenerateConfiguration(
            "no usable null-space combination".into(),
        )),
    }
}

/// Inliers of `pose`: hypotheses whose best candidate reprojects strictly
/// under the threshold. Returns (hypothesis index, its best correspondence,
/// that correspondence's error), ascending by hypothesis index.
fn inlier_picks(
    hypotheses: &[MatchHypothesis],
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    threshold: f64,
) -> Vec<(usize, Correspondence, f64)> {
    let mut picks = Vec::new();
    for (i, hyp) in hypotheses.iter().enumerate() {
        let mut best: Option<(Correspondence, f64)> = None;
        for (kp, _) in &hyp.candidates {
            let corr = Correspondence { pixel: hyp.query.position, point: kp.position };
            let err = reprojection_error(pose, &corr, k);
            if best.as_ref().is_none_or(|(_, b)| err < *b) {
                best = Some((corr, err));
            }
        }
        if let Some((corr, err)) = best {
            if err < threshold {
                picks.push((i, corr, err));
            }
        }
    }
    picks
}

fn adaptive_bound(inliers: usize, total: usize, k_eff: f64, confidence: f64, cap: u64) -> u64 {
    if inliers == 0 || total == 0 {
        return cap;
    }
    let p_good = ((inliers as f64 / total as f64) / k_eff).powi(4);
    if p_good >= 1.0 {
        return 0;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let needed = ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil();
    if needed.is_finite() && needed >= 0.0 && needed < cap as f64 {
        needed as u64
    } else {
        cap
    }
}

/// Robust pose estimation over multi-candidate hypotheses.
///
/// Each iteration samples 4 distinct query keypoints, picks one candidate
/// per keypoint uniformly from its list, fits EPnP to the minimal set and
/// scores it by inlier count (ties: lower mean reprojection error, then the
/// earlier iteration). Iterations draw their randomness from a per-iteration
/// stream of the seeded generator, so results do not depend on scheduling.
/// The best model is re-estimated on all its inliers before being returned.
pub fn ransac_pnp(
    hypotheses: &[MatchHypothesis],
    k: &CameraIntrinsics,
    config: &RansacConfig,
) -> Result<PoseEstimate, PoseError> {
    config.validate()?;
    let eligible: Vec<usize> = (0..hypotheses.len())
        .filter(|&i| !hypotheses[i].candidates.is_empty())
        .collect();
    if eligible.len() < 4 {
        return Err(PoseError::AllSamplesDegenerate);
    }
    let k_eff = eligible
        .iter()
        .map(|&i| hypotheses[i].candidates.len() as f64)
        .sum::<f64>()
        / eligible.len() as f64;

    let mut best: Option<(PoseSE3, usize, f64, u64)> = None;
    let mut bound = config.max_iterations;
    let mut it: u64 = 0;
    while it < bound {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(it.wrapping_add(1));
        let picked = rand::seq::index::sample(&mut rng, eligible.len(), 4);
        let mut sample = Vec::with_capacity(4);
        for pi in picked.iter() {
            let hyp = &hypotheses[eligible[pi]];
            let ci = rng.random_range(0..hyp.candidates.len());
            sample.push(Correspondence {
                pixel: hyp.query.position,
                point: hyp.candidates[ci].0.position,
            });
        }
        if let Ok(pose) = epnp_impl(&sample, k, false) {
            let picks = inlier_picks(hypotheses, &pose, k, config.reprojection_threshold);
            let count = picks.len();
            let err_sum: f64 = picks.iter().map(|(_, _, e)| e).sum();
            let improves = match &best {
                None => true,
                Some((_, bc, be, _)) => count > *bc || (count == *bc && err_sum < *be),
            };
            if improves {
                best = Some((pose, count, err_sum, it));
                bound = adaptive_bound(
                    count,
                    hypotheses.len(),
                    k_eff,
                    config.confidence,
                    config.max_iterations,
                );
            }
        }
        it += 1;
    }

    let Some((pose0, count0, err0, _)) = best else {
        return Err(PoseError::AllSamplesDegenerate);
    };
    if count0 < config.min_inliers {
        return Err(PoseError::NotEnoughInliers { found: count0, needed: config.min_inliers });
    }

    let picks0 = inlier_picks(hypotheses, &pose0, k, config.reprojection_threshold);
    debug_assert_eq!(picks0.len(), count0);
    let _ = err0;
    let refit: Vec<Correspondence> = picks0.iter().map(|(_, c, _)| *c).collect();
    // Keep the refit only when it is at least as good under the same
    // ordering used for model selection; a stray borderline inlier can
    // otherwise drag the re-estimate away from an exact minimal fit.
    let (pose, picks) = match epnp(&refit, k) {
        Ok(refined) => {
            let picks1 = inlier_picks(hypotheses, &refined, k, config.reprojection_threshold);
            let sum0: f64 = picks0.iter().map(|(_, _, e)| e).sum();
            let sum1: f64 = picks1.iter().map(|(_, _, e)| e).sum();
            if picks1.len() > picks0.len()
                || (picks1.len() == picks0.len() && sum1 <= sum0)
            {
                (refined, picks1)
            } else {
                (pose0, picks0)
            }
        }
        Err(_) => (pose0, picks0),
    };
    let mean = picks.iter().map(|(_, _, e)| e).sum::<f64>() / picks.len() as f64;
    Ok(PoseEstimate {
        pose,
        inliers: picks.iter().map(|(i, _, _)| *i).collect(),
        mean_reprojection_error: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect2d::Keypoint2D;
    use crate::detect3d::Keypoint3D;
    use crate::geometry::{back_project, rot_x, rot_y, rot_z, rotation_error_deg};
    use rand_distr::{Distribution, Normal};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics { fx: 320.0, fy: 320.0, cx: 256.0, cy: 192.0, width: 512, height: 384 }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let r = rot_z(rng.random_range(-180.0..180.0))
            * rot_y(rng.random_range(-80.0..80.0))
            * rot_x(rng.random_range(-80.0..80.0));
        let center = Vec3::new(
            rng.random_range(-8.0..8.0),
            rng.random_range(-8.0..8.0),
            rng.random_range(-8.0..8.0),
        );
        PoseSE3::new(r, -r * center)
    }

    /// World points that project exactly to uniformly drawn pixels at
    /// uniformly drawn depths.
    fn exact_scene(
        n: usize,
        pose: &PoseSE3,
        k: &CameraIntrinsics,
        depth: std::ops::Range<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Correspondence> {
        (0..n)
            .map(|_| {
                let px = Pixel2::new(
                    rng.random_range(10.0..k.width as f64 - 10.0),
                    rng.random_range(10.0..k.height as f64 - 10.0),
                );
                let z = rng.random_range(depth.clone());
                Correspondence { pixel: px, point: back_project(&px, z, pose, k) }
            })
            .collect()
    }

    fn pose_errors(est: &PoseSE3, truth: &PoseSE3) -> (f64, f64) {
        (
            rotation_error_deg(est.rotation(), truth.rotation()),
            (est.translation() - truth.translation()).norm(),
        )
    }

    #[test]
    fn epnp_recovers_known_pose_from_eight_points() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = random_pose(&mut rng);
        let corrs = exact_scene(8, &pose, &k, 3.0..20.0, &mut rng);
        let est = epnp(&corrs, &k).unwrap();
        let (rot_err, t_err) = pose_errors(&est, &pose);
        assert!(rot_err <= 0.01, "rotation error {rot_err} deg");
        assert!(t_err <= 1e-4, "translation error {t_err} m");
    }

    #[test]
    fn epnp_identity_pose_points_ahead() {
        let k = camera();
        let identity = PoseSE3::identity();
        let mut corrs = Vec::new();
        for (i, &z) in [4.0, 5.5, 7.0, 8.5].iter().enumerate() {
            for (j, &x) in [-1.5, 0.2, 1.8].iter().enumerate() {
                let y = 0.7 * (i as f64) - 0.9 * (j as f64) + 0.3;
                let p = Point3::new(x, y, z);
                let px = project(&p, &identity, &k).unwrap();
                corrs.push(Correspondence { pixel: px, point: p });
            }
        }
        let est = epnp(&corrs, &k).unwrap();
        let (rot_err, t_err) = pose_errors(&est, &identity);
        assert!(rot_err <= 0.01, "rotation error {rot_err} deg");
        assert!(t_err <= 1e-4, "translation error {t_err} m");
    }

    #[test]
    fn epnp_rejects_collinear_points() {
        let k = camera();
        let identity = PoseSE3::identity();
        let corrs: Vec<Correspondence> = (0..4)
            .map(|i| {
                let p = Point3::new(i as f64 * 0.5 - 0.75, 0.1 * i as f64 - 0.15, 5.0 + i as f64);
                Correspondence { pixel: project(&p, &identity, &k).unwrap(), point: p }
            })
            .collect();
        // Points lie on a single 3D line.
        assert!(matches!(epnp(&corrs, &k), Err(PoseError::DegenerateConfiguration(_))));
    }

    #[test]
    fn epnp_rejects_fewer_than_four_points() {
        let k = camera();
        let corrs = vec![
            Correspondence { pixel: Pixel2::new(100.0, 100.0), point: Point3::new(0.0, 0.0, 5.0) };
            3
        ];
        assert!(matches!(epnp(&corrs, &k), Err(PoseError::DegenerateConfiguration(_))));
    }

    #[test]
    fn epnp_handles_planar_scenes() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let inv = pose.invert();
            // A tilted plane expressed in the camera frame, then moved to world.
            let mut corrs = Vec::new();
            for gx in 0..3 {
                for gy in 0..3 {
                    let x = (gx as f64 - 1.0) * 1.4 + rng.random_range(-0.2..0.2);
                    let y = (gy as f64 - 1.0) * 1.1 + rng.random_range(-0.2..0.2);
                    let z = 6.0 + 0.25 * x - 0.15 * y;
                    let world = inv.transform(&Point3::new(x, y, z));
                    let px = project(&world, &pose, &k).unwrap();
                    corrs.push(Correspondence { pixel: px, point: world });
                }
            }
            let est = epnp(&corrs, &k).unwrap();
            let (rot_err, t_err) = pose_errors(&est, &pose);
            assert!(rot_err <= 0.01, "rotation error {rot_err} deg");
            assert!(t_err <= 1e-4, "translation error {t_err} m");
        }
    }

    #[test]
    fn epnp_thousand_random_noise_free_problems() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst_rot = 0.0f64;
        let mut worst_t = 0.0f64;
        for trial in 0..1000 {
            let pose = random_pose(&mut rng);
            let n = rng.random_range(4..=50);
            let corrs = exact_scene(n, &pose, &k, 2.0..50.0, &mut rng);
            let est = epnp(&corrs, &k)
                .unwrap_or_else(|e| panic!("trial {trial} (n={n}) failed: {e}"));
            let (rot_err, t_err) = pose_errors(&est, &pose);
            assert!(rot_err <= 0.01, "trial {trial} (n={n}): rotation error {rot_err} deg");
            assert!(t_err <= 1e-4, "trial {trial} (n={n}): translation error {t_err} m");
            worst_rot = worst_rot.max(rot_err);
            worst_t = worst_t.max(t_err);
        }
        assert!(worst_rot <= 0.01 && worst_t <= 1e-4);
    }

    #[test]
    fn epnp_noise_robustness_medians() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rot_errs = Vec::new();
        let mut t_errs = Vec::new();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let mut corrs = exact_scene(20, &pose, &k, 2.0..20.0, &mut rng);
            for c in &mut corrs {
                c.pixel.x += noise.sample(&mut rng);
                c.pixel.y += noise.sample(&mut rng);
            }
            let est = epnp(&corrs, &k).unwrap();
            let (rot_err, t_err) = pose_errors(&est, &pose);
            rot_errs.push(rot_err);
            t_errs.push(t_err);
        }
        rot_errs.sort_by(f64::total_cmp);
        t_errs.sort_by(f64::total_cmp);
        let median_rot = rot_errs[100];
        let median_t = t_errs[100];
        assert!(median_rot <= 0.5, "median rotation error {median_rot} deg");
        assert!(median_t <= 0.05, "median translation error {median_t} m");
    }

    #[test]
    fn reprojection_error_examples() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng);
        let corrs = exact_scene(1, &pose, &k, 5.0..6.0, &mut rng);
        assert!(reprojection_error(&pose, &corrs[0], &k) <= 1e-9);

        let offset = Correspondence {
            pixel: Pixel2::new(corrs[0].pixel.x + 3.0, corrs[0].pixel.y + 4.0),
            point: corrs[0].point,
        };
        assert!((reprojection_error(&pose, &offset, &k) - 5.0).abs() <= 1e-9);

        let behind = Correspondence {
            pixel: Pixel2::new(100.0, 100.0),
            point: back_project(&Pixel2::new(200.0, 150.0), -3.0, &pose, &k),
        };
        assert!(reprojection_error(&pose, &behind, &k).is_infinite());
    }

    fn kp3(p: Point3) -> Keypoint3D {
        Keypoint3D { position: p, saliency: 1.0, neighbor_count: 8 }
    }

    fn kp2(px: Pixel2) -> Keypoint2D {
        Keypoint2D { position: px, scale: 1.0, response: 1.0 }
    }

    /// 40 hypotheses whose top-5 lists contain the true match at a random
    /// rank plus 40 pure-decoy hypotheses.
    fn decoy_scene(
        pose: &PoseSE3,
        k: &CameraIntrinsics,
        rng: &mut ChaCha8Rng,
    ) -> Vec<MatchHypothesis> {
        let random_point = |rng: &mut ChaCha8Rng| {
            let px = Pixel2::new(
                rng.random_range(10.0..k.width as f64 - 10.0),
                rng.random_range(10.0..k.height as f64 - 10.0),
            );
            back_project(&px, rng.random_range(2.0..30.0), pose, k)
        };
        let mut hyps = Vec::new();
        for _ in 0..40 {
            let px = Pixel2::new(
                rng.random_range(10.0..k.width as f64 - 10.0),
                rng.random_range(10.0..k.height as f64 - 10.0),
            );
            let true_point = back_project(&px, rng.random_range(2.0..30.0), pose, k);
            let rank = rng.random_range(0..5);
            let mut candidates = Vec::new();
            for c in 0..5 {
                let p = if c == rank { true_point } else { random_point(rng) };
                candidates.push((kp3(p), 0.1 * (c + 1) as f64));
            }
            hyps.push(MatchHypothesis { query: kp2(px), candidates });
        }
        for _ in 0..40 {
            let px = Pixel2::new(
                rng.random_range(10.0..k.width as f64 - 10.0),
                rng.random_range(10.0..k.height as f64 - 10.0),
            );
            let candidates = (0..5)
                .map(|c| (kp3(random_point(rng)), 0.1 * (c + 1) as f64))
                .collect();
            hyps.push(MatchHypothesis { query: kp2(px), candidates });
        }
        hyps
    }

    #[test]
    fn ransac_recovers_pose_among_decoys() {
        let k = camera();
        // Candidate ambiguity (true match hidden among 5) makes all-inlier
        // samples rare, so the iteration budget is far above the default.
        let config_base = RansacConfig {
            reprojection_threshold: 5.0,
            confidence: 0.999,
            max_iterations: 120_000,
            min_inliers: 12,
            seed: 0,
        };
        let mut successes = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let pose = random_pose(&mut rng);
            let hyps = decoy_scene(&pose, &k, &mut rng);
            let config = RansacConfig { seed: trial, ..config_base.clone() };
            if let Ok(est) = ransac_pnp(&hyps, &k, &config) {
                let (rot_err, t_err) = pose_errors(&est.pose, &pose);
                if rot_err <= 0.1 && t_err <= 0.01 && est.inliers.len() >= 40 {
                    successes += 1;
                }
            }
        }
        assert!(successes >= 99, "only {successes}/100 trials recovered the pose");
    }

    #[test]
    fn ransac_all_decoys_reports_not_enough_inliers() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pose = random_pose(&mut rng);
        let mut hyps = decoy_scene(&pose, &k, &mut rng);
        hyps.drain(0..40); // keep only the pure-decoy half
        let config = RansacConfig { max_iterations: 2000, ..RansacConfig::default() };
        assert!(matches!(
            ransac_pnp(&hyps, &k, &config),
            Err(PoseError::NotEnoughInliers { .. })
        ));
    }

    #[test]
    fn ransac_minimal_four_perfect_hypotheses() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let pose = random_pose(&mut rng);
        let corrs = exact_scene(4, &pose, &k, 3.0..15.0, &mut rng);
        let hyps: Vec<MatchHypothesis> = corrs
            .iter()
            .map(|c| MatchHypothesis {
                query: kp2(c.pixel),
                candidates: vec![(kp3(c.point), 0.1)],
            })
            .collect();
        let config = RansacConfig { min_inliers: 4, ..RansacConfig::default() };
        let est = ransac_pnp(&hyps, &k, &config).unwrap();
        assert_eq!(est.inliers, vec![0, 1, 2, 3]);
        let (rot_err, t_err) = pose_errors(&est.pose, &pose);
        assert!(rot_err <= 0.01 && t_err <= 1e-4);
    }

    #[test]
    fn ransac_inlier_set_is_consistent_both_ways() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let pose = random_pose(&mut rng);
        let mut hyps = decoy_scene(&pose, &k, &mut rng);
        // Perturb true pixels a little so the threshold actually separates.
        let noise = Normal::new(0.0, 1.0).unwrap();
        for hyp in hyps.iter_mut().take(40) {
            hyp.query.position.x += noise.sample(&mut rng);
            hyp.query.position.y += noise.sample(&mut rng);
        }
        let config = RansacConfig {
            confidence: 0.9999,
            max_iterations: 60_000,
            ..RansacConfig::default()
        };
        let est = ransac_pnp(&hyps, &k, &config).unwrap();
        assert!(est.inliers.len() >= config.min_inliers);
        for (i, hyp) in hyps.iter().enumerate() {
            let best = hyp
                .candidates
                .iter()
                .map(|(kp, _)| {
                    reprojection_error(
                        &est.pose,
                        &Correspondence { pixel: hyp.query.position, point: kp.position },
                        &k,
                    )
                })
                .fold(f64::INFINITY, f64::min);
            if est.inliers.contains(&i) {
                assert!(best < config.reprojection_threshold);
            } else {
                assert!(best >= config.reprojection_threshold);
            }
        }
        let mean_check = est
            .inliers
            .iter()
            .map(|&i| {
                hyps[i]
                    .candidates
                    .iter()
                    .map(|(kp, _)| {
                        reprojection_error(
                            &est.pose,
                            &Correspondence { pixel: hyps[i].query.position, point: kp.position },
                            &k,
                        )
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / est.inliers.len() as f64;
        assert!((mean_check - est.mean_reprojection_error).abs() <= 1e-12);
    }

    #[test]
    fn ransac_is_deterministic_for_a_fixed_seed() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let pose = random_pose(&mut rng);
        let hyps = decoy_scene(&pose, &k, &mut rng);
        let config = RansacConfig {
            confidence: 0.9999,
            max_iterations: 60_000,
            seed: 4,
            ..RansacConfig::default()
        };
        let a = ransac_pnp(&hyps, &k, &config).unwrap();
        let b = ransac_pnp(&hyps, &k, &config).unwrap();
        assert_eq!(a.pose.to_row_major(), b.pose.to_row_major());
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.mean_reprojection_error, b.mean_reprojection_error);
    }

    #[test]
    fn ransac_rejects_bad_config() {
        let k = camera();
        let hyps: Vec<MatchHypothesis> = Vec::new();
        let config = RansacConfig { confidence: 1.5, ..RansacConfig::default() };
        assert!(matches!(ransac_pnp(&hyps, &k, &config), Err(PoseError::InvalidConfig(_))));
    }
}
