//! Scale-space 2D keypoint detection (difference-of-Gaussians pyramid) and
//! scale-dependent patch extraction for the image descriptor branch.
//!
//! Only the detector part of SIFT is reproduced: no orientation assignment
//! and no hand-crafted descriptor, since descriptors are learned. Patches
//! are axis-aligned windows whose side shrinks with keypoint scale.

use thiserror::Error;

use crate::geometry::Pixel2;
use crate::image::GrayImage;

/// Base blur of the first pyramid level.
pub const DOG_SIGMA0: f64 = 1.6;
/// Output patch side after rescaling.
pub const PATCH_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum Detect2dError {
    #[error("image {width}x{height} too small, need min side {min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
}

/// Why a keypoint yields no patch.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PatchRejected {
    #[error("keypoint scale exceeds the threshold")]
    ScaleTooLarge,
    #[error("patch window leaves the image bounds")]
    OutOfBounds,
}

/// A scale-space interest point in full-resolution pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint2D {
    pub position: Pixel2,
    /// Characteristic blur σ, in full-resolution pixels.
    pub scale: f64,
    /// Magnitude of the (refined) DoG extremum.
    pub response: f64,
}

/// Square window cut from the source image before rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatch {
    pub side: usize,
    pub pixels: Vec<f64>,
}

/// 128x128 zero-mean patch, the image branch input.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Row-major, PATCH_SIZE², mean subtracted.
    pub pixels: Vec<f64>,
    pub source_keypoint: Keypoint2D,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with clamped borders, on raw f64 buffers.
fn blur(width: usize, height: usize, data: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let xi = (x + t).saturating_sub(radius).min(width - 1);
                acc += w * row[xi];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let yi = (y + t).saturating_sub(radius).min(height - 1);
                acc += w * tmp[yi * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn downsample2(width: usize, height: usize, data: &[f64]) -> (usize, usize, Vec<f64>) {
    let (w2, h2) = (width / 2, height / 2);
    let mut out = Vec::with_capacity(w2 * h2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.push(data[(y * 2) * width + x * 2]);
        }
    }
    (w2, h2, out)
}

struct Octave {
    width: usize,
    height: usize,
    /// DoG layers, scales_per_octave + 2 of them.
    dog: Vec<Vec<f64>>,
    /// Gaussian level used to seed the next octave.
    seed: Vec<f64>,
}

fn build_octave(width: usize, height: usize, base: Vec<f64>, s: usize) -> Octave {
    let k = 2f64.powf(1.0 / s as f64);
    let mut gauss = Vec::with_capacity(s + 3);
    gauss.push(base);
    for i in 1..s + 3 {
        let prev_sigma = DOG_SIGMA0 * k.powi(i as i32 - 1);
        let inc = prev_sigma * (k * k - 1.0).sqrt();
        let next = blur(width, height, &gauss[i - 1], inc);
        gauss.push(next);
    }
    let dog = gauss
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| b - a).collect())
        .collect();
    Octave { width, height, dog, seed: gauss[s].clone() }
}

/// DoG keypoint detection: Gaussian pyramid, difference layers, 3x3x3
/// extrema above `contrast_threshold`, quadratic sub-voxel refinement.
pub fn detect_dog_keypoints(
    img: &GrayImage,
    n_octaves: usize,
    scales_per_octave: usize,
    contrast_threshold: f64,
) -> Result<Vec<Keypoint2D>, Detect2dError> {
    const MIN_SIDE: usize = 64;
    if img.width().min(img.height()) < MIN_SIDE {
        return Err(Detect2dError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: MIN_SIDE,
        });
    }
    let s = scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);

    let mut keypoints = Vec::new();
    let mut width = img.width();
    let mut height = img.height();
    let mut base = blur(width, height, img.data(), DOG_SIGMA0);
    for octave in 0..n_octaves {
        if width.min(height) < 16 {
            break;
        }
        let oct = build_octave(width, height, base, s);
        let step = (1usize << octave) as f64;
        for layer in 1..=s {
            scan_layer(&oct, layer, contrast_threshold, |x, y, value| {
                if let Some((dx, dy, ds, refined)) = refine(&oct, layer, x, y) {
                    let px = (x as f64 + dx) * step;
                    let py = (y as f64 + dy) * step;
                    let scale = DOG_SIGMA0 * k.powf(layer as f64 + ds) * step;
                    let in_bounds = px >= 0.0
                        && px <= (img.width() - 1) as f64
                        && py >= 0.0
                        && py <= (img.height() - 1) as f64;
                    if in_bounds {
                        keypoints.push(Keypoint2D {
                            position: Pixel2::new(px, py),
                            scale,
                            response: refined.abs().max(value.abs()),
                        });
                    }
                }
            });
        }
        let (w2, h2, next) = downsample2(width, height, &oct.seed);
        width = w2;
        height = h2;
        base = next;
    }
    Ok(keypoints)
}

/// Visits each strict 26-neighborhood extremum of one DoG layer whose
/// magnitude exceeds the threshold.
fn scan_layer(oct: &Octave, layer: usize, threshold: f64, mut visit: impl FnMut(usize, usize, f64)) {
    let (w, h) = (oct.width, oct.height);
    let val = |l: usize, x: usize, y: usize| oct.dog[l][y * w + x];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = val(layer, x, y);
            if c.abs() <= threshold {
                continue;
            }
            let mut is_max = true;
            let mut is_min = true;
            'scan: for l in layer - 1..=layer + 1 {
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        if l == layer && xx == x && yy == y {
                            continue;
                        }
                        let v = val(l, xx, yy);
                        if v >= c {
                            is_max = false;
                        }
                        if v <= c {
                            is_min = false;
                        }
                        if !is_max && !is_min {
                            break 'scan;
                        }
                    }
                }
            }
            if is_max || is_min {
                visit(x, y, c);
            }
        }
    }
}

/// Quadratic (second-order Taylor) refinement of an extremum voxel.
/// Returns sub-voxel offsets (dx, dy, ds) and the interpolated value, or
/// None when the offset is too large to trust.
fn refine(oct: &Octave, layer: usize, x: usize, y: usize) -> Option<(f64, f64, f64, f64)> {
    let w = oct.width;
    let v = |l: usize, xx: i64, yy: i64| {
        let xx = xx.clamp(0, w as i64 - 1) as usize;
        let yy = yy.clamp(0, oct.height as i64 - 1) as usize;
        oct.dog[l][yy * w + xx]
    };
    let (xi, yi) = (x as i64, y as i64);
    let c = v(layer, xi, yi);

    let gx = 0.5 * (v(layer, xi + 1, yi) - v(layer, xi - 1, yi));
    let gy = 0.5 * (v(layer, xi, yi + 1) - v(layer, xi, yi - 1));
    let gs = 0.5 * (v(layer + 1, xi, yi) - v(layer - 1, xi, yi));

    let hxx = v(layer, xi + 1, yi) + v(layer, xi - 1, yi) - 2.0 * c;
    let hyy = v(layer, xi, yi + 1) + v(layer, xi, yi - 1) - 2.0 * c;
    let hss = v(layer + 1, xi, yi) + v(layer - 1, xi, yi) - 2.0 * c;
    let hxy = 0.25 * (v(layer, xi + 1, yi + 1) - v(layer, xi - 1, yi + 1) - v(layer, xi + 1, yi - 1)
        + v(layer, xi - 1, yi - 1));
    let hxs = 0.25 * (v(layer + 1, xi + 1, yi) - v(layer + 1, xi - 1, yi) - v(layer - 1, xi + 1, yi)
        + v(layer - 1, xi - 1, yi));
    let hys = 0.25 * (v(layer + 1, xi, yi + 1) - v(layer + 1, xi, yi - 1) - v(layer - 1, xi, yi + 1)
        + v(layer - 1, xi, yi - 1));

    let h = nalgebra::Matrix3::new(hxx, hxy, hxs, hxy, hyy, hys, hxs, hys, hss);
    let g = nalgebra::Vector3::new(gx, gy, gs);
    let delta = h.lu().solve(&(-g))?;
    if delta.amax() > 1.5 {
        return None;
    }
    let refined = c + 0.5 * g.dot(&delta);
    Some((delta.x, delta.y, delta.z, refined))
}

/// Greedy non-max suppression by descending response (ties by input index):
/// a keypoint survives iff no already-kept keypoint lies within `radius` px.
pub fn nms_keypoints_2d(kps: &[Keypoint2D], radius: f64) -> Vec<Keypoint2D> {
    let mut order: Vec<usize> = (0..kps.len()).collect();
    order.sort_by(|&a, &b| kps[b].response.total_cmp(&kps[a].response).then(a.cmp(&b)));
    let r2 = radius * radius;
    let mut kept: Vec<Keypoint2D> = Vec::new();
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

/// Cuts a square window centered on the keypoint with side
/// `round(base_size / max(scale, 1))`, bilinearly sampled. Keypoints above
/// the scale threshold or windows leaving the image are rejected.
pub fn extract_patch(
    img: &GrayImage,
    kp: &Keypoint2D,
    base_size: usize,
    scale_threshold: f64,
) -> Result<RawPatch, PatchRejected> {
    if kp.scale > scale_threshold {
        return Err(PatchRejected::ScaleTooLarge);
    }
    let side = (base_size as f64 / kp.scale.max(1.0)).round() as usize;
    let half = (side as f64 - 1.0) / 2.0;
    let (u, v) = (kp.position.x, kp.position.y);
    if u - half < 0.0
        || v - half < 0.0
        || u + half > (img.width() - 1) as f64
        || v + half > (img.height() - 1) as f64
    {
        return Err(PatchRejected::OutOfBounds);
    }
    let mut pixels = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            pixels.push(img.bilinear(u - half + i as f64, v - half + j as f64));
        }
    }
    Ok(RawPatch { side, pixels })
}

/// Bilinear resize to 128x128 followed by mean subtraction.
pub fn preprocess_patch(raw: &RawPatch, source: &Keypoint2D) -> Patch {
    assert!(raw.side >= 8, "raw patch side {} below minimum", raw.side);
    let n = PATCH_SIZE;
    let ratio = raw.side as f64 / n as f64;
    let sample = |x: f64, y: f64| -> f64 {
        let x = x.clamp(0.0, (raw.side - 1) as f64);
        let y = y.clamp(0.0, (raw.side - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(raw.side - 1);
        let y1 = (y0 + 1).min(raw.side - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = raw.pixels[y0 * raw.side + x0] * (1.0 - fx) + raw.pixels[y0 * raw.side + x1] * fx;
        let bot = raw.pixels[y1 * raw.side + x0] * (1.0 - fx) + raw.pixels[y1 * raw.side + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut pixels = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            // Center-aligned mapping: the identity when raw.side == 128.
            let x = (i as f64 + 0.5) * ratio - 0.5;
            let y = (j as f64 + 0.5) * ratio - 0.5;
            pixels.push(sample(x, y));
        }
    }
    let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
    for p in &mut pixels {
        *p -= mean;
    }
    Patch { pixels, source_keypoint: source.clone() }
}
