//! Forward and backward kernels shared by both branches: 3x3 same-padding
//! convolution, 2x average pooling, global average pooling, affine layers,
//! ReLU and L2 normalization.
//!
//! Convolutions are written as per-tap row updates (contiguous axpy/dot
//! passes) rather than per-pixel kernel loops; on one core this is ~5x
//! faster and keeps the summation order fixed, which the determinism
//! contract relies on.

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-tap row ranges for a 3x3 kernel with zero padding 1: output rows
/// `y0..y1`, columns `x0..x1`, reading the input shifted by (dy, dx).
#[inline]
fn tap_ranges(h: usize, w: usize, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
    let y0 = if dy < 0 { 1 } else { 0 };
    let y1 = if dy > 0 { h - 1 } else { h };
    let x0 = if dx < 0 { 1 } else { 0 };
    let x1 = if dx > 0 { w - 1 } else { w };
    (y0, y1, x0, x1)
}

/// 3x3 convolution, stride 1, zero padding 1. `input` is `ci` planes of
/// h*w, `kernel` is [co, ci, 3, 3] row-major, `out` is `co` planes.
pub fn conv3x3_forward(
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    bias: &[f64],
    co: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), ci * h * w);
    debug_assert_eq!(kernel.len(), co * ci * 9);
    debug_assert_eq!(out.len(), co * h * w);
    for oc in 0..co {
        let out_plane = &mut out[oc * h * w..(oc + 1) * h * w];
        out_plane.fill(bias[oc]);
        for ic in 0..ci {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wgt = kernel[kbase + ky * 3 + kx];
                    let (y0, y1, x0, x1) = tap_ranges(h, w, dy, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src = &in_plane[sy * w + sx..sy * w + sx + (x1 - x0)];
                        axpy(dst, src, wgt);
                    }
                }
            }
        }
    }
}

/// Gradient of conv3x3 w.r.t. its input, accumulated into `grad_in`.
pub fn conv3x3_backward_input(
    grad_out: &[f64],
    co: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    ci: usize,
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_in.len(), ci * h * w);
    for oc in 0..co {
        let go_plane = &grad_out[oc * h * w..(oc + 1) * h * w];
        for ic in 0..ci {
            let gi_plane = &mut grad_in[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wgt = kernel[kbase + ky * 3 + kx];
                    let (y0, y1, x0, x1) = tap_ranges(h, w, dy, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        let dst = &mut gi_plane[sy * w + sx..sy * w + sx + (x1 - x0)];
                        let src = &go_plane[y * w + x0..y * w + x1];
                        axpy(dst, src, wgt);
                    }
                }
            }
        }
    }
}

/// Gradients of conv3x3 w.r.t. kernel and bias, accumulated in place.
pub fn conv3x3_backward_params(
    grad_out: &[f64],
    co: usize,
    h: usize,
    w: usize,
    input: &[f64],
    ci: usize,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    for oc in 0..co {
        let go_plane = &grad_out[oc * h * w..(oc + 1) * h * w];
        grad_bias[oc] += go_plane.iter().sum::<f64>();
        for ic in 0..ci {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (y0, y1, x0, x1) = tap_ranges(h, w, dy, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx = (x0 as isize + dx) as usize;
                        acc += dot(
                            &go_plane[y * w + x0..y * w + x1],
                            &in_plane[sy * w + sx..sy * w + sx + (x1 - x0)],
                        );
                    }
                    grad_kernel[kbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// 2x2 average pooling with stride 2 over `c` planes; h and w must be even.
pub fn avgpool2_forward(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (h2, w2) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), c * h2 * w2);
    for pc in 0..c {
        let ip = &input[pc * h * w..(pc + 1) * h * w];
        let op = &mut out[pc * h2 * w2..(pc + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                let i = (y * 2) * w + x * 2;
                op[y * w2 + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + w] + ip[i + w + 1]);
            }
        }
    }
}

pub fn avgpool2_backward(grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    for pc in 0..c {
        let gop = &grad_out[pc * h2 * w2..(pc + 1) * h2 * w2];
        let gip = &mut grad_in[pc * h * w..(pc + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let g = 0.25 * gop[y * w2 + x];
                let i = (y * 2) * w + x * 2;
                gip[i] += g;
                gip[i + 1] += g;
                gip[i + w] += g;
                gip[i + w + 1] += g;
            }
        }
    }
}

/// Global average pooling: one mean per plane.
pub fn gap_forward(input: &[f64], c: usize, hw: usize, out: &mut [f64]) {
    for pc in 0..c {
        out[pc] = input[pc * hw..(pc + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
}

pub fn gap_backward(grad_out: &[f64], c: usize, hw: usize, grad_in: &mut [f64]) {
    for pc in 0..c {
        let g = grad_out[pc] / hw as f64;
        for v in &mut grad_in[pc * hw..(pc + 1) * hw] {
            *v += g;
        }
    }
}

/// y = W x + b with W row-major [out_dim, in_dim].
pub fn affine_forward(x: &[f64], weight: &[f64], bias: &[f64], out_dim: usize, in_dim: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(weight.len(), out_dim * in_dim);
    for o in 0..out_dim {
        out[o] = bias[o] + dot(&weight[o * in_dim..(o + 1) * in_dim], x);
    }
}

/// Accumulates affine gradients; `grad_x` may be empty when the input
/// gradient is not needed (first layer).
pub fn affine_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    out_dim: usize,
    in_dim: usize,
    grad_x: &mut [f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) {
    for o in 0..out_dim {
        let g = grad_out[o];
        grad_bias[o] += g;
        axpy(&mut grad_weight[o * in_dim..(o + 1) * in_dim], x, g);
        if !grad_x.is_empty() {
            axpy(grad_x, &weight[o * in_dim..(o + 1) * in_dim], g);
        }
    }
}

pub fn relu_forward_inplace(x: &mut [f64]) {
    for v in x {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward output was clamped
/// (the subgradient at exactly zero is taken as zero).
pub fn relu_backward_inplace(forward_out: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(forward_out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// v / ‖v‖, with the exact-zero vector mapping to e₁.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    l2_normalize_with_norm(v).0
}

pub(crate) fn l2_normalize_with_norm(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        let mut e1 = vec![0.0; v.len()];
        e1[0] = 1.0;
        return (e1, 0.0);
    }
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Pullback of y = v/‖v‖: grad_v = (grad_y − y·(yᵀ grad_y)) / ‖v‖.
/// The e₁ fallback (norm 0) has zero gradient by definition.
pub(crate) fn l2_normalize_backward(y: &[f64], norm: f64, grad_y: &[f64], grad_v: &mut [f64]) {
    if norm == 0.0 {
        grad_v.fill(0.0);
        return;
    }
    let proj = dot(y, grad_y);
    for i in 0..y.len() {
        grad_v[i] = (grad_y[i] - y[i] * proj) / norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv3x3(input: &[f64], ci: usize, h: usize, w: usize, kernel: &[f64], bias: &[f64], co: usize) -> Vec<f64> {
        let mut out = vec![0.0; co * h * w];
        for oc in 0..co {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[oc];
                    for ic in 0..ci {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let kv = kernel[(oc * ci + ic) * 9 + ((ky + 1) * 3 + kx + 1) as usize];
                                acc += kv * input[ic * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[oc * h * w + (y * w as isize + x) as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ci, co, h, w) = (3, 4, 10, 7);
        let input: Vec<f64> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = vec![0.0; co * h * w];
        conv3x3_forward(&input, ci, h, w, &kernel, &bias, co, &mut fast);
        let slow = naive_conv3x3(&input, ci, h, w, &kernel, &bias, co);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ci, co, h, w) = (2, 3, 6, 5);
        let input: Vec<f64> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.0; co];
        // Scalar objective: sum of conv output weighted by fixed coefficients.
        let coeff: Vec<f64> = (0..co * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |inp: &[f64]| {
            let mut out = vec![0.0; co * h * w];
            conv3x3_forward(inp, ci, h, w, &kernel, &bias, co, &mut out);
            dot(&out, &coeff)
        };
        let mut grad_in = vec![0.0; ci * h * w];
        conv3x3_backward_input(&coeff, co, h, w, &kernel, ci, &mut grad_in);
        let mut probe = input.clone();
        for i in (0..input.len()).step_by(7) {
            let h_step = 1e-6;
            probe[i] = input[i] + h_step;
            let fp = f(&probe);
            probe[i] = input[i] - h_step;
            let fm = f(&probe);
            probe[i] = input[i];
            let numeric = (fp - fm) / (2.0 * h_step);
            assert!((grad_in[i] - numeric).abs() < 1e-6, "entry {i}");
        }
    }

    #[test]
    fn conv_param_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ci, co, h, w) = (2, 2, 5, 6);
        let input: Vec<f64> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coeff: Vec<f64> = (0..co * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |ker: &[f64], b: &[f64]| {
            let mut out = vec![0.0; co * h * w];
            conv3x3_forward(&input, ci, h, w, ker, b, co, &mut out);
            dot(&out, &coeff)
        };
        let mut gk = vec![0.0; kernel.len()];
        let mut gb = vec![0.0; co];
        conv3x3_backward_params(&coeff, co, h, w, &input, ci, &mut gk, &mut gb);
        let h_step = 1e-6;
        let mut probe = kernel.clone();
        for i in 0..kernel.len() {
            probe[i] = kernel[i] + h_step;
            let fp = f(&probe, &bias);
            probe[i] = kernel[i] - h_step;
            let fm = f(&probe, &bias);
            probe[i] = kernel[i];
            assert!((gk[i] - (fp - fm) / (2.0 * h_step)).abs() < 1e-6);
        }
        let mut bprobe = bias.clone();
        for i in 0..co {
            bprobe[i] = bias[i] + h_step;
            let fp = f(&kernel, &bprobe);
            bprobe[i] = bias[i] - h_step;
            let fm = f(&kernel, &bprobe);
            bprobe[i] = bias[i];
            assert!((gb[i] - (fp - fm) / (2.0 * h_step)).abs() < 1e-6);
        }
    }

    #[test]
    fn avgpool_and_gap_roundtrip_gradients() {
        let (c, h, w) = (2, 4, 4);
        let input: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let mut pooled = vec![0.0; c * 4];
        avgpool2_forward(&input, c, h, w, &mut pooled);
        assert_eq!(pooled[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);

        let mut grad_in = vec![0.0; c * h * w];
        let grad_out = vec![1.0; c * 4];
        avgpool2_backward(&grad_out, c, h, w, &mut grad_in);
        assert!(grad_in.iter().all(|&g| g == 0.25));

        let mut gap = vec![0.0; c];
        gap_forward(&input, c, h * w, &mut gap);
        assert_eq!(gap[0], input[..16].iter().sum::<f64>() / 16.0);
    }

    #[test]
    fn l2_normalize_unit_and_fallback() {
        let y = l2_normalize(&[3.0, 4.0]);
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        let e1 = l2_normalize(&[0.0, 0.0, 0.0]);
        assert_eq!(e1, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coeff: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, norm) = l2_normalize_with_norm(&v);
        let mut grad_v = vec![0.0; 5];
        l2_normalize_backward(&y, norm, &coeff, &mut grad_v);
        let h_step = 1e-6;
        let mut probe = v.clone();
        for i in 0..5 {
            probe[i] = v[i] + h_step;
            let fp = dot(&l2_normalize(&probe), &coeff);
            probe[i] = v[i] - h_step;
            let fm = dot(&l2_normalize(&probe), &coeff);
            probe[i] = v[i];
            assert!((grad_v[i] - (fp - fm) / (2.0 * h_step)).abs() < 1e-8);
        }
    }
}
