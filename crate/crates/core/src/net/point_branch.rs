//! Volume descriptor branch: a shared per-point affine+ReLU stack, a
//! symmetric max-pool over points, a two-layer affine head, L2
//! normalization. The max-pool makes the output exactly invariant to the
//! ordering of input points.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    affine_backward, affine_forward, l2_normalize_backward, l2_normalize_with_norm,
    relu_backward_inplace, relu_forward_inplace,
};
use super::tensor::{AffineLayer, Tensor};
use super::{ensure_finite, Descriptor, NetError};
use crate::detect3d::LocalVolume;
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointArch {
    /// Widths of the three shared per-point layers (input is xyz).
    pub mlp_channels: [usize; 3],
    pub head_hidden: usize,
    pub d: usize,
}

impl Default for PointArch {
    fn default() -> Self {
        Self { mlp_channels: [32, 64, 128], head_hidden: 64, d: 128 }
    }
}

impl PointArch {
    pub fn with_descriptor_dim(d: usize) -> Self {
        Self { d, ..Self::default() }
    }

    fn check(&self) -> Result<(), NetError> {
        let ok = self.mlp_channels.iter().all(|&c| c > 0) && self.head_hidden > 0 && self.d > 0;
        if ok {
            Ok(())
        } else {
            Err(NetError::ShapeMismatch { context: format!("unusable point arch {self:?}") })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEmbedderParams {
    arch: PointArch,
    mlp: [AffineLayer; 3],
    head_hidden: AffineLayer,
    head_out: AffineLayer,
}

impl PointEmbedderParams {
    pub fn init(arch: PointArch, seed: u64) -> Result<Self, NetError> {
        arch.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = arch.mlp_channels;
        Ok(Self {
            mlp: [
                AffineLayer::init(c1, 3, &mut rng),
                AffineLayer::init(c2, c1, &mut rng),
                AffineLayer::init(c3, c2, &mut rng),
            ],
            head_hidden: AffineLayer::init(arch.head_hidden, c3, &mut rng),
            head_out: AffineLayer::init(arch.d, arch.head_hidden, &mut rng),
            arch,
        })
    }

    pub fn arch(&self) -> &PointArch {
        &self.arch
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            mlp: [self.mlp[0].zeros_like(), self.mlp[1].zeros_like(), self.mlp[2].zeros_like()],
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("mlp1.weight", &self.mlp[0].weight),
            ("mlp1.bias", &self.mlp[0].bias),
            ("mlp2.weight", &self.mlp[1].weight),
            ("mlp2.bias", &self.mlp[1].bias),
            ("mlp3.weight", &self.mlp[2].weight),
            ("mlp3.bias", &self.mlp[2].bias),
            ("head1.weight", &self.head_hidden.weight),
            ("head1.bias", &self.head_hidden.bias),
            ("head2.weight", &self.head_out.weight),
            ("head2.bias", &self.head_out.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let [m1, m2, m3] = &mut self.mlp;
        vec![
            ("mlp1.weight", &mut m1.weight),
            ("mlp1.bias", &mut m1.bias),
            ("mlp2.weight", &mut m2.weight),
            ("mlp2.bias", &mut m2.bias),
            ("mlp3.weight", &mut m3.weight),
            ("mlp3.bias", &mut m3.bias),
            ("head1.weight", &mut self.head_hidden.weight),
            ("head1.bias", &mut self.head_hidden.bias),
            ("head2.weight", &mut self.head_out.weight),
            ("head2.bias", &mut self.head_out.bias),
        ]
    }

    pub(crate) fn from_named(mut tensors: BTreeMap<String, Tensor>) -> Result<Self, NetError> {
        let mut take = |name: &str| {
            tensors.remove(name).ok_or_else(|| NetError::Checkpoint(format!("missing tensor {name}")))
        };
        let mlp = [
            AffineLayer::from_tensors(take("mlp1.weight")?, take("mlp1.bias")?, "mlp1")?,
            AffineLayer::from_tensors(take("mlp2.weight")?, take("mlp2.bias")?, "mlp2")?,
            AffineLayer::from_tensors(take("mlp3.weight")?, take("mlp3.bias")?, "mlp3")?,
        ];
        let head_hidden = AffineLayer::from_tensors(take("head1.weight")?, take("head1.bias")?, "head1")?;
        let head_out = AffineLayer::from_tensors(take("head2.weight")?, take("head2.bias")?, "head2")?;
        if let Some(extra) = tensors.keys().next() {
            return Err(NetError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let chain_ok = mlp[0].in_dim() == 3
            && mlp[1].in_dim() == mlp[0].out_dim()
            && mlp[2].in_dim() == mlp[1].out_dim()
            && head_hidden.in_dim() == mlp[2].out_dim()
            && head_out.in_dim() == head_hidden.out_dim();
        if !chain_ok {
            return Err(NetError::ShapeMismatch { context: "point layer widths do not chain".into() });
        }
        let arch = PointArch {
            mlp_channels: [mlp[0].out_dim(), mlp[1].out_dim(), mlp[2].out_dim()],
            head_hidden: head_hidden.out_dim(),
            d: head_out.out_dim(),
        };
        Ok(Self { arch, mlp, head_hidden, head_out })
    }
}

pub(crate) struct PointTrace {
    /// n x 3 row-major input coordinates.
    input: Vec<f64>,
    /// Post-ReLU per-point activations of the three shared layers,
    /// n x c_k row-major.
    h: [Vec<f64>; 3],
    /// Winning point row per pooled feature (first index on ties).
    argmax: Vec<usize>,
    feat: Vec<f64>,
    hidden: Vec<f64>,
    pub y: Vec<f64>,
    norm: f64,
    n: usize,
}

pub(crate) fn forward(params: &PointEmbedderParams, points: &[Vec3]) -> Result<PointTrace, NetError> {
    let n = points.len();
    if n == 0 {
        return Err(NetError::ShapeMismatch { context: "point volume is empty".into() });
    }
    let arch = &params.arch;
    let [c1, c2, c3] = arch.mlp_channels;
    let mut input = Vec::with_capacity(n * 3);
    for p in points {
        input.extend_from_slice(&[p.x, p.y, p.z]);
    }

    let mut h: [Vec<f64>; 3] = [vec![0.0; n * c1], vec![0.0; n * c2], vec![0.0; n * c3]];
    let widths = [(3, c1), (c1, c2), (c2, c3)];
    for k in 0..3 {
        let (ci, co) = widths[k];
        let layer = &params.mlp[k];
        // Split borrows: previous activation is read, current is written.
        let (src, dst): (&[f64], &mut Vec<f64>) = if k == 0 {
            (&input, &mut h[0])
        } else {
            let (a, b) = h.split_at_mut(k);
            (&a[k - 1], &mut b[0])
        };
        for r in 0..n {
            affine_forward(
                &src[r * ci..(r + 1) * ci],
                layer.weight.data(),
                layer.bias.data(),
                co,
                ci,
                &mut dst[r * co..(r + 1) * co],
            );
        }
        relu_forward_inplace(dst);
    }
    ensure_finite(&h[2], "point mlp")?;

    let mut feat = vec![f64::NEG_INFINITY; c3];
    let mut argmax = vec![0usize; c3];
    for r in 0..n {
        let row = &h[2][r * c3..(r + 1) * c3];
        for (j, &v) in row.iter().enumerate() {
            if v > feat[j] {
                feat[j] = v;
                argmax[j] = r;
            }
        }
    }

    let mut hidden = vec![0.0; arch.head_hidden];
    affine_forward(
        &feat,
        params.head_hidden.weight.data(),
        params.head_hidden.bias.data(),
        arch.head_hidden,
        c3,
        &mut hidden,
    );
    relu_forward_inplace(&mut hidden);
    let mut prenorm = vec![0.0; arch.d];
    affine_forward(
        &hidden,
        params.head_out.weight.data(),
        params.head_out.bias.data(),
        arch.d,
        arch.head_hidden,
        &mut prenorm,
    );
    ensure_finite(&prenorm, "point head")?;
    let (y, norm) = l2_normalize_with_norm(&prenorm);
    Ok(PointTrace { input, h, argmax, feat, hidden, y, norm, n })
}

/// Accumulates parameter gradients for one volume into `grads`. Gradient
/// flows only through each feature's winning point; winners are processed
/// in ascending row order so accumulation order is fixed.
pub(crate) fn backward(
    params: &PointEmbedderParams,
    trace: &PointTrace,
    grad_y: &[f64],
    grads: &mut PointEmbedderParams,
) {
    let arch = &params.arch;
    let [c1, c2, c3] = arch.mlp_channels;
    let mut grad_pre = vec![0.0; arch.d];
    l2_normalize_backward(&trace.y, trace.norm, grad_y, &mut grad_pre);

    let mut grad_hidden = vec![0.0; arch.head_hidden];
    affine_backward(
        &trace.hidden,
        params.head_out.weight.data(),
        &grad_pre,
        arch.d,
        arch.head_hidden,
        &mut grad_hidden,
        grads.head_out.weight.data_mut(),
        grads.head_out.bias.data_mut(),
    );
    relu_backward_inplace(&trace.hidden, &mut grad_hidden);

    let mut grad_feat = vec![0.0; c3];
    affine_backward(
        &trace.feat,
        params.head_hidden.weight.data(),
        &grad_hidden,
        arch.head_hidden,
        c3,
        &mut grad_feat,
        grads.head_hidden.weight.data_mut(),
        grads.head_hidden.bias.data_mut(),
    );

    let mut winners: Vec<usize> = trace.argmax.clone();
    winners.sort_unstable();
    winners.dedup();
    debug_assert!(winners.last().is_none_or(|&r| r < trace.n));

    let mut g3 = vec![0.0; c3];
    let mut g2 = vec![0.0; c2];
    let mut g1 = vec![0.0; c1];
    for &r in &winners {
        g3.fill(0.0);
        for j in 0..c3 {
            if trace.argmax[j] == r {
                g3[j] = grad_feat[j];
            }
        }
        relu_backward_inplace(&trace.h[2][r * c3..(r + 1) * c3], &mut g3);
        g2.fill(0.0);
        affine_backward(
            &trace.h[1][r * c2..(r + 1) * c2],
            params.mlp[2].weight.data(),
            &g3,
            c3,
            c2,
            &mut g2,
            grads.mlp[2].weight.data_mut(),
            grads.mlp[2].bias.data_mut(),
        );
        relu_backward_inplace(&trace.h[1][r * c2..(r + 1) * c2], &mut g2);
        g1.fill(0.0);
        affine_backward(
            &trace.h[0][r * c1..(r + 1) * c1],
            params.mlp[1].weight.data(),
            &g2,
            c2,
            c1,
            &mut g1,
            grads.mlp[1].weight.data_mut(),
            grads.mlp[1].bias.data_mut(),
        );
        relu_backward_inplace(&trace.h[0][r * c1..(r + 1) * c1], &mut g1);
        affine_backward(
            &trace.input[r * 3..(r + 1) * 3],
            params.mlp[0].weight.data(),
            &g1,
            c1,
            3,
            &mut [],
            grads.mlp[0].weight.data_mut(),
            grads.mlp[0].bias.data_mut(),
        );
    }
}

/// Embeds a keypoint-centered point volume into a unit-norm descriptor.
pub fn embed_points(params: &PointEmbedderParams, vol: &LocalVolume) -> Result<Descriptor, NetError> {
    let trace = forward(params, &vol.points)?;
    Ok(Descriptor { values: trace.y })
}
