//! Patch descriptor branch: three conv→ReLU→2x-avgpool blocks, global
//! average pooling, a two-layer affine head, L2 normalization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    affine_backward, affine_forward, avgpool2_backward, avgpool2_forward, conv3x3_backward_input,
    conv3x3_backward_params, conv3x3_forward, gap_backward, gap_forward, l2_normalize_backward,
    l2_normalize_with_norm, relu_backward_inplace, relu_forward_inplace,
};
use super::tensor::{AffineLayer, ConvLayer, Tensor};
use super::{ensure_finite, Descriptor, NetError};
use crate::detect2d::{Patch, PATCH_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageArch {
    pub conv_channels: [usize; 3],
    pub head_hidden: usize,
    /// Descriptor dimension.
    pub d: usize,
    /// Expected square input side; must be a multiple of 8 (three 2x pools).
    pub input_side: usize,
}

impl Default for ImageArch {
    fn default() -> Self {
        Self { conv_channels: [16, 32, 64], head_hidden: 64, d: 128, input_side: PATCH_SIZE }
    }
}

impl ImageArch {
    pub fn with_descriptor_dim(d: usize) -> Self {
        Self { d, ..Self::default() }
    }

    fn check(&self) -> Result<(), NetError> {
        let ok = self.input_side >= 8
            && self.input_side % 8 == 0
            && self.conv_channels.iter().all(|&c| c > 0)
            && self.head_hidden > 0
            && self.d > 0;
        if ok {
            Ok(())
        } else {
            Err(NetError::ShapeMismatch { context: format!("unusable image arch {self:?}") })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedderParams {
    arch: ImageArch,
    conv: [ConvLayer; 3],
    head_hidden: AffineLayer,
    head_out: AffineLayer,
}

impl ImageEmbedderParams {
    pub fn init(arch: ImageArch, seed: u64) -> Result<Self, NetError> {
        arch.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = arch.conv_channels;
        Ok(Self {
            conv: [
                ConvLayer::init(c1, 1, &mut rng),
                ConvLayer::init(c2, c1, &mut rng),
                ConvLayer::init(c3, c2, &mut rng),
            ],
            head_hidden: AffineLayer::init(arch.head_hidden, c3, &mut rng),
            head_out: AffineLayer::init(arch.d, arch.head_hidden, &mut rng),
            arch,
        })
    }

    pub fn arch(&self) -> &ImageArch {
        &self.arch
    }

    /// Same-shape zeroed copy, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            conv: [self.conv[0].zeros_like(), self.conv[1].zeros_like(), self.conv[2].zeros_like()],
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
        }
    }

    /// All trainable tensors in a fixed, named order. Optimizer state and
    /// checkpoint records follow this order exactly.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.kernel", &self.conv[0].kernel),
            ("conv1.bias", &self.conv[0].bias),
            ("conv2.kernel", &self.conv[1].kernel),
            ("conv2.bias", &self.conv[1].bias),
            ("conv3.kernel", &self.conv[2].kernel),
            ("conv3.bias", &self.conv[2].bias),
            ("head1.weight", &self.head_hidden.weight),
            ("head1.bias", &self.head_hidden.bias),
            ("head2.weight", &self.head_out.weight),
            ("head2.bias", &self.head_out.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let [c1, c2, c3] = &mut self.conv;
        vec![
            ("conv1.kernel", &mut c1.kernel),
            ("conv1.bias", &mut c1.bias),
            ("conv2.kernel", &mut c2.kernel),
            ("conv2.bias", &mut c2.bias),
            ("conv3.kernel", &mut c3.kernel),
            ("conv3.bias", &mut c3.bias),
            ("head1.weight", &mut self.head_hidden.weight),
            ("head1.bias", &mut self.head_hidden.bias),
            ("head2.weight", &mut self.head_out.weight),
            ("head2.bias", &mut self.head_out.bias),
        ]
    }

    /// Rebuilds parameters from named checkpoint tensors; channel widths
    /// and the descriptor dimension come from the stored shapes. The input
    /// side is not recorded (global average pooling makes the weights
    /// side-agnostic), so the standard patch side is assumed.
    pub(crate) fn from_named(mut tensors: BTreeMap<String, Tensor>) -> Result<Self, NetError> {
        let mut take = |name: &str| {
            tensors.remove(name).ok_or_else(|| NetError::Checkpoint(format!("missing tensor {name}")))
        };
        let conv = [
            ConvLayer::from_tensors(take("conv1.kernel")?, take("conv1.bias")?, "conv1")?,
            ConvLayer::from_tensors(take("conv2.kernel")?, take("conv2.bias")?, "conv2")?,
            ConvLayer::from_tensors(take("conv3.kernel")?, take("conv3.bias")?, "conv3")?,
        ];
        let head_hidden = AffineLayer::from_tensors(take("head1.weight")?, take("head1.bias")?, "head1")?;
        let head_out = AffineLayer::from_tensors(take("head2.weight")?, take("head2.bias")?, "head2")?;
        if let Some(extra) = tensors.keys().next() {
            return Err(NetError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let chain_ok = conv[0].ci() == 1
            && conv[1].ci() == conv[0].co()
            && conv[2].ci() == conv[1].co()
            && head_hidden.in_dim() == conv[2].co()
            && head_out.in_dim() == head_hidden.out_dim();
        if !chain_ok {
            return Err(NetError::ShapeMismatch { context: "image layer widths do not chain".into() });
        }
        let arch = ImageArch {
            conv_channels: [conv[0].co(), conv[1].co(), conv[2].co()],
            head_hidden: head_hidden.out_dim(),
            d: head_out.out_dim(),
            input_side: PATCH_SIZE,
        };
        Ok(Self { arch, conv, head_hidden, head_out })
    }
}

/// Forward activations kept for the backward pass.
pub(crate) struct ImageTrace {
    /// Input plane stack of each conv block (block 0 holds the patch).
    block_in: [Vec<f64>; 3],
    /// Post-ReLU conv output of each block.
    act: [Vec<f64>; 3],
    gap_out: Vec<f64>,
    /// Post-ReLU head hidden layer.
    hidden: Vec<f64>,
    pub y: Vec<f64>,
    norm: f64,
}

pub(crate) fn forward(params: &ImageEmbedderParams, pixels: &[f64]) -> Result<ImageTrace, NetError> {
    let arch = &params.arch;
    let side = arch.input_side;
    if pixels.len() != side * side {
        return Err(NetError::ShapeMismatch {
            context: format!("patch has {} pixels, expected {side}x{side}", pixels.len()),
        });
    }
    const STAGES: [&str; 3] = ["image conv1", "image conv2", "image conv3"];
    let mut cur = pixels.to_vec();
    let mut cur_c = 1usize;
    let mut cur_side = side;
    let mut block_in: [Vec<f64>; 3] = Default::default();
    let mut act: [Vec<f64>; 3] = Default::default();
    for b in 0..3 {
        let layer = &params.conv[b];
        let co = layer.co();
        let mut out = vec![0.0; co * cur_side * cur_side];
        conv3x3_forward(&cur, cur_c, cur_side, cur_side, layer.kernel.data(), layer.bias.data(), co, &mut out);
        relu_forward_inplace(&mut out);
        ensure_finite(&out, STAGES[b])?;
        let mut pooled = vec![0.0; co * (cur_side / 2) * (cur_side / 2)];
        avgpool2_forward(&out, co, cur_side, cur_side, &mut pooled);
        block_in[b] = std::mem::replace(&mut cur, pooled);
        act[b] = out;
        cur_c = co;
        cur_side /= 2;
    }
    let mut gap_out = vec![0.0; cur_c];
    gap_forward(&cur, cur_c, cur_side * cur_side, &mut gap_out);
    let mut hidden = vec![0.0; arch.head_hidden];
    affine_forward(
        &gap_out,
        params.head_hidden.weight.data(),
        params.head_hidden.bias.data(),
        arch.head_hidden,
        cur_c,
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
    ensure_finite(&prenorm, "image head")?;
    let (y, norm) = l2_normalize_with_norm(&prenorm);
    Ok(ImageTrace { block_in, act, gap_out, hidden, y, norm })
}

/// Accumulates parameter gradients for one patch into `grads` (a
/// zeros_like-shaped container). The patch itself is data, so no input
/// gradient is produced.
pub(crate) fn backward(
    params: &ImageEmbedderParams,
    trace: &ImageTrace,
    grad_y: &[f64],
    grads: &mut ImageEmbedderParams,
) {
    let arch = &params.arch;
    let mut grad_pre = vec![0.0; arch.d];
    l2_normalize_backward(&trace.y, trace.norm, grad_y, &mut grad_pre);

    let c3 = arch.conv_channels[2];
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

    let mut grad_gap = vec![0.0; c3];
    affine_backward(
        &trace.gap_out,
        params.head_hidden.weight.data(),
        &grad_hidden,
        arch.head_hidden,
        c3,
        &mut grad_gap,
        grads.head_hidden.weight.data_mut(),
        grads.head_hidden.bias.data_mut(),
    );

    let s3 = arch.input_side / 8;
    let mut grad_pooled = vec![0.0; c3 * s3 * s3];
    gap_backward(&grad_gap, c3, s3 * s3, &mut grad_pooled);

    for b in (0..3).rev() {
        let side = arch.input_side >> b;
        let co = arch.conv_channels[b];
        let ci = if b == 0 { 1 } else { arch.conv_channels[b - 1] };
        let mut grad_act = vec![0.0; co * side * side];
        avgpool2_backward(&grad_pooled, co, side, side, &mut grad_act);
        relu_backward_inplace(&trace.act[b], &mut grad_act);
        conv3x3_backward_params(
            &grad_act,
            co,
            side,
            side,
            &trace.block_in[b],
            ci,
            grads.conv[b].kernel.data_mut(),
            grads.conv[b].bias.data_mut(),
        );
        if b > 0 {
            grad_pooled = vec![0.0; ci * side * side];
            conv3x3_backward_input(&grad_act, co, side, side, params.conv[b].kernel.data(), ci, &mut grad_pooled);
        }
    }
}

/// Embeds a zero-mean patch into a unit-norm descriptor.
pub fn embed_image(params: &ImageEmbedderParams, patch: &Patch) -> Result<Descriptor, NetError> {
    let trace = forward(params, &patch.pixels)?;
    Ok(Descriptor { values: trace.y })
}
