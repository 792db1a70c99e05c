//! Weighted soft-margin triplet loss ln(1 + e^{alpha (d_pos - d_neg)})
//! over Euclidean descriptor distances, plus the exact batch gradient of
//! both branches.

use super::{image_branch, point_branch, Descriptor, NetError};
use super::{ImageEmbedderParams, PointEmbedderParams, Triplet};

/// ln(1 + e^x) evaluated as max(x,0) + log1p(e^{-|x|}) so large positive
/// arguments cannot overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance between `a` and `b` and the unit direction d(dist)/da.
/// Coincident vectors get a zero direction (the loss is continuous there
/// and this keeps the gradient finite).
fn dist_and_direction(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let d = euclidean(a, b);
    if d == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    (d, a.iter().zip(b).map(|(x, y)| (x - y) / d).collect())
}

pub fn triplet_loss(p_a: &Descriptor, q_pos: &Descriptor, q_neg: &Descriptor, alpha: f64) -> f64 {
    let d_pos = euclidean(&p_a.values, &q_pos.values);
    let d_neg = euclidean(&p_a.values, &q_neg.values);
    softplus(alpha * (d_pos - d_neg))
}

/// Parameter gradients of the mean batch loss, shaped like the parameter
/// containers themselves.
pub struct BranchGrads {
    pub image: ImageEmbedderParams,
    pub point: PointEmbedderParams,
}

/// Mean loss over the batch and its exact reverse-mode gradient with
/// respect to every tensor of both branches.
pub fn backward(
    params_i: &ImageEmbedderParams,
    params_m: &PointEmbedderParams,
    batch: &[Triplet],
    alpha: f64,
) -> Result<(f64, BranchGrads), NetError> {
    if batch.is_empty() {
        return Err(NetError::ShapeMismatch { context: "empty triplet batch".into() });
    }
    let mut grads = BranchGrads { image: params_i.zeros_like(), point: params_m.zeros_like() };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for triplet in batch {
        let tr_a = image_branch::forward(params_i, &triplet.anchor.pixels)?;
        let tr_p = point_branch::forward(params_m, &triplet.positive.points)?;
        let tr_n = point_branch::forward(params_m, &triplet.negative.points)?;
        let (d_pos, dir_pos) = dist_and_direction(&tr_a.y, &tr_p.y);
        let (d_neg, dir_neg) = dist_and_direction(&tr_a.y, &tr_n.y);
        let x = alpha * (d_pos - d_neg);
        total += softplus(x);
        let coeff = scale * alpha * sigmoid(x);
        let grad_a: Vec<f64> = dir_pos.iter().zip(&dir_neg).map(|(p, n)| coeff * (p - n)).collect();
        let grad_p: Vec<f64> = dir_pos.iter().map(|v| -coeff * v).collect();
        let grad_n: Vec<f64> = dir_neg.iter().map(|v| coeff * v).collect();
        image_branch::backward(params_i, &tr_a, &grad_a, &mut grads.image);
        point_branch::backward(params_m, &tr_p, &grad_p, &mut grads.point);
        point_branch::backward(params_m, &tr_n, &grad_n, &mut grads.point);
    }
    for (_, t) in grads.image.tensors() {
        if !t.all_finite() {
            return Err(NetError::NonFiniteGradient { stage: "image branch" });
        }
    }
    for (_, t) in grads.point.tensors() {
        if !t.all_finite() {
            return Err(NetError::NonFiniteGradient { stage: "point branch" });
        }
    }
    Ok((total * scale, grads))
}
