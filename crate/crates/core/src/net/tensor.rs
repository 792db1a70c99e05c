//! Dense row-major f64 tensors and the weight/bias bundles built from them.

use rand::Rng;

use super::NetError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NetError> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(NetError::ShapeMismatch {
                context: format!("tensor data length {} vs shape {:?}", data.len(), shape),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero tensor with this tensor's shape (gradient accumulator).
    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(&self.shape)
    }
}

/// Kaiming-uniform draw: entries uniform in ±sqrt(6 / fan_in).
fn kaiming_fill(t: &mut Tensor, fan_in: usize, rng: &mut impl Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Fully connected layer: weight [out, in] row-major plus bias [out].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let mut weight = Tensor::zeros(&[out_dim, in_dim]);
        kaiming_fill(&mut weight, in_dim, rng);
        Self { weight, bias: Tensor::zeros(&[out_dim]) }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: self.weight.zeros_like(), bias: self.bias.zeros_like() }
    }

    /// Rebuilds a layer from checkpoint tensors, enforcing `[out, in]` /
    /// `[out]` shapes.
    pub fn from_tensors(weight: Tensor, bias: Tensor, what: &str) -> Result<Self, NetError> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(NetError::ShapeMismatch {
                context: format!("{what}: weight {:?} / bias {:?}", weight.shape(), bias.shape()),
            });
        }
        Ok(Self { weight, bias })
    }
}

/// 3x3 convolution layer: kernel [co, ci, 3, 3] plus bias [co].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn init(co: usize, ci: usize, rng: &mut impl Rng) -> Self {
        let mut kernel = Tensor::zeros(&[co, ci, 3, 3]);
        kaiming_fill(&mut kernel, ci * 9, rng);
        Self { kernel, bias: Tensor::zeros(&[co]) }
    }

    pub fn co(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn ci(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self { kernel: self.kernel.zeros_like(), bias: self.bias.zeros_like() }
    }

    pub fn from_tensors(kernel: Tensor, bias: Tensor, what: &str) -> Result<Self, NetError> {
        let s = kernel.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 || bias.shape() != [s[0]] {
            return Err(NetError::ShapeMismatch {
                context: format!("{what}: kernel {:?} / bias {:?}", kernel.shape(), bias.shape()),
            });
        }
        Ok(Self { kernel, bias })
    }
}
