use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rank-3 `height × width × channels` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            tensor: Tensor::new(vec![height, width, channels], data)?,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[height, width, channels]),
        }
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        tensor.dims3()?;
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Channel vector at spatial position `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let c = self.channels();
        let i = y * self.width() + x;
        &self.tensor.data()[i * c..(i + 1) * c]
    }

    pub(crate) fn same_shape(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.tensor.shape() != other.tensor.shape() {
            return Err(Error::shape(op, self.tensor.shape(), other.tensor.shape()));
        }
        Ok(())
    }
}
