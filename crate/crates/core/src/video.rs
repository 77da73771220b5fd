//! The `(B, F, C, H, W)` frame tensor that clean clips, noised states and
//! noise draws all share.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Declared value interval of a [`VideoBatch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueRange {
    /// Clean frames, normalized to `[-1, 1]`.
    Clean,
    /// Noised states and noise draws.
    Unbounded,
}

/// A batch of videos laid out as `(B, F, C, H, W)`.
#[derive(Debug, Clone)]
pub struct VideoBatch {
    data: Tensor,
    range: ValueRange,
}

impl VideoBatch {
    /// Wraps a rank-5 tensor after checking shape, finiteness and range.
    pub fn new(data: Tensor, range: ValueRange) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 5 {
            return Err(Error::shape(format!(
                "video batch must be (B,F,C,H,W), got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("video batch has an empty dimension: {dims:?}")));
        }
        let values = data.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("video batch contains NaN or Inf".into()));
        }
        if range == ValueRange::Clean && values.iter().any(|v| v.abs() > 1.0) {
            return Err(Error::param("clean video batch has values outside [-1, 1]"));
        }
        Ok(Self { data, range })
    }

    /// Builds an unbounded batch from host values.
    pub fn from_vec(values: Vec<f32>, shape: (usize, usize, usize, usize, usize)) -> Result<Self> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        Self::new(t, ValueRange::Unbounded)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    /// `(B, F, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3], d[4])
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn frames(&self) -> usize {
        self.dims().1
    }

    /// One video of the batch, still shaped `(1, F, C, H, W)`.
    pub fn video(&self, index: usize) -> Result<VideoBatch> {
        if index >= self.batch() {
            return Err(Error::param(format!(
                "video index {index} out of range for batch of {}",
                self.batch()
            )));
        }
        Ok(Self {
            data: self.data.narrow(0, index, 1)?,
            range: self.range,
        })
    }

    /// Flattened host copy in row-major order.
    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }

    /// Concatenates single videos along the batch axis.
    pub fn stack(videos: &[VideoBatch]) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::param("cannot stack an empty list of videos"))?;
        let tensors: Vec<&Tensor> = videos.iter().map(|v| &v.data).collect();
        let data = Tensor::cat(&tensors, 0)?;
        Ok(Self {
            data,
            range: first.range,
        })
    }

    /// Clamps into `[-1, 1]` and marks the batch as clean.
    pub fn clamp_clean(&self) -> Result<Self> {
        Ok(Self {
            data: self.data.clamp(-1f64, 1f64)?,
            range: ValueRange::Clean,
        })
    }
}
