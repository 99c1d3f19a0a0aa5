use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// A `[C, H, W]` floating-point image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("image extents match its buffer")
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Element-wise sum; shapes must agree.
    pub fn add(&self, other: &[f64]) -> Result<Image> {
        if other.len() != self.data.len() {
            return Err(Error::shape("perturbation does not match image shape"));
        }
        Ok(Image {
            data: self.data.iter().zip(other).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn vflip(&self) -> Image {
        let mut out = self.clone();
        let (h, w) = (self.height, self.width);
        for c in 0..self.channels {
            for y in 0..h {
                let src = &self.data[(c * h + y) * w..(c * h + y + 1) * w];
                out.data[(c * h + h - 1 - y) * w..(c * h + h - y) * w].copy_from_slice(src);
            }
        }
        out
    }
}
