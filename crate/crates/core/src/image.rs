//! Channel-interleaved raster images and depth maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major, channel-interleaved image (`H x W x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "image buffer of length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// BT.601 luma of a 3-channel image; single-channel images are returned as is.
    pub fn luma(&self) -> Image<T> {
        if self.channels == 1 {
            return self.clone();
        }
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| wr * px[0] + wg * px[1] + wb * px[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Extract one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image<T> {
        let data = self.data.chunks_exact(self.channels).map(|px| px[c]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Planar `C x H x W` copy, the layout the network tensors use.
    pub fn to_planar(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); self.data.len()];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[T]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * channels {
            return Err(Error::InvalidInput(format!(
                "planar buffer of length {} does not match {channels}x{height}x{width}",
                planar.len()
            )));
        }
        let mut data = vec![T::zero(); planar.len()];
        for i in 0..plane {
            for c in 0..channels {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Per-pixel scene depth (`H x W`), nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "depth buffer of length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Fails on any negative or non-finite entry.
    pub fn validate(&self) -> Result<()> {
        let bad = self.data.iter().filter(|d| !d.is_finite() || **d < T::zero()).count();
        if bad > 0 {
            return Err(Error::InvalidInput(format!(
                "depth map has {bad} negative or non-finite value(s)"
            )));
        }
        Ok(())
    }

    /// Min-max rescale to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Self {
        let lo = self.data.iter().copied().fold(T::infinity(), T::min);
        let hi = self.data.iter().copied().fold(T::neg_infinity(), T::max);
        let span = hi - lo;
        let data = if span > T::zero() {
            self.data.iter().map(|d| (*d - lo) / span).collect()
        } else {
            vec![T::zero(); self.data.len()]
        };
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `d' = d * scale + offset`.
    pub fn affine(&self, scale: T, offset: T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|d| *d * scale + offset).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
