//! Image containers and the raster utilities shared by every other module.
//!
//! Samples are stored planar: all of channel 0 row by row, then channel 1,
//! and so on. Nominal range is `[0, 1]` but nothing clips until an image is
//! written to disk.

mod conv;
mod fourier;
mod io;
mod mask;
mod resample;

pub use conv::{conv2d, conv2d_adjoint};
pub use fourier::{fft2, ifft2, ComplexGrid};
pub use io::{decode_png, encode_png, load_image, load_pgm, load_png, save_image, save_pgm, save_png};
pub use mask::{Rect, RegionMask};
pub use resample::{
    area_downscale, downsample, replicate_pad, replicate_pad_adjoint, resize_bicubic, upsample,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How convolutions treat indices that fall outside the raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Indices wrap around (circular convolution).
    #[default]
    Periodic,
    /// Indices clamp to the nearest edge sample.
    Replicate,
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "periodic" => Ok(BoundaryMode::Periodic),
            "replicate" => Ok(BoundaryMode::Replicate),
            other => Err(Error::InvalidParam(format!("unknown boundary mode '{other}'"))),
        }
    }
}

/// Planar floating point raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        assert!(width >= 1 && height >= 1 && channels >= 1, "empty image");
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidDims(format!("{width}x{height}x{channels} has an empty axis")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidDims(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    /// Builds an image by evaluating `f(channel, row, col)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let i = img.index(c, y, x);
                    img.data[i] = f(c, y, x);
                }
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height, channels)`
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::InvalidDims(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_dims(other, "elementwise operation")?;
        Ok(Image {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_same_dims(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_dims(other, "inner product")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_dims(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn rms_diff(&self, other: &Self) -> Result<T> {
        self.check_same_dims(other, "rms_diff")?;
        let s = self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| {
            let d = a - b;
            acc + d * d
        });
        Ok((s / T::of_usize(self.data.len())).sqrt())
    }

    pub fn clip01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    /// Copies a rectangle out of the image. The rectangle must lie inside.
    pub fn crop(&self, rect: Rect) -> Result<Self> {
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::InvalidDims(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(rect.width, rect.height, self.channels, |c, y, x| {
            self.get(c, rect.y + y, rect.x + x)
        }))
    }

    /// Writes `patch` with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, patch: &Self, top: usize, left: usize) -> Result<()> {
        if patch.channels != self.channels
            || top + patch.height > self.height
            || left + patch.width > self.width
        {
            return Err(Error::InvalidDims(format!(
                "paste of {:?} at ({top},{left}) into {:?}",
                patch.dims(),
                self.dims()
            )));
        }
        for c in 0..self.channels {
            for y in 0..patch.height {
                for x in 0..patch.width {
                    self.set(c, top + y, left + x, patch.get(c, y, x));
                }
            }
        }
        Ok(())
    }

    /// Single-channel image selecting channel `c`.
    pub fn channel(&self, c: usize) -> Self {
        Image { width: self.width, height: self.height, channels: 1, data: self.plane(c).to_vec() }
    }

    /// Stacks images with equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidDims("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.width != first.width || p.height != first.height {
                return Err(Error::InvalidDims(format!(
                    "concat {}x{} with {}x{}",
                    first.width, first.height, p.width, p.height
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Image::from_vec(first.width, first.height, channels, data)
    }

    /// Rec.601 luma for 3-channel images, identity copy for 1-channel ones.
    pub fn luma(&self) -> Self {
        if self.channels != 3 {
            return self.channel(0);
        }
        let w = [T::lit(0.299), T::lit(0.587), T::lit(0.114)];
        Self::from_fn(self.width, self.height, 1, |_, y, x| {
            w[0] * self.get(0, y, x) + w[1] * self.get(1, y, x) + w[2] * self.get(2, y, x)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Image::<f64>::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::<f64>::from_vec(0, 2, 1, vec![]).is_err());
        assert!(Image::<f64>::from_vec(2, 2, 1, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let img = Image::<f64>::from_fn(5, 4, 2, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let r = Rect::new(1, 1, 3, 2);
        let patch = img.crop(r).unwrap();
        assert_eq!(patch.get(1, 0, 0), 111.0);
        let mut blank = Image::zeros(5, 4, 2);
        blank.paste(&patch, 1, 1).unwrap();
        assert_eq!(blank.get(0, 2, 3), img.get(0, 2, 3));
        assert!(img.crop(Rect::new(3, 3, 3, 3)).is_err());
    }

    #[test]
    fn luma_weights_sum_to_one() {
        let img = Image::<f64>::filled(2, 2, 3, 0.5);
        assert!((img.luma().get(0, 1, 1) - 0.5).abs() < 1e-15);
    }
}
