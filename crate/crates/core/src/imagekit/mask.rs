use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect { x, y, width, height }
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Per-pixel selection weights in `[0, 1]` over a `width x height` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl RegionMask {
    pub fn empty(width: usize, height: usize) -> Self {
        RegionMask { width, height, weights: vec![0.0; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        RegionMask { width, height, weights: vec![1.0; width * height] }
    }

    pub fn from_weights(width: usize, height: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != width * height {
            return Err(Error::InvalidDims(format!(
                "{} mask weights for {width}x{height}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidParam("mask weights must lie in [0,1]".into()));
        }
        Ok(RegionMask { width, height, weights })
    }

    pub fn from_rect(width: usize, height: usize, rect: Rect) -> Result<Self> {
        if !rect.fits_in(width, height) {
            return Err(Error::InvalidParam(format!("{rect:?} outside {width}x{height}")));
        }
        let mut m = Self::empty(width, height);
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                m.weights[y * width + x] = 1.0;
            }
        }
        Ok(m)
    }

    /// Rasterizes a polygon with the even-odd rule, sampling at pixel centers.
    pub fn from_polygon(width: usize, height: usize, vertices: &[(f64, f64)]) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidParam("polygon needs at least 3 vertices".into()));
        }
        let mut m = Self::empty(width, height);
        for y in 0..height {
            let py = y as f64 + 0.5;
            for x in 0..width {
                let px = x as f64 + 0.5;
                let mut inside = false;
                let mut j = vertices.len() - 1;
                for i in 0..vertices.len() {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[j];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                if inside {
                    m.weights[y * width + x] = 1.0;
                }
            }
        }
        Ok(m)
    }

    pub fn from_circle(width: usize, height: usize, cx: f64, cy: f64, radius: f64) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    m.weights[y * width + x] = 1.0;
                }
            }
        }
        m
    }

    /// Decodes alternating run lengths, starting with an unselected run.
    pub fn from_rle(width: usize, height: usize, runs: &[usize]) -> Result<Self> {
        let mut m = Self::empty(width, height);
        let mut pos = 0usize;
        let mut on = false;
        for &r in runs {
            if pos + r > width * height {
                return Err(Error::InvalidParam("run lengths overflow the mask".into()));
            }
            if on {
                m.weights[pos..pos + r].iter_mut().for_each(|w| *w = 1.0);
            }
            pos += r;
            on = !on;
        }
        Ok(m)
    }

    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut on = false;
        let mut count = 0usize;
        for &w in &self.weights {
            if (w > 0.0) != on {
                runs.push(count);
                count = 0;
                on = !on;
            }
            count += 1;
        }
        runs.push(count);
        runs
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
    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.weight(x, y) > 0.0
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weight(&mut self, x: usize, y: usize, w: f64) {
        self.weights[y * self.width + x] = w.clamp(0.0, 1.0);
    }

    pub fn count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Tight bounding rectangle of the selected pixels.
    pub fn bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_set(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    /// True when every pixel of `rect` is selected.
    pub fn covers(&self, rect: Rect) -> bool {
        rect.fits_in(self.width, self.height)
            && (rect.y..rect.y + rect.height)
                .all(|y| (rect.x..rect.x + rect.width).all(|x| self.is_set(x, y)))
    }

    /// Same selection with every nonzero weight raised to one.
    pub fn binarized(&self) -> Self {
        RegionMask {
            width: self.width,
            height: self.height,
            weights: self.weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::InvalidDims(format!(
                "mask {}x{} vs image {width}x{height}",
                self.width, self.height
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_even_odd_square() {
        let m = RegionMask::from_polygon(8, 8, &[(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)]).unwrap();
        assert_eq!(m.count(), 16);
        assert_eq!(m.bbox(), Some(Rect::new(2, 2, 4, 4)));
    }

    #[test]
    fn polygon_self_intersection_leaves_hole() {
        // Pentagram: the centre is covered twice and must be excluded.
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|k| {
                let a = std::f64::consts::PI * (0.5 + 0.8 * k as f64);
                (16.0 + 14.0 * a.cos(), 16.0 - 14.0 * a.sin())
            })
            .collect();
        let m = RegionMask::from_polygon(32, 32, &pts).unwrap();
        assert!(!m.is_set(16, 16));
        assert!(m.count() > 0);
    }

    #[test]
    fn rle_round_trip() {
        let m = RegionMask::from_circle(9, 7, 4.0, 3.0, 2.5);
        let back = RegionMask::from_rle(9, 7, &m.to_rle()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn rect_outside_rejected() {
        assert!(RegionMask::from_rect(4, 4, Rect::new(2, 2, 3, 1)).is_err());
    }
}
