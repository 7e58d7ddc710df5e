//! Explicit-matrix reference for the projection, for tiny images only.
//!
//! `H` is assembled entry by entry from the kernel taps (circular blur then
//! decimation), independently of the convolution code in [`crate::imagekit`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::imagekit::Image;
use crate::kernel::Kernel;

/// Largest HR side accepted by [`DenseOracle::build`].
pub const MAX_ORACLE_SIDE: usize = 16;

#[derive(Debug, Clone)]
pub struct DenseOracle {
    pub factor: usize,
    pub hr_width: usize,
    pub hr_height: usize,
    /// `LR pixels x HR pixels`.
    pub h: DMatrix<f64>,
    /// `H^T (H H^T)^{-1}`.
    pub pseudo_inverse: DMatrix<f64>,
    /// `H^T (H H^T)^{-1} H`.
    pub p_perp: DMatrix<f64>,
    /// `I - P_perp`.
    pub p_null: DMatrix<f64>,
}

impl DenseOracle {
    pub fn build(h: &Kernel<f64>, factor: usize, hr_width: usize, hr_height: usize) -> Result<Self> {
        if hr_width > MAX_ORACLE_SIDE || hr_height > MAX_ORACLE_SIDE {
            return Err(Error::OracleTooLarge { rows: hr_height, cols: hr_width });
        }
        if factor == 0 || hr_width % factor != 0 || hr_height % factor != 0 {
            return Err(Error::InvalidDims(format!("{hr_width}x{hr_height} with factor {factor}")));
        }
        let (lw, lh) = (hr_width / factor, hr_height / factor);
        let n = hr_width * hr_height;
        let m = lw * lh;
        let (cr, cc) = ((h.rows() / 2) as isize, (h.cols() / 2) as isize);
        let mut hm = DMatrix::<f64>::zeros(m, n);
        for ly in 0..lh {
            for lx in 0..lw {
                let row = ly * lw + lx;
                let (py, px) = ((ly * factor) as isize, (lx * factor) as isize);
                for i in 0..h.rows() {
                    for j in 0..h.cols() {
                        let sy = (py - (i as isize - cr)).rem_euclid(hr_height as isize) as usize;
                        let sx = (px - (j as isize - cc)).rem_euclid(hr_width as isize) as usize;
                        hm[(row, sy * hr_width + sx)] += h.at(i, j);
                    }
                }
            }
        }
        let gram = &hm * hm.transpose();
        let gram_inv = gram
            .lu()
            .try_inverse()
            .ok_or(Error::SingularKernel)?;
        let pseudo_inverse = hm.transpose() * gram_inv;
        let p_perp = &pseudo_inverse * &hm;
        let p_null = DMatrix::<f64>::identity(n, n) - &p_perp;
        Ok(DenseOracle { factor, hr_width, hr_height, h: hm, pseudo_inverse, p_perp, p_null })
    }

    /// Numerical rank of `H` from its singular values.
    pub fn rank(&self, tol: f64) -> usize {
        self.h.clone().svd(false, false).singular_values.iter().filter(|&&s| s > tol).count()
    }

    fn apply_per_channel(
        &self,
        img: &Image<f64>,
        mat: &DMatrix<f64>,
        out_w: usize,
        out_h: usize,
    ) -> Result<Image<f64>> {
        if img.plane_len() != mat.ncols() {
            return Err(Error::InvalidDims(format!(
                "image with {} samples per channel vs matrix with {} columns",
                img.plane_len(),
                mat.ncols()
            )));
        }
        let mut out = Image::zeros(out_w, out_h, img.channels());
        for c in 0..img.channels() {
            let v = DVector::from_column_slice(img.plane(c));
            let r = mat * v;
            out.plane_mut(c).copy_from_slice(r.as_slice());
        }
        Ok(out)
    }

    pub fn degrade(&self, x: &Image<f64>) -> Result<Image<f64>> {
        self.apply_per_channel(x, &self.h, self.hr_width / self.factor, self.hr_height / self.factor)
    }

    pub fn project_nullspace(&self, u: &Image<f64>) -> Result<Image<f64>> {
        self.apply_per_channel(u, &self.p_null, self.hr_width, self.hr_height)
    }

    /// `(I - P_perp) x_inc + H^T (H H^T)^{-1} y`
    pub fn project(&self, x_inc: &Image<f64>, y: &Image<f64>) -> Result<Image<f64>> {
        let a = self.project_nullspace(x_inc)?;
        let b = self.apply_per_channel(y, &self.pseudo_inverse, self.hr_width, self.hr_height)?;
        a.add(&b)
    }
}
