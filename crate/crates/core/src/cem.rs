//! Consistency enforcing projection.
//!
//! Given a degradation `y = (h * x) decimated by factor`, [`CemOperator`]
//! maps any candidate high-resolution image onto the affine set of images
//! that reproduce `y` exactly:
//!
//! ```text
//! x_hat = x_inc - mirror(h) * [k * (h * x_inc)↓]↑ + mirror(h) * (k * y)↑
//! ```
//!
//! where `k` inverts `(h * mirror(h))↓` in the Fourier domain. With periodic
//! boundaries every step is exact. The replicate mode pads the inputs by
//! `pad_lr` low-resolution samples, projects on the padded canvas and crops
//! `crop_hr` high-resolution samples from each side of the result.

use crate::error::{Error, Result};
use crate::imagekit::{
    conv2d, downsample, replicate_pad, replicate_pad_adjoint, upsample, BoundaryMode, Image,
};
use crate::kernel::{apply_inv, invert_composed, InvFilter, Kernel, DEFAULT_EPS};
use crate::scalar::Scalar;

/// Low-resolution samples replicated on each side in padded mode.
pub const DEFAULT_PAD_LR: usize = 10;

#[derive(Debug, Clone)]
pub struct CemOperator<T> {
    h: Kernel<T>,
    h_mirror: Kernel<T>,
    factor: usize,
    hr_width: usize,
    hr_height: usize,
    boundary: BoundaryMode,
    pad_lr: usize,
    crop_hr: usize,
    eps: T,
    inv: InvFilter<T>,
    inv_padded: InvFilter<T>,
}

impl<T: Scalar> CemOperator<T> {
    /// Builds the operator for `hr_width x hr_height` images with the default
    /// padding (`10` LR samples, crop `10 * factor` HR samples).
    pub fn new(
        h: Kernel<T>,
        factor: usize,
        hr_width: usize,
        hr_height: usize,
        boundary: BoundaryMode,
    ) -> Result<Self> {
        Self::with_padding(h, factor, hr_width, hr_height, boundary, DEFAULT_PAD_LR, DEFAULT_PAD_LR * factor)
    }

    pub fn with_padding(
        h: Kernel<T>,
        factor: usize,
        hr_width: usize,
        hr_height: usize,
        boundary: BoundaryMode,
        pad_lr: usize,
        crop_hr: usize,
    ) -> Result<Self> {
        Self::build(h, factor, hr_width, hr_height, boundary, pad_lr, crop_hr, T::lit(DEFAULT_EPS))
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        h: Kernel<T>,
        factor: usize,
        hr_width: usize,
        hr_height: usize,
        boundary: BoundaryMode,
        pad_lr: usize,
        crop_hr: usize,
        eps: T,
    ) -> Result<Self> {
        if factor == 0 || hr_width == 0 || hr_height == 0 || hr_width % factor != 0 || hr_height % factor != 0
        {
            return Err(Error::InvalidDims(format!(
                "HR {hr_width}x{hr_height} not divisible by factor {factor}"
            )));
        }
        let (lw, lh) = (hr_width / factor, hr_height / factor);
        let (pw, ph) = (lw + 2 * pad_lr, lh + 2 * pad_lr);
        if 2 * crop_hr >= factor * pw.min(ph) {
            return Err(Error::InvalidDims(format!(
                "crop of {crop_hr} leaves nothing of the {}x{} padded canvas",
                factor * pw,
                factor * ph
            )));
        }
        let inv = invert_composed(&h, factor, lh, lw, eps)?;
        let inv_padded = invert_composed(&h, factor, ph, pw, eps)?;
        Ok(CemOperator {
            h_mirror: h.mirror(),
            h,
            factor,
            hr_width,
            hr_height,
            boundary,
            pad_lr,
            crop_hr,
            eps,
            inv,
            inv_padded,
        })
    }

    /// Same dimensions, boundary and padding with filters rebuilt from `h`.
    pub fn swap_kernel(&self, h: Kernel<T>) -> Result<Self> {
        Self::build(h, self.factor, self.hr_width, self.hr_height, self.boundary, self.pad_lr, self.crop_hr, self.eps)
    }

    pub fn kernel(&self) -> &Kernel<T> {
        &self.h
    }

    pub fn mirrored_kernel(&self) -> &Kernel<T> {
        &self.h_mirror
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    /// `(width, height)` of the high-resolution images the operator accepts.
    pub fn hr_dims(&self) -> (usize, usize) {
        (self.hr_width, self.hr_height)
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        (self.hr_width / self.factor, self.hr_height / self.factor)
    }

    pub fn pad_lr(&self) -> usize {
        self.pad_lr
    }

    pub fn crop_hr(&self) -> usize {
        self.crop_hr
    }

    pub fn inverse_filter(&self) -> &InvFilter<T> {
        &self.inv
    }

    pub fn padded_inverse_filter(&self) -> &InvFilter<T> {
        &self.inv_padded
    }

    /// Floored spectral bins of the filter used by [`Self::cem_apply`].
    pub fn floored_bins(&self) -> usize {
        match self.boundary {
            BoundaryMode::Periodic => self.inv.floored_bins(),
            BoundaryMode::Replicate => self.inv_padded.floored_bins(),
        }
    }

    /// LR samples within this distance of the border see the boundary rule
    /// through the blur footprint.
    pub fn interior_margin_lr(&self) -> usize {
        let reach = self.h.rows().max(self.h.cols()) / 2;
        reach.div_ceil(self.factor)
    }

    fn check_hr(&self, x: &Image<T>, what: &str) -> Result<()> {
        if (x.width(), x.height()) != (self.hr_width, self.hr_height) {
            return Err(Error::InvalidDims(format!(
                "{what} is {}x{}, operator expects {}x{}",
                x.width(),
                x.height(),
                self.hr_width,
                self.hr_height
            )));
        }
        Ok(())
    }

    fn check_lr(&self, y: &Image<T>, what: &str) -> Result<()> {
        let (lw, lh) = self.lr_dims();
        if (y.width(), y.height()) != (lw, lh) {
            return Err(Error::InvalidDims(format!(
                "{what} is {}x{}, operator expects {lw}x{lh}",
                y.width(),
                y.height()
            )));
        }
        Ok(())
    }

    /// `y = (h * x)↓` under the operator's boundary rule.
    pub fn degrade(&self, x: &Image<T>) -> Result<Image<T>> {
        self.check_hr(x, "degrade input")?;
        downsample(&conv2d(x, &self.h, self.boundary), self.factor)
    }

    /// `mirror(h) * (k * v)↑` on a periodic canvas.
    fn back_project(&self, v: &Image<T>, inv: &InvFilter<T>) -> Result<Image<T>> {
        let kv = apply_inv(inv, v)?;
        Ok(conv2d(&upsample(&kv, self.factor), &self.h_mirror, BoundaryMode::Periodic))
    }

    fn forward_periodic(&self, x: &Image<T>) -> Result<Image<T>> {
        downsample(&conv2d(x, &self.h, BoundaryMode::Periodic), self.factor)
    }

    fn nullspace_periodic(&self, u: &Image<T>, inv: &InvFilter<T>) -> Result<Image<T>> {
        let corr = self.back_project(&self.forward_periodic(u)?, inv)?;
        u.sub(&corr)
    }

    fn apply_periodic(&self, x: &Image<T>, y: &Image<T>, inv: &InvFilter<T>) -> Result<Image<T>> {
        if x.channels() != y.channels() {
            return Err(Error::InvalidDims(format!(
                "candidate has {} channels, LR image {}",
                x.channels(),
                y.channels()
            )));
        }
        let resid = y.sub(&self.forward_periodic(x)?)?;
        x.add(&self.back_project(&resid, inv)?)
    }

    /// Projects `x_inc` onto `{x : degrade(x) = y}`.
    ///
    /// Periodic operators are exact. Replicate operators delegate to
    /// [`Self::cem_apply_padded`].
    pub fn cem_apply(&self, x_inc: &Image<T>, y: &Image<T>) -> Result<Image<T>> {
        self.check_hr(x_inc, "candidate")?;
        self.check_lr(y, "LR image")?;
        match self.boundary {
            BoundaryMode::Periodic => self.apply_periodic(x_inc, y, &self.inv),
            BoundaryMode::Replicate => self.cem_apply_padded(x_inc, y),
        }
    }

    /// Replicate-pads `y` by `pad_lr` and `x_inc` by `pad_lr * factor`,
    /// projects on the padded canvas and removes `crop_hr` samples from every
    /// side. With the default crop the result has the input dimensions;
    /// in general it is `canvas - 2 * crop_hr` per axis.
    pub fn cem_apply_padded(&self, x_inc: &Image<T>, y: &Image<T>) -> Result<Image<T>> {
        self.check_hr(x_inc, "candidate")?;
        self.check_lr(y, "LR image")?;
        let yp = replicate_pad(y, self.pad_lr);
        let xp = replicate_pad(x_inc, self.pad_lr * self.factor);
        let full = self.apply_periodic(&xp, &yp, &self.inv_padded)?;
        self.crop_canvas(&full)
    }

    fn crop_canvas(&self, full: &Image<T>) -> Result<Image<T>> {
        let c = self.crop_hr;
        let rect = crate::imagekit::Rect::new(c, c, full.width() - 2 * c, full.height() - 2 * c);
        full.crop(rect)
    }

    fn padded_linear_ready(&self) -> Result<()> {
        if self.crop_hr != self.pad_lr * self.factor {
            return Err(Error::InvalidDims(format!(
                "linear padded projection needs crop_hr = pad_lr * factor ({} vs {})",
                self.crop_hr,
                self.pad_lr * self.factor
            )));
        }
        Ok(())
    }

    /// The part of [`Self::cem_apply`] that is linear in the candidate:
    /// `cem_apply(x, y) = cem_linear(x) + cem_apply(0, y)`.
    pub fn cem_linear(&self, u: &Image<T>) -> Result<Image<T>> {
        self.check_hr(u, "input")?;
        match self.boundary {
            BoundaryMode::Periodic => self.nullspace_periodic(u, &self.inv),
            BoundaryMode::Replicate => {
                self.padded_linear_ready()?;
                let up = replicate_pad(u, self.pad_lr * self.factor);
                self.crop_canvas(&self.nullspace_periodic(&up, &self.inv_padded)?)
            }
        }
    }

    /// Adjoint of [`Self::cem_linear`]. Equals the nullspace projection for
    /// periodic operators since that projector is symmetric.
    pub fn cem_adjoint(&self, v: &Image<T>) -> Result<Image<T>> {
        self.check_hr(v, "input")?;
        match self.boundary {
            BoundaryMode::Periodic => self.nullspace_periodic(v, &self.inv),
            BoundaryMode::Replicate => {
                self.padded_linear_ready()?;
                let c = self.crop_hr;
                let mut canvas = Image::zeros(v.width() + 2 * c, v.height() + 2 * c, v.channels());
                canvas.paste(v, c, c)?;
                let proj = self.nullspace_periodic(&canvas, &self.inv_padded)?;
                replicate_pad_adjoint(&proj, self.pad_lr * self.factor)
            }
        }
    }

    /// `P_N u = u - mirror(h) * (k * (h * u)↓)↑`.
    pub fn project_nullspace(&self, u: &Image<T>) -> Result<Image<T>> {
        self.cem_linear(u)
    }

    /// `P_perp u = u - P_N u`.
    pub fn project_perp(&self, u: &Image<T>) -> Result<Image<T>> {
        u.sub(&self.project_nullspace(u)?)
    }

    /// The minimum-norm consistent image `H^T (H H^T)^{-1} y`.
    pub fn orthogonal_rep(&self, y: &Image<T>) -> Result<Image<T>> {
        let zero = Image::zeros(self.hr_width, self.hr_height, y.channels());
        self.cem_apply(&zero, y)
    }

    /// L-infinity and RMS of `degrade(x_hat) - y` over LR samples at least
    /// `margin` away from the border.
    pub fn residual_with_margin(&self, x_hat: &Image<T>, y: &Image<T>, margin: usize) -> Result<(T, T)> {
        self.check_lr(y, "LR image")?;
        let d = self.degrade(x_hat)?;
        d.check_same_dims(y, "residual")?;
        let (w, h, ch) = y.dims();
        if 2 * margin >= w.min(h) {
            return Err(Error::InvalidDims(format!("margin {margin} leaves no interior in {w}x{h}")));
        }
        let (mut linf, mut ss, mut n) = (T::zero(), T::zero(), 0usize);
        for c in 0..ch {
            for yy in margin..h - margin {
                for xx in margin..w - margin {
                    let e = d.get(c, yy, xx) - y.get(c, yy, xx);
                    linf = linf.max(e.abs());
                    ss += e * e;
                    n += 1;
                }
            }
        }
        Ok((linf, (ss / T::of_usize(n)).sqrt()))
    }

    /// Residual over all LR samples.
    pub fn residual(&self, x_hat: &Image<T>, y: &Image<T>) -> Result<(T, T)> {
        self.residual_with_margin(x_hat, y, 0)
    }
}
