//! Blur kernels and the Fourier-domain inverse of `(h * mirror(h))` decimated
//! onto the low-resolution grid.
//!
//! The inverse filter is kept as a spectrum bound to a fixed grid size. Its
//! spatial support is unbounded in general, so it is never truncated to taps.

use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagekit::{fft2, ifft2, ComplexGrid, Image};
use crate::scalar::Scalar;

/// Default spectral floor, relative to the largest spectrum magnitude.
pub const DEFAULT_EPS: f64 = 1e-10;

/// Odd-sized 2-D filter anchored at its center tap.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T> {
    rows: usize,
    cols: usize,
    taps: Vec<T>,
    pub label: String,
}

impl<T: Scalar> Kernel<T> {
    /// Builds a kernel from row-major taps. Even dimensions are padded with a
    /// zero row/column on the high side so the anchor stays well defined.
    pub fn new(rows: usize, cols: usize, taps: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || taps.is_empty() {
            return Err(Error::KernelFormat("kernel has no taps".into()));
        }
        if taps.len() != rows * cols {
            return Err(Error::KernelFormat(format!(
                "{} taps for a {rows}x{cols} kernel",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::KernelFormat("non-finite tap".into()));
        }
        let (pr, pc) = (rows | 1, cols | 1);
        let taps = if (pr, pc) == (rows, cols) {
            taps
        } else {
            let mut padded = vec![T::zero(); pr * pc];
            for i in 0..rows {
                padded[i * pc..i * pc + cols].copy_from_slice(&taps[i * cols..(i + 1) * cols]);
            }
            padded
        };
        Ok(Kernel { rows: pr, cols: pc, taps, label: String::new() })
    }

    pub fn delta() -> Self {
        Kernel { rows: 1, cols: 1, taps: vec![T::one()], label: "delta".into() }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Outer product `col^T row` of two 1-D tap vectors.
    pub fn separable(col: &[T], row: &[T]) -> Result<Self> {
        let taps = col.iter().flat_map(|&a| row.iter().map(move |&b| a * b)).collect();
        Self::new(col.len(), row.len(), taps)
    }

    /// Isotropic Gaussian with `2 * radius + 1` taps per axis, unit sum.
    pub fn gaussian(sigma: f64, radius: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParam(format!("gaussian sigma {sigma}")));
        }
        let one: Vec<T> = (0..2 * radius + 1)
            .map(|i| {
                let d = i as f64 - radius as f64;
                T::lit((-d * d / (2.0 * sigma * sigma)).exp())
            })
            .collect();
        Ok(Self::separable(&one, &one)?.normalized().with_label(format!("gaussian sigma={sigma}")))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.taps[i * self.cols + j]
    }

    /// Extent of the nonzero taps; zero padding does not count.
    pub fn support(&self) -> (usize, usize) {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.at(i, j) != T::zero() {
                    r0 = r0.min(i);
                    r1 = r1.max(i);
                    c0 = c0.min(j);
                    c1 = c1.max(j);
                }
            }
        }
        if r0 == usize::MAX {
            (0, 0)
        } else {
            (r1 - r0 + 1, c1 - c0 + 1)
        }
    }

    pub fn sum(&self) -> T {
        self.taps.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// Scales taps to unit sum. A zero-sum kernel is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let s = self.sum();
        if s != T::zero() {
            self.taps.iter_mut().for_each(|t| *t /= s);
        }
        self
    }

    pub fn scaled(mut self, c: T) -> Self {
        self.taps.iter_mut().for_each(|t| *t *= c);
        self
    }

    /// Taps rotated by 180 degrees.
    pub fn mirror(&self) -> Self {
        Kernel {
            rows: self.rows,
            cols: self.cols,
            taps: self.taps.iter().rev().copied().collect(),
            label: self.label.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Kernel<U> {
        Kernel {
            rows: self.rows,
            cols: self.cols,
            taps: self.taps.iter().map(|&t| U::from(t).unwrap()).collect(),
            label: self.label.clone(),
        }
    }
}

fn keys_cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Anti-aliasing Keys cubic (a = -0.5) kernel for decimation by `factor`.
///
/// Even factors have `4 * factor` taps per axis sampled at half-integer
/// offsets, which become odd through zero padding; odd factors have
/// `4 * factor - 1` taps at integer offsets. Unit sum.
pub fn bicubic_kernel<T: Scalar>(factor: usize) -> Kernel<T> {
    assert!(factor >= 1, "scale factor must be at least 1");
    if factor == 1 {
        return Kernel::delta().with_label("bicubic x1");
    }
    let len = if factor % 2 == 0 { 4 * factor } else { 4 * factor - 1 };
    let center = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len).map(|k| keys_cubic((k as f64 - center) / factor as f64)).collect();
    let total: f64 = raw.iter().sum();
    let one: Vec<T> = raw.iter().map(|&w| T::lit(w / total)).collect();
    Kernel::separable(&one, &one)
        .expect("bicubic taps are non-empty")
        .with_label(format!("bicubic x{factor}"))
}

/// Keys cubic interpolation kernel that reconstructs after zero insertion by
/// `factor`; passes the original samples through unchanged.
pub fn interpolation_kernel<T: Scalar>(factor: usize) -> Kernel<T> {
    if factor <= 1 {
        return Kernel::delta();
    }
    let reach = 2 * factor - 1;
    let one: Vec<T> = (0..2 * reach + 1)
        .map(|k| T::lit(keys_cubic((k as f64 - reach as f64) / factor as f64)))
        .collect();
    Kernel::separable(&one, &one).expect("non-empty").with_label(format!("cubic interp x{factor}"))
}

/// Circular autocorrelation of `h` on the high-resolution grid of size
/// `(factor * rows) x (factor * cols)`, decimated by `factor`. Row-major
/// `rows x cols` raster with the zero offset at index 0.
pub fn compose_downsampled<T: Scalar>(
    h: &Kernel<T>,
    factor: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<T>> {
    if factor == 0 || rows == 0 || cols == 0 {
        return Err(Error::InvalidDims(format!("grid {rows}x{cols} factor {factor}")));
    }
    let (sr, sc) = h.support();
    if factor * rows < sr || factor * cols < sc {
        return Err(Error::InvalidDims(format!(
            "grid {}x{} smaller than {sr}x{sc} kernel support",
            factor * rows,
            factor * cols,
        )));
    }
    let (kr, kc) = (h.rows() as isize, h.cols() as isize);
    let f = factor as isize;
    let mut g = vec![T::zero(); rows * cols];
    // Offset d = m - m' between every pair of taps; only multiples of the
    // factor survive decimation.
    for i in 0..kr {
        for j in 0..kc {
            let a = h.at(i as usize, j as usize);
            if a == T::zero() {
                continue;
            }
            for i2 in 0..kr {
                let di = i - i2;
                if di % f != 0 {
                    continue;
                }
                for j2 in 0..kc {
                    let dj = j - j2;
                    if dj % f != 0 {
                        continue;
                    }
                    let r = (di / f).rem_euclid(rows as isize) as usize;
                    let c = (dj / f).rem_euclid(cols as isize) as usize;
                    g[r * cols + c] += a * h.at(i2 as usize, j2 as usize);
                }
            }
        }
    }
    Ok(g)
}

/// Spectral realization of the inverse filter `k` on a fixed grid.
#[derive(Debug, Clone)]
pub struct InvFilter<T> {
    rows: usize,
    cols: usize,
    spectrum: Vec<Complex<T>>,
    eps: T,
    floored: usize,
}

impl<T: Scalar> InvFilter<T> {
    pub fn identity(rows: usize, cols: usize) -> Self {
        InvFilter {
            rows,
            cols,
            spectrum: vec![Complex::new(T::one(), T::zero()); rows * cols],
            eps: T::zero(),
            floored: 0,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn spectrum(&self) -> &[Complex<T>] {
        &self.spectrum
    }

    /// Absolute floor applied to the composed spectrum.
    pub fn eps(&self) -> T {
        self.eps
    }

    /// Number of bins whose magnitude fell below the floor.
    pub fn floored_bins(&self) -> usize {
        self.floored
    }

    /// Largest inverse-spectrum magnitude, i.e. the worst-case gain of `k`.
    pub fn max_gain(&self) -> T {
        self.spectrum.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }
}

/// Builds `k = 1 / F[(h * mirror(h)) decimated]` on a `rows x cols` grid.
///
/// Bins with magnitude below `eps_rel * max|F|` are replaced by the inverse of
/// that floor, keeping their sign.
pub fn invert_composed<T: Scalar>(
    h: &Kernel<T>,
    factor: usize,
    rows: usize,
    cols: usize,
    eps_rel: T,
) -> Result<InvFilter<T>> {
    let g = compose_downsampled(h, factor, rows, cols)?;
    let spec = fft2(&ComplexGrid::from_real(rows, cols, &g));
    let peak = spec.data.iter().fold(T::zero(), |m, z| m.max(z.norm()));
    if !(peak > T::zero()) {
        return Err(Error::SingularKernel);
    }
    let leak = spec.data.iter().fold(T::zero(), |m, z| m.max(z.im.abs()));
    let leak_tol = T::lit(1e-10).max(T::epsilon() * T::lit(1e3)) * peak.max(T::one());
    debug_assert!(leak <= leak_tol, "autocorrelation spectrum has imaginary part {leak:?}");
    let floor = eps_rel * peak;
    let mut floored = 0;
    let spectrum = spec
        .data
        .iter()
        .map(|z| {
            let re = z.re;
            let v = if re.abs() < floor {
                floored += 1;
                if re < T::zero() {
                    -floor
                } else {
                    floor
                }
            } else {
                re
            };
            Complex::new(v.recip(), T::zero())
        })
        .collect();
    Ok(InvFilter { rows, cols, spectrum, eps: floor, floored })
}

/// Circular convolution of every channel with `k` via the stored spectrum.
pub fn apply_inv<T: Scalar>(f: &InvFilter<T>, img: &Image<T>) -> Result<Image<T>> {
    if img.height() != f.rows || img.width() != f.cols {
        return Err(Error::InvalidDims(format!(
            "image {}x{} vs inverse filter grid {}x{}",
            img.width(),
            img.height(),
            f.cols,
            f.rows
        )));
    }
    let mut out = Image::zeros(img.width(), img.height(), img.channels());
    for c in 0..img.channels() {
        let mut spec = fft2(&ComplexGrid::from_real(f.rows, f.cols, img.plane(c)));
        for (z, k) in spec.data.iter_mut().zip(&f.spectrum) {
            *z = *z * *k;
        }
        let back = ifft2(&spec);
        for (dst, z) in out.plane_mut(c).iter_mut().zip(&back.data) {
            *dst = z.re;
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct KernelDoc {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    label: String,
}

/// Parses the `{"rows":R,"cols":C,"taps":[...]}` document.
pub fn parse_kernel_json<T: Scalar>(text: &str, normalize: bool) -> Result<Kernel<T>> {
    let doc: KernelDoc =
        serde_json::from_str(text).map_err(|e| Error::KernelFormat(format!("json: {e}")))?;
    let k = Kernel::new(doc.rows, doc.cols, doc.taps.into_iter().map(T::lit).collect())?
        .with_label(doc.label);
    Ok(if normalize { k.normalized() } else { k })
}

pub fn kernel_to_json<T: Scalar>(k: &Kernel<T>) -> String {
    let doc = KernelDoc {
        rows: k.rows,
        cols: k.cols,
        taps: k.taps.iter().map(|t| t.as_f64()).collect(),
        label: k.label.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("kernel serializes")
}

pub fn load_kernel<T: Scalar>(path: impl AsRef<Path>, normalize: bool) -> Result<Kernel<T>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_kernel_json(&text, normalize)
}

pub fn save_kernel<T: Scalar>(k: &Kernel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), kernel_to_json(k))
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagekit::{conv2d, downsample, BoundaryMode};

    /// Spatial route: periodic convolution with h, then with mirror(h), then
    /// decimation, all applied to a delta on the HR grid.
    fn brute_composed(h: &Kernel<f64>, factor: usize, rows: usize, cols: usize) -> Vec<f64> {
        let mut delta = Image::<f64>::zeros(cols * factor, rows * factor, 1);
        delta.set(0, 0, 0, 1.0);
        let a = conv2d(&delta, h, BoundaryMode::Periodic);
        let b = conv2d(&a, &h.mirror(), BoundaryMode::Periodic);
        downsample(&b, factor).unwrap().into_vec()
    }

    #[test]
    fn even_kernels_pad_on_high_side() {
        let k = Kernel::<f64>::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((k.rows(), k.cols()), (3, 3));
        assert_eq!(k.taps(), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(k.mirror().taps(), &[0.0, 0.0, 0.0, 0.0, 4.0, 3.0, 0.0, 2.0, 1.0]);
    }

    #[test]
    fn mirror_is_involution_and_keeps_sum() {
        let k = Kernel::<f64>::new(3, 5, (0..15).map(|v| v as f64 * 0.37 - 1.0).collect()).unwrap();
        assert_eq!(k.mirror().mirror(), k);
        assert!((k.mirror().sum() - k.sum()).abs() < 1e-12);
        let g = Kernel::<f64>::gaussian(1.2, 3).unwrap();
        assert_eq!(g.mirror().taps(), g.taps());
    }

    #[test]
    fn bicubic_properties() {
        assert_eq!(bicubic_kernel::<f64>(1).taps(), &[1.0]);
        for f in [2usize, 3, 4] {
            let k = bicubic_kernel::<f64>(f);
            assert!((k.sum() - 1.0).abs() < 1e-12);
            assert_eq!(k.rows() % 2, 1);
            // The nonzero block is symmetric under a 180-degree rotation.
            let n = if f % 2 == 0 { 4 * f } else { 4 * f - 1 };
            for i in 0..n {
                for j in 0..n {
                    assert!((k.at(i, j) - k.at(n - 1 - i, n - 1 - j)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn bicubic_preserves_constants_through_degradation() {
        let img = Image::<f64>::filled(16, 16, 1, 0.6);
        let k = bicubic_kernel::<f64>(2);
        let y = downsample(&conv2d(&img, &k, BoundaryMode::Periodic), 2).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn compose_delta_cases() {
        let d = Kernel::<f64>::delta();
        for f in [1, 2] {
            let g = compose_downsampled(&d, f, 4, 4).unwrap();
            assert_eq!(g[0], 1.0);
            assert!(g[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn compose_matches_spatial_brute_force() {
        let h = bicubic_kernel::<f64>(2);
        let g = compose_downsampled(&h, 2, 16, 16).unwrap();
        let b = brute_composed(&h, 2, 16, 16);
        let err = g.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "{err}");
        let r = Kernel::<f64>::new(5, 3, (0..15).map(|v| ((v * 7) % 5) as f64 + 0.5).collect()).unwrap();
        let g = compose_downsampled(&r, 3, 3, 4).unwrap();
        let b = brute_composed(&r, 3, 3, 4);
        let err = g.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn compose_rejects_small_grid() {
        let h = bicubic_kernel::<f64>(4);
        assert!(matches!(compose_downsampled(&h, 4, 2, 8), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn delta_inverse_is_all_ones() {
        for f in [1, 2, 3] {
            let inv = invert_composed(&Kernel::<f64>::delta(), f, 4, 6, DEFAULT_EPS).unwrap();
            assert!(inv.spectrum().iter().all(|z| (z.re - 1.0).abs() < 1e-15 && z.im == 0.0));
            assert_eq!(inv.floored_bins(), 0);
        }
    }

    #[test]
    fn inverse_undoes_composed_filter() {
        let h = bicubic_kernel::<f64>(2);
        let inv = invert_composed(&h, 2, 32, 32, DEFAULT_EPS).unwrap();
        assert_eq!(inv.floored_bins(), 0);
        let g = compose_downsampled(&h, 2, 32, 32).unwrap();
        let out = apply_inv(&inv, &Image::from_vec(32, 32, 1, g).unwrap()).unwrap();
        let mut err: f64 = 0.0;
        for (i, v) in out.data().iter().enumerate() {
            let want = if i == 0 { 1.0 } else { 0.0 };
            err = err.max((v - want).abs());
        }
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn unnormalized_scaling_scales_inverse() {
        let h = bicubic_kernel::<f64>(2);
        let a = invert_composed(&h, 2, 8, 8, DEFAULT_EPS).unwrap();
        let b = invert_composed(&h.clone().scaled(3.0), 2, 8, 8, DEFAULT_EPS).unwrap();
        for (za, zb) in a.spectrum().iter().zip(b.spectrum()) {
            assert!((zb.re - za.re / 9.0).abs() <= 1e-12 * za.re.abs());
        }
        let renorm = h.clone().scaled(3.0).normalized();
        assert!(renorm.taps().iter().zip(h.taps()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn zero_kernel_is_singular() {
        let z = Kernel::<f64>::new(3, 3, vec![0.0; 9]).unwrap();
        assert!(matches!(invert_composed(&z, 2, 4, 4, DEFAULT_EPS), Err(Error::SingularKernel)));
    }

    #[test]
    fn apply_inv_identity_and_dims() {
        let img = Image::<f64>::from_fn(5, 3, 2, |c, y, x| (c + y * 3 + x) as f64);
        let id = InvFilter::identity(3, 5);
        assert!(apply_inv(&id, &img).unwrap().max_abs_diff(&img).unwrap() < 1e-12);
        assert!(apply_inv(&InvFilter::identity(5, 3), &img).is_err());
    }

    #[test]
    fn floored_bins_are_counted() {
        // Box of width 2 decimated by 1 has a spectral zero at Nyquist.
        let h = Kernel::<f64>::new(1, 2, vec![0.5, 0.5]).unwrap();
        let inv = invert_composed(&h, 1, 1, 8, DEFAULT_EPS).unwrap();
        assert_eq!(inv.floored_bins(), 1);
        assert!(inv.spectrum().iter().all(|z| z.re.is_finite()));
    }

    #[test]
    fn json_round_trip_and_normalization() {
        let k = Kernel::<f64>::gaussian(0.8, 2).unwrap();
        let back: Kernel<f64> = parse_kernel_json(&kernel_to_json(&k), false).unwrap();
        assert!(back.taps().iter().zip(k.taps()).all(|(a, b)| (a - b).abs() <= 1e-15));
        let two: Kernel<f64> =
            parse_kernel_json(r#"{"rows":1,"cols":3,"taps":[0.5,1.0,0.5]}"#, true).unwrap();
        assert!((two.sum() - 1.0).abs() < 1e-15);
        assert!(matches!(
            parse_kernel_json::<f64>(r#"{"rows":1,"cols":1,"taps":[]}"#, true),
            Err(Error::KernelFormat(_))
        ));
        assert!(matches!(parse_kernel_json::<f64>("{rows:", true), Err(Error::KernelFormat(_))));
        assert!(matches!(
            parse_kernel_json::<f64>(r#"{"rows":2,"cols":2,"taps":[1,2,3]}"#, true),
            Err(Error::KernelFormat(_))
        ));
    }
}
