use super::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Keeps the samples whose row and column are multiples of `factor`.
pub fn downsample<T: Scalar>(img: &Image<T>, factor: usize) -> Result<Image<T>> {
    let (w, h, c) = img.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::InvalidDims(format!("{w}x{h} not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    Ok(Image::from_fn(w / factor, h / factor, c, |ch, y, x| img.get(ch, y * factor, x * factor)))
}

/// Zero-insertion upsampling: the exact adjoint of [`downsample`].
pub fn upsample<T: Scalar>(img: &Image<T>, factor: usize) -> Image<T> {
    assert!(factor >= 1, "upsampling factor must be at least 1");
    if factor == 1 {
        return img.clone();
    }
    let (w, h, c) = img.dims();
    let mut out = Image::zeros(w * factor, h * factor, c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y * factor, x * factor, img.get(ch, y, x));
            }
        }
    }
    out
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn area_downscale<T: Scalar>(img: &Image<T>, factor: usize) -> Result<Image<T>> {
    let (w, h, c) = img.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::InvalidDims(format!("{w}x{h} not divisible by factor {factor}")));
    }
    let norm = T::of_usize(factor * factor).recip();
    Ok(Image::from_fn(w / factor, h / factor, c, |ch, y, x| {
        let mut acc = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img.get(ch, y * factor + dy, x * factor + dx);
            }
        }
        acc * norm
    }))
}

/// Extends the raster by `pad` samples on every side, repeating edge values.
pub fn replicate_pad<T: Scalar>(img: &Image<T>, pad: usize) -> Image<T> {
    let (w, h, c) = img.dims();
    Image::from_fn(w + 2 * pad, h + 2 * pad, c, |ch, y, x| {
        let sy = y.saturating_sub(pad).min(h - 1);
        let sx = x.saturating_sub(pad).min(w - 1);
        img.get(ch, sy, sx)
    })
}

/// Adjoint of [`replicate_pad`]: folds the border back onto the edge samples.
pub fn replicate_pad_adjoint<T: Scalar>(img: &Image<T>, pad: usize) -> Result<Image<T>> {
    let (pw, ph, c) = img.dims();
    if pw <= 2 * pad || ph <= 2 * pad {
        return Err(Error::InvalidDims(format!("{pw}x{ph} too small to remove padding {pad}")));
    }
    let (w, h) = (pw - 2 * pad, ph - 2 * pad);
    let mut out = Image::zeros(w, h, c);
    for ch in 0..c {
        for y in 0..ph {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..pw {
                let sx = x.saturating_sub(pad).min(w - 1);
                let v = out.get(ch, sy, sx) + img.get(ch, y, x);
                out.set(ch, sy, sx, v);
            }
        }
    }
    Ok(out)
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

fn resize_axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    // Widen the kernel when shrinking so it also anti-aliases.
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - 2.0 * support).floor() as isize;
            let hi = (center + 2.0 * support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for s in lo..=hi {
                let wgt = keys_cubic((s as f64 - center) / support);
                if wgt == 0.0 {
                    continue;
                }
                let idx = s.clamp(0, src as isize - 1) as usize;
                total += wgt;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable Keys-cubic resize to an arbitrary target size.
pub fn resize_bicubic<T: Scalar>(img: &Image<T>, width: usize, height: usize) -> Result<Image<T>> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidDims("resize to an empty raster".into()));
    }
    let (w, h, c) = img.dims();
    if (w, h) == (width, height) {
        return Ok(img.clone());
    }
    let wx = resize_axis_weights(w, width);
    let wy = resize_axis_weights(h, height);
    let horiz = Image::from_fn(width, h, c, |ch, y, x| {
        wx[x].iter().fold(T::zero(), |acc, &(j, wt)| acc + T::lit(wt) * img.get(ch, y, j))
    });
    Ok(Image::from_fn(width, height, c, |ch, y, x| {
        wy[y].iter().fold(T::zero(), |acc, &(i, wt)| acc + T::lit(wt) * horiz.get(ch, i, x))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> Image<f64> {
        Image::from_fn(w, h, 1, |_, y, x| (y * w + x) as f64)
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 2, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn downsample_ramp() {
        let d = downsample(&ramp(4, 4), 2).unwrap();
        assert_eq!(d.data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(downsample(&ramp(4, 4), 1).unwrap(), ramp(4, 4));
        assert!(downsample(&ramp(5, 4), 2).is_err());
    }

    #[test]
    fn upsample_inserts_zeros() {
        let one = Image::<f64>::filled(1, 1, 1, 1.0);
        assert_eq!(upsample(&one, 2).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(upsample(&one, 1), one);
    }

    #[test]
    fn down_up_composites() {
        let img = random_image(6, 9, 1);
        for f in [1, 3] {
            let d = downsample(&img, f).unwrap();
            assert_eq!(downsample(&upsample(&d, f), f).unwrap(), d);
        }
    }

    #[test]
    fn upsample_is_adjoint_of_downsample() {
        let u = random_image(3, 4, 2);
        let v = random_image(6, 8, 3);
        let lhs = upsample(&u, 2).dot(&v).unwrap();
        let rhs = u.dot(&downsample(&v, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn replicate_pad_adjoint_identity() {
        let u = random_image(5, 4, 4);
        let v = random_image(9, 8, 5);
        let lhs = replicate_pad(&u, 2).dot(&v).unwrap();
        let rhs = u.dot(&replicate_pad_adjoint(&v, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn area_downscale_averages_blocks() {
        let d = area_downscale(&ramp(4, 2), 2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5]);
    }

    #[test]
    fn bicubic_resize_keeps_constants() {
        let img = Image::<f64>::filled(5, 7, 1, 0.25);
        for (w, h) in [(9, 3), (10, 14), (2, 2)] {
            let r = resize_bicubic(&img, w, h).unwrap();
            assert_eq!(r.dims(), (w, h, 1));
            assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
    }
}
