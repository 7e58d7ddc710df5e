use super::{BoundaryMode, Image};
use crate::kernel::Kernel;
use crate::scalar::Scalar;

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Same-size 2-D convolution of every channel with `taps`.
///
/// `out[y, x] = sum_{i,j} h[i, j] * img[y - (i - ci), x - (j - cj)]` where
/// `(ci, cj)` is the kernel center. Out-of-range indices wrap or clamp
/// according to `mode`.
pub fn conv2d<T: Scalar>(img: &Image<T>, taps: &Kernel<T>, mode: BoundaryMode) -> Image<T> {
    let (w, h, ch) = img.dims();
    let (kr, kc) = (taps.rows(), taps.cols());
    let (cr, cc) = ((kr / 2) as isize, (kc / 2) as isize);
    let index = match mode {
        BoundaryMode::Periodic => wrap,
        BoundaryMode::Replicate => clamp,
    };
    // Offsets depend only on (row, tap) so they are tabulated once.
    let rows: Vec<Vec<usize>> = (0..h)
        .map(|y| (0..kr).map(|i| index(y as isize - (i as isize - cr), h)).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..w)
        .map(|x| (0..kc).map(|j| index(x as isize - (j as isize - cc), w)).collect())
        .collect();
    let k = taps.taps();
    let mut out = Image::zeros(w, h, ch);
    for c in 0..ch {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (i, &sy) in rows[y].iter().enumerate() {
                    let row = &src[sy * w..(sy + 1) * w];
                    let krow = &k[i * kc..(i + 1) * kc];
                    for (j, &sx) in cols[x].iter().enumerate() {
                        acc += krow[j] * row[sx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Exact adjoint of [`conv2d`] for the same kernel and boundary mode.
///
/// For `Periodic` this is convolution with the mirrored kernel; for
/// `Replicate` the clamped reads become scatter-adds onto the edge samples.
pub fn conv2d_adjoint<T: Scalar>(img: &Image<T>, taps: &Kernel<T>, mode: BoundaryMode) -> Image<T> {
    if mode == BoundaryMode::Periodic {
        return conv2d(img, &taps.mirror(), mode);
    }
    let (w, h, ch) = img.dims();
    let (kr, kc) = (taps.rows(), taps.cols());
    let (cr, cc) = ((kr / 2) as isize, (kc / 2) as isize);
    let k = taps.taps();
    let mut out = Image::zeros(w, h, ch);
    for c in 0..ch {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let g = src[y * w + x];
                if g == T::zero() {
                    continue;
                }
                for i in 0..kr {
                    let sy = clamp(y as isize - (i as isize - cr), h);
                    for j in 0..kc {
                        let sx = clamp(x as isize - (j as isize - cc), w);
                        dst[sy * w + sx] += k[i * kc + j] * g;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(r: usize, c: usize, seed: u64) -> Kernel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Kernel::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let img = random_image(5, 4, 2, 1);
        for mode in [BoundaryMode::Periodic, BoundaryMode::Replicate] {
            assert_eq!(conv2d(&img, &Kernel::delta(), mode), img);
        }
    }

    #[test]
    fn box_filter_preserves_constant() {
        let img = Image::<f64>::filled(6, 5, 1, 0.37);
        let bx = Kernel::new(3, 3, vec![1.0 / 9.0; 9]).unwrap();
        for mode in [BoundaryMode::Periodic, BoundaryMode::Replicate] {
            let out = conv2d(&img, &bx, mode);
            assert!(out.max_abs_diff(&img).unwrap() < 1e-15);
        }
    }

    #[test]
    fn periodic_matches_double_loop() {
        let img = random_image(4, 4, 1, 2);
        let k = random_kernel(3, 3, 3);
        let out = conv2d(&img, &k, BoundaryMode::Periodic);
        // Direct circular convolution written from the definition.
        let n = 4i64;
        for y in 0..4i64 {
            for x in 0..4i64 {
                let mut acc = 0.0;
                for i in 0..3i64 {
                    for j in 0..3i64 {
                        let sy = (y - (i - 1)).rem_euclid(n) as usize;
                        let sx = (x - (j - 1)).rem_euclid(n) as usize;
                        acc += k.taps()[(i * 3 + j) as usize] * img.get(0, sy, sx);
                    }
                }
                assert!((out.get(0, y as usize, x as usize) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn periodic_is_linear() {
        let u = random_image(7, 6, 2, 4);
        let v = random_image(7, 6, 2, 5);
        let k = random_kernel(3, 5, 6);
        let (a, b) = (0.7, -1.3);
        let mut lhs_in = u.scale(a);
        lhs_in.axpy(b, &v).unwrap();
        let lhs = conv2d(&lhs_in, &k, BoundaryMode::Periodic);
        let mut rhs = conv2d(&u, &k, BoundaryMode::Periodic).scale(a);
        rhs.axpy(b, &conv2d(&v, &k, BoundaryMode::Periodic)).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }

    #[test]
    fn adjoint_identity_both_modes() {
        let u = random_image(9, 7, 1, 7);
        let v = random_image(9, 7, 1, 8);
        let k = random_kernel(5, 3, 9);
        for mode in [BoundaryMode::Periodic, BoundaryMode::Replicate] {
            let lhs = conv2d(&u, &k, mode).dot(&v).unwrap();
            let rhs = u.dot(&conv2d_adjoint(&v, &k, mode)).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn replicate_clamps_edges() {
        // 1-D shift right by one: out[x] = img[x-1], edge repeats.
        let img = Image::<f64>::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let shift = Kernel::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let out = conv2d(&img, &shift, BoundaryMode::Replicate);
        assert_eq!(out.data(), &[1.0, 1.0, 2.0, 3.0]);
        let out = conv2d(&img, &shift, BoundaryMode::Periodic);
        assert_eq!(out.data(), &[4.0, 1.0, 2.0, 3.0]);
    }
}
