use num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;

/// Row-major complex raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexGrid { rows, cols, data: vec![Complex::new(T::zero(), T::zero()); rows * cols] }
    }

    pub fn from_real(rows: usize, cols: usize, real: &[T]) -> Self {
        assert_eq!(real.len(), rows * cols);
        ComplexGrid {
            rows,
            cols,
            data: real.iter().map(|&r| Complex::new(r, T::zero())).collect(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Complex<T> {
        self.data[r * self.cols + c]
    }

    pub fn real(&self) -> Vec<T> {
        self.data.iter().map(|z| z.re).collect()
    }
}

fn transform<T: Scalar>(grid: &mut ComplexGrid<T>, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let (rows, cols) = (grid.rows, grid.cols);
    let row_fft = if inverse { planner.plan_fft_inverse(cols) } else { planner.plan_fft_forward(cols) };
    for row in grid.data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(rows) } else { planner.plan_fft_forward(rows) };
    let mut column = vec![Complex::new(T::zero(), T::zero()); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = grid.data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            grid.data[r * cols + c] = column[r];
        }
    }
}

/// Unnormalized forward 2-D DFT.
pub fn fft2<T: Scalar>(grid: &ComplexGrid<T>) -> ComplexGrid<T> {
    let mut out = grid.clone();
    transform(&mut out, false);
    out
}

/// Inverse 2-D DFT, scaled by `1 / (rows * cols)` so that `ifft2(fft2(g)) = g`.
pub fn ifft2<T: Scalar>(grid: &ComplexGrid<T>) -> ComplexGrid<T> {
    let mut out = grid.clone();
    transform(&mut out, true);
    let norm = T::of_usize(grid.rows * grid.cols).recip();
    out.data.iter_mut().for_each(|z| *z = *z * norm);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rows: usize, cols: usize, seed: u64) -> ComplexGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexGrid {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    fn direct_dft(g: &ComplexGrid<f64>) -> ComplexGrid<f64> {
        let mut out = ComplexGrid::zeros(g.rows, g.cols);
        for u in 0..g.rows {
            for v in 0..g.cols {
                let mut acc = Complex::new(0.0, 0.0);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((u * r) as f64 / g.rows as f64 + (v * c) as f64 / g.cols as f64);
                        acc += g.at(r, c) * Complex::from_polar(1.0, phase);
                    }
                }
                out.data[u * g.cols + v] = acc;
            }
        }
        out
    }

    fn max_diff(a: &ComplexGrid<f64>, b: &ComplexGrid<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut g = ComplexGrid::<f64>::zeros(4, 6);
        g.data[0] = Complex::new(1.0, 0.0);
        let f = fft2(&g);
        assert!(f.data.iter().all(|z| (z - Complex::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn constant_concentrates_at_dc() {
        let g = ComplexGrid::from_real(3, 5, &[0.5f64; 15]);
        let f = fft2(&g);
        assert!((f.data[0].re - 7.5).abs() < 1e-12);
        assert!(f.data[1..].iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn matches_direct_dft_and_round_trips() {
        let g = random_grid(8, 8, 11);
        let f = fft2(&g);
        assert!(max_diff(&f, &direct_dft(&g)) < 1e-10);
        assert!(max_diff(&ifft2(&f), &g) <= 1e-10);
    }

    #[test]
    fn parseval_odd_dims() {
        let g = random_grid(5, 7, 12);
        let f = fft2(&g);
        let e_space: f64 = g.data.iter().map(|z| z.norm_sqr()).sum();
        let e_freq: f64 = f.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / 35.0;
        assert!((e_space - e_freq).abs() <= 1e-8 * e_space);
        assert!(max_diff(&ifft2(&f), &g) <= 1e-10);
    }
}
