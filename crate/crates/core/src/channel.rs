//! Complex-valued primitives, array steering vectors and seeded channel draws.
//!
//! All randomness is drawn from [`RngStream`] values: a ChaCha8 generator
//! keyed by a `(seed, stream)` pair, so identical pairs reproduce identical
//! draw sequences regardless of which thread consumes them.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Index;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K-factors at or above this value are treated as a pure line-of-sight channel.
pub const RICIAN_K_INFINITE: f64 = 1e12;

/// Dense complex matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector from a list of entries.
    pub fn column_vector(data: Vec<Complex64>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(n, 1, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    /// Copy of column `c` as an `rows x 1` matrix.
    pub fn column(&self, c: usize) -> ComplexMatrix {
        let data = (0..self.rows).map(|r| self.get(r, c)).collect();
        ComplexMatrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// First `n` columns.
    pub fn leading_columns(&self, n: usize) -> Result<ComplexMatrix> {
        if n > self.cols {
            return Err(Error::dim(format!("requested {n} of {} columns", self.cols)));
        }
        let mut data = Vec::with_capacity(self.rows * n);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols..r * self.cols + n]);
        }
        Ok(ComplexMatrix {
            rows: self.rows,
            cols: n,
            data,
        })
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn scale(&self, s: Complex64) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> ComplexMatrix {
        self.scale(Complex64::new(s, 0.0))
    }

    pub fn conj_transpose(&self) -> ComplexMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c).conj());
            }
        }
        ComplexMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matmul(&self, rhs: &ComplexMatrix) -> Result<ComplexMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = ComplexMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                for c in 0..rhs.cols {
                    out.data[r * rhs.cols + c] += a * rhs.get(k, c);
                }
            }
        }
        Ok(out)
    }

    /// Outer product `a * b^H` of two column vectors.
    pub fn outer(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
        if a.cols != 1 || b.cols != 1 {
            return Err(Error::dim("outer product needs column vectors"));
        }
        a.matmul(&b.conj_transpose())
    }

    /// Inner product `a^H b` of two equal-length column vectors.
    pub fn inner(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<Complex64> {
        if a.cols != 1 || b.cols != 1 || a.rows != b.rows {
            return Err(Error::dim("inner product needs equal-length column vectors"));
        }
        Ok(a.data.iter().zip(&b.data).map(|(x, y)| x.conj() * y).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

/// Uniform linear array geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub n_elements: usize,
    pub element_spacing_wavelengths: f64,
}

impl SteeringConfig {
    /// Half-wavelength ULA with `n_elements` elements.
    pub fn ula(n_elements: usize) -> Self {
        Self {
            n_elements,
            element_spacing_wavelengths: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements == 0 {
            return Err(Error::domain("array needs at least one element"));
        }
        if !(self.element_spacing_wavelengths > 0.0 && self.element_spacing_wavelengths.is_finite()) {
            return Err(Error::domain("element spacing must be positive"));
        }
        Ok(())
    }
}

/// Seeded, splittable random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Stream keyed by a path of identifiers (domain tag, client, round, ...).
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let stream = path
            .iter()
            .fold(0x243f_6a88_85a3_08d3_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)));
        Self::new(seed, stream)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..=hi)
    }

    /// Circularly-symmetric complex Gaussian with unit variance.
    pub fn complex_normal(&mut self) -> Complex64 {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Weights in `[-bound, bound]`.
    pub fn symmetric_uniform(&mut self, bound: f64) -> f64 {
        self.rng.random_range(-bound..=bound)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_angle(theta: f64) -> Result<()> {
    if !theta.is_finite() || theta.abs() > FRAC_PI_2 {
        return Err(Error::domain(format!(
            "steering angle {theta} outside [-pi/2, pi/2]"
        )));
    }
    Ok(())
}

/// ULA response toward `theta`: entry `i` is `exp(j 2 pi d i sin(theta))`.
pub fn steering_vector(theta: f64, cfg: &SteeringConfig) -> Result<ComplexMatrix> {
    check_angle(theta)?;
    cfg.validate()?;
    let phase_step = 2.0 * PI * cfg.element_spacing_wavelengths * theta.sin();
    let data = (0..cfg.n_elements)
        .map(|i| Complex64::from_polar(1.0, phase_step * i as f64))
        .collect();
    ComplexMatrix::column_vector(data)
}

/// Rank-one point-target response `beta * a(theta) * b(theta)^H`.
pub fn target_response(
    beta: Complex64,
    theta: f64,
    rx_cfg: &SteeringConfig,
    tx_cfg: &SteeringConfig,
) -> Result<ComplexMatrix> {
    let a = steering_vector(theta, rx_cfg)?;
    let b = steering_vector(theta, tx_cfg)?;
    Ok(ComplexMatrix::outer(&a, &b)?.scale(beta))
}

/// Rician fading matrix with a single random line-of-sight phase per matrix.
pub fn sample_rician(
    rng: &mut RngStream,
    rows: usize,
    cols: usize,
    k_factor: f64,
    mean_power: f64,
) -> Result<ComplexMatrix> {
    if !(mean_power > 0.0 && mean_power.is_finite()) {
        return Err(Error::domain(format!("mean power must be positive, got {mean_power}")));
    }
    if !(k_factor >= 0.0) {
        return Err(Error::domain(format!("Rician K-factor must be >= 0, got {k_factor}")));
    }
    let (los_w, nlos_w) = if k_factor >= RICIAN_K_INFINITE {
        (1.0, 0.0)
    } else {
        ((k_factor / (k_factor + 1.0)).sqrt(), (1.0 / (k_factor + 1.0)).sqrt())
    };
    let amp = mean_power.sqrt();
    let los = Complex64::from_polar(1.0, rng.uniform(-PI, PI));
    let data = (0..rows * cols)
        .map(|_| {
            let scatter = rng.complex_normal();
            (los * los_w + scatter * nlos_w) * amp
        })
        .collect();
    ComplexMatrix::from_vec(rows, cols, data)
}

/// Radar cross-section coefficient drawn from `CN(0, alpha_s)`.
pub fn sample_rcs(rng: &mut RngStream, alpha_s: f64) -> Result<Complex64> {
    if !(alpha_s > 0.0 && alpha_s.is_finite()) {
        return Err(Error::domain(format!("RCS variance must be positive, got {alpha_s}")));
    }
    Ok(rng.complex_normal() * alpha_s.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn steering_broadside_is_all_ones() {
        let v = steering_vector(0.0, &SteeringConfig::ula(4)).unwrap();
        for z in v.as_slice() {
            assert_eq!(*z, c(1.0, 0.0));
        }
    }

    #[test]
    fn steering_endfire_alternates_sign() {
        let v = steering_vector(FRAC_PI_2, &SteeringConfig::ula(2)).unwrap();
        assert_eq!(v[(0, 0)], c(1.0, 0.0));
        assert_abs_diff_eq!(v[(1, 0)].re, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[(1, 0)].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn steering_thirty_degrees_matches_reference() {
        // exp(j*pi*i*sin(pi/6)) for i = 0, 1, 2 evaluated at 50 digits
        let expected = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0)];
        let v = steering_vector(PI / 6.0, &SteeringConfig::ula(3)).unwrap();
        for (z, e) in v.as_slice().iter().zip(expected) {
            assert_abs_diff_eq!(z.re, e.re, epsilon = 1e-12);
            assert_abs_diff_eq!(z.im, e.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn steering_rejects_out_of_range_angles() {
        let cfg = SteeringConfig::ula(4);
        assert!(matches!(steering_vector(1.6, &cfg), Err(Error::Domain(_))));
        assert!(matches!(steering_vector(-1.6, &cfg), Err(Error::Domain(_))));
        assert!(matches!(steering_vector(f64::NAN, &cfg), Err(Error::Domain(_))));
        let bad = SteeringConfig {
            n_elements: 0,
            element_spacing_wavelengths: 0.5,
        };
        assert!(steering_vector(0.0, &bad).is_err());
    }

    #[test]
    fn target_response_examples() {
        let cfg = SteeringConfig::ula(3);
        let zero = target_response(c(0.0, 0.0), 0.4, &cfg, &cfg).unwrap();
        assert_eq!(zero.frobenius_norm_sq(), 0.0);

        let ones = target_response(c(1.0, 0.0), 0.0, &cfg, &cfg).unwrap();
        assert!(ones.as_slice().iter().all(|z| *z == c(1.0, 0.0)));

        let cfg2 = SteeringConfig::ula(2);
        let g = target_response(c(2.0, 0.0), PI / 6.0, &cfg2, &cfg2).unwrap();
        assert_abs_diff_eq!(g.frobenius_norm(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rician_infinite_k_has_constant_modulus() {
        let mut rng = RngStream::new(3, 0);
        let h = sample_rician(&mut rng, 4, 3, RICIAN_K_INFINITE, 2.5).unwrap();
        for z in h.as_slice() {
            assert_abs_diff_eq!(z.norm(), 2.5f64.sqrt(), epsilon = 1e-12);
        }
    }

    fn empirical_power(k: f64, p: f64) -> f64 {
        let mut rng = RngStream::new(17, 5);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n / 10 {
            acc += sample_rician(&mut rng, 10, 1, k, p).unwrap().frobenius_norm_sq();
        }
        acc / n as f64
    }

    #[test]
    fn rician_monte_carlo_power() {
        assert!((empirical_power(0.0, 1.0) - 1.0).abs() < 0.02);
        assert!((empirical_power(3.0, 1.0) - 1.0).abs() < 0.02);
        assert!((empirical_power(3.0, 0.1) / 0.1 - 1.0).abs() < 0.02);
    }

    #[test]
    fn rician_rejects_bad_arguments() {
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(sample_rician(&mut rng, 2, 2, 3.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(sample_rician(&mut rng, 2, 2, -1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn rcs_monte_carlo_variance() {
        for alpha in [1.0, 4.0] {
            let mut rng = RngStream::new(99, 1);
            let n = 100_000;
            let mean: f64 = (0..n)
                .map(|_| sample_rcs(&mut rng, alpha).unwrap().norm_sqr())
                .sum::<f64>()
                / n as f64;
            assert!((mean / alpha - 1.0).abs() < 0.02, "alpha {alpha}: {mean}");
        }
    }

    #[test]
    fn rcs_is_deterministic_and_validated() {
        let a = sample_rcs(&mut RngStream::new(5, 9), 1.0).unwrap();
        let b = sample_rcs(&mut RngStream::new(5, 9), 1.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_rcs(&mut RngStream::new(5, 9), 0.0).is_err());
    }

    #[test]
    fn derived_streams_are_distinct_and_stable() {
        let a = RngStream::derive(1, &[2, 3]).complex_normal();
        let b = RngStream::derive(1, &[2, 3]).complex_normal();
        let c = RngStream::derive(1, &[3, 2]).complex_normal();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_is_thread_independent() {
        let here = sample_rician(&mut RngStream::new(11, 4), 3, 3, 3.0, 1.0).unwrap();
        let there = std::thread::spawn(|| {
            sample_rician(&mut RngStream::new(11, 4), 3, 3, 3.0, 1.0).unwrap()
        })
        .join()
        .unwrap();
        assert_eq!(here, there);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let r = ComplexMatrix::from_vec(1, 2, vec![c(1.0, 0.0), c(f64::NAN, 0.0)]);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert!(ComplexMatrix::from_vec(2, 2, vec![c(1.0, 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn steering_entries_have_unit_modulus(theta in -FRAC_PI_2..=FRAC_PI_2, n in 1usize..16) {
            let v = steering_vector(theta, &SteeringConfig::ula(n)).unwrap();
            for z in v.as_slice() {
                prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn target_response_is_outer_product(
            theta in -FRAC_PI_2..=FRAC_PI_2,
            re in -3.0f64..3.0,
            im in -3.0f64..3.0,
        ) {
            let (rx, tx) = (SteeringConfig::ula(3), SteeringConfig::ula(4));
            let beta = c(re, im);
            let g = target_response(beta, theta, &rx, &tx).unwrap();
            let a = steering_vector(theta, &rx).unwrap();
            let b = steering_vector(theta, &tx).unwrap();
            for r in 0..3 {
                for col in 0..4 {
                    let expect = beta * a[(r, 0)] * b[(col, 0)].conj();
                    prop_assert!((g[(r, col)] - expect).norm() < 1e-12);
                }
            }
            let fro = beta.norm() * 12f64.sqrt();
            prop_assert!((g.frobenius_norm() - fro).abs() < 1e-12 * (1.0 + fro));
        }

        #[test]
        fn rician_is_scale_covariant(seed in any::<u64>(), p in 0.01f64..100.0) {
            let scaled = sample_rician(&mut RngStream::new(seed, 2), 4, 2, 3.0, p).unwrap();
            let unit = sample_rician(&mut RngStream::new(seed, 2), 4, 2, 3.0, 1.0).unwrap();
            let back = scaled.scale_real(1.0 / p.sqrt());
            for (x, y) in back.as_slice().iter().zip(unit.as_slice()) {
                prop_assert!((x - y).norm() < 1e-12);
            }
        }
    }
}
