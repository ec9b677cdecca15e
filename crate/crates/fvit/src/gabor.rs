//! Gabor kernel evaluation and its analytic parameter gradients.
//!
//! A kernel entry is a Gaussian envelope times an oriented cosine carrier,
//!
//! ```text
//! g(x, y) = exp(-(x'^2 + g^2 y'^2) / (2 s^2)) * cos(2 pi x' / l + psi)
//! x' =  x cos(t) + y sin(t)
//! y' = -x sin(t) + y cos(t)
//! ```
//!
//! with wavelength `l`, orientation `t`, phase `psi`, aspect ratio `g` and
//! bandwidth `s` all treated as trainable scalars. Kernels are evaluated on
//! a centered integer grid (odd size only, x rightward, y downward), and
//! [`kernel_param_grads`] returns the elementwise partial derivative of the
//! kernel with respect to each of the five parameters, which is what lets a
//! convolution train through the kernel-generation formula.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The five trainable scalars of one Gabor kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborParams<T: Scalar> {
    /// Carrier wavelength in pixels, > 0.
    pub lambda: T,
    /// Kernel orientation in radians.
    pub theta: T,
    /// Carrier phase offset in radians.
    pub psi: T,
    /// Envelope aspect ratio, > 0.
    pub gamma: T,
    /// Envelope bandwidth in pixels, > 0.
    pub sigma: T,
}

impl<T: Scalar> GaborParams<T> {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.lambda, self.theta, self.psi, self.gamma, self.sigma]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Parameter("gabor parameters must be finite".into()));
        }
        if self.lambda <= T::zero() || self.gamma <= T::zero() || self.sigma <= T::zero() {
            return Err(Error::Parameter(format!(
                "lambda, gamma, sigma must be positive (got {}, {}, {})",
                self.lambda, self.gamma, self.sigma
            )));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> GaborParams<f64> {
        GaborParams {
            lambda: self.lambda.to_f64(),
            theta: self.theta.to_f64(),
            psi: self.psi.to_f64(),
            gamma: self.gamma.to_f64(),
            sigma: self.sigma.to_f64(),
        }
    }
}

/// Centered integer offset grid for an odd kernel size.
///
/// Offsets run over `[-(k-1)/2, (k-1)/2]` on both axes; for every `(x, y)`
/// on the grid, `(-x, -y)` is on the grid too, which is what makes the
/// zero-phase point symmetry of the kernel exact.
#[derive(Debug, Clone, Copy)]
pub struct KernelGrid {
    k: usize,
}

impl KernelGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::Parameter(format!(
                "kernel size must be odd and positive, got {k}"
            )));
        }
        Ok(KernelGrid { k })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    /// Offset of entry `(row, col)`; x points right, y points down.
    #[inline]
    pub fn offset(&self, row: usize, col: usize) -> (isize, isize) {
        let half = (self.k as isize - 1) / 2;
        (col as isize - half, row as isize - half)
    }
}

/// Evaluate the real-valued Gabor function at a single offset.
pub fn gabor_real<T: Scalar>(x: T, y: T, p: &GaborParams<T>) -> T {
    let (sin_t, cos_t) = (p.theta.sin(), p.theta.cos());
    let xr = x * cos_t + y * sin_t;
    let yr = -x * sin_t + y * cos_t;
    let two = T::from_f64(2.0);
    let envelope = (-(xr * xr + p.gamma * p.gamma * yr * yr) / (two * p.sigma * p.sigma)).exp();
    let phase = T::from_f64(2.0 * std::f64::consts::PI) * xr / p.lambda + p.psi;
    envelope * phase.cos()
}

/// Evaluate the kernel matrix on the centered grid.
pub fn build_kernel<T: Scalar>(k: usize, p: &GaborParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let grid = KernelGrid::new(k)?;
    let mut data = Vec::with_capacity(k * k);
    for row in 0..k {
        for col in 0..k {
            let (x, y) = grid.offset(row, col);
            data.push(gabor_real(
                T::from_f64(x as f64),
                T::from_f64(y as f64),
                p,
            ));
        }
    }
    Tensor::from_vec(&[k, k], data)
}

/// Which wavelength derivative to use. `PublishedTypo` reproduces a widely
/// circulated misprint of this derivative in which the envelope's aspect
/// term is replaced by the wavelength; it exists so the finite-difference
/// suite can demonstrate the defect executably (it fails whenever the
/// aspect ratio and wavelength differ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaGradMode {
    #[default]
    Corrected,
    PublishedTypo,
}

/// Elementwise partial derivatives of the kernel with respect to each of the
/// five parameters.
pub struct ParamGrads<T: Scalar> {
    pub d_lambda: Tensor<T>,
    pub d_theta: Tensor<T>,
    pub d_psi: Tensor<T>,
    pub d_gamma: Tensor<T>,
    pub d_sigma: Tensor<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn by_index(&self, i: usize) -> &Tensor<T> {
        match i {
            0 => &self.d_lambda,
            1 => &self.d_theta,
            2 => &self.d_psi,
            3 => &self.d_gamma,
            4 => &self.d_sigma,
            _ => panic!("gabor parameter index out of range"),
        }
    }
}

pub const PARAM_NAMES: [&str; 5] = ["lambda", "theta", "psi", "gamma", "sigma"];

pub fn kernel_param_grads<T: Scalar>(k: usize, p: &GaborParams<T>) -> Result<ParamGrads<T>> {
    kernel_param_grads_mode(k, p, LambdaGradMode::Corrected)
}

pub fn kernel_param_grads_mode<T: Scalar>(
    k: usize,
    p: &GaborParams<T>,
    mode: LambdaGradMode,
) -> Result<ParamGrads<T>> {
    p.validate()?;
    let grid = KernelGrid::new(k)?;
    let n = k * k;
    let mut dl = Vec::with_capacity(n);
    let mut dt = Vec::with_capacity(n);
    let mut dp = Vec::with_capacity(n);
    let mut dg = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);

    let two = T::from_f64(2.0);
    let two_pi = T::from_f64(2.0 * std::f64::consts::PI);
    let (sin_t, cos_t) = (p.theta.sin(), p.theta.cos());
    for row in 0..k {
        for col in 0..k {
            let (xo, yo) = grid.offset(row, col);
            let (x, y) = (T::from_f64(xo as f64), T::from_f64(yo as f64));
            let xr = x * cos_t + y * sin_t;
            let yr = -x * sin_t + y * cos_t;
            let sig2 = p.sigma * p.sigma;
            let quad = xr * xr + p.gamma * p.gamma * yr * yr;
            let env = (-quad / (two * sig2)).exp();
            let phase = two_pi * xr / p.lambda + p.psi;
            let (sin_ph, cos_ph) = (phase.sin(), phase.cos());

            dl.push(match mode {
                LambdaGradMode::Corrected => {
                    env * sin_ph * two_pi * xr / (p.lambda * p.lambda)
                }
                LambdaGradMode::PublishedTypo => {
                    let env_typo =
                        (-(xr * xr + p.lambda * p.lambda * yr * yr) / (two * sig2)).exp();
                    env_typo * sin_ph * two_pi * xr / (p.lambda * p.lambda)
                }
            });
            // x' and y' rotate with theta: dx'/dt = y', dy'/dt = -x'.
            dt.push(
                env * (xr * yr * (p.gamma * p.gamma - T::one()) / sig2 * cos_ph
                    - two_pi / p.lambda * yr * sin_ph),
            );
            dp.push(-env * sin_ph);
            dg.push(-env * cos_ph * p.gamma * yr * yr / sig2);
            ds.push(env * cos_ph * quad / (sig2 * p.sigma));
        }
    }
    Ok(ParamGrads {
        d_lambda: Tensor::from_vec(&[k, k], dl)?,
        d_theta: Tensor::from_vec(&[k, k], dt)?,
        d_psi: Tensor::from_vec(&[k, k], dp)?,
        d_gamma: Tensor::from_vec(&[k, k], dg)?,
        d_sigma: Tensor::from_vec(&[k, k], ds)?,
    })
}

/// Deterministic starting bank: orientations evenly spaced over `[0, pi)`,
/// wavelengths log-uniform in `[2, k]`, bandwidth locked to `0.56 * lambda`
/// (the classical one-octave profile), aspect `0.5`, phase `0`.
pub fn init_gabor_bank<T: Scalar>(num_kernels: usize, k: usize, seed: u64) -> Vec<GaborParams<T>> {
    assert!(num_kernels >= 1, "bank needs at least one kernel");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let lo = 2.0f64;
    let hi = (k as f64).max(lo);
    (0..num_kernels)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / num_kernels as f64;
            let lambda = if hi > lo {
                (rng.gen_range(lo.ln()..hi.ln())).exp()
            } else {
                lo
            };
            GaborParams {
                lambda: T::from_f64(lambda),
                theta: T::from_f64(theta),
                psi: T::zero(),
                gamma: T::from_f64(0.5),
                sigma: T::from_f64(0.56 * lambda),
            }
        })
        .collect()
}

/// softplus(x) = ln(1 + e^x), the positivity map for lambda/gamma/sigma.
pub fn softplus<T: Scalar>(x: T) -> T {
    // For large x, ln(1 + e^x) = x + ln(1 + e^-x); split to stay finite.
    if x > T::zero() {
        x + (T::one() + (-x).exp()).ln()
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// d/dx softplus(x) = sigmoid(x).
pub fn softplus_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus for positive y: x = ln(e^y - 1).
pub fn softplus_inverse<T: Scalar>(y: T) -> T {
    assert!(y > T::zero(), "softplus inverse needs a positive input");
    // ln(e^y - 1) = y + ln(1 - e^-y) avoids overflow for large y.
    y + (T::one() - (-y).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lambda: f64, theta: f64, psi: f64, gamma: f64, sigma: f64) -> GaborParams<f64> {
        GaborParams {
            lambda,
            theta,
            psi,
            gamma,
            sigma,
        }
    }

    fn random_params(rng: &mut ChaCha12Rng) -> GaborParams<f64> {
        params(
            rng.gen_range(2.0f64.ln()..8.0f64.ln()).exp(),
            rng.gen_range(0.0..std::f64::consts::PI),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(0.4..2.0),
            rng.gen_range(0.8..4.0),
        )
    }

    #[test]
    fn center_of_grid_is_cos_psi() {
        let p = params(3.0, 0.7, 0.0, 0.9, 1.5);
        assert_eq!(gabor_real(0.0, 0.0, &p), 1.0);
        let p2 = params(3.0, 0.7, 1.1, 0.9, 1.5);
        assert!((gabor_real(0.0, 0.0, &p2) - 1.1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn one_pixel_right_closed_form() {
        // exp(-1/2) * cos(pi) = -0.606531
        let p = params(2.0, 0.0, 0.0, 1.0, 1.0);
        let v = gabor_real(1.0, 0.0, &p);
        assert!((v - (-0.6065306597126334)).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn kernel_of_size_one_is_cos_psi() {
        let p = params(4.0, 1.0, 0.3, 0.8, 2.0);
        let k = build_kernel(1, &p).unwrap();
        assert_eq!(k.shape(), &[1, 1]);
        assert!((k.data()[0] - 0.3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn even_or_zero_kernel_size_is_rejected() {
        let p = params(4.0, 0.0, 0.0, 1.0, 1.0);
        assert!(matches!(build_kernel(4, &p), Err(Error::Parameter(_))));
        assert!(matches!(build_kernel(0, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(build_kernel(3, &params(-1.0, 0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(build_kernel(3, &params(2.0, 0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(build_kernel(3, &params(2.0, f64::NAN, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn zero_phase_kernel_is_point_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut p = random_params(&mut rng);
            p.psi = 0.0;
            let k = 7;
            let kern = build_kernel(k, &p).unwrap();
            for i in 0..k {
                for j in 0..k {
                    let a = kern.data()[i * k + j];
                    let b = kern.data()[(k - 1 - i) * k + (k - 1 - j)];
                    assert!((a - b).abs() <= 1e-12, "asymmetry at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn theta_plus_pi_matches_at_zero_phase() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mut p = random_params(&mut rng);
            p.psi = 0.0;
            let a = build_kernel(5, &p).unwrap();
            let mut q = p;
            q.theta += std::f64::consts::PI;
            let b = build_kernel(5, &q).unwrap();
            assert!(crate::tensor::max_abs_diff(&a, &b) <= 1e-12);
        }
    }

    #[test]
    fn axis_aligned_isotropic_kernel_factorizes() {
        // theta = 0, gamma = 1: the kernel is an outer product of a 1-D
        // carrier profile along x and a 1-D Gaussian along y. Both profiles
        // are computed here independently of build_kernel.
        let p = params(4.0, 0.0, 0.0, 1.0, 2.0);
        let k = 5;
        let kern = build_kernel(k, &p).unwrap();
        let half = (k as isize - 1) / 2;
        let row_profile: Vec<f64> = (-half..=half)
            .map(|x| {
                let x = x as f64;
                (-(x * x) / (2.0 * p.sigma * p.sigma)).exp()
                    * (2.0 * std::f64::consts::PI * x / p.lambda).cos()
            })
            .collect();
        let col_profile: Vec<f64> = (-half..=half)
            .map(|y| {
                let y = y as f64;
                (-(y * y) / (2.0 * p.sigma * p.sigma)).exp()
            })
            .collect();
        for i in 0..k {
            for j in 0..k {
                let expect = col_profile[i] * row_profile[j];
                assert!(
                    (kern.data()[i * k + j] - expect).abs() < 1e-10,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn envelope_bounds_corner_entries() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut p = random_params(&mut rng);
            p.sigma = rng.gen_range(0.3..0.8);
            let k = 7;
            let kern = build_kernel(k, &p).unwrap();
            let m = (k as f64 - 1.0) / 2.0;
            // General bound: the quadratic form at a corner is at least
            // min(1, gamma^2) * 2m^2.
            let gen_bound = (-p.gamma.powi(2).min(1.0) * m * m / (p.sigma * p.sigma)).exp();
            for &(i, j) in &[(0, 0), (0, k - 1), (k - 1, 0), (k - 1, k - 1)] {
                let v = kern.data()[i * k + j].abs();
                assert!(v < gen_bound + 1e-12, "corner ({i},{j}): {v} vs {gen_bound}");
            }
            // The isotropic bound additionally holds once gamma^2 >= 1/2.
            if p.gamma * p.gamma >= 0.5 {
                let iso_bound = (-m * m / (2.0 * p.sigma * p.sigma)).exp();
                for &(i, j) in &[(0, 0), (0, k - 1), (k - 1, 0), (k - 1, k - 1)] {
                    assert!(kern.data()[i * k + j].abs() < iso_bound + 1e-12);
                }
            }
        }
    }

    #[test]
    fn phase_gradient_at_center_is_minus_sin_psi() {
        let p = params(3.0, 0.4, 0.9, 0.7, 1.3);
        let g = kernel_param_grads(5, &p).unwrap();
        let center = 2 * 5 + 2;
        assert!((g.d_psi.data()[center] + 0.9f64.sin()).abs() < 1e-14);
        assert_eq!(g.d_lambda.data()[center], 0.0);
    }

    #[test]
    fn analytic_grads_match_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let h = 1e-6;
        for trial in 0..40 {
            let k = [3, 5, 7][trial % 3];
            let p = random_params(&mut rng);
            let grads = kernel_param_grads(k, &p).unwrap();
            for pi in 0..5 {
                let perturb = |eps: f64| {
                    let mut q = p;
                    match pi {
                        0 => q.lambda += eps,
                        1 => q.theta += eps,
                        2 => q.psi += eps,
                        3 => q.gamma += eps,
                        _ => q.sigma += eps,
                    }
                    build_kernel(k, &q).unwrap()
                };
                let plus = perturb(h);
                let minus = perturb(-h);
                let analytic = grads.by_index(pi);
                for i in 0..k * k {
                    let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                    let a = analytic.data()[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                    assert!(
                        rel < 1e-6,
                        "param {} entry {i}: analytic {a} vs fd {fd}",
                        PARAM_NAMES[pi]
                    );
                }
            }
        }
    }

    #[test]
    fn published_typo_variant_disagrees_with_differences_when_gamma_differs() {
        // With gamma == lambda the two formulas coincide; otherwise the
        // misprinted variant must fail the same finite-difference check the
        // corrected one passes.
        let p = params(3.0, 0.8, 0.4, 0.6, 1.2);
        let k = 5;
        let typo = kernel_param_grads_mode(k, &p, LambdaGradMode::PublishedTypo).unwrap();
        let h = 1e-6;
        let mut q_plus = p;
        q_plus.lambda += h;
        let mut q_minus = p;
        q_minus.lambda -= h;
        let plus = build_kernel(k, &q_plus).unwrap();
        let minus = build_kernel(k, &q_minus).unwrap();
        let mut worst = 0.0f64;
        for i in 0..k * k {
            let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
            let a = typo.d_lambda.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
        }
        assert!(worst > 1e-3, "typo variant unexpectedly agreed: {worst}");

        let mut same = p;
        same.gamma = same.lambda;
        let typo_same = kernel_param_grads_mode(k, &same, LambdaGradMode::PublishedTypo).unwrap();
        let corrected = kernel_param_grads(k, &same).unwrap();
        assert!(crate::tensor::max_abs_diff(&typo_same.d_lambda, &corrected.d_lambda) < 1e-15);
    }

    #[test]
    fn bank_orientations_are_evenly_spaced_and_deterministic() {
        let bank: Vec<GaborParams<f64>> = init_gabor_bank(4, 7, 42);
        let expect = [0.0, 0.25, 0.5, 0.75].map(|f| f * std::f64::consts::PI);
        for (p, e) in bank.iter().zip(expect) {
            assert!((p.theta - e).abs() < 1e-15);
        }
        let again: Vec<GaborParams<f64>> = init_gabor_bank(4, 7, 42);
        assert_eq!(bank, again);
        let other: Vec<GaborParams<f64>> = init_gabor_bank(4, 7, 43);
        assert_ne!(bank, other);
    }

    #[test]
    fn bank_wavelengths_stay_in_range_with_locked_bandwidth() {
        let bank: Vec<GaborParams<f64>> = init_gabor_bank(1000, 7, 9);
        for p in &bank {
            assert!(p.lambda >= 2.0 && p.lambda <= 7.0);
            assert_eq!(p.sigma, 0.56 * p.lambda);
            assert_eq!(p.gamma, 0.5);
            assert_eq!(p.psi, 0.0);
        }
    }

    #[test]
    fn softplus_roundtrip_and_grad() {
        for &x in &[-20.0f64, -3.0, -0.1, 0.0, 0.1, 3.0, 20.0, 700.0] {
            let y = softplus(x);
            assert!(y > 0.0);
            let back = softplus_inverse(y);
            assert!((back - x).abs() < 1e-9, "roundtrip at {x}: {back}");
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((softplus_grad(x) - fd).abs() < 1e-8);
        }
    }
}
