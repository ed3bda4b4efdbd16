//! Fourier-mode representation of grid functions.
//!
//! Convention: the forward transform is unnormalized,
//! `c_j = sum_k f_k exp(-2 pi i j k / n)`, and the inverse carries `1/n`.
//! Transforms are direct `O(n^2)` sums over an exact twiddle table, which is
//! cheap at the grid sizes used here and works for any `n`.
//!
//! A [`ModeVector`] keeps the first `M` coefficients interleaved as
//! `[Re c_0, Im c_0, Re c_1, Im c_1, ...]`. This layout is also the feature
//! layout consumed by the model and stored on disk.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest imaginary residue accepted when inverting to a real signal,
/// relative to `max(1, max |f_k|)`.
pub const IMAG_TOLERANCE: f64 = 1e-9;

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n)
        .map(|m| {
            let theta = sign * 2.0 * PI * m as f64 / n as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect()
}

/// Forward transform of a real signal.
pub fn dft_forward(f: &[f64]) -> Vec<Complex64> {
    let n = f.len();
    let w = twiddles(n, -1.0);
    (0..n)
        .map(|j| {
            f.iter()
                .enumerate()
                .map(|(k, &x)| w[(j * k) % n] * x)
                .sum()
        })
        .collect()
}

/// Inverse transform keeping the complex result.
pub fn dft_inverse_complex(c: &[Complex64]) -> Vec<Complex64> {
    let n = c.len();
    let w = twiddles(n, 1.0);
    let inv = 1.0 / n as f64;
    (0..n)
        .map(|k| {
            c.iter()
                .enumerate()
                .map(|(j, &x)| x * w[(j * k) % n])
                .sum::<Complex64>()
                * inv
        })
        .collect()
}

/// Inverse transform of a conjugate-symmetric spectrum to a real signal.
pub fn dft_inverse(c: &[Complex64]) -> Result<Vec<f64>> {
    if c.is_empty() {
        return Err(Error::invalid("inverse transform of an empty spectrum"));
    }
    let z = dft_inverse_complex(c);
    let scale = z.iter().map(|v| v.re.abs()).fold(1.0, f64::max);
    let residue = z.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if residue > IMAG_TOLERANCE * scale {
        return Err(Error::ImaginaryResidue { residue });
    }
    Ok(z.into_iter().map(|v| v.re).collect())
}

/// First `M` Fourier coefficients of a real signal of length `n_src`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeVector {
    n_src: usize,
    features: Vec<f64>,
}

/// Largest admissible mode count for a source of length `n`.
pub fn max_modes(n: usize) -> usize {
    n / 2 + 1
}

impl ModeVector {
    pub fn new(n_src: usize, features: Vec<f64>) -> Result<Self> {
        if features.is_empty() || features.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "mode features must have even positive length, got {}",
                features.len()
            )));
        }
        let m = features.len() / 2;
        if m > max_modes(n_src) {
            return Err(Error::invalid(format!(
                "{m} modes exceed the {} available for n = {n_src}",
                max_modes(n_src)
            )));
        }
        Ok(Self { n_src, features })
    }

    pub fn zeros(n_src: usize, m: usize) -> Result<Self> {
        Self::new(n_src, vec![0.0; 2 * m])
    }

    pub fn modes(&self) -> usize {
        self.features.len() / 2
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn into_features(self) -> Vec<f64> {
        self.features
    }

    pub fn coefficient(&self, j: usize) -> Complex64 {
        Complex64::new(self.features[2 * j], self.features[2 * j + 1])
    }
}

/// Keeps the first `m` coefficients of a full spectrum.
pub fn truncate_modes(c: &[Complex64], m: usize) -> Result<ModeVector> {
    let n = c.len();
    if m == 0 || m > max_modes(n) {
        return Err(Error::invalid(format!(
            "mode count {m} outside 1..={} for n = {n}",
            max_modes(n)
        )));
    }
    let features = c[..m].iter().flat_map(|z| [z.re, z.im]).collect();
    Ok(ModeVector { n_src: n, features })
}

/// Convenience: transform and truncate in one call.
pub fn to_modes(f: &[f64], m: usize) -> Result<ModeVector> {
    truncate_modes(&dft_forward(f), m)
}

fn check_resolution(m: usize, n_src: usize, n_out: usize) -> Result<()> {
    // The top retained mode may sit exactly on the output Nyquist frequency
    // only when it is also the source Nyquist mode (real for real input).
    let ok = n_out + 1 >= 2 * m || (n_out + 2 == 2 * m && n_src + 2 == 2 * m);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "resolution {n_out} too small for {m} retained modes"
        )))
    }
}

/// Real signal of length `n_out` carrying the retained modes, with the
/// coefficients rescaled by `n_out / n_src` so amplitudes are preserved.
pub fn reconstruct_at(mv: &ModeVector, n_out: usize) -> Result<Vec<f64>> {
    let m = mv.modes();
    check_resolution(m, mv.n_src, n_out)?;
    let s = n_out as f64 / mv.n_src as f64;
    let mut spec = vec![Complex64::new(0.0, 0.0); n_out];
    spec[0] += Complex64::new(mv.features[0], 0.0) * s;
    for j in 1..m {
        let c = mv.coefficient(j) * s;
        let w = if 2 * j == mv.n_src { 0.5 } else { 1.0 };
        spec[j] += c * w;
        spec[n_out - j] += c.conj() * w;
    }
    dft_inverse(&spec)
}

/// Reconstruction at the source resolution.
pub fn reconstruct(mv: &ModeVector) -> Result<Vec<f64>> {
    reconstruct_at(mv, mv.n_src)
}

/// `[n, 2m]` matrix `A` such that `features = values * A` for a row of grid
/// values; the rows of a batch transform together in one product.
pub fn analysis_matrix(n: usize, m: usize) -> Result<Tensor> {
    if m == 0 || m > max_modes(n) {
        return Err(Error::invalid(format!("mode count {m} invalid for n = {n}")));
    }
    let w = twiddles(n, -1.0);
    let mut a = vec![0.0; n * 2 * m];
    for k in 0..n {
        for j in 0..m {
            let z = w[(j * k) % n];
            a[k * 2 * m + 2 * j] = z.re;
            a[k * 2 * m + 2 * j + 1] = z.im;
        }
    }
    Tensor::matrix(n, 2 * m, a)
}

/// `[2m, n_out]` matrix `R` such that `values = features * R`; linear
/// counterpart of [`reconstruct_at`].
pub fn synthesis_matrix(m: usize, n_src: usize, n_out: usize) -> Result<Tensor> {
    check_resolution(m, n_src, n_out)?;
    let mut r = vec![0.0; 2 * m * n_out];
    for f in 0..2 * m {
        let mut unit = vec![0.0; 2 * m];
        unit[f] = 1.0;
        // Imaginary parts of c_0 and of a source Nyquist mode do not survive
        // a real reconstruction.
        let j = f / 2;
        if f % 2 == 1 && (j == 0 || 2 * j == n_src) {
            continue;
        }
        let row = reconstruct_at_unchecked(&unit, n_src, n_out);
        r[f * n_out..(f + 1) * n_out].copy_from_slice(&row);
    }
    Tensor::matrix(2 * m, n_out, r)
}

fn reconstruct_at_unchecked(features: &[f64], n_src: usize, n_out: usize) -> Vec<f64> {
    let m = features.len() / 2;
    let s = n_out as f64 / n_src as f64;
    let mut spec = vec![Complex64::new(0.0, 0.0); n_out];
    spec[0] += Complex64::new(features[0], 0.0) * s;
    for j in 1..m {
        let c = Complex64::new(features[2 * j], features[2 * j + 1]) * s;
        let w = if 2 * j == n_src { 0.5 } else { 1.0 };
        spec[j] += c * w;
        spec[n_out - j] += c.conj() * w;
    }
    dft_inverse_complex(&spec).into_iter().map(|z| z.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_fields::{initial_state, GrfSampler};
    use crate::{Grid1D, RngStream};

    /// Plain complex sum written independently of the twiddle table.
    fn oracle_dft(f: &[f64]) -> Vec<Complex64> {
        let n = f.len() as f64;
        (0..f.len())
            .map(|j| {
                f.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (k, &x)| {
                    acc + Complex64::from_polar(x, -2.0 * PI * (j * k) as f64 / n)
                })
            })
            .collect()
    }

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut r = RngStream::new(seed, 0);
        (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn dc_signal() {
        let c = dft_forward(&[1.0; 8]);
        assert!((c[0].re - 8.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|z| z.norm() < 1e-12));
        assert_eq!(dft_forward(&[3.5])[0], Complex64::new(3.5, 0.0));
    }

    #[test]
    fn cosine_signal() {
        let n = 16;
        let f: Vec<f64> = (0..n).map(|k| (2.0 * PI * k as f64 / n as f64).cos()).collect();
        let c = dft_forward(&f);
        let oracle = oracle_dft(&f);
        for j in 0..n {
            assert!((c[j] - oracle[j]).norm() < 1e-12);
            let expected = if j == 1 || j == 15 { 8.0 } else { 0.0 };
            assert!((c[j].re - expected).abs() < 1e-12 && c[j].im.abs() < 1e-12, "mode {j}");
        }
    }

    #[test]
    fn inverse_cases() {
        let f = random_signal(100, 1);
        let back = dft_inverse(&dft_forward(&f)).unwrap();
        let err = f.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);

        let mut c = vec![Complex64::new(0.0, 0.0); 6];
        c[0] = Complex64::new(6.0, 0.0);
        assert!(dft_inverse(&c).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-15));

        let (a, b) = (random_signal(20, 2), random_signal(20, 3));
        let (ca, cb) = (dft_forward(&a), dft_forward(&b));
        let mix: Vec<Complex64> = ca.iter().zip(&cb).map(|(x, y)| x * 2.0 - y * 0.5).collect();
        let lhs = dft_inverse(&mix).unwrap();
        let (ia, ib) = (dft_inverse(&ca).unwrap(), dft_inverse(&cb).unwrap());
        for k in 0..20 {
            assert!((lhs[k] - (2.0 * ia[k] - 0.5 * ib[k])).abs() < 1e-10);
        }

        let mut bad = vec![Complex64::new(0.0, 0.0); 4];
        bad[1] = Complex64::new(0.0, 1.0);
        assert!(matches!(dft_inverse(&bad), Err(Error::ImaginaryResidue { .. })));
    }

    #[test]
    fn truncation_edge_cases() {
        let f = random_signal(10, 4);
        let c = dft_forward(&f);
        let dc = truncate_modes(&c, 1).unwrap();
        assert_eq!(dc.features()[1], 0.0);
        assert_eq!(dc.features()[0], c[0].re);
        assert!(truncate_modes(&c, 0).is_err());
        assert!(truncate_modes(&c, 7).is_err());

        for n in [10, 11] {
            let f = random_signal(n, 5);
            let mv = to_modes(&f, max_modes(n)).unwrap();
            let back = reconstruct(&mv).unwrap();
            let err = f.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "n = {n}: {err}");
        }
    }

    #[test]
    fn finer_resolution_of_a_harmonic() {
        let n = 12;
        let f: Vec<f64> = (0..n)
            .map(|k| (2.0 * PI * k as f64 / n as f64 + 0.3).sin())
            .collect();
        let mv = to_modes(&f, 3).unwrap();
        let fine = reconstruct_at(&mv, 2 * n).unwrap();
        for (k, v) in fine.iter().enumerate() {
            let x = 2.0 * PI * k as f64 / (2 * n) as f64 + 0.3;
            assert!((v - x.sin()).abs() < 1e-9);
        }
        assert!(reconstruct_at(&mv, 4).is_err());
        let zero = ModeVector::zeros(n, 3).unwrap();
        assert!(reconstruct(&zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrices_match_transforms() {
        let n = 100;
        let m = 25;
        let f = random_signal(n, 6);
        let a = analysis_matrix(n, m).unwrap();
        let mv = to_modes(&f, m).unwrap();
        for col in 0..2 * m {
            let v: f64 = (0..n).map(|k| f[k] * a.data()[k * 2 * m + col]).sum();
            assert!((v - mv.features()[col]).abs() < 1e-10);
        }
        let r = synthesis_matrix(m, n, n).unwrap();
        let rec = reconstruct(&mv).unwrap();
        for k in 0..n {
            let v: f64 = (0..2 * m).map(|c| mv.features()[c] * r.data()[c * n + k]).sum();
            assert!((v - rec[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_and_projection() {
        let f = random_signal(100, 7);
        let c = dft_forward(&f);
        let lhs: f64 = f.iter().map(|x| x * x).sum();
        let rhs: f64 = c.iter().map(|z| z.norm_sqr()).sum::<f64>() / 100.0;
        assert!((lhs - rhs).abs() / lhs < 1e-9);

        let mv = to_modes(&f, 20).unwrap();
        let again = to_modes(&reconstruct(&mv).unwrap(), 20).unwrap();
        let err = mv
            .features()
            .iter()
            .zip(again.features())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn truncation_error_of_masked_fields() {
        // The mask leaves a derivative jump at the periodic seam, so the
        // spectrum decays like 1/j^2 and 25 modes keep ~1e-2 relative error.
        let grid = Grid1D::new(100).unwrap();
        let sampler = GrfSampler::new(grid, 0.2).unwrap();
        let mut rng = RngStream::new(9, 0);
        let (mut mean, mut worst) = (0.0, 0.0f64);
        for _ in 0..1000 {
            let v = initial_state(&sampler, &mut rng);
            let rec = reconstruct(&to_modes(v.values(), 25).unwrap()).unwrap();
            let num: f64 = v.values().iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = v.values().iter().map(|a| a * a).sum();
            let rel = (num / den).sqrt();
            mean += rel / 1000.0;
            worst = worst.max(rel);
        }
        assert!(mean < 1e-2, "mean {mean}");
        assert!(worst < 5e-2, "worst {worst}");
    }

    #[test]
    fn error_decreases_with_modes() {
        let grid = Grid1D::new(100).unwrap();
        let sampler = GrfSampler::new(grid, 0.2).unwrap();
        let mut rng = RngStream::new(8, 0);
        for _ in 0..20 {
            let v = initial_state(&sampler, &mut rng);
            let c = dft_forward(v.values());
            let mut last = f64::INFINITY;
            for m in 1..=51 {
                let rec = reconstruct(&truncate_modes(&c, m).unwrap()).unwrap();
                let err: f64 = v.values().iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(err <= last + 1e-12);
                last = err;
            }
        }
    }
}
