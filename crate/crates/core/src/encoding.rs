//! Conversion between grid functions and the feature vectors the model sees.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::spectral::{analysis_matrix, max_modes, reconstruct_at, synthesis_matrix, ModeVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoding {
    /// First `modes` DFT coefficients of a scalar function on `n_src`
    /// points, interleaved re/im and multiplied by `1/sqrt(n_src)` so that
    /// order-one functions give order-one features.
    Fourier { modes: usize, n_src: usize },
    /// Raw values, for finite-dimensional data.
    Identity { dim: usize },
}

impl Encoding {
    pub fn fourier(modes: usize, n_src: usize) -> Result<Self> {
        if modes == 0 || modes > max_modes(n_src) {
            return Err(Error::invalid(format!(
                "mode count {modes} outside 1..={} for n = {n_src}",
                max_modes(n_src)
            )));
        }
        Ok(Self::Fourier { modes, n_src })
    }

    pub fn dim(&self) -> usize {
        match *self {
            Self::Fourier { modes, .. } => 2 * modes,
            Self::Identity { dim } => dim,
        }
    }

    fn scale(n_src: usize) -> f64 {
        1.0 / (n_src as f64).sqrt()
    }

    /// `[rows, dim]` features of raw rows `[rows, n_src]`.
    pub fn encode_rows(&self, values: &Tensor) -> Result<Tensor> {
        let (r, c) = values.dims2()?;
        match *self {
            Self::Fourier { modes, n_src } => {
                if c != n_src {
                    return Err(Error::invalid(format!("expected {n_src} grid values, got {c}")));
                }
                let a = analysis_matrix(n_src, modes)?;
                let mut out = vec![0.0; r * 2 * modes];
                crate::autodiff::gemm(values.data(), (r, c), false, a.data(), (c, 2 * modes), false, &mut out, 0.0);
                let s = Self::scale(n_src);
                out.iter_mut().for_each(|x| *x *= s);
                Tensor::matrix(r, 2 * modes, out)
            }
            Self::Identity { dim } => {
                if c != dim {
                    return Err(Error::invalid(format!("expected {dim} values, got {c}")));
                }
                Ok(values.clone())
            }
        }
    }

    pub fn encode(&self, f: &GridFunction) -> Result<Vec<f64>> {
        if let Self::Fourier { .. } = self {
            if f.dim() != 1 {
                return Err(Error::invalid("Fourier features need scalar functions"));
            }
        }
        let row = Tensor::matrix(1, f.values().len(), f.values().to_vec())?;
        Ok(self.encode_rows(&row)?.into_data())
    }

    /// Values at `n_out` equally spaced points (Fourier), or the features
    /// themselves (identity).
    pub fn decode(&self, features: &[f64], n_out: usize) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::invalid(format!(
                "expected {} features, got {}",
                self.dim(),
                features.len()
            )));
        }
        match *self {
            Self::Fourier { n_src, .. } => {
                let s = 1.0 / Self::scale(n_src);
                let mv = ModeVector::new(n_src, features.iter().map(|x| x * s).collect())?;
                reconstruct_at(&mv, n_out)
            }
            Self::Identity { .. } => Ok(features.to_vec()),
        }
    }

    /// `[dim, n_out]` linear map from features to output values, so that
    /// grid-space losses stay on the tape.
    pub fn synthesis(&self, n_out: usize) -> Result<Tensor> {
        match *self {
            Self::Fourier { modes, n_src } => {
                let mut r = synthesis_matrix(modes, n_src, n_out)?;
                let s = 1.0 / Self::scale(n_src);
                r.data_mut().iter_mut().for_each(|x| *x *= s);
                Ok(r)
            }
            Self::Identity { dim } => Ok(Tensor::eye(dim)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use crate::random_fields::{initial_state, GrfSampler};
    use crate::RngStream;

    #[test]
    fn full_spectrum_round_trip() {
        let g = Grid1D::new(100).unwrap();
        let s = GrfSampler::new(g, 0.2).unwrap();
        let f = initial_state(&s, &mut RngStream::new(0, 0));
        let enc = Encoding::fourier(51, 100).unwrap();
        let feats = enc.encode(&f).unwrap();
        assert_eq!(feats.len(), 102);
        let back = enc.decode(&feats, 100).unwrap();
        for (a, b) in back.iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        let syn = enc.synthesis(100).unwrap();
        let row = Tensor::matrix(1, 102, feats.clone()).unwrap();
        let mut via = vec![0.0; 100];
        crate::autodiff::gemm(row.data(), (1, 102), false, syn.data(), (102, 100), false, &mut via, 0.0);
        for (a, b) in via.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scaling_follows_parseval() {
        // Parseval: sum |c_j|^2 = n sum f^2. A pure mode puts its energy in
        // one conjugate pair, so half of it shows up in the retained features.
        let g = Grid1D::new(100).unwrap();
        let f = GridFunction::from_fn(g, |x| 2f64.sqrt() * (2.0 * std::f64::consts::PI * 3.0 * x * 99.0 / 100.0).cos());
        let feats = Encoding::fourier(51, 100).unwrap().encode(&f).unwrap();
        let energy: f64 = feats.iter().map(|x| x * x).sum();
        assert!((energy - 50.0).abs() < 1e-9, "energy {energy}");
    }

    #[test]
    fn identity_and_validation() {
        let e = Encoding::Identity { dim: 3 };
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(e.encode_rows(&t).unwrap(), t);
        assert_eq!(e.decode(&[1.0, 2.0, 3.0], 99).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(e.decode(&[1.0], 3).is_err());
        assert!(Encoding::fourier(52, 100).is_err());
        assert!(Encoding::fourier(0, 100).is_err());
    }
}
