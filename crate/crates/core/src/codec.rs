//! Linear encoder/decoder between data space and latent space.
//!
//! The codec is the rank-`p` principal-component projection of the training
//! states, which minimizes reconstruction MSE among rank-`p` linear codecs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearCodec {
    /// `d x p`, orthonormal columns.
    basis: DMatrix<f64>,
    mean: DVector<f64>,
}

impl LinearCodec {
    /// Identity codec: the pipeline runs directly in data space.
    pub fn identity(d: usize) -> Self {
        Self {
            basis: DMatrix::identity(d, d),
            mean: DVector::zeros(d),
        }
    }

    /// Builds a codec from explicit parts, checking orthonormality.
    pub fn from_parts(basis: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        if basis.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.nrows(),
                got: mean.len(),
            });
        }
        if basis.ncols() > basis.nrows() || basis.ncols() == 0 {
            return Err(Error::param("p", "need 1 <= p <= d"));
        }
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
        if err > 1e-10 {
            return Err(Error::param("basis", format!("columns not orthonormal (error {err:e})")));
        }
        Ok(Self { basis, mean })
    }

    pub fn d(&self) -> usize {
        self.basis.nrows()
    }

    pub fn p(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: x.len(),
            });
        }
        let centered = DVector::from_column_slice(x) - &self.mean;
        Ok((self.basis.tr_mul(&centered)).as_slice().to_vec())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: z.len(),
            });
        }
        let x = &self.basis * DVector::from_column_slice(z) + &self.mean;
        Ok(x.as_slice().to_vec())
    }

    pub fn encode_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.encode(x)).collect()
    }

    /// Mean squared reconstruction error over all entries.
    pub fn reconstruction_mse(&self, states: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in states {
            let back = self.decode(&self.encode(x)?)?;
            total += x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / (states.len() * self.d()) as f64)
    }
}

/// Fits the top-`p` principal directions of `states` (`N x d`).
pub fn fit(states: &[Vec<f64>], p: usize) -> Result<LinearCodec> {
    let n = states.len();
    let d = states.first().ok_or(Error::Empty("codec training states"))?.len();
    if p == 0 || p > n.min(d) {
        return Err(Error::param(
            "p",
            format!("latent dimension {p} must be in 1..={}", n.min(d)),
        ));
    }
    let mut mean = DVector::zeros(d);
    for x in states {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        mean += DVector::from_column_slice(x);
    }
    mean /= n as f64;
    let centered = DMatrix::from_fn(n, d, |i, j| states[i][j] - mean[j]);
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(d, p);
    for (col, &k) in order.iter().take(p).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // Sign convention: largest-magnitude entry positive.
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        basis.set_column(col, &v);
    }
    Ok(LinearCodec { basis, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_states(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| rng::normal_vec(&mut r, d)).collect()
    }

    #[test]
    fn full_rank_is_lossless() {
        let xs = random_states(50, 5, 1);
        let c = fit(&xs, 5).unwrap();
        assert!(c.reconstruction_mse(&xs).unwrap() < 1e-20);
    }

    #[test]
    fn planar_data_recovered_with_two_components() {
        let mut r = rng::seeded(2);
        let u = rng::normal_vec(&mut r, 6);
        let v = rng::normal_vec(&mut r, 6);
        let offset = rng::normal_vec(&mut r, 6);
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let (a, b) = (rng::normal(&mut r), rng::normal(&mut r));
                (0..6).map(|i| offset[i] + a * u[i] + b * v[i]).collect()
            })
            .collect();
        let c = fit(&xs, 2).unwrap();
        assert!(c.reconstruction_mse(&xs).unwrap() < 1e-10);
    }

    #[test]
    fn basis_is_orthonormal() {
        let xs = random_states(30, 8, 3);
        let c = fit(&xs, 3).unwrap();
        let gram = c.basis().tr_mul(c.basis());
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn latent_round_trip() {
        let xs = random_states(30, 8, 4);
        let c = fit(&xs, 3).unwrap();
        let mut r = rng::seeded(5);
        for _ in 0..20 {
            let z = rng::normal_vec(&mut r, 3);
            let back = c.encode(&c.decode(&z).unwrap()).unwrap();
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn in_subspace_points_reconstruct() {
        let xs = random_states(30, 8, 6);
        let c = fit(&xs, 3).unwrap();
        let x = c.decode(&[0.3, -1.2, 2.0]).unwrap();
        let back = c.decode(&c.encode(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_residual_is_orthogonal() {
        let xs = random_states(30, 8, 7);
        let c = fit(&xs, 3).unwrap();
        for x in random_states(10, 8, 8) {
            let proj = c.decode(&c.encode(&x).unwrap()).unwrap();
            let resid = DVector::from_iterator(8, x.iter().zip(&proj).map(|(a, b)| a - b));
            assert!(c.basis().tr_mul(&resid).amax() < 1e-10);
        }
    }

    #[test]
    fn identity_codec_passes_through() {
        let c = LinearCodec::identity(3);
        let x = [1.5, -2.0, 0.25];
        assert_eq!(c.encode(&x).unwrap(), x.to_vec());
        assert_eq!(c.decode(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn errors() {
        let xs = random_states(3, 5, 9);
        assert!(fit(&xs, 4).is_err());
        assert!(fit(&xs, 0).is_err());
        assert!(fit(&[], 1).is_err());
        let c = fit(&xs, 2).unwrap();
        assert!(c.encode(&[1.0]).is_err());
        assert!(c.decode(&[1.0, 2.0, 3.0]).is_err());
        assert!(LinearCodec::from_parts(DMatrix::from_element(3, 2, 1.0), DVector::zeros(3)).is_err());
    }
}
