//! Kernel Gram matrices and double-centering, the ingredients of the
//! HSIC dependence estimator.

use crate::error::{Error, Result};
use crate::linalg::{dot, sq_dist, Matrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Kernel choice for Gram construction.
///
/// In run configs this is spelled e.g. `{"kind":"rbf","gamma":0.5}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// K_ij = <x_i, x_j>
    Linear,
    /// K_ij = exp(-gamma * ||x_i - x_j||^2)
    Rbf { gamma: f64 },
    /// K_ij = (||x_i - x_j||^2 + c^2)^(-1/2), the inverse multiquadric.
    Imq { c: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Rbf { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            KernelSpec::Rbf { gamma } => Err(Error::Config(format!(
                "rbf kernel needs gamma > 0, got {gamma}"
            ))),
            KernelSpec::Imq { c } if c > 0.0 && c.is_finite() => Ok(()),
            KernelSpec::Imq { c } => Err(Error::Config(format!("imq kernel needs c > 0, got {c}"))),
        }
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Rbf { gamma } => (-gamma * sq_dist(a, b)).exp(),
            KernelSpec::Imq { c } => 1.0 / (sq_dist(a, b) + c * c).sqrt(),
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Rbf { gamma: 0.5 }
    }
}

/// Gram matrix K_ij = k(x_i, x_j) over the rows of `rows`.
///
/// Computed row-by-row; entries (i,j) and (j,i) evaluate the same
/// expression so the result is bitwise symmetric.
pub fn gram(spec: &KernelSpec, rows: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    let n = rows.rows();
    if n < 1 || rows.cols() < 1 {
        return Err(Error::Degenerate {
            got: n.min(rows.cols()),
            need: 1,
        });
    }
    rows.ensure_finite("gram input")?;
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let xi = rows.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = spec.eval(xi, rows.row(j));
        }
    });
    Matrix::new(n, n, data)
}

/// Double-centers a square matrix: H K H with H = I - (1/n) 1 1^T,
/// computed by subtracting row and column means and adding back the
/// grand mean instead of materializing H.
pub fn center(k: &Matrix) -> Result<Matrix> {
    let n = k.rows();
    if n != k.cols() {
        return Err(Error::shape("center", k.shape(), (n, n)));
    }
    let nf = n as f64;
    let mut row_means = vec![0.0; n];
    let mut col_means = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let v = k.get(i, j);
            row_means[i] += v;
            col_means[j] += v;
        }
    }
    for m in row_means.iter_mut().chain(col_means.iter_mut()) {
        *m /= nf;
    }
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, k.get(i, j) - row_means[i] - col_means[j] + grand);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_on_unit_axes_is_identity() {
        let rows = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = gram(&KernelSpec::Linear, &rows).unwrap();
        assert_eq!(k, Matrix::identity(2));
    }

    #[test]
    fn rbf_identical_rows_all_ones() {
        let rows = Matrix::new(2, 3, vec![0.4, -1.0, 2.0, 0.4, -1.0, 2.0]).unwrap();
        let k = gram(&KernelSpec::Rbf { gamma: 0.5 }, &rows).unwrap();
        for &v in k.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn rbf_off_diagonal_direct_evaluation() {
        // gamma=0.5, ||x1-x2||^2 = 4 -> exp(-2)
        let rows = Matrix::new(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let k = gram(&KernelSpec::Rbf { gamma: 0.5 }, &rows).unwrap();
        assert!((k.get(0, 1) - (-2.0f64).exp()).abs() < 1e-12);
        assert!((k.get(0, 1) - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn gram_rejects_non_finite_input() {
        let mut rows = Matrix::zeros(1, 1);
        rows.set(0, 0, f64::NAN);
        assert!(gram(&KernelSpec::Linear, &rows).is_err());
    }

    #[test]
    fn gram_rejects_bad_params() {
        let rows = Matrix::zeros(2, 2);
        assert!(gram(&KernelSpec::Rbf { gamma: 0.0 }, &rows).is_err());
        assert!(gram(&KernelSpec::Imq { c: -1.0 }, &rows).is_err());
    }

    #[test]
    fn center_kills_constant_kernel() {
        let k = Matrix::from_fn(3, 3, |_, _| 1.0);
        let c = center(&k).unwrap();
        for &v in c.data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn center_of_identity_2x2_is_h() {
        // H I H = H = [[0.5,-0.5],[-0.5,0.5]] for n=2
        let c = center(&Matrix::identity(2)).unwrap();
        let expect = Matrix::new(2, 2, vec![0.5, -0.5, -0.5, 0.5]).unwrap();
        for (a, b) in c.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn center_requires_square() {
        assert!(center(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn rbf_diagonal_is_one_imq_diagonal_is_inv_c() {
        let rows = random_rows(5, 3, 11);
        let k_rbf = gram(&KernelSpec::Rbf { gamma: 0.7 }, &rows).unwrap();
        let k_imq = gram(&KernelSpec::Imq { c: 2.0 }, &rows).unwrap();
        for i in 0..5 {
            assert_eq!(k_rbf.get(i, i), 1.0);
            assert_eq!(k_imq.get(i, i), 0.5);
        }
    }

    #[test]
    fn kernel_spec_json_roundtrip() {
        let spec = KernelSpec::Rbf { gamma: 0.5 };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"rbf","gamma":0.5}"#);
        let back: KernelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let linear: KernelSpec = serde_json::from_str(r#"{"kind":"linear"}"#).unwrap();
        assert_eq!(linear, KernelSpec::Linear);
    }

    fn all_specs() -> Vec<KernelSpec> {
        vec![
            KernelSpec::Linear,
            KernelSpec::Rbf { gamma: 0.5 },
            KernelSpec::Imq { c: 1.0 },
        ]
    }

    proptest! {
        #[test]
        fn gram_symmetric_and_center_idempotent(seed in 0u64..1000, n in 2usize..12, d in 1usize..5) {
            let rows = random_rows(n, d, seed);
            for spec in all_specs() {
                let k = gram(&spec, &rows).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        prop_assert!((k.get(i, j) - k.get(j, i)).abs() <= 1e-12);
                    }
                }
                let c1 = center(&k).unwrap();
                let c2 = center(&c1).unwrap();
                let diff = c1.sub(&c2).unwrap().frobenius_norm();
                prop_assert!(diff <= 1e-10);
                // centered rows and columns sum to zero
                for i in 0..n {
                    let rsum: f64 = (0..n).map(|j| c1.get(i, j)).sum();
                    let csum: f64 = (0..n).map(|j| c1.get(j, i)).sum();
                    prop_assert!(rsum.abs() <= 1e-10 && csum.abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn gram_equivariant_to_row_permutation(seed in 0u64..500, n in 2usize..8) {
            let rows = random_rows(n, 3, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1);
            let permuted = rows.select_rows(&perm);
            for spec in all_specs() {
                let k = gram(&spec, &rows).unwrap();
                let kp = gram(&spec, &permuted).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(kp.get(i, j), k.get(perm[i], perm[j]));
                    }
                }
            }
        }
    }
}
