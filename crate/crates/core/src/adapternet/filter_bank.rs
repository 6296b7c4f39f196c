use crate::engine::{EngineError, Scalar, Tensor};

/// A basis of `K` filters plus coefficients mixing them into `T` output
/// filters: `G_t = Σ_k α_tk F_k`.
///
/// The coefficients are shaped as a `[T, K, 1, 1]` bank of 1x1 filters, so
/// applying `G` equals applying the basis and then the coefficient bank.
#[derive(Debug, Clone)]
pub struct FilterBank<T> {
    /// `[K, Cf, hf, wf]`
    pub basis: Tensor<T>,
    /// `[T, K, 1, 1]`
    pub coefficients: Tensor<T>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn new(basis: Tensor<T>, coefficients: Tensor<T>) -> Result<Self, EngineError> {
        let bank = Self { basis, coefficients };
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<(), EngineError> {
        let (f, a) = (self.basis.shape(), self.coefficients.shape());
        if f.len() != 4 || a.len() != 4 || a[2] != 1 || a[3] != 1 {
            return Err(EngineError::Shape(format!(
                "filter bank needs [K, C, h, w] basis and [T, K, 1, 1] coefficients, got {f:?} and {a:?}"
            )));
        }
        if a[1] != f[0] {
            return Err(EngineError::Shape(format!(
                "coefficients mix {} filters but the basis has {}",
                a[1], f[0]
            )));
        }
        Ok(())
    }

    /// The composed bank `G`, shaped `[T, Cf, hf, wf]`.
    pub fn compose(&self) -> Result<Tensor<T>, EngineError> {
        self.check()?;
        let f = self.basis.shape();
        let (k, filter_len) = (f[0], f[1] * f[2] * f[3]);
        let t = self.coefficients.shape()[0];
        let mut g = vec![T::zero(); t * filter_len];
        // G[T, L] = α[T, K] · F[K, L]
        T::gemm(
            t,
            k,
            filter_len,
            T::one(),
            self.coefficients.data(),
            k as isize,
            1,
            self.basis.data(),
            filter_len as isize,
            1,
            T::zero(),
            &mut g,
            filter_len as isize,
            1,
        );
        Tensor::from_vec(&[t, f[1], f[2], f[3]], g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_coefficients_select_a_basis_filter() {
        let basis = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| i as f64 * 0.1 - 2.0);
        let mut a = vec![0.0; 3];
        a[2] = 1.0;
        let bank = FilterBank::new(basis.clone(), Tensor::from_vec(&[1, 3, 1, 1], a).unwrap()).unwrap();
        let g = bank.compose().unwrap();
        assert_eq!(g.data(), &basis.data()[2 * 18..3 * 18]);
    }

    #[test]
    fn scalar_basis_example() {
        let basis = Tensor::<f64>::from_vec(&[2, 1, 1, 1], vec![1.0, 10.0]).unwrap();
        let alpha = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
        let g = FilterBank::new(basis, alpha).unwrap().compose().unwrap();
        assert_eq!(g.data(), &[32.0]);
    }

    #[test]
    fn mismatched_basis_count_is_rejected() {
        let basis = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let alpha = Tensor::zeros(&[4, 3, 1, 1]);
        assert!(FilterBank::new(basis, alpha).is_err());
    }
}
