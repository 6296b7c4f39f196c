use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::{EngineError, Mode};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running statistics. The variance is stored unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// A free-standing batch normalization layer: learnable `scale ⊙ x̂ + bias`
/// plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
    pub running: BnStats<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]),
            bias: Tensor::zeros(&[channels]),
            running: BnStats::new(channels),
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    /// Records scale and bias as trainable leaves and applies the layer.
    /// Returns `(output, scale, bias)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<(Var, Var, Var), EngineError> {
        let s = tape.leaf(self.scale.clone(), true);
        let b = tape.leaf(self.bias.clone(), true);
        let y = tape.batch_norm(input, s, b, &mut self.running, mode, self.eps, self.momentum)?;
        Ok((y, s, b))
    }
}

pub(crate) struct BnGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    scale: &Tensor<T>,
    upstream: &Tensor<T>,
    batch_stats: bool,
) -> BnGrads<T> {
    let shape = xhat.shape();
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let m = T::cast_f64((n * hw) as f64);
    let (xh, dy) = (xhat.data(), upstream.data());
    let mut dx = vec![T::zero(); xhat.numel()];
    let mut ds = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sum_dy = sum_dy + dy[j];
                sum_dy_xh = sum_dy_xh + dy[j] * xh[j];
            }
        }
        ds[ch] = sum_dy_xh;
        db[ch] = sum_dy;
        let s = scale.data()[ch];
        let k = s * inv_std[ch];
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dx[j] = if batch_stats {
                    k * (dy[j] - (sum_dy + xh[j] * sum_dy_xh) / m)
                } else {
                    k * dy[j]
                };
            }
        }
    }
    BnGrads {
        input: Tensor::from_vec(shape, dx).expect("shape"),
        scale: Tensor::from_vec(&[c], ds).expect("shape"),
        bias: Tensor::from_vec(&[c], db).expect("shape"),
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `[N, C, ...]`, per channel.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch mean and unbiased variance into `running` with weight
    /// `momentum`. Eval mode uses `running` and leaves it untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        bias: Var,
        running: &mut BnStats<T>,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var, EngineError> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(EngineError::Shape(format!("batch_norm expects [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let (s, b) = (self.value(scale), self.value(bias));
        if s.numel() != c || b.numel() != c || running.channels() != c {
            return Err(EngineError::Shape(format!(
                "batch_norm over {c} channels given scale {}, bias {}, stats {}",
                s.numel(),
                b.numel(),
                running.channels()
            )));
        }
        if mode == Mode::Train && n * hw == 0 {
            return Err(EngineError::EmptyChannel);
        }
        let eps_t = T::cast_f64(eps);
        let m = n * hw;
        let xd = x.data();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        sum = xd[base..base + hw].iter().fold(sum, |a, &v| a + v);
                    }
                    let mean = sum / T::cast_f64(m as f64);
                    let mut sq = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        sq = xd[base..base + hw].iter().fold(sq, |a, &v| a + (v - mean) * (v - mean));
                    }
                    (mean, sq / T::cast_f64(m as f64))
                }
                Mode::Eval => (running.mean[ch], running.var[ch]),
            };
            let is = T::one() / (var + eps_t).sqrt();
            inv_std[ch] = is;
            let (sc, bi) = (s.data()[ch], b.data()[ch]);
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mean) * is;
                    xhat[j] = xh;
                    out[j] = sc * xh + bi;
                }
            }
            if mode == Mode::Train {
                let mom = T::cast_f64(momentum);
                let unbiased = if m > 1 { var * T::cast_f64(m as f64 / (m - 1) as f64) } else { var };
                running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean;
                running.var[ch] = (T::one() - mom) * running.var[ch] + mom * unbiased;
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let xhat = Tensor::from_vec(&shape, xhat)?;
        Ok(self.push(
            out,
            Op::BatchNorm { input, scale, bias, xhat, inv_std, batch_stats: mode == Mode::Train },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_statistics_in_eval_mode() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3, 2, 2], data.clone()).unwrap(), false);
        let mut bn = BatchNormState::<f64>::new(3);
        let (y, _, _) = bn.forward(&mut tape, x, Mode::Eval).unwrap();
        let factor = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (out, inp) in tape.value(y).data().iter().zip(&data) {
            assert!((out - inp * factor).abs() < 1e-12);
        }
        assert_eq!(bn.running, BnStats::new(3));
    }

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap(), false);
        let mut bn = BatchNormState::<f64>::new(1);
        let (y, _, _) = bn.forward(&mut tape, x, Mode::Train).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
        // mean 2, biased var 1, unbiased var 2
        assert!((bn.running.mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_outputs_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64).sin() * 4.0), false);
        let mut bn = BatchNormState::<f64>::new(2);
        bn.scale = Tensor::zeros(&[2]);
        bn.bias = Tensor::from_vec(&[2], vec![0.25, -3.0]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _, _) = bn.forward(&mut tape, x, mode).unwrap();
            for (i, v) in tape.value(y).data().iter().enumerate() {
                let ch = (i / 9) % 2;
                assert_eq!(*v, bn.bias.data()[ch]);
            }
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 2, 3, 3], |i| ((i * 37) % 11) as f64 * 0.7 + 2.0), false);
        let mut bn = BatchNormState::<f64>::new(2);
        let (y, _, _) = bn.forward(&mut tape, x, Mode::Train).unwrap();
        let out = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|i| out[(i * 2 + ch) * 9..(i * 2 + ch + 1) * 9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mismatched_parameter_length_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 3, 2, 2]), false);
        let s = tape.leaf(Tensor::ones(&[2]), true);
        let b = tape.leaf(Tensor::ones(&[2]), true);
        let mut stats = BnStats::new(3);
        assert!(tape.batch_norm(x, s, b, &mut stats, Mode::Train, BN_EPSILON, BN_MOMENTUM).is_err());
    }
}
