use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::EngineError;

/// Row-wise softmax of `[N, K]` logits, stabilized by subtracting the row
/// maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    if logits.shape().len() != 2 {
        return Err(EngineError::Shape(format!("softmax expects [N, K], got {:?}", logits.shape())));
    }
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let shape = input.shape();
    let hw: usize = shape[2..].iter().product();
    let inv = T::one() / T::cast_f64(hw as f64);
    let g = upstream.data();
    Tensor::from_fn(shape, |i| g[i / hw] * inv)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let g = upstream.data();
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, k, d, T::one(), g, k as isize, 1, w.data(), d as isize, 1, T::zero(), &mut dx, d as isize, 1);
    let mut dw = vec![T::zero(); k * d];
    T::gemm(k, n, d, T::one(), g, 1, k as isize, x.data(), d as isize, 1, T::zero(), &mut dw, d as isize, 1);
    let mut db = vec![T::zero(); k];
    for row in g.chunks(k) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    (
        Tensor::from_vec(&[n, d], dx).expect("shape"),
        Tensor::from_vec(&[k, d], dw).expect("shape"),
        Tensor::from_vec(&[k], db).expect("shape"),
    )
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    /// Mean over the spatial extent: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, EngineError> {
        let x = self.value(a);
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(EngineError::Shape(format!("global_avg_pool expects [N, C, H, W], got {shape:?}")));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = T::one() / T::cast_f64(hw as f64);
        let out: Vec<T> = x.data().chunks(hw).map(|plane| plane.iter().fold(T::zero(), |s, &v| s + v) * inv).collect();
        let out = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(a)))
    }

    /// `x W^T + b` for `x: [N, D]`, `W: [K, D]`, `b: [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, EngineError> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(EngineError::Shape(format!(
                "linear: input {:?} incompatible with weights {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![T::zero(); n * k];
        let beta = if let Some(b) = bias {
            let b = self.value(b);
            if b.numel() != k {
                return Err(EngineError::Shape(format!("linear bias has {} entries for {k} outputs", b.numel())));
            }
            for row in out.chunks_mut(k) {
                row.copy_from_slice(b.data());
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(n, d, k, T::one(), x.data(), d as isize, 1, w.data(), 1, d as isize, beta, &mut out, k as isize, 1);
        let out = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, EngineError> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(EngineError::Shape(format!(
                "cross entropy: logits {:?} for {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let k = z.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(EngineError::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax(z)?;
        let mut total = T::zero();
        for (row, &label) in z.data().chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + (lse - row[label]);
        }
        let loss = Tensor::scalar(total / T::cast_f64(labels.len() as f64));
        Ok(self.push(loss, Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = tape.leaf(t(&[3], &[0.0, 1.0, 5.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 5.0]);
    }

    #[test]
    fn global_pool_means() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);

        let x = tape.leaf(Tensor::full(&[2, 3, 4, 5], 1.75), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.75));

        let x = tape.leaf(t(&[1, 3, 1, 1], &[4.0, -2.0, 9.0]), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, -2.0, 9.0]);
    }

    #[test]
    fn linear_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[1, 2], &[3.0, 4.0]), false);
        let b = tape.leaf(t(&[1], &[5.0]), false);
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[16.0]);
    }

    #[test]
    fn linear_identity_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]), false);
        let w = tape.leaf(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let w_bad = tape.leaf(Tensor::zeros(&[3, 4]), false);
        assert!(tape.linear(x, w_bad, None).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[3, 4]), false);
        let loss = tape.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_has_tiny_loss() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 3], &[0.0, 30.0, 0.0]), false);
        let loss = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert_eq!(
            tape.softmax_cross_entropy(z, &[0, 3]),
            Err(EngineError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (v, e) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-7);
        }
        let a = softmax(&t(&[1, 3], &[0.2, -1.0, 3.0])).unwrap();
        let b = softmax(&t(&[1, 3], &[100.2, 99.0, 103.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-7);
        }
    }
}
