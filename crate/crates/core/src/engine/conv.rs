use super::tape::{Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::EngineError;

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit the padded input.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Range of output columns `[lo, hi)` whose input column
/// `ow * stride + kj - pad` lies inside `[0, w)`.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one image `[cin, h, w]` into a `[cin*kh*kw, ho*wo]` patch matrix.
fn im2col<T: Scalar>(image: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let dst = &mut col[row + oh * g.wo..row + (oh + 1) * g.wo];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image,
/// accumulating overlaps in a fixed order.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, image: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oh * g.wo + lo..row + oh * g.wo + hi];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Geometry, EngineError> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(EngineError::Shape(format!(
            "conv2d expects 4-D input and weights, got {input:?} and {weight:?}"
        )));
    }
    if input[1] != weight[1] {
        return Err(EngineError::Shape(format!(
            "conv2d input has {} channels but weights expect {}",
            input[1], weight[1]
        )));
    }
    let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
    let (Some(ho), Some(wo)) = (
        conv2d_output_size(h, kh, stride, pad),
        conv2d_output_size(w, kw, stride, pad),
    ) else {
        return Err(EngineError::Shape(format!(
            "kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad} stride {stride}"
        )));
    };
    Ok(Geometry { cin: input[1], h, w, kh, kw, ho, wo, stride, pad })
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Returns the output and, when `keep_cols` is set and the kernel is not
/// pointwise, the patch matrices of all images.
fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &Geometry,
    keep_cols: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let (k, p) = (g.patch_len(), g.out_len());
    let image_len = g.cin * g.h * g.w;
    let keep = keep_cols && !g.pointwise();
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = match (g.pointwise(), keep) {
        (true, _) => Vec::new(),
        (false, true) => vec![T::zero(); n * k * p],
        (false, false) => vec![T::zero(); k * p],
    };
    for (i, out_i) in out.chunks_mut(cout * p).enumerate() {
        let image = &x.data()[i * image_len..(i + 1) * image_len];
        let patches: &[T] = if g.pointwise() {
            image
        } else {
            let col = if keep { &mut cols[i * k * p..(i + 1) * k * p] } else { &mut cols[..] };
            im2col(image, g, col);
            col
        };
        if let Some(b) = b {
            for (co, row) in out_i.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(cout, k, p, T::one(), w.data(), k as isize, 1, patches, p as isize, 1, beta, out_i, p as isize, 1);
    }
    let out = Tensor::from_vec(&[n, cout, g.ho, g.wo], out).expect("conv output shape");
    (out, keep.then_some(cols))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
    cached_cols: Option<&[T]>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let g = geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let (k, p) = (g.patch_len(), g.out_len());
    let image_len = g.cin * g.h * g.w;

    let mut dw = need_weight.then(|| vec![T::zero(); cout * k]);
    let mut dx = need_input.then(|| vec![T::zero(); x.numel()]);
    let mut db = need_bias.then(|| vec![T::zero(); cout]);
    let mut col = if cached_cols.is_none() && need_weight && !g.pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
    let mut dcol = if need_input && !g.pointwise() { vec![T::zero(); k * p] } else { Vec::new() };

    for i in 0..n {
        let image = &x.data()[i * image_len..(i + 1) * image_len];
        let dout = &upstream.data()[i * cout * p..(i + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in dout.chunks(p).enumerate() {
                db[co] = db[co] + row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let patches: &[T] = if g.pointwise() {
                image
            } else if let Some(cached) = cached_cols {
                &cached[i * k * p..(i + 1) * k * p]
            } else {
                im2col(image, &g, &mut col);
                &col
            };
            // dW[cout, k] += dOut[cout, p] * patches[k, p]^T
            T::gemm(cout, p, k, T::one(), dout, p as isize, 1, patches, 1, p as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dimage = &mut dx[i * image_len..(i + 1) * image_len];
            if g.pointwise() {
                // dX[cin, p] = W[cout, cin]^T * dOut[cout, p]
                T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, dout, p as isize, 1, T::zero(), dimage, p as isize, 1);
            } else {
                T::gemm(k, cout, p, T::one(), w.data(), 1, k as isize, dout, p as isize, 1, T::zero(), &mut dcol, p as isize, 1);
                col2im(&dcol, &g, dimage);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_vec(x.shape(), d).expect("shape")),
        weight: dw.map(|d| Tensor::from_vec(w.shape(), d).expect("shape")),
        bias: db.map(|d| Tensor::from_vec(&[cout], d).expect("shape")),
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation of `[N, Cin, H, W]` input with `[Cout, Cin, kh, kw]`
    /// weights, plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, EngineError> {
        let (x, w) = (self.value(input), self.value(weight));
        let g = geometry(x.shape(), w.shape(), stride, pad)?;
        let b = match bias {
            Some(b) => {
                let b = self.value(b);
                if b.numel() != w.shape()[0] {
                    return Err(EngineError::Shape(format!(
                        "conv2d bias has {} entries for {} output channels",
                        b.numel(),
                        w.shape()[0]
                    )));
                }
                Some(b)
            }
            None => None,
        };
        let (out, cols) = conv2d_forward(x, w, b, &g, self.requires_grad(weight));
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride, pad, cols }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, b: Option<Tensor<f64>>, stride: usize, pad: usize) -> Result<Tensor<f64>, EngineError> {
        let mut tape = Tape::new();
        let x = tape.leaf(x, false);
        let w = tape.leaf(w, false);
        let b = b.map(|b| tape.leaf(b, false));
        let y = tape.conv2d(x, w, b, stride, pad)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 2.0);
        let y = run(x.clone(), Tensor::ones(&[1, 1, 1, 1]), Some(Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_the_patch() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
        let y = run(x, Tensor::ones(&[1, 1, 3, 3]), Some(Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn output_size_follows_floor_rule() {
        let x = Tensor::<f64>::ones(&[1, 2, 7, 6]);
        let y = run(x, Tensor::ones(&[3, 2, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 3]);
        // Corner sees a 2x2 window of ones per channel.
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let err = run(Tensor::ones(&[1, 3, 4, 4]), Tensor::ones(&[2, 2, 3, 3]), None, 1, 1).unwrap_err();
        assert!(matches!(err, EngineError::Shape(_)));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        assert!(run(Tensor::ones(&[1, 1, 2, 2]), Tensor::ones(&[1, 1, 5, 5]), None, 1, 1).is_err());
        assert_eq!(conv2d_output_size(2, 5, 1, 1), None);
    }

    #[test]
    fn no_kernel_flip() {
        // A kernel with a single 1 at the top-left reads the top-left of each
        // window.
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        let y = run(x, Tensor::from_vec(&[1, 1, 2, 2], w).unwrap(), None, 1, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
