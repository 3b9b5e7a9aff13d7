//! Valid-padding 2-D cross-correlation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `(C_out, C_in, k_h, k_w)`
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    /// `(s_h, s_w)`
    pub stride: (usize, usize),
}

impl<T: Real> ConvLayer<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, stride: (usize, usize)) -> Result<Self> {
        let s = weight.shape();
        if bias.len() != s.batch {
            return Err(Error::shape(format!(
                "conv bias has {} entries for {} output channels",
                bias.len(),
                s.batch
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv stride must be positive"));
        }
        if s.height == 0 || s.width == 0 || s.channels == 0 {
            return Err(Error::shape(format!("degenerate conv kernel {s}")));
        }
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.height, s.width)
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.channels != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, input is {input}",
                self.in_channels()
            )));
        }
        let (oh, ow) = window_output(input, self.kernel(), self.stride)?;
        Ok(Shape4::new(input.batch, self.out_channels(), oh, ow))
    }
}

/// Output spatial size for a valid-padding window op.
pub(crate) fn window_output(
    input: Shape4,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize)> {
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::shape(format!(
            "kernel {kernel:?} / stride {stride:?} must be positive"
        )));
    }
    if input.height < kernel.0 || input.width < kernel.1 {
        return Err(Error::shape(format!(
            "kernel {kernel:?} does not fit input {input}"
        )));
    }
    Ok((
        (input.height - kernel.0) / stride.0 + 1,
        (input.width - kernel.1) / stride.1 + 1,
    ))
}

pub fn conv_forward<T: Real>(input: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<Tensor4<T>> {
    let ishape = input.shape();
    let oshape = layer.output_shape(ishape)?;
    let (kh, kw) = layer.kernel();
    let (sh, sw) = layer.stride;
    let mut out = Tensor4::zeros(oshape);
    let (oh, ow) = (oshape.height, oshape.width);
    // With unit stride and a full-width kernel the input rows kh..kh+oh
    // are one contiguous run that lines up with the output plane.
    let contiguous = sh == 1 && sw == 1 && kw == 1 && ow == ishape.width;

    for b in 0..ishape.batch {
        for co in 0..oshape.channels {
            let plane = out.plane_mut(b, co);
            plane.fill(layer.bias[co]);
            for ci in 0..ishape.channels {
                let src = input.plane(b, ci);
                for dh in 0..kh {
                    for dw in 0..kw {
                        let w = layer.weight.get(co, ci, dh, dw);
                        if contiguous {
                            let start = dh * ishape.width;
                            axpy(plane, w, &src[start..start + plane.len()]);
                            continue;
                        }
                        for y in 0..oh {
                            let row = (y * sh + dh) * ishape.width;
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            if sw == 1 {
                                axpy(dst, w, &src[row + dw..row + dw + ow]);
                            } else {
                                for (x, d) in dst.iter_mut().enumerate() {
                                    *d += w * src[row + x * sw + dw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a conv layer: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv_backward<T: Real>(
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let ishape = input.shape();
    let oshape = grad_out.shape();
    let (kh, kw) = layer.kernel();
    let (sh, sw) = layer.stride;
    let (oh, ow) = (oshape.height, oshape.width);
    let mut d_in = Tensor4::zeros(ishape);
    let mut d_w = Tensor4::zeros(layer.weight.shape());
    let mut d_b = vec![T::zero(); oshape.channels];
    let contiguous = sh == 1 && sw == 1 && kw == 1 && ow == ishape.width;

    for b in 0..ishape.batch {
        for co in 0..oshape.channels {
            let g = grad_out.plane(b, co);
            d_b[co] += g.iter().copied().sum::<T>();
            for ci in 0..ishape.channels {
                let src = input.plane(b, ci);
                for dh in 0..kh {
                    for dw in 0..kw {
                        let w = layer.weight.get(co, ci, dh, dw);
                        let mut acc = T::zero();
                        if contiguous {
                            let start = dh * ishape.width;
                            acc = dot(g, &src[start..start + g.len()]);
                            let dst = &mut d_in.plane_mut(b, ci)[start..start + g.len()];
                            axpy(dst, w, g);
                        } else {
                            for y in 0..oh {
                                let row = (y * sh + dh) * ishape.width;
                                for x in 0..ow {
                                    let gv = g[y * ow + x];
                                    let i = row + x * sw + dw;
                                    acc += gv * src[i];
                                    d_in.plane_mut(b, ci)[i] += w * gv;
                                }
                            }
                        }
                        let idx = d_w.offset(co, ci, dh, dw);
                        d_w.data_mut()[idx] += acc;
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four lanes so the compiler can keep independent accumulators
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weight: Vec<f32>, shape: Shape4, bias: Vec<f32>) -> ConvLayer<f32> {
        ConvLayer::new(Tensor4::new(shape, weight).unwrap(), bias, (1, 1)).unwrap()
    }

    #[test]
    fn adjacent_pair_sums() {
        let input = Tensor4::new(Shape4::new(1, 1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let l = layer(vec![1.0, 1.0], Shape4::new(1, 1, 2, 1), vec![0.0]);
        let out = conv_forward(&input, &l).unwrap();
        assert_eq!(out.shape(), Shape4::new(1, 1, 2, 1));
        assert_eq!(out.data(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let input = Tensor4::filled(Shape4::new(2, 3, 7, 4), 1.5f32);
        let l = layer(vec![0.0; 4 * 3 * 2 * 2], Shape4::new(4, 3, 2, 2), vec![0.0; 4]);
        let out = conv_forward(&input, &l).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let l = layer(vec![0.0; 6], Shape4::new(1, 2, 3, 1), vec![0.0]);
        let bad_channels = Tensor4::<f32>::zeros(Shape4::new(1, 1, 5, 1));
        assert!(matches!(conv_forward(&bad_channels, &l), Err(Error::Shape(_))));
        let too_short = Tensor4::<f32>::zeros(Shape4::new(1, 2, 2, 1));
        assert!(matches!(conv_forward(&too_short, &l), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_output_shape() {
        let l = ConvLayer::new(
            Tensor4::<f32>::zeros(Shape4::new(2, 1, 3, 2)),
            vec![0.0; 2],
            (2, 3),
        )
        .unwrap();
        let s = l.output_shape(Shape4::new(1, 1, 10, 8)).unwrap();
        assert_eq!((s.height, s.width), (4, 3));
    }
}
