use crate::error::{Error, Result};
use crate::nn::conv::window_output;
use crate::tensor::{Matrix, Real, Shape4, Tensor4};

pub fn max_pool<T: Real>(
    input: &Tensor4<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor4<T>> {
    max_pool_indexed(input, kernel, stride).map(|(out, _)| out)
}

/// Max pooling that also returns, per output element, the flat input index
/// of the winning element. Ties resolve to the first maximum in scan order.
pub(crate) fn max_pool_indexed<T: Real>(
    input: &Tensor4<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = input.shape();
    let (oh, ow) = window_output(s, kernel, stride)?;
    let oshape = Shape4::new(s.batch, s.channels, oh, ow);
    let mut out = Tensor4::zeros(oshape);
    let mut arg = vec![0usize; oshape.len()];
    let data = input.data();
    let mut o = 0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let base = input.offset(b, c, 0, 0);
            for y in 0..oh {
                for x in 0..ow {
                    let mut best_i = base + (y * stride.0) * s.width + x * stride.1;
                    let mut best = data[best_i];
                    for dy in 0..kernel.0 {
                        let row = base + (y * stride.0 + dy) * s.width + x * stride.1;
                        for dx in 0..kernel.1 {
                            let v = data[row + dx];
                            if v > best {
                                best = v;
                                best_i = row + dx;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn max_pool_backward<T: Real>(
    grad_out: &Tensor4<T>,
    argmax: &[usize],
    input_shape: Shape4,
) -> Tensor4<T> {
    let mut d_in = Tensor4::zeros(input_shape);
    let d = d_in.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += g;
    }
    d_in
}

/// Mean over the `H x W` plane of every channel, giving a `B x C` matrix.
pub fn global_avg_pool<T: Real>(input: &Tensor4<T>) -> Matrix<T> {
    let s = input.shape();
    let n = s.plane() as f64;
    let mut out = Matrix::zeros(s.batch, s.channels);
    for b in 0..s.batch {
        let row = out.row_mut(b);
        for (c, v) in row.iter_mut().enumerate() {
            let sum: f64 = input.plane(b, c).iter().map(|x| x.as_f64()).sum();
            *v = T::from_f64_lossy(sum / n);
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<T: Real>(grad: &Matrix<T>, input_shape: Shape4) -> Tensor4<T> {
    let mut d_in = Tensor4::zeros(input_shape);
    let inv = T::one() / T::from_f64_lossy(input_shape.plane() as f64);
    for b in 0..input_shape.batch {
        for c in 0..input_shape.channels {
            let g = grad.get(b, c) * inv;
            d_in.plane_mut(b, c).fill(g);
        }
    }
    d_in
}

pub(crate) fn check_pool(kernel: (usize, usize), stride: (usize, usize)) -> Result<()> {
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::config(format!(
            "pool kernel {kernel:?} and stride {stride:?} must be positive"
        )));
    }
    Ok(())
}
