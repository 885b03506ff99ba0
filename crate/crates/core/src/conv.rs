//! Shared-kernel 2-D convolution (stride 1, zero padding) and its adjoint.
//!
//! Implemented as im2col followed by a GEMM per batch item.

use crate::error::{Error, Result};
use crate::rng::{gaussian_from, Rng};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Weights `(c_out, c_in, k, k)` and bias `(c_out)` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Ok(ConvParams {
            weight: Tensor::zeros(&[c_out, c_in, k, k])?,
            bias: Tensor::zeros(&[c_out])?,
        })
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn gaussian(rng: &mut Rng, c_out: usize, c_in: usize, k: usize, std: f64) -> Result<Self> {
        Ok(ConvParams {
            weight: gaussian_from(rng, &[c_out, c_in, k, k], 0.0, std)?,
            bias: Tensor::zeros(&[c_out])?,
        })
    }

    /// He-style initialization, `std = sqrt(2 / fan_in)`.
    pub fn he(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::gaussian(rng, c_out, c_in, k, (2.0 / (c_in * k * k) as f64).sqrt())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Shape-preserving forward (`pad = k / 2`).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, &self.bias, self.kernel_size() / 2)
    }

    pub fn backward(&self, grad_y: &Tensor<T>, x: &Tensor<T>) -> Result<ConvGrads<T>> {
        conv2d_backward(grad_y, x, &self.weight, self.kernel_size() / 2)
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, pad: usize) -> Result<Geometry> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::Config(format!("kernel size {kh} must be odd")));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "kernel {kh} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        pad,
        ho: h + 2 * pad - kh + 1,
        wo: w + 2 * pad - kw + 1,
    })
}

/// Output columns `[x0, x1)` whose input column `x + i - pad` is in range,
/// and the input column of `x0`.
fn valid_cols(g: &Geometry, i: usize) -> (usize, usize, usize) {
    let shift = i as isize - g.pad as isize;
    let x0 = (-shift).max(0) as usize;
    let x1 = ((g.w as isize - shift).max(0) as usize).min(g.wo);
    let x0 = x0.min(x1);
    (x0, x1, (x0 as isize + shift).max(0) as usize)
}

/// Unfold one batch item into a `(c_in·k·k) × (ho·wo)` column matrix.
fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for u in 0..g.c_in {
        let xin = &x[u * g.h * g.w..(u + 1) * g.h * g.w];
        for j in 0..g.k {
            for i in 0..g.k {
                let row = (u * g.k + j) * g.k + i;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (x0, x1, sx0) = valid_cols(g, i);
                for y in 0..g.ho {
                    let sy = y as isize + j as isize - g.pad as isize;
                    let out = &mut dst[y * g.wo..(y + 1) * g.wo];
                    if sy < 0 || sy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &xin[sy as usize * g.w..(sy as usize + 1) * g.w];
                    out[..x0].fill(T::zero());
                    out[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                    out[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into an image (adjoint of `im2col`).
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let plane = g.ho * g.wo;
    for u in 0..g.c_in {
        let xin = &mut x[u * g.h * g.w..(u + 1) * g.h * g.w];
        for j in 0..g.k {
            for i in 0..g.k {
                let row = (u * g.k + j) * g.k + i;
                let src = &cols[row * plane..(row + 1) * plane];
                let (x0, x1, sx0) = valid_cols(g, i);
                for y in 0..g.ho {
                    let sy = y as isize + j as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xin[sy as usize * g.w + sx0..][..x1 - x0];
                    for (d, &v) in dst.iter_mut().zip(&src[y * g.wo + x0..y * g.wo + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Geometry) -> bool {
    g.k == 1 && g.pad == 0
}

/// `y[n,v,y,x] = b[v] + Σ_u Σ_{j,i} x[n,u,y+j-pad,x+i-pad] · w[v,u,j,i]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let g = geometry(x, weight, pad)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::Shape(format!(
            "bias {:?} for {} output channels",
            bias.shape(),
            g.c_out
        )));
    }
    let plane = g.ho * g.wo;
    let rows = g.c_in * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    let mut cols = if is_pointwise(&g) { Vec::new() } else { vec![T::zero(); rows * plane] };
    for b in 0..g.n {
        let xb = &x.data()[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let yb = &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (v, row) in yb.chunks_mut(plane).enumerate() {
            row.fill(bias.data()[v]);
        }
        let cols_ref: &[T] = if is_pointwise(&g) {
            xb
        } else {
            im2col(&g, xb, &mut cols);
            &cols
        };
        matmul(g.c_out, rows, plane, weight.data(), false, cols_ref, false, yb, true);
    }
    Tensor::new(&[g.n, g.c_out, g.ho, g.wo], out)
}

/// Adjoint of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, weight, pad)?;
    if grad_y.shape() != [g.n, g.c_out, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "output gradient {:?}, forward produced {:?}",
            grad_y.shape(),
            [g.n, g.c_out, g.ho, g.wo]
        )));
    }
    let plane = g.ho * g.wo;
    let rows = g.c_in * g.k * g.k;
    let mut grad_w = vec![T::zero(); g.c_out * rows];
    let mut grad_b = vec![T::zero(); g.c_out];
    let mut grad_x = vec![T::zero(); x.len()];
    let mut cols = vec![T::zero(); rows * plane];
    for b in 0..g.n {
        let xb = &x.data()[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let gyb = &grad_y.data()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (v, row) in gyb.chunks(plane).enumerate() {
            grad_b[v] += row.iter().copied().sum::<T>();
        }
        let gxb = &mut grad_x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        if is_pointwise(&g) {
            matmul(g.c_out, plane, rows, gyb, false, xb, true, &mut grad_w, true);
            matmul(rows, g.c_out, plane, weight.data(), true, gyb, false, gxb, true);
        } else {
            im2col(&g, xb, &mut cols);
            matmul(g.c_out, plane, rows, gyb, false, &cols, true, &mut grad_w, true);
            matmul(rows, g.c_out, plane, weight.data(), true, gyb, false, &mut cols, false);
            col2im(&g, &cols, gxb);
        }
    }
    Ok(ConvGrads {
        x: Tensor::new(x.shape(), grad_x)?,
        weight: Tensor::new(weight.shape(), grad_w)?,
        bias: Tensor::new(&[g.c_out], grad_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_count_neighbours() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[0, 0, r, c]), 4.0);
        }
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(3);
        let x = gaussian_from::<f32>(&mut rng, &[2, 1, 5, 6], 0.0, 1.0).unwrap();
        let mut w = Tensor::<f32>::zeros(&[1, 1, 3, 3]).unwrap();
        w.set(&[0, 0, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, &Tensor::zeros(&[1]).unwrap(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, &Tensor::zeros(&[1]).unwrap(), 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::<f64>::new(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let b = Tensor::<f64>::new(&[1], vec![0.5]).unwrap();
        let y = conv2d(&x, &w, &b, 0).unwrap();
        assert_eq!(y.data(), &[-5.5]);
        let gy = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0).unwrap();
        let g = conv2d_backward(&gy, &x, &w, 0).unwrap();
        assert_eq!(g.weight.data(), &[3.0]);
        assert_eq!(g.x.data(), &[-2.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero() {
        let mut rng = Rng::new(11);
        let x = gaussian_from::<f64>(&mut rng, &[2, 3, 5, 5], 0.0, 1.0).unwrap();
        let w = gaussian_from::<f64>(&mut rng, &[4, 3, 3, 3], 0.0, 1.0).unwrap();
        let gy = Tensor::<f64>::zeros(&[2, 4, 5, 5]).unwrap();
        let g = conv2d_backward(&gy, &x, &w, 1).unwrap();
        assert_eq!(g.x.max_abs() + g.weight.max_abs() + g.bias.max_abs(), 0.0);
    }
}
