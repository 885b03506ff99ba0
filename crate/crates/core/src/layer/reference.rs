//! Materialized-kernel reference path.
//!
//! Direct loops over dense per-position kernels. Single-threaded with a fixed
//! reduction order: input channel innermost, then kernel offset `(j, i)`.
//! Cost is `C·k²` per response; used as an oracle and for benchmarking.

use super::attention::{AttentionField, FullAttention};
use super::config::LsDfnConfig;
use super::kernel::{assemble_kernel, AssembledKernels, KernelField};
use super::sample::SampledFeatures;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention applied on the reference path.
#[derive(Clone, Copy, Debug)]
pub enum ReferenceAttention<'a, T> {
    None,
    Split(&'a AttentionField<T>),
    Full(&'a FullAttention<T>),
}

/// Sampled convolution with dense kernels.
pub fn sample_conv_reference<T: Scalar>(
    features: &Tensor<T>,
    kernels: &AssembledKernels<T>,
    attention: ReferenceAttention<'_, T>,
    config: &LsDfnConfig,
) -> Result<SampledFeatures<T>> {
    let (n, c, h, w) = features.dims4()?;
    let (s, k, c_out) = (config.samples, config.kernel_size, config.out_channels);
    if kernels.dims != [n, c_out, c, k, k, h, w] {
        return Err(Error::Shape(format!(
            "dense kernels {:?} do not match features {:?}",
            kernels.dims,
            features.shape()
        )));
    }
    let center = (k / 2) as isize;
    let mut out = SampledFeatures::zeros(n, s * s, c_out, h, w)?;
    for b in 0..n {
        for v in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    for beta in 0..s {
                        for alpha in 0..s {
                            let sy = y as isize + config.sample_offset(beta);
                            let sx = x as isize + config.sample_offset(alpha);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let (sy, sx) = (sy as usize, sx as usize);
                            let mut acc = T::zero();
                            for j in 0..k {
                                let fy = sy as isize + j as isize - center;
                                if fy < 0 || fy >= h as isize {
                                    continue;
                                }
                                for i in 0..k {
                                    let fx = sx as isize + i as isize - center;
                                    if fx < 0 || fx >= w as isize {
                                        continue;
                                    }
                                    let weight = match attention {
                                        ReferenceAttention::None => None,
                                        ReferenceAttention::Split(a) => Some(a.pos.at(&[b, v, j * k + i, sy, sx])),
                                        ReferenceAttention::Full(a) => {
                                            Some(a.data[a.index(b, v, beta, alpha, j, i, sy, sx)])
                                        }
                                    };
                                    for u in 0..c {
                                        let f = features.at(&[b, u, fy as usize, fx as usize]);
                                        let mut term = f * kernels.at(b, v, u, j, i, y, x);
                                        if let Some(a) = weight {
                                            term = term * a;
                                        }
                                        acc += term;
                                    }
                                }
                            }
                            if let ReferenceAttention::Split(a) = attention {
                                acc = a.sam.at(&[b, v, beta * s + alpha, y, x]) * acc;
                            }
                            out.data.set(&[b, beta * s + alpha, v, y, x], acc);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Unfactored attention applied inside the kernel sum:
/// `X̃ = Σ_u Σ_{j,i} F(ŷ+j-c, x̂+i-c) · W(y,x) · A[β,α,j,i](ŷ,x̂)`.
pub fn full_attention_reference<T: Scalar>(
    features: &Tensor<T>,
    field: &KernelField<T>,
    attention: &FullAttention<T>,
    config: &LsDfnConfig,
) -> Result<SampledFeatures<T>> {
    let (n, _, h, w) = features.dims4()?;
    let expect = [
        n,
        config.out_channels,
        config.samples,
        config.samples,
        config.kernel_size,
        config.kernel_size,
        h,
        w,
    ];
    if attention.dims != expect {
        return Err(Error::Shape(format!(
            "full attention {:?}, expected {expect:?}",
            attention.dims
        )));
    }
    let kernels = assemble_kernel(field, config)?;
    sample_conv_reference(features, &kernels, ReferenceAttention::Full(attention), config)
}
