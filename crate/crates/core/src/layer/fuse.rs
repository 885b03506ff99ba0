//! Reduction over the sample axis.

use super::config::FusionMode;
use super::sample::SampledFeatures;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fuse `(N, s², C', H, W)` into `(N, C', H, W)`.
///
/// Attention mode sums the (already weighted) samples, max-pool takes the
/// per-channel maximum over samples, mean averages. Reductions start from
/// sample 0, so a single sample passes through bit-for-bit.
pub fn fuse_samples<T: Scalar>(sampled: &SampledFeatures<T>, mode: FusionMode) -> Result<Tensor<T>> {
    let (n, s2, c_out, h, w) = sampled.dims();
    let p = h * w;
    let mut out = Vec::with_capacity(n * c_out * p);
    for b in 0..n {
        for v in 0..c_out {
            let mut acc = sampled.plane(b, 0, v).to_vec();
            for sample in 1..s2 {
                let src = sampled.plane(b, sample, v);
                for (a, &x) in acc.iter_mut().zip(src) {
                    match mode {
                        FusionMode::Attention | FusionMode::Mean => *a += x,
                        FusionMode::MaxPool => {
                            if x > *a {
                                *a = x
                            }
                        }
                    }
                }
            }
            if mode == FusionMode::Mean && s2 > 1 {
                let inv = T::one() / T::of(s2 as f64);
                acc.iter_mut().for_each(|a| *a = *a * inv);
            }
            out.extend(acc);
        }
    }
    Tensor::new(&[n, c_out, h, w], out)
}

/// Adjoint of [`fuse_samples`]. Max-pool routes each gradient to the first
/// sample attaining the maximum.
pub fn fuse_samples_backward<T: Scalar>(
    grad: &Tensor<T>,
    sampled: &SampledFeatures<T>,
    mode: FusionMode,
) -> Result<SampledFeatures<T>> {
    let (n, s2, c_out, h, w) = sampled.dims();
    if grad.shape() != [n, c_out, h, w] {
        return Err(Error::Shape(format!(
            "fused gradient {:?}, expected {:?}",
            grad.shape(),
            [n, c_out, h, w]
        )));
    }
    let p = h * w;
    let mut out = SampledFeatures::zeros(n, s2, c_out, h, w)?;
    let scale = match mode {
        FusionMode::Mean => T::one() / T::of(s2 as f64),
        _ => T::one(),
    };
    let data = out.data.data_mut();
    for b in 0..n {
        for v in 0..c_out {
            let g = &grad.data()[(b * c_out + v) * p..][..p];
            match mode {
                FusionMode::Attention | FusionMode::Mean => {
                    for sample in 0..s2 {
                        let dst = &mut data[((b * s2 + sample) * c_out + v) * p..][..p];
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = gv * scale;
                        }
                    }
                }
                FusionMode::MaxPool => {
                    for q in 0..p {
                        let mut best = 0;
                        let mut best_val = sampled.plane(b, 0, v)[q];
                        for sample in 1..s2 {
                            let val = sampled.plane(b, sample, v)[q];
                            if val > best_val {
                                best = sample;
                                best_val = val;
                            }
                        }
                        data[((b * s2 + best) * c_out + v) * p + q] = g[q];
                    }
                }
            }
        }
    }
    Ok(out)
}
