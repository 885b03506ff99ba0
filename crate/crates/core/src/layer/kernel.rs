//! Factored per-position kernels and their materialization.

use super::config::{KernelMode, LsDfnConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-position kernel parts.
///
/// `u` is `(N, C', C, H, W)`: the channel-mixing part. `v` is
/// `(N, C', k², H, W)`: the spatial part with `(j, i)` flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T = f32> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub kernel_size: usize,
}

impl<T: Scalar> KernelField<T> {
    pub fn zeros(n: usize, config: &LsDfnConfig, h: usize, w: usize) -> Result<Self> {
        Ok(KernelField {
            u: Tensor::zeros(&[n, config.out_channels, config.channels, h, w])?,
            v: Tensor::zeros(&[n, config.out_channels, config.kernel_area(), h, w])?,
            kernel_size: config.kernel_size,
        })
    }

    /// `(n, c_out, c, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.u.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    /// Inverse of [`split_kernel_params`]: the kernel-branch channel layout.
    pub fn interleave(&self) -> Result<Tensor<T>> {
        let (n, c_out, c, h, w) = self.dims();
        let kk = self.kernel_size * self.kernel_size;
        let u_block = c_out * c * h * w;
        let v_block = c_out * kk * h * w;
        let mut data = Vec::with_capacity(n * (u_block + v_block));
        for b in 0..n {
            data.extend_from_slice(&self.u.data()[b * u_block..(b + 1) * u_block]);
            data.extend_from_slice(&self.v.data()[b * v_block..(b + 1) * v_block]);
        }
        Tensor::new(&[n, c_out * (c + kk), h, w], data)
    }
}

/// Split a kernel-branch output of `C'·(C + k²)` channels into `U` and `V`.
///
/// Channel `v·C + u` is `U[v, u]`; channel `C'·C + v·k² + j·k + i` is
/// `V[v, j, i]`.
pub fn split_kernel_params<T: Scalar>(raw: &Tensor<T>, config: &LsDfnConfig) -> Result<KernelField<T>> {
    let (n, ch, h, w) = raw.dims4()?;
    if ch != config.kernel_branch_channels() {
        return Err(Error::Shape(format!(
            "kernel branch has {ch} channels, expected C'(C+k^2) = {}",
            config.kernel_branch_channels()
        )));
    }
    let u_block = config.out_channels * config.channels * h * w;
    let v_block = config.out_channels * config.kernel_area() * h * w;
    let mut u = Vec::with_capacity(n * u_block);
    let mut v = Vec::with_capacity(n * v_block);
    for b in 0..n {
        let src = &raw.data()[b * (u_block + v_block)..(b + 1) * (u_block + v_block)];
        u.extend_from_slice(&src[..u_block]);
        v.extend_from_slice(&src[u_block..]);
    }
    Ok(KernelField {
        u: Tensor::new(&[n, config.out_channels, config.channels, h, w], u)?,
        v: Tensor::new(&[n, config.out_channels, config.kernel_area(), h, w], v)?,
        kernel_size: config.kernel_size,
    })
}

/// Dense per-position kernels `(N, C', C, k, k, H, W)`. Reference use only.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledKernels<T = f32> {
    pub dims: [usize; 7],
    pub data: Vec<T>,
}

impl<T: Scalar> AssembledKernels<T> {
    #[inline]
    pub fn index(&self, n: usize, v: usize, u: usize, j: usize, i: usize, y: usize, x: usize) -> usize {
        let [_, c_out, c, k, _, h, w] = self.dims;
        (((((n * c_out + v) * c + u) * k + j) * k + i) * h + y) * w + x
    }

    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn at(&self, n: usize, v: usize, u: usize, j: usize, i: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, v, u, j, i, y, x)]
    }
}

/// Materialize full kernels from the factored parts.
///
/// With `r = 1/C` when the kernel residual is on (else 0) and `c = k/2`:
/// * shared-spatial: `W[v,u,j,i] = V[v,j,i] + (U[v,u] + r)·[j=i=c]`
/// * shared-mixing:  `W[v,u,j,i] = U[v,u] + (V[v,c,c] + r)·[j=i=c]`
pub fn assemble_kernel<T: Scalar>(field: &KernelField<T>, config: &LsDfnConfig) -> Result<AssembledKernels<T>> {
    let (n, c_out, c, h, w) = field.dims();
    if c != config.channels || c_out != config.out_channels || field.kernel_size != config.kernel_size {
        return Err(Error::Shape("kernel field does not match config".into()));
    }
    let k = config.kernel_size;
    let center = k / 2;
    let r = T::of(config.kernel_residual());
    let plane = h * w;
    let mut data = vec![T::zero(); n * c_out * c * k * k * plane];
    for b in 0..n {
        for v in 0..c_out {
            for u in 0..c {
                let u_plane = &field.u.data()[((b * c_out + v) * c + u) * plane..][..plane];
                for j in 0..k {
                    for i in 0..k {
                        let v_plane = &field.v.data()[((b * c_out + v) * k * k + j * k + i) * plane..][..plane];
                        let dst = &mut data[((((b * c_out + v) * c + u) * k + j) * k + i) * plane..][..plane];
                        let is_center = j == center && i == center;
                        match config.kernel_mode {
                            KernelMode::SharedSpatial => {
                                for p in 0..plane {
                                    dst[p] = if is_center { v_plane[p] + (u_plane[p] + r) } else { v_plane[p] };
                                }
                            }
                            KernelMode::SharedMixing => {
                                for p in 0..plane {
                                    dst[p] = if is_center { u_plane[p] + (v_plane[p] + r) } else { u_plane[p] };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(AssembledKernels {
        dims: [n, c_out, c, k, k, h, w],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_fill;

    #[test]
    fn layout_small_case() {
        let mut cfg = LsDfnConfig::new(2, 1, 3, 1, 1);
        cfg.in_channels = 2;
        let raw = Tensor::<f32>::from_fn(&[1, 11, 1, 1], |i| i[1] as f32).unwrap();
        let f = split_kernel_params(&raw, &cfg).unwrap();
        assert_eq!(f.u.data(), &[0.0, 1.0]);
        assert_eq!(f.v.data(), &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        // row-major (j, i)
        assert_eq!(f.v.at(&[0, 0, 1 * 3 + 2, 0, 0]), 7.0);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let cfg = LsDfnConfig::new(2, 1, 3, 1, 1);
        let raw = Tensor::<f32>::zeros(&[1, 10, 2, 2]).unwrap();
        assert!(split_kernel_params(&raw, &cfg).is_err());
    }

    #[test]
    fn zeros_split_to_zeros() {
        let cfg = LsDfnConfig::new(3, 2, 3, 1, 1);
        let raw = Tensor::<f32>::zeros(&[2, cfg.kernel_branch_channels(), 4, 4]).unwrap();
        let f = split_kernel_params(&raw, &cfg).unwrap();
        assert_eq!(f.u.max_abs() + f.v.max_abs(), 0.0);
    }

    #[test]
    fn interleave_inverts_split() {
        let cfg = LsDfnConfig::new(3, 2, 3, 1, 1);
        let raw = gaussian_fill::<f32>(&[2, cfg.kernel_branch_channels(), 3, 5], 4, 0.0, 1.0).unwrap();
        let back = split_kernel_params(&raw, &cfg).unwrap().interleave().unwrap();
        assert!(back.bitwise_eq(&raw));
    }

    #[test]
    fn zero_parts_give_centered_mean_kernel() {
        for mode in [KernelMode::SharedSpatial, KernelMode::SharedMixing] {
            let mut cfg = LsDfnConfig::new(4, 2, 3, 1, 1);
            cfg.kernel_mode = mode;
            let f = KernelField::<f32>::zeros(1, &cfg, 2, 2).unwrap();
            let w = assemble_kernel(&f, &cfg).unwrap();
            for v in 0..2 {
                for u in 0..4 {
                    for j in 0..3 {
                        for i in 0..3 {
                            let expect = if j == 1 && i == 1 { 0.25 } else { 0.0 };
                            assert_eq!(w.at(0, v, u, j, i, 1, 0), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shared_spatial_duplicates_pattern_across_channels() {
        let mut cfg = LsDfnConfig::new(3, 2, 3, 1, 1);
        cfg.residual_kernel = false;
        let mut f = KernelField::<f32>::zeros(1, &cfg, 2, 2).unwrap();
        f.v = Tensor::from_fn(f.v.shape(), |i| (i[1] * 10 + i[2]) as f32 + 0.5).unwrap();
        let w = assemble_kernel(&f, &cfg).unwrap();
        for v in 0..2 {
            for j in 0..3 {
                for i in 0..3 {
                    let expect = (v * 10 + j * 3 + i) as f32 + 0.5;
                    for u in 0..3 {
                        assert_eq!(w.at(0, v, u, j, i, 1, 1), expect);
                    }
                }
            }
        }
    }
}
