//! Split sample/position attention and the unfactored reference form.

use super::config::LsDfnConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-position attention weights.
///
/// `sam` is `(N, C', s², H, W)`, read at the output position. `pos` is
/// `(N, C', k², H, W)`, read at the sampled region center.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionField<T = f32> {
    pub sam: Tensor<T>,
    pub pos: Tensor<T>,
    pub residual_applied: bool,
}

impl<T: Scalar> AttentionField<T> {
    /// All weights equal to one.
    pub fn neutral(n: usize, config: &LsDfnConfig, h: usize, w: usize) -> Result<Self> {
        Ok(AttentionField {
            sam: Tensor::full(&[n, config.out_channels, config.sample_count(), h, w], T::one())?,
            pos: Tensor::full(&[n, config.out_channels, config.kernel_area(), h, w], T::one())?,
            residual_applied: false,
        })
    }

    /// Stored weights in branch-output channel layout (no residual removal).
    pub fn to_branch_layout(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.sam.shape();
        let p = self.pos.shape();
        Ok((
            self.sam.clone().reshape(&[s[0], s[1] * s[2], s[3], s[4]])?,
            self.pos.clone().reshape(&[p[0], p[1] * p[2], p[3], p[4]])?,
        ))
    }
}

/// Reshape the two attention sub-branch outputs into an [`AttentionField`],
/// adding 1 to every weight when the attention residual is on.
///
/// Channel `v·s² + β·s + α` is `A_sam[v, (β, α)]`, channel `v·k² + j·k + i`
/// is `A_pos[v, (j, i)]`.
pub fn build_attention<T: Scalar>(raw_sam: &Tensor<T>, raw_pos: &Tensor<T>, config: &LsDfnConfig) -> Result<AttentionField<T>> {
    let (n, cs, h, w) = raw_sam.dims4()?;
    let (np, cp, hp, wp) = raw_pos.dims4()?;
    if cs != config.attention_sample_channels() {
        return Err(Error::Shape(format!(
            "sample attention has {cs} channels, expected C's^2 = {}",
            config.attention_sample_channels()
        )));
    }
    if cp != config.attention_position_channels() {
        return Err(Error::Shape(format!(
            "position attention has {cp} channels, expected C'k^2 = {}",
            config.attention_position_channels()
        )));
    }
    if (n, h, w) != (np, hp, wp) {
        return Err(Error::Shape("attention sub-branches disagree on N, H, W".into()));
    }
    let shift = |t: &Tensor<T>| {
        if config.residual_attention {
            t.map(|v| v + T::one())
        } else {
            t.clone()
        }
    };
    Ok(AttentionField {
        sam: shift(raw_sam).reshape(&[n, config.out_channels, config.sample_count(), h, w])?,
        pos: shift(raw_pos).reshape(&[n, config.out_channels, config.kernel_area(), h, w])?,
        residual_applied: config.residual_attention,
    })
}

/// Unfactored attention `(N, C', s, s, k, k, H, W)`, indexed at the sampled
/// center like `A_pos`. Oracle use only.
#[derive(Clone, Debug, PartialEq)]
pub struct FullAttention<T = f32> {
    pub dims: [usize; 8],
    pub data: Vec<T>,
}

impl<T: Scalar> FullAttention<T> {
    pub fn filled(n: usize, config: &LsDfnConfig, h: usize, w: usize, value: T) -> Self {
        let (s, k) = (config.samples, config.kernel_size);
        let dims = [n, config.out_channels, s, s, k, k, h, w];
        FullAttention {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn index(&self, n: usize, v: usize, beta: usize, alpha: usize, j: usize, i: usize, y: usize, x: usize) -> usize {
        let [_, c_out, s, _, k, _, h, w] = self.dims;
        ((((((n * c_out + v) * s + beta) * s + alpha) * k + j) * k + i) * h + y) * w + x
    }

    /// Rank-1 construction `A[v,β,α,j,i](ŷ,x̂) = A_sam[v,β,α](y,x) · A_pos[v,j,i](ŷ,x̂)`.
    ///
    /// Entries whose output position `(y, x)` falls outside the image are
    /// never read and are left at zero.
    pub fn outer(attn: &AttentionField<T>, config: &LsDfnConfig) -> Result<Self> {
        let ps = attn.pos.shape();
        let (n, h, w) = (ps[0], ps[3], ps[4]);
        let mut full = FullAttention::filled(n, config, h, w, T::zero());
        let (s, k) = (config.samples, config.kernel_size);
        for b in 0..n {
            for v in 0..config.out_channels {
                for beta in 0..s {
                    for alpha in 0..s {
                        let (oy, ox) = (config.sample_offset(beta), config.sample_offset(alpha));
                        for j in 0..k {
                            for i in 0..k {
                                for sy in 0..h {
                                    for sx in 0..w {
                                        let (y, x) = (sy as isize - oy, sx as isize - ox);
                                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                            continue;
                                        }
                                        let a_sam = attn.sam.at(&[b, v, beta * s + alpha, y as usize, x as usize]);
                                        let a_pos = attn.pos.at(&[b, v, j * k + i, sy, sx]);
                                        let idx = full.index(b, v, beta, alpha, j, i, sy, sx);
                                        full.data[idx] = a_sam * a_pos;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(full)
    }
}
