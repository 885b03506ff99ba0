//! Largely sampled dynamic convolution, factored fast path.
//!
//! For output position `(y, x)` and sample `(β, α)` the region center is
//! `ŷ = y + (β - s/2)·γ`, `x̂ = x + (α - s/2)·γ`. Kernels are read at
//! `(y, x)`, features around `(ŷ, x̂)` with zero padding, position attention
//! at `(ŷ, x̂)`, sample attention at `(y, x)`. A sample whose center lies
//! outside the image contributes nothing.
//!
//! The dense kernel is never built. In shared-spatial mode the `k×k` part is
//! correlated with the channel sum of the features and the `U` part is a
//! per-position `1×1` mix at the sampled center, so each response costs
//! `C + k²` multiply-adds instead of `C·k²`.

use super::attention::AttentionField;
use super::config::{KernelMode, LsDfnConfig};
use super::kernel::KernelField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sampled responses `(N, s², C', H, W)`, sample index row-major over `(β, α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledFeatures<T = f32> {
    pub data: Tensor<T>,
}

impl<T: Scalar> SampledFeatures<T> {
    pub fn zeros(n: usize, samples: usize, c_out: usize, h: usize, w: usize) -> Result<Self> {
        Ok(SampledFeatures {
            data: Tensor::zeros(&[n, samples, c_out, h, w])?,
        })
    }

    /// `(n, s², c_out, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn plane(&self, n: usize, sample: usize, v: usize) -> &[T] {
        let (_, s2, c_out, h, w) = self.dims();
        let p = h * w;
        &self.data.data()[((n * s2 + sample) * c_out + v) * p..][..p]
    }

    fn plane_mut(&mut self, n: usize, sample: usize, v: usize) -> &mut [T] {
        let (_, s2, c_out, h, w) = self.dims();
        let p = h * w;
        &mut self.data.data_mut()[((n * s2 + sample) * c_out + v) * p..][..p]
    }
}

/// Gradients of the factored sampling stage.
#[derive(Clone, Debug)]
pub struct SampleGrads<T = f32> {
    pub features: Tensor<T>,
    pub field: KernelField<T>,
    pub attention: Option<AttentionField<T>>,
}

/// Half-open index range `r` such that `0 <= r + shift < len` for every
/// shift, intersected with `0..len`.
fn valid_range(len: usize, shifts: &[isize]) -> (usize, usize) {
    let mut lo = 0isize;
    let mut hi = len as isize;
    for &s in shifts {
        lo = lo.max(-s);
        hi = hi.min(len as isize - s);
    }
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[inline]
fn shifted(idx: usize, shift: isize) -> usize {
    (idx as isize + shift) as usize
}

fn check_inputs<T: Scalar>(
    features: &Tensor<T>,
    field: &KernelField<T>,
    attn: Option<&AttentionField<T>>,
    config: &LsDfnConfig,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = features.dims4()?;
    if c != config.channels {
        return Err(Error::Shape(format!(
            "features have {c} channels, config says C = {}",
            config.channels
        )));
    }
    let expect_u = [n, config.out_channels, c, h, w];
    let expect_v = [n, config.out_channels, config.kernel_area(), h, w];
    if field.u.shape() != expect_u || field.v.shape() != expect_v {
        return Err(Error::Shape(format!(
            "kernel field U {:?} / V {:?}, expected {expect_u:?} / {expect_v:?}",
            field.u.shape(),
            field.v.shape()
        )));
    }
    if let Some(a) = attn {
        let es = [n, config.out_channels, config.sample_count(), h, w];
        if a.sam.shape() != es || a.pos.shape() != expect_v {
            return Err(Error::Shape(format!(
                "attention A_sam {:?} / A_pos {:?}, expected {es:?} / {expect_v:?}",
                a.sam.shape(),
                a.pos.shape()
            )));
        }
    }
    Ok((n, c, h, w))
}

fn channel_sum<T: Scalar>(features: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = features.dims4().expect("rank 4");
    let p = h * w;
    let mut out = vec![T::zero(); n * p];
    for b in 0..n {
        let dst = &mut out[b * p..(b + 1) * p];
        for u in 0..c {
            let src = &features.data()[(b * c + u) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Responses before sample attention: position attention (when given) is
/// applied inside the kernel sum.
fn responses<T: Scalar>(
    features: &Tensor<T>,
    field: &KernelField<T>,
    pos: Option<&Tensor<T>>,
    config: &LsDfnConfig,
) -> Result<SampledFeatures<T>> {
    let (n, c, h, w) = features.dims4()?;
    let (s, k, c_out) = (config.samples, config.kernel_size, config.out_channels);
    let (kk, center, p) = (k * k, k / 2, h * w);
    let r = T::of(config.kernel_residual());
    let sums = channel_sum(features);
    let mut out = SampledFeatures::zeros(n, s * s, c_out, h, w)?;
    let mut mix = vec![T::zero(); p];
    let fdata = features.data();
    for b in 0..n {
        let fb = &fdata[b * c * p..(b + 1) * c * p];
        let sb = &sums[b * p..(b + 1) * p];
        for v in 0..c_out {
            let u_planes = &field.u.data()[(b * c_out + v) * c * p..][..c * p];
            let v_planes = &field.v.data()[(b * c_out + v) * kk * p..][..kk * p];
            let pos_planes = pos.map(|t| &t.data()[(b * c_out + v) * kk * p..][..kk * p]);
            for beta in 0..s {
                for alpha in 0..s {
                    let (oy, ox) = (config.sample_offset(beta), config.sample_offset(alpha));
                    let (y0, y1) = valid_range(h, &[oy]);
                    let (x0, x1) = valid_range(w, &[ox]);
                    let dst = out.plane_mut(b, beta * s + alpha, v);
                    let a_center = pos_planes.map(|pp| &pp[(center * k + center) * p..][..p]);
                    match config.kernel_mode {
                        KernelMode::SharedSpatial => {
                            mix.fill(T::zero());
                            for u in 0..c {
                                let up = &u_planes[u * p..][..p];
                                let fp = &fb[u * p..][..p];
                                for y in y0..y1 {
                                    let sy = shifted(y, oy);
                                    for x in x0..x1 {
                                        mix[y * w + x] += up[y * w + x] * fp[sy * w + shifted(x, ox)];
                                    }
                                }
                            }
                            for j in 0..k {
                                for i in 0..k {
                                    let (dy, dx) = (oy + j as isize - center as isize, ox + i as isize - center as isize);
                                    let (ya, yb) = valid_range(h, &[oy, dy]);
                                    let (xa, xb) = valid_range(w, &[ox, dx]);
                                    let vp = &v_planes[(j * k + i) * p..][..p];
                                    let ap = pos_planes.map(|pp| &pp[(j * k + i) * p..][..p]);
                                    for y in ya..yb {
                                        for x in xa..xb {
                                            let mut t = vp[y * w + x] * sb[shifted(y, dy) * w + shifted(x, dx)];
                                            if let Some(ap) = ap {
                                                t = t * ap[shifted(y, oy) * w + shifted(x, ox)];
                                            }
                                            dst[y * w + x] += t;
                                        }
                                    }
                                }
                            }
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let sc = shifted(y, oy) * w + shifted(x, ox);
                                    let mut t = mix[y * w + x] + r * sb[sc];
                                    if let Some(ac) = a_center {
                                        t = t * ac[sc];
                                    }
                                    dst[y * w + x] += t;
                                }
                            }
                        }
                        KernelMode::SharedMixing => {
                            for j in 0..k {
                                for i in 0..k {
                                    let (dy, dx) = (oy + j as isize - center as isize, ox + i as isize - center as isize);
                                    let (ya, yb) = valid_range(h, &[oy, dy]);
                                    let (xa, xb) = valid_range(w, &[ox, dx]);
                                    mix.fill(T::zero());
                                    for u in 0..c {
                                        let up = &u_planes[u * p..][..p];
                                        let fp = &fb[u * p..][..p];
                                        for y in ya..yb {
                                            for x in xa..xb {
                                                mix[y * w + x] += up[y * w + x] * fp[shifted(y, dy) * w + shifted(x, dx)];
                                            }
                                        }
                                    }
                                    let ap = pos_planes.map(|pp| &pp[(j * k + i) * p..][..p]);
                                    for y in ya..yb {
                                        for x in xa..xb {
                                            let mut t = mix[y * w + x];
                                            if let Some(ap) = ap {
                                                t = t * ap[shifted(y, oy) * w + shifted(x, ox)];
                                            }
                                            dst[y * w + x] += t;
                                        }
                                    }
                                }
                            }
                            let vc = &v_planes[(center * k + center) * p..][..p];
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let sc = shifted(y, oy) * w + shifted(x, ox);
                                    let mut t = (vc[y * w + x] + r) * sb[sc];
                                    if let Some(ac) = a_center {
                                        t = t * ac[sc];
                                    }
                                    dst[y * w + x] += t;
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

pub(crate) fn apply_sample_attention<T: Scalar>(pre: &SampledFeatures<T>, sam: &Tensor<T>) -> SampledFeatures<T> {
    let (n, s2, c_out, h, w) = pre.dims();
    let p = h * w;
    let mut out = pre.clone();
    for b in 0..n {
        for sample in 0..s2 {
            for v in 0..c_out {
                let a = &sam.data()[((b * c_out + v) * s2 + sample) * p..][..p];
                for (o, &a) in out.plane_mut(b, sample, v).iter_mut().zip(a) {
                    *o = a * *o;
                }
            }
        }
    }
    out
}

/// Sampled dynamic convolution without attention.
pub fn sample_conv<T: Scalar>(features: &Tensor<T>, field: &KernelField<T>, config: &LsDfnConfig) -> Result<SampledFeatures<T>> {
    check_inputs(features, field, None, config)?;
    responses(features, field, None, config)
}

/// Sampled dynamic convolution with split attention:
/// `X̃ = A_sam(y,x) · Σ_u Σ_{j,i} F(ŷ+j-c, x̂+i-c) · W(y,x) · A_pos(ŷ,x̂)`.
pub fn attended_sample_conv<T: Scalar>(
    features: &Tensor<T>,
    field: &KernelField<T>,
    attn: &AttentionField<T>,
    config: &LsDfnConfig,
) -> Result<SampledFeatures<T>> {
    Ok(attended_sample_conv_parts(features, field, attn, config)?.1)
}

/// Returns `(responses before sample attention, attended responses)`.
pub(crate) fn attended_sample_conv_parts<T: Scalar>(
    features: &Tensor<T>,
    field: &KernelField<T>,
    attn: &AttentionField<T>,
    config: &LsDfnConfig,
) -> Result<(SampledFeatures<T>, SampledFeatures<T>)> {
    check_inputs(features, field, Some(attn), config)?;
    let pre = responses(features, field, Some(&attn.pos), config)?;
    let out = apply_sample_attention(&pre, &attn.sam);
    Ok((pre, out))
}

/// Adjoint of the sampling stage.
///
/// `pre` must be the responses before sample attention from the matching
/// forward call (equal to the output when `attn` is `None`).
pub fn sample_conv_backward<T: Scalar>(
    grad_out: &SampledFeatures<T>,
    pre: &SampledFeatures<T>,
    features: &Tensor<T>,
    field: &KernelField<T>,
    attn: Option<&AttentionField<T>>,
    config: &LsDfnConfig,
) -> Result<SampleGrads<T>> {
    let (n, c, h, w) = check_inputs(features, field, attn, config)?;
    let (s, k, c_out) = (config.samples, config.kernel_size, config.out_channels);
    let (s2, kk, center, p) = (s * s, k * k, k / 2, h * w);
    if grad_out.dims() != (n, s2, c_out, h, w) || pre.dims() != (n, s2, c_out, h, w) {
        return Err(Error::Shape(format!(
            "sampled gradient {:?} / saved responses {:?}, expected {:?}",
            grad_out.data.shape(),
            pre.data.shape(),
            [n, s2, c_out, h, w]
        )));
    }
    let r = T::of(config.kernel_residual());
    let sums = channel_sum(features);
    let mut g_f = vec![T::zero(); features.len()];
    let mut g_sum = vec![T::zero(); n * p];
    let mut g_u = vec![T::zero(); field.u.len()];
    let mut g_v = vec![T::zero(); field.v.len()];
    let mut g_sam = attn.map(|a| vec![T::zero(); a.sam.len()]);
    let mut g_pos = attn.map(|a| vec![T::zero(); a.pos.len()]);
    let mut g_pre = vec![T::zero(); p];
    let mut mix = vec![T::zero(); p];
    let fdata = features.data();

    for b in 0..n {
        let fb = &fdata[b * c * p..(b + 1) * c * p];
        let sb = &sums[b * p..(b + 1) * p];
        for v in 0..c_out {
            let base_u = (b * c_out + v) * c * p;
            let base_k = (b * c_out + v) * kk * p;
            let u_planes = &field.u.data()[base_u..][..c * p];
            let v_planes = &field.v.data()[base_k..][..kk * p];
            let pos_planes = attn.map(|a| &a.pos.data()[base_k..][..kk * p]);
            for beta in 0..s {
                for alpha in 0..s {
                    let sample = beta * s + alpha;
                    let (oy, ox) = (config.sample_offset(beta), config.sample_offset(alpha));
                    let (y0, y1) = valid_range(h, &[oy]);
                    let (x0, x1) = valid_range(w, &[ox]);
                    let g = grad_out.plane(b, sample, v);
                    // sample attention
                    match (attn, g_sam.as_mut()) {
                        (Some(a), Some(gs)) => {
                            let off = ((b * c_out + v) * s2 + sample) * p;
                            let asam = &a.sam.data()[off..][..p];
                            let pr = pre.plane(b, sample, v);
                            for q in 0..p {
                                gs[off + q] += g[q] * pr[q];
                                g_pre[q] = g[q] * asam[q];
                            }
                        }
                        _ => g_pre.copy_from_slice(g),
                    }
                    let gp = &g_pre;
                    let apos_at = |ji: usize, q: usize| pos_planes.map_or(T::one(), |pp| pp[ji * p + q]);
                    let cji = center * k + center;
                    match config.kernel_mode {
                        KernelMode::SharedSpatial => {
                            // center 1×1 mix
                            mix.fill(T::zero());
                            for u in 0..c {
                                let up = &u_planes[u * p..][..p];
                                let fp = &fb[u * p..][..p];
                                for y in y0..y1 {
                                    for x in x0..x1 {
                                        mix[y * w + x] += up[y * w + x] * fp[shifted(y, oy) * w + shifted(x, ox)];
                                    }
                                }
                            }
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let q = y * w + x;
                                    let sc = shifted(y, oy) * w + shifted(x, ox);
                                    if let Some(gpos) = g_pos.as_mut() {
                                        gpos[base_k + cji * p + sc] += gp[q] * (mix[q] + r * sb[sc]);
                                    }
                                    let gm = gp[q] * apos_at(cji, sc);
                                    g_sum[b * p + sc] += gm * r;
                                    for u in 0..c {
                                        g_u[base_u + u * p + q] += gm * fb[u * p + sc];
                                        g_f[b * c * p + u * p + sc] += gm * u_planes[u * p + q];
                                    }
                                }
                            }
                            for j in 0..k {
                                for i in 0..k {
                                    let ji = j * k + i;
                                    let (dy, dx) = (oy + j as isize - center as isize, ox + i as isize - center as isize);
                                    let (ya, yb) = valid_range(h, &[oy, dy]);
                                    let (xa, xb) = valid_range(w, &[ox, dx]);
                                    let vp = &v_planes[ji * p..][..p];
                                    for y in ya..yb {
                                        for x in xa..xb {
                                            let q = y * w + x;
                                            let sc = shifted(y, oy) * w + shifted(x, ox);
                                            let sq = shifted(y, dy) * w + shifted(x, dx);
                                            let a = apos_at(ji, sc);
                                            g_v[base_k + ji * p + q] += gp[q] * a * sb[sq];
                                            g_sum[b * p + sq] += gp[q] * a * vp[q];
                                            if let Some(gpos) = g_pos.as_mut() {
                                                gpos[base_k + ji * p + sc] += gp[q] * vp[q] * sb[sq];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        KernelMode::SharedMixing => {
                            for j in 0..k {
                                for i in 0..k {
                                    let ji = j * k + i;
                                    let (dy, dx) = (oy + j as isize - center as isize, ox + i as isize - center as isize);
                                    let (ya, yb) = valid_range(h, &[oy, dy]);
                                    let (xa, xb) = valid_range(w, &[ox, dx]);
                                    if let Some(gpos) = g_pos.as_mut() {
                                        mix.fill(T::zero());
                                        for u in 0..c {
                                            let up = &u_planes[u * p..][..p];
                                            let fp = &fb[u * p..][..p];
                                            for y in ya..yb {
                                                for x in xa..xb {
                                                    mix[y * w + x] += up[y * w + x] * fp[shifted(y, dy) * w + shifted(x, dx)];
                                                }
                                            }
                                        }
                                        for y in ya..yb {
                                            for x in xa..xb {
                                                let sc = shifted(y, oy) * w + shifted(x, ox);
                                                gpos[base_k + ji * p + sc] += gp[y * w + x] * mix[y * w + x];
                                            }
                                        }
                                    }
                                    for y in ya..yb {
                                        for x in xa..xb {
                                            let q = y * w + x;
                                            let sc = shifted(y, oy) * w + shifted(x, ox);
                                            let sq = shifted(y, dy) * w + shifted(x, dx);
                                            let gt = gp[q] * apos_at(ji, sc);
                                            for u in 0..c {
                                                g_u[base_u + u * p + q] += gt * fb[u * p + sq];
                                                g_f[b * c * p + u * p + sq] += gt * u_planes[u * p + q];
                                            }
                                        }
                                    }
                                }
                            }
                            let vc = &v_planes[cji * p..][..p];
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let q = y * w + x;
                                    let sc = shifted(y, oy) * w + shifted(x, ox);
                                    let a = apos_at(cji, sc);
                                    if let Some(gpos) = g_pos.as_mut() {
                                        gpos[base_k + cji * p + sc] += gp[q] * (vc[q] + r) * sb[sc];
                                    }
                                    g_v[base_k + cji * p + q] += gp[q] * a * sb[sc];
                                    g_sum[b * p + sc] += gp[q] * a * (vc[q] + r);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    // the channel sum feeds every channel
    for b in 0..n {
        for u in 0..c {
            let dst = &mut g_f[(b * c + u) * p..][..p];
            for (d, &gs) in dst.iter_mut().zip(&g_sum[b * p..(b + 1) * p]) {
                *d += gs;
            }
        }
    }
    let attention = match (attn, g_sam, g_pos) {
        (Some(a), Some(gs), Some(gp)) => Some(AttentionField {
            sam: Tensor::new(a.sam.shape(), gs)?,
            pos: Tensor::new(a.pos.shape(), gp)?,
            residual_applied: false,
        }),
        _ => None,
    };
    Ok(SampleGrads {
        features: Tensor::new(features.shape(), g_f)?,
        field: KernelField {
            u: Tensor::new(field.u.shape(), g_u)?,
            v: Tensor::new(field.v.shape(), g_v)?,
            kernel_size: k,
        },
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_fill;

    #[test]
    fn ranges() {
        assert_eq!(valid_range(5, &[2]), (0, 3));
        assert_eq!(valid_range(5, &[-2, 1]), (2, 4));
        assert_eq!(valid_range(3, &[4]), (0, 0));
    }

    #[test]
    fn zero_kernels_average_sampled_centers() {
        let cfg = LsDfnConfig::new(3, 2, 3, 3, 2);
        let f = gaussian_fill::<f64>(&[1, 3, 6, 5], 8, 0.0, 1.0).unwrap();
        let field = KernelField::zeros(1, &cfg, 6, 5).unwrap();
        let out = sample_conv(&f, &field, &cfg).unwrap();
        for beta in 0..3 {
            for alpha in 0..3 {
                for v in 0..2 {
                    for y in 0..6 {
                        for x in 0..5 {
                            let sy = y as isize + cfg.sample_offset(beta);
                            let sx = x as isize + cfg.sample_offset(alpha);
                            let expect = if sy < 0 || sx < 0 || sy >= 6 || sx >= 5 {
                                0.0
                            } else {
                                (0..3).map(|u| f.at(&[0, u, sy as usize, sx as usize])).sum::<f64>() / 3.0
                            };
                            let got = out.data.at(&[0, beta * 3 + alpha, v, y, x]);
                            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn neutral_attention_matches_plain() {
        let cfg = LsDfnConfig::new(2, 2, 3, 3, 1);
        let f = gaussian_fill::<f32>(&[1, 2, 5, 5], 1, 0.0, 1.0).unwrap();
        let mut field = KernelField::zeros(1, &cfg, 5, 5).unwrap();
        field.u = gaussian_fill(field.u.shape(), 2, 0.0, 1.0).unwrap();
        field.v = gaussian_fill(field.v.shape(), 3, 0.0, 1.0).unwrap();
        let a = AttentionField::neutral(1, &cfg, 5, 5).unwrap();
        let plain = sample_conv(&f, &field, &cfg).unwrap();
        let att = attended_sample_conv(&f, &field, &a, &cfg).unwrap();
        assert!(plain.data.bitwise_eq(&att.data));
    }

    #[test]
    fn mismatched_attention_rejected() {
        let cfg = LsDfnConfig::new(2, 2, 3, 3, 1);
        let f = Tensor::<f32>::zeros(&[1, 2, 5, 5]).unwrap();
        let field = KernelField::zeros(1, &cfg, 5, 5).unwrap();
        let other = LsDfnConfig::new(2, 2, 3, 5, 1);
        let a = AttentionField::neutral(1, &other, 5, 5).unwrap();
        assert!(attended_sample_conv(&f, &field, &a, &cfg).is_err());
    }
}
