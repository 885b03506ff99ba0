//! The full LS-DFN block: branches, sampling, fusion and post-conv.

use super::attention::{build_attention, AttentionField};
use super::config::LsDfnConfig;
use super::fuse::{fuse_samples, fuse_samples_backward};
use super::kernel::{assemble_kernel, split_kernel_params, KernelField};
use super::params::{LsDfnParams, StackCache};
use super::reference::{sample_conv_reference, ReferenceAttention};
use super::sample::{apply_sample_attention, attended_sample_conv_parts, sample_conv, sample_conv_backward, SampledFeatures};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the sampling stage is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForwardPath {
    /// Shared-spatial factorization (`C + k²` per response) or the
    /// shared-mixing equivalent.
    #[default]
    Factored,
    /// Dense per-position kernels (`C·k²` per response).
    Reference,
}

/// Activations kept by [`lsdfn_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LsDfnSaved<T = f32> {
    config: LsDfnConfig,
    fingerprint: u64,
    input: Tensor<T>,
    features: Tensor<T>,
    kernel_cache: StackCache<T>,
    sam_cache: Option<StackCache<T>>,
    pos_cache: Option<StackCache<T>>,
    pub field: KernelField<T>,
    pub attention: Option<AttentionField<T>>,
    pre: SampledFeatures<T>,
    pub sampled: SampledFeatures<T>,
    pub fused: Tensor<T>,
}

impl<T> LsDfnSaved<T> {
    /// Feature-branch output `F`.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

/// Gradients of one block.
#[derive(Clone, Debug)]
pub struct LsDfnGrads<T = f32> {
    pub input: Tensor<T>,
    pub params: LsDfnParams<T>,
}

/// Forward pass on the factored path.
pub fn lsdfn_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &LsDfnParams<T>,
    config: &LsDfnConfig,
) -> Result<(Tensor<T>, LsDfnSaved<T>)> {
    lsdfn_forward_with(x, params, config, ForwardPath::Factored)
}

pub fn lsdfn_forward_with<T: Scalar>(
    x: &Tensor<T>,
    params: &LsDfnParams<T>,
    config: &LsDfnConfig,
    path: ForwardPath,
) -> Result<(Tensor<T>, LsDfnSaved<T>)> {
    config.validate()?;
    params.validate(config)?;
    let (n, c_in, h, w) = x.dims4()?;
    if c_in != config.in_channels {
        return Err(Error::Shape(format!(
            "block input has {c_in} channels, expected {}",
            config.in_channels
        )));
    }
    x.ensure_finite("block input")?;

    let features = params.feature.forward(x)?;
    features.ensure_finite("feature branch")?;
    let (raw_kernel, kernel_cache) = params.kernel.forward(x)?;
    raw_kernel.ensure_finite("kernel branch")?;
    let field = split_kernel_params(&raw_kernel, config)?;

    let (attention, sam_cache, pos_cache) = match (&params.attention_sam, &params.attention_pos) {
        (Some(sam_stack), Some(pos_stack)) => {
            let (raw_sam, sam_cache) = sam_stack.forward(x)?;
            let (raw_pos, pos_cache) = pos_stack.forward(x)?;
            raw_sam.ensure_finite("attention branch")?;
            raw_pos.ensure_finite("attention branch")?;
            (
                Some(build_attention(&raw_sam, &raw_pos, config)?),
                Some(sam_cache),
                Some(pos_cache),
            )
        }
        _ => (None, None, None),
    };

    let (pre, sampled) = match (path, &attention) {
        (ForwardPath::Factored, Some(a)) => attended_sample_conv_parts(&features, &field, a, config)?,
        (ForwardPath::Factored, None) => {
            let s = sample_conv(&features, &field, config)?;
            (s.clone(), s)
        }
        (ForwardPath::Reference, attn) => {
            let kernels = assemble_kernel(&field, config)?;
            match attn {
                Some(a) => {
                    let pos_only = AttentionField {
                        sam: Tensor::full(a.sam.shape(), T::one())?,
                        pos: a.pos.clone(),
                        residual_applied: a.residual_applied,
                    };
                    let pre = sample_conv_reference(&features, &kernels, ReferenceAttention::Split(&pos_only), config)?;
                    let out = apply_sample_attention(&pre, &a.sam);
                    (pre, out)
                }
                None => {
                    let s = sample_conv_reference(&features, &kernels, ReferenceAttention::None, config)?;
                    (s.clone(), s)
                }
            }
        }
    };
    sampled.data.ensure_finite("sampling")?;

    let fused = fuse_samples(&sampled, config.fusion)?;
    fused.ensure_finite("fusion")?;
    let y = match &params.post_conv {
        Some(p) => {
            let y = p.forward(&fused)?;
            y.ensure_finite("post-conv")?;
            y
        }
        None => fused.clone(),
    };
    debug_assert_eq!(y.shape(), [n, config.output_channels(), h, w]);

    let saved = LsDfnSaved {
        config: config.clone(),
        fingerprint: params.fingerprint(),
        input: x.clone(),
        features,
        kernel_cache,
        sam_cache,
        pos_cache,
        field,
        attention,
        pre,
        sampled,
        fused,
    };
    Ok((y, saved))
}

/// Backward pass. Fails with [`Error::StaleState`] if `params` or `config`
/// differ from those used to produce `saved`.
pub fn lsdfn_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    saved: &LsDfnSaved<T>,
    params: &LsDfnParams<T>,
    config: &LsDfnConfig,
) -> Result<LsDfnGrads<T>> {
    if *config != saved.config {
        return Err(Error::StaleState("config differs from the forward pass".into()));
    }
    if params.fingerprint() != saved.fingerprint {
        return Err(Error::StaleState("parameters changed since the forward pass".into()));
    }
    let (n, _, h, w) = saved.input.dims4()?;
    let expect = [n, config.output_channels(), h, w];
    if grad_y.shape() != expect {
        return Err(Error::Shape(format!(
            "output gradient {:?}, expected {expect:?}",
            grad_y.shape()
        )));
    }
    let mut grads = params.zeros_like();

    let grad_fused = match &params.post_conv {
        Some(p) => {
            let g = p.backward(grad_y, &saved.fused)?;
            let slot = grads.post_conv.as_mut().expect("same structure");
            slot.weight = g.weight;
            slot.bias = g.bias;
            g.x
        }
        None => grad_y.clone(),
    };
    let grad_sampled = fuse_samples_backward(&grad_fused, &saved.sampled, config.fusion)?;
    let sg = sample_conv_backward(
        &grad_sampled,
        &saved.pre,
        &saved.features,
        &saved.field,
        saved.attention.as_ref(),
        config,
    )?;

    let g_feature = params.feature.backward(&sg.features, &saved.input)?;
    grads.feature.weight = g_feature.weight;
    grads.feature.bias = g_feature.bias;
    let mut grad_x = g_feature.x;

    let (gx, g_kernel) = params.kernel.backward(&sg.field.interleave()?, &saved.kernel_cache)?;
    grads.kernel = g_kernel;
    grad_x.add_assign(&gx)?;

    if let (Some(ga), Some(sam_stack), Some(pos_stack), Some(sam_cache), Some(pos_cache)) = (
        sg.attention.as_ref(),
        &params.attention_sam,
        &params.attention_pos,
        &saved.sam_cache,
        &saved.pos_cache,
    ) {
        let (g_sam_raw, g_pos_raw) = ga.to_branch_layout()?;
        let (gx, g_sam) = sam_stack.backward(&g_sam_raw, sam_cache)?;
        grad_x.add_assign(&gx)?;
        grads.attention_sam = Some(g_sam);
        let (gx, g_pos) = pos_stack.backward(&g_pos_raw, pos_cache)?;
        grad_x.add_assign(&gx)?;
        grads.attention_pos = Some(g_pos);
    }

    Ok(LsDfnGrads { input: grad_x, params: grads })
}
