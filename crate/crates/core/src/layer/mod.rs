//! The LS-DFN operator.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod fuse;
pub mod kernel;
pub mod params;
pub mod reference;
pub mod sample;

pub use attention::{build_attention, AttentionField, FullAttention};
pub use block::{lsdfn_backward, lsdfn_forward, lsdfn_forward_with, ForwardPath, LsDfnGrads, LsDfnSaved};
pub use config::{FusionMode, KernelMode, LsDfnConfig};
pub use fuse::{fuse_samples, fuse_samples_backward};
pub use kernel::{assemble_kernel, split_kernel_params, AssembledKernels, KernelField};
pub use params::{ConvStack, LsDfnParams, StackCache};
pub use reference::{full_attention_reference, sample_conv_reference, ReferenceAttention};
pub use sample::{attended_sample_conv, sample_conv, sample_conv_backward, SampleGrads, SampledFeatures};
