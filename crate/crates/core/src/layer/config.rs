use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{parse_bool, KvMap};

/// How the `s²` sampled responses are combined into one output map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Attention-weighted sum over samples.
    Attention,
    /// Per-channel maximum over the sample axis (no attention branch).
    MaxPool,
    /// Arithmetic mean over samples. Diagnostic only.
    Mean,
}

/// Placement of the two factored kernel parts inside each `k×k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// Spatial part `V` at every offset, shared by all input channels; the
    /// channel-mixing part `U` added at the kernel center.
    SharedSpatial,
    /// Channel-mixing part `U` at every offset; only the center entry of
    /// `V` is used.
    SharedMixing,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Attention => "attention",
            FusionMode::MaxPool => "max_pool",
            FusionMode::Mean => "mean",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "max_pool" => Ok(FusionMode::MaxPool),
            "mean" => Ok(FusionMode::Mean),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelMode::SharedSpatial => "shared_spatial",
            KernelMode::SharedMixing => "shared_mixing",
        })
    }
}

impl FromStr for KernelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared_spatial" => Ok(KernelMode::SharedSpatial),
            "shared_mixing" => Ok(KernelMode::SharedMixing),
            _ => Err(Error::Config(format!("unknown kernel mode {s:?}"))),
        }
    }
}

/// Hyperparameters of one LS-DFN block.
#[derive(Clone, Debug, PartialEq)]
pub struct LsDfnConfig {
    /// Channels of the block input.
    pub in_channels: usize,
    /// Feature-branch channels `C`.
    pub channels: usize,
    /// Dynamic output channels `C'`.
    pub out_channels: usize,
    pub kernel_size: usize,
    /// Samples per axis; the grid has `samples²` regions.
    pub samples: usize,
    /// Pixel spacing between sampled region centers.
    pub sample_stride: usize,
    pub fusion: FusionMode,
    pub kernel_mode: KernelMode,
    /// Add `1/C` at every kernel center.
    pub residual_kernel: bool,
    /// Add `1` to every attention weight.
    pub residual_attention: bool,
    pub post_conv_channels: Option<usize>,
    pub branch_kernel_size: usize,
    /// Conv layers per kernel/attention branch (ReLU between them).
    pub branch_depth: usize,
}

pub const CONFIG_KEYS: &[&str] = &[
    "in_channels",
    "channels",
    "out_channels",
    "kernel_size",
    "samples",
    "sample_stride",
    "fusion",
    "kernel_mode",
    "residual_kernel",
    "residual_attention",
    "post_conv_channels",
    "branch_kernel_size",
    "branch_depth",
];

impl LsDfnConfig {
    /// Defaults: attention fusion, shared-spatial kernels, both residuals
    /// on, 3×3 single-layer branches, no post-conv.
    pub fn new(channels: usize, out_channels: usize, kernel_size: usize, samples: usize, sample_stride: usize) -> Self {
        LsDfnConfig {
            in_channels: channels,
            channels,
            out_channels,
            kernel_size,
            samples,
            sample_stride,
            fusion: FusionMode::Attention,
            kernel_mode: KernelMode::SharedSpatial,
            residual_kernel: true,
            residual_attention: true,
            post_conv_channels: None,
            branch_kernel_size: 3,
            branch_depth: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("out_channels", self.out_channels),
            ("sample_stride", self.sample_stride),
            ("branch_depth", self.branch_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("kernel_size", self.kernel_size),
            ("samples", self.samples),
            ("branch_kernel_size", self.branch_kernel_size),
        ] {
            if v == 0 || v % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and >= 1, got {v}")));
            }
        }
        if self.post_conv_channels == Some(0) {
            return Err(Error::Config("post_conv_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn uses_attention(&self) -> bool {
        self.fusion == FusionMode::Attention
    }

    pub fn sample_count(&self) -> usize {
        self.samples * self.samples
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    /// `C'·(C + k²)`.
    pub fn kernel_branch_channels(&self) -> usize {
        self.out_channels * (self.channels + self.kernel_area())
    }

    pub fn attention_sample_channels(&self) -> usize {
        self.out_channels * self.sample_count()
    }

    pub fn attention_position_channels(&self) -> usize {
        self.out_channels * self.kernel_area()
    }

    /// `C'·(s² + k²)`: factored attention weights per position.
    pub fn attention_branch_channels(&self) -> usize {
        self.attention_sample_channels() + self.attention_position_channels()
    }

    /// `C'·s²·k²`: unfactored attention weights per position.
    pub fn full_attention_weights(&self) -> usize {
        self.out_channels * self.sample_count() * self.kernel_area()
    }

    pub fn output_channels(&self) -> usize {
        self.post_conv_channels.unwrap_or(self.out_channels)
    }

    /// Centered offset of sample index `a` along one axis.
    pub fn sample_offset(&self, a: usize) -> isize {
        (a as isize - (self.samples / 2) as isize) * self.sample_stride as isize
    }

    /// `1/C` when the kernel residual is on.
    pub fn kernel_residual(&self) -> f64 {
        if self.residual_kernel {
            1.0 / self.channels as f64
        } else {
            0.0
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.insert("in_channels", self.in_channels);
        m.insert("channels", self.channels);
        m.insert("out_channels", self.out_channels);
        m.insert("kernel_size", self.kernel_size);
        m.insert("samples", self.samples);
        m.insert("sample_stride", self.sample_stride);
        m.insert("fusion", self.fusion);
        m.insert("kernel_mode", self.kernel_mode);
        m.insert("residual_kernel", self.residual_kernel);
        m.insert("residual_attention", self.residual_attention);
        m.insert(
            "post_conv_channels",
            self.post_conv_channels.map_or("none".to_string(), |c| c.to_string()),
        );
        m.insert("branch_kernel_size", self.branch_kernel_size);
        m.insert("branch_depth", self.branch_depth);
        m
    }

    /// Read the keys in [`CONFIG_KEYS`] (with `prefix` prepended) from `m`;
    /// missing keys keep the values of `base`.
    pub fn from_kv_over(m: &KvMap, prefix: &str, base: &LsDfnConfig) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let mut c = base.clone();
        c.in_channels = m.parsed_or(&key("in_channels"), c.in_channels)?;
        c.channels = m.parsed_or(&key("channels"), c.channels)?;
        c.out_channels = m.parsed_or(&key("out_channels"), c.out_channels)?;
        c.kernel_size = m.parsed_or(&key("kernel_size"), c.kernel_size)?;
        c.samples = m.parsed_or(&key("samples"), c.samples)?;
        c.sample_stride = m.parsed_or(&key("sample_stride"), c.sample_stride)?;
        c.fusion = m.parsed_or(&key("fusion"), c.fusion)?;
        c.kernel_mode = m.parsed_or(&key("kernel_mode"), c.kernel_mode)?;
        if let Some(v) = m.get(&key("residual_kernel")) {
            c.residual_kernel = parse_bool("residual_kernel", v)?;
        }
        if let Some(v) = m.get(&key("residual_attention")) {
            c.residual_attention = parse_bool("residual_attention", v)?;
        }
        if let Some(v) = m.get(&key("post_conv_channels")) {
            c.post_conv_channels = match v {
                "none" | "" => None,
                _ => Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("post_conv_channels: {v:?}")))?,
                ),
            };
        }
        c.branch_kernel_size = m.parsed_or(&key("branch_kernel_size"), c.branch_kernel_size)?;
        c.branch_depth = m.parsed_or(&key("branch_depth"), c.branch_depth)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.reject_unknown(CONFIG_KEYS)?;
        for required in ["channels", "out_channels", "kernel_size", "samples", "sample_stride"] {
            if !m.contains(required) {
                return Err(Error::Config(format!("missing key {required}")));
            }
        }
        let base = LsDfnConfig::new(1, 1, 1, 1, 1);
        let mut c = LsDfnConfig::from_kv_over(m, "", &base)?;
        if !m.contains("in_channels") {
            c.in_channels = c.channels;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_even_sizes() {
        assert!(LsDfnConfig::new(4, 3, 3, 3, 1).validate().is_ok());
        assert!(LsDfnConfig::new(4, 3, 2, 3, 1).validate().is_err());
        assert!(LsDfnConfig::new(4, 3, 3, 4, 1).validate().is_err());
        assert!(LsDfnConfig::new(4, 3, 3, 3, 0).validate().is_err());
        let mut c = LsDfnConfig::new(4, 3, 3, 3, 1);
        c.post_conv_channels = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn channel_laws() {
        let c = LsDfnConfig::new(128, 32, 3, 3, 1);
        assert_eq!(c.kernel_branch_channels(), 32 * (128 + 9));
        assert_eq!(c.attention_branch_channels(), 32 * (9 + 9));
        assert_eq!(c.full_attention_weights(), 32 * 81);
    }

    #[test]
    fn centered_offsets() {
        let c = LsDfnConfig::new(1, 1, 3, 5, 3);
        let offs: Vec<isize> = (0..5).map(|a| c.sample_offset(a)).collect();
        assert_eq!(offs, vec![-6, -3, 0, 3, 6]);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = LsDfnConfig::new(4, 3, 5, 3, 2);
        c.fusion = FusionMode::MaxPool;
        c.kernel_mode = KernelMode::SharedMixing;
        c.residual_attention = false;
        c.post_conv_channels = Some(7);
        c.in_channels = 6;
        let back = LsDfnConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut bad = c.to_kv();
        bad.insert("typo", 1);
        assert!(LsDfnConfig::from_kv(&bad).is_err());
    }
}
