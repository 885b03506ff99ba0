use super::config::LsDfnConfig;
use crate::conv::{ConvGrads, ConvParams};
use crate::error::{Error, Result};
use crate::rng::{gaussian_from, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A chain of shape-preserving convolutions with ReLU between them (none
/// after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T = f32> {
    pub layers: Vec<ConvParams<T>>,
}

/// Inputs seen by each layer of a [`ConvStack`] during forward.
#[derive(Clone, Debug)]
pub struct StackCache<T = f32> {
    inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ConvStack<T> {
    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StackCache<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&cur)?;
            if idx + 1 < self.layers.len() {
                out = out.map(|v| v.max(T::zero()));
            }
            inputs.push(std::mem::replace(&mut cur, out));
        }
        Ok((cur, StackCache { inputs }))
    }

    /// Returns the input gradient and per-layer parameter gradients.
    pub fn backward(&self, grad: &Tensor<T>, cache: &StackCache<T>) -> Result<(Tensor<T>, ConvStack<T>)> {
        let mut g = grad.clone();
        let mut grads = vec![None; self.layers.len()];
        for idx in (0..self.layers.len()).rev() {
            let input = &cache.inputs[idx];
            let ConvGrads { x, weight, bias } = self.layers[idx].backward(&g, input)?;
            grads[idx] = Some(ConvParams { weight, bias });
            g = x;
            if idx > 0 {
                // input of this layer is relu(previous output)
                for (gv, &iv) in g.data_mut().iter_mut().zip(input.data()) {
                    if iv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
        }
        Ok((
            g,
            ConvStack {
                layers: grads.into_iter().map(|l| l.expect("filled")).collect(),
            },
        ))
    }
}

/// Parameters of one LS-DFN block. All branches read the block input.
#[derive(Clone, Debug, PartialEq)]
pub struct LsDfnParams<T = f32> {
    /// `C_in → C`.
    pub feature: ConvParams<T>,
    /// `C_in → C'(C + k²)`.
    pub kernel: ConvStack<T>,
    /// `C_in → C'·s²`, present iff fusion is attention.
    pub attention_sam: Option<ConvStack<T>>,
    /// `C_in → C'·k²`, present iff fusion is attention.
    pub attention_pos: Option<ConvStack<T>>,
    /// `1×1`, `C' → C₁`.
    pub post_conv: Option<ConvParams<T>>,
}

/// Which part of a block a freshly created convolution belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Feature,
    BranchHidden,
    BranchHead,
    Post,
}

impl<T: Scalar> LsDfnParams<T> {
    fn build(config: &LsDfnConfig, make: &mut dyn FnMut(Role, usize, usize, usize) -> Result<ConvParams<T>>) -> Result<Self> {
        config.validate()?;
        let bk = config.branch_kernel_size;
        let stack = |c_out: usize, make: &mut dyn FnMut(Role, usize, usize, usize) -> Result<ConvParams<T>>| {
            let mut layers = Vec::with_capacity(config.branch_depth);
            let mut prev = config.in_channels;
            for _ in 1..config.branch_depth {
                layers.push(make(Role::BranchHidden, config.channels, prev, bk)?);
                prev = config.channels;
            }
            layers.push(make(Role::BranchHead, c_out, prev, bk)?);
            Ok::<_, Error>(ConvStack { layers })
        };
        let feature = make(Role::Feature, config.channels, config.in_channels, bk)?;
        let kernel = stack(config.kernel_branch_channels(), make)?;
        let (attention_sam, attention_pos) = if config.uses_attention() {
            (
                Some(stack(config.attention_sample_channels(), make)?),
                Some(stack(config.attention_position_channels(), make)?),
            )
        } else {
            (None, None)
        };
        let post_conv = match config.post_conv_channels {
            Some(c1) => Some(make(Role::Post, c1, config.out_channels, 1)?),
            None => None,
        };
        let params = LsDfnParams {
            feature,
            kernel,
            attention_sam,
            attention_pos,
            post_conv,
        };
        params.validate(config)?;
        Ok(params)
    }

    /// Training initialization: He-initialized feature branch, hidden branch
    /// layers and post-conv; the final kernel and attention layers (weights
    /// and biases) are exactly zero, so an untrained block computes the
    /// residual identity.
    pub fn init(config: &LsDfnConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, &mut |role, o, i, k| match role {
            Role::BranchHead => ConvParams::zeros(o, i, k),
            _ => ConvParams::he(rng, o, i, k),
        })
    }

    /// Every weight and bias drawn from `N(0, std²)`.
    pub fn random(config: &LsDfnConfig, rng: &mut Rng, std: f64) -> Result<Self> {
        Self::build(config, &mut |_, o, i, k| {
            Ok(ConvParams {
                weight: gaussian_from(rng, &[o, i, k, k], 0.0, std)?,
                bias: gaussian_from(rng, &[o], 0.0, std)?,
            })
        })
    }

    /// Same structure, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Check every branch against the channel-count laws of `config`.
    pub fn validate(&self, config: &LsDfnConfig) -> Result<()> {
        let expect = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what}: {got} channels, expected {want}")))
            }
        };
        let check_stack = |what: &str, s: &ConvStack<T>, want: usize| -> Result<()> {
            if s.layers.len() != config.branch_depth {
                return Err(Error::Shape(format!(
                    "{what}: depth {}, expected {}",
                    s.layers.len(),
                    config.branch_depth
                )));
            }
            expect(what, s.out_channels(), want)?;
            expect(what, s.layers[0].in_channels(), config.in_channels)?;
            for l in &s.layers {
                if l.kernel_size() != config.branch_kernel_size {
                    return Err(Error::Shape(format!("{what}: kernel size {}", l.kernel_size())));
                }
            }
            Ok(())
        };
        expect("feature branch", self.feature.out_channels(), config.channels)?;
        expect("feature branch input", self.feature.in_channels(), config.in_channels)?;
        check_stack("kernel branch", &self.kernel, config.kernel_branch_channels())?;
        match (&self.attention_sam, &self.attention_pos, config.uses_attention()) {
            (Some(s), Some(p), true) => {
                check_stack("sample attention branch", s, config.attention_sample_channels())?;
                check_stack("position attention branch", p, config.attention_position_channels())?;
            }
            (None, None, false) => {}
            _ => {
                return Err(Error::Config(
                    "attention branches must exist exactly when fusion is attention".into(),
                ))
            }
        }
        match (&self.post_conv, config.post_conv_channels) {
            (None, None) => {}
            (Some(p), Some(c1)) => {
                expect("post-conv", p.out_channels(), c1)?;
                expect("post-conv input", p.in_channels(), config.out_channels)?;
                if p.kernel_size() != 1 {
                    return Err(Error::Shape("post-conv must be 1x1".into()));
                }
            }
            _ => return Err(Error::Config("post-conv presence disagrees with config".into())),
        }
        Ok(())
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut convs: Vec<(String, &ConvParams<T>)> = vec![("feature".into(), &self.feature)];
        let stacks = [
            ("kernel", Some(&self.kernel)),
            ("attention_sam", self.attention_sam.as_ref()),
            ("attention_pos", self.attention_pos.as_ref()),
        ];
        for (name, stack) in stacks {
            if let Some(stack) = stack {
                for (i, l) in stack.layers.iter().enumerate() {
                    convs.push((format!("{name}.{i}"), l));
                }
            }
        }
        if let Some(p) = &self.post_conv {
            convs.push(("post_conv".into(), p));
        }
        convs
            .into_iter()
            .flat_map(|(name, c)| [(format!("{name}.weight"), &c.weight), (format!("{name}.bias"), &c.bias)])
            .collect()
    }

    /// Mutable view in the same order as [`LsDfnParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        out.push(&mut self.feature.weight);
        out.push(&mut self.feature.bias);
        for l in self.kernel.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for s in [&mut self.attention_sam, &mut self.attention_pos].into_iter().flatten() {
            for l in s.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        if let Some(p) = &mut self.post_conv {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        names.into_iter().zip(self.tensors_mut()).collect()
    }

    /// Correctly shaped parameters, all zero.
    pub fn zeros(config: &LsDfnConfig) -> Result<Self> {
        Self::build(config, &mut |_, o, i, k| ConvParams::zeros(o, i, k))
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
