//! Feed-forward stacks of convolutions, ReLUs and LS-DFN blocks.

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::layer::{lsdfn_backward, lsdfn_forward, LsDfnConfig, LsDfnParams, LsDfnSaved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    /// Shape-preserving shared convolution.
    Conv(ConvParams<T>),
    Relu,
    /// LS-DFN block; with `skip_concat` its output is concatenated after its
    /// input along channels.
    LsDfn {
        config: LsDfnConfig,
        params: LsDfnParams<T>,
        skip_concat: bool,
    },
}

impl<T: Scalar> Layer<T> {
    fn output_channels(&self, input: usize) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels(),
            Layer::Relu => input,
            Layer::LsDfn { config, skip_concat, .. } => config.output_channels() + if *skip_concat { input } else { 0 },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::LsDfn { .. } => "lsdfn",
        }
    }
}

#[derive(Clone, Debug)]
enum TapeEntry<T> {
    Conv { input: Tensor<T> },
    Relu { output: Tensor<T> },
    LsDfn { saved: Box<LsDfnSaved<T>>, input_channels: usize },
}

/// Activations recorded by [`Sequential::forward`].
#[derive(Clone, Debug)]
pub struct Tape<T = f32> {
    entries: Vec<TapeEntry<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    /// Channel count after the last layer given `input` channels, checking
    /// each layer's expected input width.
    pub fn output_channels(&self, input: usize) -> Result<usize> {
        let mut c = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let want = match layer {
                Layer::Conv(p) => Some(p.in_channels()),
                Layer::Relu => None,
                Layer::LsDfn { config, .. } => Some(config.in_channels),
            };
            if let Some(want) = want {
                if want != c {
                    return Err(Error::Shape(format!(
                        "layer {i} ({}) expects {want} channels, gets {c}",
                        layer.kind()
                    )));
                }
            }
            c = layer.output_channels(c);
        }
        Ok(c)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, entry) = match layer {
                Layer::Conv(p) => {
                    let y = p.forward(&cur)?;
                    (y, TapeEntry::Conv { input: cur })
                }
                Layer::Relu => {
                    let y = cur.map(|v| v.max(T::zero()));
                    (y.clone(), TapeEntry::Relu { output: y })
                }
                Layer::LsDfn {
                    config,
                    params,
                    skip_concat,
                } => {
                    let (y, saved) = lsdfn_forward(&cur, params, config)?;
                    let input_channels = cur.shape()[1];
                    let y = if *skip_concat {
                        Tensor::concat_channels(&[&cur, &y])?
                    } else {
                        y
                    };
                    (
                        y,
                        TapeEntry::LsDfn {
                            saved: Box::new(saved),
                            input_channels,
                        },
                    )
                }
            };
            next.ensure_finite(&format!("layer {i} ({})", layer.kind()))?;
            entries.push(entry);
            cur = next;
        }
        Ok((cur, Tape { entries }))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Returns the input gradient and parameter gradients in a model of
    /// identical structure.
    pub fn backward(&self, grad_y: &Tensor<T>, tape: &Tape<T>) -> Result<(Tensor<T>, Sequential<T>)> {
        if tape.entries.len() != self.layers.len() {
            return Err(Error::StaleState("tape recorded for a different model".into()));
        }
        let mut grads = self.zeros_like();
        let mut g = grad_y.clone();
        for i in (0..self.layers.len()).rev() {
            g = match (&self.layers[i], &tape.entries[i], &mut grads.layers[i]) {
                (Layer::Conv(p), TapeEntry::Conv { input }, Layer::Conv(slot)) => {
                    let cg = p.backward(&g, input)?;
                    slot.weight = cg.weight;
                    slot.bias = cg.bias;
                    cg.x
                }
                (Layer::Relu, TapeEntry::Relu { output }, _) => {
                    let mut g = g;
                    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
                        if o <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    g
                }
                (
                    Layer::LsDfn {
                        config,
                        params,
                        skip_concat,
                    },
                    TapeEntry::LsDfn { saved, input_channels },
                    Layer::LsDfn { params: slot, .. },
                ) => {
                    let (g_skip, g_block) = if *skip_concat {
                        let mut parts = g.split_channels(&[*input_channels, config.output_channels()])?;
                        let block = parts.pop().expect("two parts");
                        (parts.pop(), block)
                    } else {
                        (None, g)
                    };
                    let bg = lsdfn_backward(&g_block, saved, params, config)?;
                    *slot = bg.params;
                    let mut gx = bg.input;
                    if let Some(skip) = g_skip {
                        gx.add_assign(&skip)?;
                    }
                    gx
                }
                _ => return Err(Error::StaleState(format!("tape entry {i} does not match its layer"))),
            };
        }
        Ok((g, grads))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Parameters named `<layer index>.<tensor>`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(p) => {
                    out.push((format!("{i}.weight"), &p.weight));
                    out.push((format!("{i}.bias"), &p.bias));
                }
                Layer::Relu => {}
                Layer::LsDfn { params, .. } => {
                    for (name, t) in params.named_tensors() {
                        out.push((format!("{i}.{name}"), t));
                    }
                }
            }
        }
        out
    }

    /// Same order as [`Sequential::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(p) => {
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                }
                Layer::Relu => {}
                Layer::LsDfn { params, .. } => out.extend(params.tensors_mut()),
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        names.into_iter().zip(self.tensors_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        let conv = |p: &ConvParams<T>| ConvParams {
            weight: p.weight.cast(),
            bias: p.bias.cast(),
        };
        let stack = |s: &crate::layer::ConvStack<T>| crate::layer::ConvStack {
            layers: s.layers.iter().map(conv).collect(),
        };
        Sequential {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(p) => Layer::Conv(conv(p)),
                    Layer::Relu => Layer::Relu,
                    Layer::LsDfn {
                        config,
                        params,
                        skip_concat,
                    } => Layer::LsDfn {
                        config: config.clone(),
                        params: LsDfnParams {
                            feature: conv(&params.feature),
                            kernel: stack(&params.kernel),
                            attention_sam: params.attention_sam.as_ref().map(stack),
                            attention_pos: params.attention_pos.as_ref().map(stack),
                            post_conv: params.post_conv.as_ref().map(conv),
                        },
                        skip_concat: *skip_concat,
                    },
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_fill, Rng};

    fn small(skip: bool) -> Sequential<f64> {
        let mut rng = Rng::new(3);
        let mut cfg = LsDfnConfig::new(2, 2, 3, 3, 1);
        cfg.in_channels = 3;
        Sequential::new(vec![
            Layer::Conv(ConvParams::he(&mut rng, 3, 1, 3).unwrap()),
            Layer::Relu,
            Layer::LsDfn {
                params: LsDfnParams::random(&cfg, &mut rng, 0.3).unwrap(),
                config: cfg,
                skip_concat: skip,
            },
            Layer::Conv(ConvParams::he(&mut rng, 1, if skip { 5 } else { 2 }, 3).unwrap()),
        ])
    }

    #[test]
    fn channel_bookkeeping() {
        assert_eq!(small(true).output_channels(1).unwrap(), 1);
        assert!(small(true).output_channels(2).is_err());
    }

    #[test]
    fn backward_matches_finite_difference_on_input() {
        for skip in [false, true] {
            let m = small(skip);
            let x = gaussian_fill::<f64>(&[1, 1, 6, 6], 9, 0.0, 1.0).unwrap();
            let (y, tape) = m.forward(&x).unwrap();
            let g = Tensor::full(y.shape(), 1.0).unwrap();
            let (gx, _) = m.backward(&g, &tape).unwrap();
            let num = crate::gradcheck::finite_diff_grad(|p| Ok(m.predict(p)?.sum()), &x, 1e-5).unwrap();
            let r = crate::gradcheck::compare(&gx, &num, 1e-5, 1e-5).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let m = small(false);
        let x = gaussian_fill::<f64>(&[1, 1, 5, 5], 1, 0.0, 1.0).unwrap();
        let (y, tape) = m.forward(&x).unwrap();
        let mut changed = m.clone();
        changed.tensors_mut()[2].data_mut()[0] += 1.0;
        assert!(matches!(changed.backward(&y, &tape), Err(Error::StaleState(_))));
    }
}
