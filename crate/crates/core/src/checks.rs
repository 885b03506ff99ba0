//! Self-check suites shared by the command-line front end: finite-difference
//! gradient checks and equivalence checks between evaluation paths.

use crate::conv::conv2d;
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradient, GradCheckReport};
use crate::layer::{
    assemble_kernel, attended_sample_conv, build_attention, full_attention_reference, lsdfn_backward, lsdfn_forward,
    lsdfn_forward_with, sample_conv_reference, split_kernel_params, FullAttention, FusionMode, KernelMode, LsDfnConfig,
    LsDfnParams, ReferenceAttention,
};
use crate::rng::{gaussian_from, Rng};
use crate::tensor::Tensor;

/// One randomized problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub config: LsDfnConfig,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Case {
    pub fn label(&self) -> String {
        let c = &self.config;
        format!(
            "C={} C'={} k={} s={} gamma={} fusion={} kernel_mode={} rk={} ra={} post={} depth={} N={} H={} W={} seed={}",
            c.channels,
            c.out_channels,
            c.kernel_size,
            c.samples,
            c.sample_stride,
            c.fusion,
            c.kernel_mode,
            c.residual_kernel,
            c.residual_attention,
            c.post_conv_channels.map_or("none".to_string(), |v| v.to_string()),
            c.branch_depth,
            self.batch,
            self.height,
            self.width,
            self.seed
        )
    }
}

/// Parameters and inputs are drawn with this standard deviation.
pub const PARAM_STD: f64 = 0.3;

/// Cartesian grid over sample counts, fusion modes and kernel modes at
/// `N=1`, `H=W=size`. Every third case turns both residuals off and every
/// fourth adds a post-conv, so those switches are covered too.
pub fn grad_grid(
    samples: &[usize],
    fusions: &[FusionMode],
    kernel_modes: &[KernelMode],
    channels: usize,
    out_channels: usize,
    size: usize,
    first_seed: u64,
) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut seed = first_seed;
    for &s in samples {
        for &fusion in fusions {
            for &kernel_mode in kernel_modes {
                let mut config = LsDfnConfig::new(channels, out_channels, 3, s, 1);
                config.fusion = fusion;
                config.kernel_mode = kernel_mode;
                let ordinal = cases.len() + 1;
                if ordinal % 3 == 0 {
                    config.residual_kernel = false;
                    config.residual_attention = false;
                }
                if ordinal % 4 == 0 {
                    config.post_conv_channels = Some(2);
                }
                cases.push(Case {
                    config,
                    batch: 1,
                    height: size,
                    width: size,
                    seed,
                });
                seed += 1;
            }
        }
    }
    cases
}

/// `s ∈ {1, 3}` × {attention, max-pool} × both kernel modes at
/// `N=1, C=4, C'=3, H=W=7`.
pub fn default_grad_cases() -> Vec<Case> {
    grad_grid(
        &[1, 3],
        &[FusionMode::Attention, FusionMode::MaxPool],
        &[KernelMode::SharedSpatial, KernelMode::SharedMixing],
        4,
        3,
        7,
        1,
    )
}

/// Random instance: parameters, input and an upstream gradient `G`; the
/// checked scalar is `Σ Y·G`.
pub fn random_instance(case: &Case) -> Result<(LsDfnParams<f64>, Tensor<f64>, Tensor<f64>)> {
    let mut rng = Rng::new(case.seed);
    let c = &case.config;
    let params = LsDfnParams::<f64>::random(c, &mut rng, PARAM_STD)?;
    let x = gaussian_from(&mut rng, &[case.batch, c.in_channels, case.height, case.width], 0.0, 1.0)?;
    let g = gaussian_from(&mut rng, &[case.batch, c.output_channels(), case.height, case.width], 0.0, 1.0)?;
    Ok((params, x, g))
}

/// Finite-difference check of every parameter tensor and the input.
/// Returns one report per tensor, the input last.
pub fn gradcheck_block(case: &Case, epsilon: f64, tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let config = &case.config;
    let (params, x, g) = random_instance(case)?;
    let (_, saved) = lsdfn_forward(&x, &params, config)?;
    let grads = lsdfn_backward(&g, &saved, &params, config)?;
    let loss = |p: &LsDfnParams<f64>, x: &Tensor<f64>| -> Result<f64> {
        let (y, _) = lsdfn_forward(x, p, config)?;
        y.dot(&g)
    };

    let mut reports = Vec::new();
    let analytic = grads.params.named_tensors();
    for (idx, (name, value)) in params.named_tensors().into_iter().enumerate() {
        let report = check_gradient(
            |probe| {
                let mut p = params.clone();
                *p.tensors_mut()[idx] = probe.clone();
                loss(&p, &x)
            },
            value,
            analytic[idx].1,
            epsilon,
            tolerance,
        )?;
        reports.push((name, report));
    }
    let report = check_gradient(|probe| loss(&params, probe), &x, &grads.input, epsilon, tolerance)?;
    reports.push(("input".to_string(), report));
    Ok(reports)
}

/// Finite-difference check of the shared convolution (weight, bias, input).
pub fn gradcheck_conv(
    seed: u64,
    shape: [usize; 4],
    c_out: usize,
    k: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = Rng::new(seed);
    let [n, c_in, h, w] = shape;
    let x = gaussian_from::<f64>(&mut rng, &shape, 0.0, 1.0)?;
    let weight = gaussian_from::<f64>(&mut rng, &[c_out, c_in, k, k], 0.0, PARAM_STD)?;
    let bias = gaussian_from::<f64>(&mut rng, &[c_out], 0.0, PARAM_STD)?;
    let g = gaussian_from::<f64>(&mut rng, &[n, c_out, h, w], 0.0, 1.0)?;
    let pad = k / 2;
    let back = crate::conv::conv2d_backward(&g, &x, &weight, pad)?;
    let loss = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| conv2d(x, wt, b, pad)?.dot(&g);
    Ok(vec![
        (
            "weight".into(),
            check_gradient(|p| loss(&x, p, &bias), &weight, &back.weight, epsilon, tolerance)?,
        ),
        (
            "bias".into(),
            check_gradient(|p| loss(&x, &weight, p), &bias, &back.bias, epsilon, tolerance)?,
        ),
        (
            "input".into(),
            check_gradient(|p| loss(p, &weight, &bias), &x, &back.x, epsilon, tolerance)?,
        ),
    ])
}

/// Outcome of one equivalence check.
#[derive(Clone, Debug, PartialEq)]
pub struct Equivalence {
    pub relative_error: f64,
    pub bitwise: bool,
}

/// Factored block forward vs the dense-kernel reference path.
pub fn factored_vs_reference(case: &Case) -> Result<Equivalence> {
    let (params, x, _) = random_instance(case)?;
    let (fast, _) = lsdfn_forward_with(&x, &params, &case.config, crate::layer::ForwardPath::Factored)?;
    let (slow, _) = lsdfn_forward_with(&x, &params, &case.config, crate::layer::ForwardPath::Reference)?;
    Ok(Equivalence {
        relative_error: fast.relative_error(&slow)?,
        bitwise: fast.bitwise_eq(&slow),
    })
}

fn random_fields(
    case: &Case,
) -> Result<(Tensor<f64>, crate::layer::KernelField<f64>, crate::layer::AttentionField<f64>)> {
    let c = &case.config;
    let (n, h, w) = (case.batch, case.height, case.width);
    let mut rng = Rng::new(case.seed ^ 0x9e37_79b9_7f4a_7c15);
    let f = gaussian_from(&mut rng, &[n, c.channels, h, w], 0.0, 1.0)?;
    let raw = gaussian_from(&mut rng, &[n, c.kernel_branch_channels(), h, w], 0.0, 1.0)?;
    let sam = gaussian_from(&mut rng, &[n, c.attention_sample_channels(), h, w], 0.0, 1.0)?;
    let pos = gaussian_from(&mut rng, &[n, c.attention_position_channels(), h, w], 0.0, 1.0)?;
    Ok((f, split_kernel_params(&raw, c)?, build_attention(&sam, &pos, c)?))
}

/// Split attention vs the unfactored reference with `A = A_sam ⊗ A_pos`.
pub fn split_vs_full_attention(case: &Case) -> Result<Equivalence> {
    let (f, field, attn) = random_fields(case)?;
    let split = attended_sample_conv(&f, &field, &attn, &case.config)?;
    let full = full_attention_reference(&f, &field, &FullAttention::outer(&attn, &case.config)?, &case.config)?;
    Ok(Equivalence {
        relative_error: split.data.relative_error(&full.data)?,
        bitwise: split.data.bitwise_eq(&full.data),
    })
}

/// Reference path at `s = 1` with neutral attention vs a direct
/// per-position dynamic convolution over the assembled kernels.
pub fn dfn_reduction(case: &Case) -> Result<Equivalence> {
    if case.config.samples != 1 {
        return Err(Error::Config("the reduction check needs samples = 1".into()));
    }
    let (f, field, _) = random_fields(case)?;
    let c = &case.config;
    let kernels = assemble_kernel(&field, c)?;
    let neutral = crate::layer::AttentionField::neutral(case.batch, c, case.height, case.width)?;
    let lsdfn = sample_conv_reference(&f, &kernels, ReferenceAttention::Split(&neutral), c)?;
    let (n, ch, h, w) = f.dims4()?;
    let k = c.kernel_size;
    let half = (k / 2) as isize;
    let dfn = Tensor::from_fn(&[n, 1, c.out_channels, h, w], |idx| {
        let (b, v, y, x) = (idx[0], idx[2], idx[3], idx[4]);
        let mut acc = 0.0;
        for j in 0..k {
            for i in 0..k {
                let (fy, fx) = (y as isize + j as isize - half, x as isize + i as isize - half);
                if fy < 0 || fx < 0 || fy >= h as isize || fx >= w as isize {
                    continue;
                }
                for u in 0..ch {
                    acc += f.at(&[b, u, fy as usize, fx as usize]) * kernels.at(b, v, u, j, i, y, x);
                }
            }
        }
        acc
    })?;
    Ok(Equivalence {
        relative_error: lsdfn.data.relative_error(&dfn)?,
        bitwise: lsdfn.data.bitwise_eq(&dfn),
    })
}

/// Default equivalence grid: 20 random configurations of varying size.
pub fn default_oracle_cases() -> Vec<Case> {
    oracle_cases(20, 2024)
}

/// `count` random configurations drawn from `seed`, cycling through fusion
/// and kernel modes.
pub fn oracle_cases(count: usize, seed: u64) -> Vec<Case> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let pick = |rng: &mut Rng, xs: &[usize]| xs[rng.below(xs.len() as u64) as usize];
            let channels = pick(&mut rng, &[1, 2, 3, 4]);
            let out = pick(&mut rng, &[1, 2, 3]);
            let k = pick(&mut rng, &[1, 3, 5]);
            let s = pick(&mut rng, &[1, 3, 5]);
            let gamma = pick(&mut rng, &[1, 2, 3]);
            let mut config = LsDfnConfig::new(channels, out, k, s, gamma);
            config.in_channels = pick(&mut rng, &[1, 2, 3]);
            config.kernel_mode = if i % 2 == 0 {
                KernelMode::SharedSpatial
            } else {
                KernelMode::SharedMixing
            };
            config.fusion = [FusionMode::Attention, FusionMode::MaxPool, FusionMode::Mean][i % 3];
            config.residual_kernel = rng.below(4) != 0;
            config.residual_attention = rng.below(4) != 0;
            if rng.below(3) == 0 {
                config.post_conv_channels = Some(pick(&mut rng, &[1, 2, 4]));
            }
            Case {
                config,
                batch: pick(&mut rng, &[1, 2]),
                height: pick(&mut rng, &[5, 7, 9]),
                width: pick(&mut rng, &[5, 8, 9]),
                seed: seed.wrapping_add(100 + i as u64),
            }
        })
        .collect()
}

/// Block forward at initialization (zero kernel and attention heads, both
/// residuals on) against the sum over samples of the channel mean of `F`
/// at each in-bounds sampled center.
pub fn identity_at_init(case: &Case) -> Result<Equivalence> {
    let mut config = case.config.clone();
    config.residual_kernel = true;
    config.residual_attention = true;
    config.fusion = FusionMode::Attention;
    config.post_conv_channels = None;
    let mut rng = Rng::new(case.seed);
    let params = LsDfnParams::<f64>::init(&config, &mut rng)?;
    let x = gaussian_from(&mut rng, &[case.batch, config.in_channels, case.height, case.width], 0.0, 1.0)?;
    let (y, saved) = lsdfn_forward(&x, &params, &config)?;
    let f = saved.features();
    let (n, c, h, w) = f.dims4()?;
    let expected = Tensor::from_fn(&[n, config.out_channels, h, w], |idx| {
        let (b, y, x) = (idx[0], idx[2], idx[3]);
        let mut total = 0.0;
        for beta in 0..config.samples {
            for alpha in 0..config.samples {
                let sy = y as isize + config.sample_offset(beta);
                let sx = x as isize + config.sample_offset(alpha);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let mean: f64 = (0..c).map(|u| f.at(&[b, u, sy as usize, sx as usize])).sum::<f64>() / c as f64;
                total += mean;
            }
        }
        total
    })?;
    Ok(Equivalence {
        relative_error: y.relative_error(&expected)?,
        bitwise: y.bitwise_eq(&expected),
    })
}
