use std::time::Instant;

use lsdfn::kv::KvMap;
use lsdfn::layer::{
    assemble_kernel, attended_sample_conv, build_attention, sample_conv_reference, split_kernel_params, LsDfnConfig,
    ReferenceAttention,
};
use lsdfn::rng::{gaussian_from, Rng};

use crate::run::{csv_comments, join, CliError, CliResult, Outcome, RunConfig};

const KEYS: &[&str] = &[
    "channels",
    "out_channels",
    "kernel_sizes",
    "samples",
    "strides",
    "heights",
    "widths",
    "batch",
    "repeats",
    "seed",
];

/// Analytic multiply-adds of the sampling stage: `(reference, factored)`.
/// The reference contracts a dense `C×k×k` kernel per response, the factored
/// path `C + k²` terms.
pub fn sampling_macs(config: &LsDfnConfig, n: usize, h: usize, w: usize) -> (u64, u64) {
    let responses = (n * config.out_channels * config.sample_count() * h * w) as u64;
    let (c, kk) = (config.channels as u64, config.kernel_area() as u64);
    (responses * c * kk, responses * (c + kk))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_ms<R>(mut f: impl FnMut() -> lsdfn::Result<R>) -> lsdfn::Result<f64> {
    let start = Instant::now();
    std::hint::black_box(f()?);
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

pub fn run(run: &RunConfig) -> CliResult<Outcome> {
    run.check_keys(KEYS)?;
    let kv = &run.kv;
    let channels: Vec<usize> = kv.list("channels")?.unwrap_or_else(|| vec![4, 16, 32]);
    let outs: Vec<usize> = kv.list("out_channels")?.unwrap_or_else(|| vec![8]);
    let ks: Vec<usize> = kv.list("kernel_sizes")?.unwrap_or_else(|| vec![3]);
    let samples: Vec<usize> = kv.list("samples")?.unwrap_or_else(|| vec![3]);
    let strides: Vec<usize> = kv.list("strides")?.unwrap_or_else(|| vec![1]);
    let heights: Vec<usize> = kv.list("heights")?.unwrap_or_else(|| vec![16]);
    let widths: Vec<usize> = kv.list("widths")?.unwrap_or_else(|| vec![16]);
    let batch: usize = kv.parsed_or("batch", 1)?;
    let repeats: usize = kv.parsed_or("repeats", 5)?;
    let seed: u64 = kv.parsed_or("seed", 1)?;
    if repeats == 0 {
        return Err(CliError::Usage("repeats must be >= 1".into()));
    }
    if repeats == 1 {
        eprintln!("warning: repeats = 1, the median is a single noisy sample");
    }

    let mut effective = KvMap::default();
    effective.insert("channels", join(&channels));
    effective.insert("out_channels", join(&outs));
    effective.insert("kernel_sizes", join(&ks));
    effective.insert("samples", join(&samples));
    effective.insert("strides", join(&strides));
    effective.insert("heights", join(&heights));
    effective.insert("widths", join(&widths));
    effective.insert("batch", batch);
    effective.insert("repeats", repeats);
    effective.insert("seed", seed);
    run.prepare_out(&effective)?;

    let mut csv = csv_comments(&effective);
    csv.push_str("C,C_out,k,s,gamma,H,W,N,reference_ms,factored_ms,speedup,reference_macs,factored_macs,mac_ratio\n");
    for &c in &channels {
        for &c_out in &outs {
            for &k in &ks {
                for &s in &samples {
                    for &gamma in &strides {
                        for &h in &heights {
                            for &w in &widths {
                                let config = LsDfnConfig::new(c, c_out, k, s, gamma);
                                config.validate()?;
                                let mut rng = Rng::new(seed);
                                let f = gaussian_from::<f32>(&mut rng, &[batch, c, h, w], 0.0, 1.0)?;
                                let raw =
                                    gaussian_from::<f32>(&mut rng, &[batch, config.kernel_branch_channels(), h, w], 0.0, 1.0)?;
                                let sam = gaussian_from::<f32>(
                                    &mut rng,
                                    &[batch, config.attention_sample_channels(), h, w],
                                    0.0,
                                    1.0,
                                )?;
                                let pos = gaussian_from::<f32>(
                                    &mut rng,
                                    &[batch, config.attention_position_channels(), h, w],
                                    0.0,
                                    1.0,
                                )?;
                                let field = split_kernel_params(&raw, &config)?;
                                let attn = build_attention(&sam, &pos, &config)?;

                                let mut reference = Vec::with_capacity(repeats);
                                let mut factored = Vec::with_capacity(repeats);
                                for _ in 0..repeats {
                                    reference.push(time_ms(|| {
                                        let kernels = assemble_kernel(&field, &config)?;
                                        sample_conv_reference(&f, &kernels, ReferenceAttention::Split(&attn), &config)
                                    })?);
                                    factored.push(time_ms(|| attended_sample_conv(&f, &field, &attn, &config))?);
                                }
                                let (r, fa) = (median(reference), median(factored));
                                let (rm, fm) = sampling_macs(&config, batch, h, w);
                                let ratio = rm as f64 / fm as f64;
                                csv.push_str(&format!(
                                    "{c},{c_out},{k},{s},{gamma},{h},{w},{batch},{r:.4},{fa:.4},{:.3},{rm},{fm},{ratio:.4}\n",
                                    r / fa
                                ));
                                println!(
                                    "C={c} C'={c_out} k={k} s={s} gamma={gamma} {h}x{w}: reference {r:.3} ms, factored {fa:.3} ms, speedup {:.2}x (MAC ratio {ratio:.2})",
                                    r / fa
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    run.write("bench.csv", csv.as_bytes())?;
    Ok(Outcome::Success)
}
