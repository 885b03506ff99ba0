use lsdfn::erf::{build_erf_stack, compute_erf, erf_metrics, erf_to_pgm, model_interval, ErfStack, DEFAULT_TAU};
use lsdfn::kv::KvMap;
use lsdfn::layer::{FusionMode, LsDfnConfig};

use crate::run::{csv_comments, join, CliError, CliResult, Outcome, RunConfig};

const KEYS: &[&str] = &[
    "stacks",
    "conv_depth",
    "kernel_size",
    "samples",
    "strides",
    "channels",
    "out_channels",
    "branch_kernel_size",
    "fusion",
    "size",
    "trials",
    "tau",
    "seed",
];

pub fn run(run: &RunConfig) -> CliResult<Outcome> {
    run.check_keys(KEYS)?;
    let kv = &run.kv;
    let stacks: Vec<String> = kv
        .list("stacks")?
        .unwrap_or_else(|| vec!["conv".to_string(), "lsdfn".to_string()]);
    if stacks.is_empty() {
        return Err(CliError::Usage("nothing to probe: the stack list is empty".into()));
    }
    if let Some(bad) = stacks.iter().find(|s| *s != "conv" && *s != "lsdfn") {
        return Err(CliError::Usage(format!("unknown stack {bad:?}; expected conv or lsdfn")));
    }
    let conv_depth: usize = kv.parsed_or("conv_depth", 1)?;
    let k: usize = kv.parsed_or("kernel_size", 3)?;
    let samples: Vec<usize> = kv.list("samples")?.unwrap_or_else(|| vec![1, 3, 5]);
    let strides: Vec<usize> = kv.list("strides")?.unwrap_or_else(|| vec![2]);
    let channels: usize = kv.parsed_or("channels", 4)?;
    let out_channels: usize = kv.parsed_or("out_channels", 4)?;
    let bk: usize = kv.parsed_or("branch_kernel_size", 3)?;
    let fusion: FusionMode = kv.parsed_or("fusion", FusionMode::Attention)?;
    let size: usize = kv.parsed_or("size", 33)?;
    let trials: usize = kv.parsed_or("trials", 32)?;
    let tau: f64 = kv.parsed_or("tau", DEFAULT_TAU)?;
    let seed: u64 = kv.parsed_or("seed", 1)?;

    let mut effective = KvMap::default();
    effective.insert("stacks", join(&stacks));
    effective.insert("conv_depth", conv_depth);
    effective.insert("kernel_size", k);
    effective.insert("samples", join(&samples));
    effective.insert("strides", join(&strides));
    effective.insert("channels", channels);
    effective.insert("out_channels", out_channels);
    effective.insert("branch_kernel_size", bk);
    effective.insert("fusion", fusion);
    effective.insert("size", size);
    effective.insert("trials", trials);
    effective.insert("tau", tau);
    effective.insert("seed", seed);

    // (stack, s, gamma) in row order: γ outer, s inner.
    let mut probes = Vec::new();
    for stack in &stacks {
        if stack == "conv" {
            probes.push((ErfStack::Conv { depth: conv_depth, kernel_size: k }, 1, 1));
        } else {
            for &gamma in &strides {
                for &s in &samples {
                    let mut c = LsDfnConfig::new(channels, out_channels, k, s, gamma);
                    c.branch_kernel_size = bk;
                    c.fusion = fusion;
                    c.validate()?;
                    probes.push((ErfStack::Lsdfn(c), s, gamma));
                }
            }
        }
    }
    if probes.is_empty() {
        return Err(CliError::Usage("nothing to probe: the (s, gamma) sweep is empty".into()));
    }
    run.prepare_out(&effective)?;

    let mut csv = csv_comments(&effective);
    csv.push_str("config,s,gamma,k,extent_x,extent_y,support_area,equivalent_radius,theoretical_extent\n");
    for (stack, s, gamma) in &probes {
        let model = build_erf_stack(stack, channels, seed)?;
        let map = compute_erf(&model, [channels, size, size], trials, seed)?;
        let m = erf_metrics(&map, tau)?;
        let theory = model_interval(&model).extent();
        let label = stack.label();
        csv.push_str(&format!(
            "{label},{s},{gamma},{k},{},{},{},{:.6},{theory}\n",
            m.extent_x, m.extent_y, m.support_area, m.equivalent_radius
        ));
        run.write(&format!("erf_{label}.pgm"), &erf_to_pgm(&map, true))?;
        println!(
            "{label}: extent {}x{} (theoretical {theory}), support {}, radius {:.3}",
            m.extent_x, m.extent_y, m.support_area, m.equivalent_radius
        );
    }
    run.write("erf.csv", csv.as_bytes())?;
    Ok(Outcome::Success)
}
