use lsdfn::checks::{gradcheck_block, gradcheck_conv, grad_grid};
use lsdfn::gradcheck::{GradCheckReport, DEFAULT_EPSILON};
use lsdfn::kv::KvMap;
use lsdfn::layer::{FusionMode, KernelMode};

use crate::run::{csv_comments, join, CliError, CliResult, Outcome, RunConfig};

const KEYS: &[&str] = &[
    "ops",
    "samples",
    "fusions",
    "kernel_modes",
    "channels",
    "out_channels",
    "size",
    "seed",
    "epsilon",
    "tolerance",
];

const OPS: &[&str] = &["conv", "lsdfn"];

fn coordinate(c: &[usize]) -> String {
    c.iter().map(ToString::to_string).collect::<Vec<_>>().join(":")
}

pub fn run(run: &RunConfig) -> CliResult<Outcome> {
    run.check_keys(KEYS)?;
    let kv = &run.kv;
    let ops: Vec<String> = kv.list("ops")?.unwrap_or_else(|| OPS.iter().map(|s| s.to_string()).collect());
    if ops.is_empty() {
        return Err(CliError::Usage("nothing to check: the op set is empty".into()));
    }
    if let Some(bad) = ops.iter().find(|o| !OPS.contains(&o.as_str())) {
        return Err(CliError::Usage(format!("unknown op {bad:?}; expected one of {}", OPS.join(", "))));
    }
    let samples: Vec<usize> = kv.list("samples")?.unwrap_or_else(|| vec![1, 3]);
    let fusions: Vec<FusionMode> = kv
        .list("fusions")?
        .unwrap_or_else(|| vec![FusionMode::Attention, FusionMode::MaxPool]);
    let modes: Vec<KernelMode> = kv
        .list("kernel_modes")?
        .unwrap_or_else(|| vec![KernelMode::SharedSpatial, KernelMode::SharedMixing]);
    let channels: usize = kv.parsed_or("channels", 4)?;
    let out_channels: usize = kv.parsed_or("out_channels", 3)?;
    let size: usize = kv.parsed_or("size", 7)?;
    let seed: u64 = kv.parsed_or("seed", 1)?;
    let epsilon: f64 = kv.parsed_or("epsilon", DEFAULT_EPSILON)?;
    let tolerance: f64 = kv.parsed_or("tolerance", 1e-5)?;
    if !(epsilon > 0.0) || !(tolerance >= 0.0) {
        return Err(CliError::Usage("epsilon must be > 0 and tolerance >= 0".into()));
    }

    let mut effective = KvMap::default();
    effective.insert("ops", join(&ops));
    effective.insert("samples", join(&samples));
    effective.insert("fusions", join(&fusions));
    effective.insert("kernel_modes", join(&modes));
    effective.insert("channels", channels);
    effective.insert("out_channels", out_channels);
    effective.insert("size", size);
    effective.insert("seed", seed);
    effective.insert("epsilon", epsilon);
    effective.insert("tolerance", tolerance);
    run.prepare_out(&effective)?;

    let mut rows: Vec<(String, String, String, GradCheckReport)> = Vec::new();
    if ops.iter().any(|o| o == "conv") {
        for (name, report) in gradcheck_conv(seed, [1, channels, size, size], out_channels, 3, epsilon, tolerance)? {
            let label = format!("C={channels} C_out={out_channels} k=3 H=W={size} seed={seed}");
            rows.push(("conv".into(), label, name, report));
        }
    }
    if ops.iter().any(|o| o == "lsdfn") {
        let cases = grad_grid(&samples, &fusions, &modes, channels, out_channels, size, seed);
        if cases.is_empty() {
            return Err(CliError::Usage("nothing to check: the size grid is empty".into()));
        }
        for case in &cases {
            for (name, report) in gradcheck_block(case, epsilon, tolerance)? {
                rows.push(("lsdfn".into(), case.label(), name, report));
            }
        }
    }

    let mut csv = csv_comments(&effective);
    csv.push_str("op,case,tensor,max_relative_error,worst_coordinate,epsilon,tolerance,passed\n");
    for (op, case, tensor, r) in &rows {
        csv.push_str(&format!(
            "{op},{case},{tensor},{:e},{},{:e},{:e},{}\n",
            r.max_relative_error,
            coordinate(&r.worst_coordinate),
            r.epsilon_used,
            r.tolerance,
            r.passed
        ));
    }
    run.write("gradcheck.csv", csv.as_bytes())?;

    let failures: Vec<_> = rows.iter().filter(|r| !r.3.passed).collect();
    let worst = rows
        .iter()
        .max_by(|a, b| a.3.max_relative_error.total_cmp(&b.3.max_relative_error))
        .expect("at least one check ran");
    println!(
        "gradcheck: {} tensors checked, {} failed; worst {:e} at {} [{}] ({} {})",
        rows.len(),
        failures.len(),
        worst.3.max_relative_error,
        worst.2,
        coordinate(&worst.3.worst_coordinate),
        worst.0,
        worst.1
    );
    for (op, case, tensor, r) in &failures {
        eprintln!(
            "FAIL {op} {tensor} [{}] rel {:e} > {:e} ({case})",
            coordinate(&r.worst_coordinate),
            r.max_relative_error,
            r.tolerance
        );
    }
    Ok(Outcome::from_passed(failures.is_empty()))
}
