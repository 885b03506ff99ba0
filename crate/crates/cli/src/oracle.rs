use lsdfn::checks::{dfn_reduction, factored_vs_reference, identity_at_init, oracle_cases, split_vs_full_attention, Case, Equivalence};
use lsdfn::kv::KvMap;

use crate::run::{csv_comments, join, CliError, CliResult, Outcome, RunConfig};

const KEYS: &[&str] = &["checks", "instances", "seed", "tolerance_factored", "tolerance_split", "tolerance_identity"];

const CHECKS: &[&str] = &["factored_vs_reference", "split_vs_full", "dfn_reduction", "identity_at_init"];

struct Row {
    check: &'static str,
    case: String,
    result: Equivalence,
    tolerance: f64,
    /// `dfn_reduction` is judged on bit equality alone.
    needs_bitwise: bool,
}

impl Row {
    fn passed(&self) -> bool {
        if self.needs_bitwise {
            self.result.bitwise
        } else {
            self.result.relative_error <= self.tolerance
        }
    }
}

fn with_samples(case: &Case, samples: usize) -> Case {
    let mut c = case.clone();
    c.config.samples = samples;
    c
}

pub fn run(run: &RunConfig) -> CliResult<Outcome> {
    run.check_keys(KEYS)?;
    let kv = &run.kv;
    let checks: Vec<String> = kv
        .list("checks")?
        .unwrap_or_else(|| CHECKS.iter().map(|s| s.to_string()).collect());
    if checks.is_empty() {
        return Err(CliError::Usage("nothing to check: the check set is empty".into()));
    }
    if let Some(bad) = checks.iter().find(|c| !CHECKS.contains(&c.as_str())) {
        return Err(CliError::Usage(format!("unknown check {bad:?}; expected one of {}", CHECKS.join(", "))));
    }
    let instances: usize = kv.parsed_or("instances", 20)?;
    if instances == 0 {
        return Err(CliError::Usage("nothing to check: instances = 0".into()));
    }
    let seed: u64 = kv.parsed_or("seed", 2024)?;
    let tol_factored: f64 = kv.parsed_or("tolerance_factored", 1e-5)?;
    let tol_split: f64 = kv.parsed_or("tolerance_split", 1e-6)?;
    let tol_identity: f64 = kv.parsed_or("tolerance_identity", 1e-6)?;

    let mut effective = KvMap::default();
    effective.insert("checks", join(&checks));
    effective.insert("instances", instances);
    effective.insert("seed", seed);
    effective.insert("tolerance_factored", tol_factored);
    effective.insert("tolerance_split", tol_split);
    effective.insert("tolerance_identity", tol_identity);
    run.prepare_out(&effective)?;

    let cases = oracle_cases(instances, seed);
    let mut rows = Vec::new();
    for check in CHECKS.iter().copied().filter(|c| checks.iter().any(|x| x == c)) {
        for case in &cases {
            let (case, result, tolerance, needs_bitwise) = match check {
                "factored_vs_reference" => (case.clone(), factored_vs_reference(case)?, tol_factored, false),
                "split_vs_full" => (case.clone(), split_vs_full_attention(case)?, tol_split, false),
                "dfn_reduction" => {
                    let c = with_samples(case, 1);
                    let r = dfn_reduction(&c)?;
                    (c, r, 0.0, true)
                }
                _ => (case.clone(), identity_at_init(case)?, tol_identity, false),
            };
            rows.push(Row {
                check,
                case: case.label(),
                result,
                tolerance,
                needs_bitwise,
            });
        }
    }

    let mut csv = csv_comments(&effective);
    csv.push_str("check,case,relative_error,bitwise,tolerance,passed\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:e},{},{},{}\n",
            r.check,
            r.case,
            r.result.relative_error,
            r.result.bitwise,
            if r.needs_bitwise { "bitwise".to_string() } else { format!("{:e}", r.tolerance) },
            r.passed()
        ));
    }
    run.write("oracle.csv", csv.as_bytes())?;

    let mut all = true;
    for check in CHECKS.iter().filter(|c| checks.iter().any(|x| x == *c)) {
        let mine: Vec<&Row> = rows.iter().filter(|r| r.check == *check).collect();
        let failed = mine.iter().filter(|r| !r.passed()).count();
        let worst = mine.iter().map(|r| r.result.relative_error).fold(0.0, f64::max);
        println!("{check}: {}/{} passed, worst relative error {worst:e}", mine.len() - failed, mine.len());
        for r in mine.iter().filter(|r| !r.passed()) {
            eprintln!("FAIL {check} rel {:e} bitwise {} ({})", r.result.relative_error, r.result.bitwise, r.case);
        }
        all &= failed == 0;
    }
    Ok(Outcome::from_passed(all))
}
