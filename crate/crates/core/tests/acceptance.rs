mod common;

use common::Check;

fn main() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("1 allocator oracle equivalence", Box::new(common::allocator_oracle)),
        ("2 official 2015 reproduction", Box::new(common::official_2015)),
        ("3 gradient checks", Box::new(common::gradient_checks)),
        ("4 simulation-based calibration", Box::new(common::calibration_check)),
        ("5 polls synthetic recovery", Box::new(common::polls_recovery_check)),
        ("6 synthesis identities", Box::new(common::synthesis_identities)),
        ("7 benchmark coefficients", Box::new(common::benchmark_check)),
        ("8 full pipeline", Box::new(|| common::smoke_check(a.path()))),
        ("9 determinism", Box::new(|| common::determinism_check(b.path(), c.path()))),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        let r = check();
        println!("[{}] criterion {name}: {}", if r.passed { "PASS" } else { "FAIL" }, r.detail);
        if !r.passed {
            failed.push(*name);
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
