use std::time::Instant;

use mmsurv::gradcheck::{run_suite, GradCheckOptions};

#[test]
fn full_suite_matches_finite_differences() {
    let start = Instant::now();
    let reports = run_suite(&GradCheckOptions::default()).unwrap();
    for r in &reports {
        println!(
            "{:<45} instances={:>3} coords={:>6} skipped={:>3} max_rel={:.2e}",
            r.name, r.instances, r.coords, r.skipped, r.max_rel_error
        );
    }
    println!("elapsed {:.1?}", start.elapsed());
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(reports.iter().all(|r| r.instances >= 50));
}
