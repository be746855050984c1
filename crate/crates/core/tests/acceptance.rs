//! Runs the nine acceptance criteria with pinned tolerances.
//!
//! `cargo test --test acceptance -- 3 7` runs a subset.

use std::process::ExitCode;

use invreg::checks::{Budget, Suite, Tolerances, TITLES};

fn pinned() -> Tolerances {
    Tolerances {
        tweedie: 1e-4,
        tweedie_seconds: 300.0,
        objective_constant_rel: 1e-3,
        tikhonov_rel: 0.02,
        stationarity_ratio: 0.05,
        scalar_construction: 1e-8,
        se_multiplier: 3.0,
        map_density_rel: 0.2,
        round_trip: 1e-6,
        round_trip_iters: 100,
        fd_rel: 1e-4,
        se_slope: -0.5,
        se_slope_tol: 0.1,
        power_series_terms: 200,
        power_series_probes: 50,
        exact_logdet: 1e-10,
        oracle_estimator: 1e-6,
        oracle_density_rel: 1e-6,
        oracle_score_rel: 1e-5,
        map_foc: 1e-6,
    }
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ids: Vec<usize> = if picked.is_empty() { (1..=TITLES.len()).collect() } else { picked };
    let suite = Suite::new(pinned(), Budget::default());
    let mut failed = 0;
    for id in ids {
        let o = suite.run(id);
        println!("{}", o.line());
        for d in &o.details {
            println!("    {d}");
        }
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
