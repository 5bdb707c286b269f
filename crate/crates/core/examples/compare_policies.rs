//! Every guidance policy in configs/table2.toml on shared seeds, with paired
//! intervals against the fixed baseline. Pass a cell count to go beyond the
//! quick default of 100.
//!
//! cargo run --release --example compare_policies -- 500

use dyncfg::cli::Session;
use dyncfg::config::parse_config;
use dyncfg::harness::{alignment_diff_ci, frechet_diff_ci, metrics_row};

fn main() -> dyncfg::Result<()> {
    let mut cfg = parse_config(include_str!("../configs/table2.toml"))?;
    cfg.experiment.seeds = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let session = Session::new(cfg, ".".into())?;
    let names: Vec<String> = session.cfg.policies.iter().map(|p| p.name.clone()).collect();
    let runs = session.run_policies(&names)?;
    let (cells, reference) = (session.cells(), session.reference()?);

    println!("{:<18} {:>10} {:>8} {:>24} {:>20}", "policy", "alignment", "FD", "d_alignment vs fixed", "d_FD vs fixed");
    for run in &runs {
        let row = metrics_row(run, &cells, &session.bed.world, &reference)?;
        let (alo, ahi) = alignment_diff_ci(run, &runs[0], &cells, &session.bed.world)?;
        let (flo, fhi) = frechet_diff_ci(run, &runs[0], &cells, &reference)?;
        println!(
            "{:<18} {:>10.6} {:>8.4} [{alo:+.1e}, {ahi:+.1e}] [{flo:+.4}, {fhi:+.4}]",
            run.name, row.alignment, row.fd
        );
    }
    Ok(())
}
