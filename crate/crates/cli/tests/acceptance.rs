//! Full acceptance battery: one PASS/FAIL line per criterion.

use macrohydro_cli::battery::{run_battery, summary_table, BatteryOptions};
use macrohydro_cli::pipeline::Status;

fn main() {
    println!("running acceptance battery");
    let results = run_battery(&BatteryOptions::default(), |r| println!("{}", r.line()));
    println!("{}", summary_table(&results));
    assert_eq!(results.len(), 11);
    let failed: Vec<u8> = results
        .iter()
        .filter(|r| r.status != Status::Pass)
        .map(|r| r.id)
        .collect();
    if !failed.is_empty() {
        eprintln!("criteria not passing: {failed:?}");
        std::process::exit(1);
    }
}
