//! The bundled end-to-end run: rendered shapes through the data pipeline,
//! a short training run, masked sampling and the evaluation report.
//!
//! `cargo run --release --example demo -- <empty_out_dir> [seed]`

use multicomp::cli::{run_demo, DemoConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "demo-out".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    match run_demo(&DemoConfig { seed, ..Default::default() }, out.as_ref()) {
        Ok(summary) => {
            println!("{} records, {} scored", summary.records, summary.report.items.len());
            if let Some(m) = summary.report.aggregate {
                println!("{m:?}");
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(1);
        }
    }
}
