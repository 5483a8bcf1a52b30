//! Runs the desk-scale 2x2 optimizer/schedule grid and prints the table.
//!
//! `cargo run --release --example grid -- [steps] [out_dir]`

use std::path::PathBuf;

use t5lab::train::{desk_grid_config, desk_schedule, format_grid, run_grid};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let out: Option<PathBuf> = args.next().map(PathBuf::from);
    let run = desk_grid_config(steps);
    let report = run_grid::<f64>(&run, &|k| desk_schedule(k, steps), out.as_deref())?;
    for c in &report.cells {
        println!(
            "{} {:?}: initial {:.4} final {:.4} heldout {:?}",
            c.optimizer.name(),
            c.schedule,
            c.initial_nll,
            c.final_nll,
            c.heldout_nll
        );
    }
    print!("{}", format_grid(&report));
    Ok(())
}
