//! Run the built-in verification suite and print its report.
//!
//! Every check pits the sparse engine against an independent dense oracle or
//! a closed-form identity: gradients against finite differences, diffusion
//! against explicit matrix powers, scalar-weight diffusion against its
//! spectral form, transition matrices against their defining invariants.
//! `small` keeps problem sizes tiny; `full` widens the sweep.
//!
//!     cargo run --example verification_report [small|full] [seed]

use agdn::verify::{all_passed, render_report, run_all, Scale};

fn main() -> agdn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scale: Scale = args
        .first()
        .map(|s| s.parse().expect("scale must be 'small' or 'full'"))
        .unwrap_or(Scale::Full);
    let seed: u64 = args
        .get(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);

    let report = run_all(scale, seed)?;
    print!("{}", render_report(&report));
    if all_passed(&report) {
        Ok(())
    } else {
        std::process::exit(3);
    }
}
