//! Verify every analytic gradient against central finite differences:
//! each op on small random tensors, the three self-supervised losses,
//! then the full model with sampled parameter elements.
//!
//! Run with `cargo run --release --example gradient_check`.

use rfssl::full_gradient_check;

fn main() {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse::<u64>().expect("seed must be an integer"))
        .unwrap_or(404);
    let report = full_gradient_check(seed).expect("gradient check suite runs");
    for line in report.summary_lines() {
        println!("{line}");
    }
    if !report.passed {
        std::process::exit(1);
    }
}
