//! Finite-difference check of every differentiable op and of the full model
//! on a tiny configuration. Takes an optional probe count.

use dpmn::gradcheck;
use dpmn::Result;

fn main() -> Result<()> {
    let probes = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let report = gradcheck::run(probes, 0)?;
    print!("{report}");
    println!(
        "worst op {:.2e}, worst model coordinate {:.2e} over {} probes",
        report.max_op_error(),
        report.max_model_error(),
        report.model_probes()
    );
    report.into_result()?;
    println!("all within tolerance");
    Ok(())
}
