//! Audit every differentiable operation and a micro network against central
//! finite differences.

use xmodal::diagnostics;

fn main() -> Result<(), xmodal::Error> {
    let report = diagnostics::run(7, 20, 6)?;
    for op in &report.ops {
        println!("{:<24} cases {:>3}  max rel err {:.2e}", op.op, op.cases, op.max_rel_err);
    }
    for (name, err) in &report.network {
        println!("{name:<24} max rel err {err:.2e}");
    }
    println!(
        "ops {:.2e}, network {:.2e}, {:.1}s",
        report.op_max(),
        report.network_max(),
        report.elapsed.as_secs_f64()
    );
    Ok(())
}
