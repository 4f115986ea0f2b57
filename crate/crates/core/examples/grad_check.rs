use digrap::harness::{grad_check_command, GRAD_CHECK_TOL};

fn main() -> digrap::Result<()> {
    for r in grad_check_command(7, 1e-5)? {
        let ok = r.param_error < GRAD_CHECK_TOL && r.input_error < GRAD_CHECK_TOL;
        println!(
            "{:<18} parameter grad {:.2e}, input grad {:.2e} [{}]",
            r.model,
            r.param_error,
            r.input_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
