//! `camscope gradcheck`.

use std::io::Write;

use camscope::gradcheck::{run_suite, TOLERANCE};
use camscope::OpKind;

use crate::{CliError, CliResult};

pub fn run(seed: u64, fault: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    let fault = fault
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| {
                CliError::usage(format!(
                    "unknown primitive `{name}` (valid: {})",
                    OpKind::ALL.map(OpKind::name).join(", ")
                ))
            })
        })
        .transpose()?;
    let reports = run_suite(seed, fault)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        report!(
            out,
            "{:<24} max rel err {:.3e}  ({} elements)  {verdict}",
            r.name,
            r.max_rel_error,
            r.elements
        )?;
    }
    if failed > 0 {
        return Err(CliError::failure(format!(
            "{failed} of {} gradient checks exceed {TOLERANCE:e}",
            reports.len()
        )));
    }
    report!(out, "all {} gradient checks below {TOLERANCE:e}", reports.len())?;
    Ok(())
}
