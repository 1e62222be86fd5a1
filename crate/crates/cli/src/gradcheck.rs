//! The `gradcheck` command: finite-difference verification of every
//! registered op.

use std::fmt::Write as _;

use vsod_core::gradsuite::{registered_ops, OpReport, EPS, TOLERANCE};

use crate::error::Result;

/// Checks every registered op built from `seed`.
pub fn run_gradcheck(seed: u64) -> Result<Vec<OpReport>> {
    Ok(registered_ops(seed)
        .iter()
        .map(|op| op.run(EPS))
        .collect::<vsod_core::Result<_>>()?)
}

/// One row per op with its worst relative error and verdict.
pub fn render(reports: &[OpReport]) -> String {
    let mut out = format!("{:<20} {:>8} {:>12}  result (tol {TOLERANCE:e})\n", "op", "entries", "max_rel_err");
    for r in reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{:<20} {:>8} {:>12.3e}  {verdict}", r.name, r.checked, r.max_rel_error);
    }
    out
}
