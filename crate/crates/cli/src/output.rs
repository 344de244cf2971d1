//! Deterministic result emission: every float is written with 17 significant
//! digits, files land via write-to-temp-then-rename, and nothing
//! time-dependent ever enters a data file.

use std::fs;
use std::path::Path;

use nccl_core::diagnostics::StepRecord;

use crate::error::{CliError, Result};

/// 17 significant digits: enough to reproduce any f64 exactly.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| CliError::Runtime(format!("no parent dir for {}", path.display())))?;
    fs::create_dir_all(parent)
        .map_err(|e| CliError::Runtime(format!("mkdir {}: {e}", parent.display())))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

pub const STEP_HEADER: &str =
    "t,alpha,beta,lambda,gamma,b_est,loss_f_batch,loss_g_batch,ifo_total";

/// The per-step CSV with the pinned column set.
pub fn steps_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(STEP_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            fmt_f(r.alpha),
            fmt_f(r.beta),
            fmt_f(r.lambda),
            fmt_f(r.gamma),
            fmt_opt(r.b_est),
            fmt_opt(r.loss_f_batch),
            fmt_f(r.loss_g_batch),
            r.ifo_total
        ));
    }
    out
}

/// Full-gradient probe CSV: overall previous-set quantities plus one
/// `(grad, loss)` column pair per earlier task.
pub fn probes_csv(records: &[StepRecord], n_previous_tasks: usize) -> String {
    let mut out = String::from("t,f_full,grad_f_norm_sq,sigma_f_sq,mem_current_fraction");
    for j in 0..n_previous_tasks {
        out.push_str(&format!(",grad_task{j}_norm_sq,loss_task{j}"));
    }
    out.push('\n');
    for r in records {
        let Some(p) = &r.probe else { continue };
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.t,
            fmt_f(p.f_full),
            fmt_f(p.grad_f_full_norm_sq),
            fmt_f(p.sigma_f_sq),
            fmt_opt(r.mem_current_fraction)
        ));
        for j in 0..n_previous_tasks {
            match p.per_task.iter().find(|tp| tp.task_id == j) {
                Some(tp) => out.push_str(&format!(",{},{}", fmt_f(tp.grad_norm_sq), fmt_f(tp.loss))),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}
