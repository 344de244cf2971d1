//! Continual-learning evaluation: the lower-triangular accuracy matrix,
//! average accuracy, and the average maximum forgetting.

use crate::error::{Error, Result};
use crate::nn::{self, HeadSelect, MlpSpec, ParamVector};
use crate::tasks::Example;

/// Lower-triangular accuracy matrix: entry `(i, j)` is the test accuracy on
/// task `j` after finishing training task `i` (defined for `j <= i`).
#[derive(Debug, Clone, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Append the row measured after training one more task; row `i` must
    /// hold `i + 1` accuracies in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Usage(format!(
                "row after task {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Usage("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of trained tasks (defined rows).
    pub fn n_trained(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| Error::MetricUndefined("no trained tasks".into()))?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Average maximum forgetting over the non-final tasks: for each task
    /// `j < T`, the best accuracy it ever had before the final task minus its
    /// final accuracy; negative values mean backward transfer.
    pub fn forgetting(&self) -> Result<f64> {
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::MetricUndefined(
                "forgetting needs at least two trained tasks".into(),
            ));
        }
        let last = &self.rows[t - 1];
        let mut acc = 0.0;
        for (j, &final_acc) in last.iter().enumerate().take(t - 1) {
            let best = (j..t - 1)
                .map(|l| self.rows[l][j])
                .fold(f64::NEG_INFINITY, f64::max);
            acc += best - final_acc;
        }
        Ok(acc / (t - 1) as f64)
    }

    /// CSV dump: one row per checkpoint, columns padded to the final width.
    pub fn to_csv(&self) -> String {
        let width = self.rows.last().map(Vec::len).unwrap_or(0);
        let mut out = String::from("after_task");
        for j in 0..width {
            out.push_str(&format!(",acc_task_{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for j in 0..width {
                match row.get(j) {
                    Some(a) => out.push_str(&format!(",{a:.17e}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy of the model on each task's held-out set; in per-task head mode
/// the argmax is taken inside the task's logit slice. Argmax ties break
/// toward the lowest class index.
pub fn evaluate(
    params: &ParamVector,
    spec: &MlpSpec,
    task_test_sets: &[&[Example]],
    head: HeadSelect,
) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(task_test_sets.len());
    for test in task_test_sets {
        if test.is_empty() {
            return Err(Error::EmptyBatch("evaluate"));
        }
        let mut hits = 0usize;
        for e in *test {
            let probs = nn::forward(params, spec, &e.features)?;
            let (lo, hi, want) = match head {
                HeadSelect::Single => (0, spec.output_dim(), e.label),
                HeadSelect::PerTask { classes_per_task } => {
                    let lo = e.task_id * classes_per_task;
                    (lo, lo + classes_per_task, e.label)
                }
            };
            if hi > probs.len() {
                return Err(Error::ShapeMismatch {
                    what: "evaluate head slice",
                    expected: probs.len(),
                    got: hi,
                });
            }
            let mut arg = 0usize;
            let mut best = f64::NEG_INFINITY;
            for (k, &p) in probs[lo..hi].iter().enumerate() {
                if p > best {
                    best = p;
                    arg = k;
                }
            }
            if arg == want {
                hits += 1;
            }
        }
        row.push(hits as f64 / test.len() as f64);
    }
    Ok(row)
}
