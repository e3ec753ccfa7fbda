//! Average accuracy and forgetting from the lower-triangular accuracy
//! matrix `a[t][i]` (accuracy on task `i` after training task `t`).

use std::fmt::Write as _;

use crate::error::{HamError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    /// `rows[t]` holds accuracies on tasks `0..=t`.
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Appends the accuracies measured after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.num_tasks {
            return Err(HamError::State("accuracy matrix already complete".into()));
        }
        if row.len() != t + 1 {
            return Err(HamError::State(format!(
                "row after task {} needs {} entries, got {}",
                t + 1,
                t + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(HamError::Input(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks && self.num_tasks > 0
    }

    fn final_row(&self) -> Result<&[f64]> {
        if !self.is_complete() {
            return Err(HamError::State(format!(
                "final row missing: {} of {} rows present",
                self.rows.len(),
                self.num_tasks
            )));
        }
        Ok(self.rows.last().unwrap())
    }

    /// CSV with header `after_task,task_1,…,task_N`; cells above the
    /// diagonal are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for i in 1..=self.num_tasks {
            write!(s, ",task_{i}").unwrap();
        }
        s.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            write!(s, "{}", t + 1).unwrap();
            for i in 0..self.num_tasks {
                match row.get(i) {
                    Some(v) => write!(s, ",{v:.6}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the final row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row()?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over tasks `1..N-1` of (best accuracy before the last task) minus
/// (final accuracy).
pub fn forgetting_measure(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row()?;
    let n = m.num_tasks;
    if n < 2 {
        return Err(HamError::State("forgetting needs at least two tasks".into()));
    }
    let total: f64 = (0..n - 1)
        .map(|i| {
            let peak = m.rows[i..n - 1]
                .iter()
                .map(|row| row[i])
                .fold(f64::NEG_INFINITY, f64::max);
            peak - last[i]
        })
        .sum();
    Ok(total / (n - 1) as f64)
}
