//! Accuracy matrices and the AM/FM summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular T×T matrix: `rows[i][j]` is the accuracy on task j after
/// training through task i, for j ≤ i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { rows };
        m.check_shape()?;
        Ok(m)
    }

    pub fn empty() -> Self {
        Self { rows: Vec::new() }
    }

    /// Appends the row for the next finished task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::Invalid(format!(
                "row {} has {} entries, expected {expected}",
                self.rows.len(),
                row.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i)?.get(j).copied()
    }

    fn check_shape(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Invalid(format!(
                    "row {i} has {} entries, expected {}",
                    row.len(),
                    i + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Invalid(format!("accuracy {v} in row {i} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Entry-wise weighted average of per-client matrices. `weights[k][j]` is
    /// client k's test-node count on task j; each entry's weights are
    /// normalized over the clients.
    pub fn combine(matrices: &[AccuracyMatrix], weights: &[Vec<usize>]) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::Invalid("no accuracy matrices to combine".into()))?;
        let t = first.task_count();
        if weights.len() != matrices.len() {
            return Err(Error::Invalid("one weight row per matrix required".into()));
        }
        for (m, w) in matrices.iter().zip(weights) {
            if m.task_count() != t || w.len() < t {
                return Err(Error::Invalid("matrices must cover the same tasks".into()));
            }
        }
        let mut rows = Vec::with_capacity(t);
        for i in 0..t {
            let mut row = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let total: usize = weights.iter().map(|w| w[j]).sum();
                if total == 0 {
                    return Err(Error::Invalid(format!("task {j} has no test nodes on any client")));
                }
                let mut acc = 0.0;
                for (m, w) in matrices.iter().zip(weights) {
                    acc += w[j] as f64 / total as f64 * m.rows[i][j];
                }
                row.push(acc.clamp(0.0, 1.0));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

/// Accuracy mean and forgetting mean. FM is `None` with a single task.
pub fn compute_metrics(a: &AccuracyMatrix) -> Result<(f64, Option<f64>)> {
    a.check_shape()?;
    let t = a.task_count();
    if t == 0 {
        return Err(Error::Invalid("accuracy matrix has no rows".into()));
    }
    let last = &a.rows[t - 1];
    let am = last.iter().sum::<f64>() / t as f64;
    let fm = (t > 1).then(|| {
        (0..t - 1).map(|i| a.rows[i][i] - last[i]).sum::<f64>() / (t - 1) as f64
    });
    Ok((am, fm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> AccuracyMatrix {
        AccuracyMatrix::new(vec![vec![0.9], vec![0.8, 0.7], vec![0.6, 0.5, 0.4]]).unwrap()
    }

    #[test]
    fn hand_matrix() {
        let (am, fm) = compute_metrics(&hand()).unwrap();
        assert!((am - 0.5).abs() < 1e-12);
        assert!((fm.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_forgetting_and_single_task() {
        let a = AccuracyMatrix::new(vec![vec![0.9], vec![0.9, 0.7], vec![0.9, 0.7, 0.4]]).unwrap();
        assert_eq!(compute_metrics(&a).unwrap().1, Some(0.0));
        let one = AccuracyMatrix::new(vec![vec![0.6]]).unwrap();
        assert_eq!(compute_metrics(&one).unwrap(), (0.6, None));
    }

    #[test]
    fn malformed_matrices_error() {
        assert!(AccuracyMatrix::new(vec![vec![0.9, 0.1]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.5]]).is_err());
        assert!(compute_metrics(&AccuracyMatrix::empty()).is_err());
        let mut m = AccuracyMatrix::empty();
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5]).is_err());
    }

    #[test]
    fn combine_weights_by_test_counts() {
        let a = AccuracyMatrix::new(vec![vec![1.0], vec![0.0, 1.0]]).unwrap();
        let b = AccuracyMatrix::new(vec![vec![0.0], vec![1.0, 0.0]]).unwrap();
        let c = AccuracyMatrix::combine(&[a, b], &[vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!(c.rows(), &[vec![0.75], vec![0.25, 0.25]]);
        let same = AccuracyMatrix::combine(&[hand(), hand()], &[vec![2, 5, 1], vec![7, 1, 1]]).unwrap();
        for (x, y) in same.rows().iter().flatten().zip(hand().rows().iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
