//! Stream metrics: final accuracy, forgetting, any-time accuracy, and
//! multi-seed aggregation.

use crate::error::{Error, Result};

/// Lower-triangular `a[t][i]`: accuracy on task `i`'s classes after
/// training through task `t` (`i ≤ t`).
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

fn check_unit(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Contract(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds from complete rows; row `t` must hold `t + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the evaluation after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.tasks {
            return Err(Error::Contract(format!("matrix already has all {} rows", self.tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::dim(
                "accuracy matrix",
                format!("row {t} needs {} entries, got {}", t + 1, row.len()),
            ));
        }
        row.iter().try_for_each(|&v| check_unit(v))?;
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }
}

/// Any-time accuracies in the order they were measured.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AucRecorder {
    points: Vec<(usize, f64)>,
}

impl AucRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, samples_seen: usize, accuracy: f64) -> Result<()> {
        check_unit(accuracy)?;
        self.points.push((samples_seen, accuracy));
        Ok(())
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mean of the final row.
pub fn a_last(m: &AccuracyMatrix) -> Result<f64> {
    if !m.is_complete() || m.tasks == 0 {
        return Err(Error::Contract(format!(
            "final row missing: {} of {} rows recorded",
            m.rows.len(),
            m.tasks
        )));
    }
    let last = &m.rows[m.tasks - 1];
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over tasks `i < T` of `max_{i ≤ j < T} a[j][i] − a[T][i]`
/// (1-based `T`). Negative terms are kept; `T = 1` gives 0.
pub fn f_last(m: &AccuracyMatrix) -> Result<f64> {
    a_last(m)?;
    let t = m.tasks;
    if t == 1 {
        return Ok(0.0);
    }
    let last = &m.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|i| {
            let best = (i..t - 1)
                .map(|j| m.rows[j][i])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

pub fn a_auc(r: &AucRecorder) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Contract("no any-time evaluations recorded".into()));
    }
    Ok(r.points.iter().map(|p| p.1).sum::<f64>() / r.len() as f64)
}

/// Mean and population standard deviation.
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Contract("cannot aggregate zero seeds".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `seed,metric,value`.
pub fn metrics_csv(rows: &[(u64, &str, f64)]) -> String {
    let mut s = String::from("seed,metric,value\n");
    for (seed, name, v) in rows {
        s += &format!("{seed},{name},{v}\n");
    }
    s
}

/// `samples_seen,accuracy`.
pub fn anytime_csv(r: &AucRecorder) -> String {
    let mut s = String::from("samples_seen,accuracy\n");
    for (n, a) in &r.points {
        s += &format!("{n},{a}\n");
    }
    s
}

/// `metric,mean,std,seeds`.
pub fn aggregate_csv(rows: &[(&str, f64, f64, usize)]) -> String {
    let mut s = String::from("metric,mean,std,seeds\n");
    for (name, mean, std, n) in rows {
        s += &format!("{name},{mean},{std},{n}\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn two_task(a11: f64, a21: f64, a22: f64) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![a11], vec![a21, a22]]).unwrap()
    }

    #[test]
    fn a_last_cases() {
        assert!((a_last(&two_task(0.1, 0.5, 0.7)).unwrap() - 0.6).abs() < 1e-15);
        let ones = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0; 2], vec![1.0; 3]]).unwrap();
        assert_eq!(a_last(&ones).unwrap(), 1.0);
        let mut partial = AccuracyMatrix::new(2);
        partial.push_row(vec![0.5]).unwrap();
        assert!(matches!(a_last(&partial), Err(Error::Contract(_))));
    }

    #[test]
    fn f_last_cases() {
        assert!((f_last(&two_task(0.6, 0.8, 0.3)).unwrap() + 0.2).abs() < 1e-15);
        assert!((f_last(&two_task(0.8, 0.6, 0.3)).unwrap() - 0.2).abs() < 1e-15);
        let single = AccuracyMatrix::from_rows(vec![vec![0.4]]).unwrap();
        assert_eq!(f_last(&single).unwrap(), 0.0);
    }

    #[test]
    fn a_auc_cases() {
        let mut r = AucRecorder::new();
        assert!(a_auc(&r).is_err());
        r.push(100, 0.9).unwrap();
        assert_eq!(a_auc(&r).unwrap(), 0.9);
        let mut r = AucRecorder::new();
        r.push(100, 0.0).unwrap();
        r.push(200, 1.0).unwrap();
        assert_eq!(a_auc(&r).unwrap(), 0.5);
        assert!(r.push(300, 1.5).is_err());
        assert_eq!(anytime_csv(&r), "samples_seen,accuracy\n100,0\n200,1\n");
    }

    #[test]
    fn matrix_shape_contract() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5, -0.1]).is_err());
        m.push_row(vec![0.5, 0.2]).unwrap();
        assert!(m.push_row(vec![0.0; 3]).is_err());
        assert_eq!(m.get(1, 1), Some(0.2));
        assert_eq!(m.get(0, 1), None);
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate_seeds(&[0.8]).unwrap(), (0.8, 0.0));
        let (m, s) = aggregate_seeds(&[0.6, 0.8]).unwrap();
        assert!((m - 0.7).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert!(aggregate_seeds(&[]).is_err());
        // 40-digit reference evaluation of the same five values.
        let (m, s) = aggregate_seeds(&[0.8731, 0.8512, 0.8803, 0.8647, 0.8690]).unwrap();
        assert!((m - 0.86766).abs() < 1e-12);
        assert!((s - 0.009_704_143_444_941_445).abs() < 1e-12);
    }

    #[test]
    fn csv_layouts() {
        assert_eq!(
            metrics_csv(&[(3, "a_last", 0.5)]),
            "seed,metric,value\n3,a_last,0.5\n"
        );
        assert_eq!(
            aggregate_csv(&[("a_auc", 0.25, 0.0, 2)]),
            "metric,mean,std,seeds\na_auc,0.25,0,2\n"
        );
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..7).prop_flat_map(|t| {
            (0..t)
                .map(|r| proptest::collection::vec(0.0..=1.0f64, r + 1))
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn metric_ranges(rows in matrix_strategy()) {
            let m = AccuracyMatrix::from_rows(rows).unwrap();
            let a = a_last(&m).unwrap();
            let f = f_last(&m).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((-1.0..=1.0).contains(&f));
        }

        #[test]
        fn constant_columns_do_not_forget(cols in proptest::collection::vec(0.0..=1.0f64, 1..7)) {
            let t = cols.len();
            let rows = (0..t).map(|r| cols[..=r].to_vec()).collect();
            let m = AccuracyMatrix::from_rows(rows).unwrap();
            prop_assert_eq!(f_last(&m).unwrap(), 0.0);
        }

        #[test]
        fn constant_auc(c in 0.0..=1.0f64, n in 1usize..40) {
            let mut r = AucRecorder::new();
            for i in 0..n {
                r.push(i, c).unwrap();
            }
            prop_assert!((a_auc(&r).unwrap() - c).abs() <= 1e-13);
        }
    }
}
