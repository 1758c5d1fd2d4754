//! Classification metrics.

/// `matrix[true][pred]` counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub matrix: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize) -> Self {
        assert_eq!(preds.len(), labels.len(), "predictions and labels differ in length");
        let mut matrix = vec![vec![0; classes]; classes];
        for (&p, &y) in preds.iter().zip(labels) {
            matrix[y][p] += 1;
        }
        Self { classes, matrix }
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes).map(|c| self.matrix[c][c]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// F1 of class `c`, `None` when the class is neither predicted nor
    /// present.
    pub fn f1(&self, c: usize) -> Option<f64> {
        let tp = self.matrix[c][c];
        let fp: usize = (0..self.classes).filter(|&r| r != c).map(|r| self.matrix[r][c]).sum();
        let fn_: usize = (0..self.classes).filter(|&p| p != c).map(|p| self.matrix[c][p]).sum();
        let denom = 2 * tp + fp + fn_;
        (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
    }

    /// Unweighted mean of per-class F1 over the classes that occur in either
    /// the labels or the predictions.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = (0..self.classes).filter_map(|c| self.f1(c)).collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let classes = preds.iter().chain(labels).max().map_or(1, |m| m + 1);
    Confusion::new(preds, labels, classes).accuracy()
}

pub fn macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let classes = preds.iter().chain(labels).max().map_or(1, |m| m + 1);
    Confusion::new(preds, labels, classes).macro_f1()
}
