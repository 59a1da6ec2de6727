//! Character accuracy (precision), recall and word accuracy over decoded
//! transcriptions.
//!
//! Character matches come from a minimum edit-distance alignment with unit
//! costs. Among minimum-cost alignments the one with the most matches is
//! used, so TP does not depend on backtrace tie-breaking.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl std::ops::AddAssign for CharCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Aligns `gt` against `pred` and counts matched, spurious and missed
/// characters. Substitutions count once as FP and once as FN.
pub fn char_alignment<T: PartialEq>(gt: &[T], pred: &[T]) -> CharCounts {
    let (n, m) = (gt.len(), pred.len());
    // (cost, -matches) compared lexicographically; a flat row-major table.
    let w = m + 1;
    let mut dp = vec![(0usize, 0isize); (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = (i, 0);
    }
    for j in 0..=m {
        dp[j] = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (dc, dm) = dp[(i - 1) * w + j - 1];
            let diag = if gt[i - 1] == pred[j - 1] { (dc, dm - 1) } else { (dc + 1, dm) };
            let (ic, im) = dp[i * w + j - 1];
            let (xc, xm) = dp[(i - 1) * w + j];
            dp[i * w + j] = diag.min((ic + 1, im)).min((xc + 1, xm));
        }
    }
    let tp = (-dp[n * w + m].1) as u64;
    CharCounts {
        tp,
        fp: m as u64 - tp,
        fn_: n as u64 - tp,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub char_accuracy: f64,
    pub word_accuracy: f64,
    pub recall: f64,
    pub counts: CharCounts,
    pub exact: u64,
    pub samples: u64,
}

/// Accumulates alignment counts over an evaluation set (micro-averaging).
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    counts: CharCounts,
    exact: u64,
    samples: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: PartialEq>(&mut self, gt: &[T], pred: &[T]) {
        self.counts += char_alignment(gt, pred);
        self.exact += u64::from(gt == pred);
        self.samples += 1;
    }

    pub fn finish(&self) -> EvalResult {
        EvalResult {
            char_accuracy: char_accuracy(&self.counts),
            word_accuracy: ratio(self.exact, self.samples),
            recall: recall(&self.counts),
            counts: self.counts,
            exact: self.exact,
            samples: self.samples,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `TP / (TP + FP)`; zero when nothing was predicted.
pub fn char_accuracy(c: &CharCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// `TP / (TP + FN)`; zero for an empty ground truth.
pub fn recall(c: &CharCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// Fraction of samples transcribed exactly.
pub fn word_accuracy<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let exact = pairs.iter().filter(|(g, p)| g == p).count();
    ratio(exact as u64, pairs.len() as u64)
}

pub fn evaluate_pairs<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> EvalResult {
    let mut acc = MetricsAccumulator::new();
    for (g, p) in pairs {
        acc.add(g, p);
    }
    acc.finish()
}
