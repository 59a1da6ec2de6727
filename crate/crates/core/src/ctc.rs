//! Connectionist Temporal Classification: loss, gradient, greedy decoding and
//! an exhaustive-enumeration oracle.
//!
//! Class 0 is the blank. Inputs are per-timestep log-probabilities laid out
//! as a row-major `[T, classes]` matrix.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: u32 = 0;

/// A target transcription: class indices, never the blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSeq(Vec<u32>);

impl LabelSeq {
    pub fn new(labels: Vec<u32>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::Contract("label sequence contains the blank class".into()));
        }
        Ok(LabelSeq(labels))
    }

    pub fn empty() -> Self {
        LabelSeq(Vec::new())
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for LabelSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

/// Number of adjacent equal pairs; each needs a separating blank.
pub fn adjacent_repeats(label: &[u32]) -> usize {
    label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Shortest number of timesteps any alignment of `label` needs.
pub fn min_timesteps(label: &[u32]) -> usize {
    label.len() + adjacent_repeats(label)
}

pub fn check_feasible(label: &[u32], timesteps: usize) -> Result<()> {
    if min_timesteps(label) > timesteps {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: adjacent_repeats(label),
            timesteps,
            sample: None,
        });
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn validate(log_probs: &[f64], t: usize, classes: usize, label: &[u32]) -> Result<()> {
    if log_probs.len() != t * classes || t == 0 || classes < 2 {
        return Err(Error::Shape(format!(
            "ctc needs a [T>=1, classes>=2] matrix, got {} values for T={t}, classes={classes}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = label.iter().find(|&&l| l == BLANK || l as usize >= classes) {
        return Err(Error::Contract(format!(
            "label class {bad} outside 1..{classes}"
        )));
    }
    check_feasible(label, t)
}

/// Runs the log-domain forward recursion and the matching backward
/// recursion. Returns the loss `-ln P(label)` and its gradient with respect
/// to every entry of `log_probs`.
pub fn forward_backward(log_probs: &[f64], t_len: usize, classes: usize, label: &[u32]) -> Result<(f64, Vec<f64>)> {
    validate(log_probs, t_len, classes, label)?;
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(label.iter().flat_map(|&l| [l, BLANK]))
        .map(|c| c as usize)
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, c: usize| log_probs[t * classes + c];
    // A state may be entered from two back when it is a label that differs
    // from the label two positions earlier.
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK as usize && ext[s] != ext[s - 2])
        .collect();

    let neg = f64::NEG_INFINITY;
    // alpha[t][s]: log prob of prefixes ending in state s at t, emissions up
    // to and including t.
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip[s] {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == neg { neg } else { acc + lp(t, ext[s]) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite(format!("ctc log-likelihood is {log_p}")));
    }

    // beta[t][s]: log prob of completing the label from state s at t,
    // emissions strictly after t.
    let mut beta = vec![neg; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip[s + 2] {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > neg {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `-ln P(label | log_probs)` for a `[T, classes]` log-probability matrix.
pub fn ctc_loss(log_probs: &Tensor, label: &[u32]) -> Result<f64> {
    let (t, k) = dims(log_probs)?;
    forward_backward(log_probs.data(), t, k, label).map(|(loss, _)| loss)
}

fn dims(log_probs: &Tensor) -> Result<(usize, usize)> {
    match log_probs.shape() {
        &[t, k] => Ok((t, k)),
        s => Err(Error::Shape(format!("expected [T, classes], got {s:?}"))),
    }
}

pub const ORACLE_MAX_T: usize = 6;
pub const ORACLE_MAX_ALPHABET: usize = 4;

/// Reference loss by brute force: sums the probability of every one of the
/// `classes^T` paths that collapses to `label`.
pub fn ctc_oracle(log_probs: &Tensor, label: &[u32]) -> Result<f64> {
    let (t_len, classes) = dims(log_probs)?;
    if t_len > ORACLE_MAX_T || classes > ORACLE_MAX_ALPHABET + 1 {
        return Err(Error::Contract(format!(
            "enumeration limited to T <= {ORACLE_MAX_T} and alphabet <= {ORACLE_MAX_ALPHABET}"
        )));
    }
    let lp = log_probs.data();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(path.iter().map(|&c| c as u32)) == label {
            let log_path: f64 = path.iter().enumerate().map(|(t, &c)| lp[t * classes + c]).sum();
            total += log_path.exp();
        }
        // Odometer increment over all paths.
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    if total == 0.0 {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: adjacent_repeats(label),
            timesteps: t_len,
            sample: None,
        });
    }
    Ok(-total.ln())
}

/// Merges runs of equal classes, then drops blanks.
pub fn collapse(path: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Per-timestep argmax of a `[T, classes]` matrix; ties go to the lowest
/// class index.
pub fn best_path(log_probs: &Tensor) -> Result<Vec<u32>> {
    let (_, k) = dims(log_probs)?;
    Ok(log_probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Best-path decoding: argmax per timestep, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Result<LabelSeq> {
    Ok(LabelSeq(collapse(best_path(log_probs)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, k: usize) -> Tensor {
        Tensor::full([t, k], -(k as f64).ln())
    }

    #[test]
    fn certain_single_path_has_zero_loss() {
        let lp = Tensor::new([1, 2], vec![f64::ln(1e-300), 0.0]).unwrap();
        assert_eq!(ctc_loss(&lp, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_two_step_examples() {
        let lp = uniform(2, 3);
        assert!((ctc_loss(&lp, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((ctc_loss(&lp, &[1, 2]).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((ctc_oracle(&lp, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((ctc_oracle(&lp, &[1, 2]).unwrap() - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_all_blank_path() {
        let lp = Tensor::new([2, 3], vec![(0.5f64).ln(), (0.25f64).ln(), (0.25f64).ln(), (0.2f64).ln(), (0.4f64).ln(), (0.4f64).ln()]).unwrap();
        let expected = -(0.5f64 * 0.2).ln();
        assert!((ctc_loss(&lp, &[]).unwrap() - expected).abs() < 1e-12);
        assert!((ctc_oracle(&lp, &[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_labels_error_in_both_routes() {
        let lp = uniform(2, 3);
        assert!(matches!(ctc_loss(&lp, &[1, 1]), Err(Error::InfeasibleLabel { .. })));
        assert!(matches!(ctc_oracle(&lp, &[1, 1]), Err(Error::InfeasibleLabel { .. })));
        assert!(matches!(ctc_loss(&lp, &[1, 2, 1]), Err(Error::InfeasibleLabel { .. })));
        assert!(matches!(ctc_oracle(&lp, &[1, 2, 1]), Err(Error::InfeasibleLabel { .. })));
    }

    #[test]
    fn oracle_enforces_enumeration_bounds() {
        assert!(matches!(ctc_oracle(&uniform(7, 3), &[1]), Err(Error::Contract(_))));
        assert!(matches!(ctc_oracle(&uniform(3, 6), &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn labels_must_not_contain_blank_or_overflow() {
        assert!(LabelSeq::new(vec![1, 0]).is_err());
        assert!(ctc_loss(&uniform(3, 3), &[3]).is_err());
    }

    fn from_path(path: &[u32], k: usize) -> Tensor {
        let mut data = vec![-5.0; path.len() * k];
        for (t, &c) in path.iter().enumerate() {
            data[t * k + c as usize] = 0.0;
        }
        Tensor::new([path.len(), k], data).unwrap()
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(&*greedy_decode(&from_path(&[1, 1, 0, 1], 3)).unwrap(), &[1, 1]);
        assert!(greedy_decode(&from_path(&[0, 0, 0], 3)).unwrap().is_empty());
        assert_eq!(&*greedy_decode(&from_path(&[1, 0, 1], 3)).unwrap(), &[1, 1]);
        assert_eq!(&*greedy_decode(&from_path(&[1, 1, 2], 3)).unwrap(), &[1, 2]);
    }

    #[test]
    fn argmax_ties_break_low() {
        let lp = Tensor::full([2, 3], -1.0);
        assert_eq!(best_path(&lp).unwrap(), vec![0, 0]);
    }
}
