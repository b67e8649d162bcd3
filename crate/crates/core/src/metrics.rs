//! Weighted detection loss, total objective and frame-level F1.

use std::fmt::Write as _;

use ac2d_tensor::{Float, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA_A: f64 = 1.28e4;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub n: usize,
    pub occurrences: Vec<usize>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

/// Inverse-frequency AU weights `w` (summing to one) and positive-class
/// weights `v = (N - occ) / occ`. A zero count is treated as one.
pub fn compute_weights(n: usize, occurrences: &[usize]) -> Result<LabelStats> {
    if n == 0 {
        return Err(Error::Usage("label statistics need at least one sample".into()));
    }
    if occurrences.is_empty() {
        return Err(Error::Usage("label statistics need at least one AU".into()));
    }
    if let Some(&bad) = occurrences.iter().find(|&&o| o > n) {
        return Err(Error::Data(format!("occurrence count {bad} exceeds sample count {n}")));
    }
    let safe: Vec<f64> = occurrences
        .iter()
        .enumerate()
        .map(|(j, &o)| {
            if o == 0 {
                log::warn!("AU column {j} never occurs; using a count of 1 for its weights");
                1.0
            } else {
                o as f64
            }
        })
        .collect();
    let nf = n as f64;
    let raw: Vec<f64> = safe.iter().map(|o| nf / o).collect();
    let total: f64 = raw.iter().sum();
    Ok(LabelStats {
        n,
        occurrences: occurrences.to_vec(),
        w: raw.iter().map(|r| r / total).collect(),
        v: safe.iter().map(|o| (nf - o) / o).collect(),
    })
}

impl LabelStats {
    /// Counts positives per column of a row-major `rows × m` label matrix.
    pub fn from_labels(labels: &[Vec<u8>]) -> Result<Self> {
        let m = labels.first().map(|r| r.len()).unwrap_or(0);
        let mut occ = vec![0usize; m];
        for row in labels {
            if row.len() != m {
                return Err(Error::Data("label rows differ in length".into()));
            }
            for (o, &l) in occ.iter_mut().zip(row) {
                *o += (l != 0) as usize;
            }
        }
        compute_weights(labels.len(), &occ)
    }
}

/// Weighted binary cross-entropy averaged over the batch. `probs` and `labels`
/// are `[B, m]`; `w` and `v` have length `m`.
pub fn au_detection_loss<'g, T: Float>(
    probs: Var<'g, T>,
    labels: &Tensor<T>,
    w: &[f64],
    v: &[f64],
) -> Result<Var<'g, T>> {
    let shape = probs.shape();
    if shape.len() != 2 || labels.shape() != shape.as_slice() || w.len() != shape[1] || v.len() != shape[1] {
        return Err(Error::Config(format!(
            "loss over probabilities {shape:?}, labels {:?}, {} weights",
            labels.shape(),
            w.len()
        )));
    }
    let (batch, m) = (shape[0], shape[1]);
    let g = probs.graph();
    let eps = T::lit(PROB_EPS);
    let p = probs.clamp(eps, T::one() - eps);
    let pos = Tensor::from_fn(&[batch, m], |i| labels.data()[i] * T::lit(v[i % m]));
    let neg = labels.map(|l| T::one() - l);
    let per = p
        .ln()
        .mul(g.constant(pos))?
        .add(p.one_minus().ln().mul(g.constant(neg))?)?;
    let wt = Tensor::from_f64(&[m], w)?;
    Ok(per.mul(g.constant(wt))?.sum().scale(T::lit(-1.0 / batch as f64)))
}

pub fn total_loss<'g, T: Float>(lu: Var<'g, T>, la: Option<Var<'g, T>>, lambda_a: f64) -> Result<Var<'g, T>> {
    if lambda_a < 0.0 {
        return Err(Error::Config(format!("negative attention weight {lambda_a}")));
    }
    Ok(match la {
        Some(la) => lu.add(la.scale(T::lit(lambda_a)))?,
        None => lu,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl EvalCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// F1 in percent; zero when precision and recall are both zero.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            200.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub aus: Vec<u32>,
    pub counts: Vec<EvalCounts>,
    pub f1: Vec<f64>,
    pub average: f64,
}

/// Per-AU confusion counts and F1 over row-major `samples × m` predictions.
pub fn f1_frame(aus: &[u32], predictions: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<F1Report> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let m = aus.len();
    let mut counts = vec![EvalCounts::default(); m];
    for (pred, lab) in predictions.iter().zip(labels) {
        if pred.len() != m || lab.len() != m {
            return Err(Error::Data(format!("expected {m} AU columns")));
        }
        for j in 0..m {
            let c = &mut counts[j];
            match (pred[j] >= threshold, lab[j] != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    let f1: Vec<f64> = counts.iter().map(EvalCounts::f1).collect();
    let average = if m == 0 { 0.0 } else { f1.iter().sum::<f64>() / m as f64 };
    Ok(F1Report {
        aus: aus.to_vec(),
        counts,
        f1,
        average,
    })
}

impl F1Report {
    /// Table with one column per AU and an average column, one decimal.
    pub fn table(&self, label: &str) -> String {
        let mut head = format!("{:<10}", "");
        let mut row = format!("{label:<10}");
        for (au, f) in self.aus.iter().zip(&self.f1) {
            let _ = write!(head, "{:>7}", format!("AU{au}"));
            let _ = write!(row, "{f:>7.1}");
        }
        let _ = write!(head, "{:>7}", "Avg");
        let _ = write!(row, "{:>7.1}", self.average);
        format!("{head}\n{row}\n")
    }

    /// `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for (au, f) in self.aus.iter().zip(&self.f1) {
            let _ = writeln!(out, "f1_au{au}={f:.4}");
        }
        let _ = writeln!(out, "f1_avg={:.4}", self.average);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ac2d_tensor::Graph;

    #[test]
    fn equal_counts_give_uniform_weights() {
        let s = compute_weights(50, &[10, 10, 10, 10]).unwrap();
        for w in &s.w {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_weights() {
        assert_eq!(compute_weights(100, &[20]).unwrap().v, vec![4.0]);
        let s = compute_weights(100, &[20, 50]).unwrap();
        assert!((s.w[0] - 5.0 / 7.0).abs() < 1e-15);
        assert!((s.w[1] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(s.v[1], 1.0);
    }

    #[test]
    fn zero_samples_is_usage_error() {
        assert!(matches!(compute_weights(0, &[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_count_falls_back_to_one() {
        let s = compute_weights(10, &[0, 5]).unwrap();
        assert_eq!(s.v, vec![9.0, 1.0]);
    }

    #[test]
    fn half_probability_loss() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 1], &[0.5]).unwrap());
        let y = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let l = au_detection_loss(p, &y, &[1.0], &[1.0]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn certain_predictions_cost_almost_nothing() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = au_detection_loss(p, &y, &[0.5, 0.5], &[2.0, 3.0]).unwrap().item();
        assert!(l >= 0.0 && l < 1e-6);
    }

    #[test]
    fn total_loss_arithmetic() {
        let g = Graph::<f64>::new();
        let lu = g.constant(Tensor::scalar(1.0));
        let la = g.constant(Tensor::scalar(1e-4));
        assert!((total_loss(lu, Some(la), DEFAULT_LAMBDA_A).unwrap().item() - 2.28).abs() < 1e-12);
        assert_eq!(total_loss(lu, Some(la), 0.0).unwrap().item(), 1.0);
    }

    #[test]
    fn f1_worked_example() {
        let preds = vec![vec![0.9], vec![0.8], vec![0.7], vec![0.1], vec![0.2]];
        let labels = vec![vec![1], vec![1], vec![0], vec![1], vec![0]];
        let r = f1_frame(&[1], &preds, &labels, 0.5).unwrap();
        assert_eq!(
            r.counts[0],
            EvalCounts {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert!((r.f1[0] - 200.0 / 3.0).abs() < 1e-12);
        assert!(r.table("x").contains("66.7"));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let labels = vec![vec![1, 0], vec![0, 0]];
        let perfect = f1_frame(&[1, 2], &[vec![1.0, 0.0], vec![0.0, 0.0]], &labels, 0.5).unwrap();
        assert_eq!(perfect.f1, vec![100.0, 0.0]);
    }
}
