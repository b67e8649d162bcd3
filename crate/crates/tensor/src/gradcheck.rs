//! Central finite-difference checks of analytic gradients.

use crate::element::Float;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Check at most this many coordinates per input, spread evenly.
    pub max_coords: Option<usize>,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding do not report huge relative errors.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords: None,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

fn coordinates(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n && k > 0 => {
            let mut idx: Vec<usize> = (0..k).map(|i| i * (n - 1) / (k - 1).max(1)).collect();
            idx.dedup();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn evaluate<T: Float, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    Ok(f(&g, &vars)?.item().as_f64())
}

/// Compares the gradient of the scalar built by `f` against central
/// differences, elementwise over every input.
pub fn grad_check<T: Float, F>(f: F, inputs: &[Tensor<T>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
            .collect()
    };
    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in coordinates(input.numel(), opts.max_coords) {
            let x0 = input.data()[idx];
            probe[which].data_mut()[idx] = x0 + T::lit(opts.step);
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[idx] = x0 - T::lit(opts.step);
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            let exact = analytic[which].data()[idx].as_f64();
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((which, idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.7);
        let x = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64).sin());
        let report = grad_check(
            |_, v| Ok(v[0].matmul(v[1])?.sum()),
            &[x, w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 18);
    }

    #[test]
    fn coordinate_subsampling_keeps_endpoints() {
        assert_eq!(coordinates(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(coordinates(3, Some(5)), vec![0, 1, 2]);
    }
}
