use crate::element::Float;
use crate::error::{dim_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Float> Var<'g, T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let xv = self.value();
        let total = xv.sum();
        let shape = xv.shape().to_vec();
        self.graph()
            .record(Tensor::scalar(total), &[self], move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Var<'g, T> {
        let n = T::lit(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Mean over one axis; the axis is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn mean_dim(self, dim: usize) -> Result<Var<'g, T>> {
        let n = self.shape().get(dim).copied().unwrap_or(1);
        Ok(self.sum_dim(dim)?.scale(T::one() / T::lit(n as f64)))
    }

    pub fn sum_dim(self, dim: usize) -> Result<Var<'g, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if dim >= shape.len() {
            return Err(dim_err("sum_dim", format!("axis {dim} out of range for {shape:?}")));
        }
        let outer: usize = shape[..dim].iter().product();
        let len = shape[dim];
        let inner: usize = shape[dim + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(dim);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.graph().record(value, &[self], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for l in 0..len {
                    dx[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(Tensor::new(&shape, dx).expect("input shape"))]
        }))
    }
}
