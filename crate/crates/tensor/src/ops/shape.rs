use crate::element::Float;
use crate::error::{dim_err, shape_err, Result};
use crate::graph::Var;
use crate::tensor::{numel, strides_of, Tensor};

pub(crate) fn permute_tensor<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input for each output axis
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = x.numel();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], walk[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            base += walk[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= walk[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}

impl<'g, T: Float> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        if numel(shape) != xv.numel() {
            return Err(shape_err("reshape", xv.shape(), shape));
        }
        let in_shape = xv.shape().to_vec();
        let value = (*xv).clone().with_shape(shape);
        Ok(self.graph().record(value, &[self], move |g| {
            vec![Some(g.clone().with_shape(&in_shape))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let rank = xv.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = permute_tensor(&xv, perm);
        Ok(self.graph().record(value, &[self], move |g| {
            vec![Some(permute_tensor(g, &inverse))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(dim_err("transpose_last", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }
}
