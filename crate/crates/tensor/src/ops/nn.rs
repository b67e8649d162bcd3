use crate::element::Float;
use crate::error::{dim_err, shape_err, Result, TensorError};
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Float> Var<'g, T> {
    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_lastdim(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        if !xv.all_finite() {
            return Err(TensorError::Numeric {
                op: "softmax_lastdim",
                msg: "input contains NaN or infinity".into(),
            });
        }
        let shape = xv.shape().to_vec();
        let width = *shape.last().expect("rank >= 1");
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            let inv = T::one() / total;
            for v in &mut out[start..] {
                *v *= inv;
            }
        }
        let y = std::rc::Rc::new(Tensor::new(&shape, out)?);
        let ys = y.clone();
        Ok(self.graph().record(y, &[self], move |g| {
            let mut dx = Vec::with_capacity(ys.numel());
            for (grow, yrow) in g.data().chunks(width).zip(ys.data().chunks(width)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
            }
            vec![Some(Tensor::new(&shape, dx).expect("softmax shape"))]
        }))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance
    /// (`eps` added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let width = *shape.last().expect("rank >= 1");
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [width] || bv.shape() != [width] {
            return Err(shape_err("layer_norm", &shape, gv.shape()));
        }
        if width == 0 {
            return Err(dim_err("layer_norm", "empty feature axis"));
        }
        let rows = xv.numel() / width;
        let inv_w = T::one() / T::lit(width as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(width) {
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let (gd, bd) = (gv.data(), bv.data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gd[i % width] + bd[i % width])
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.graph().record(value, &[self, gain, bias], move |g| {
            let gdat = g.data();
            let gain = gv.data();
            let mut dx = Vec::with_capacity(gdat.len());
            let mut dgain = vec![T::zero(); width];
            let mut dbias = vec![T::zero(); width];
            for r in 0..rows {
                let gr = &gdat[r * width..(r + 1) * width];
                let hr = &xhat[r * width..(r + 1) * width];
                let mut mean_gh = T::zero();
                let mut mean_g = T::zero();
                for j in 0..width {
                    let gg = gr[j] * gain[j];
                    mean_g += gg;
                    mean_gh += gg * hr[j];
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                }
                mean_g *= inv_w;
                mean_gh *= inv_w;
                let is = inv_std[r];
                dx.extend((0..width).map(|j| is * (gr[j] * gain[j] - mean_g - hr[j] * mean_gh)));
            }
            vec![
                Some(Tensor::new(&shape, dx).expect("input shape")),
                Some(Tensor::new(&[width], dgain).expect("gain shape")),
                Some(Tensor::new(&[width], dbias).expect("bias shape")),
            ]
        }))
    }
}
