use crate::element::{gemm, Float};
use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// How the leading (batch) dims of the two matmul operands pair up.
#[derive(Clone, Copy)]
enum Batching {
    /// Equal leading dims, `count` independent products.
    Paired(usize),
    /// Rhs is a plain matrix shared by every lhs batch; lhs rows are folded.
    SharedRhs,
    /// Lhs is a plain matrix shared by `count` rhs batches.
    SharedLhs(usize),
}

impl<'g, T: Float> Var<'g, T> {
    /// `[..., p, q] x [..., q, r] -> [..., p, r]`. Leading dims must match, or
    /// one side must be a plain matrix.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let av = self.value();
        let bv = rhs.value();
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (batching, lead) = if lead_a == lead_b {
            (Batching::Paired(lead_a.iter().product()), lead_a.to_vec())
        } else if lead_b.is_empty() {
            (Batching::SharedRhs, lead_a.to_vec())
        } else if lead_a.is_empty() {
            (Batching::SharedLhs(lead_b.iter().product()), lead_b.to_vec())
        } else {
            return Err(shape_err("matmul", &sa, &sb));
        };
        let mut out_shape = lead;
        out_shape.extend([p, r]);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_len];
        let (ad, bd) = (av.data(), bv.data());
        match batching {
            Batching::Paired(n) => {
                for i in 0..n {
                    gemm(
                        p,
                        q,
                        r,
                        &ad[i * p * q..],
                        false,
                        &bd[i * q * r..],
                        false,
                        T::zero(),
                        &mut out[i * p * r..(i + 1) * p * r],
                    );
                }
            }
            Batching::SharedRhs => {
                let rows = av.numel() / q;
                gemm(rows, q, r, ad, false, bd, false, T::zero(), &mut out);
            }
            Batching::SharedLhs(n) => {
                for i in 0..n {
                    gemm(
                        p,
                        q,
                        r,
                        ad,
                        false,
                        &bd[i * q * r..],
                        false,
                        T::zero(),
                        &mut out[i * p * r..(i + 1) * p * r],
                    );
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let (a_req, b_req) = (self.requires_grad(), rhs.requires_grad());
        Ok(self.graph().record(value, &[self, rhs], move |g| {
            let gd = g.data();
            let (ad, bd) = (av.data(), bv.data());
            let mut da = a_req.then(|| vec![T::zero(); ad.len()]);
            let mut db = b_req.then(|| vec![T::zero(); bd.len()]);
            match batching {
                Batching::Paired(n) => {
                    for i in 0..n {
                        let gi = &gd[i * p * r..];
                        if let Some(da) = da.as_mut() {
                            // dA = G B^T
                            gemm(p, r, q, gi, false, &bd[i * q * r..], true, T::zero(), &mut da[i * p * q..(i + 1) * p * q]);
                        }
                        if let Some(db) = db.as_mut() {
                            // dB = A^T G
                            gemm(q, p, r, &ad[i * p * q..], true, gi, false, T::zero(), &mut db[i * q * r..(i + 1) * q * r]);
                        }
                    }
                }
                Batching::SharedRhs => {
                    let rows = ad.len() / q;
                    if let Some(da) = da.as_mut() {
                        gemm(rows, r, q, gd, false, bd, true, T::zero(), da);
                    }
                    if let Some(db) = db.as_mut() {
                        gemm(q, rows, r, ad, true, gd, false, T::zero(), db);
                    }
                }
                Batching::SharedLhs(n) => {
                    for i in 0..n {
                        let gi = &gd[i * p * r..];
                        if let Some(da) = da.as_mut() {
                            gemm(p, r, q, gi, false, &bd[i * q * r..], true, T::one(), da);
                        }
                        if let Some(db) = db.as_mut() {
                            gemm(q, p, r, ad, true, gi, false, T::zero(), &mut db[i * q * r..(i + 1) * q * r]);
                        }
                    }
                }
            }
            vec![
                da.map(|d| Tensor::new(av.shape(), d).expect("lhs shape")),
                db.map(|d| Tensor::new(bv.shape(), d).expect("rhs shape")),
            ]
        }))
    }
}
