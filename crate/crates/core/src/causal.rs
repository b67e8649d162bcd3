//! Backdoor-adjusted prediction heads and the per-AU prototype banks.

use ac2d_tensor::{Float, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankPolicy {
    /// Snapshot refreshed before every mini-batch.
    Dynamic,
    /// Snapshot refreshed at the end of every epoch.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum CausalMode {
    /// The bank is summarized by its mean alone.
    Literal,
    /// The bank is summarized by `entries` k-means centroids.
    Dictionary { entries: usize },
}

/// Per-sample features of one AU, with a running mean over populated slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub au: u32,
    dim: usize,
    slots: Vec<Option<Vec<f32>>>,
    sum: Vec<f64>,
    populated: usize,
    snapshot: Vec<Vec<f32>>,
}

impl PrototypeBank {
    pub fn new(au: u32, slots: usize, dim: usize) -> Self {
        Self {
            au,
            dim,
            slots: vec![None; slots],
            sum: vec![0.0; dim],
            populated: 0,
            snapshot: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn populated(&self) -> usize {
        self.populated
    }

    pub fn slot(&self, id: usize) -> Option<&[f32]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }

    pub fn update(&mut self, sample_id: usize, feature: &[f32]) -> Result<()> {
        if sample_id >= self.slots.len() {
            return Err(Error::Index {
                what: "prototype bank",
                index: sample_id,
                len: self.slots.len(),
            });
        }
        if feature.len() != self.dim {
            return Err(Error::Config(format!(
                "feature of width {} for a bank of width {}",
                feature.len(),
                self.dim
            )));
        }
        match &self.slots[sample_id] {
            Some(old) => {
                for (s, o) in self.sum.iter_mut().zip(old) {
                    *s -= *o as f64;
                }
            }
            None => self.populated += 1,
        }
        for (s, v) in self.sum.iter_mut().zip(feature) {
            *s += *v as f64;
        }
        self.slots[sample_id] = Some(feature.to_vec());
        Ok(())
    }

    /// Running mean over populated slots.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.populated == 0 {
            return Err(Error::State(format!("prototype bank for AU{} is empty", self.au)));
        }
        let n = self.populated as f64;
        Ok(self.sum.iter().map(|s| s / n).collect())
    }

    /// Mean recomputed from the slots, independent of the running sum.
    pub fn recomputed_mean(&self) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for s in self.slots.iter().flatten() {
            n += 1;
            for (a, v) in acc.iter_mut().zip(s) {
                *a += *v as f64;
            }
        }
        if n == 0 {
            return Err(Error::State(format!("prototype bank for AU{} is empty", self.au)));
        }
        Ok(acc.into_iter().map(|a| a / n as f64).collect())
    }

    /// Takes the summary the heads will read until the next refresh.
    pub fn refresh<R: Rng>(&mut self, mode: CausalMode, rng: &mut R) -> Result<()> {
        self.snapshot = match mode {
            CausalMode::Literal => vec![self.mean()?.into_iter().map(|v| v as f32).collect()],
            CausalMode::Dictionary { entries } => {
                let points: Vec<&[f32]> = self.slots.iter().flatten().map(|s| s.as_slice()).collect();
                if points.is_empty() {
                    return Err(Error::State(format!("prototype bank for AU{} is empty", self.au)));
                }
                kmeans(&points, entries, 25, rng)
            }
        };
        Ok(())
    }

    /// Summary entries `[M, dim]` for the forward pass.
    pub fn entries<T: Float>(&self) -> Result<Tensor<T>> {
        if self.snapshot.is_empty() {
            return Err(Error::State(format!(
                "prototype bank for AU{} has not been populated",
                self.au
            )));
        }
        let flat: Vec<f64> = self.snapshot.iter().flatten().map(|&v| v as f64).collect();
        Ok(Tensor::from_f64(&[self.snapshot.len(), self.dim], &flat)?)
    }

    pub fn snapshot(&self) -> &[Vec<f32>] {
        &self.snapshot
    }

    pub fn set_snapshot(&mut self, snapshot: Vec<Vec<f32>>) -> Result<()> {
        if snapshot.iter().any(|e| e.len() != self.dim) {
            return Err(Error::Version("bank snapshot width mismatch".into()));
        }
        self.snapshot = snapshot;
        Ok(())
    }

    pub fn slots(&self) -> &[Option<Vec<f32>>] {
        &self.slots
    }
}

/// Lloyd iterations from a k-means++ start; deterministic given `rng`.
pub fn kmeans<R: Rng>(points: &[&[f32]], k: usize, iters: usize, rng: &mut R) -> Vec<Vec<f32>> {
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
    };
    let k = k.max(1).min(points.len());
    let mut centers: Vec<Vec<f32>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist(p, c)).fold(f64::MAX, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut t = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if t < *di {
                pick = i;
                break;
            }
            t -= di;
        }
        centers.push(points[pick].to_vec());
    }
    let dim = points[0].len();
    for _ in 0..iters {
        let mut acc = vec![vec![0.0f64; dim]; centers.len()];
        let mut count = vec![0usize; centers.len()];
        for p in points {
            let (best, _) = centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, dist(p, c)))
                .fold((0, f64::MAX), |a, b| if b.1 < a.1 { b } else { a });
            count[best] += 1;
            for (a, v) in acc[best].iter_mut().zip(p.iter()) {
                *a += *v as f64;
            }
        }
        let mut moved = false;
        for (c, (a, n)) in centers.iter_mut().zip(acc.iter().zip(&count)) {
            if *n == 0 {
                continue;
            }
            for (cv, av) in c.iter_mut().zip(a) {
                let nv = (av / *n as f64) as f32;
                moved |= nv != *cv;
                *cv = nv;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

/// Linear intervention head. Matrices are stored `[8c, c]` and applied as
/// `f Wᵀ`; the final layer is `[outputs, 8c]` with a bias. Without
/// intervention the head is a single `[outputs, c]` layer.
#[derive(Debug, Clone, Copy)]
pub struct InterventionHead {
    pub w_x: Option<ParamId>,
    pub w_z: Option<ParamId>,
    pub w_q: Option<ParamId>,
    pub w_k: Option<ParamId>,
    pub fin: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

/// Outputs of one head call.
pub struct HeadOutput<'g, T: Float> {
    /// `[B, outputs]`
    pub logits: Var<'g, T>,
    /// `[B, M]` when the head intervenes.
    pub alpha: Option<Var<'g, T>>,
    pub expectation: Option<Var<'g, T>>,
}

impl InterventionHead {
    pub fn new<T: Float, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        dim: usize,
        outputs: usize,
        intervene: bool,
    ) -> Self {
        let hidden = if intervene { 8 * dim } else { dim };
        let std = 1.0 / (dim as f64).sqrt();
        b.scoped(name, |b| Self {
            w_x: intervene.then(|| b.normal("w_x", &[hidden, dim], std)),
            w_z: intervene.then(|| b.normal("w_z", &[hidden, dim], std)),
            w_q: intervene.then(|| b.normal("w_q", &[hidden, dim], std)),
            w_k: intervene.then(|| b.normal("w_k", &[hidden, dim], std)),
            fin: b.zeros("final", &[outputs, hidden]),
            bias: b.zeros("final_bias", &[outputs]),
            dim,
        })
    }

    pub fn intervenes(&self) -> bool {
        self.w_z.is_some()
    }

    /// `f` is `[B, c]`; `entries` is the bank summary `[M, c]` (ignored without intervention).
    pub fn forward<'g, T: Float>(
        &self,
        p: &[Var<'g, T>],
        f: Var<'g, T>,
        entries: Option<Var<'g, T>>,
    ) -> Result<HeadOutput<'g, T>> {
        let lin = |w: ParamId, x: Var<'g, T>| -> Result<Var<'g, T>> { Ok(x.matmul(p[w.0].transpose_last()?)?) };
        let (mut h, mut alpha, mut expectation) = (f, None, None);
        if let (Some(w_x), Some(w_z), Some(w_q), Some(w_k)) = (self.w_x, self.w_z, self.w_q, self.w_k) {
            let z = entries.ok_or_else(|| Error::State("intervention head needs bank entries".into()))?;
            let (a, ez) = confounder_expectation(lin(w_q, f)?, lin(w_k, z)?, z)?;
            h = lin(w_x, f)?.add(lin(w_z, ez)?)?;
            alpha = Some(a);
            expectation = Some(ez);
        }
        let logits = lin(self.fin, h)?.add(p[self.bias.0])?;
        Ok(HeadOutput {
            logits,
            alpha,
            expectation,
        })
    }
}

/// `α = softmax(Q Kᵀ / sqrt(width))`, `E_z = α Z` for queries `[B, w]`,
/// keys `[M, w]` and entries `[M, c]`.
pub fn confounder_expectation<'g, T: Float>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    entries: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let width = *q.shape().last().unwrap();
    let alpha = q
        .matmul(k.transpose_last()?)?
        .scale(T::lit(1.0 / (width as f64).sqrt()))
        .softmax_lastdim()?;
    let ez = alpha.matmul(entries)?;
    Ok((alpha, ez))
}
