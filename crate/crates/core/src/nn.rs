//! Parameter storage and the small layers the network is assembled from.

use ac2d_tensor::{Conv2dSpec, Float, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Registers every tensor as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.values.iter().map(|v| graph.leaf(v.clone())).collect()
    }

    /// Replaces values by name; shapes must agree.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, value) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Version(format!("checkpoint tensor {name} is not in the model")))?;
            if value.shape() != self.get(id).shape() {
                return Err(Error::Version(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }
}

/// Creates parameters under a name prefix.
pub struct Builder<'a, T: Float, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Float, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<F, O>(&mut self, name: &str, f: F) -> O
    where
        F: FnOnce(&mut Self) -> O,
    {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = format!("{}{name}", self.prefix);
        self.store.add(full, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::ones(shape))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// `[in, out]`
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(b: &mut Builder<T, R>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        b.scoped(name, |b| Self {
            weight: b.normal("weight", &[din, dout], 0.02),
            bias: bias.then(|| b.zeros("bias", &[dout])),
        })
    }

    pub fn zeroed<T: Float, R: Rng>(b: &mut Builder<T, R>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        b.scoped(name, |b| Self {
            weight: b.zeros("weight", &[din, dout]),
            bias: bias.then(|| b.zeros("bias", &[dout])),
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(p[self.weight.0])?;
        Ok(match self.bias {
            Some(b) => y.add(p[b.0])?,
            None => y,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Float, R: Rng>(b: &mut Builder<T, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Self {
            gain: b.ones("weight", &[dim]),
            bias: b.zeros("bias", &[dim]),
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.layer_norm(p[self.gain.0], p[self.bias.0], T::lit(LN_EPS))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    /// `cin_g` is the input channel count seen by each group.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        cout: usize,
        cin_g: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let fan_out = kernel * kernel * cout / spec.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        b.scoped(name, |b| Self {
            weight: b.normal("weight", &[cout, cin_g, kernel, kernel], std),
            bias: b.zeros("bias", &[cout]),
            spec,
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv2d(p[self.weight.0], Some(p[self.bias.0]), self.spec)?)
    }
}

/// `[B, C, H, W]` to `[B, H*W, C]`.
pub fn to_tokens<'g, T: Float>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
}

/// `[B, H*W, C]` to `[B, C, H, W]`.
pub fn to_map<'g, T: Float>(x: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s[1] != h * w {
        return Err(Error::Config(format!("{} tokens do not form a {h}x{w} grid", s[1])));
    }
    Ok(x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])?)
}
