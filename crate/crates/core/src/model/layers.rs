//! Parameterised building blocks shared by the sub-networks.

use rand_chacha::ChaCha8Rng;

use crate::nn::{attention, conv3d, ops, Bound, ConvGeom, Init, ParamId, ParamStore, Var};

/// Registers parameters under a dotted name prefix.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, shape, init, self.rng)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    geom: ConvGeom,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Self {
        let k = geom.k;
        let mut s = b.scope(name);
        let w = s.param("w", &[cout, cin, k, k, k], Init::He { fan_in: cin * k * k * k });
        let b = bias.then(|| s.param("b", &[cout], Init::Zeros));
        Self { w, b, geom }
    }

    pub fn apply(&self, p: &Bound, x: &Var) -> Var {
        conv3d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.geom)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.param("w", &[fan_out, fan_in], Init::Xavier { fan_in, fan_out });
        let b = s.param("b", &[fan_out], Init::Zeros);
        Self { w, b }
    }

    pub fn apply(&self, p: &Bound, x: &Var) -> Var {
        ops::linear(x, p.get(self.w), Some(p.get(self.b)))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Affine parameters for layer or instance normalisation.
#[derive(Debug, Clone)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let mut s = b.scope(name);
        Self { g: s.param("g", &[c], Init::Ones), b: s.param("b", &[c], Init::Zeros) }
    }

    /// Over the feature axis of tokens `[T, C]`.
    pub fn layer(&self, p: &Bound, x: &Var) -> Var {
        ops::layer_norm(x, p.get(self.g), p.get(self.b))
    }

    /// Over the spatial extent of `[C, D, H, W]`.
    pub fn instance(&self, p: &Bound, x: &Var) -> Var {
        ops::instance_norm(x, p.get(self.g), p.get(self.b))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        let mut s = b.scope(name);
        Self { l1: Linear::new(&mut s, "fc1", fan_in, hidden), l2: Linear::new(&mut s, "fc2", hidden, fan_out) }
    }

    pub fn apply(&self, p: &Bound, x: &Var) -> Var {
        self.l2.apply(p, &ops::gelu(&self.l1.apply(p, x)))
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            o: Linear::new(&mut s, "o", dim, dim),
            heads,
        }
    }

    pub fn apply(&self, p: &Bound, q: &Var, k: &Var, v: &Var) -> Var {
        let a = attention(&self.q.apply(p, q), &self.k.apply(p, k), &self.v.apply(p, v), self.heads);
        self.o.apply(p, &a)
    }

    pub fn output(&self) -> &Linear {
        &self.o
    }
}

pub(crate) fn act(x: &Var) -> Var {
    ops::leaky_relu(x, 0.01)
}
