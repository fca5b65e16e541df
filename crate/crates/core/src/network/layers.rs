use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Scalar, TensorResult, Var};

/// Registers named parameters under a hierarchical prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<U>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> TensorResult<U>) -> TensorResult<U> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> TensorResult<ParamId> {
        let name = self.name(leaf);
        self.store.add_normal(name, shape, std, self.rng)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64) -> TensorResult<ParamId> {
        let name = self.name(leaf);
        self.store.add_const(name, shape, v)
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> TensorResult<Linear> {
        self.linear_std(name, cin, cout, (1.0 / cin as f64).sqrt())
    }

    pub fn linear_std(&mut self, name: &str, cin: usize, cout: usize, std: f64) -> TensorResult<Linear> {
        self.scope(name, |b| {
            Ok(Linear {
                w: b.normal("w", &[cin, cout], std)?,
                b: b.constant("b", &[cout], 0.0)?,
            })
        })
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> TensorResult<Conv> {
        self.conv_std(name, k, cin, cout, stride, (1.0 / (k * k * cin) as f64).sqrt())
    }

    pub fn conv_std(
        &mut self,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        std: f64,
    ) -> TensorResult<Conv> {
        let pad = if stride == 1 { k / 2 } else { 0 };
        self.scope(name, |b| {
            Ok(Conv {
                w: b.normal("w", &[k, k, cin, cout], std)?,
                b: b.constant("b", &[cout], 0.0)?,
                stride,
                pad,
            })
        })
    }

    pub fn norm(&mut self, name: &str, c: usize) -> TensorResult<Norm> {
        self.scope(name, |b| {
            Ok(Norm {
                gamma: b.constant("gamma", &[c], 1.0)?,
                beta: b.constant("beta", &[c], 0.0)?,
            })
        })
    }

    /// Pre-norm bottleneck residual block: `x + up(gelu(k3(gelu(down(norm(x))))))`.
    pub fn res_block(&mut self, name: &str, c: usize) -> TensorResult<ResBlock> {
        let mid = (c / 2).max(1);
        self.scope(name, |b| {
            Ok(ResBlock {
                norm: b.norm("norm", c)?,
                down: b.conv("down", 1, c, mid, 1)?,
                mid: b.conv("mid", 3, mid, mid, 1)?,
                // small output init keeps the block close to the identity
                up: b.conv_std("up", 1, mid, c, 1, 0.1 / (mid as f64).sqrt())?,
            })
        })
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Convolution over `[H, W, C]` with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add(y, b)
    }
}

/// Layer norm over the channel axis.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let (gm, bt) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.layer_norm(x, gm, bt, NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub norm: Norm,
    pub down: Conv,
    pub mid: Conv,
    pub up: Conv,
}

impl ResBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let h = self.norm.forward(g, s, x)?;
        let h = self.down.forward(g, s, h)?;
        let h = g.gelu(h);
        let h = self.mid.forward(g, s, h)?;
        let h = g.gelu(h);
        let h = self.up.forward(g, s, h)?;
        g.add(x, h)
    }
}
