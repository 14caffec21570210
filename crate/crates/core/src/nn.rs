//! Parameterized layers. Each layer owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound per pass through a [`Session`].

use efh_numcore::{MhaVars, Rng, Scalar, Tensor, Var};

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder for `prefix.name`, borrowing this one.
    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.path(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let path = self.path(name);
        self.store.add(path, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        let w = s.uniform("w", &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let bias = s.zeros("b", &[fan_out]);
        Self {
            w,
            b: bias,
            fan_in,
            fan_out,
        }
    }

    /// All-zero weights and bias, for heads that must start as identities.
    pub fn zeroed<T: Scalar>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        let w = s.zeros("w", &[fan_in, fan_out]);
        let bias = s.zeros("b", &[fan_out]);
        Self {
            w,
            b: bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.g.matmul(x, w)?;
        Ok(s.g.add_row(y, b)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.ones("gamma", &[dim]),
            beta: s.zeros("beta", &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        Ok(s.g.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Stack of linear layers with SiLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. With `zero_last` the final layer starts at
    /// zero so the whole MLP initially outputs zeros.
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dims: &[usize], zero_last: bool) -> Self {
        let mut s = b.sub(name);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let tag = format!("{i}");
                if zero_last && i + 1 == n {
                    Linear::zeroed(&mut s, &tag, dims[i], dims[i + 1])
                } else {
                    Linear::new(&mut s, &tag, dims[i], dims[i + 1])
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x)?;
            if i < last {
                x = s.g.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }
}

/// Two-layer position-wise feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize, hidden: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            up: Linear::new(&mut s, "up", dim, hidden),
            down: Linear::new(&mut s, "down", hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.g.silu(h)?;
        self.down.forward(s, h)
    }
}

/// Query, key, value and output projections of a multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            o: Linear::new(&mut s, "o", dim, dim),
            heads,
        }
    }

    pub fn bind<T: Scalar>(&self, s: &mut Session<T>) -> MhaVars {
        MhaVars {
            wq: s.p(self.q.w),
            bq: s.p(self.q.b),
            wk: s.p(self.k.w),
            bk: s.p(self.k.b),
            wv: s.p(self.v.w),
            bv: s.p(self.v.b),
            wo: s.p(self.o.w),
            bo: s.p(self.o.b),
            heads: self.heads,
        }
    }
}

/// Square-kernel convolution on `[H, W, C]` maps via im2col.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut s = b.sub(name);
        let fan_in = kernel * kernel * cin;
        Self {
            w: s.uniform("w", &[fan_in, cout], 1.0 / (fan_in as f64).sqrt()),
            b: s.zeros("b", &[cout]),
            kernel,
            stride,
            pad,
            out_channels: cout,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let &[h, w, c] = s.g.shape(x) else {
            unreachable!("conv input is [H, W, C]")
        };
        let (ho, wo, cols) = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            (h, w, s.g.reshape(x, &[h * w, c])?)
        } else {
            let cols = s.g.im2col(x, self.kernel, self.stride, self.pad)?;
            let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
            let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
            (ho, wo, cols)
        };
        let (wt, bias) = (s.p(self.w), s.p(self.b));
        let y = s.g.matmul(cols, wt)?;
        let y = s.g.add_row(y, bias)?;
        Ok(s.g.reshape(y, &[ho, wo, self.out_channels])?)
    }
}
