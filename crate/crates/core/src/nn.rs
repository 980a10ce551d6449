//! Transformer building blocks shared by the encoder, the focus attention
//! and the decoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

/// Registers parameters under a name prefix with the standard initializers.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub frozen: bool,
    /// Standard deviation used by [`Builder::normal`].
    pub std: f64,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            frozen: false,
            std: INIT_STD,
        }
    }

    pub fn with_std(mut self, std: f64) -> Self {
        self.std = std;
        self
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = trunc_normal(self.rng, shape, self.std);
        self.store.add(name, t, self.frozen)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store
            .add(name, Tensor::zeros(shape.to_vec()), self.frozen)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), vec![1.0; n]).unwrap();
        self.store.add(name, t, self.frozen)
    }

    /// Registers a parameter with explicit contents.
    pub fn value(&mut self, name: &str, t: Tensor) -> ParamId {
        self.store.add(name, t, self.frozen)
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = b.normal(&format!("{name}.weight"), &[in_dim, out_dim]);
        let bias = bias.then(|| b.zeros(&format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.ones(&format!("{name}.gamma"), &[dim]),
            beta: b.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, out, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Query/key/value/output projections of a multi-head attention layer.
///
/// The key projection has no bias: it would add the same `q·b` to every
/// score in a row, which the softmax cancels.
#[derive(Clone, Debug)]
pub struct AttentionProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionProj {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(b, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(b, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(b, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Multi-head attention of `queries` over `keys_values`; `weigh` maps
    /// each head's scaled score matrix to attention weights.
    pub fn forward_with<F>(
        &self,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        mut weigh: F,
    ) -> Result<Var>
    where
        F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
    {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys_values)?;
        let v = self.v.forward(g, keys_values)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.slice_cols(q, h * dh, dh)?;
            let kh = g.tape.slice_cols(k, h * dh, dh)?;
            let vh = g.tape.slice_cols(v, h * dh, dh)?;
            let s = g.tape.matmul_bt(qh, kh)?;
            let s = g.tape.scale(s, scale);
            let a = weigh(g, h, s)?;
            outs.push(g.tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.tape.concat_cols(&outs)?
        };
        self.o.forward(g, cat)
    }

    /// Dense softmax attention.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var) -> Result<Var> {
        self.forward_with(g, queries, keys_values, |g, _, s| g.tape.softmax(s, 1))
    }
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dimension {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `+ mlp(ln2 x)`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: AttentionProj,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            attn: AttentionProj::new(b, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), dim, dim * MLP_RATIO, dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let x = g.tape.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(x, m)
    }

    /// Every weight matrix and bias of the attention and MLP paths (not the
    /// norms).
    pub fn residual_branch_params(&self) -> Vec<ParamId> {
        [
            &self.attn.q,
            &self.attn.k,
            &self.attn.v,
            &self.attn.o,
            &self.mlp.fc1,
            &self.mlp.fc2,
        ]
        .into_iter()
        .flat_map(Linear::params)
        .collect()
    }
}
