//! Alignment layer and transformer decoder producing the scalar score.

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{AttentionProj, Builder, LayerNorm, Linear, Mlp, MLP_RATIO};
use crate::params::{Graph, ParamId};

/// Projects the small-branch vector to the large width, concatenates
/// `[f_large, projected]` and fuses back to the large width.
#[derive(Clone, Debug)]
pub struct Align {
    pub proj_small: Linear,
    pub fuse: Linear,
}

impl Align {
    pub fn new(b: &mut Builder, dim_small: usize, dim_large: usize) -> Self {
        Self {
            proj_small: Linear::new(b, "align.proj_small", dim_small, dim_large, true),
            fuse: Linear::new(b, "align.fuse", 2 * dim_large, dim_large, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, f_small: Var, f_large: Var) -> Result<Var> {
        let p = self.proj_small.forward(g, f_small)?;
        let cat = g.tape.concat_cols(&[f_large, p])?;
        self.fuse.forward(g, cat)
    }
}

/// Query-token decoder layer: cross-attention onto the memory, then MLP,
/// both pre-norm with residuals.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_q: LayerNorm,
    pub ln_mem: LayerNorm,
    pub cross: AttentionProj,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(b, &format!("{name}.ln_q"), dim),
            ln_mem: LayerNorm::new(b, &format!("{name}.ln_mem"), dim),
            cross: AttentionProj::new(b, &format!("{name}.cross"), dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), dim, dim * MLP_RATIO, dim),
        })
    }

    fn forward(&self, g: &mut Graph, q: Var, memory: Var) -> Result<Var> {
        let hq = self.ln_q.forward(g, q)?;
        let hm = self.ln_mem.forward(g, memory)?;
        let a = self.cross.forward(g, hq, hm)?;
        let q = g.tape.add(q, a)?;
        let h = self.ln2.forward(g, q)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(q, m)
    }
}

/// Learnable query, decoder layers and a two-layer regression head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub query: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub head: Mlp,
}

impl Decoder {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, depth: usize) -> Result<Self> {
        let query = b.normal("decoder.query", &[1, dim]);
        let layers = (0..depth)
            .map(|l| DecoderLayer::new(b, &format!("decoder.layers.{l}"), dim, heads))
            .collect::<Result<_>>()?;
        let head = Mlp::new(b, "decoder.head", dim, dim, 1);
        Ok(Self {
            query,
            layers,
            head,
        })
    }

    /// `[1 × dim]` fused feature → `[1 × 1]` predicted score.
    pub fn forward(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let mut q = g.param(self.query);
        for layer in &self.layers {
            q = layer.forward(g, q, fused)?;
        }
        self.head.forward(g, q)
    }
}
