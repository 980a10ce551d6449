//! Two-scale patch encoders.
//!
//! Each branch cuts the image into non-overlapping square patches, embeds
//! them linearly, prepends a learnable cls token, adds learnable positional
//! embeddings and runs a stack of pre-norm transformer blocks. The output of
//! every block is kept so the contrastive losses can tap intermediate layers.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{Block, Builder, Linear};
use crate::params::{Graph, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Small,
    Large,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Small, Branch::Large];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Small => "small",
            Branch::Large => "large",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Small => Branch::Large,
            Branch::Large => Branch::Small,
        }
    }
}

/// Geometry of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub img_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub channels: usize,
}

impl BranchSpec {
    pub fn of(cfg: &ModelConfig, branch: Branch) -> Self {
        match branch {
            Branch::Small => Self {
                img_size: cfg.img_size_small,
                patch: cfg.patch_small,
                dim: cfg.dim_small,
                depth: cfg.depth_small,
                channels: cfg.channels,
            },
            Branch::Large => Self {
                img_size: cfg.img_size_large,
                patch: cfg.patch_large,
                dim: cfg.dim_large,
                depth: cfg.depth_large,
                channels: cfg.channels,
            },
        }
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Subtracted from every pixel so patch vectors are centred on mid-grey
/// rather than dominated by their mean intensity.
pub const PIXEL_CENTER: f64 = 0.5;

/// Cuts `image` into row-major patches, each flattened channel-last, with
/// pixels shifted by [`PIXEL_CENTER`].
pub fn patchify(image: &Image, spec: &BranchSpec) -> Result<Tensor> {
    if image.width != spec.img_size
        || image.height != spec.img_size
        || image.channels != spec.channels
    {
        return Err(Error::Config(format!(
            "image is {}x{}x{}, branch expects {}x{}x{}",
            image.width, image.height, image.channels, spec.img_size, spec.img_size, spec.channels
        )));
    }
    let (p, c, g) = (spec.patch, spec.channels, spec.grid());
    let mut data = Vec::with_capacity(spec.n_patches() * spec.patch_len());
    for py in 0..g {
        for px in 0..g {
            for y in 0..p {
                let row = ((py * p + y) * image.width + px * p) * c;
                data.extend(
                    image.data[row..row + p * c]
                        .iter()
                        .map(|v| v - PIXEL_CENTER),
                );
            }
        }
    }
    Tensor::new([spec.n_patches(), spec.patch_len()], data)
}

/// One branch: patch embedding, cls token, positional embedding, blocks.
#[derive(Clone, Debug)]
pub struct BranchEncoder {
    pub spec: BranchSpec,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl BranchEncoder {
    pub fn new(b: &mut Builder, branch: Branch, cfg: &ModelConfig) -> Result<Self> {
        let spec = BranchSpec::of(cfg, branch);
        let name = format!("encoder.{}", branch.name());
        let patch_embed = Linear::new(
            b,
            &format!("{name}.patch_embed"),
            spec.patch_len(),
            spec.dim,
            true,
        );
        let cls = b.normal(&format!("{name}.cls"), &[1, spec.dim]);
        let pos = b.normal(&format!("{name}.pos"), &[1 + spec.n_patches(), spec.dim]);
        let blocks = (0..spec.depth)
            .map(|l| Block::new(b, &format!("{name}.blocks.{l}"), spec.dim, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            patch_embed,
            cls,
            pos,
            blocks,
        })
    }

    /// `[cls; patches·W + b] (+ pos)` of shape `(1+n) × dim`.
    pub fn embed(&self, g: &mut Graph, patches: &Tensor, with_pos: bool) -> Result<Var> {
        if patches.shape() != [self.spec.n_patches(), self.spec.patch_len()] {
            return Err(Error::Shape {
                op: "embed",
                lhs: patches.shape().to_vec(),
                rhs: vec![self.spec.n_patches(), self.spec.patch_len()],
            });
        }
        let x = g.constant(patches.clone());
        let tokens = self.patch_embed.forward(g, x)?;
        let cls = g.param(self.cls);
        let seq = g.tape.concat_rows(&[cls, tokens])?;
        if with_pos {
            let pos = g.param(self.pos);
            g.tape.add(seq, pos)
        } else {
            Ok(seq)
        }
    }

    /// Runs every block; returns the output after each one.
    pub fn encode(&self, g: &mut Graph, tokens: Var) -> Result<Vec<Var>> {
        let mut x = tokens;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
            layers.push(x);
        }
        Ok(layers)
    }
}

/// Per-layer token matrices for both branches of one image.
#[derive(Clone, Debug)]
pub struct ScaleFeatures {
    pub small: Vec<Var>,
    pub large: Vec<Var>,
}

impl ScaleFeatures {
    pub fn layers(&self, branch: Branch) -> &[Var] {
        match branch {
            Branch::Small => &self.small,
            Branch::Large => &self.large,
        }
    }

    pub fn last(&self, branch: Branch) -> Var {
        *self
            .layers(branch)
            .last()
            .expect("encoder has at least one layer")
    }

    pub fn taps(&self) -> usize {
        self.small.len().max(self.large.len())
    }

    /// Layer feeding contrastive tap `k` (0-based) of `branch`. A shallower
    /// branch spreads its layers evenly over the taps, so a depth-1 branch
    /// supplies its single output at every tap.
    pub fn tap(&self, branch: Branch, k: usize) -> Var {
        let layers = self.layers(branch);
        layers[tap_layer(layers.len(), self.taps(), k)]
    }
}

/// 0-based layer index for tap `k` of `taps` on a branch of `depth` layers.
pub fn tap_layer(depth: usize, taps: usize, k: usize) -> usize {
    ((k + 1) * depth).div_ceil(taps) - 1
}
