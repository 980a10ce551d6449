//! The full two-scale quality model and its batch loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{ModelConfig, SclConfig, SfaConfig};
use crate::data::Image;
use crate::decoder::{Align, Decoder};
use crate::encoder::{patchify, Branch, BranchEncoder, BranchSpec, ScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scl::{self, TapFeatures};
use crate::sfa::FocusDirection;
use crate::tensor::Tensor;

/// Patch matrices of one image at both scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub small: Tensor,
    pub large: Tensor,
}

impl Patches {
    pub fn get(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Small => &self.small,
            Branch::Large => &self.large,
        }
    }
}

/// Graph handles produced by one image's forward pass.
#[derive(Clone, Debug)]
pub struct ImageForward {
    pub y_hat: Var,
    pub features: ScaleFeatures,
}

/// Graph handles of a batch loss and its parts.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub l1: Var,
    pub scale: Var,
    pub noise: Var,
    /// `[B × 1]` predictions.
    pub y_hat: Var,
    pub skipped_anchors: usize,
}

#[derive(Clone, Debug)]
pub struct Csfiqa {
    pub model_cfg: ModelConfig,
    pub scl_cfg: SclConfig,
    pub sfa_cfg: SfaConfig,
    pub params: ParamStore,
    pub small: BranchEncoder,
    pub large: BranchEncoder,
    /// Maps small-branch region vectors into the large width for the
    /// cross-scale similarity.
    pub nsm_proj: Linear,
    pub focus_small: FocusDirection,
    pub focus_large: FocusDirection,
    pub align: Align,
    pub decoder: Decoder,
}

/// `mean|ŷ − y| + λ·(L_scale + L_noise)`.
pub fn total_loss(
    g: &mut Graph,
    y_hat: Var,
    y: Var,
    l_scale: Var,
    l_noise: Var,
    lambda: f64,
) -> Result<Var> {
    let l1 = g.tape.l1_loss(y_hat, y)?;
    let reg = g.tape.add(l_scale, l_noise)?;
    let reg = g.tape.scale(reg, lambda);
    g.tape.add(l1, reg)
}

impl Csfiqa {
    /// Builds a model with all trainable weights drawn from `seed`.
    pub fn new(
        model_cfg: ModelConfig,
        scl_cfg: SclConfig,
        sfa_cfg: SfaConfig,
        seed: u64,
    ) -> Result<Self> {
        model_cfg.validate()?;
        scl_cfg.validate()?;
        sfa_cfg.validate()?;
        for branch in Branch::BOTH {
            let grid = BranchSpec::of(&model_cfg, branch).grid();
            scl::region_pooling(grid, scl_cfg.regions_per_side)
                .map_err(|e| Error::Config(format!("{} branch: {e}", branch.name())))?;
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &mut Builder::new(&mut params, &mut rng).with_std(model_cfg.init_std);
        let (ds, dl, heads) = (model_cfg.dim_small, model_cfg.dim_large, model_cfg.heads);
        let small = BranchEncoder::new(b, Branch::Small, &model_cfg)?;
        let large = BranchEncoder::new(b, Branch::Large, &model_cfg)?;
        let nsm_proj = Linear::new(b, "nsm.proj", ds, dl, false);
        let focus_small = FocusDirection::new(b, Branch::Small, ds, dl, heads, &sfa_cfg)?;
        let focus_large = FocusDirection::new(b, Branch::Large, dl, ds, heads, &sfa_cfg)?;
        let align = Align::new(b, ds, dl);
        let decoder = Decoder::new(b, dl, heads, model_cfg.decoder_depth)?;
        Ok(Self {
            model_cfg,
            scl_cfg,
            sfa_cfg,
            params,
            small,
            large,
            nsm_proj,
            focus_small,
            focus_large,
            align,
            decoder,
        })
    }

    pub fn encoder(&self, branch: Branch) -> &BranchEncoder {
        match branch {
            Branch::Small => &self.small,
            Branch::Large => &self.large,
        }
    }

    /// Patchifies an image already resampled to each branch's resolution.
    pub fn prepare(&self, small: &Image, large: &Image) -> Result<Patches> {
        Ok(Patches {
            small: patchify(small, &self.small.spec)?,
            large: patchify(large, &self.large.spec)?,
        })
    }

    /// Resamples an arbitrary image to both branch resolutions and
    /// patchifies it.
    pub fn prepare_image(&self, image: &Image) -> Result<Patches> {
        let img = image.with_channels(self.model_cfg.channels);
        let s = self.model_cfg.img_size_small;
        let l = self.model_cfg.img_size_large;
        self.prepare(&img.resize(s, s), &img.resize(l, l))
    }

    pub fn encode(&self, g: &mut Graph, patches: &Patches) -> Result<ScaleFeatures> {
        let ts = self.small.embed(g, &patches.small, true)?;
        let tl = self.large.embed(g, &patches.large, true)?;
        Ok(ScaleFeatures {
            small: self.small.encode(g, ts)?,
            large: self.large.encode(g, tl)?,
        })
    }

    /// `(cls row, patch rows)` of a token matrix.
    fn split_tokens(g: &mut Graph, tokens: Var) -> Result<(Var, Var)> {
        let rows = g.value(tokens).rows_cols().0;
        let cls = g.tape.slice_rows(tokens, 0, 1)?;
        let patches = g.tape.slice_rows(tokens, 1, rows - 1)?;
        Ok((cls, patches))
    }

    /// Focus attention in both directions, alignment and decoding.
    pub fn head(&self, g: &mut Graph, features: &ScaleFeatures) -> Result<Var> {
        let (cls_s, patch_s) = Self::split_tokens(g, features.last(Branch::Small))?;
        let (cls_l, patch_l) = Self::split_tokens(g, features.last(Branch::Large))?;
        let f_small = self.focus_small.forward(g, cls_s, patch_l, &self.sfa_cfg)?;
        let f_large = self.focus_large.forward(g, cls_l, patch_s, &self.sfa_cfg)?;
        let fused = self.align.forward(g, f_small, f_large)?;
        self.decoder.forward(g, fused)
    }

    pub fn forward_image(&self, g: &mut Graph, patches: &Patches) -> Result<ImageForward> {
        let features = self.encode(g, patches)?;
        let y_hat = self.head(g, &features)?;
        Ok(ImageForward { y_hat, features })
    }

    /// Cross-scale region loss of one image, summed over taps.
    pub fn image_noise_loss(&self, g: &mut Graph, features: &ScaleFeatures) -> Result<Var> {
        let per_side = self.scl_cfg.regions_per_side;
        let mut terms = Vec::with_capacity(features.taps());
        for k in 0..features.taps() {
            let (_, ps) = Self::split_tokens(g, features.tap(Branch::Small, k))?;
            let (_, pl) = Self::split_tokens(g, features.tap(Branch::Large, k))?;
            let ps = self.nsm_proj.forward(g, ps)?;
            let rs = scl::partition_regions(&mut g.tape, ps, self.small.spec.grid(), per_side)?;
            let rl = scl::partition_regions(&mut g.tape, pl, self.large.spec.grid(), per_side)?;
            terms.push(scl::noise_loss(&mut g.tape, &rs, &rl, &self.scl_cfg)?);
        }
        let all = g.tape.concat_rows(&terms)?;
        Ok(g.tape.sum(all))
    }

    /// Loss of a minibatch. With `lambda == 0` the contrastive terms are
    /// not built and enter as constant zeros.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&Patches],
        labels: &[f64],
        lambda: f64,
        beta_pair: f64,
    ) -> Result<BatchLoss> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::Data(format!(
                "batch of {} images with {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let fwd = batch
            .iter()
            .map(|p| self.forward_image(g, p))
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<Var> = fwd.iter().map(|f| f.y_hat).collect();
        let y_hat = g.tape.concat_rows(&preds)?;
        let y = g.constant(Tensor::new([labels.len(), 1], labels.to_vec())?);

        let (scale, noise, skipped) = if lambda > 0.0 {
            let taps = fwd[0].features.taps();
            let mut tap_feats = Vec::with_capacity(taps);
            for k in 0..taps {
                let mut per_branch = [Vec::new(), Vec::new()];
                for f in &fwd {
                    for (slot, branch) in Branch::BOTH.into_iter().enumerate() {
                        let cls = g.tape.slice_rows(f.features.tap(branch, k), 0, 1)?;
                        per_branch[slot].push(cls);
                    }
                }
                tap_feats.push(TapFeatures {
                    small: g.tape.concat_rows(&per_branch[0])?,
                    large: g.tape.concat_rows(&per_branch[1])?,
                });
            }
            let sl = scl::scale_loss(&mut g.tape, &tap_feats, labels, beta_pair, self.scl_cfg.tau)?;
            let per_image = fwd
                .iter()
                .map(|f| self.image_noise_loss(g, &f.features))
                .collect::<Result<Vec<_>>>()?;
            let stacked = g.tape.concat_rows(&per_image)?;
            let noise = g.tape.mean(stacked);
            (sl.loss, noise, sl.skipped)
        } else {
            let z = g.constant(Tensor::scalar(0.0));
            (z, z, 0)
        };
        let total = total_loss(g, y_hat, y, scale, noise, lambda)?;
        let l1 = g.tape.l1_loss(y_hat, y)?;
        Ok(BatchLoss {
            total,
            l1,
            scale,
            noise,
            y_hat,
            skipped_anchors: skipped,
        })
    }

    pub fn predict(&self, patches: &Patches) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_image(&mut g, patches)?;
        let v = g.value(out.y_hat).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "prediction".into(),
            });
        }
        Ok(v)
    }

    /// Sets the regression head's output bias, e.g. to the training-label
    /// median so optimization starts from the best constant predictor
    /// under the ℓ1 loss.
    pub fn init_output_bias(&mut self, value: f64) {
        if let Some(b) = self.decoder.head.fc2.bias {
            self.params.value_mut(b).data_mut()[0] = value;
        }
    }

    /// Parameters of both frozen concentrator blocks.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut ids = self.focus_small.icm.frozen_params();
        ids.extend(self.focus_large.icm.frozen_params());
        ids
    }
}
