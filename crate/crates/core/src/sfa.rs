//! Selective focus attention.
//!
//! The cls token of one branch, projected into the other branch's width,
//! attends over that branch's patch tokens. In `SelectAtt` mode every
//! attention row is filtered by several top-k masks whose keep fractions
//! live in `[alpha_k, beta_k]`; each mask renormalizes its survivors with a
//! softmax and the masked attention maps are blended by softmax mixing
//! weights. The attended cls token then passes a learnable linear layer and
//! a frozen transformer block (the information concentrator) before being
//! projected back and added to the original cls token.
//!
//! Survivor sets are constants of each forward pass: the fractions decide
//! how many keys survive, but receive no gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{AttnMode, SfaConfig};
use crate::encoder::Branch;
use crate::error::Result;
use crate::nn::{AttentionProj, Block, Builder, LayerNorm, Linear};
use crate::params::{AttnTrace, Graph, ParamId, ParamStore};
use crate::tensor::{sigmoid, Tensor};

/// Maps an unconstrained value into `[alpha, beta]`.
pub fn squash(raw: f64, alpha: f64, beta: f64) -> f64 {
    alpha + (beta - alpha) * sigmoid(raw)
}

/// Survivor count for keep fraction `f` over `n_keys` keys, at least one.
pub fn k_int(f: f64, n_keys: usize) -> usize {
    ((f * n_keys as f64).round() as usize).clamp(1, n_keys)
}

/// Learnable top-k filtering masks.
#[derive(Clone, Debug)]
pub struct AfsMasks {
    pub k_raw: ParamId,
    pub mix: ParamId,
    pub count: usize,
}

impl AfsMasks {
    /// Fractions start evenly spread inside the range, mixing uniform.
    pub fn new(b: &mut Builder, name: &str, count: usize) -> Self {
        let raw = (0..count)
            .map(|i| {
                let t = (i + 1) as f64 / (count + 1) as f64;
                (t / (1.0 - t)).ln()
            })
            .collect();
        Self {
            k_raw: b.value(&format!("{name}.k_raw"), Tensor::vector(raw)),
            mix: b.zeros(&format!("{name}.mix"), &[count]),
            count,
        }
    }

    pub fn fractions(&self, store: &ParamStore, cfg: &SfaConfig) -> Vec<f64> {
        store
            .value(self.k_raw)
            .data()
            .iter()
            .map(|&r| squash(r, cfg.alpha_k, cfg.beta_k))
            .collect()
    }

    /// Softmax of the mixing logits, shape `[count]`.
    pub fn mix_weights(&self, g: &mut Graph) -> Result<Var> {
        let m = g.param(self.mix);
        g.tape.softmax(m, 0)
    }
}

/// Dense attention weights: row softmax of `scores`.
pub fn dense_weights(g: &mut Graph, scores: Var) -> Result<Var> {
    g.tape.softmax(scores, 1)
}

/// One mask's filtered weights and survivor flags.
pub type MaskSelection = (Tensor, Vec<bool>);

/// Per-mask top-k filtered softmax of `scores` (`[rows × keys]`), blended by
/// `mix` (`[masks]`). Returns the blended weights and, per mask, the masked
/// weights and survivor mask.
pub fn select_weights(
    g: &mut Graph,
    scores: Var,
    fractions: &[f64],
    mix: Var,
) -> Result<(Var, Vec<MaskSelection>)> {
    let (rows, n) = g.value(scores).rows_cols();
    let mut blended: Option<Var> = None;
    let mut per_mask = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let k = k_int(f, n);
        let mut keep = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = g.value(scores).data()[r * n..(r + 1) * n].to_vec();
            keep.extend(g.select_top_k(&row, k));
        }
        let a = g.tape.masked_softmax(scores, &keep, 1)?;
        per_mask.push((g.value(a).clone(), keep));
        let w = g.tape.gather(mix, &[i])?;
        let weighted = g.tape.mul_scalar(a, w)?;
        blended = Some(match blended {
            None => weighted,
            Some(acc) => g.tape.add(acc, weighted)?,
        });
    }
    Ok((blended.expect("at least one mask"), per_mask))
}

/// Single-head selective attention `(Σ_i w_i · topk_softmax_i(QKᵀ/√d)) V`.
pub fn select_att(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    fractions: &[f64],
    mix: Var,
) -> Result<Var> {
    let d = g.value(q).rows_cols().1;
    let s = g.tape.matmul_bt(q, k)?;
    let s = g.tape.scale(s, 1.0 / (d as f64).sqrt());
    let (a, _) = select_weights(g, s, fractions, mix)?;
    g.tape.matmul(a, v)
}

/// Single-head dense attention `softmax(QKᵀ/√d) V`.
pub fn cross_att(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.value(q).rows_cols().1;
    let s = g.tape.matmul_bt(q, k)?;
    let s = g.tape.scale(s, 1.0 / (d as f64).sqrt());
    let a = dense_weights(g, s)?;
    g.tape.matmul(a, v)
}

/// Learnable linear layer followed by a frozen transformer block, with an
/// outer residual: `x + frozen(linear(x))`.
#[derive(Clone, Debug)]
pub struct Icm {
    pub linear: Linear,
    pub frozen: Block,
}

impl Icm {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        frozen_seed: u64,
    ) -> Result<Self> {
        let linear = Linear::new(b, &format!("{name}.linear"), dim, dim, true);
        let mut rng = ChaCha8Rng::seed_from_u64(frozen_seed);
        let mut fb = Builder {
            store: &mut *b.store,
            rng: &mut rng,
            frozen: true,
            std: b.std,
        };
        let frozen = Block::new(&mut fb, &format!("{name}.frozen"), dim, heads)?;
        Ok(Self { linear, frozen })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, x)?;
        let h = self.frozen.forward(g, h)?;
        g.tape.add(x, h)
    }

    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut ids = self.frozen.residual_branch_params();
        for ln in [&self.frozen.ln1, &self.frozen.ln2] {
            ids.push(ln.gamma);
            ids.push(ln.beta);
        }
        ids
    }
}

/// Focus attention from `from`'s cls token onto the other branch's patches.
#[derive(Clone, Debug)]
pub struct FocusDirection {
    pub from: Branch,
    pub proj_in: Linear,
    pub norm: LayerNorm,
    pub attn: AttentionProj,
    pub masks: AfsMasks,
    pub icm: Icm,
    pub proj_out: Linear,
}

impl FocusDirection {
    pub fn new(
        b: &mut Builder,
        from: Branch,
        dim_from: usize,
        dim_to: usize,
        heads: usize,
        cfg: &SfaConfig,
    ) -> Result<Self> {
        let name = format!("sfa.{}", from.name());
        // Distinct frozen blocks per direction, both fixed by the config seed.
        let frozen_seed = cfg
            .icm_frozen_seed
            .wrapping_mul(2)
            .wrapping_add(from as u64);
        Ok(Self {
            from,
            proj_in: Linear::new(b, &format!("{name}.proj_in"), dim_from, dim_to, true),
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim_to),
            attn: AttentionProj::new(b, &format!("{name}.attn"), dim_to, heads)?,
            masks: AfsMasks::new(b, &format!("{name}.afs"), cfg.masks),
            icm: Icm::new(b, &format!("{name}.icm"), dim_to, heads, frozen_seed)?,
            proj_out: Linear::new(b, &format!("{name}.proj_out"), dim_to, dim_from, true),
        })
    }

    /// Cross-scale attention of `cls` (`[1 × dim_from]`) over
    /// `[cls'; patches]`, returning the attended row in the target width.
    pub fn attend(
        &self,
        g: &mut Graph,
        cls: Var,
        patches: Var,
        cfg: &SfaConfig,
    ) -> Result<(Var, Var)> {
        let c = self.proj_in.forward(g, cls)?;
        let x = g.tape.concat_rows(&[c, patches])?;
        let h = self.norm.forward(g, x)?;
        let q = g.tape.slice_rows(h, 0, 1)?;
        let label = format!("{}->{}", self.from.name(), self.from.other().name());
        let out = match cfg.mode {
            AttnMode::CrossAtt => self.attn.forward_with(g, q, h, |g, head, s| {
                let a = dense_weights(g, s)?;
                if let Some(trace) = g.trace.as_mut() {
                    let w = g.tape.value(a).clone();
                    let n = w.numel();
                    trace.push(AttnTrace {
                        label: format!("{label} head {head} dense"),
                        weights: vec![w],
                        survivors: vec![vec![true; n]],
                    });
                }
                Ok(a)
            })?,
            AttnMode::SelectAtt => {
                let fractions = self.masks.fractions(g.params(), cfg);
                let mix = self.masks.mix_weights(g)?;
                self.attn.forward_with(g, q, h, |g, head, s| {
                    let (a, per_mask) = select_weights(g, s, &fractions, mix)?;
                    if let Some(trace) = g.trace.as_mut() {
                        let (weights, survivors) = per_mask.into_iter().unzip();
                        trace.push(AttnTrace {
                            label: format!("{label} head {head}"),
                            weights,
                            survivors,
                        });
                    }
                    Ok(a)
                })?
            }
        };
        Ok((c, out))
    }

    /// Full direction: attention, residual onto the projected cls, the
    /// concentrator, and the projection back onto the source cls token.
    pub fn forward(&self, g: &mut Graph, cls: Var, patches: Var, cfg: &SfaConfig) -> Result<Var> {
        let (c, att) = self.attend(g, cls, patches, cfg)?;
        let y = g.tape.add(c, att)?;
        let y = self.icm.forward(g, y)?;
        let back = self.proj_out.forward(g, y)?;
        g.tape.add(cls, back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn squash_stays_in_range() {
        for raw in [-1e3, -3.0, 0.0, 2.0, 1e3] {
            let f = squash(raw, 1.0 / 3.0, 0.75);
            assert!((1.0 / 3.0..=0.75).contains(&f));
        }
        assert_eq!(squash(5.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn k_int_never_empty() {
        assert_eq!(k_int(1.0 / 3.0, 4), 1);
        assert_eq!(k_int(0.01, 10), 1);
        assert_eq!(k_int(0.75, 17), 13);
        assert_eq!(k_int(1.0, 5), 5);
    }

    #[test]
    fn initial_fractions_are_evenly_spaced() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masks = AfsMasks::new(&mut Builder::new(&mut store, &mut rng), "m", 3);
        let cfg = SfaConfig::default();
        let f = masks.fractions(&store, &cfg);
        let span = cfg.beta_k - cfg.alpha_k;
        for (i, v) in f.iter().enumerate() {
            let expect = cfg.alpha_k + span * (i + 1) as f64 / 4.0;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_survivor_returns_argmax_value_row() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_rows(&[&[1.0, 0.5]]).unwrap());
        let k = g.constant(
            Tensor::from_rows(&[&[0.1, 0.0], &[2.0, 1.0], &[-1.0, 0.0], &[0.5, 0.5]]).unwrap(),
        );
        let v = g.constant(
            Tensor::from_rows(&[
                &[1.0, 2.0, 3.0],
                &[4.0, 5.0, 6.0],
                &[7.0, 8.0, 9.0],
                &[0.0, 0.0, 1.0],
            ])
            .unwrap(),
        );
        let mix = g.constant(Tensor::vector(vec![1.0]));
        let out = select_att(&mut g, q, k, v, &[1.0 / 3.0], mix).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn icm_with_zero_linear_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let icm = Icm::new(&mut Builder::new(&mut store, &mut rng), "icm", 8, 2, 11).unwrap();
        for id in icm.linear.params() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        for id in icm.frozen_params() {
            assert!(store.get(id).frozen);
        }
        let x = crate::params::trunc_normal(&mut rng, &[3, 8], 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = icm.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }
}
