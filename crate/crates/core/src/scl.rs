//! Scale contrastive learning.
//!
//! Minibatch images are split into positives and negatives of each anchor by
//! label distance. Per encoder tap and per branch, the anchor's L2-normalized
//! cls feature is pulled toward its positives against its negatives with
//! InfoNCE. Separately, each image's two branches are pooled into coarse
//! regions and every cross-scale region pair is penalized by `exp(-cos)`,
//! pushing the scales of one image toward agreeing on local quality.

use crate::autodiff::{Tape, Var};
use crate::config::{NoiseForm, NoiseMode, SclConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm guard for similarities inside the training graph.
pub const SIM_EPS: f64 = 1e-8;
/// Lower clamp on similarity in the reciprocal noise form.
pub const RECIPROCAL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSets {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Positives are the other images within `beta_pair` of the anchor's label
/// (inclusive); the rest are negatives.
pub fn classify_pairs(labels: &[f64], anchor: usize, beta_pair: f64) -> PairSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (j, &y) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if (labels[anchor] - y).abs() <= beta_pair {
            positives.push(j);
        } else {
            negatives.push(j);
        }
    }
    PairSets {
        anchor,
        positives,
        negatives,
    }
}

/// InfoNCE of row `anchor` of the temperature-scaled similarity matrix
/// `scores`: the mean over positives `p` of
/// `logsumexp(s_ap, s_an for n in N) − s_ap`.
fn info_nce_row(tape: &mut Tape, scores: Var, width: usize, pairs: &PairSets) -> Result<Var> {
    let row = pairs.anchor * width;
    let mut terms = Vec::with_capacity(pairs.positives.len());
    for &p in &pairs.positives {
        let mut idx = Vec::with_capacity(1 + pairs.negatives.len());
        idx.push(row + p);
        idx.extend(pairs.negatives.iter().map(|&n| row + n));
        let logits = tape.gather(scores, &idx)?;
        let lse = tape.logsumexp(logits);
        let pos = tape.gather(scores, &[row + p])?;
        terms.push(tape.sub(lse, pos)?);
    }
    let stacked = tape.concat_rows(&terms)?;
    Ok(tape.mean(stacked))
}

/// `[rows × d]` cls features → L2-normalized `rows × rows` similarities / τ.
fn similarity_scores(tape: &mut Tape, features: Var, tau: f64) -> Var {
    let z = tape.normalize_rows(features, SIM_EPS);
    let s = tape
        .matmul_bt(z, z)
        .expect("square product of a matrix with itself");
    tape.scale(s, 1.0 / tau)
}

/// InfoNCE for one anchor against explicit positive and negative feature
/// vectors.
pub fn info_nce(
    tape: &mut Tape,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::InvalidShape {
            op: "info_nce",
            msg: "at least one positive is required".into(),
        });
    }
    let mut rows = vec![anchor];
    rows.extend_from_slice(positives);
    rows.extend_from_slice(negatives);
    let feats = tape.concat_rows(&rows)?;
    let scores = similarity_scores(tape, feats, tau);
    let pairs = PairSets {
        anchor: 0,
        positives: (1..=positives.len()).collect(),
        negatives: (1 + positives.len()..rows.len()).collect(),
    };
    info_nce_row(tape, scores, rows.len(), &pairs)
}

/// Stacked `[B × dim]` cls features of both branches at one tap.
#[derive(Clone, Copy, Debug)]
pub struct TapFeatures {
    pub small: Var,
    pub large: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleLoss {
    pub loss: Var,
    /// (tap, branch, anchor) combinations skipped for lack of positives.
    pub skipped: usize,
}

/// `Σ_k Σ_branch mean_{anchors with positives} info_nce(anchor)`.
pub fn scale_loss(
    tape: &mut Tape,
    taps: &[TapFeatures],
    labels: &[f64],
    beta_pair: f64,
    tau: f64,
) -> Result<ScaleLoss> {
    let b = labels.len();
    let pairs: Vec<PairSets> = (0..b)
        .map(|i| classify_pairs(labels, i, beta_pair))
        .collect();
    let active: Vec<&PairSets> = pairs.iter().filter(|p| !p.positives.is_empty()).collect();
    let skipped = (b - active.len()) * taps.len() * 2;
    if active.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(ScaleLoss {
            loss: zero,
            skipped,
        });
    }
    let mut per_branch = Vec::with_capacity(taps.len() * 2);
    for tap in taps {
        for feats in [tap.small, tap.large] {
            let rows = tape.value(feats).rows_cols().0;
            if rows != b {
                return Err(Error::Shape {
                    op: "scale_loss",
                    lhs: tape.value(feats).shape().to_vec(),
                    rhs: vec![b],
                });
            }
            let scores = similarity_scores(tape, feats, tau);
            let terms = active
                .iter()
                .map(|p| info_nce_row(tape, scores, b, p))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat_rows(&terms)?;
            per_branch.push(tape.mean(stacked));
        }
    }
    let all = tape.concat_rows(&per_branch)?;
    Ok(ScaleLoss {
        loss: tape.sum(all),
        skipped,
    })
}

/// Mean-pooled non-overlapping regions of one branch's patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct RegionGrid {
    /// `[regions × dim]`, row-major over the region grid.
    pub regions: Var,
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Constant `[regions × patches]` averaging matrix for a `grid × grid`
/// patch layout cut into `per_side × per_side` windows.
pub fn region_pooling(grid: usize, per_side: usize) -> Result<Tensor> {
    if per_side == 0 || !grid.is_multiple_of(per_side) {
        return Err(Error::Config(format!(
            "patch grid {grid}x{grid} cannot be split into {per_side}x{per_side} regions"
        )));
    }
    let w = grid / per_side;
    let m = per_side * per_side;
    let mut pool = vec![0.0; m * grid * grid];
    let share = 1.0 / (w * w) as f64;
    for py in 0..grid {
        for px in 0..grid {
            let r = (py / w) * per_side + px / w;
            pool[r * grid * grid + py * grid + px] = share;
        }
    }
    Tensor::new([m, grid * grid], pool)
}

/// Averages `patch_tokens` (`[grid² × dim]`, row-major patches) over
/// `per_side × per_side` equal windows.
pub fn partition_regions(
    tape: &mut Tape,
    patch_tokens: Var,
    grid: usize,
    per_side: usize,
) -> Result<RegionGrid> {
    let n = tape.value(patch_tokens).rows_cols().0;
    if n != grid * grid {
        return Err(Error::Config(format!(
            "{n} patch tokens do not form a {grid}x{grid} grid"
        )));
    }
    let pool = tape.constant(region_pooling(grid, per_side)?);
    let regions = tape.matmul(pool, patch_tokens)?;
    Ok(RegionGrid {
        regions,
        rows: per_side,
        cols: per_side,
    })
}

/// Cross-scale region similarity loss.
///
/// `AllPairs` sums over every (small, large) region pair; `LeastSimilar`
/// keeps only the pair with the lowest similarity.
pub fn noise_loss(
    tape: &mut Tape,
    small: &RegionGrid,
    large: &RegionGrid,
    cfg: &SclConfig,
) -> Result<Var> {
    let zs = tape.normalize_rows(small.regions, SIM_EPS);
    let zl = tape.normalize_rows(large.regions, SIM_EPS);
    let sim = tape.matmul_bt(zs, zl)?;
    let sim = match cfg.noise_mode {
        NoiseMode::AllPairs => sim,
        NoiseMode::LeastSimilar => {
            let vals = tape.value(sim).data();
            let worst = (0..vals.len())
                .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
                .expect("at least one region pair");
            tape.gather(sim, &[worst])?
        }
    };
    let per_pair = match cfg.noise_form {
        NoiseForm::ExpInverse => {
            let neg = tape.neg(sim);
            tape.exp(neg)
        }
        NoiseForm::Reciprocal => {
            let c = tape.clamp_min(sim, RECIPROCAL_FLOOR);
            tape.reciprocal(c)
        }
    };
    Ok(tape.sum(per_pair))
}
