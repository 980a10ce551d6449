//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written with plain loops over `Vec<f64>` and avoids
//! the library's tensor and tape code.

#![allow(dead_code)]

use csfiqa::autodiff::Tape;
use csfiqa::config::SclConfig;
use csfiqa::params::{Graph, ParamStore};
use csfiqa::scl::{self, RegionGrid, TapFeatures};
use csfiqa::sfa;
use csfiqa::tensor::Tensor;
use rand::Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Matrix) -> Tensor {
    let cols = m[0].len();
    Tensor::new([m.len(), cols], m.concat()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Exhaustive thresholding: `(positives, negatives)` of `anchor`.
pub fn pairs_oracle(labels: &[f64], anchor: usize, beta: f64) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for j in 0..labels.len() {
        if j != anchor {
            if (labels[anchor] - labels[j]).abs() <= beta {
                pos.push(j);
            } else {
                neg.push(j);
            }
        }
    }
    (pos, neg)
}

/// Loops over taps, branches, anchors and positives.
pub fn scale_loss_oracle(taps: &[[Matrix; 2]], labels: &[f64], beta: f64, tau: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for tap in taps {
        for feats in tap {
            let mut sum = 0.0;
            let mut anchors = 0;
            for i in 0..b {
                let (pos, neg) = pairs_oracle(labels, i, beta);
                if pos.is_empty() {
                    continue;
                }
                let mut per_anchor = 0.0;
                for &p in &pos {
                    let num = (cosine(&feats[i], &feats[p]) / tau).exp();
                    let mut den = num;
                    for &n in &neg {
                        den += (cosine(&feats[i], &feats[n]) / tau).exp();
                    }
                    per_anchor += -(num / den).ln();
                }
                sum += per_anchor / pos.len() as f64;
                anchors += 1;
            }
            if anchors > 0 {
                total += sum / anchors as f64;
            }
        }
    }
    total
}

pub fn scale_loss_lib(taps: &[[Matrix; 2]], labels: &[f64], beta: f64, tau: f64) -> f64 {
    let mut t = Tape::new();
    let feats: Vec<TapFeatures> = taps
        .iter()
        .map(|[s, l]| TapFeatures {
            small: t.leaf(to_tensor(s)),
            large: t.leaf(to_tensor(l)),
        })
        .collect();
    let out = scl::scale_loss(&mut t, &feats, labels, beta, tau).unwrap();
    t.value(out.loss).item()
}

/// `Σ_m Σ_k exp(−cos(small_m, large_k))`.
pub fn noise_oracle(small: &Matrix, large: &Matrix) -> f64 {
    let mut total = 0.0;
    for s in small {
        for l in large {
            total += (-cosine(s, l)).exp();
        }
    }
    total
}

pub fn noise_lib(small: &Matrix, large: &Matrix) -> f64 {
    let mut t = Tape::new();
    let grid = |t: &mut Tape, m: &Matrix| RegionGrid {
        regions: t.leaf(to_tensor(m)),
        rows: 1,
        cols: m.len(),
    };
    let (gs, gl) = (grid(&mut t, small), grid(&mut t, large));
    let v = scl::noise_loss(&mut t, &gs, &gl, &SclConfig::default()).unwrap();
    t.value(v).item()
}

/// `softmax(QKᵀ/√d) V` with explicit loops.
pub fn dense_attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj) / d.sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            (0..v[0].len())
                .map(|c| exps.iter().zip(v).map(|(e, vj)| e / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

/// Per-mask weights and survivors of `select_weights`, plus the blended
/// weights and the `select_att` output.
pub struct Selected {
    pub per_mask: Vec<(Tensor, Vec<bool>)>,
    pub blended: Tensor,
    pub output: Tensor,
}

pub fn select_lib(q: &Matrix, k: &Matrix, v: &Matrix, fractions: &[f64], mix: &[f64]) -> Selected {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (
        g.constant(to_tensor(q)),
        g.constant(to_tensor(k)),
        g.constant(to_tensor(v)),
    );
    let m = g.constant(Tensor::vector(mix.to_vec()));
    let d = q[0].len() as f64;
    let s = g.tape.matmul_bt(qv, kv).unwrap();
    let s = g.tape.scale(s, 1.0 / d.sqrt());
    let (blended, per_mask) = sfa::select_weights(&mut g, s, fractions, m).unwrap();
    let blended = g.value(blended).clone();
    let out = sfa::select_att(&mut g, qv, kv, vv, fractions, m).unwrap();
    Selected {
        per_mask,
        blended,
        output: g.value(out).clone(),
    }
}

pub fn cross_lib(q: &Matrix, k: &Matrix, v: &Matrix) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (
        g.constant(to_tensor(q)),
        g.constant(to_tensor(k)),
        g.constant(to_tensor(v)),
    );
    let out = sfa::cross_att(&mut g, qv, kv, vv).unwrap();
    g.value(out).clone()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Textbook Pearson correlation.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks by counting: rank = 1 + #smaller + (#equal − 1)/2.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}
