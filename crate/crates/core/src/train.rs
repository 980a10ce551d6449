//! Optimizer, training loop and the repeated-split evaluation protocol.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, TrainConfig};
use crate::data::ImageSample;
use crate::encoder::{patchify, Branch, BranchSpec};
use crate::error::{Error, Result};
use crate::metrics::{median, plcc, srcc};
use crate::model::{Csfiqa, Patches};
use crate::params::{Graph, ParamStore};

/// Smallest dataset `run_protocol` accepts.
pub const MIN_DATASET: usize = 10;

/// Adam with bias correction. Moments are kept per parameter; frozen
/// parameters are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.numel()])
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. All gradients are checked before any parameter
    /// changes, so a rejected step leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}[{i}]", p.name),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.get(id).frozen {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss components of one optimizer step (values before the update).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub l1: f64,
    pub scale: f64,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_l1: f64,
}

/// Patch matrices for every sample; depends only on the model geometry.
pub fn prepare_dataset(
    cfg: &crate::config::ModelConfig,
    samples: &[ImageSample],
) -> Result<Vec<Patches>> {
    let (ss, sl) = (
        BranchSpec::of(cfg, Branch::Small),
        BranchSpec::of(cfg, Branch::Large),
    );
    samples
        .iter()
        .map(|s| {
            Ok(Patches {
                small: patchify(&s.small, &ss)?,
                large: patchify(&s.large, &sl)?,
            })
        })
        .collect()
}

/// Forward, backward and one Adam update on a minibatch.
pub fn train_step(
    model: &mut Csfiqa,
    opt: &mut Adam,
    batch: &[&Patches],
    labels: &[f64],
    lambda: f64,
    beta_pair: f64,
    lr: f64,
) -> Result<StepStats> {
    let (stats, grads) = {
        let mut g = Graph::new(&model.params);
        let loss = model.batch_loss(&mut g, batch, labels, lambda, beta_pair)?;
        let stats = StepStats {
            total: g.value(loss.total).item(),
            l1: g.value(loss.l1).item(),
            scale: g.value(loss.scale).item(),
            noise: g.value(loss.noise).item(),
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite {
                what: "total loss".into(),
            });
        }
        (stats, g.param_grads(loss.total)?)
    };
    opt.step(&mut model.params, &grads, lr)?;
    Ok(stats)
}

/// Trains for `cfg.epochs` with the step schedule, reshuffling the
/// training order each epoch from `rng`.
pub fn train_model(
    model: &mut Csfiqa,
    patches: &[&Patches],
    labels: &[f64],
    cfg: &TrainConfig,
    beta_pair: f64,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut opt = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        let (mut total, mut l1, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Patches> = chunk.iter().map(|&i| patches[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let s = train_step(model, &mut opt, &batch, &y, cfg.lambda, beta_pair, lr)?;
            total += s.total;
            l1 += s.l1;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            lr,
            mean_total: total / batches as f64,
            mean_l1: l1 / batches as f64,
        };
        on_epoch(&stats);
        log.push(stats);
    }
    Ok(log)
}

/// Predictions on `patches` and their `(srcc, plcc)` against `labels`.
pub fn evaluate(
    model: &Csfiqa,
    patches: &[&Patches],
    labels: &[f64],
) -> Result<(Vec<f64>, f64, f64)> {
    let preds = patches
        .iter()
        .map(|p| model.predict(p))
        .collect::<Result<Vec<_>>>()?;
    let s = srcc(&preds, labels)?;
    let p = plcc(&preds, labels)?;
    Ok((preds, s, p))
}

/// Per-repeat held-out correlations and their medians.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub srcc: Vec<f64>,
    pub plcc: Vec<f64>,
    pub median_srcc: f64,
    pub median_plcc: f64,
}

pub const METRICS_HEADER: &str = "repeat,srcc,plcc";

impl MetricsReport {
    pub fn from_runs(srcc: Vec<f64>, plcc: Vec<f64>) -> Self {
        Self {
            median_srcc: median(&srcc),
            median_plcc: median(&plcc),
            srcc,
            plcc,
        }
    }

    /// `repeat,srcc,plcc` rows followed by a `median,<srcc>,<plcc>` line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for (r, (s, p)) in self.srcc.iter().zip(&self.plcc).enumerate() {
            out.push_str(&format!("{r},{s},{p}\n"));
        }
        out.push_str(&format!(
            "median,{},{}\n",
            self.median_srcc, self.median_plcc
        ));
        out
    }
}

/// Outcome of [`run_protocol`]; `model` is the network trained in repeat 0.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub report: MetricsReport,
    pub model: Csfiqa,
    pub epochs: Vec<Vec<EpochStats>>,
}

/// Indices of `(train, test)` for one repeat; the shuffle comes from `rng`.
pub fn split_indices(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = ((fraction * n as f64).round() as usize).clamp(2, n - 2);
    let test = order.split_off(n_train);
    (order, test)
}

/// For each repeat `r`: reseed with `seed + r`, split by image, build a
/// fresh model, train, and score the held-out part.
pub fn run_protocol(
    dataset: &[ImageSample],
    cfg: &Config,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<ProtocolRun> {
    cfg.validate()?;
    if dataset.len() < MIN_DATASET {
        return Err(Error::Data(format!(
            "protocol needs at least {MIN_DATASET} samples, got {}",
            dataset.len()
        )));
    }
    let patches = prepare_dataset(&cfg.model, dataset)?;
    let labels: Vec<f64> = dataset.iter().map(|s| s.mos).collect();
    let tc = &cfg.train;

    let (mut srccs, mut plccs, mut epochs) = (Vec::new(), Vec::new(), Vec::new());
    let mut first = None;
    for r in 0..tc.repeats {
        let mut run = || -> Result<(Csfiqa, f64, f64, Vec<EpochStats>)> {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(r as u64));
            let (train, test) = split_indices(dataset.len(), tc.split_fraction, &mut rng);
            let mut model = Csfiqa::new(
                cfg.model.clone(),
                cfg.scl.clone(),
                cfg.sfa.clone(),
                rng.random(),
            )?;
            let tr_p: Vec<&Patches> = train.iter().map(|&i| &patches[i]).collect();
            let tr_y: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
            let (lo, hi) = tr_y
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| {
                    (a.min(y), b.max(y))
                });
            let beta_pair = cfg.scl.resolve_beta_pair(hi - lo);
            model.init_output_bias(median(&tr_y));
            let log = train_model(&mut model, &tr_p, &tr_y, tc, beta_pair, &mut rng, |e| {
                on_epoch(r, e)
            })?;
            let te_p: Vec<&Patches> = test.iter().map(|&i| &patches[i]).collect();
            let te_y: Vec<f64> = test.iter().map(|&i| labels[i]).collect();
            let (_, s, p) = evaluate(&model, &te_p, &te_y)?;
            Ok((model, s, p, log))
        };
        let (model, s, p, log) = run().map_err(|e| Error::Repeat {
            repeat: r,
            source: Box::new(e),
        })?;
        srccs.push(s);
        plccs.push(p);
        epochs.push(log);
        if first.is_none() {
            first = Some(model);
        }
    }
    Ok(ProtocolRun {
        report: MetricsReport::from_runs(srccs, plccs),
        model: first.expect("at least one repeat"),
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x), false);
        s
    }

    #[test]
    fn two_step_trace_matches_hand_recursion() {
        let (x0, g, lr) = (1.5, 0.3, 0.01);
        let mut store = scalar_store(x0);
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[vec![g]], lr).unwrap();
        opt.step(&mut store, &[vec![g]], lr).unwrap();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((store.value(store.find("x").unwrap()).item() - x).abs() < 1e-15);
        // with a constant gradient the corrected moments are exactly g and g²
        assert!((x - (x0 - 2.0 * lr * g / (g + eps))).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(-0.25);
        let mut opt = Adam::new(&store);
        for _ in 0..5 {
            opt.step(&mut store, &[vec![0.0]], 0.1).unwrap();
        }
        assert_eq!(store.value(store.find("x").unwrap()).item(), -0.25);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0);
        store.add("w", Tensor::vector(vec![0.0, 0.0]), false);
        let mut opt = Adam::new(&store);
        let err = opt
            .step(&mut store, &[vec![0.1], vec![0.0, f64::NAN]], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("w[1]"), "{err}");
        assert!(err.is_numeric());
        assert_eq!(store.value(store.find("x").unwrap()).item(), 1.0);
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        store.add("f", Tensor::scalar(2.0), true);
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[vec![1.0]], 0.5).unwrap();
        assert_eq!(store.value(store.find("f").unwrap()).item(), 2.0);
    }

    #[test]
    fn schedule_decays_every_three_epochs() {
        let c = TrainConfig::default();
        let lrs: Vec<f64> = (0..9).map(|e| c.lr_at(e)).collect();
        for (e, lr) in lrs.iter().enumerate() {
            let expect = [2e-4, 2e-5, 2e-6][e / 3];
            assert!((lr - expect).abs() < 1e-18, "epoch {e}: {lr}");
        }
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tr, te) = split_indices(25, 0.8, &mut rng);
        assert_eq!((tr.len(), te.len()), (20, 5));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_csv_layout() {
        let r = MetricsReport::from_runs(vec![0.5, 0.75, 0.25], vec![0.1, 0.3, 0.2]);
        assert_eq!((r.median_srcc, r.median_plcc), (0.5, 0.2));
        assert_eq!(
            r.to_csv(),
            "repeat,srcc,plcc\n0,0.5,0.1\n1,0.75,0.3\n2,0.25,0.2\nmedian,0.5,0.2\n"
        );
    }
}
