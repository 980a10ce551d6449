//! Finite-difference checks of every differentiable op and of the full
//! training loss, as run by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::config::{Config, NoiseForm, NoiseMode, SclConfig};
use crate::encoder::{Branch, BranchSpec};
use crate::error::{Error, Result};
use crate::model::{Csfiqa, Patches};
use crate::params::{Graph, ParamStore, Selection};
use crate::scl::{self, RegionGrid, TapFeatures, SIM_EPS};
use crate::sfa;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Images per batch in the full-loss check.
pub const MODEL_BATCH: usize = 4;
/// Seed of the pinned check point used by the CLI and the acceptance run.
pub const SUITE_SEED: u64 = 2;
/// Spread of the noise added to trainable weights before the full-loss check.
pub const CHECK_POINT_STD: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    /// Parameter name at the worst entry, when known.
    pub worst_param: String,
}

impl CheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.report.passes(tol)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// `Σ x ⊙ w` with a fixed random `w`, so every output entry carries a
/// distinct upstream gradient.
fn project(t: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn FnMut(&mut Tape, &[Var]) -> Result<Var>>;

/// Named scalar functions of random inputs, one per op or composite.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $out_shape:expr, |$t:ident, $x:ident| $body:expr) => {{
            let inputs = vec![$($inp),*];
            let w = randn(rng, &$out_shape, 1.0);
            cases.push((
                $name,
                inputs,
                Box::new(move |$t: &mut Tape, $x: &[Var]| {
                    let y = $body?;
                    project($t, y, &w)
                }),
            ));
        }};
    }

    case!(
        "matmul",
        [randn(rng, &[3, 4], 1.0), randn(rng, &[4, 2], 1.0)],
        [3, 2],
        |t, x| t.matmul(x[0], x[1])
    );
    case!(
        "matmul_bt",
        [randn(rng, &[3, 4], 1.0), randn(rng, &[5, 4], 1.0)],
        [3, 5],
        |t, x| t.matmul_bt(x[0], x[1])
    );
    case!("transpose", [randn(rng, &[3, 4], 1.0)], [4, 3], |t, x| t
        .transpose(x[0]));
    case!(
        "add",
        [randn(rng, &[2, 3], 1.0), randn(rng, &[2, 3], 1.0)],
        [2, 3],
        |t, x| t.add(x[0], x[1])
    );
    case!(
        "sub",
        [randn(rng, &[2, 3], 1.0), randn(rng, &[2, 3], 1.0)],
        [2, 3],
        |t, x| t.sub(x[0], x[1])
    );
    case!(
        "mul",
        [randn(rng, &[2, 3], 1.0), randn(rng, &[2, 3], 1.0)],
        [2, 3],
        |t, x| t.mul(x[0], x[1])
    );
    case!(
        "add_row",
        [randn(rng, &[3, 4], 1.0), randn(rng, &[4], 1.0)],
        [3, 4],
        |t, x| t.add_row(x[0], x[1])
    );
    case!("scale", [randn(rng, &[2, 3], 1.0)], [2, 3], |t, x| Ok::<
        _,
        Error,
    >(
        t.scale(x[0], -1.7)
    ));
    case!(
        "mul_scalar",
        [randn(rng, &[2, 3], 1.0), randn(rng, &[1], 1.0)],
        [2, 3],
        |t, x| t.mul_scalar(x[0], x[1])
    );
    case!("exp", [randn(rng, &[2, 3], 1.0)], [2, 3], |t, x| Ok::<
        _,
        Error,
    >(
        t.exp(x[0])
    ));
    case!(
        "log",
        [uniform(rng, &[2, 3], 0.5, 2.0)],
        [2, 3],
        |t, x| Ok::<_, Error>(t.log(x[0]))
    );
    case!("gelu", [randn(rng, &[3, 4], 1.5)], [3, 4], |t, x| Ok::<
        _,
        Error,
    >(
        t.gelu(x[0])
    ));
    case!("sigmoid", [randn(rng, &[3, 4], 1.5)], [3, 4], |t, x| Ok::<
        _,
        Error,
    >(
        t.sigmoid(x[0])
    ));
    case!(
        "reciprocal",
        [uniform(rng, &[2, 3], 0.5, 2.0)],
        [2, 3],
        |t, x| Ok::<_, Error>(t.reciprocal(x[0]))
    );
    // inputs kept away from the kink at the floor
    case!(
        "clamp_min",
        [Tensor::vector(vec![-0.8, -0.3, 0.4, 1.2, 0.05])],
        [5],
        |t, x| Ok::<_, Error>(t.clamp_min(x[0], 0.0))
    );
    case!(
        "softmax_rows",
        [randn(rng, &[3, 5], 1.0)],
        [3, 5],
        |t, x| t.softmax(x[0], 1)
    );
    case!(
        "softmax_cols",
        [randn(rng, &[3, 5], 1.0)],
        [3, 5],
        |t, x| t.softmax(x[0], 0)
    );
    {
        let keep = vec![
            true, false, true, true, false, false, true, false, true, true,
        ];
        case!(
            "masked_softmax",
            [randn(rng, &[2, 5], 1.0)],
            [2, 5],
            |t, x| t.masked_softmax(x[0], &keep, 1)
        );
    }
    case!(
        "layer_norm",
        [
            randn(rng, &[3, 6], 1.0),
            randn(rng, &[6], 1.0),
            randn(rng, &[6], 1.0)
        ],
        [3, 6],
        |t, x| t.layer_norm(x[0], x[1], x[2], 1e-6)
    );
    case!(
        "concat_rows",
        [randn(rng, &[2, 3], 1.0), randn(rng, &[1, 3], 1.0)],
        [3, 3],
        |t, x| t.concat_rows(&[x[0], x[1]])
    );
    case!(
        "concat_cols",
        [randn(rng, &[2, 3], 1.0), randn(rng, &[2, 1], 1.0)],
        [2, 4],
        |t, x| t.concat_cols(&[x[0], x[1]])
    );
    case!("slice_rows", [randn(rng, &[4, 3], 1.0)], [2, 3], |t, x| t
        .slice_rows(x[0], 1, 2));
    case!("slice_cols", [randn(rng, &[3, 5], 1.0)], [3, 2], |t, x| t
        .slice_cols(x[0], 2, 2));
    case!(
        "sum",
        [randn(rng, &[2, 3], 1.0)],
        [1],
        |t, x| Ok::<_, Error>(t.sum(x[0]))
    );
    case!(
        "mean",
        [randn(rng, &[2, 3], 1.0)],
        [1],
        |t, x| Ok::<_, Error>(t.mean(x[0]))
    );
    case!(
        "mean_rows",
        [randn(rng, &[4, 3], 1.0)],
        [1, 3],
        |t, x| Ok::<_, Error>(t.mean_rows(x[0]))
    );
    case!("gather", [randn(rng, &[2, 3], 1.0)], [3], |t, x| t
        .gather(x[0], &[4, 0, 4]));
    case!("logsumexp", [randn(rng, &[5], 2.0)], [1], |t, x| Ok::<
        _,
        Error,
    >(
        t.logsumexp(x[0])
    ));
    // predictions kept well away from the targets (the kink of |·|)
    case!(
        "l1_loss",
        [Tensor::new([3, 1], vec![0.9, -0.4, 0.2]).unwrap()],
        [1],
        |t, x| {
            let y = t.constant(Tensor::new([3, 1], vec![0.1, 0.3, 0.8]).unwrap());
            t.l1_loss(x[0], y)
        }
    );
    case!(
        "normalize_rows",
        [randn(rng, &[3, 4], 1.0)],
        [3, 4],
        |t, x| Ok::<_, Error>(t.normalize_rows(x[0], SIM_EPS))
    );
    case!(
        "cosine_sim",
        [randn(rng, &[1, 5], 1.0), randn(rng, &[1, 5], 1.0)],
        [1],
        |t, x| t.cosine_sim(x[0], x[1], SIM_EPS)
    );

    // contrastive objectives
    case!(
        "info_nce",
        [
            randn(rng, &[1, 6], 1.0),
            randn(rng, &[1, 6], 1.0),
            randn(rng, &[1, 6], 1.0),
            randn(rng, &[1, 6], 1.0)
        ],
        [1],
        |t, x| scl::info_nce(t, x[0], &[x[1], x[2]], &[x[3]], 0.1)
    );
    {
        let labels = [0.1, 0.15, 0.6, 0.62, 0.9];
        case!(
            "scale_loss",
            [
                randn(rng, &[5, 4], 1.0),
                randn(rng, &[5, 6], 1.0),
                randn(rng, &[5, 4], 1.0),
                randn(rng, &[5, 6], 1.0)
            ],
            [1],
            |t, x| {
                let taps = [
                    TapFeatures {
                        small: x[0],
                        large: x[1],
                    },
                    TapFeatures {
                        small: x[2],
                        large: x[3],
                    },
                ];
                scl::scale_loss(t, &taps, &labels, 0.1, 0.1).map(|l| l.loss)
            }
        );
    }
    for (name, form) in [
        ("noise_loss_exp", NoiseForm::ExpInverse),
        ("noise_loss_reciprocal", NoiseForm::Reciprocal),
    ] {
        let cfg = SclConfig {
            noise_form: form,
            noise_mode: NoiseMode::AllPairs,
            ..SclConfig::default()
        };
        // positive entries keep every similarity well above the reciprocal floor
        case!(
            name,
            [
                uniform(rng, &[16, 3], 0.2, 1.0),
                uniform(rng, &[4, 3], 0.2, 1.0)
            ],
            [1],
            |t, x| {
                let s = scl::partition_regions(t, x[0], 4, 2)?;
                let l = scl::partition_regions(t, x[1], 2, 2)?;
                scl::noise_loss(t, &s, &l, &cfg)
            }
        );
    }
    {
        let cfg = SclConfig {
            noise_mode: NoiseMode::LeastSimilar,
            ..SclConfig::default()
        };
        case!(
            "noise_loss_least_similar",
            [randn(rng, &[3, 4], 1.0), randn(rng, &[2, 4], 1.0)],
            [1],
            |t, x| {
                let s = RegionGrid {
                    regions: x[0],
                    rows: 3,
                    cols: 1,
                };
                let l = RegionGrid {
                    regions: x[1],
                    rows: 2,
                    cols: 1,
                };
                scl::noise_loss(t, &s, &l, &cfg)
            }
        );
    }
    cases
}

/// Attention cases need a [`Graph`] for top-k selection; survivor sets are
/// recorded at the base point and replayed at every perturbed point.
fn attention_cases(rng: &mut ChaCha8Rng, h: f64) -> Result<Vec<CheckOutcome>> {
    let store = ParamStore::new();
    let inputs = [
        randn(rng, &[2, 4], 1.0),
        randn(rng, &[6, 4], 1.0),
        randn(rng, &[6, 3], 1.0),
        randn(rng, &[3], 1.0),
    ];
    let w = randn(rng, &[2, 3], 1.0);
    let fractions = [1.0 / 3.0, 0.5, 0.75];
    let mut out = Vec::new();
    for name in ["select_att", "cross_att"] {
        let inputs = if name == "select_att" {
            &inputs[..]
        } else {
            &inputs[..3]
        };
        let mut sets: Option<Vec<Vec<bool>>> = None;
        let report = grad_check(inputs, h, |tape, x| {
            let mut g = Graph::new(&store);
            std::mem::swap(&mut g.tape, tape);
            g.selection = match &sets {
                None => Selection::Record(Vec::new()),
                Some(s) => Selection::Replay {
                    sets: s.clone(),
                    next: 0,
                },
            };
            let y = if x.len() == 4 {
                let mix = g.tape.softmax(x[3], 0)?;
                sfa::select_att(&mut g, x[0], x[1], x[2], &fractions, mix)
            } else {
                sfa::cross_att(&mut g, x[0], x[1], x[2])
            };
            let loss = y.and_then(|y| project(&mut g.tape, y, &w));
            if let Selection::Record(s) = std::mem::take(&mut g.selection) {
                sets = Some(s);
            }
            std::mem::swap(&mut g.tape, tape);
            loss
        })?;
        out.push(CheckOutcome {
            name: name.to_string(),
            report,
            worst_param: String::new(),
        });
    }
    Ok(out)
}

/// Every op-level case.
pub fn check_ops(seed: u64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, mut f) in op_cases(&mut rng) {
        let report = grad_check(&inputs, h, |t, x| f(t, x)).map_err(|e| match e {
            Error::GradCheck { index, reason, .. } => Error::GradCheck {
                name: name.to_string(),
                index,
                reason,
            },
            e => e,
        })?;
        out.push(CheckOutcome {
            name: name.to_string(),
            report,
            worst_param: String::new(),
        });
    }
    out.extend(attention_cases(&mut rng, h)?);
    Ok(out)
}

/// Random images already patchified for `model`, with labels in `[0, 1]`.
pub fn random_batch(model: &Csfiqa, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Patches>, Vec<f64>) {
    let cfg = &model.model_cfg;
    let shape = |b: Branch| {
        let s = BranchSpec::of(cfg, b);
        [s.n_patches(), s.patch_len()]
    };
    let batch = (0..n)
        .map(|_| Patches {
            small: uniform(rng, &shape(Branch::Small), 0.0, 1.0),
            large: uniform(rng, &shape(Branch::Large), 0.0, 1.0),
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    (batch, labels)
}

/// Full-loss check over every trainable parameter entry, with survivor sets
/// replayed from the base point.
pub fn check_model_loss(
    model: &mut Csfiqa,
    batch: &[Patches],
    labels: &[f64],
    lambda: f64,
    beta_pair: f64,
    h: f64,
) -> Result<CheckOutcome> {
    let refs: Vec<&Patches> = batch.iter().collect();
    let (grads, sets) = {
        let mut g = Graph::new(&model.params);
        g.selection = Selection::Record(Vec::new());
        let loss = model.batch_loss(&mut g, &refs, labels, lambda, beta_pair)?;
        let grads = g.param_grads(loss.total)?;
        let Selection::Record(sets) = std::mem::take(&mut g.selection) else {
            unreachable!()
        };
        (grads, sets)
    };
    // Components are differenced separately and combined with the loss
    // weights: the same central difference of the total in exact
    // arithmetic, but the rounding of the large unweighted contrastive sums
    // enters scaled by `lambda` instead of at full size.
    let eval = |model: &Csfiqa| -> Result<[f64; 3]> {
        let mut g = Graph::new(&model.params);
        g.selection = Selection::Replay {
            sets: sets.clone(),
            next: 0,
        };
        let loss = model.batch_loss(&mut g, &refs, labels, lambda, beta_pair)?;
        Ok([loss.l1, loss.scale, loss.noise].map(|v| g.value(v).item()))
    };

    let mut report = GradCheckReport::empty();
    let ids: Vec<_> = model.params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if model.params.get(id).frozen {
            continue;
        }
        for (i, &analytic) in grads[pi].iter().enumerate() {
            let orig = model.params.value(id).data()[i];
            model.params.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(model)?;
            model.params.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(model)?;
            model.params.value_mut(id).data_mut()[i] = orig;
            if fp.iter().chain(&fm).any(|v| !v.is_finite()) {
                return Err(Error::GradCheck {
                    name: model.params.get(id).name.clone(),
                    index: i,
                    reason: "non-finite loss".into(),
                });
            }
            let diff = (fp[0] - fm[0]) + lambda * ((fp[1] - fm[1]) + (fp[2] - fm[2]));
            report.record(pi, i, analytic, diff / (2.0 * h));
        }
    }
    let worst_param = model
        .params
        .get(model.params.ids().nth(report.worst.0).unwrap())
        .name
        .clone();
    Ok(CheckOutcome {
        name: "model_loss".into(),
        report,
        worst_param,
    })
}

/// Adds `N(0, std²)` noise to every trainable entry. Freshly initialised
/// weights are tiny and biases zero, which leaves many gradients below the
/// resolution of central differences; a generic point exercises every path.
pub fn perturb_trainable(model: &mut Csfiqa, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.get(id).frozen {
            continue;
        }
        for v in model.params.value_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
}

/// Op-level cases plus the full loss on a model built from `cfg`.
pub fn run_suite(cfg: &Config, seed: u64, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_ops(seed, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut model = Csfiqa::new(
        cfg.model.clone(),
        cfg.scl.clone(),
        cfg.sfa.clone(),
        rng.random(),
    )?;
    perturb_trainable(&mut model, CHECK_POINT_STD, &mut rng);
    let (batch, labels) = random_batch(&model, MODEL_BATCH, &mut rng);
    let lambda = if cfg.train.lambda > 0.0 {
        cfg.train.lambda
    } else {
        1.0
    };
    let beta_pair = cfg.scl.resolve_beta_pair(1.0);
    out.push(check_model_loss(
        &mut model, &batch, &labels, lambda, beta_pair, h,
    )?);
    Ok(out)
}
