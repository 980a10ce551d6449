//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 2 3 4`. Failures are reported but the
//! exit status stays 0 unless `CSFIQA_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::*;
use csfiqa::autodiff::Tape;
use csfiqa::checkpoint;
use csfiqa::config::{AttnMode, Config};
use csfiqa::data::load_dataset;
use csfiqa::metrics::{plcc, srcc};
use csfiqa::model::{Csfiqa, Patches};
use csfiqa::scl::{self, classify_pairs};
use csfiqa::tensor::Tensor;
use csfiqa::train::{prepare_dataset, run_protocol, train_step, Adam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
const BIN: &str = env!("CARGO_BIN_EXE_csfiqa");

const GRADSUITE_BUDGET_S: f64 = 60.0;
const BENCHMARK_BUDGET_S: f64 = 600.0;
const BENCHMARK_FLOOR: f64 = 0.80;
const BENCHMARK_IMAGES: usize = 300;
const BENCHMARK_REPEATS: usize = 3;
const ABLATION_SEEDS: u64 = 5;
const MAX_INVERSIONS: usize = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Generates (once) a synthetic set of `n` images and returns its manifest.
    fn dataset(&self, n: usize) -> PathBuf {
        let out = self.path(&format!("synth_{n}"));
        let manifest = out.join("manifest.csv");
        if !manifest.exists() {
            let o = bin(&[
                "synth-data",
                "--n",
                &n.to_string(),
                "--seed",
                "0",
                "--out",
                s(&out),
            ]);
            assert!(
                o.status.success(),
                "synth-data failed: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
        manifest
    }
}

fn gradient_suite(_: &Workspace) -> Verdict {
    let cfg = Path::new(CONFIGS).join("gradcheck.cfg");
    let t = Instant::now();
    let o = bin(&["gradcheck", "--config", s(&cfg)]);
    let secs = t.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&o.stdout);
    let checks = text
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .count();
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    let model_line = text
        .lines()
        .find(|l| l.contains("model_loss"))
        .unwrap_or("")
        .trim()
        .to_string();
    let pass = o.status.success() && failed.is_empty() && checks > 0 && secs <= GRADSUITE_BUDGET_S;
    verdict(
        pass,
        format!(
            "{checks} checks, {} failed, {secs:.1} s (budget {GRADSUITE_BUDGET_S} s); {model_line}",
            failed.len()
        ),
    )
}

fn attention_invariants(_: &Workspace) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_dense) = (0.0f64, 0.0f64);
    let (mut nonzero_dropped, mut containment) = (0, 0);
    for _ in 0..1000 {
        let rows = rng.random_range(1..5);
        let keys = rng.random_range(1..13);
        let d = rng.random_range(1..7);
        let masks = rng.random_range(1..4);
        let q = random_matrix(&mut rng, rows, d, 3.0);
        let k = random_matrix(&mut rng, keys, d, 3.0);
        let width = rng.random_range(1..4);
        let v = random_matrix(&mut rng, keys, width, 1.0);
        let fractions: Vec<f64> = (0..masks).map(|_| rng.random_range(0.05..1.0)).collect();
        let mix = softmax(&random_matrix(&mut rng, 1, masks, 2.0)[0]);

        let sel = select_lib(&q, &k, &v, &fractions, &mix);
        for (w, keep) in &sel.per_mask {
            for (wr, kr) in w.data().chunks(keys).zip(keep.chunks(keys)) {
                let kept: f64 = wr.iter().zip(kr).filter(|(_, &k)| k).map(|(w, _)| w).sum();
                worst_sum = worst_sum.max((kept - 1.0).abs());
                nonzero_dropped += wr.iter().zip(kr).filter(|(w, &k)| !k && **w != 0.0).count();
            }
        }
        for a in 0..masks {
            for b in 0..masks {
                if fractions[a] <= fractions[b] {
                    let (ka, kb) = (&sel.per_mask[a].1, &sel.per_mask[b].1);
                    containment += ka.iter().zip(kb).filter(|(&x, &y)| x && !y).count();
                }
            }
        }

        let all = select_lib(&q, &k, &v, &vec![1.0; masks], &mix).output;
        let dense = cross_lib(&q, &k, &v);
        let oracle = to_tensor(&dense_attention_oracle(&q, &k, &v));
        for ((a, b), c) in all.data().iter().zip(dense.data()).zip(oracle.data()) {
            worst_dense = worst_dense.max((a - b).abs()).max((b - c).abs());
        }
    }
    let pass =
        worst_sum <= 1e-12 && nonzero_dropped == 0 && worst_dense <= 1e-10 && containment == 0;
    verdict(
        pass,
        format!(
            "1000 calls: max |row sum - 1| {worst_sum:.1e}, nonzero dropped {nonzero_dropped}, \
             keep-all vs dense {worst_dense:.1e}, containment violations {containment}"
        ),
    )
}

fn contrastive_oracles(_: &Workspace) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let b = rng.random_range(2..=6);
        let taps = rng.random_range(1..=3);
        let d = rng.random_range(2..6);
        let labels: Vec<f64> = (0..b)
            .map(|_| f64::from(rng.random_range(0..4u8)) * 0.25)
            .collect();
        let beta = [0.0, 0.1, 0.3, f64::INFINITY][rng.random_range(0..4)];
        let tau = rng.random_range(0.05..1.0);
        let feats: Vec<[Matrix; 2]> = (0..taps)
            .map(|_| {
                [
                    random_matrix(&mut rng, b, d, 1.0),
                    random_matrix(&mut rng, b, d, 1.0),
                ]
            })
            .collect();
        let lib = scale_loss_lib(&feats, &labels, beta, tau);
        let oracle = scale_loss_oracle(&feats, &labels, beta, tau);
        worst = worst.max((lib - oracle).abs());
    }

    let nce = |n_neg: usize| {
        let mut t = Tape::new();
        let row = |t: &mut Tape| t.leaf(Tensor::new([1, 3], vec![0.3, -1.2, 0.7]).unwrap());
        let a = row(&mut t);
        let p = [row(&mut t)];
        let n: Vec<_> = (0..n_neg).map(|_| row(&mut t)).collect();
        let v = scl::info_nce(&mut t, a, &p, &n, 0.1).unwrap();
        t.value(v).item()
    };
    let closed = (nce(1) - 2f64.ln())
        .abs()
        .max((nce(2) - 3f64.ln()).abs())
        .max(nce(0).abs());

    let mut mismatches = 0;
    for pattern in 0u32..64 {
        let labels: Vec<f64> = (0..6)
            .map(|bit| if pattern >> bit & 1 == 1 { 0.1 } else { 0.0 })
            .collect();
        for beta in [0.0, 0.1, f64::INFINITY] {
            for i in 0..6 {
                let got = classify_pairs(&labels, i, beta);
                if (got.positives, got.negatives) != pairs_oracle(&labels, i, beta) {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = worst <= 1e-10 && closed <= 1e-12 && mismatches == 0;
    verdict(
        pass,
        format!(
            "500 batches vs loop oracle {worst:.1e}; ln2/ln3/no-negative {closed:.1e}; \
             64 patterns x 3 thresholds, {mismatches} mismatches"
        ),
    )
}

fn noise_oracles(_: &Workspace) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (m, k, d) = (
            rng.random_range(1..=9),
            rng.random_range(1..=9),
            rng.random_range(1..6),
        );
        let small = random_matrix(&mut rng, m, d, 1.0);
        let large = random_matrix(&mut rng, k, d, 1.0);
        worst = worst.max((noise_lib(&small, &large) - noise_oracle(&small, &large)).abs());
    }
    let mut closed = 0.0f64;
    for (m, k) in [(1, 1), (2, 2), (4, 4), (3, 9)] {
        let v = random_matrix(&mut rng, 1, 5, 1.0).remove(0);
        let got = noise_lib(&vec![v.clone(); m], &vec![v; k]);
        closed = closed.max((got - (m * k) as f64 * (-1f64).exp()).abs());
    }
    let mut out_of_bounds = 0;
    for _ in 0..1000 {
        let (m, k, d) = (
            rng.random_range(1..=9),
            rng.random_range(1..=9),
            rng.random_range(1..6),
        );
        let v = noise_lib(
            &random_matrix(&mut rng, m, d, 1.0),
            &random_matrix(&mut rng, k, d, 1.0),
        );
        let pairs = (m * k) as f64;
        if !(pairs * (-1f64).exp() <= v && v <= pairs * 1f64.exp()) {
            out_of_bounds += 1;
        }
    }
    let pass = worst <= 1e-10 && closed <= 1e-12 && out_of_bounds == 0;
    verdict(
        pass,
        format!("500 grids vs loop oracle {worst:.1e}; M*K/e closed form {closed:.1e}; {out_of_bounds}/1000 out of bounds"),
    )
}

fn metric_oracles(_: &Workspace) -> Verdict {
    let example =
        (srcc(&[1.0, 2.0, 3.0, 5.0, 4.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap() - 0.9).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut affine, mut out_of_range) = (0.0f64, 0);
    for _ in 0..100 {
        let n = rng.random_range(3..40);
        let x = random_matrix(&mut rng, 1, n, 1.0).remove(0);
        let y = random_matrix(&mut rng, 1, n, 1.0).remove(0);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-10.0..10.0));
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let base = plcc(&x, &y).unwrap();
        affine = affine.max((plcc(&moved, &y).unwrap() - base).abs());
        let tied: Vec<f64> = x.iter().map(|v| (v * 2.0).round()).collect();
        let perfect: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        for (u, w) in [(&x, &y), (&moved, &x), (&perfect, &x), (&tied, &y)] {
            for r in [srcc(u, w), plcc(u, w)].into_iter().flatten() {
                if !(-1.0..=1.0).contains(&r) {
                    out_of_range += 1;
                }
            }
        }
    }
    let pass = example <= 1e-12 && affine <= 1e-12 && out_of_range == 0;
    verdict(
        pass,
        format!("srcc example error {example:.1e}; affine drift {affine:.1e} over 100 vectors; {out_of_range} out of [-1,1]"),
    )
}

fn median_line(metrics: &str) -> Option<(f64, f64)> {
    let line = metrics.lines().find(|l| l.starts_with("median,"))?;
    let mut f = line.split(',').skip(1).map(|v| v.parse::<f64>());
    Some((f.next()?.ok()?, f.next()?.ok()?))
}

fn benchmark(ws: &Workspace) -> Verdict {
    let manifest = ws.dataset(BENCHMARK_IMAGES);
    let cfg = Path::new(CONFIGS).join("toy.cfg");
    let (ckpt, metrics) = (ws.path("bench.ckpt"), ws.path("bench.csv"));
    let t = Instant::now();
    let o = bin(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&manifest),
        "--out-checkpoint",
        s(&ckpt),
        "--metrics",
        s(&metrics),
        "--repeats",
        &BENCHMARK_REPEATS.to_string(),
        "--quiet",
    ]);
    let secs = t.elapsed().as_secs_f64();
    if !o.status.success() {
        return verdict(
            false,
            format!("train failed: {}", String::from_utf8_lossy(&o.stderr)),
        );
    }
    let Some((ms, mp)) = median_line(&String::from_utf8_lossy(&o.stdout)) else {
        return verdict(false, "no median line in metrics output");
    };
    let pass = ms >= BENCHMARK_FLOOR && mp >= BENCHMARK_FLOOR && secs <= BENCHMARK_BUDGET_S;
    verdict(
        pass,
        format!(
            "median SRCC {ms:.3}, PLCC {mp:.3} (floor {BENCHMARK_FLOOR}); {secs:.0} s (budget {BENCHMARK_BUDGET_S} s)"
        ),
    )
}

fn ablation_direction(ws: &Workspace) -> Verdict {
    let base = Config::load(&Path::new(CONFIGS).join("toy.cfg")).unwrap();
    let samples = load_dataset(&ws.dataset(BENCHMARK_IMAGES), &base.model).unwrap();
    let median_srcc = |cfg: &Config| {
        run_protocol(&samples, cfg, |_, _| {})
            .unwrap()
            .report
            .median_srcc
    };
    let (mut lambda_inv, mut select_inv) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let mut full = base.clone();
        full.train.seed = seed;
        full.train.repeats = BENCHMARK_REPEATS;
        let mut no_reg = full.clone();
        no_reg.train.lambda = 0.0;
        let mut dense = full.clone();
        dense.sfa.mode = AttnMode::CrossAtt;
        let (f, l, d) = (
            median_srcc(&full),
            median_srcc(&no_reg),
            median_srcc(&dense),
        );
        lambda_inv += usize::from(f < l);
        select_inv += usize::from(f < d);
        rows.push(format!(
            "seed {seed}: full {f:.3} / no-contrastive {l:.3} / dense {d:.3}"
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    let pass = lambda_inv <= MAX_INVERSIONS && select_inv <= MAX_INVERSIONS;
    verdict(
        pass,
        format!(
            "inversions over {ABLATION_SEEDS} paired seeds: lambda=0 {lambda_inv}, dense attention {select_inv} \
             (allowed {MAX_INVERSIONS} each)"
        ),
    )
}

fn quick_config(ws: &Workspace) -> PathBuf {
    let path = ws.path("quick.cfg");
    if !path.exists() {
        let mut cfg = Config::load(&Path::new(CONFIGS).join("toy.cfg")).unwrap();
        cfg.train.epochs = 2;
        cfg.train.repeats = 2;
        std::fs::write(&path, cfg.serialize()).unwrap();
    }
    path
}

fn determinism(ws: &Workspace) -> Verdict {
    let manifest = ws.dataset(40);
    let cfg = quick_config(ws);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let (ckpt, metrics) = (
            ws.path(&format!("det{run}.ckpt")),
            ws.path(&format!("det{run}.csv")),
        );
        let o = bin(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&manifest),
            "--out-checkpoint",
            s(&ckpt),
            "--metrics",
            s(&metrics),
            "--quiet",
        ]);
        if !o.status.success() {
            return verdict(
                false,
                format!("train failed: {}", String::from_utf8_lossy(&o.stderr)),
            );
        }
        outputs.push((
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(&metrics).unwrap(),
            o.stdout,
        ));
    }
    let same_ckpt = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1 && outputs[0].2 == outputs[1].2;
    verdict(
        same_ckpt && same_metrics,
        format!(
            "checkpoints ({} bytes) identical: {same_ckpt}; metrics identical: {same_metrics}",
            outputs[0].0.len()
        ),
    )
}

fn bits(model: &Csfiqa, ids: &[csfiqa::params::ParamId]) -> Vec<u64> {
    ids.iter()
        .flat_map(|&id| model.params.value(id).data().iter().map(|v| v.to_bits()))
        .collect()
}

fn frozen_concentrator(ws: &Workspace) -> Verdict {
    let cfg = Config::load(&quick_config(ws)).unwrap();
    let samples = load_dataset(&ws.dataset(40), &cfg.model).unwrap();
    let patches = prepare_dataset(&cfg.model, &samples).unwrap();
    let labels: Vec<f64> = samples.iter().map(|s| s.mos).collect();

    let mut model = Csfiqa::new(cfg.model.clone(), cfg.scl.clone(), cfg.sfa.clone(), 7).unwrap();
    let frozen = model.frozen_params();
    let trainable: Vec<_> = model
        .params
        .ids()
        .filter(|id| !model.params.get(*id).frozen)
        .collect();
    let (frozen0, trainable0) = (bits(&model, &frozen), bits(&model, &trainable));
    let mut opt = Adam::new(&model.params);
    let steps = 25;
    for step in 0..steps {
        let idx: Vec<usize> = (0..8).map(|j| (step * 8 + j) % patches.len()).collect();
        let batch: Vec<&Patches> = idx.iter().map(|&i| &patches[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        train_step(
            &mut model,
            &mut opt,
            &batch,
            &y,
            cfg.train.lambda,
            0.1,
            1e-3,
        )
        .unwrap();
    }
    let unchanged = bits(&model, &frozen) == frozen0;
    let moved = bits(&model, &trainable) != trainable0;

    // A checkpoint from a full CLI training run carries the same frozen block.
    let ckpt = ws.path("det0.ckpt");
    let from_cli = if ckpt.exists() {
        let (_, trained) = checkpoint::load(&ckpt).unwrap();
        let fresh = Csfiqa::new(cfg.model.clone(), cfg.scl.clone(), cfg.sfa.clone(), 99).unwrap();
        Some(bits(&trained, &trained.frozen_params()) == bits(&fresh, &fresh.frozen_params()))
    } else {
        None
    };
    let frozen_values: usize = frozen
        .iter()
        .map(|&id| model.params.value(id).numel())
        .sum();
    verdict(
        unchanged && moved && from_cli != Some(false),
        format!(
            "{frozen_values} frozen values bit-identical after {steps} steps: {unchanged}; trainable weights moved: {moved}; \
             trained checkpoint matches: {}",
            from_cli.map_or("not run".to_string(), |b| b.to_string())
        ),
    )
}

type Check = fn(&Workspace) -> Verdict;

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let checks: [(u32, &str, Check); 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "attention invariants", attention_invariants),
        (3, "contrastive oracles", contrastive_oracles),
        (4, "region-matching oracles", noise_oracles),
        (5, "metric oracles", metric_oracles),
        (6, "synthetic benchmark", benchmark),
        (7, "ablation direction", ablation_direction),
        (8, "determinism", determinism),
        (9, "frozen concentrator", frozen_concentrator),
    ];
    let ws = Workspace {
        dir: tempfile::tempdir().unwrap(),
    };
    let mut failed = Vec::new();
    // Determinism runs before the frozen check so its checkpoint can be reused.
    for (id, name, check) in checks {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = check(&ws);
        println!(
            "criterion {id} {name:<24} {} [{:.1} s] {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        let ids: Vec<String> = failed.iter().map(|i| i.to_string()).collect();
        println!("acceptance: FAILED criteria {}", ids.join(", "));
        if std::env::var("CSFIQA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
