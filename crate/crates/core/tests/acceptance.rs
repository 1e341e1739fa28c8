//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use disco_core::checkpoint::Checkpoint;
use disco_core::corpus::{AnnotationDataset, Histogram, LabelSpace, LoadOptions, Split};
use disco_core::diagnostics::{annotator_error_table, calibration_table, error_vs_covariates};
use disco_core::linalg::softmax;
use disco_core::metrics::{
    absolute_distance, baseline_most_frequent, baseline_random, error_rate, evaluate, gold_pairs,
    gold_soft_labels, manhattan, score_perspectivist, score_soft, PerspectivistMetric, SoftMetric,
    TaskConfig,
};
use disco_core::model::{forward, init_params, Activation, DiscoConfig, DiscoParams};
use disco_core::objective::{
    batch_loss, kl_divergence, wasserstein_1d, Example, LossConfig, LossKind, Objective,
};
use disco_core::predict::{predict_tasks, Aggregation, PredictionSet, Predictor};
use disco_core::synthgen::{generate, GeneratorSpec, SyntheticCorpus};
use disco_core::trainer::{FeaturePair, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn grad_check_config(activation: Activation) -> DiscoConfig {
    let mut cfg = DiscoConfig::new(8, 5, 6, 4, 4);
    cfg.hidden_dim = Some(16);
    cfg.activation = activation;
    cfg.init_scale = Some(0.4);
    cfg.seed = 17;
    cfg
}

struct GradFixture {
    xs: Vec<Vec<f64>>,
    annots: Vec<Vec<f64>>,
    ys: Vec<usize>,
    item_hists: Vec<Histogram>,
    annot_hists: Vec<Histogram>,
}

impl GradFixture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let xs = (0..n)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let annots = (0..n)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys = (0..n).map(|_| rng.random_range(0..4)).collect();
        let hist = |rng: &mut ChaCha8Rng| {
            let counts: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let mut counts = counts;
            counts[0] += 1;
            Histogram::from_counts(&counts)
        };
        let item_hists = (0..n).map(|_| hist(&mut rng)).collect();
        let annot_hists = (0..n).map(|_| hist(&mut rng)).collect();
        GradFixture {
            xs,
            annots,
            ys,
            item_hists,
            annot_hists,
        }
    }

    fn batch(&self) -> Vec<Example<'_>> {
        (0..self.xs.len())
            .map(|i| Example {
                x: &self.xs[i],
                a: &self.annots[i],
                y: self.ys[i],
                item_hist: &self.item_hists[i],
                annot_hist: &self.annot_hists[i],
            })
            .collect()
    }
}

/// Worst relative error over all parameter entries, and the number of entries checked.
fn max_grad_error(
    cfg: &DiscoConfig,
    params: &DiscoParams,
    fx: &GradFixture,
    lc: &LossConfig,
    ls: &LabelSpace,
    epoch: usize,
) -> Result<(f64, usize), String> {
    let batch = fx.batch();
    let (_, grads) = batch_loss(params, cfg, &batch, lc, ls, epoch).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut p = params.clone();
    for (mi, g) in grads.matrices().iter().enumerate() {
        for k in 0..g.as_slice().len() {
            let orig = p.matrices()[mi].as_slice()[k];
            p.matrices_mut()[mi].as_mut_slice()[k] = orig + h;
            let (up, _) = batch_loss(&p, cfg, &batch, lc, ls, epoch).map_err(|e| e.to_string())?;
            p.matrices_mut()[mi].as_mut_slice()[k] = orig - h;
            let (down, _) =
                batch_loss(&p, cfg, &batch, lc, ls, epoch).map_err(|e| e.to_string())?;
            p.matrices_mut()[mi].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.as_slice()[k];
            let err = if analytic.abs() < 1e-8 {
                let abs = (analytic - numeric).abs();
                if abs >= 1e-7 {
                    return Err(format!(
                        "{}[{k}] analytic {analytic:e} numeric {numeric:e}",
                        DiscoParams::NAMES[mi]
                    ));
                }
                0.0
            } else {
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
            };
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn criterion_1() -> Outcome {
    let ls = LabelSpace::integer_scale(1, 4).unwrap();
    let modes: Vec<(&str, LossConfig, usize)> = vec![
        ("composite_kl", LossConfig::default(), 0),
        ("wasserstein", LossConfig::of_kind(LossKind::Wasserstein), 0),
        ("mae", LossConfig::of_kind(LossKind::Mae), 0),
        ("combined a=0.6", LossConfig::combined(0.6), 0),
        (
            "alternating even",
            LossConfig::of_kind(LossKind::Alternating),
            0,
        ),
        (
            "alternating odd",
            LossConfig::of_kind(LossKind::Alternating),
            1,
        ),
    ];
    let mut summary = Vec::new();
    let mut total = 0;
    for activation in [Activation::Softsign, Activation::Elu] {
        let cfg = grad_check_config(activation);
        let params = init_params(&cfg).unwrap();
        let fx = GradFixture::new(5);
        for (name, lc, epoch) in &modes {
            let (worst, n) = max_grad_error(&cfg, &params, &fx, lc, &ls, *epoch)?;
            ensure(
                worst < 1e-4,
                format!("{name} ({activation:?}): max rel err {worst:.2e}"),
            )?;
            summary.push(worst);
            total += n;
        }
    }
    let worst = summary.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{total} entries over 6 modes x 2 activations, max rel err {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Metric oracles

/// Exact min-cost transport by successive shortest paths on the bipartite
/// graph (supply p, demand q, cost |v_i - v_j|).
fn brute_force_transport(p: &[f64], q: &[f64], values: &[f64]) -> f64 {
    let c = p.len();
    // node 0 = source, 1..=c supply, c+1..=2c demand, 2c+1 = sink
    let n = 2 * c + 2;
    let (s, t) = (0, 2 * c + 1);
    let mut cap = vec![vec![0.0f64; n]; n];
    let mut cost = vec![vec![0.0f64; n]; n];
    for i in 0..c {
        cap[s][1 + i] = p[i];
        cap[1 + c + i][t] = q[i];
        for j in 0..c {
            cap[1 + i][1 + c + j] = f64::INFINITY;
            let d = (values[i] - values[j]).abs();
            cost[1 + i][1 + c + j] = d;
            cost[1 + c + j][1 + i] = -d;
        }
    }
    let mut total = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        dist[s] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u].is_infinite() {
                    continue;
                }
                for v in 0..n {
                    if cap[u][v] > 1e-15 && dist[u] + cost[u][v] < dist[v] - 1e-15 {
                        dist[v] = dist[u] + cost[u][v];
                        prev[v] = u;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t].is_infinite() {
            break;
        }
        let mut flow = f64::INFINITY;
        let mut v = t;
        while v != s {
            let u = prev[v];
            flow = flow.min(cap[u][v]);
            v = u;
        }
        let mut v = t;
        while v != s {
            let u = prev[v];
            cap[u][v] -= flow;
            cap[v][u] += flow;
            v = u;
        }
        total += flow * dist[t];
    }
    total
}

fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; c];
        v[rng.random_range(0..c)] = 1.0;
        return v;
    }
    raw.iter().map(|x| x / s).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_w: f64 = 0.0;
    for _ in 0..500 {
        let c = rng.random_range(2..=5);
        let mut values: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        if values.len() < 2 {
            continue;
        }
        let c = values.len();
        let p = random_dist(&mut rng, c);
        let q = random_dist(&mut rng, c);
        let fast = wasserstein_1d(&p, &q, &values);
        let slow = brute_force_transport(&p, &q, &values);
        worst_w = worst_w.max((fast - slow).abs());
    }
    ensure(
        worst_w < 1e-6,
        format!("wasserstein vs transport LP: max diff {worst_w:e}"),
    )?;

    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let c = rng.random_range(2..=5);
        let p = random_dist(&mut rng, c);
        let q = random_dist(&mut rng, c);
        let mut naive = 0.0;
        for k in 0..c {
            naive += (p[k] - q[k]).abs();
        }
        worst = worst.max((manhattan(&p, &q).unwrap() - naive).abs());
    }
    ensure(worst < 1e-12, format!("manhattan: max diff {worst:e}"))?;

    let mut worst_kl: f64 = 0.0;
    for _ in 0..500 {
        let c = rng.random_range(2..=5);
        let t = random_dist(&mut rng, c);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = softmax(&logits);
        let mut naive = 0.0;
        for k in 0..c {
            if t[k] > 0.0 {
                naive += t[k] * (t[k] / p[k]).ln();
            }
        }
        worst_kl = worst_kl.max((kl_divergence(&t, &p) - naive).abs());
    }
    ensure(worst_kl < 1e-12, format!("kl: max diff {worst_kl:e}"))?;

    let ls = LabelSpace::integer_scale(-5, 5).unwrap();
    let (mut worst_er, mut worst_ad): (f64, f64) = (0.0, 0.0);
    for case in 0..500 {
        let n = rng.random_range(1..20);
        let mut preds = PredictionSet::new(ls.clone(), Aggregation::Expectation);
        let mut golds = Vec::new();
        for i in 0..n {
            let (item, annot) = (format!("i{i}"), format!("a{case}"));
            let (p, g) = (rng.random_range(0..11), rng.random_range(0..11));
            preds.insert_label(&item, &annot, p);
            golds.push(disco_core::metrics::GoldPair {
                item,
                annotator: annot,
                label: g,
            });
        }
        let mut wrong = 0usize;
        let mut dist = 0.0;
        for g in &golds {
            let p = preds.label_for(&g.item, &g.annotator).unwrap();
            if p != g.label {
                wrong += 1;
            }
            dist += ((p as f64 - 5.0) - (g.label as f64 - 5.0)).abs() / 10.0;
        }
        worst_er =
            worst_er.max((error_rate(&preds, &golds).unwrap() - wrong as f64 / n as f64).abs());
        worst_ad = worst_ad
            .max((absolute_distance(&preds, &golds, &ls, true).unwrap() - dist / n as f64).abs());
    }
    ensure(
        worst_er < 1e-12,
        format!("error rate: max diff {worst_er:e}"),
    )?;
    ensure(
        worst_ad < 1e-12,
        format!("abs distance: max diff {worst_ad:e}"),
    )?;
    Ok(format!(
        "W1 vs LP {worst_w:.1e}, L1 {worst:.1e}, KL {worst_kl:.1e}, ER {worst_er:.1e}, NAD {worst_ad:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Shared training helpers

fn features(g: &SyntheticCorpus) -> FeaturePair {
    FeaturePair {
        items: g.item_features.clone(),
        annotators: g.annotator_features.clone(),
    }
}

fn model_config(
    g: &SyntheticCorpus,
    item_latent: usize,
    annot_latent: usize,
    seed: u64,
) -> DiscoConfig {
    let mut cfg = DiscoConfig::new(
        g.item_features.dim(),
        g.annotator_features.dim(),
        item_latent,
        annot_latent,
        g.dataset.num_classes(),
    );
    cfg.seed = seed;
    cfg
}

fn train_nll(
    ds: &AnnotationDataset,
    feats: &FeaturePair,
    cfg: &DiscoConfig,
    params: &DiscoParams,
) -> f64 {
    let mut total = 0.0;
    for r in ds.records() {
        let t = forward(
            params,
            cfg,
            feats.items.row(r.item),
            feats.annotators.row(r.annotator),
        )
        .unwrap();
        total -= t.z_y[r.label].ln();
    }
    total / ds.records().len() as f64
}

// ---------------------------------------------------------------------------
// 3. Memorization

fn criterion_3() -> Outcome {
    let mut spec = GeneratorSpec::diagonal(20, 5, 4, 5, 0.7, 16, 3);
    spec.dev_fraction = 0.0;
    spec.test_fraction = 0.0;
    let g = generate(&spec).unwrap();
    let feats = features(&g);
    let cfg = model_config(&g, 64, 32, 1);
    let tc = TrainConfig {
        epochs: 500,
        batch_size: 4,
        lr: 0.001,
        loss: LossConfig::default(),
        selection_metric: disco_core::trainer::SelectionMetric::Loss,
        ..Default::default()
    };
    let mut trainer =
        Trainer::new(&g.dataset, &feats, cfg.clone(), tc).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let params = trainer.params().clone();
    let nll = train_nll(&g.dataset, &feats, &cfg, &params);
    let predictor = Predictor::new(&params, &cfg, &feats.annotators, &g.dataset);
    let preds = predict_tasks(
        &g.dataset,
        &feats.items,
        &predictor,
        Aggregation::Expectation,
    )
    .unwrap();
    let err = error_rate(&preds, &gold_pairs(&g.dataset)).unwrap();
    ensure(nll < 0.05, format!("train NLL {nll:.4} >= 0.05"))?;
    ensure(err < 0.05, format!("train error rate {err:.4} >= 0.05"))?;
    Ok(format!("train NLL {nll:.4}, train error rate {err:.4}"))
}

// ---------------------------------------------------------------------------
// 4. Synthetic recovery

fn criterion_4() -> Outcome {
    let spec = GeneratorSpec::diagonal(300, 20, 4, 5, 0.8, 16, 7);
    let g = generate(&spec).unwrap();
    let feats = features(&g);
    let cfg = model_config(&g, 32, 16, 2);
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 0.001,
        loss: LossConfig::default(),
        shuffle_seed: 3,
        ..Default::default()
    };
    let mut trainer =
        Trainer::new(&g.dataset, &feats, cfg.clone(), tc).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let params = trainer.selected_params().clone();

    let dev = g.dataset.split_view(Split::Dev);
    let train = g.dataset.split_view(Split::Train);
    let ls = dev.label_space().clone();
    let truth: IndexMap<String, Vec<f64>> = dev
        .items()
        .iter()
        .map(|i| (i.item_id.clone(), g.posteriors[&i.item_id].clone()))
        .collect();
    let predictor = Predictor::new(&params, &cfg, &feats.annotators, &g.dataset);
    let model = predict_tasks(&dev, &feats.items, &predictor, Aggregation::Expectation).unwrap();
    let mf = baseline_most_frequent(&train, &dev).unwrap();
    let rnd = baseline_random(&dev, 11);
    let soft = |p: &PredictionSet| {
        score_soft(p, &truth, SoftMetric::Manhattan, &ls)
            .unwrap()
            .mean
    };
    let er = |p: &PredictionSet| {
        score_perspectivist(p, &dev, PerspectivistMetric::ErrorRate, true)
            .unwrap()
            .mean
    };
    let (m_a, mf_a, r_a) = (soft(&model), soft(&mf), soft(&rnd));
    let (m_b, r_b) = (er(&model), er(&rnd));
    ensure(
        m_a <= 0.9 * mf_a,
        format!("Task A {m_a:.4} not 10% below most-frequent {mf_a:.4}"),
    )?;
    ensure(
        m_a < r_a,
        format!("Task A {m_a:.4} not below random {r_a:.4}"),
    )?;
    ensure(
        m_b < r_b,
        format!("Task B {m_b:.4} not below random {r_b:.4}"),
    )?;
    Ok(format!(
        "dev Task A vs posteriors: model {m_a:.4}, most-frequent {mf_a:.4}, random {r_a:.4}; Task B error: model {m_b:.4}, random {r_b:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Combined-loss identities

fn criterion_5() -> Outcome {
    let ls = LabelSpace::integer_scale(1, 4).unwrap();
    let cfg = grad_check_config(Activation::Softsign);
    let params = init_params(&cfg).unwrap();
    let fx = GradFixture::new(9);
    let batch = fx.batch();
    let eval = |lc: &LossConfig| batch_loss(&params, &cfg, &batch, lc, &ls, 0).unwrap();
    let (w, gw) = eval(&LossConfig::of_kind(LossKind::Wasserstein));
    let (m, gm) = eval(&LossConfig::of_kind(LossKind::Mae));
    let (c1, g1) = eval(&LossConfig::combined(1.0));
    let (c0, g0) = eval(&LossConfig::combined(0.0));
    ensure(
        c1 == w && g1 == gw,
        "alpha=1 differs from the Wasserstein term",
    )?;
    ensure(c0 == m && g0 == gm, "alpha=0 differs from the MAE term")?;
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 0.25, 0.5, 0.6, 0.9] {
        let (c, _) = eval(&LossConfig::combined(alpha));
        worst = worst.max((c - (alpha * w + (1.0 - alpha) * m)).abs());
    }
    ensure(worst < 1e-12, format!("affinity residual {worst:e}"))?;
    Ok(format!(
        "exact at alpha 0 and 1; max affinity residual {worst:.1e} over 5 alphas"
    ))
}

// ---------------------------------------------------------------------------
// 6. Alternating schedule

fn ordinal_corpus(m: usize, n: usize, c: usize, per: usize, seed: u64) -> SyntheticCorpus {
    let mut spec = GeneratorSpec::diagonal(m, n, c, per, 0.7, 8, seed);
    spec.ordinal = true;
    generate(&spec).unwrap()
}

fn criterion_6() -> Outcome {
    let g = ordinal_corpus(30, 6, 4, 3, 21);
    let feats = features(&g);
    let cfg = model_config(&g, 8, 4, 0);
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 8,
        loss: LossConfig::of_kind(LossKind::Alternating),
        ..Default::default()
    };
    let mut trainer = Trainer::new(&g.dataset, &feats, cfg, tc).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let labels: Vec<Objective> = trainer
        .report()
        .epochs
        .iter()
        .map(|e| e.objective)
        .collect();
    ensure(
        labels.len() == 10,
        format!("{} epochs recorded", labels.len()),
    )?;
    for (e, o) in labels.iter().enumerate() {
        let want = if e % 2 == 0 {
            Objective::Wasserstein
        } else {
            Objective::Mae
        };
        ensure(*o == want, format!("epoch {e} used {}", o.as_str()))?;
    }
    let names: Vec<&str> = labels.iter().map(|o| o.as_str()).collect();
    Ok(format!("objectives {}", names.join(",")))
}

// ---------------------------------------------------------------------------
// 7. Oracle evaluator

fn criterion_7() -> Outcome {
    let g = ordinal_corpus(60, 8, 5, 4, 13);
    let ds = &g.dataset;
    let mut preds = PredictionSet::new(ds.label_space().clone(), Aggregation::Expectation);
    preds.soft = gold_soft_labels(ds);
    for gp in gold_pairs(ds) {
        preds.insert_label(&gp.item, &gp.annotator, gp.label);
    }
    let mut scores = Vec::new();
    for task_a in [SoftMetric::Manhattan, SoftMetric::Wasserstein] {
        for task_b in [
            PerspectivistMetric::ErrorRate,
            PerspectivistMetric::AbsDistance,
        ] {
            let r = evaluate(
                &preds,
                ds,
                &TaskConfig {
                    task_a,
                    task_b,
                    normalized: true,
                },
            )
            .unwrap();
            ensure(
                r.task_a.mean == 0.0,
                format!("{} = {}", task_a.as_str(), r.task_a.mean),
            )?;
            ensure(
                r.task_b.mean == 0.0,
                format!("{} = {}", task_b.as_str(), r.task_b.mean),
            )?;
            scores.push(r.task_a.mean + r.task_b.mean);
        }
    }
    Ok(
        "Task A (manhattan, wasserstein) and Task B (error_rate, abs_distance) all exactly 0"
            .into(),
    )
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence

fn criterion_8() -> Outcome {
    let g = ordinal_corpus(40, 6, 4, 3, 31);
    let feats = features(&g);
    let cfg = model_config(&g, 8, 4, 5);
    let tc = |epochs| TrainConfig {
        epochs,
        batch_size: 8,
        loss: LossConfig::combined(0.6),
        shuffle_seed: 9,
        ..Default::default()
    };
    let run = |epochs| {
        let mut t = Trainer::new(&g.dataset, &feats, cfg.clone(), tc(epochs)).unwrap();
        t.run().unwrap();
        t
    };
    let a = run(10);
    let b = run(10);
    let bits = |t: &Trainer<'_>| {
        t.report()
            .losses()
            .iter()
            .map(|l| l.to_bits())
            .collect::<Vec<_>>()
    };
    ensure(
        bits(&a) == bits(&b),
        "loss sequences differ between identical runs",
    )?;
    ensure(
        a.params() == b.params(),
        "final parameters differ between identical runs",
    )?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let half = run(5);
    half.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(ckpt, &g.dataset, &feats, tc(10)).unwrap();
    resumed.run().unwrap();
    ensure(bits(&resumed) == bits(&a), "resumed loss sequence differs")?;
    ensure(resumed.params() == a.params(), "resumed parameters differ")?;
    ensure(
        resumed.selected_params() == a.selected_params(),
        "resumed selection differs",
    )?;
    ensure(
        resumed.report().best_epoch == a.report().best_epoch,
        "resumed best epoch differs",
    )?;
    let dev_a: Vec<_> = a
        .report()
        .epochs
        .iter()
        .map(|e| (e.dev_soft, e.dev_pe))
        .collect();
    let dev_r: Vec<_> = resumed
        .report()
        .epochs
        .iter()
        .map(|e| (e.dev_soft, e.dev_pe))
        .collect();
    ensure(dev_a == dev_r, "resumed dev scores differ")?;

    let json = g.dataset.to_json_string().unwrap();
    let back = AnnotationDataset::from_json_str(&json, &LoadOptions::default()).unwrap();
    ensure(
        back == g.dataset,
        "dataset JSON round trip changed the dataset",
    )?;
    ensure(
        back.to_json_string().unwrap() == json,
        "dataset JSON is not stable",
    )?;

    let predictor = Predictor::new(a.params(), &cfg, &feats.annotators, &g.dataset);
    let preds = predict_tasks(
        &g.dataset,
        &feats.items,
        &predictor,
        Aggregation::Expectation,
    )
    .unwrap();
    let pj = preds.to_json_string().unwrap();
    let pback = PredictionSet::from_json_str(&pj, g.dataset.label_space()).unwrap();
    ensure(
        pback.soft == preds.soft && pback.perspectivist == preds.perspectivist,
        "predictions changed",
    )?;
    ensure(
        pback.to_json_string().unwrap() == pj,
        "predictions JSON is not stable",
    )?;
    Ok(
        "identical reruns, resume at epoch 5/10 bit-identical, dataset and predictions JSON stable"
            .into(),
    )
}

// ---------------------------------------------------------------------------
// 9. Diagnostics consistency

fn criterion_9() -> Outcome {
    let g = ordinal_corpus(80, 10, 5, 4, 41);
    let ds = &g.dataset;
    let ls = ds.label_space();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut preds = PredictionSet::new(ls.clone(), Aggregation::Expectation);
    for item in ds.items() {
        preds
            .soft
            .insert(item.item_id.clone(), random_dist(&mut rng, ls.len()));
    }
    for gp in gold_pairs(ds) {
        let label = if rng.random_bool(0.5) {
            gp.label
        } else {
            rng.random_range(0..ls.len())
        };
        preds.insert_label(&gp.item, &gp.annotator, label);
    }
    let golds = gold_pairs(ds);
    let mut worst_decomp: f64 = 0.0;
    for (metric, normalized) in [
        (PerspectivistMetric::ErrorRate, true),
        (PerspectivistMetric::AbsDistance, true),
        (PerspectivistMetric::AbsDistance, false),
    ] {
        let global = score_perspectivist(&preds, ds, metric, normalized)
            .unwrap()
            .mean;
        let rows = annotator_error_table(&preds, &golds, ls, metric, normalized).unwrap();
        let n: usize = rows.iter().map(|r| r.count).sum();
        ensure(n == golds.len(), "annotator table loses pairs")?;
        let weighted: f64 = rows.iter().map(|r| r.error * r.count as f64).sum::<f64>() / n as f64;
        worst_decomp = worst_decomp.max((weighted - global).abs());
    }
    ensure(
        worst_decomp < 1e-9,
        format!("annotator decomposition residual {worst_decomp:e}"),
    )?;

    let soft = score_soft(&preds, &gold_soft_labels(ds), SoftMetric::Wasserstein, ls).unwrap();
    let hists: IndexMap<String, Histogram> = ds
        .items()
        .iter()
        .map(|i| i.item_id.clone())
        .zip(ds.item_histograms())
        .collect();
    let table = calibration_table(&soft.per_item, &hists, ls.len(), 10).unwrap();
    let binned: usize = table.iter().map(|r| r.count).sum();
    ensure(
        binned == soft.per_item.len(),
        format!("{binned} binned of {}", soft.per_item.len()),
    )?;
    let lo = 1.0 / ls.len() as f64;
    for (m, h) in hists.values().enumerate() {
        let p = h.modal_probability();
        let hits = table
            .iter()
            .filter(|r| (p >= r.lower && p < r.upper) || (r.bin == table.len() - 1 && p == r.upper))
            .count();
        ensure(
            hits == 1,
            format!("item {m} (modal {p}) falls in {hits} bins"),
        )?;
    }
    ensure(
        table[0].lower == lo && table.last().unwrap().upper == 1.0,
        "bins do not span [1/C, 1]",
    )?;

    let rows = error_vs_covariates(ds, &soft.per_item);
    let mut worst_h: f64 = 0.0;
    for r in &rows {
        let h = &hists[&r.item_id];
        let mut naive = 0.0;
        for &p in &h.probs {
            if p > 0.0 {
                naive -= p * p.ln();
            }
        }
        worst_h = worst_h.max((r.gold_entropy - naive).abs());
    }
    ensure(worst_h < 1e-12, format!("entropy residual {worst_h:e}"))?;
    Ok(format!(
        "annotator decomposition {worst_decomp:.1e}, {binned} items in {} bins, entropy residual {worst_h:.1e}",
        table.len()
    ))
}

// ---------------------------------------------------------------------------
// 10. Optional: reference baselines on the shared-task corpora

fn criterion_10() -> Option<Outcome> {
    let dir = PathBuf::from(std::env::var_os("DISCO_LEWIDI_DIR")?);
    // (file, Task A reference, Task B reference)
    let refs = [("csc", 1.17, 0.23), ("mp", 0.51, 0.31), ("par", 3.23, 0.36)];
    let run = || -> Outcome {
        let mut parts = Vec::new();
        for (name, soft_ref, pe_ref) in refs {
            let path = dir.join(format!("{name}.json"));
            let ds = disco_core::corpus::load_dataset(&path, &LoadOptions::default())
                .map_err(|e| e.to_string())?;
            let train = ds.split_view(Split::Train);
            let eval = ds.split_view(Split::Dev);
            let preds = baseline_most_frequent(&train, &eval).map_err(|e| e.to_string())?;
            let r = evaluate(
                &preds,
                &eval,
                &TaskConfig::for_label_space(ds.label_space()),
            )
            .map_err(|e| e.to_string())?;
            ensure(
                (r.task_a.mean - soft_ref).abs() <= 0.02 && (r.task_b.mean - pe_ref).abs() <= 0.02,
                format!(
                    "{name}: got {:.3}/{:.3}, reference {soft_ref}/{pe_ref}",
                    r.task_a.mean, r.task_b.mean
                ),
            )?;
            parts.push(format!("{name} {:.3}/{:.3}", r.task_a.mean, r.task_b.mean));
        }
        Ok(parts.join(", "))
    };
    Some(run())
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome, Duration)> = vec![
        (
            "1 gradient correctness",
            criterion_1,
            Duration::from_secs(120),
        ),
        ("2 metric oracles", criterion_2, Duration::from_secs(600)),
        ("3 memorization", criterion_3, Duration::from_secs(180)),
        (
            "4 synthetic recovery",
            criterion_4,
            Duration::from_secs(600),
        ),
        (
            "5 combined-loss identities",
            criterion_5,
            Duration::from_secs(600),
        ),
        (
            "6 alternating schedule",
            criterion_6,
            Duration::from_secs(600),
        ),
        ("7 oracle evaluator", criterion_7, Duration::from_secs(600)),
        (
            "8 determinism and persistence",
            criterion_8,
            Duration::from_secs(600),
        ),
        (
            "9 diagnostics consistency",
            criterion_9,
            Duration::from_secs(600),
        ),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = started.elapsed();
        let outcome = outcome.and_then(|msg| {
            if elapsed > budget {
                Err(format!(
                    "{msg}; took {:.1}s, budget {}s",
                    elapsed.as_secs_f64(),
                    budget.as_secs()
                ))
            } else {
                Ok(msg)
            }
        });
        match outcome {
            Ok(msg) => println!(
                "PASS criterion {name}: {msg} ({:.1}s)",
                elapsed.as_secs_f64()
            ),
            Err(msg) => {
                failed += 1;
                println!(
                    "FAIL criterion {name}: {msg} ({:.1}s)",
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    match criterion_10() {
        None => println!(
            "SKIP criterion 10 reference baselines (optional): set DISCO_LEWIDI_DIR to run"
        ),
        Some(Ok(msg)) => println!("PASS criterion 10 reference baselines (optional): {msg}"),
        Some(Err(msg)) => {
            println!("FAIL criterion 10 reference baselines (optional, not gating): {msg}")
        }
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
