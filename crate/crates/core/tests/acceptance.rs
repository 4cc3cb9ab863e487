//! Acceptance suite. Runs without the libtest harness so that every criterion prints
//! exactly one PASS/FAIL line; the process exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use acae::bank::split_by_label;
use acae::bench::bench_overhead;
use acae::eval::{
    average_precision, compute_components, evaluate_table, hit_at, metrics_from_rankings, sweep_lambda,
    sweep_subsets, EvalProtocol,
};
use acae::exec::Execution;
use acae::grad::{grad_check_suite, merge_reports, DEFAULT_STEP, DEFAULT_TOLERANCE};
use acae::head::{acae_forward, prepare, AcaeParams, HeadConfig};
use acae::oim::{oim_loss, OimState};
use acae::rerank::{pairwise_sq_distances, rerank_distances, RerankParams};
use acae::seed::named_seed;
use acae::similarity::{rank_desc, rescale_factors, rescale_gallery, score_query, FusionConfig, SubsetFlags};
use acae::synth::{generate, ScenarioConfig};
use acae::tensor::{norm, Matrix};
use acae::train::{TrainSchedule, Trainer};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let sizes = [1usize, 2, 5];
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let k = i as usize;
        let (n, m) = (sizes[k % 3], sizes[(k / 3) % 3]);
        let d = [4usize, 8][(k / 9) % 2];
        let h = 1 + (k / 18) % 2;
        let p = random_params(1000 + i, d, h);
        let a = random_set(2000 + i, 0, n, d);
        let b = random_set(3000 + i, 1, m, d);
        let out = acae_forward(&a, &b, &p).map_err(|e| e.to_string())?;
        let (oa, ob) = pair(&rows(&a.features), &rows(&b.features), &p);
        for (o, f) in [(&oa, &out.a), (&ob, &out.b)] {
            worst = worst
                .max(max_abs_diff(&o.intra, &f.intra))
                .max(max_abs_diff(&o.inter, &f.inter))
                .max(max_abs_diff(&o.final_, &f.final_));
        }
    }
    ensure(worst < 1e-8, format!("max abs diff {worst:.3e}"))?;
    within(t.elapsed(), 10.0)?;
    Ok(format!("100 instances, max abs diff {worst:.2e}, {:.2}s", t.elapsed().as_secs_f64()))
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let count = 24;
    let reports = grad_check_suite(7, count, DEFAULT_TOLERANCE, DEFAULT_STEP, Execution::default())
        .map_err(|e| e.to_string())?;
    let merged = merge_reports(&reports);
    let failing: Vec<String> = merged.failing().map(|b| format!("{} {:.2e}", b.name, b.max_rel_error)).collect();
    ensure(failing.is_empty(), format!("failing blocks: {}", failing.join(", ")))?;
    within(t.elapsed(), 60.0)?;
    Ok(format!(
        "{count} instances, {} blocks, max rel err {:.2e}, {:.2}s",
        merged.blocks.len(),
        merged.max_rel_error(),
        t.elapsed().as_secs_f64()
    ))
}

fn similarity_reductions() -> Outcome {
    let p = random_params(31, 8, 2);
    let query = random_set(32, 0, 3, 8);
    let gallery: Vec<_> = (0..6).map(|i| random_set(40 + i, 1 + i, 1 + (i as usize) % 4, 8)).collect();
    let pq = prepare(&query.features, &p).map_err(|e| e.to_string())?;
    let pg: Vec<_> = gallery.iter().map(|g| prepare(&g.features, &p).unwrap()).collect();
    let refs: Vec<(u64, &_)> = gallery.iter().zip(&pg).map(|(g, o)| (g.image_id, o)).collect();
    let scored = score_query(&pq, 0, &refs, &p, &FusionConfig::baseline()).map_err(|e| e.to_string())?;
    let appearance: Vec<f64> = scored.components.iter().map(|c| c.appearance).collect();
    ensure(scored.scores() == appearance.as_slice(), "lambda 0 scores differ from appearance")?;
    let plain: Vec<f64> = gallery
        .iter()
        .flat_map(|g| g.features.iter_rows().map(|r| cosine(query.features.row(0), r)).collect::<Vec<_>>())
        .collect();
    ensure(scored.ranking() == rank_desc(&plain), "lambda 0 ranking differs from plain retrieval")?;
    for subset in SubsetFlags::non_empty() {
        let cfg = FusionConfig { lambda: 1.0, subset, rescale: false, ..Default::default() };
        let only = scored.refuse(&cfg).map_err(|e| e.to_string())?;
        let ctx: Vec<f64> = only.components.iter().map(|c| c.contextual(subset)).collect();
        ensure(only.scores() == ctx.as_slice(), format!("lambda 1 mixes appearance ({})", subset.label()))?;
    }
    ensure(rescale_gallery(&[0.37], &[0..1]) == vec![0.37], "singleton group changed")?;
    ensure(rescale_gallery(&[0.5, 0.5, -0.2], &[0..2, 2..3]) == vec![0.5, 0.5, -0.2], "tied group changed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..1000 {
        let s: Vec<f64> = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let arg = rank_desc(&s)[0];
        let r = rescale_gallery(&s, &[0..s.len()]);
        ensure(r[arg] == s[arg], "group argmax score moved")?;
        ensure(rescale_factors(&s, &[0..s.len()]).iter().all(|f| *f > 0.0 && *f <= 1.0), "factor outside (0, 1]")?;
    }
    Ok("lambda 0 and 1 reductions exact; singleton, tied and argmax scores unchanged".into())
}

struct Scenario {
    baseline: f64,
    lambdas: Vec<(f64, f64)>,
    subsets: Vec<(String, f64)>,
    elapsed: Duration,
}

/// Same pipeline and seeds as the CLI's `train` then `eval` with default settings.
fn run_scenario() -> Result<Scenario, String> {
    let t = Instant::now();
    let root = 0;
    let cfg = ScenarioConfig { seed: named_seed(root, "data"), ..Default::default() };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(root, "init"));
    let params = AcaeParams::init(HeadConfig::new(cfg.dim), &mut rng).map_err(|e| e.to_string())?;
    let mut oim_rng = ChaCha8Rng::seed_from_u64(named_seed(root, "oim"));
    let oim = OimState::random(ds.n_identities, cfg.dim, &mut oim_rng);
    let mut trainer = Trainer::new(params, &ds.images, oim, TrainSchedule::default(), named_seed(root, "train"))
        .map_err(|e| e.to_string())?;
    trainer.train(&ds.images).map_err(|e| e.to_string())?;
    let protocol = EvalProtocol { seed: named_seed(root, "eval"), ..Default::default() };
    let table = compute_components(&ds.images, Some(&trainer.params), &protocol, Execution::default())
        .map_err(|e| e.to_string())?;
    let base = FusionConfig::default();
    let baseline = evaluate_table(&table, &FusionConfig::baseline(), "baseline").map_err(|e| e.to_string())?;
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let lambdas = sweep_lambda(&table, &grid, &base).map_err(|e| e.to_string())?;
    let subsets = sweep_subsets(&table, &base).map_err(|e| e.to_string())?;
    Ok(Scenario {
        baseline: 100.0 * baseline.metrics.map,
        lambdas: grid.iter().zip(&lambdas).map(|(l, r)| (*l, 100.0 * r.metrics.map)).collect(),
        subsets: subsets.iter().skip(1).map(|r| (r.label.clone(), 100.0 * r.metrics.map)).collect(),
        elapsed: t.elapsed(),
    })
}

fn context_gain(s: &Scenario) -> Outcome {
    let at = |l: f64| s.lambdas.iter().find(|(x, _)| (*x - l).abs() < 1e-12).map(|(_, m)| *m).unwrap();
    let gain = at(0.4) - s.baseline;
    ensure(gain >= 2.0, format!("lambda 0.4 gains {gain:.2} mAP over {:.2}", s.baseline))?;
    let below: Vec<String> = s
        .lambdas
        .iter()
        .filter(|(_, m)| *m < s.baseline)
        .map(|(l, m)| format!("{l}: {m:.2}"))
        .collect();
    ensure(below.is_empty(), format!("below baseline {:.2}: {}", s.baseline, below.join(", ")))?;
    within(s.elapsed, 600.0)?;
    let worst = s.lambdas.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "baseline {:.2}, lambda 0.4 {:.2} (+{gain:.2}), sweep min {worst:.2}, {:.0}s",
        s.baseline,
        at(0.4),
        s.elapsed.as_secs_f64()
    ))
}

fn subset_ordering(s: &Scenario) -> Outcome {
    let overall = s.subsets.iter().find(|(l, _)| l == "overall").map(|(_, m)| *m).ok_or("no overall row")?;
    for (label, m) in &s.subsets {
        ensure(*m > s.baseline, format!("{label} {m:.2} does not beat baseline {:.2}", s.baseline))?;
        if SubsetFlags::non_empty().iter().any(|f| f.count() == 1 && f.label() == *label) {
            ensure(overall >= m - 0.5, format!("overall {overall:.2} vs {label} {m:.2}"))?;
        }
    }
    let single_best = s
        .subsets
        .iter()
        .filter(|(l, _)| SubsetFlags::non_empty().iter().any(|f| f.count() == 1 && f.label() == *l))
        .map(|(_, m)| *m)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(format!("overall {overall:.2}, best single {single_best:.2}, baseline {:.2}", s.baseline))
}

fn memory_bank() -> Outcome {
    let cfg = ScenarioConfig { n_identities: 12, dim: 16, n_images: 60, ..Default::default() };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;
    let make = |lr: f64, freeze: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let params = AcaeParams::init(HeadConfig::new(16).with_heads(2), &mut rng).unwrap();
        let oim = OimState::random(ds.n_identities, 16, &mut rng);
        let schedule = TrainSchedule { lr, freeze_first_epoch: freeze, ..Default::default() };
        Trainer::new(params, &ds.images, oim, schedule, 62).unwrap()
    };
    let mut t = make(0.0, false);
    let before = t.params.clone();
    t.train_epoch(&ds.images).map_err(|e| e.to_string())?;
    ensure(t.params == before, "lr 0 changed parameters")?;
    for im in &ds.images {
        let stored = t.bank.fetch(im.image_id).ok_or(format!("image {} never written", im.image_id))?;
        let (l, u) = split_by_label(&im.features, &im.labels);
        ensure(stored.features == l.vstack(&u).unwrap(), format!("image {} differs", im.image_id))?;
    }
    let mut t = make(2.0, true);
    let before = t.params.clone();
    let stats = t.train_epoch(&ds.images).map_err(|e| e.to_string())?;
    ensure(stats.frozen && t.params == before, "frozen epoch changed parameters")?;
    ensure(t.bank.written_images().count() == ds.images.len(), "frozen epoch skipped bank writes")?;
    Ok(format!("{} images bit-equal after lr 0 epoch; frozen epoch keeps params", ds.images.len()))
}

fn oim_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut s = OimState::random(9, 8, &mut rng).with_capacity(12);
    let mut worst_sum: f64 = 0.0;
    for i in 0..1000 {
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&x);
        let x: Vec<f64> = x.iter().map(|v| v / n).collect();
        worst_sum = worst_sum.max((s.probabilities(&x).iter().sum::<f64>() - 1.0).abs());
        if i % 4 == 0 {
            s.push_unlabeled(&x);
        } else {
            s.update_lut(rng.gen_range(0..9), &x).map_err(|e| e.to_string())?;
        }
    }
    ensure(worst_sum < 1e-9, format!("probabilities off by {worst_sum:.2e}"))?;
    let worst_norm = s.lut().iter_rows().map(|r| (norm(r) - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst_norm < 1e-6, format!("LUT row norm off by {worst_norm:.2e}"))?;
    let two = OimState::new(Matrix::identity(2), 0, 1.0, 0.5).map_err(|e| e.to_string())?;
    let x = Matrix::from_rows(&[[1.0, 0.0]], 2).unwrap();
    let loss = oim_loss(&x, &[Some(0)], &two).map_err(|e| e.to_string())?.loss;
    let e = std::f64::consts::E;
    let expect = -(e / (e + 1.0)).ln();
    ensure((loss - expect).abs() < 1e-9, format!("loss {loss} vs {expect}"))?;
    Ok(format!("sum err {worst_sum:.1e}, two-identity loss {loss:.6}, LUT norm err {worst_norm:.1e} after 1000 updates"))
}

fn k_reciprocal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let x = Matrix::new(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let d = pairwise_sq_distances(&x);
    let same = rerank_distances(&d, 2, &RerankParams { k1: 3, k2: 2, lambda: 1.0 }).map_err(|e| e.to_string())?;
    for i in 0..2 {
        for g in 0..4 {
            ensure(same.get(i, g) == d.get(i, 2 + g), "lambda_r 1 changed a distance")?;
        }
    }
    let mut worst: f64 = 0.0;
    for (k1, k2, lambda) in [(3, 2, 0.3), (4, 1, 0.0), (5, 3, 0.7)] {
        let fast = rerank_distances(&d, 1, &RerankParams { k1, k2, lambda }).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&k_reciprocal_oracle(&rows(&d), 1, k1, k2, lambda), &fast));
    }
    ensure(worst < 1e-9, format!("oracle diff {worst:.2e}"))?;
    Ok(format!("identity exact; 6-point oracle diff {worst:.1e}"))
}

fn metrics() -> Outcome {
    ensure(average_precision(&[true]) == Some(1.0), "[1]")?;
    ensure(average_precision(&[false, true]) == Some(0.5), "[0,1]")?;
    ensure(average_precision(&[true, false, true]) == Some(5.0 / 6.0), "[1,0,1]")?;
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let lists: Vec<Vec<bool>> = (0..200)
        .map(|_| {
            let mut l: Vec<bool> = (0..rng.gen_range(1..30)).map(|_| rng.gen_bool(0.2)).collect();
            let k = rng.gen_range(0..l.len());
            l[k] = true;
            l
        })
        .collect();
    let (m, aps) = metrics_from_rankings(&lists).map_err(|e| e.to_string())?;
    ensure(m.map == aps.iter().sum::<f64>() / aps.len() as f64, "mAP is not the mean AP")?;
    ensure(m.top1 <= m.top5 && m.top5 <= m.top10, "top-k not monotone")?;
    ensure(lists.iter().all(|l| !hit_at(l, 1) || hit_at(l, 5)), "hit@1 without hit@5")?;
    Ok(format!("fixtures exact; mAP {:.4} over {} lists", m.map, aps.len()))
}

fn overhead() -> Outcome {
    let cfg = ScenarioConfig { n_images: 60, ..Default::default() };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params = AcaeParams::init(HeadConfig::new(cfg.dim), &mut rng).map_err(|e| e.to_string())?;
    let r = bench_overhead(&ds.images, &params, 5, 50).map_err(|e| e.to_string())?;
    let delta = r.delta_ms().ok_or("empty report")?;
    let text = r.render();
    ensure(!r.is_empty() && r.pairs == 50, "report missing rows")?;
    ensure(text.contains("appearance") && text.contains("delta"), "rendered report incomplete")?;
    ensure(delta > 0.0, format!("delta {delta:.4} ms"))?;
    let empty = bench_overhead(&ds.images, &params, 0, 50).map_err(|e| e.to_string())?;
    ensure(empty.is_empty(), "repeats 0 produced timings")?;
    Ok(format!("head adds {delta:.4} ms per pair"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 oracle equivalence", oracle_equivalence()),
        ("2 gradient check", gradient_check()),
        ("3 similarity reductions", similarity_reductions()),
    ];
    match run_scenario() {
        Ok(s) => {
            results.push(("4 context gain", context_gain(&s)));
            results.push(("5 subset ordering", subset_ordering(&s)));
        }
        Err(e) => {
            results.push(("4 context gain", Err(e.clone())));
            results.push(("5 subset ordering", Err(e)));
        }
    }
    results.push(("6 memory bank", memory_bank()));
    results.push(("7 OIM properties", oim_properties()));
    results.push(("8 k-reciprocal", k_reciprocal()));
    results.push(("9 metrics", metrics()));
    results.push(("10 overhead report", overhead()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name:<24} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
