//! Acceptance report: one PASS/FAIL line per primary criterion, then a
//! failing assertion if any criterion failed.
//!
//! cargo test --release --test acceptance

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trnasformer::bagging::kmeans::{lloyd, nearest, objective};
use trnasformer::bagging::{decode_bag, encode_bag, Split};
use trnasformer::eval::{
    adjust_pvalues, evaluate_slides, group_by_slide, pearson, prediction_errors, search_slides,
    spearman, write_eval_reports, write_search_report, ApNorm, Correction, DEFAULT_ALPHA,
};
use trnasformer::genes::{filter_median_zero, log_transform, GeneTable};
use trnasformer::model::{total_loss, GeneLoss, Model, ModelConfig, Pool, TestAverage};
use trnasformer::numcore::gradcheck::check_gradients_each;
use trnasformer::numcore::{Tape, Tensor};
use trnasformer::synth::{generate, oracle_bayes_accuracy, SynthSpec};
use trnasformer::train::{train, TrainConfig};
use trnasformer::Error;

use common::{block_conv, counted_ranks, direct_pearson, ensure, normal, permute_rows, Check};

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f64>::new(cfg.clone(), 11).map_err(|e| e.to_string())?;
    let ct = model.layout.class_token;
    model.store.get_mut(ct).value = normal(&[1, cfg.width], 1).map(|v| 0.1 * v);
    let pos = model.layout.pos_embed;
    model.store.get_mut(pos).value = normal(&[cfg.k + 1, cfg.width], 2).map(|v| 0.1 * v);
    let x = normal(&[cfg.k, cfg.d], 3);
    let target = [0.3, -0.2, 0.1, 0.5, -0.4];
    let inputs: Vec<Tensor<f64>> = model.store.params().iter().map(|p| p.value.clone()).collect();
    let mut worst = 0.0f64;
    for pool in [Pool::TopN(2), Pool::Test(TestAverage::Mean)] {
        let errors = check_gradients_each(&inputs, 1e-6, |tape, vars| {
            let out = model.forward(vars, tape.constant(x.clone()), pool, None)?;
            total_loss(out.logits, 1, out.genes, &target, 0.5, GeneLoss::Mse)
        })
        .map_err(|e| e.to_string())?;
        for (name, err) in model.store.names().iter().zip(&errors) {
            ensure(*err < 1e-4, || format!("{pool:?} {name}: relative error {err:e}"))?;
            worst = worst.max(*err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} tensors, max rel err {worst:.1e}, {secs:.1}s", inputs.len()))
}

fn architecture_invariants() -> Check {
    let err = |e: Error| e.to_string();
    let cfg = ModelConfig::tiny();

    let mut model = Model::<f64>::new(cfg.clone(), 5).map_err(err)?;
    let ct = model.layout.class_token;
    model.store.get_mut(ct).value = normal(&[1, cfg.width], 6);
    let x = normal(&[cfg.k, cfg.d], 9);
    let base = model.predict(&x).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut perm_diff = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..cfg.k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let p = model.predict(&permute_rows(&x, &perm)).map_err(err)?;
        for (a, b) in base.logits.iter().zip(&p.logits).chain(base.c.iter().zip(&p.c)) {
            perm_diff = perm_diff.max((a - b).abs());
        }
    }
    ensure(perm_diff < 1e-6, || format!("permutation changed logits or c by {perm_diff:e}"))?;

    let cfg6 = ModelConfig { k: 6, n_set: vec![1], ..ModelConfig::tiny() };
    let model6 = Model::<f64>::new(cfg6.clone(), 8).map_err(err)?;
    for seed in 0..20 {
        let x = normal(&[cfg6.k, cfg6.d], seed);
        let s: Vec<Vec<f64>> = (1..=cfg6.k)
            .map(|n| model6.predict_with(&x, Pool::TopN(n)).map(|p| p.genes))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        for n in 1..cfg6.k {
            for g in 0..cfg6.genes {
                ensure(s[n][g] <= s[n - 1][g], || format!("S({}) > S({n}) for gene {g}", n + 1))?;
            }
        }
    }

    let mut zeroed = Model::<f64>::new(cfg.clone(), 2).map_err(err)?;
    for (i, name) in zeroed.store.names().to_vec().iter().enumerate() {
        if name.starts_with("block") && (name.contains(".attn.") || name.contains(".mlp.")) {
            zeroed.store.params_mut()[i].value.fill(0.0);
        }
    }
    let z0 = normal(&[cfg.k + 1, cfg.width], 3);
    let tape = Tape::new();
    let vars = zeroed.store.bind(&tape);
    let z = zeroed.encoder_forward(&vars, tape.constant(z0.clone()), None).map_err(err)?;
    let identity = z.value().max_abs_diff(&z0);
    ensure(identity == 0.0, || format!("zero-weight encoder moved tokens by {identity:e}"))?;

    let wide = ModelConfig { d: 1024, k: 49, width: 16, heads: 4, n_set: vec![1], ..ModelConfig::tiny() };
    let wmodel = Model::<f64>::new(wide, 4).map_err(err)?;
    let x = normal(&[49, 1024], 12);
    let tape = Tape::new();
    let vars = wmodel.store.bind(&tape);
    let z0 = wmodel.embed_input(&vars, tape.constant(x.clone())).map_err(err)?;
    let z0 = z0.value();
    let conv = block_conv(&x, &wmodel.store.get(wmodel.layout.embed).value);
    let tokens = Tensor::from_fn(&[49, 16], |i| z0.at(i / 16 + 1, i % 16));
    let conv_diff = tokens.max_abs_diff(&conv);
    ensure(conv_diff < 1e-6, || format!("block convolution differs by {conv_diff:e}"))?;

    Ok(format!("perm {perm_diff:.1e}, S(n) monotone, identity exact, conv {conv_diff:.1e}"))
}

fn end_to_end() -> Check {
    let err = |e: Error| e.to_string();
    let start = Instant::now();
    let spec = SynthSpec::low_noise();
    let data = generate(&spec).map_err(err)?;
    let oracle = oracle_bayes_accuracy(&spec, 100_000, 7).map_err(err)?;
    let config = ModelConfig::desk(spec.d, data.gene_ids.len(), spec.classes);
    let outcome = train(
        Model::new(config, 0).map_err(err)?,
        &data.bags_in(Split::Train),
        &data.bags_in(Split::Val),
        TrainConfig::desk(),
        None,
        false,
    )
    .map_err(err)?;
    let best = outcome.best.model().map_err(err)?;
    let test = group_by_slide(data.bags_in(Split::Test));
    let report = evaluate_slides(&best, &test, &data.gene_ids, DEFAULT_ALPHA).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let acc = report.classification.accuracy;
    let r = report.genes.mean_pearson;
    let detail = format!(
        "slide acc {acc:.3} vs oracle {:.4}, mean r {r:.3}, {} test slides, {secs:.0}s",
        oracle.accuracy,
        test.len()
    );
    ensure(acc >= 0.95 * oracle.accuracy, || format!("accuracy too low: {detail}"))?;
    ensure(r >= 0.8, || format!("gene correlation too low: {detail}"))?;
    ensure(secs < 600.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn metric_oracles() -> Check {
    let err = |e: Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..200 {
        let n = rng.random_range(3..40);
        // integer-valued draws so Spearman sees ties
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if x.iter().all(|&v| v == x[0]) {
            continue;
        }
        let r = pearson(&x, &y).map_err(err)?.r;
        let oracle = direct_pearson(&x, &y);
        ensure((r - oracle).abs() <= 1e-12, || format!("pearson trial {trial}: {r} vs {oracle}"))?;
        let rho = spearman(&x, &y).map_err(err)?.r;
        let oracle = direct_pearson(&counted_ranks(&x), &counted_ranks(&y));
        ensure((rho - oracle).abs() <= 1e-12, || format!("spearman trial {trial}: {rho} vs {oracle}"))?;
    }

    let p = [0.041, 0.001, 0.039, 0.008];
    for method in [Correction::HolmSidak, Correction::BenjaminiHochberg] {
        let s = adjust_pvalues(&p, method, 0.01).map_err(err)?;
        ensure(s.count == 1 && s.rejected == [false, true, false, false], || {
            format!("{method:?} rejected {:?}", s.rejected)
        })?;
    }
    let mut rng_p = ChaCha8Rng::seed_from_u64(2024);
    for set in 0..10_000 {
        let m = rng_p.random_range(1..40);
        let p: Vec<f64> = (0..m)
            .map(|_| if rng_p.random_bool(0.3) { rng_p.random::<f64>() * 1e-3 } else { rng_p.random() })
            .collect();
        let hs = adjust_pvalues(&p, Correction::HolmSidak, 0.01).map_err(err)?.count;
        let bh = adjust_pvalues(&p, Correction::BenjaminiHochberg, 0.01).map_err(err)?.count;
        ensure(bh >= hs, || format!("set {set}: BH {bh} < HS {hs}"))?;
    }

    for trial in 0..100 {
        let (n, g) = (rng.random_range(2..12), rng.random_range(1..5));
        let pred = Tensor::from_fn(&[n, g], |_| rng.random_range(-2.0..2.0));
        let truth = Tensor::from_fn(&[n, g], |_| rng.random_range(-2.0..2.0));
        let ids: Vec<String> = (0..g).map(|j| format!("g{j}")).collect();
        let report = prediction_errors(&pred, &truth, &ids).map_err(err)?;
        for (j, e) in report.genes.iter().enumerate() {
            let col = |t: &Tensor<f64>| (0..n).map(|i| t.at(i, j)).collect::<Vec<_>>();
            let (a, b) = (col(&pred), col(&truth));
            let mean = b.iter().sum::<f64>() / n as f64;
            let mae = a.iter().zip(&b).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
            let sse: f64 = a.iter().zip(&b).map(|(p, t)| (p - t).powi(2)).sum();
            let sst: f64 = b.iter().map(|t| (t - mean).powi(2)).sum();
            let want = [mae, (sse / n as f64).sqrt(), (sse / sst).sqrt()];
            let got = [e.mae, e.rmse, e.rrmse];
            for (w, v) in want.iter().zip(&got) {
                ensure((w - v).abs() <= 1e-12, || format!("error trial {trial} gene {j}: {got:?} vs {want:?}"))?;
            }
        }
    }

    let search = common::search_enumeration()?;
    Ok(format!("correlations, corrections, errors exact; search over {search}"))
}

fn pipeline_invariants() -> Check {
    let err = |e: Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for instance in 0..100 {
        let n = rng.random_range(10..200);
        let k = rng.random_range(1..=10.min(n));
        let points: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0..40) as f64, rng.random_range(0..40) as f64])
            .collect();
        let (centers, labels, trace, converged) = lloyd(&points, k, 300, &mut rng).map_err(err)?;
        ensure(converged, || format!("instance {instance} did not converge"))?;
        for w in trace.windows(2) {
            ensure(w[1] <= w[0] * (1.0 + 1e-12), || format!("instance {instance}: cost rose {} -> {}", w[0], w[1]))?;
        }
        for (i, &p) in points.iter().enumerate() {
            ensure(nearest(p, &centers) == labels[i], || format!("instance {instance}: point {i} not at its nearest center"))?;
        }
        for c in 0..k {
            let members: Vec<[f64; 2]> = (0..n).filter(|&i| labels[i] == c).map(|i| points[i]).collect();
            ensure(!members.is_empty(), || format!("instance {instance}: cluster {c} empty"))?;
            let m = members.len() as f64;
            let mean = [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m];
            ensure((mean[0] - centers[c][0]).abs() < 1e-9 && (mean[1] - centers[c][1]).abs() < 1e-9, || {
                format!("instance {instance}: center {c} is not its members' mean")
            })?;
        }
        let cost = objective(&points, &centers, &labels);
        ensure((cost - trace[trace.len() - 1]).abs() <= 1e-9 * cost.max(1.0), || format!("instance {instance}: trace ends off the objective"))?;
    }

    let mut bags = 0;
    for seed in 0..3 {
        let spec = SynthSpec { slides_per_class: 2, bags_per_slide: 10, k: 16, d: 8, genes: 6, grid: 12, seed, ..SynthSpec::default() };
        let data = generate(&spec).map_err(err)?;
        let shape = data.manifest.shape();
        for bag in data.bags.iter().flatten() {
            let back = decode_bag(&encode_bag(bag).map_err(err)?).map_err(err)?;
            back.validate(Some(&shape)).map_err(err)?;
            ensure(&back == bag, || "bag changed through its file encoding".into())?;
            bags += 1;
        }
    }

    let ids = vec!["a".to_string(), "b".to_string()];
    let cases: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
    let table = GeneTable::new(ids, cases, vec![0.0, 0.0, 0.0, 1.0, 5.0, 5.0]).map_err(err)?;
    let kept = filter_median_zero(&table).map_err(err)?;
    ensure(kept.gene_ids == ["b"] && kept.dropped == ["a"], || format!("median filter kept {:?}", kept.gene_ids))?;
    let logged = log_transform(&kept).map_err(err)?;
    let want = [0.0, 2f64.log10(), 6f64.log10()];
    ensure(logged.column(0).iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), || format!("log column {:?}", logged.column(0)))?;
    let tens = GeneTable::new(vec!["x".into()], vec!["c0".into(), "c1".into()], vec![99.0, 9.0]).map_err(err)?;
    let tens = log_transform(&tens).map_err(err)?;
    ensure(tens.column(0) == [2.0, 1.0], || format!("log10(1+a) gave {:?}", tens.column(0)))?;
    ensure(matches!(filter_median_zero(&logged), Err(Error::Contract(_))), || "filter accepted a transformed table".into())?;
    ensure(matches!(log_transform(&logged), Err(Error::Contract(_))), || "second transform accepted".into())?;

    Ok(format!("100 k-means instances, {bags} bags validated, gene examples exact"))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Check {
    let err = |e: Error| e.to_string();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |dir: &Path| -> trnasformer::Result<()> {
        let spec = SynthSpec { slides_per_class: 5, bags_per_slide: 6, k: 8, d: 12, genes: 8, grid: 8, seed: 4, ..SynthSpec::default() };
        let data = generate(&spec)?;
        data.write(&dir.join("data"))?;
        let config = ModelConfig { k: spec.k, width: 16, heads: 2, n_set: vec![1, 2, 8], ..ModelConfig::desk(spec.d, data.gene_ids.len(), spec.classes) };
        let tc = TrainConfig { epochs: 3, batch: 16, seed: 9, ..TrainConfig::default() };
        let out = train(Model::new(config, 1)?, &data.bags_in(Split::Train), &data.bags_in(Split::Val), tc, Some(&dir.join("train")), false)?;
        let model = out.best.model()?;
        let mut held = data.bags_in(Split::Val);
        held.extend(data.bags_in(Split::Test));
        held.extend(data.bags_in(Split::Train).into_iter().take(30));
        let slides = group_by_slide(held);
        write_eval_reports(&dir.join("eval"), &evaluate_slides(&model, &slides, &data.gene_ids, DEFAULT_ALPHA)?)?;
        write_search_report(&dir.join("search"), &search_slides(&model, &slides, 20, &[1, 3], ApNorm::K, 5)?)
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a).map_err(err)?;
    run(&b).map_err(err)?;
    let (ta, tb) = (tree(&a), tree(&b));
    ensure(ta.keys().eq(tb.keys()), || "runs wrote different file sets".into())?;
    for (path, bytes) in &ta {
        ensure(tb[path] == *bytes, || format!("{} differs between runs", path.display()))?;
    }
    Ok(format!("{} files bit-identical across two runs", ta.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 6] = [
        ("gradient integrity", gradient_integrity),
        ("architecture invariants", architecture_invariants),
        ("metric oracles", metric_oracles),
        ("pipeline invariants", pipeline_invariants),
        ("reproducibility", reproducibility),
        ("end-to-end synthetic run", end_to_end),
    ];
    // written to the handle directly so the report survives output capture
    let mut out = std::io::stdout();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let line = match check() {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(why) => {
                failed.push(name);
                format!("FAIL  {name}: {why}")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
