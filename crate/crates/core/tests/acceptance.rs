//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tpb::autoencoder::{pretrain, AutoencoderConfig, PatchAutoencoder, PretrainConfig, PretrainOutcome};
use tpb::autograd::gradcheck::{check_gradients, max_rel_error};
use tpb::autograd::{normal, Gradients, ParamStore, Tape};
use tpb::bank::{
    build_bank, embed_corpus, kmeans_cosine, silhouette_samples, AutoK, BankConfig, BankMethod, KChoice, KMeansOptions,
    PatternBank, Provenance,
};
use tpb::data::synth::{generate_dataset, SynthSpec};
use tpb::data::{PatchWindow, HOURS_PER_WEEK};
use tpb::experiment::{run_experiment, ExperimentConfig};
use tpb::forecaster::{BankBinding, ForecastBatch, ForecastConfig, ForecastModel, Stage, Variant};
use tpb::meta_trainer::{fine_tune, reptile_epoch, reptile_meta_train, source_sets, target_sets, Half};

type Outcome = Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 ------------------------------------------------------------------------

fn autoencoder_gradcheck() -> f64 {
    let cfg = AutoencoderConfig {
        width: 8,
        patch_len: 3,
        patch_count: 4,
        channels: 1,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn: 16,
        pe_dropout: 0.1,
    };
    let mut r = rng(11);
    let model = PatchAutoencoder::new(cfg, &mut r).unwrap();
    let windows: Vec<PatchWindow> = [[true, false, true, false], [false, true, true, false]]
        .iter()
        .map(|mask| PatchWindow {
            patches: Array3::from_shape_fn((4, 3, 1), |_| r.random_range(-1.0..1.0)),
            mask: mask.to_vec(),
            hours: (0..4).map(|j| (100 + j) % HOURS_PER_WEEK).collect(),
        })
        .collect();
    let refs: Vec<&PatchWindow> = windows.iter().collect();
    let loss = |store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        let mut t = Tape::new(&m.store);
        let l = m.loss_var(&mut t, &refs, None).unwrap();
        t.scalar(l)
    };
    let mut t = Tape::new(&model.store);
    let l = model.loss_var(&mut t, &refs, None).unwrap();
    let grads = t.backward(l);
    max_rel_error(&check_gradients(&model.store, &grads, 1e-4, loss))
}

fn forecaster_gradcheck(variant: Variant) -> f64 {
    let cfg = ForecastConfig {
        variant,
        width: 8,
        query_width: 8,
        patch_len: 3,
        patch_count: 3,
        channels: 1,
        horizon: 2,
        heads: 2,
        aggregator_ffn: 16,
        backend_hidden: 4,
        backend_blocks: 2,
        head_hidden: 16,
        ..ForecastConfig::default()
    };
    let (n, k, b) = (5, 4, 2);
    let mut r = rng(21);
    let bank = PatternBank::new(normal(k, 8, 1.0, &mut r), false, provenance()).unwrap();
    let mut model = ForecastModel::new(cfg, Some(BankBinding::in_memory(bank)), &mut r).unwrap();
    model.attach_target(n).unwrap();
    let batch = ForecastBatch {
        samples: b,
        nodes: n,
        patch_count: 3,
        history: normal(b * n * 3, 3, 1.0, &mut r),
        hours: (0..b * 3).map(|_| r.random_range(0..HOURS_PER_WEEK)).collect(),
        target: normal(b * n, 2, 1.0, &mut r),
        prior: Some(normal(n, n, 1.0, &mut r).mapv(f64::abs)),
    };
    let mut t = Tape::new(&model.store);
    let l = model.loss_var(&mut t, &batch, Stage::Target).unwrap();
    let grads = t.backward(l);
    let checks = check_gradients(&model.store, &grads, 1e-4, |s| {
        let mut t = Tape::new(s);
        let l = model.loss_var(&mut t, &batch, Stage::Target).unwrap();
        t.scalar(l)
    });
    max_rel_error(&checks)
}

fn provenance() -> Provenance {
    Provenance {
        source_cities: vec![],
        sample_ratio: 1.0,
        seed: 0,
        silhouette: None,
        method: BankMethod::Kmeans,
    }
}

fn criterion_1() -> Outcome {
    let clock = Instant::now();
    let mut errs = vec![("autoencoder".to_string(), autoencoder_gradcheck())];
    for v in Variant::ALL {
        errs.push((format!("forecaster/{v}"), forecaster_gradcheck(v)));
    }
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let secs = clock.elapsed().as_secs_f64();
    let list: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst <= 1e-4 && secs < 120.0,
        format!(
            "max relative error {worst:.2e} ≤ 1e-4 [{}], {secs:.1} s < 120 s",
            list.join(", ")
        ),
    )
}

// 2 and 3 ------------------------------------------------------------------

fn criterion_2(pretrained: &mut Option<PretrainOutcome>) -> Outcome {
    let clock = Instant::now();
    let data = generate_dataset(&SynthSpec::default())
        .map_err(|e| e.to_string())?
        .dataset;
    let cfg = PretrainConfig {
        epochs: 30,
        seed: 0,
        ..PretrainConfig::default()
    };
    let outcome = pretrained.insert(pretrain(&data.source, &cfg).map_err(|e| e.to_string())?);
    let secs = clock.elapsed().as_secs_f64();
    let first = outcome.history[0].val_mse;
    let last = outcome.history.last().unwrap().val_mse;
    let ratio = last / first;
    check(
        outcome.history.len() == 31 && ratio <= 0.3 && secs < 600.0,
        format!(
            "validation masked MSE {first:.4} → {last:.4} after 30 epochs, ratio {ratio:.4} ≤ 0.30, {secs:.0} s < 600 s"
        ),
    )
}

fn silhouette_oracle(x: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let k = labels.iter().max().unwrap() + 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for j in 0..n {
            if i != j {
                let d = 1.0 - x.row(i).dot(&x.row(j)) / (norms[i] * norms[j]);
                sum[labels[j]] += d;
                count[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if count[own] == 0 {
            out.push(0.0);
            continue;
        }
        let a = sum[own] / count[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && count[c] > 0)
            .map(|c| sum[c] / count[c] as f64)
            .fold(f64::INFINITY, f64::min);
        out.push((b - a) / a.max(b));
    }
    out
}

fn criterion_3(outcome: &PretrainOutcome) -> Outcome {
    let embeddings = embed_corpus(&outcome.corpus, &outcome.model).unwrap();
    let mut picks = Vec::new();
    let mut oracle_gap = 0.0f64;
    for seed in 0..5 {
        let cfg = BankConfig {
            k: KChoice::Auto(AutoK::Auto),
            k_grid: (2..=10).collect(),
            seed,
            ..BankConfig::default()
        };
        let b = build_bank(&embeddings, vec![], &cfg).unwrap();
        picks.push(b.bank.k());
        if seed == 0 {
            let sample = embeddings.select(ndarray::Axis(0), &b.sample);
            let fast = silhouette_samples(&sample, &b.assignment.labels).unwrap();
            let slow = silhouette_oracle(&sample, &b.assignment.labels);
            oracle_gap = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        }
    }
    let hits = picks.iter().filter(|&&k| k == 5).count();
    check(
        hits >= 4 && oracle_gap <= 1e-12,
        format!(
            "selected K per seed {picks:?}, {hits}/5 equal 5; silhouette vs oracle max gap {oracle_gap:.1e} ≤ 1e-12"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn cosine_inertia(x: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                return 0.0;
            }
            let mut s = ndarray::Array1::<f64>::zeros(x.ncols());
            for &i in &members {
                let r = x.row(i);
                s += &(&r / r.dot(&r).sqrt());
            }
            members.len() as f64 - s.dot(&s).sqrt()
        })
        .sum()
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for trial in 0..100u64 {
        let mut r = rng(1000 + trial);
        let x = Array2::from_shape_simple_fn((8, 4), || StandardNormal.sample(&mut r));
        let best = (1u32..(1 << 7))
            .map(|mask| {
                let labels: Vec<usize> = (0..8).map(|i| ((mask << 1) >> i & 1) as usize).collect();
                cosine_inertia(&x, &labels, 2)
            })
            .fold(f64::INFINITY, f64::min);
        let fit = kmeans_cosine(&x, 2, &KMeansOptions::default(), &mut r).unwrap();
        let ratio = fit.assignment.inertia / best;
        worst = worst.max(ratio);
        if fit.assignment.inertia > 1.05 * best + 1e-12 {
            failures += 1;
        }
    }
    check(
        failures == 0,
        format!("100 trials of 8 points, worst inertia / exhaustive optimum {worst:.6} ≤ 1.05, {failures} failures"),
    )
}

// 5 ------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let cfg = ForecastConfig {
        width: 16,
        query_width: 16,
        heads: 2,
        aggregator_ffn: 32,
        ..ForecastConfig::default()
    };
    let mut r = rng(5);
    let bank = PatternBank::new(normal(4, 16, 1.0, &mut r), false, provenance()).unwrap();
    let mut model = ForecastModel::new(cfg, Some(BankBinding::in_memory(bank)), &mut r).unwrap();
    let mut row_err = 0.0f64;
    let mut uniform_err = 0.0f64;
    let mut shift_err = 0.0f64;
    let id = |m: &ForecastModel, name: &str| m.store.find(name).unwrap();
    let (kw, kb, qb) = (
        id(&model, "graph.key.weight"),
        id(&model, "graph.key.bias"),
        id(&model, "graph.query.bias"),
    );
    for trial in 0..1000u64 {
        let n = 2 + (trial % 12) as usize;
        let scale = 0.1 + (trial % 10) as f64 * 2.0;
        let m = normal(n, 16, scale, &mut r);
        let a = model.reconstruct_graph(&m).unwrap();
        for row in a.rows() {
            row_err = row_err.max((row.sum() - 1.0).abs());
        }

        let same = Array2::from_shape_fn((n, 16), |(_, j)| m[[0, j]]);
        let u = model.reconstruct_graph(&same).unwrap();
        uniform_err = uniform_err.max(u.iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max));

        // With the last key coordinate fixed at 1, adding c to the last query
        // coordinate of node i adds c to every score of row i.
        let saved = (
            model.store.get(kw).clone(),
            model.store.get(kb).clone(),
            model.store.get(qb).clone(),
        );
        model.store.get_mut(kw).column_mut(15).fill(0.0);
        model.store.get_mut(kb)[[0, 15]] = 1.0;
        let before = model.reconstruct_graph(&m).unwrap();
        model.store.get_mut(qb)[[0, 15]] += r.random_range(-25.0..25.0);
        let after = model.reconstruct_graph(&m).unwrap();
        shift_err = shift_err.max((&before - &after).iter().map(|d| d.abs()).fold(0.0, f64::max));
        *model.store.get_mut(kw) = saved.0;
        *model.store.get_mut(kb) = saved.1;
        *model.store.get_mut(qb) = saved.2;
    }
    check(
        row_err <= 1e-6 && uniform_err == 0.0 && shift_err <= 1e-9,
        format!(
            "1000 matrices: row-sum error {row_err:.1e} ≤ 1e-6, identical rows off uniform by {uniform_err:.1e} (exact), row shift changes {shift_err:.1e} ≤ 1e-9"
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let quad = |init: &[f64]| {
        let mut s = ParamStore::new();
        s.add("theta", Array2::from_shape_vec((1, init.len()), init.to_vec()).unwrap());
        s
    };
    let grad_of = |s: &ParamStore, c: &Array2<f64>| {
        let mut t = Tape::new(s);
        let th = t.param(s.find("theta").unwrap());
        let l = t.mse(th, c.clone(), None);
        t.backward(l)
    };

    let mut theta = quad(&[0.7, -1.1, 2.5]);
    let before = theta.clone();
    let c = Array2::from_shape_vec((1, 3), vec![-0.5, 0.25, 1.0]).unwrap();
    reptile_epoch(&mut theta, &[(), (), ()], 0.05, 0.3, 4, |s, _, half| match half {
        Half::Support => Ok(grad_of(s, &c)),
        Half::Query => Ok(Gradients::zeros_like(s)),
    })
    .unwrap();
    let unchanged = theta.bitwise_eq(&before);

    // Hand-computed SGD on mean((θ − c)²) over n entries: g = 2(θ − c)/n.
    let init = [2.0, -3.0, 0.5, 4.0, -1.0];
    let target = [0.5, 0.5, 0.5, -2.0, 1.0];
    let (alpha, steps, n) = (0.4, 5, init.len() as f64);
    let c = Array2::from_shape_vec((1, 5), target.to_vec()).unwrap();
    let mut theta = quad(&init);
    let stored = reptile_epoch(&mut theta, &[()], alpha, 0.1, steps, |s, _, _| Ok(grad_of(s, &c))).unwrap();
    let id = theta.find("theta").unwrap();
    let mut hand: Vec<f64> = init.to_vec();
    let mut gap = 0.0f64;
    for g in &stored[0] {
        // One support step, then the query gradient at the new point.
        for (t, c) in hand.iter_mut().zip(&target) {
            *t -= alpha * 2.0 * (*t - c) / n;
        }
        for (j, (t, c)) in hand.iter().zip(&target).enumerate() {
            gap = gap.max((g.get(id).unwrap()[[0, j]] - 2.0 * (t - c) / n).abs());
        }
    }
    let count_ok = stored[0].len() == steps;
    check(
        unchanged && count_ok && gap <= 1e-10,
        format!(
            "zero query gradients leave θ bitwise unchanged: {unchanged}; {} stored gradients vs hand SGD max gap {gap:.1e} ≤ 1e-10",
            stored[0].len()
        ),
    )
}

// 7 and 8 ------------------------------------------------------------------

struct Ablation {
    cfg: ExperimentConfig,
    dir: tempfile::TempDir,
}

fn criterion_7() -> (Outcome, Option<Ablation>) {
    let cfg = ExperimentConfig::load(&repo_root().join("configs/benchmark.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let clock = Instant::now();
    let report = match run_experiment(&cfg, dir.path(), true) {
        Ok(r) => r,
        Err(e) => return (Err(format!("benchmark run failed: {e}")), None),
    };
    let secs = clock.elapsed().as_secs_f64();
    let med = |v: Variant| report.report(v).map(|r| r.median_rmse).unwrap_or(f64::NAN);
    let (full, no_clu, no_meta, no_adj) = (
        med(Variant::Full),
        med(Variant::NoClu),
        med(Variant::NoMeta),
        med(Variant::NoAdj),
    );
    let gap = 1.0 - full / no_meta;
    let seeds = report.reports[0].seeds.len();
    let outcome = check(
        full < no_clu && full < no_meta && gap >= 0.03 && secs < 1800.0 && seeds == 5,
        format!(
            "median test RMSE over {seeds} seeds: full {full:.4}, no_clu {no_clu:.4}, no_meta {no_meta:.4} (full {:.1}% below, ≥ 3%), no_adj {no_adj:.4}; {secs:.0} s < 1800 s",
            100.0 * gap
        ),
    );
    (outcome, Some(Ablation { cfg, dir }))
}

fn criterion_8(ablation: Option<&Ablation>) -> Outcome {
    let Some(a) = ablation else {
        return Err("no benchmark bank to test (criterion 7 run failed)".into());
    };
    let cfg = &a.cfg;
    let bank_path = a.dir.path().join("bank.tpb");
    let file_before = fs::read(&bank_path).unwrap();
    let binding = BankBinding::from_file(&bank_path).unwrap();
    let mut model = ForecastModel::new(cfg.forecast_for(Variant::Full), Some(binding), &mut rng(8)).unwrap();
    let before: Vec<u64> = model.bank().unwrap().matrix().iter().map(|v| v.to_bits()).collect();
    let data = generate_dataset(&cfg.data.synth).unwrap().dataset;
    let f = &cfg.forecast;
    let sources = source_sets(&data.source, f.patch_len, f.patch_count, f.horizon).unwrap();
    let (train, _) = target_sets(&data, f.patch_len, f.patch_count, f.horizon).unwrap();
    reptile_meta_train(&mut model, &sources, &cfg.meta).unwrap();
    fine_tune(&mut model, &train, &cfg.finetune).unwrap();
    let after: Vec<u64> = model.bank().unwrap().matrix().iter().map(|v| v.to_bits()).collect();
    let file_same = fs::read(&bank_path).unwrap() == file_before;
    check(
        before == after && file_same,
        format!(
            "{} bank entries bitwise identical after {} meta-epochs and {} fine-tuning epochs: {}; bank file unchanged: {file_same}",
            before.len(),
            cfg.meta.meta_epochs,
            cfg.finetune.epochs,
            before == after
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn tpb(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tpb"))
        .args(args)
        .arg("--deterministic")
        .current_dir(dir)
        .env("TPB_DATA_DIR", "data")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("tpb {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let smoke = fs::read_to_string(repo_root().join("configs/smoke.toml")).unwrap();
    fs::write(dir.join("smoke.toml"), &smoke).unwrap();
    let staged = format!("{smoke}\n[paths]\nencoder = \"enc.ckpt\"\nbank = \"bank.tpb\"\nmodel = \"meta.model\"\n");
    fs::write(dir.join("stage.toml"), &staged).unwrap();
    fs::write(dir.join("eval.toml"), staged.replace("\"meta.model\"", "\"ft.model\"")).unwrap();
    tpb(dir, &["generate-data", "--config", "smoke.toml"])?;
    tpb(dir, &["pretrain", "--config", "smoke.toml", "--out", "enc.ckpt"])?;
    tpb(dir, &["build-bank", "--config", "stage.toml", "--out", "bank.tpb"])?;
    tpb(dir, &["meta-train", "--config", "stage.toml", "--out", "meta.model"])?;
    tpb(dir, &["fine-tune", "--config", "stage.toml", "--out", "ft.model"])?;
    tpb(dir, &["evaluate", "--config", "eval.toml", "--out", "eval"])?;
    tpb(
        dir,
        &["export-embeddings", "--config", "stage.toml", "--out", "emb.tpb"],
    )?;
    tpb(dir, &["sweep-k", "--config", "stage.toml", "--out", "sweep"])?;
    tpb(dir, &["run", "--config", "smoke.toml", "--out", "run", "--seed", "3"])
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let reports = ta
        .iter()
        .filter(|(p, _)| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "csv" | "txt")))
        .count();
    let differing: Vec<String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    check(
        ta.len() == tb.len() && differing.is_empty() && reports > 0,
        format!(
            "two CLI pipeline runs (generate-data through evaluate, export, sweep-k, run): {} files, {reports} reports, {} differ {differing:?}",
            ta.len(),
            differing.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let clock = Instant::now();
        let outcome = f();
        let secs = clock.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {n} {name}: {detail} ({secs:.1} s)");
        results.push((n, name, outcome, secs));
    };

    record(1, "gradient integrity", &mut criterion_1);
    let mut pretrained = None;
    record(2, "pre-training efficacy", &mut || criterion_2(&mut pretrained));
    record(3, "pattern recovery", &mut || match &pretrained {
        Some(outcome) => criterion_3(outcome),
        None => Err("no encoder to embed with (criterion 2 failed to train)".into()),
    });
    record(4, "clustering optimality", &mut criterion_4);
    record(5, "graph contract", &mut criterion_5);
    record(6, "reptile contract", &mut criterion_6);
    let mut ablation = None;
    record(7, "ablation direction", &mut || {
        let (o, a) = criterion_7();
        ablation = a;
        o
    });
    record(8, "freeze contract", &mut || criterion_8(ablation.as_ref()));
    record(9, "reproducibility", &mut criterion_9);

    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: criteria {failed:?} fail");
        std::process::exit(1);
    }
}
