//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use esmerge_core::checkpoint::{load_adapter, ToyModalityOptions};
use esmerge_core::grad::{check_gradients, trace_batch, GradCheckOptions};
use esmerge_core::merge::{avg_merge, merge_adapters, ties_merge, FusedCoefficients};
use esmerge_core::pipeline::{probe_seed, run_coefficients, swd_table, CoefficientMode, CoefficientOptions};
use esmerge_core::rng::{gaussian_mat, stream};
use esmerge_core::{
    build_probe_batch, gen_toy_bundle, integrate, swd, toy_modalities, wasserstein_1d, LayerCoefficients, LoraAdapter,
    LoraParams, Mat, ModelBundle, ModelConfig, Target,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn toy(seed: u64) -> ModelBundle {
    let cfg = ModelConfig::default();
    let mods = toy_modalities(seed, cfg.d_model, &ToyModalityOptions::default()).unwrap();
    gen_toy_bundle(seed, &cfg, &mods).unwrap()
}

fn adapters_in_order(b: &ModelBundle, models: &[String]) -> Vec<LoraAdapter> {
    models.iter().map(|m| b.adapter(m).unwrap().clone()).collect()
}

fn gradient_correctness() -> Outcome {
    let b = toy(1);
    let batch = build_probe_batch(&b.modalities, 8, probe_seed(1)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let opts = GradCheckOptions {
        samples: 100,
        step: 1e-5,
        seed: 17,
        min_r: 1e-6,
    };
    let report = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| check_gradients(&b, &batch, &opts))
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let max = report.max_rel_err();
    let msg = format!("{} entries, max rel err {max:.3e}, {secs:.1}s", report.samples.len());
    if report.samples.len() >= 100 && max <= 1e-4 && secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn brute_force_w(x: &[f64], y: &[f64], p: f64) -> f64 {
    fn permute(k: usize, idx: &mut Vec<usize>, x: &[f64], y: &[f64], p: f64, best: &mut f64) {
        if k == idx.len() {
            let c: f64 = idx.iter().enumerate().map(|(i, &j)| (x[i] - y[j]).abs().powf(p)).sum();
            *best = best.min(c);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute(k + 1, idx, x, y, p, best);
            idx.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    permute(0, &mut (0..x.len()).collect(), x, y, p, &mut best);
    (best / x.len() as f64).powf(1.0 / p)
}

fn exact_wasserstein() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = stream(seed);
        let k = rng.random_range(1..=6);
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        for p in [1.0, 2.0] {
            let w = wasserstein_1d(&x, &y, p).map_err(|e| e.to_string())?;
            worst = worst.max((w - brute_force_w(&x, &y, p)).abs());
        }
    }
    let msg = format!("200 seeds, p in {{1, 2}}, max |sorted - brute force| {worst:.2e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn swd_sanity() -> Outcome {
    let x = gaussian_mat(&mut stream(5), 64, 32, 1.0);
    let self_d = swd(&x, &x, 1024, 2.0, 9).map_err(|e| e.to_string())?;
    let u = gaussian_mat(&mut stream(6), 1, 32, 1.0);
    let norm = u.frobenius_norm();
    let shifted: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|c| {
            let y = Mat::from_fn(64, 32, |i, j| x.get(i, j) + c * u.get(0, j) / norm);
            swd(&x, &y, 1024, 2.0, 9).unwrap()
        })
        .collect();
    let increasing = shifted.windows(2).all(|w| w[1] > w[0]);
    let a = gaussian_mat(&mut stream(7), 40, 1, 1.0);
    let b = gaussian_mat(&mut stream(8), 40, 1, 1.5);
    let one_d = swd(&a, &b, 16, 2.0, 3).map_err(|e| e.to_string())?;
    let exact = wasserstein_1d(a.data(), b.data(), 2.0).map_err(|e| e.to_string())?;
    let msg = format!(
        "SWD(X,X) = {self_d}, shifts {:.4} < {:.4} < {:.4}, d=1 gap {:.1e}",
        shifted[0],
        shifted[1],
        shifted[2],
        (one_d - exact).abs()
    );
    if self_d == 0.0 && increasing && (one_d - exact).abs() <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn specialization_signal() -> Outcome {
    let opts = CoefficientOptions::default();
    let mut good = 0;
    let mut failed = Vec::new();
    for seed in 0..20u64 {
        let b = toy(seed);
        let models: Vec<String> = b.modalities.iter().map(|m| m.tag.clone()).collect();
        let batch = build_probe_batch(&b.modalities, opts.k, probe_seed(seed)).unwrap();
        let base = trace_batch(&b, None, &batch).unwrap();
        let t = swd_table(&b, &batch, &base, &models, opts.projections, opts.p, seed).unwrap();
        let ok = (0..models.len()).all(|m| {
            let own = t.mean_shift(m, m);
            (0..t.modalities.len())
                .filter(|&x| x != m)
                .all(|x| own > t.mean_shift(m, x))
        });
        if ok {
            good += 1;
        } else {
            failed.push(seed);
        }
    }
    let msg = format!("matched modality dominates in {good}/20 seeds (failing: {failed:?})");
    if good >= 18 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn small_opts(seed: u64) -> CoefficientOptions {
    CoefficientOptions {
        seed,
        k: 8,
        projections: 64,
        ..CoefficientOptions::default()
    }
}

fn simplex_gap(values: &[LoraParams]) -> f64 {
    let cols: Vec<Vec<f64>> = values.iter().map(|p| p.values().collect()).collect();
    (0..cols[0].len())
        .map(|i| (cols.iter().map(|c| c[i]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn coefficient_simplex() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let b = toy(100 + seed);
        let run = run_coefficients(&b, &small_opts(seed), CoefficientMode::Fused).map_err(|e| e.to_string())?;
        let lc = run.layer.as_ref().unwrap();
        for l in 0..lc.n_layers() {
            worst = worst.max((lc.alpha.iter().map(|a| a[l]).sum::<f64>() - 1.0).abs());
        }
        worst = worst.max(simplex_gap(&run.element.as_ref().unwrap().beta));
        worst = worst.max(simplex_gap(&run.lambda.lambda));
    }
    let msg = format!("10 seeds, max |sum - 1| over alpha, beta, lambda {worst:.2e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fusion_degenerations() -> Outcome {
    let b = toy(21);
    let run = run_coefficients(&b, &small_opts(21), CoefficientMode::Fused).map_err(|e| e.to_string())?;
    let lc = run.layer.unwrap();
    let ec = run.element.unwrap();
    let n = lc.models.len();

    let uniform_alpha = LayerCoefficients {
        alpha: vec![vec![1.0 / n as f64; lc.n_layers()]; n],
        ..lc.clone()
    };
    let fused = integrate(&uniform_alpha, &ec).map_err(|e| e.to_string())?;
    let dev_beta = fused
        .lambda
        .iter()
        .zip(&ec.beta)
        .map(|(l, b)| l.max_abs_diff(b))
        .fold(0.0, f64::max);

    let mut uniform_beta = ec.clone();
    for p in &mut uniform_beta.beta {
        *p = p.map(|_| 1.0 / n as f64);
    }
    let fused = integrate(&lc, &uniform_beta).map_err(|e| e.to_string())?;
    let broadcast = FusedCoefficients::from_layer(&lc, &b.config).map_err(|e| e.to_string())?;
    let dev_alpha = fused
        .lambda
        .iter()
        .zip(&broadcast.lambda)
        .map(|(l, a)| l.max_abs_diff(a))
        .fold(0.0, f64::max);
    let msg = format!("uniform alpha: |lambda - beta| {dev_beta:.1e}; uniform beta: |lambda - alpha| {dev_alpha:.1e}");
    if dev_beta <= 1e-12 && dev_alpha <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn merge_degenerations() -> Outcome {
    let b = toy(4);
    let models: Vec<String> = b.modalities.iter().map(|m| m.tag.clone()).collect();
    let adapters = adapters_in_order(&b, &models);
    let uni =
        merge_adapters(&adapters, &FusedCoefficients::uniform(models.clone(), &b.config)).map_err(|e| e.to_string())?;
    let avg = avg_merge(&adapters).map_err(|e| e.to_string())?;
    let d_avg = uni.params.max_abs_diff(&avg.params);
    let mut exact = true;
    for (i, a) in adapters.iter().enumerate() {
        let m = merge_adapters(&adapters, &FusedCoefficients::one_hot(models.clone(), i, &b.config))
            .map_err(|e| e.to_string())?;
        exact &= m.params == a.params;
    }
    let msg = format!("uniform vs average {d_avg:.1e}; one-hot exact: {exact}");
    if d_avg <= 1e-7 && exact {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn vector_adapter(tag: &str, v: [f64; 2]) -> (ModelConfig, LoraAdapter) {
    let cfg = ModelConfig {
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        d_ff: 2,
        lora_rank: 1,
        ..ModelConfig::default()
    };
    let mut params = LoraParams::zeros(&cfg);
    params.pair_mut(0, Target::AttnQ).a = Mat::from_vec(1, 2, v.to_vec());
    (
        cfg,
        LoraAdapter {
            modality_tag: tag.into(),
            params,
        },
    )
}

fn ties_fixture() -> Outcome {
    let (_, x) = vector_adapter("x", [2.0, -1.0]);
    let (_, y) = vector_adapter("y", [-0.1, -3.0]);
    let m = ties_merge(&[x, y], 0.5).map_err(|e| e.to_string())?;
    let got = m.params.pair(0, Target::AttnQ).a.data().to_vec();

    let b = toy(9);
    let base = b.adapter("molecule").unwrap();
    let agreeing: Vec<LoraAdapter> = [1.0, 0.4, 2.5]
        .iter()
        .map(|s| LoraAdapter {
            modality_tag: format!("s{s}"),
            params: base.params.map(|v| v * s),
        })
        .collect();
    let t = ties_merge(&agreeing, 1.0).map_err(|e| e.to_string())?;
    let a = avg_merge(&agreeing).map_err(|e| e.to_string())?;
    let d = t.params.max_abs_diff(&a.params);
    let msg = format!("fixture -> {got:?}; trim 1.0 vs average {d:.1e}");
    if got == [2.0, -3.0] && d <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn esmerge(args: &[&str], threads: Option<usize>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_esmerge"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("ESMERGE_THREADS", n.to_string()),
        None => cmd.env_remove("ESMERGE_THREADS"),
    };
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "esmerge {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline(root: &Path, threads: Option<usize>) -> Result<Duration, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let toy = s(&root.join("toy"));
    let coef = s(&root.join("coef"));
    let merged = s(&root.join("merged.esmg"));
    let start = Instant::now();
    esmerge(&["gen-toy", "--seed", "7", "--out", &toy], threads)?;
    esmerge(&["coeffs", "--seed", "7", "--input", &toy, "--out", &coef], threads)?;
    esmerge(
        &[
            "merge",
            "--method",
            "es",
            "--input",
            &toy,
            "--coeffs",
            &format!("{coef}/coefficients.esmg"),
            "--out",
            &merged,
        ],
        threads,
    )?;
    Ok(start.elapsed())
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn end_to_end(root: &Path) -> Outcome {
    let first = root.join("run1");
    let second = root.join("run2");
    let elapsed = pipeline(&first, Some(1))?;
    pipeline(&second, None)?;
    let files = [
        "coef/layer_coefficients.csv",
        "coef/swd.csv",
        "coef/coefficients.esmg",
        "merged.esmg",
    ];
    let identical: Vec<bool> = files
        .iter()
        .map(|f| same_bytes(&first.join(f), &second.join(f)))
        .collect();
    let msg = format!(
        "single-thread pipeline {:.1}s; byte-identical across runs and thread counts: {:?}",
        elapsed.as_secs_f64(),
        files.iter().zip(&identical).collect::<Vec<_>>()
    );
    if identical.iter().all(|x| *x) && elapsed < Duration::from_secs(300) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation(root: &Path) -> Outcome {
    let toy = root.join("run1/toy");
    let toy = toy.to_str().unwrap();
    let mut merged = Vec::new();
    for (mode, method) in [("layer", "es-layer"), ("element", "es-element"), ("fused", "es")] {
        let dir = root.join(format!("ablation/{mode}"));
        let d = dir.to_str().unwrap();
        esmerge(
            &["coeffs", "--seed", "7", "--mode", mode, "--input", toy, "--out", d],
            None,
        )?;
        let out = format!("{d}/merged.esmg");
        let coef = format!("{d}/coefficients.esmg");
        esmerge(
            &[
                "merge", "--method", method, "--input", toy, "--coeffs", &coef, "--out", &out,
            ],
            None,
        )?;
        merged.push(load_adapter(&out).map_err(|e| e.to_string())?.1);
    }
    let mut diffs = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            diffs.push(merged[i].params.max_abs_diff(&merged[j].params));
        }
    }
    let shown: Vec<String> = diffs.iter().map(|d| format!("{d:.3e}")).collect();
    let msg = format!("pairwise max-entry differences (layer/element, layer/fused, element/fused) {shown:?}");
    if diffs.iter().all(|d| *d > 1e-6) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("exact 1D Wasserstein", Box::new(exact_wasserstein)),
        ("SWD sanity", Box::new(swd_sanity)),
        ("specialized tokens move most", Box::new(specialization_signal)),
        ("coefficient simplex", Box::new(coefficient_simplex)),
        ("fusion degenerations", Box::new(fusion_degenerations)),
        ("merge degenerations", Box::new(merge_degenerations)),
        ("TIES fixture", Box::new(ties_fixture)),
        ("end-to-end determinism", Box::new(|| end_to_end(dir.path()))),
        ("layer x element ablation", Box::new(|| ablation(dir.path()))),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  {:>2} {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failures += 1;
                println!("FAIL  {:>2} {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
