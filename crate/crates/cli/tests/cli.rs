use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esmerge_core::checkpoint::{load_adapter, save_adapter, CoefficientFile};
use esmerge_core::export::split_provenance;
use esmerge_core::merge::FusedCoefficients;
use esmerge_core::{write_checkpoint, LoraAdapter, LoraParams, Mat, ModelConfig, Target};

fn esmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esmerge"))
        .args(args)
        .output()
        .expect("spawn esmerge")
}

fn ok(args: &[&str]) -> String {
    let out = esmerge(args);
    assert!(
        out.status.success(),
        "esmerge {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("toy");
    let mut args = vec!["gen-toy", "--seed", "7", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

const FAST: [&str; 4] = ["--k", "6", "--projections", "32"];

fn coeffs(toy: &Path, out: &Path, mode: &str) {
    let mut args = vec![
        "coeffs",
        "--seed",
        "3",
        "--mode",
        mode,
        "--input",
        s(toy),
        "--out",
        s(out),
    ];
    args.extend_from_slice(&FAST);
    ok(&args);
}

#[test]
fn gen_toy_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = ok(&["gen-toy", "--seed", "7", "--out", s(a.path())]);
    let db = ok(&["gen-toy", "--seed", "7", "--out", s(b.path())]);
    assert_eq!(da, db);
    assert_eq!(da.lines().count(), 4);
    let dc = ok(&["gen-toy", "--seed", "8", "--out", s(b.path())]);
    assert_ne!(da, dc);
}

#[test]
fn gen_toy_modality_count() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &["--modalities", "2"]);
    let adapters: Vec<_> = fs::read_dir(&toy)
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            n.starts_with("adapter_").then_some(n)
        })
        .collect();
    assert_eq!(adapters.len(), 2);
}

#[test]
fn provenance_echoes_defaults() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(toy.join("manifest.json")).unwrap()).unwrap();
    let prov = &manifest["provenance"];
    assert_eq!(prov["command"], "gen-toy");
    let args = &prov["args"];
    assert_eq!(args["modalities"], 3);
    assert_eq!(args["subspace_dim"], 6);
    assert_eq!(args["tokens_per_block"], 8);
    assert_eq!(args["prefix_tokens"], 2);
    let cfg: ModelConfig = serde_json::from_value(prov["config"].clone()).unwrap();
    assert_eq!(cfg, ModelConfig::default());
    for key in ["d_model", "n_layers", "n_heads", "d_ff", "lora_rank", "lora_alpha"] {
        assert_eq!(args["model"][key], prov["config"][key], "{key}");
    }
    assert_eq!(
        manifest["modalities"],
        serde_json::json!(["molecule", "protein", "cell"])
    );
}

#[test]
fn layer_csv_is_a_simplex_and_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    coeffs(&toy, &d.path().join("a"), "layer");
    coeffs(&toy, &d.path().join("b"), "layer");
    let a = fs::read(d.path().join("a/layer_coefficients.csv")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b/layer_coefficients.csv")).unwrap());
    assert!(!d.path().join("a/element_coefficients.esmg").exists());

    let text = String::from_utf8(a).unwrap();
    let (prov, body) = split_provenance(&text).unwrap();
    assert_eq!(prov["args"]["tau"], 0.5);
    assert_eq!(prov["args"]["mode"], "layer");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers().unwrap().clone();
    assert_eq!(
        header.iter().take(4).collect::<Vec<_>>(),
        ["model", "layer", "alpha", "s"]
    );
    let mut sums = vec![0.0; 4];
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let l: usize = rec[1].parse().unwrap();
        sums[l] += rec[2].parse::<f64>().unwrap();
    }
    for s in sums {
        assert!((s - 1.0).abs() <= 1e-9, "{s}");
    }
}

#[test]
fn gradient_check_flag() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    let out = d.path().join("c");
    let mut args = vec![
        "coeffs",
        "--mode",
        "element",
        "--check-grads",
        "50",
        "--input",
        s(&toy),
        "--out",
        s(&out),
    ];
    args.extend_from_slice(&FAST);
    let stdout = ok(&args);
    let line = stdout.lines().find(|l| l.contains("max relative error")).unwrap();
    let err: f64 = line.split_whitespace().nth(5).unwrap().parse().unwrap();
    assert!(err <= 1e-4);
    assert!(out.join("element_coefficients.esmg").exists());
    assert!(!out.join("layer_coefficients.csv").exists());
}

#[test]
fn forced_uniform_matches_average() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    let (cfg, _) = load_adapter(toy.join("adapter_cell.esmg")).unwrap();
    let models: Vec<String> = ["molecule", "protein", "cell"].map(String::from).to_vec();
    let file = CoefficientFile::from_fused(&cfg, &FusedCoefficients::uniform(models, &cfg), None);
    let coef = d.path().join("uniform.esmg");
    write_checkpoint(&coef, &file.to_tensor_set().unwrap()).unwrap();

    let es = d.path().join("es.esmg");
    let avg = d.path().join("avg.esmg");
    ok(&[
        "merge",
        "--method",
        "es",
        "--input",
        s(&toy),
        "--coeffs",
        s(&coef),
        "--out",
        s(&es),
    ]);
    ok(&["merge", "--method", "avg", "--input", s(&toy), "--out", s(&avg)]);
    let (_, a) = load_adapter(&es).unwrap();
    let (_, b) = load_adapter(&avg).unwrap();
    assert!(a.params.max_abs_diff(&b.params) <= 1e-7);
}

#[test]
fn ties_fixture_through_files() {
    let d = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        d_ff: 2,
        lora_rank: 1,
        ..ModelConfig::default()
    };
    let write = |name: &str, v: [f64; 2]| {
        let mut params = LoraParams::zeros(&cfg);
        params.pair_mut(0, Target::AttnQ).a = Mat::from_vec(1, 2, v.to_vec());
        let a = LoraAdapter {
            modality_tag: name.into(),
            params,
        };
        let p = d.path().join(format!("{name}.esmg"));
        save_adapter(&p, &cfg, &a, &Default::default()).unwrap();
        p
    };
    let x = write("x", [2.0, -1.0]);
    let y = write("y", [-0.1, -3.0]);
    let out = d.path().join("ties.esmg");
    let list = format!("{},{}", s(&x), s(&y));
    ok(&[
        "merge",
        "--method",
        "ties",
        "--trim",
        "0.5",
        "--adapters",
        &list,
        "--out",
        s(&out),
    ]);
    let (_, m) = load_adapter(&out).unwrap();
    assert_eq!(m.params.pair(0, Target::AttnQ).a.data(), &[2.0, -3.0]);
}

#[test]
fn missing_adapter_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    let gone = toy.join("adapter_protein.esmg");
    fs::remove_file(&gone).unwrap();
    let out = esmerge(&[
        "merge",
        "--method",
        "avg",
        "--input",
        s(&toy),
        "--out",
        s(&d.path().join("m.esmg")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&gone)));

    let out = esmerge(&["coeffs", "--input", s(&toy), "--out", s(&d.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&gone)));

    assert_eq!(esmerge(&["merge", "--bogus"]).status.code(), Some(1));
}

#[test]
fn method_must_match_coefficients() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    let c = d.path().join("c");
    coeffs(&toy, &c, "layer");
    let coef = c.join("coefficients.esmg");
    let out = d.path().join("m.esmg");
    let r = esmerge(&[
        "merge",
        "--method",
        "es",
        "--input",
        s(&toy),
        "--coeffs",
        s(&coef),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    ok(&[
        "merge",
        "--method",
        "es-layer",
        "--input",
        s(&toy),
        "--coeffs",
        s(&coef),
        "--out",
        s(&out),
    ]);
    let (_, m) = load_adapter(&out).unwrap();
    assert_eq!(m.modality_tag, "merged");
}

#[test]
fn heatmap_export() {
    let d = tempfile::tempdir().unwrap();
    let toy = gen(d.path(), &[]);
    let c = d.path().join("c");
    coeffs(&toy, &c, "element");
    let src = c.join("element_coefficients.esmg");
    let h1 = d.path().join("h1.csv");
    let h2 = d.path().join("h2.csv");
    ok(&["export-heatmap", "--coeffs", s(&src), "--out", s(&h1)]);
    ok(&["export-heatmap", "--coeffs", s(&src), "--out", s(&h2)]);
    let text = fs::read_to_string(&h1).unwrap();
    assert_eq!(text, fs::read_to_string(&h2).unwrap());

    let per_model = LoraParams::zeros(&ModelConfig::default()).len();
    let (prov, body) = split_provenance(&text).unwrap();
    assert_eq!(prov["source"], "element-only");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut sums = std::collections::BTreeMap::<String, f64>::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let key = format!("{}/{}/{}/{}/{}", &rec[1], &rec[2], &rec[3], &rec[4], &rec[5]);
        *sums.entry(key).or_default() += rec[6].parse::<f64>().unwrap();
        rows += 1;
    }
    assert_eq!(rows, 3 * per_model);
    assert_eq!(sums.len(), per_model);
    assert!(sums.values().all(|v| (v - 1.0).abs() <= 1e-9));
}
