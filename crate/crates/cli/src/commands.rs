use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use esmerge_core::checkpoint::{
    gen_toy_bundle, load_bundle, save_adapter, toy_modalities, CoefficientFile, ToyModalityOptions,
};
use esmerge_core::export::{write_heatmap_csv, write_layer_csv, write_swd_csv};
use esmerge_core::grad::{check_gradients, GradCheckOptions};
use esmerge_core::merge::{avg_merge, merge_adapters, ties_merge, CoefficientSource};
use esmerge_core::pipeline::{probe_seed, run_coefficients, CoefficientOptions};
use esmerge_core::rng::derive_seed;
use esmerge_core::{build_probe_batch, read_checkpoint, write_checkpoint, LoraAdapter, ModelConfig};
use serde_json::{json, Value};

use crate::inputs::{
    adapter_file, adapter_paths, digest_file, ensure_parent, load_adapter_file, load_workspace, meta_with, provenance,
    Inputs, BASE_FILE,
};
use crate::{CoeffsArgs, ExportArgs, GenToyArgs, MergeArgs, Method, VerificationFailed};

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;
const SALT_GRAD_CHECK: u64 = 0x6c_ec00;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAYER_CSV: &str = "layer_coefficients.csv";
pub const SWD_CSV: &str = "swd.csv";
pub const ELEMENT_FILE: &str = "element_coefficients.esmg";
pub const COEF_FILE: &str = "coefficients.esmg";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn gen_toy(args: &GenToyArgs) -> Result<()> {
    let m = &args.model;
    let config = ModelConfig {
        d_model: m.d_model,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        d_ff: m.d_ff,
        lora_rank: m.lora_rank,
        lora_alpha: m.lora_alpha,
        ..ModelConfig::default()
    };
    config.validate()?;
    let opts = ToyModalityOptions {
        count: args.modalities,
        subspace_dim: args.subspace_dim,
        tokens_per_block: args.tokens_per_block,
        prefix_tokens: args.prefix_tokens,
    };
    let modalities = toy_modalities(args.seed, config.d_model, &opts)?;
    let bundle = gen_toy_bundle(args.seed, &config, &modalities)?;
    let prov = provenance("gen-toy", args, &Inputs::default(), json!({"config": config}));

    create_dir(&args.out)?;
    let mut files = Vec::new();
    let base_path = args.out.join(BASE_FILE);
    let mut set = bundle.base_only().to_tensor_set()?;
    set.set_meta("provenance", &prov)?;
    write_checkpoint(&base_path, &set)?;
    files.push(base_path);
    for spec in &bundle.modalities {
        let path = args.out.join(adapter_file(&spec.tag));
        save_adapter(
            &path,
            &config,
            bundle.adapter(&spec.tag)?,
            &meta_with("provenance", prov.clone()),
        )?;
        files.push(path);
    }

    let mut listing = Vec::new();
    for path in &files {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let digest = digest_file(path)?;
        println!("{digest}  {name}");
        listing.push(json!({"name": name, "sha256": digest}));
    }
    let manifest = json!({
        "provenance": prov,
        "modalities": bundle.modalities.iter().map(|m| &m.tag).collect::<Vec<_>>(),
        "files": listing,
    });
    let path = args.out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn coeffs(args: &CoeffsArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let (bundle, models) = load_workspace(&args.input, &args.models, &mut inputs)?;
    let prov = provenance(
        "coeffs",
        args,
        &inputs,
        json!({"config": bundle.config, "models": models, "probe_seed": probe_seed(args.seed)}),
    );

    if let Some(samples) = args.check_grads {
        let batch = build_probe_batch(&bundle.modalities, args.k, probe_seed(args.seed))?;
        let opts = GradCheckOptions {
            samples,
            step: FD_STEP,
            seed: derive_seed(args.seed, SALT_GRAD_CHECK),
            ..GradCheckOptions::default()
        };
        let report = check_gradients(&bundle, &batch, &opts)?;
        let max = report.max_rel_err();
        println!("gradient check: max relative error {max:.3e} over {samples} entries");
        if max > FD_TOLERANCE {
            let w = report.worst().expect("non-empty report");
            bail!(VerificationFailed(format!(
                "analytic gradient disagrees with finite differences (rel err {max:.3e} > {FD_TOLERANCE:e}) \
                 at adapter `{}`, modality `{}`, probe {}, {:?}",
                w.adapter, w.modality, w.probe, w.coord
            )));
        }
    }

    let opts = CoefficientOptions {
        seed: args.seed,
        k: args.k,
        projections: args.projections,
        p: args.p,
        tau: args.tau,
        models,
    };
    let run = run_coefficients(&bundle, &opts, args.mode.into())?;
    create_dir(&args.out)?;

    if let (Some(table), Some(lc)) = (&run.swd, &run.layer) {
        let mut w = create_file(&args.out.join(LAYER_CSV))?;
        write_layer_csv(&mut w, lc, &prov)?;
        let mut w = create_file(&args.out.join(SWD_CSV))?;
        write_swd_csv(&mut w, table, &prov)?;
    }
    if let Some(ec) = &run.element {
        let mut set = CoefficientFile::from_element(&bundle.config, ec).to_tensor_set()?;
        set.set_meta("provenance", &prov)?;
        write_checkpoint(args.out.join(ELEMENT_FILE), &set)?;
    }
    let mut set = CoefficientFile::from_fused(&bundle.config, &run.lambda, Some(args.tau)).to_tensor_set()?;
    set.set_meta("provenance", &prov)?;
    let path = args.out.join(COEF_FILE);
    write_checkpoint(&path, &set)?;
    println!("{}  {COEF_FILE}", digest_file(&path)?);
    Ok(())
}

fn expected_source(method: Method) -> Option<CoefficientSource> {
    match method {
        Method::Es => Some(CoefficientSource::Fused),
        Method::EsLayer => Some(CoefficientSource::LayerOnly),
        Method::EsElement => Some(CoefficientSource::ElementOnly),
        Method::Avg | Method::Ties => None,
    }
}

fn source_name(s: CoefficientSource) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn merge(args: &MergeArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let mut extra = json!({});

    let coef = match (expected_source(args.method), &args.coeffs) {
        (Some(_), None) => bail!("--coeffs is required for method {:?}", args.method),
        (None, Some(_)) => bail!("--coeffs is not used by method {:?}", args.method),
        (None, None) => None,
        (Some(want), Some(path)) => {
            crate::inputs::ensure_file(path)?;
            let set = read_checkpoint(path)?;
            let file = CoefficientFile::from_tensor_set(&set)?;
            if file.source != want && file.source != CoefficientSource::Manual {
                bail!(
                    "coefficient file holds {} coefficients but method {:?} needs {}",
                    source_name(file.source),
                    args.method,
                    source_name(want)
                );
            }
            inputs.add(path)?;
            extra["coefficients"] = json!({
                "source": file.source,
                "tau": file.tau,
                "provenance": set.meta.get("provenance").cloned().unwrap_or(Value::Null),
            });
            Some(file)
        }
    };
    if args.method == Method::Ties {
        if !(args.trim > 0.0 && args.trim <= 1.0) {
            bail!("--trim must be in (0, 1], got {}", args.trim);
        }
        extra["trim_fraction"] = json!(args.trim);
    }

    let paths = if !args.adapters.is_empty() {
        args.adapters.clone()
    } else {
        let Some(dir) = &args.input else {
            bail!("pass adapter files with --adapters or a directory with --input");
        };
        let models = if !args.models.is_empty() {
            args.models.clone()
        } else if let Some(c) = &coef {
            c.models.clone()
        } else {
            let base = dir.join(BASE_FILE);
            crate::inputs::ensure_file(&base)?;
            load_bundle(&base)?.modalities.iter().map(|m| m.tag.clone()).collect()
        };
        adapter_paths(dir, &models)
    };
    let mut config: Option<ModelConfig> = None;
    let mut adapters: Vec<LoraAdapter> = Vec::with_capacity(paths.len());
    for p in &paths {
        let (cfg, a) = load_adapter_file(p, &mut inputs)?;
        match &config {
            Some(c) if *c != cfg => bail!("adapter {} has incompatible shapes", p.display()),
            _ => config = Some(cfg),
        }
        adapters.push(a);
    }
    let Some(config) = config else {
        bail!("no adapters to merge");
    };

    let merged = match (&coef, args.method) {
        (Some(c), _) => {
            if c.config != config {
                bail!("coefficients were computed for a different model config");
            }
            let ordered = c
                .models
                .iter()
                .map(|m| {
                    adapters
                        .iter()
                        .find(|a| &a.modality_tag == m)
                        .cloned()
                        .with_context(|| format!("no adapter with tag `{m}` among the inputs"))
                })
                .collect::<Result<Vec<_>>>()?;
            merge_adapters(&ordered, &c.to_fused()?)?
        }
        (None, Method::Avg) => avg_merge(&adapters)?,
        (None, _) => ties_merge(&adapters, args.trim)?,
    };

    let prov = provenance("merge", args, &inputs, extra);
    ensure_parent(&args.out)?;
    save_adapter(&args.out, &config, &merged, &meta_with("provenance", prov))?;
    println!("{}  {}", digest_file(&args.out)?, args.out.display());
    Ok(())
}

pub fn export_heatmap(args: &ExportArgs) -> Result<()> {
    crate::inputs::ensure_file(&args.coeffs)?;
    let file = CoefficientFile::from_tensor_set(&read_checkpoint(&args.coeffs)?)?;
    let mut inputs = Inputs::default();
    inputs.add(&args.coeffs)?;
    let prov = provenance("export-heatmap", args, &inputs, json!({"source": file.source}));
    ensure_parent(&args.out)?;
    let mut w = create_file(&args.out)?;
    write_heatmap_csv(&mut w, &file.config, &file.models, &file.values, &prov)?;
    let rows: usize = file.values.iter().map(|v| v.len()).sum();
    println!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}
