//! CSV exports of coefficient data.
//!
//! Every file starts with a `# {...}` provenance line holding compact JSON,
//! followed by a regular CSV header. Floats are written with 17 significant
//! digits so that byte-level comparisons are meaningful.

use std::io::Write;

use serde_json::Value;

use crate::config::{ModelConfig, Target};
use crate::lora::{Factor, LoraParams};
use crate::signals::{LayerCoefficients, SwdTable};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn provenance_line(w: &mut impl Write, provenance: &Value) -> std::io::Result<()> {
    writeln!(w, "# {}", serde_json::to_string(provenance)?)
}

/// Splits the leading `# ` provenance line off a CSV export.
pub fn split_provenance(text: &str) -> Option<(Value, &str)> {
    let (first, rest) = text.split_once('\n')?;
    let json = first.strip_prefix("# ")?;
    Some((serde_json::from_str(json).ok()?, rest))
}

/// Rows `(model, layer, alpha, s, d_hat:<modality>...)`; `layer` is the
/// 0-based block index.
pub fn write_layer_csv(mut w: impl Write, lc: &LayerCoefficients, provenance: &Value) -> std::io::Result<()> {
    provenance_line(&mut w, provenance)?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["model".to_string(), "layer".into(), "alpha".into(), "s".into()];
    header.extend(lc.modalities.iter().map(|m| format!("d_hat:{m}")));
    out.write_record(&header).map_err(csv_err)?;
    for (m, model) in lc.models.iter().enumerate() {
        for l in 0..lc.n_layers() {
            let mut row = vec![
                model.clone(),
                l.to_string(),
                fmt_f64(lc.alpha[m][l]),
                fmt_f64(lc.scores[m][l]),
            ];
            row.extend(lc.d_hat[m].iter().map(|d| fmt_f64(d[l])));
            out.write_record(&row).map_err(csv_err)?;
        }
    }
    out.flush()
}

/// Rows `(model, modality, layer, swd)` with trace layers `0..=n_layers`.
pub fn write_swd_csv(mut w: impl Write, table: &SwdTable, provenance: &Value) -> std::io::Result<()> {
    provenance_line(&mut w, provenance)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "modality", "layer", "swd"])
        .map_err(csv_err)?;
    for (m, model) in table.models.iter().enumerate() {
        for (x, modality) in table.modalities.iter().enumerate() {
            for (l, v) in table.values[m][x].iter().enumerate() {
                out.write_record([model.as_str(), modality.as_str(), &l.to_string(), &fmt_f64(*v)])
                    .map_err(csv_err)?;
            }
        }
    }
    out.flush()
}

/// Long-format heatmap `(model, layer, target, matrix, row, col, value)`.
pub fn write_heatmap_csv(
    mut w: impl Write,
    config: &ModelConfig,
    models: &[String],
    values: &[LoraParams],
    provenance: &Value,
) -> std::io::Result<()> {
    provenance_line(&mut w, provenance)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "layer", "target", "matrix", "row", "col", "value"])
        .map_err(csv_err)?;
    for (model, p) in models.iter().zip(values) {
        for l in 0..config.n_layers {
            for t in Target::ALL {
                for f in [Factor::A, Factor::B] {
                    let m = p.pair(l, t).factor(f);
                    for i in 0..m.rows() {
                        for j in 0..m.cols() {
                            out.write_record([
                                model.as_str(),
                                &l.to_string(),
                                t.name(),
                                f.name(),
                                &i.to_string(),
                                &j.to_string(),
                                &fmt_f64(m.get(i, j)),
                            ])
                            .map_err(csv_err)?;
                        }
                    }
                }
            }
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        let s = fmt_f64(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
        let v = 1.0 / 3.0;
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn provenance_roundtrip() {
        let mut buf = Vec::new();
        let table = SwdTable {
            models: vec!["a".into()],
            modalities: vec!["x".into()],
            values: vec![vec![vec![0.0, 0.5]]],
        };
        let prov = serde_json::json!({"seed": 3});
        write_swd_csv(&mut buf, &table, &prov).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let (p, rest) = split_provenance(&text).unwrap();
        assert_eq!(p, prov);
        assert_eq!(rest.lines().count(), 3);
        assert!(rest.starts_with("model,modality,layer,swd\n"));
    }
}
