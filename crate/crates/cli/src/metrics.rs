//! Metrics and manifest emission.
//!
//! The metrics stream is UTF-8 comma-separated with a fixed, documented
//! column order: iteration, loss terms, weighted total, global weights,
//! pseudo-time steps, learning rate, and the relative L2 error on the
//! iterations where it was evaluated (empty otherwise). Wall-clock timing is
//! deliberately kept out of the metrics file (it lives in the manifest), so
//! identical config + seed reproduces the file byte for byte.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use ptpinn_core::trainer::TrainHistory;

use crate::config::RunConfig;

pub fn metrics_columns(history: &TrainHistory) -> Vec<String> {
    let mut cols = vec!["iter".to_string()];
    cols.extend(history.term_names.iter().cloned());
    cols.push("total".into());
    cols.extend(history.term_names.iter().map(|n| format!("lambda_{n}")));
    cols.extend(history.tau_names.iter().cloned());
    cols.push("lr".into());
    cols.push("rel_l2".into());
    cols
}

pub fn write_metrics(history: &TrainHistory, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", metrics_columns(history).join(","))?;
    let mut errors = history.errors.iter().peekable();
    for rec in &history.records {
        let mut fields: Vec<String> = Vec::with_capacity(8 + 2 * rec.terms.len());
        fields.push(rec.iter.to_string());
        fields.extend(rec.terms.iter().map(|v| v.to_string()));
        fields.push(rec.total.to_string());
        fields.extend(rec.lambdas.iter().map(|v| v.to_string()));
        fields.extend(rec.taus.iter().map(|v| v.to_string()));
        fields.push(rec.lr.to_string());
        let err = match errors.peek() {
            Some(&&(it, e)) if it == rec.iter => {
                errors.next();
                e.to_string()
            }
            _ => String::new(),
        };
        fields.push(err);
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Manifest: full resolved configuration, a content hash of it, the metrics
/// schema, and run notes. A run is reproducible from this plus the seed.
pub fn write_manifest(
    cfg: &RunConfig,
    history: &TrainHistory,
    w: &mut impl Write,
) -> anyhow::Result<()> {
    let cfg_toml = toml::to_string_pretty(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(cfg_toml.as_bytes());
    let hash = hex_string(&hasher.finalize());

    writeln!(w, "# run manifest")?;
    writeln!(w, "config_sha256 = \"{hash}\"")?;
    writeln!(
        w,
        "metrics_columns = \"{}\"",
        metrics_columns(history).join(",")
    )?;
    if !history.timings.is_empty() {
        let total: f64 = history.timings.iter().map(|&(_, s)| s).sum();
        let per100 = total / history.timings.len() as f64;
        writeln!(w, "seconds_per_100_iters = {per100}")?;
    }
    for note in &history.notes {
        writeln!(w, "# note: {note}")?;
    }
    writeln!(w)?;
    writeln!(w, "[config]")?;
    for line in cfg_toml.lines() {
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_metrics_file(history: &TrainHistory, path: &Path) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_metrics(history, &mut f)?;
    Ok(())
}

pub fn write_manifest_file(
    cfg: &RunConfig,
    history: &TrainHistory,
    path: &Path,
) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_manifest(cfg, history, &mut f)?;
    Ok(())
}
