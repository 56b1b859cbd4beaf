//! Locating and loading datasets: simulated runs (`trials.jsonl` plus
//! manifest), normalized metrics tables and human summary CSVs.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mergesim_core::metrics::{compute_dataset_metrics, import_human, read_metrics, TrialMetrics};
use mergesim_core::runner::{read_manifest, read_trials, MANIFEST_FILE, TRIALS_FILE};
use mergesim_core::PromptVariant;

/// File name of the normalized per-trial metrics table.
pub const METRICS_FILE: &str = "metrics.csv";

pub struct Dataset {
    pub label: String,
    /// Sort key for report rows: variants in table order, then the rest.
    pub order: (usize, String),
    pub metrics: Vec<TrialMetrics>,
}

fn exists(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("file not found: {}", path.display());
    }
    Ok(())
}

fn first_line(path: &Path) -> Result<String> {
    let mut line = String::new();
    BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?).read_line(&mut line)?;
    Ok(line)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn variant_order(v: PromptVariant) -> usize {
    PromptVariant::ALL.iter().position(|x| *x == v).unwrap_or(usize::MAX)
}

fn load_trials(file: &Path, dt_override: Option<f64>) -> Result<Dataset> {
    let dir = file.parent().unwrap_or(Path::new("."));
    let manifest = if dir.join(MANIFEST_FILE).exists() {
        Some(read_manifest(dir)?)
    } else {
        None
    };
    let dt = dt_override
        .or(manifest.as_ref().map(|m| m.spec.params.dt))
        .unwrap_or(mergesim_core::SimParams::default().dt);
    let trials = read_trials(file)?;
    for t in &trials {
        t.validate(dt)
            .map_err(|e| anyhow::anyhow!("{}: invalid trial record: {e}", file.display()))?;
    }
    let metrics = compute_dataset_metrics(&trials, dt)?;
    let variant = manifest
        .as_ref()
        .map(|m| m.spec.variant)
        .or_else(|| trials.first().map(|t| t.prompt_variant));
    let (label, order) = match variant {
        Some(v) => (v.display_name().to_string(), variant_order(v)),
        None => (stem(dir), usize::MAX),
    };
    Ok(Dataset {
        order: (order, label.clone()),
        label,
        metrics,
    })
}

fn load_csv(file: &Path, steps: Option<&Path>, dt: f64) -> Result<Dataset> {
    let header = first_line(file)?;
    let metrics = if header.split(',').any(|h| h.trim() == "joint_contribution") {
        read_metrics(File::open(file)?)?
    } else {
        let steps = steps.map(File::open).transpose().context("opening step CSV")?;
        import_human(File::open(file)?, steps, dt).with_context(|| format!("importing {}", file.display()))?
    };
    let label = stem(file);
    Ok(Dataset {
        order: (usize::MAX, label.clone()),
        label,
        metrics,
    })
}

/// Loads a run directory, a `trials.jsonl`, a normalized `metrics.csv` or a
/// human summary CSV.
pub fn load(path: &Path, steps: Option<&Path>, dt: Option<f64>) -> Result<Dataset> {
    exists(path)?;
    if let Some(s) = steps {
        exists(s)?;
    }
    let file: PathBuf = if path.is_dir() {
        [TRIALS_FILE, METRICS_FILE]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.exists())
            .with_context(|| format!("{} holds neither {TRIALS_FILE} nor {METRICS_FILE}", path.display()))?
    } else {
        path.to_path_buf()
    };
    let mut ds = match file.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => load_trials(&file, dt)?,
        Some("csv") => load_csv(&file, steps, dt.unwrap_or(mergesim_core::SimParams::default().dt))?,
        _ => bail!("unrecognized dataset {}: expected a run directory, .jsonl or .csv", file.display()),
    };
    if path.is_dir() && ds.order.0 == usize::MAX {
        ds.label = stem(path);
        ds.order.1 = ds.label.clone();
    }
    Ok(ds)
}
