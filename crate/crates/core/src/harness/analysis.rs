//! Experiments B (breaking points) and C (memory sweep), and the text
//! report over their CSV outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::eval::{evaluate_cell, run_experiment_a_at, ExperimentA};
use super::{csv_flush, csv_write, csv_writer, f6, io_err, Difficulty, HarnessError, RunConfig};
use crate::binning::SubsetManifest;
use crate::metrics::{
    self, breaking_point, degradation_curve, BreakingPoint, CapacityResults, DegradationCurve,
    GainBlock, OrderedDeg, BREAKING_THRESHOLD,
};

#[derive(Debug, Clone)]
pub struct ModelCurve {
    pub model: String,
    pub curve: DegradationCurve,
    pub breaking: BreakingPoint,
}

/// Normalized curves and breaking points for per-model, per-bin mIoU.
pub fn analyze_curves(
    per_model: &BTreeMap<String, BTreeMap<OrderedDeg, f64>>,
    threshold: f64,
) -> Result<Vec<ModelCurve>, HarnessError> {
    per_model
        .iter()
        .map(|(model, bins)| {
            let curve = degradation_curve(bins)?;
            let breaking = breaking_point(&curve, threshold);
            Ok(ModelCurve {
                model: model.clone(),
                curve,
                breaking,
            })
        })
        .collect()
}

/// Writes `curve.csv`, `breaking_points.csv`, and the wide plot-data files
/// `curve_raw.csv` / `curve_normalized.csv`.
pub fn write_curve_outputs(curves: &[ModelCurve], out_dir: &Path) -> Result<(), HarnessError> {
    let path = out_dir.join("curve.csv");
    let mut w = csv_writer(&path)?;
    csv_write(&mut w, &path, ["model", "bin_deg", "miou", "normalized", "drop"])?;
    for mc in curves {
        let c = &mc.curve;
        for i in 0..c.bins.len() {
            csv_write(
                &mut w,
                &path,
                [
                    mc.model.clone(),
                    format!("{}", c.bins[i]),
                    f6(c.miou[i]),
                    f6(c.normalized[i]),
                    c.drops[i].map(f6).unwrap_or_default(),
                ],
            )?;
        }
    }
    csv_flush(w, &path)?;

    let path = out_dir.join("breaking_points.csv");
    let mut w = csv_writer(&path)?;
    csv_write(&mut w, &path, ["model", "breaking_bin", "biggest_drop"])?;
    for mc in curves {
        csv_write(
            &mut w,
            &path,
            [
                mc.model.clone(),
                mc.breaking
                    .bin
                    .map(|b| format!("{b}"))
                    .unwrap_or_else(|| "None".into()),
                format!("{:.4}", mc.breaking.biggest_drop),
            ],
        )?;
    }
    csv_flush(w, &path)?;

    for (name, pick) in [
        ("curve_raw.csv", (|c: &DegradationCurve| c.miou.clone()) as fn(&DegradationCurve) -> Vec<f64>),
        ("curve_normalized.csv", |c: &DegradationCurve| c.normalized.clone()),
    ] {
        let path = out_dir.join(name);
        let mut bins: Vec<f64> = curves.iter().flat_map(|m| m.curve.bins.clone()).collect();
        bins.sort_by(f64::total_cmp);
        bins.dedup();
        let mut w = csv_writer(&path)?;
        let mut header = vec!["bin_deg".to_string()];
        header.extend(curves.iter().map(|m| m.model.clone()));
        csv_write(&mut w, &path, header)?;
        for b in bins {
            let mut row = vec![format!("{b}")];
            for m in curves {
                let vals = pick(&m.curve);
                row.push(
                    m.curve
                        .bins
                        .iter()
                        .position(|x| *x == b)
                        .map(|i| f6(vals[i]))
                        .unwrap_or_default(),
                );
            }
            csv_write(&mut w, &path, row)?;
        }
        csv_flush(w, &path)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentB {
    pub out_dir: PathBuf,
    pub curves: Vec<ModelCurve>,
}

/// Extreme split: bank from 0° only, every bin scored, curves normalized by
/// the 0° score.
pub fn run_experiment_b(config: &RunConfig) -> Result<ExperimentB, HarnessError> {
    config.validate()?;
    let manifest = SubsetManifest::load(&config.manifest)?;
    let out_dir = config.output_root.join("experiment_b");
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let mut per_model = BTreeMap::new();
    for model in config.models.keys() {
        log::info!("breaking-point run for {model}");
        let cell = evaluate_cell(
            config,
            &manifest,
            model,
            Difficulty::Extreme,
            config.capacity,
            &out_dir,
        )?;
        per_model.insert(model.clone(), cell.per_bin_miou());
    }
    let curves = analyze_curves(&per_model, BREAKING_THRESHOLD)?;
    write_curve_outputs(&curves, &out_dir)?;
    Ok(ExperimentB { out_dir, curves })
}

/// Rows: `model,difficulty,pair,gain`, with `average` rows for the per-model
/// and per-task means.
pub fn gains_csv(blocks: &[GainBlock]) -> String {
    let mut out = String::from("model,difficulty,pair,gain\n");
    let cell = |v: Option<f64>| v.map(f6).unwrap_or_default();
    for b in blocks {
        let pair = b.pair_label();
        for (i, m) in b.models.iter().enumerate() {
            for (j, d) in b.difficulties.iter().enumerate() {
                let _ = writeln!(out, "{m},{d},{pair},{}", cell(b.gains[i][j]));
            }
            let _ = writeln!(out, "{m},average,{pair},{}", cell(b.model_average[i]));
        }
        for (j, d) in b.difficulties.iter().enumerate() {
            let _ = writeln!(out, "average,{d},{pair},{}", cell(b.task_average[j]));
        }
        let _ = writeln!(out, "average,average,{pair},{}", cell(b.overall_average));
    }
    out
}

/// Markdown rendering of gain blocks at 3 decimals.
pub fn render_gain_tables(blocks: &[GainBlock]) -> String {
    let mut out = String::new();
    let cell = |v: Option<f64>| v.map(|x| format!("{:.3}", metrics::round3(x))).unwrap_or_else(|| "-".into());
    for b in blocks {
        let _ = writeln!(out, "### Memory {} -> {}\n", b.from, b.to);
        let _ = writeln!(out, "| Model | {} | Average |", b.difficulties.join(" | "));
        let _ = writeln!(out, "|---{}|---|", "|---".repeat(b.difficulties.len()));
        for (i, m) in b.models.iter().enumerate() {
            let cells: Vec<String> = b.gains[i].iter().map(|v| cell(*v)).collect();
            let _ = writeln!(out, "| {m} | {} | {} |", cells.join(" | "), cell(b.model_average[i]));
        }
        let cells: Vec<String> = b.task_average.iter().map(|v| cell(*v)).collect();
        let _ = writeln!(
            out,
            "| Average per task | {} | {} |\n",
            cells.join(" | "),
            cell(b.overall_average)
        );
    }
    out
}

/// Markdown table of `miou ± std` per capacity.
pub fn memory_table(runs: &[ExperimentA]) -> String {
    let mut out = String::new();
    for run in runs {
        let Some(cap) = run.cells.first().map(|c| c.capacity) else {
            continue;
        };
        let diffs: Vec<Difficulty> = {
            let mut d: Vec<Difficulty> = run.cells.iter().map(|c| c.difficulty).collect();
            d.sort();
            d.dedup();
            d
        };
        let _ = writeln!(out, "### Memory {cap}\n");
        let names: Vec<&str> = diffs.iter().map(|d| d.name()).collect();
        let _ = writeln!(out, "| Model | {} |", names.join(" | "));
        let _ = writeln!(out, "|---{}|", "|---".repeat(diffs.len()));
        let mut models: Vec<&str> = run.cells.iter().map(|c| c.model.as_str()).collect();
        models.dedup();
        for m in models {
            let cells: Vec<String> = diffs
                .iter()
                .map(|d| {
                    run.cells
                        .iter()
                        .find(|c| c.model == m && c.difficulty == *d)
                        .and_then(|c| c.validation_report())
                        .map(|r| format!("{:.3} ± {:.3}", r.miou, r.std))
                        .unwrap_or_else(|| "-".into())
                })
                .collect();
            let _ = writeln!(out, "| {m} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentC {
    pub out_dir: PathBuf,
    pub runs: Vec<ExperimentA>,
    pub gains: Vec<GainBlock>,
}

/// Experiment A at each configured capacity, then gains between capacities.
pub fn run_experiment_c(config: &RunConfig) -> Result<ExperimentC, HarnessError> {
    config.validate()?;
    let mut caps = config.capacities.clone();
    caps.sort_unstable();
    caps.dedup();
    if caps.len() < 2 {
        return Err(HarnessError::Config(
            "memory sweep needs at least two distinct capacities".into(),
        ));
    }
    let manifest = SubsetManifest::load(&config.manifest)?;
    let out_dir = config.output_root.join("experiment_c");

    let mut runs = Vec::new();
    let mut results = CapacityResults::new();
    for &cap in &caps {
        let run = run_experiment_a_at(config, &manifest, cap, &out_dir.join(format!("capacity_{cap}")))?;
        let cells = results.entry(cap as u64).or_default();
        for c in &run.cells {
            if let Some(r) = c.validation_report() {
                cells.insert((c.model.clone(), c.difficulty.to_string()), r.miou);
            }
        }
        runs.push(run);
    }
    let models: Vec<String> = config.models.keys().cloned().collect();
    let diffs: Vec<String> = config.difficulties.iter().map(|d| d.to_string()).collect();
    let gains = metrics::memory_gains(&results, &models, &diffs)?;

    let write = |name: &str, text: String| -> Result<(), HarnessError> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    };
    write("gains.csv", gains_csv(&gains))?;
    write("gains_table.md", render_gain_tables(&gains))?;
    write("memory_table.md", memory_table(&runs))?;
    Ok(ExperimentC {
        out_dir,
        runs,
        gains,
    })
}

fn csv_to_markdown(path: &Path) -> Result<Option<String>, HarnessError> {
    if !path.is_file() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let headers = rdr
        .headers()
        .map_err(|source| HarnessError::Csv {
            path: path.display().to_string(),
            source,
        })?
        .clone();
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", headers.iter().collect::<Vec<_>>().join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(headers.len()));
    for rec in rdr.records() {
        let rec = rec.map_err(|source| HarnessError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let _ = writeln!(out, "| {} |", rec.iter().collect::<Vec<_>>().join(" | "));
    }
    Ok(Some(out))
}

/// Collects whatever experiment outputs exist under `output_root` into one
/// markdown document.
pub fn report(output_root: &Path) -> Result<String, HarnessError> {
    let mut out = String::from("# Viewpoint robustness report\n\n");
    let mut found = false;
    let sections = [
        ("Difficulty splits", "experiment_a/difficulties.csv"),
        ("Experiment A: validation mIoU", "experiment_a/summary.csv"),
        ("Experiment A: per-bin mIoU", "experiment_a/bins.csv"),
        ("Experiment B: breaking points", "experiment_b/breaking_points.csv"),
        ("Experiment B: normalized curves", "experiment_b/curve_normalized.csv"),
    ];
    for (title, rel) in sections {
        if let Some(md) = csv_to_markdown(&output_root.join(rel))? {
            let _ = writeln!(out, "## {title}\n\n{md}");
            found = true;
        }
    }
    for (title, rel) in [
        ("Experiment C: mIoU per memory size", "experiment_c/memory_table.md"),
        ("Experiment C: gains from memory", "experiment_c/gains_table.md"),
    ] {
        let p = output_root.join(rel);
        if p.is_file() {
            let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
            let _ = writeln!(out, "## {title}\n\n{text}");
            found = true;
        }
    }
    if !found {
        return Err(HarnessError::Config(format!(
            "no experiment outputs under {}",
            output_root.display()
        )));
    }
    Ok(out)
}
