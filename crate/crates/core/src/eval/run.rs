//! Full evaluation pass over a trained detector: energy scores and
//! separability metrics per test split, paired outlier-quality metrics,
//! and deterministic CSV/PNG artifacts.

use std::path::{Path, PathBuf};

use super::report::{write_png_grid, write_scores_csv, EvalReport, ScoreRow};
use super::{auroc, fpr_at_tpr, nuisance_retention, semantic_shift_batch};
use crate::data::{BenchmarkSplits, LabeledImage};
use crate::detector::{energy_scores, DetectorModel};
use crate::error::{Error, Result};
use crate::guidance::OutlierSet;
use crate::tensor::{stack, Tensor};

/// Everything `run_report` reads. Outlier sets are named so their metric
/// rows stay distinguishable; the probe (a classifier trained on ID data
/// only, independent of `model`) is required only when outlier sets are
/// present.
pub struct ReportContext<'a> {
    pub model: &'a DetectorModel,
    pub splits: &'a BenchmarkSplits,
    pub outlier_sets: Vec<(&'a str, &'a OutlierSet)>,
    pub probe: Option<&'a DetectorModel>,
    pub seed: u64,
    pub config_hash: &'a str,
}

/// Artifact paths produced by [`run_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub report_csv: PathBuf,
    pub scores_csv: PathBuf,
    /// Present only when a qualitative grid was written (at least one
    /// non-empty outlier set with consistent provenance).
    pub grid_png: Option<PathBuf>,
}

fn stack_pixels(images: &[LabeledImage]) -> Tensor {
    let refs: Vec<&Tensor> = images.iter().map(|im| &im.pixels).collect();
    stack(&refs)
}

/// Concatenate same-shape `[3, h, w]` images left-to-right into one
/// `[3, h, k·w]` strip.
fn hconcat(cells: &[Tensor]) -> Tensor {
    let [c, h, w] = [cells[0].shape()[0], cells[0].shape()[1], cells[0].shape()[2]];
    let k = cells.len();
    let mut data = Vec::with_capacity(c * h * w * k);
    for ch in 0..c {
        for y in 0..h {
            for cell in cells {
                let base = (ch * h + y) * w;
                data.extend_from_slice(&cell.data()[base..base + w]);
            }
        }
    }
    Tensor::new([c, h, w * k], data)
}

/// Number of source/outlier strips in the qualitative grid (3 rows of 8).
const GRID_STRIPS: usize = 24;
const GRID_PER_ROW: usize = 8;

fn score_split(
    model: &DetectorModel,
    name: &str,
    images: &[LabeledImage],
    rows: &mut Vec<ScoreRow>,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::invalid(format!("split `{name}` is empty")));
    }
    let scores = energy_scores(model, &stack_pixels(images))?;
    for (i, &e) in scores.iter().enumerate() {
        rows.push(ScoreRow {
            sample_id: format!("{name}/{i}"),
            split: name.to_string(),
            energy: e,
        });
    }
    Ok(scores)
}

/// Evaluate `ctx.model` on the benchmark and write three artifacts into
/// `out_dir`: `report.csv` (metric rows), `scores.csv` (per-sample
/// energies), and — when outlier sets with shared provenance are present —
/// `outliers.png` (strips of source followed by each set's outlier).
///
/// Deterministic: identical inputs produce byte-identical files.
pub fn run_report(ctx: &ReportContext, out_dir: &Path) -> Result<(EvalReport, ReportFiles)> {
    let mut report = EvalReport::new(ctx.seed, ctx.config_hash);
    let mut score_rows = Vec::new();

    // Detector quality on ID data.
    let id_labels = ctx
        .splits
        .id_test
        .iter()
        .map(|im| ctx.splits.id_class_index(im.label))
        .collect::<Result<Vec<_>>>()?;
    let id_images = stack_pixels(&ctx.splits.id_test);
    let acc = ctx.model.accuracy(&id_images, &id_labels)?;
    report.push("detector", "id_accuracy", "id_test", acc)?;

    // Separability per OOD split (higher energy ⇒ more OOD).
    let id_scores = score_split(ctx.model, "id_test", &ctx.splits.id_test, &mut score_rows)?;
    for (name, images) in [
        ("near_ood_test", &ctx.splits.near_ood_test),
        ("far_ood_test", &ctx.splits.far_ood_test),
    ] {
        let ood_scores = score_split(ctx.model, name, images, &mut score_rows)?;
        report.push("ood", "auroc", name, auroc(&id_scores, &ood_scores)?)?;
        report.push(
            "ood",
            "fpr_at_95tpr",
            name,
            fpr_at_tpr(&id_scores, &ood_scores, 0.95)?,
        )?;
    }

    // Paired outlier-quality metrics per set.
    let live_sets: Vec<&(&str, &OutlierSet)> = ctx
        .outlier_sets
        .iter()
        .filter(|(_, set)| !set.is_empty())
        .collect();
    if !live_sets.is_empty() && ctx.probe.is_none() {
        return Err(Error::config(
            "semantic-shift metrics need a probe classifier; none was supplied",
        ));
    }
    for &&(name, set) in &live_sets {
        let mut source_classes = Vec::with_capacity(set.len());
        let mut retention = 0.0f64;
        for i in 0..set.len() {
            let src = set.source_indices[i];
            let source = ctx.splits.id_train.get(src).ok_or_else(|| {
                Error::invalid(format!(
                    "outlier set `{name}` references source {src}, but id_train has {} images",
                    ctx.splits.id_train.len()
                ))
            })?;
            retention += nuisance_retention(source, &set.image(i))?;
            source_classes.push(ctx.splits.id_class_index(source.label)?);
        }
        retention /= set.len() as f64;
        let shifts = semantic_shift_batch(ctx.probe.unwrap(), &source_classes, &set.images)?;
        let shift = shifts.iter().sum::<f64>() / shifts.len() as f64;
        report.push("outliers", "nuisance_retention", name, retention)?;
        report.push("outliers", "semantic_shift", name, shift)?;

        let outlier_scores = energy_scores(ctx.model, &set.images)?;
        for (i, &e) in outlier_scores.iter().enumerate() {
            score_rows.push(ScoreRow {
                sample_id: format!("outlier_{name}/{i}"),
                split: format!("outlier_{name}"),
                energy: e,
            });
        }
    }

    // Qualitative dump: one strip per source — the source image followed by
    // each set's outlier generated from it. Emitted only when every live
    // set agrees on the sources of the leading strips.
    let grid_png = if live_sets.is_empty() {
        None
    } else {
        let strips = GRID_STRIPS
            .min(live_sets.iter().map(|(_, s)| s.len()).min().unwrap_or(0));
        let lead = &live_sets[0].1.source_indices[..strips];
        let aligned = live_sets
            .iter()
            .all(|(_, s)| &s.source_indices[..strips] == lead);
        if strips == 0 || !aligned {
            None
        } else {
            let mut rows_img = Vec::with_capacity(strips);
            for (i, &src) in lead.iter().enumerate() {
                let mut cells = vec![ctx.splits.id_train[src].pixels.clone()];
                for &&(_, set) in &live_sets {
                    cells.push(set.image(i));
                }
                rows_img.push(hconcat(&cells));
            }
            let path = out_dir.join("outliers.png");
            write_png_grid(&rows_img, GRID_PER_ROW, &path)?;
            Some(path)
        }
    };

    let files = ReportFiles {
        report_csv: out_dir.join("report.csv"),
        scores_csv: out_dir.join("scores.csv"),
        grid_png,
    };
    report.save(&files.report_csv)?;
    write_scores_csv(&score_rows, &files.scores_csv)?;
    Ok((report, files))
}
