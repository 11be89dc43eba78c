//! Detection metrics and reporting.
//!
//! Scores follow the convention "higher ⇒ more out-of-distribution"
//! throughout. All metric arithmetic is f64.

pub mod report;
pub mod run;

pub use report::{
    parse_scores_csv, write_png_grid, write_report_csv, write_scores_csv, EvalReport, ReportRow,
    ScoreRow,
};
pub use run::{run_report, ReportContext, ReportFiles};

use crate::data::LabeledImage;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid(format!("{name} score list is empty")));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{name} scores contain {v}")));
    }
    Ok(())
}

/// Area under the ROC curve: the probability that a uniformly random
/// OOD score exceeds a uniformly random in-distribution score, with ties
/// counted one half. Computed by midrank statistics in O((n+m)·log(n+m)).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("in-distribution", id_scores)?;
    check_scores("outlier", ood_scores)?;
    let n = id_scores.len();
    let m = ood_scores.len();

    let mut combined: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Midranks: every member of a tie group gets the group's average
    // 1-based rank.
    let mut rank_sum_ood = 0.0f64;
    let mut start = 0;
    while start < combined.len() {
        let mut end = start + 1;
        while end < combined.len() && combined[end].0 == combined[start].0 {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        for item in &combined[start..end] {
            if item.1 {
                rank_sum_ood += midrank;
            }
        }
        start = end;
    }

    let u = rank_sum_ood - (m * (m + 1)) as f64 / 2.0;
    Ok(u / (n as f64 * m as f64))
}

/// False-positive rate at the most selective score threshold that still
/// flags at least `tpr` of the outliers (decision rule: flag when
/// `score ≥ threshold`). Returns the fraction of in-distribution scores
/// at or above that threshold.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("in-distribution", id_scores)?;
    check_scores("outlier", ood_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::invalid(format!(
            "target true-positive rate must be in (0, 1], got {tpr}"
        )));
    }
    let m = ood_scores.len();
    // Flagging the k largest outlier scores reaches TPR k/m, so the
    // smallest sufficient count is ⌈tpr·m⌉ and the threshold is the
    // k-th largest outlier score (any higher threshold flags fewer).
    let k = (tpr * m as f64).ceil() as usize;
    let k = k.clamp(1, m);
    let mut sorted = ood_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k - 1];
    let fp = id_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / id_scores.len() as f64)
}

/// Mean squared pixel error between a source image and a derived outlier,
/// restricted to the background (the complement of the source's
/// ground-truth foreground mask). Lower ⇒ more of the source's nuisance
/// content survived. The mask marks foreground with 1.
pub fn nuisance_retention(source: &LabeledImage, outlier: &Tensor) -> Result<f64> {
    let pixels = &source.pixels;
    if outlier.shape() != pixels.shape() {
        return Err(Error::invalid(format!(
            "outlier shape {:?} does not match source {:?}",
            outlier.shape(),
            pixels.shape()
        )));
    }
    let [c, h, w] = [pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]];
    let mask = &source.gt_foreground_mask;
    if mask.shape() != [h, w] {
        return Err(Error::invalid(format!(
            "foreground mask {:?} does not match image plane [{h}, {w}]",
            mask.shape()
        )));
    }
    let mut acc = 0.0f64;
    let mut background = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] != 0.0 {
                continue;
            }
            background += 1;
            for ch in 0..c {
                let idx = (ch * h + y) * w + x;
                let d = pixels.data()[idx] as f64 - outlier.data()[idx] as f64;
                acc += d * d;
            }
        }
    }
    if background == 0 {
        return Err(Error::invalid(
            "foreground mask covers the whole image; no background to compare",
        ));
    }
    Ok(acc / (background * c) as f64)
}

/// How much of the source's class identity an outlier lost, as judged by
/// an independent probe classifier: `1 − p_probe(source class | outlier)`.
/// The probe must be a plain classifier trained on in-distribution data
/// only; `source_class` is its class index for the source image.
pub fn semantic_shift(
    probe: &DetectorModel,
    source_class: usize,
    outlier: &Tensor,
) -> Result<f64> {
    let batch = crate::tensor::stack(&[outlier]);
    Ok(semantic_shift_batch(probe, &[source_class], &batch)?[0])
}

/// Batched [`semantic_shift`]: `source_classes[i]` belongs to row `i` of
/// `outliers`.
pub fn semantic_shift_batch(
    probe: &DetectorModel,
    source_classes: &[usize],
    outliers: &Tensor,
) -> Result<Vec<f64>> {
    if outliers.ndim() != 4 || outliers.shape()[0] != source_classes.len() {
        return Err(Error::invalid(format!(
            "expected [{}, c, h, w] outliers, got {:?}",
            source_classes.len(),
            outliers.shape()
        )));
    }
    let c = probe.config.num_classes;
    for &y in source_classes {
        if y >= c {
            return Err(Error::invalid(format!(
                "class index {y} out of range for a {c}-class probe"
            )));
        }
    }
    let logits = probe.logits_for(outliers)?;
    let mut out = Vec::with_capacity(source_classes.len());
    for (i, &y) in source_classes.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let p = (row[y] as f64 - max).exp() / denom;
        out.push(1.0 - p);
    }
    Ok(out)
}
