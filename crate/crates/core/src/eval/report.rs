//! Evaluation artifacts: metric CSVs, raw score dumps, and PNG contact
//! sheets. All writers are atomic (temp file + rename) and byte
//! deterministic for identical inputs.

use crate::data::archive::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use std::path::Path;

/// One metric measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Report section, e.g. `detection` or `outlier_quality`.
    pub section: String,
    /// Metric name, e.g. `auroc`.
    pub metric: String,
    /// Data split the measurement was taken on.
    pub split: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// A full evaluation report: an ordered list of measurements plus the
/// provenance they share.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> EvalReport {
        EvalReport {
            rows: Vec::new(),
            seed,
            config_hash: config_hash.into(),
        }
    }

    /// Append one measurement stamped with the report's provenance.
    pub fn push(&mut self, section: &str, metric: &str, split: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::numeric(
                "report",
                format!("{section}/{metric}/{split} is {value}"),
            ));
        }
        for (what, field) in [("section", section), ("metric", metric), ("split", split)] {
            if field.is_empty() || field.contains([',', '\n', '\r']) {
                return Err(Error::invalid(format!(
                    "report {what} `{field}` must be non-empty and comma-free"
                )));
            }
        }
        self.rows.push(ReportRow {
            section: section.into(),
            metric: metric.into(),
            split: split.into(),
            value,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        });
        Ok(())
    }

    /// Look up a measurement by metric and split.
    pub fn find(&self, metric: &str, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.split == split)
            .map(|r| r.value)
    }

    /// Enforce the report-level ranges: rates live in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            let ranged = matches!(row.metric.as_str(), "auroc" | "fpr_at_95tpr" | "id_accuracy");
            if ranged && !(0.0..=1.0).contains(&row.value) {
                return Err(Error::invalid(format!(
                    "{}/{} = {} is outside [0, 1]",
                    row.metric, row.split, row.value
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,metric,split,value,seed,config_hash\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.section, r.metric, r.split, r.value, r.seed, r.config_hash
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Write a report CSV (also exposed on [`EvalReport::save`]).
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    report.save(path)
}

/// One raw detector score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub split: String,
    pub energy: f64,
}

/// Dump raw scores as `sample_id,split,energy` rows.
pub fn write_scores_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,split,energy\n");
    for r in rows {
        for field in [&r.sample_id, &r.split] {
            if field.is_empty() || field.contains([',', '\n', '\r']) {
                return Err(Error::invalid(format!(
                    "score field `{field}` must be non-empty and comma-free"
                )));
            }
        }
        if !r.energy.is_finite() {
            return Err(Error::numeric("score dump", format!("{} is {}", r.sample_id, r.energy)));
        }
        out.push_str(&format!("{},{},{}\n", r.sample_id, r.split, r.energy));
    }
    write_atomic(path, out.as_bytes())
}

/// Parse a score dump produced by [`write_scores_csv`].
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("sample_id,split,energy") => {}
        other => {
            return Err(Error::invalid(format!(
                "unexpected score CSV header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!(
                "score CSV line {}: expected 3 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let energy: f64 = parts[2]
            .parse()
            .map_err(|_| Error::invalid(format!("score CSV line {}: bad energy `{}`", i + 2, parts[2])))?;
        rows.push(ScoreRow {
            sample_id: parts[0].to_string(),
            split: parts[1].to_string(),
            energy,
        });
    }
    Ok(rows)
}

/// Render `[3, h, w]` images (values in `[0, 1]`) onto a contact sheet
/// with `per_row` cells per row, unfilled cells black, and write it as a
/// PNG. Intended for qualitative (source, outlier, …) triplet rows, so
/// callers typically pass images in triplet order with `per_row` a
/// multiple of 3.
pub fn write_png_grid(images: &[Tensor], per_row: usize, path: &Path) -> Result<()> {
    if images.is_empty() || per_row == 0 {
        return Err(Error::invalid("image grid needs images and per_row ≥ 1"));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!(
            "grid cells must be [3, h, w] images, got {shape:?}"
        )));
    }
    if images.iter().any(|t| t.shape() != shape) {
        return Err(Error::invalid("grid cells must share one shape"));
    }
    let (h, w) = (shape[1], shape[2]);
    let rows = images.len().div_ceil(per_row);
    let (canvas_w, canvas_h) = (per_row * w, rows * h);

    let mut raw = vec![0u8; canvas_w * canvas_h * 3];
    for (idx, img) in images.iter().enumerate() {
        let (cell_y, cell_x) = (idx / per_row, idx % per_row);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = img.data()[(c * h + y) * w + x];
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    let px = (cell_y * h + y) * canvas_w + cell_x * w + x;
                    raw[px * 3 + c] = byte;
                }
            }
        }
    }

    let mut bytes: Vec<u8> = Vec::new();
    PngEncoder::new(&mut bytes)
        .write_image(&raw, canvas_w as u32, canvas_h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn report_round_trip_and_lookup() {
        let mut rep = EvalReport::new(7, "abc123");
        rep.push("detection", "auroc", "near_ood", 0.875).unwrap();
        rep.push("detection", "fpr_at_95tpr", "near_ood", 0.25).unwrap();
        assert_eq!(rep.find("auroc", "near_ood"), Some(0.875));
        assert_eq!(rep.find("auroc", "far_ood"), None);
        let csv = rep.to_csv();
        assert!(csv.starts_with("section,metric,split,value,seed,config_hash\n"));
        assert!(csv.contains("detection,auroc,near_ood,0.875,7,abc123\n"));
    }

    #[test]
    fn report_rejects_bad_rows() {
        let mut rep = EvalReport::new(0, "h");
        assert!(rep.push("a", "b", "c", f64::NAN).is_err());
        assert!(rep.push("a,b", "m", "s", 0.5).is_err());
        assert!(rep.push("", "m", "s", 0.5).is_err());
        rep.push("detection", "auroc", "near_ood", 1.5).unwrap();
        assert!(rep.validate().is_err());
    }

    #[test]
    fn report_save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut rep = EvalReport::new(3, "deadbeef");
        rep.push("detection", "auroc", "near_ood", 0.9125).unwrap();
        rep.push("outlier_quality", "nuisance_retention", "outliers", 0.0125)
            .unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        rep.save(&p1).unwrap();
        rep.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ScoreRow {
                sample_id: "id_test:0".into(),
                split: "id_test".into(),
                energy: -1.25,
            },
            ScoreRow {
                sample_id: "near_ood:1".into(),
                split: "near_ood".into(),
                energy: 0.5,
            },
        ];
        let path = dir.path().join("scores.csv");
        write_scores_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = parse_scores_csv(&text).unwrap();
        assert_eq!(parsed, rows);
        assert!(parse_scores_csv("wrong,header\n").is_err());
        assert!(parse_scores_csv("sample_id,split,energy\nx,y\n").is_err());
    }

    #[test]
    fn png_grid_writes_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(5);
        let images: Vec<Tensor> = (0..5)
            .map(|_| rng.uniform_tensor([3, 4, 4], 0.0, 1.0))
            .collect();
        let p1 = dir.path().join("grid1.png");
        let p2 = dir.path().join("grid2.png");
        write_png_grid(&images, 3, &p1).unwrap();
        write_png_grid(&images, 3, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        assert_eq!(&b1[1..4], b"PNG");

        assert!(write_png_grid(&[], 3, &p1).is_err());
        assert!(write_png_grid(&images, 0, &p1).is_err());
        let odd = Tensor::zeros([1, 4, 4]);
        assert!(write_png_grid(&[odd], 3, &p1).is_err());
    }
}
