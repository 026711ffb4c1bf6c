//! Accuracy-under-attack measurement, transfer matrices, ablation sweeps,
//! and report emission (CSV / markdown / SVG).
//!
//! Accuracy is always an exact fraction (correct count over sample count);
//! evaluation parallelizes over image chunks and aggregates by pure
//! counting, so results are identical for any thread count.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attacks::{attack_with_init, fgsm_step, map_train, MapConfig, Perturbation};
use crate::data::{sample_balanced_subset, Dataset};
use crate::error::{Error, Result};
use crate::models::{accuracy_on, Model};
use crate::tensor::Tensor;

/// How to perturb a batch before classifying it.
#[derive(Clone, Copy, Debug)]
pub enum AttackProcedure<'a> {
    /// Identity perturbation.
    Clean,
    /// One signed ascent step of the given size per image.
    Fgsm { step: f32 },
    /// Add a fixed universal perturbation, no adaptation.
    Uap { perturbation: &'a Perturbation },
    /// One signed ascent step of size alpha starting from the perturbation.
    Map {
        perturbation: &'a Perturbation,
        alpha: f32,
    },
}

impl AttackProcedure<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            AttackProcedure::Clean => "clean",
            AttackProcedure::Fgsm { .. } => "fgsm",
            AttackProcedure::Uap { .. } => "uap",
            AttackProcedure::Map { .. } => "map",
        }
    }
}

fn apply_uap(images: &Tensor, v: &Tensor) -> Tensor {
    let img_len = v.numel();
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(images.numel());
    for i in 0..n {
        let row = &images.data()[i * img_len..(i + 1) * img_len];
        out.extend(
            row.iter()
                .zip(v.data())
                .map(|(&x, &p)| (x + p).clamp(0.0, 1.0)),
        );
    }
    Tensor::from_parts(images.shape().to_vec(), out)
}

/// Fraction of images still classified correctly after the attack.
///
/// Chunked and embarrassingly parallel; per-image results do not depend on
/// the chunking because sign-based attacks are per-image computations.
pub fn accuracy_under_attack(
    model: &Model,
    dataset: &Dataset,
    attack: &AttackProcedure,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    if dataset.image_shape() != model.spec.input_shape.as_slice() {
        return Err(Error::shape(format!(
            "dataset images {:?} do not fit model input {:?}",
            dataset.image_shape(),
            model.spec.input_shape
        )));
    }
    if let AttackProcedure::Clean = attack {
        // Same code path as training-time held-out accuracy, so the clean
        // row agrees with recorded model metadata exactly.
        return accuracy_on(model, &dataset.images, &dataset.labels);
    }

    let n = dataset.len();
    let chunk = 200;
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(n)))
        .collect();

    let correct: usize = ranges
        .par_iter()
        .map(|&(start, end)| -> Result<usize> {
            let indices: Vec<usize> = (start..end).collect();
            let (images, labels) = dataset.gather(&indices);
            let attacked = match attack {
                AttackProcedure::Clean => unreachable!(),
                AttackProcedure::Fgsm { step } => fgsm_step(model, &images, &labels, *step)?,
                AttackProcedure::Uap { perturbation } => apply_uap(&images, &perturbation.v),
                AttackProcedure::Map {
                    perturbation,
                    alpha,
                } => attack_with_init(
                    model,
                    &images,
                    &labels,
                    perturbation,
                    *alpha,
                    perturbation.epsilon,
                )?,
            };
            let preds = model.predict(&attacked)?;
            Ok(preds.iter().zip(&labels).filter(|(p, l)| p == l).count())
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;

    Ok(correct as f64 / n as f64)
}

/// Source-model × target-model accuracy grid for meta perturbations, plus a
/// per-target single-step (no initialization) baseline row.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub model_ids: Vec<String>,
    /// `entries[source][target]`
    pub entries: Vec<Vec<f64>>,
    pub fgsm_baseline: Vec<f64>,
    pub epsilon: f32,
    pub alpha: f32,
    pub sample_count: usize,
}

/// Evaluate every source perturbation against every target model with a
/// one-step adaptation on the target. `maps[i]` must come from `models[i]`
/// and all budgets must agree.
pub fn transfer_matrix(
    models: &[Model],
    maps: &[Perturbation],
    testset: &Dataset,
    alpha: f32,
) -> Result<TransferMatrix> {
    if models.is_empty() || models.len() != maps.len() {
        return Err(Error::Config(format!(
            "need one perturbation per model, got {} models and {} perturbations",
            models.len(),
            maps.len()
        )));
    }
    let epsilon = maps[0].epsilon;
    for m in maps {
        if m.epsilon != epsilon {
            return Err(Error::Config(format!(
                "perturbation budgets differ: {} vs {epsilon}",
                m.epsilon
            )));
        }
    }

    let mut entries = Vec::with_capacity(models.len());
    for source in maps {
        let mut row = Vec::with_capacity(models.len());
        for target in models {
            row.push(accuracy_under_attack(
                target,
                testset,
                &AttackProcedure::Map {
                    perturbation: source,
                    alpha,
                },
            )?);
        }
        entries.push(row);
    }

    let mut fgsm_baseline = Vec::with_capacity(models.len());
    for target in models {
        fgsm_baseline.push(accuracy_under_attack(
            target,
            testset,
            &AttackProcedure::Fgsm { step: alpha },
        )?);
    }

    Ok(TransferMatrix {
        model_ids: models.iter().map(|m| m.id().to_string()).collect(),
        entries,
        fgsm_baseline,
        epsilon,
        alpha,
        sample_count: testset.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationPoint {
    pub subset_size: usize,
    pub accuracy: f64,
}

fn subset_seed(base: u64, size: usize) -> u64 {
    let mut z = base ^ (size as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Train one meta perturbation per subset size (fresh seed-derived subsets
/// of the training split) and measure its attack accuracy on the test set.
pub fn ablation_sweep(
    model: &Model,
    train_split: &Dataset,
    testset: &Dataset,
    sizes: &[usize],
    cfg: &MapConfig,
    epsilon: f32,
) -> Result<Vec<AblationPoint>> {
    if sizes.is_empty() {
        return Err(Error::Config("ablation needs at least one size".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "subset sizes must be strictly ascending".into(),
        ));
    }
    for &size in sizes {
        if size < train_split.num_classes {
            return Err(Error::Config(format!(
                "subset size {size} cannot cover {} classes",
                train_split.num_classes
            )));
        }
        if size > train_split.len() {
            return Err(Error::Dataset(format!(
                "subset size {size} exceeds the training split ({})",
                train_split.len()
            )));
        }
    }

    let mut curve = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let subset = sample_balanced_subset(train_split, size, subset_seed(cfg.seed, size))?;
        let map = map_train(model, &subset, cfg, epsilon)?;
        let accuracy = accuracy_under_attack(
            model,
            testset,
            &AttackProcedure::Map {
                perturbation: &map,
                alpha: cfg.alpha,
            },
        )?;
        curve.push(AblationPoint {
            subset_size: size,
            accuracy,
        });
    }
    Ok(curve)
}

// --- reports ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub attack: String,
    pub split: String,
    pub accuracy: f64,
    pub n: usize,
    pub fingerprint: String,
}

/// Table of per-(model, attack, split) accuracies, optionally carrying an
/// ablation curve for chart emission.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub ablation: Option<Vec<(usize, f64)>>,
}

impl EvalReport {
    pub fn push(
        &mut self,
        model: &str,
        attack: &str,
        split: &str,
        accuracy: f64,
        n: usize,
        fingerprint: &str,
    ) {
        self.rows.push(ReportRow {
            model: model.to_string(),
            attack: attack.to_string(),
            split: split.to_string(),
            accuracy,
            n,
            fingerprint: fingerprint.to_string(),
        });
    }

    fn validate(&self) -> Result<()> {
        if self.rows.is_empty() && self.ablation.is_none() {
            return Err(Error::Config("report is empty".into()));
        }
        for row in &self.rows {
            if !(0.0..=1.0).contains(&row.accuracy) || row.n == 0 {
                return Err(Error::Config(format!(
                    "invalid report row: accuracy {} over {} samples",
                    row.accuracy, row.n
                )));
            }
            for field in [&row.model, &row.attack, &row.split, &row.fingerprint] {
                if field.contains(',') || field.contains('\n') {
                    return Err(Error::Config(format!(
                        "report field `{field}` contains a separator"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reproducible short hash of a hyperparameter set: sha-256 over the sorted
/// `key=value` lines, truncated to 16 hex chars.
pub fn fingerprint(parts: &[(&str, String)]) -> String {
    let mut lines: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    lines.sort();
    let digest = Sha256::digest(lines.join("\n").as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub const CSV_HEADER: &str = "model,attack,split,accuracy,n,fingerprint";

fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        // f64 Display uses the shortest round-trippable form, so
        // parse(emit(r)) reproduces the accuracy bit-exactly.
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.attack, r.split, r.accuracy, r.n, r.fingerprint
        ));
    }
    out
}

fn render_markdown(report: &EvalReport) -> String {
    // Table-shaped grid: one row per attack × split, one column per model.
    let mut models: Vec<&str> = Vec::new();
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in &report.rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !keys.contains(&(r.attack.as_str(), r.split.as_str())) {
            keys.push((&r.attack, &r.split));
        }
    }

    let mut out = String::new();
    out.push_str("| attack | split |");
    for m in &models {
        out.push_str(&format!(" {m} |"));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in &models {
        out.push_str("---|");
    }
    out.push('\n');
    for (attack, split) in keys {
        out.push_str(&format!("| {attack} | {split} |"));
        for m in &models {
            let cell = report
                .rows
                .iter()
                .find(|r| r.model == *m && r.attack == attack && r.split == split)
                .map(|r| format!(" {:.1}% |", r.accuracy * 100.0))
                .unwrap_or_else(|| " — |".to_string());
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

fn render_ablation_svg(points: &[(usize, f64)]) -> String {
    let (w, h) = (480.0f64, 320.0f64);
    let (ml, mr, mt, mb) = (56.0, 16.0, 16.0, 44.0);
    let x_min = points.first().map(|p| p.0 as f64).unwrap_or(0.0);
    let x_max = points.last().map(|p| p.0 as f64).unwrap_or(1.0);
    let x_span = (x_max - x_min).max(1.0);
    let sx = |v: f64| ml + (v - x_min) / x_span * (w - ml - mr);
    let sy = |acc: f64| mt + (1.0 - acc) * (h - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = sy(frac);
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.0}%</text>\n",
            ml - 6.0,
            y + 4.0,
            frac * 100.0
        ));
    }
    let coords: Vec<String> = points
        .iter()
        .map(|&(size, acc)| format!("{:.1},{:.1}", sx(size as f64), sy(acc)))
        .collect();
    svg.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        coords.join(" ")
    ));
    for &(size, acc) in points {
        svg.push_str(&format!(
            "  <circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>\n",
            sx(size as f64),
            sy(acc)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{size}</text>\n",
            sx(size as f64),
            h - mb + 16.0
        ));
    }
    svg.push_str("  <text x=\"240\" y=\"312\" font-size=\"12\" text-anchor=\"middle\">images used to train the perturbation</text>\n");
    svg.push_str("</svg>\n");
    svg
}

/// Write a report in the requested format. The SVG format renders the
/// attached ablation curve and errors when the report has none.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    report.validate()?;
    let body = match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Svg => match &report.ablation {
            Some(points) if !points.is_empty() => render_ablation_svg(points),
            _ => {
                return Err(Error::Config(
                    "svg output needs a report with an ablation curve".into(),
                ))
            }
        },
    };
    fs::write(path, body)?;
    Ok(())
}

/// Parse a CSV produced by [`emit_report`], inverting it exactly.
pub fn parse_report_csv(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::format(
                path.display().to_string(),
                format!("bad header: {other:?}"),
            ))
        }
    }
    let mut report = EvalReport::default();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                path.display().to_string(),
                format!("row {}: expected 6 fields, got {}", i + 1, fields.len()),
            ));
        }
        let accuracy: f64 = fields[3].parse().map_err(|_| {
            Error::format(path.display().to_string(), format!("row {}: bad accuracy", i + 1))
        })?;
        let n: usize = fields[4].parse().map_err(|_| {
            Error::format(path.display().to_string(), format!("row {}: bad count", i + 1))
        })?;
        report.push(fields[0], fields[1], fields[2], accuracy, n, fields[5]);
    }
    Ok(report)
}

/// Transfer matrix as markdown: sources as rows, targets as columns, plus
/// the baseline row.
pub fn render_transfer_markdown(m: &TransferMatrix) -> String {
    let mut out = String::from("| source \\ target |");
    for id in &m.model_ids {
        out.push_str(&format!(" {id} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &m.model_ids {
        out.push_str("---|");
    }
    out.push('\n');
    for (i, id) in m.model_ids.iter().enumerate() {
        out.push_str(&format!("| {id} |"));
        for j in 0..m.model_ids.len() {
            out.push_str(&format!(" {:.1}% |", m.entries[i][j] * 100.0));
        }
        out.push('\n');
    }
    out.push_str("| fgsm |");
    for v in &m.fgsm_baseline {
        out.push_str(&format!(" {:.1}% |", v * 100.0));
    }
    out.push('\n');
    out
}

/// Transfer matrix as CSV with a `source` key column; the baseline row uses
/// the source id `fgsm`.
pub fn render_transfer_csv(m: &TransferMatrix) -> String {
    let mut out = String::from("source");
    for id in &m.model_ids {
        out.push_str(&format!(",{id}"));
    }
    out.push('\n');
    for (i, id) in m.model_ids.iter().enumerate() {
        out.push_str(id);
        for j in 0..m.model_ids.len() {
            out.push_str(&format!(",{}", m.entries[i][j]));
        }
        out.push('\n');
    }
    out.push_str("fgsm");
    for v in &m.fgsm_baseline {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_report() -> EvalReport {
        let mut r = EvalReport::default();
        let fp = fingerprint(&[("epsilon", "0.03137".into()), ("seed", "0".into())]);
        r.push("cnn-small", "clean", "test", 0.9715, 10000, &fp);
        r.push("cnn-small", "fgsm", "test", 0.4812, 10000, &fp);
        r.push("mlp-small", "clean", "test", 0.9644, 10000, &fp);
        r.push("mlp-small", "fgsm", "test", 0.55, 10000, &fp);
        r
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let report = sample_report();
        emit_report(&report, ReportFormat::Csv, &path).unwrap();
        let parsed = parse_report_csv(&path).unwrap();
        assert_eq!(parsed.rows, report.rows);
    }

    #[test]
    fn markdown_grid_has_one_row_per_attack_split_and_one_column_per_model() {
        let report = sample_report();
        let md = render_markdown(&report);
        let lines: Vec<&str> = md.lines().collect();
        // header + separator + 2 (attack, split) combinations
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("cnn-small") && lines[0].contains("mlp-small"));
        assert_eq!(lines[0].matches('|').count(), 5); // attack, split, 2 models
        assert!(lines[2].starts_with("| clean | test |"));
        assert!(lines[3].starts_with("| fgsm | test |"));
    }

    #[test]
    fn svg_has_one_polyline_with_one_point_per_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("curve.svg");
        let mut report = sample_report();
        report.ablation = Some(vec![(10, 0.62), (25, 0.55), (50, 0.5), (100, 0.47)]);
        emit_report(&report, ReportFormat::Svg, &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points_attr = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(points_attr.split_whitespace().count(), 4);

        report.ablation = None;
        assert!(emit_report(&report, ReportFormat::Svg, &path).is_err());
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempdir().unwrap();
        let report = EvalReport::default();
        assert!(emit_report(&report, ReportFormat::Csv, &dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let base = [
            ("epsilon", "0.03137".to_string()),
            ("seed", "0".to_string()),
        ];
        let a = fingerprint(&base);
        let b = fingerprint(&[base[1].clone(), base[0].clone()].map(|(k, v)| (k, v)));
        assert_eq!(a, b, "order must not matter");
        assert_eq!(a.len(), 16);

        let changed = fingerprint(&[
            ("epsilon", "0.03137".to_string()),
            ("seed", "1".to_string()),
        ]);
        assert_ne!(a, changed);
    }

    #[test]
    fn transfer_rendering_shapes() {
        let m = TransferMatrix {
            model_ids: vec!["a".into(), "b".into()],
            entries: vec![vec![0.2, 0.3], vec![0.25, 0.22]],
            fgsm_baseline: vec![0.5, 0.6],
            epsilon: 8.0 / 255.0,
            alpha: 8.0 / 255.0,
            sample_count: 100,
        };
        let md = render_transfer_markdown(&m);
        assert_eq!(md.lines().count(), 5); // header, rule, 2 sources, baseline
        let csv = render_transfer_csv(&m);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("fgsm,"));
    }
}
