//! Detection and OCR evaluation.
//!
//! Matching is greedy and one-to-one: predictions are visited in descending
//! score order, and each claims the highest-IoU unmatched ground truth of its
//! class in the same image, provided the IoU reaches the threshold. AP uses
//! 11-point interpolation; mAP averages it over ground-truth classes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::ocr::{self, OcrError};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SCORE_CUTOFF: f64 = 0.25;

const IMAGE_EXTENSIONS: [&str; 8] = ["jpg", "jpeg", "png", "bmp", "ppm", "pgm", "tif", "tiff"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{file}:{line}: malformed annotation {text:?}: {reason}")]
    MalformedLine { file: String, line: usize, text: String, reason: String },
    #[error("prediction line {line}: {reason}")]
    MalformedPrediction { line: usize, reason: String },
    #[error("OCR row {row}: {source}")]
    OcrRow { row: usize, source: OcrError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground-truth boxes per image id. Scores on truth boxes are unused.
pub type GroundTruthSet = BTreeMap<String, Vec<BBox>>;
/// Scored predictions per image id.
pub type PredictionSet = BTreeMap<String, Vec<BBox>>;

/// Reads darknet labels: every `<stem>.txt` next to an image holds lines of
/// `class cx cy w h`. Images without a label file have no boxes.
pub fn parse_darknet_annotations(dir: &Path) -> Result<GroundTruthSet, EvalError> {
    let mut stems = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let ext = ext.to_string_lossy().to_ascii_lowercase();
        let stem = stem.to_string_lossy().into_owned();
        if ext == "txt" && stem == "classes" {
            continue;
        }
        if ext == "txt" || IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            stems.insert(stem);
        }
    }

    let mut set = GroundTruthSet::new();
    for stem in stems {
        let label = dir.join(format!("{stem}.txt"));
        let boxes = if label.is_file() {
            let text = std::fs::read_to_string(&label)?;
            parse_darknet_labels(&text, &label.display().to_string())?
        } else {
            Vec::new()
        };
        set.insert(stem, boxes);
    }
    Ok(set)
}

pub fn parse_darknet_labels(text: &str, file: &str) -> Result<Vec<BBox>, EvalError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::MalformedLine {
            file: file.to_string(),
            line: i + 1,
            text: line.to_string(),
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0].parse().map_err(|_| bad(format!("bad class id {:?}", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, tok) in v.iter_mut().zip(&fields[1..]) {
            *slot = tok.parse().map_err(|_| bad(format!("bad number {tok:?}")))?;
        }
        let b = BBox::new(v[0], v[1], v[2], v[3], class_id, 1.0).map_err(|e| bad(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

#[derive(Debug, Deserialize)]
struct PredictionLine {
    image_id: String,
    class_id: u32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Reads NDJSON predictions `{image_id, class_id, cx, cy, w, h, score}`.
pub fn parse_predictions<R: BufRead>(reader: R) -> Result<PredictionSet, EvalError> {
    let mut set = PredictionSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| EvalError::MalformedPrediction { line: i + 1, reason: e.to_string() })?;
        let b = BBox::new(p.cx, p.cy, p.w, p.h, p.class_id, p.score)
            .map_err(|e| EvalError::MalformedPrediction { line: i + 1, reason: e.to_string() })?;
        set.entry(p.image_id).or_default().push(b);
    }
    Ok(set)
}

/// One prediction's fate after matching.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionMatch {
    pub image_id: String,
    /// Position within the image's prediction list.
    pub index: usize,
    pub class_id: u32,
    pub score: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchOutcome {
    /// In descending score order.
    pub predictions: Vec<PredictionMatch>,
    pub false_negatives: usize,
    /// Ground-truth count per class.
    pub positives: BTreeMap<u32, usize>,
}

impl MatchOutcome {
    pub fn true_positives(&self) -> usize {
        self.predictions.iter().filter(|p| p.true_positive).count()
    }

    pub fn false_positives(&self) -> usize {
        self.predictions.len() - self.true_positives()
    }
}

fn ranked(preds: &PredictionSet) -> Vec<(&str, usize, &BBox)> {
    let mut all: Vec<(&str, usize, &BBox)> = preds
        .iter()
        .flat_map(|(id, boxes)| boxes.iter().enumerate().map(move |(i, b)| (id.as_str(), i, b)))
        .collect();
    // Stable: equal scores stay in (image id, index) order.
    all.sort_by(|a, b| b.2.score.partial_cmp(&a.2.score).unwrap_or(Ordering::Equal));
    all
}

pub fn match_detections(preds: &PredictionSet, gts: &GroundTruthSet, iou_threshold: f64) -> MatchOutcome {
    let mut claimed: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(id, b)| (id.as_str(), vec![false; b.len()])).collect();
    let mut predictions = Vec::new();
    for (image_id, index, pred) in ranked(preds) {
        let mut best: Option<(usize, f64)> = None;
        if let (Some(truths), Some(taken)) = (gts.get(image_id), claimed.get(image_id)) {
            for (g, truth) in truths.iter().enumerate() {
                if taken[g] || truth.class_id != pred.class_id {
                    continue;
                }
                let overlap = iou(pred, truth);
                if overlap >= iou_threshold && best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((g, overlap));
                }
            }
        }
        if let Some((g, _)) = best {
            claimed.get_mut(image_id).expect("image has truths")[g] = true;
        }
        predictions.push(PredictionMatch {
            image_id: image_id.to_string(),
            index,
            class_id: pred.class_id,
            score: pred.score,
            true_positive: best.is_some(),
        });
    }

    let false_negatives = claimed.values().flatten().filter(|&&c| !c).count();
    let mut positives = BTreeMap::new();
    for b in gts.values().flatten() {
        *positives.entry(b.class_id).or_insert(0) += 1;
    }
    MatchOutcome { predictions, false_negatives, positives }
}

/// `(tp / (tp + fp), tp / (tp + fn))`, each 0 when its denominator is 0.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub ap: f64,
    pub positives: usize,
    pub curve: Vec<PrPoint>,
}

fn class_curves(outcome: &MatchOutcome) -> Vec<ClassAp> {
    outcome
        .positives
        .iter()
        .map(|(&class_id, &npos)| {
            let (mut tp, mut seen) = (0usize, 0usize);
            let mut points = Vec::new();
            for p in outcome.predictions.iter().filter(|p| p.class_id == class_id) {
                seen += 1;
                tp += usize::from(p.true_positive);
                points.push((tp, seen, p.score));
            }
            // Recall >= r/10 is checked as tp * 10 >= r * npos to stay exact.
            let ap = (0..=10usize)
                .map(|r| {
                    points
                        .iter()
                        .filter(|(tp, _, _)| tp * 10 >= r * npos)
                        .map(|&(tp, seen, _)| tp as f64 / seen as f64)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0;
            let curve = points
                .iter()
                .map(|&(tp, seen, score)| PrPoint { score, precision: tp as f64 / seen as f64, recall: tp as f64 / npos as f64 })
                .collect();
            ClassAp { class_id, ap, positives: npos, curve }
        })
        .collect()
}

/// Per-class 11-point interpolated AP for every ground-truth class.
pub fn class_average_precision(preds: &PredictionSet, gts: &GroundTruthSet, iou_threshold: f64) -> Vec<ClassAp> {
    class_curves(&match_detections(preds, gts, iou_threshold))
}

/// Mean of the per-class APs, as a fraction; 0 without ground truth.
pub fn average_precision(preds: &PredictionSet, gts: &GroundTruthSet, iou_threshold: f64) -> f64 {
    mean_ap(&class_average_precision(preds, gts, iou_threshold))
}

fn mean_ap(classes: &[ClassAp]) -> f64 {
    if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassAp>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_threshold: f64,
    pub score_cutoff: f64,
}

/// mAP over all predictions plus P/R/F1 over predictions scoring at least
/// `score_cutoff`.
pub fn evaluate(preds: &PredictionSet, gts: &GroundTruthSet, iou_threshold: f64, score_cutoff: f64) -> EvalReport {
    let per_class = class_average_precision(preds, gts, iou_threshold);
    let confident: PredictionSet = preds
        .iter()
        .map(|(id, boxes)| (id.clone(), boxes.iter().filter(|b| b.score >= score_cutoff).copied().collect()))
        .collect();
    let outcome = match_detections(&confident, gts, iou_threshold);
    let (tp, fp, fn_) = (outcome.true_positives(), outcome.false_positives(), outcome.false_negatives);
    let (precision, recall) = precision_recall(tp, fp, fn_);
    EvalReport {
        map: mean_ap(&per_class) * 100.0,
        precision,
        recall,
        f1: f1(precision, recall),
        per_class,
        tp,
        fp,
        fn_,
        iou_threshold,
        score_cutoff,
    }
}

impl EvalReport {
    /// Plain-text table: mAP in percent, the rest at two decimals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8}  {:>9}  {:>6}  {:>8}", "mAP", "Precision", "recall", "F1-score");
        let _ = writeln!(out, "{:>8.2}  {:>9.2}  {:>6.2}  {:>8.2}", self.map, self.precision, self.recall, self.f1);
        let _ = writeln!(out);
        let _ = writeln!(out, "TP {}  FP {}  FN {}  (IoU {:.2}, score >= {:.2})", self.tp, self.fp, self.fn_, self.iou_threshold, self.score_cutoff);
        for c in &self.per_class {
            let _ = writeln!(out, "class {:>3}  AP {:>6.2}%  truths {}", c.class_id, c.ap * 100.0, c.positives);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrRow {
    pub image_id: String,
    pub ground_truth: String,
    pub predicted: String,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrReportRow {
    pub image_id: String,
    pub characters_extracted: usize,
    pub accuracy: u32,
    pub seconds: String,
}

/// Per-image OCR figures: graphemes read, accuracy and engine time.
pub fn ocr_report(rows: &[OcrRow]) -> Result<Vec<OcrReportRow>, EvalError> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let accuracy =
                ocr::char_accuracy(&r.ground_truth, &r.predicted).map_err(|source| EvalError::OcrRow { row: i + 1, source })?;
            Ok(OcrReportRow {
                image_id: r.image_id.clone(),
                characters_extracted: ocr::grapheme_count(&r.predicted),
                accuracy,
                seconds: format!("{:.3}", r.duration_ms / 1000.0),
            })
        })
        .collect()
}

pub fn render_ocr_table(rows: &[OcrReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} | {:>26} | {:>22} | {:>27}", "Image No", "No of characters extracted", "Accuracy of OCR (in %)", "Time taken for OCR (in Seconds)");
    for r in rows {
        let _ = writeln!(out, "{:<10} | {:>26} | {:>22} | {:>27}", r.image_id, r.characters_extracted, r.accuracy, r.seconds);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64, class_id: u32, score: f64) -> BBox {
        BBox::new(cx, cy, w, h, class_id, score).unwrap()
    }

    fn set(entries: &[(&str, Vec<BBox>)]) -> BTreeMap<String, Vec<BBox>> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn darknet_lines() {
        let boxes = parse_darknet_labels("0 0.5 0.5 0.2 0.1\n\n", "a.txt").unwrap();
        assert_eq!(boxes, vec![b(0.5, 0.5, 0.2, 0.1, 0, 1.0)]);
        assert!(parse_darknet_labels("", "a.txt").unwrap().is_empty());
        let err = parse_darknet_labels("0 0.5 0.5 0.2 0.1\n0 1.5 0.5 0.2 0.1", "a.txt").unwrap_err();
        assert!(matches!(err, EvalError::MalformedLine { line: 2, .. }), "{err}");
        assert!(parse_darknet_labels("0 0.5 0.5 0.2", "a.txt").is_err());
        assert!(parse_darknet_labels("x 0.5 0.5 0.2 0.1", "a.txt").is_err());
    }

    #[test]
    fn darknet_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.jpg"), b"").unwrap();
        std::fs::write(dir.path().join("a.txt"), "0 0.5 0.5 0.2 0.1\n").unwrap();
        std::fs::write(dir.path().join("b.png"), b"").unwrap();
        std::fs::write(dir.path().join("b.txt"), "").unwrap();
        std::fs::write(dir.path().join("c.ppm"), b"").unwrap();
        std::fs::write(dir.path().join("classes.txt"), "plate\n").unwrap();
        let gts = parse_darknet_annotations(dir.path()).unwrap();
        assert_eq!(gts.keys().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(gts["a"].len(), 1);
        assert!(gts["b"].is_empty() && gts["c"].is_empty());
    }

    #[test]
    fn prediction_ndjson() {
        let text = "{\"image_id\":\"a\",\"class_id\":0,\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.1,\"score\":0.9}\n\n";
        let preds = parse_predictions(text.as_bytes()).unwrap();
        assert_eq!(preds["a"], vec![b(0.5, 0.5, 0.2, 0.1, 0, 0.9)]);
        let err = parse_predictions("{}\n{oops".as_bytes()).unwrap_err();
        assert!(matches!(err, EvalError::MalformedPrediction { line: 1, .. }));
    }

    #[test]
    fn matching_rules() {
        let truth = b(0.5, 0.5, 0.2, 0.2, 0, 1.0);
        let gts = set(&[("a", vec![truth])]);

        let out = match_detections(&set(&[("a", vec![truth])]), &gts, 0.5);
        assert_eq!((out.true_positives(), out.false_positives(), out.false_negatives), (1, 0, 0));

        let out = match_detections(&set(&[("z", vec![truth])]), &GroundTruthSet::new(), 0.5);
        assert_eq!((out.true_positives(), out.false_positives(), out.false_negatives), (0, 1, 0));

        // Both overlap the truth well; the higher score claims it.
        let low = b(0.51, 0.5, 0.2, 0.2, 0, 0.6);
        let high = b(0.52, 0.5, 0.2, 0.2, 0, 0.8);
        let out = match_detections(&set(&[("a", vec![low, high])]), &gts, 0.5);
        assert_eq!(out.predictions[0].index, 1);
        assert!(out.predictions[0].true_positive);
        assert!(!out.predictions[1].true_positive);

        // Class mismatch never matches.
        let out = match_detections(&set(&[("a", vec![b(0.5, 0.5, 0.2, 0.2, 1, 0.9)])]), &gts, 0.5);
        assert_eq!((out.true_positives(), out.false_negatives), (0, 1));
    }

    #[test]
    fn precision_recall_cases() {
        assert_eq!(precision_recall(10, 0, 0), (1.0, 1.0));
        assert_eq!(precision_recall(0, 5, 5), (0.0, 0.0));
        assert_eq!(precision_recall(0, 0, 0), (0.0, 0.0));
        let (p, r) = precision_recall(93, 7, 15);
        assert!((p - 0.93).abs() < 1e-12);
        assert_eq!(format!("{r:.2}"), "0.86");
    }

    #[test]
    fn f1_cases() {
        assert_eq!(format!("{:.2}", f1(0.93, 0.86)), "0.89");
        assert_eq!(format!("{:.2}", f1(0.70, 0.81)), "0.75");
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(f1(1.0, 1.0), 1.0);
    }

    #[test]
    fn ap_extremes() {
        let truth = b(0.5, 0.5, 0.2, 0.2, 0, 1.0);
        let gts = set(&[("a", vec![truth])]);
        assert_eq!(average_precision(&gts, &gts, 0.5), 1.0);
        assert_eq!(average_precision(&PredictionSet::new(), &gts, 0.5), 0.0);
        assert_eq!(average_precision(&PredictionSet::new(), &GroundTruthSet::new(), 0.5), 0.0);
    }

    #[test]
    fn ap_staircase_by_hand() {
        // Three truths in separate images; five predictions ranked
        // TP(0.9) FP(0.8) TP(0.7) FP(0.6) TP(0.5).
        // PR points: (1/1, 1/3) (1/2, 1/3) (2/3, 2/3) (2/4, 2/3) (3/5, 3/3).
        // Interpolated precision: r in {0..0.3} -> 1, r in {0.4..0.6} -> 2/3,
        // r in {0.7..1.0} -> 3/5. AP = (4 * 1 + 3 * 2/3 + 4 * 3/5) / 11 = 8.4 / 11.
        fn t(id: &str) -> (&str, Vec<BBox>) {
            (id, vec![b(0.5, 0.5, 0.2, 0.2, 0, 1.0)])
        }
        let gts = set(&[t("a"), t("b"), t("c")]);
        let hit = |s| b(0.5, 0.5, 0.2, 0.2, 0, s);
        let miss = |s| b(0.1, 0.1, 0.1, 0.1, 0, s);
        let preds = set(&[("a", vec![hit(0.9), miss(0.8)]), ("b", vec![hit(0.7), miss(0.6)]), ("c", vec![hit(0.5)])]);
        let ap = average_precision(&preds, &gts, 0.5);
        assert!((ap - 8.4 / 11.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let gts = set(&[("a", vec![b(0.5, 0.5, 0.2, 0.2, 0, 1.0), b(0.2, 0.2, 0.1, 0.1, 1, 1.0)])]);
        let r = evaluate(&gts, &gts, 0.5, 0.25);
        assert_eq!((r.map, r.precision, r.recall, r.f1), (100.0, 1.0, 1.0, 1.0));
        let r = evaluate(&PredictionSet::new(), &gts, 0.5, 0.25);
        assert_eq!((r.map, r.precision, r.recall, r.f1), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.fn_, 2);
    }

    #[test]
    fn evaluate_applies_cutoff() {
        let truth = b(0.5, 0.5, 0.2, 0.2, 0, 1.0);
        let gts = set(&[("a", vec![truth])]);
        let preds = set(&[("a", vec![b(0.5, 0.5, 0.2, 0.2, 0, 0.1)])]);
        let r = evaluate(&preds, &gts, 0.5, 0.25);
        assert_eq!(r.map, 100.0);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 1));
    }

    #[test]
    fn report_table_layout() {
        let gts = set(&[("a", vec![b(0.5, 0.5, 0.2, 0.2, 0, 1.0)])]);
        let table = evaluate(&gts, &gts, 0.5, 0.25).render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].contains("mAP") && lines[0].contains("F1-score"));
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["100.00", "1.00", "1.00", "1.00"]);
    }

    #[test]
    fn ocr_rows() {
        let row = |id: &str, gt: &str, pred: &str, ms: f64| OcrRow {
            image_id: id.into(),
            ground_truth: gt.into(),
            predicted: pred.into(),
            duration_ms: ms,
        };
        let rows: Vec<OcrRow> = (1..=9).map(|i| row(&i.to_string(), "ঢাকা মেট্রো", "ঢাকা মেট্রো", 402.0)).collect();
        let report = ocr_report(&rows).unwrap();
        assert_eq!(report[0].accuracy, 100);
        assert_eq!(report[0].seconds, "0.402");
        assert_eq!(report[0].characters_extracted, 5);
        let table = render_ocr_table(&report);
        assert_eq!(table.lines().count(), 10);
        assert!(matches!(ocr_report(&[row("x", "", "a", 1.0)]), Err(EvalError::OcrRow { row: 1, .. })));
    }
}
