//! Descriptor evaluation: pair classification by distance threshold (ROC,
//! false positive rate at 95% true positive rate) and nearest-neighbour
//! matching against overlap ground truth (precision-recall, average
//! precision).
//!
//! A pair is accepted when its distance falls at or below the threshold, so
//! ties at the threshold count as accepted. The operating point for the
//! headline number is the smallest threshold whose true positive rate
//! reaches 0.95 — the first crossing of the 95% line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::PairLabel;
use crate::tensor::Tensor;

/// One evaluation pair: an L2 distance and its match label.
#[derive(Clone, Copy, Debug)]
pub struct ScoredPair {
    pub distance: f64,
    pub label: PairLabel,
}

impl ScoredPair {
    pub fn new(distance: f64, label: PairLabel) -> Result<Self> {
        if !distance.is_finite() || distance < 0.0 {
            return Err(Error::invalid(
                "scored pair",
                format!("distance must be finite and non-negative, got {distance}"),
            ));
        }
        Ok(ScoredPair { distance, label })
    }
}

fn split_classes(pairs: &[ScoredPair]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in pairs {
        if !p.distance.is_finite() || p.distance < 0.0 {
            return Err(Error::invalid("eval", "non-finite or negative distance"));
        }
        match p.label {
            PairLabel::Positive => pos.push(p.distance),
            PairLabel::Negative => neg.push(p.distance),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(
            "eval",
            "need at least one positive and one negative pair",
        ));
    }
    Ok((pos, neg))
}

/// False positive rate at the smallest threshold accepting at least 95% of
/// the positive pairs. Depends only on the distance ranking, so any
/// strictly monotone rescaling of the distances leaves it unchanged.
pub fn fpr_at_95_tpr(pairs: &[ScoredPair]) -> Result<f64> {
    let (mut pos, neg) = split_classes(pairs)?;
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let need = ((0.95 * pos.len() as f64).ceil() as usize).clamp(1, pos.len());
    let threshold = pos[need - 1];
    let false_accepts = neg.iter().filter(|&&d| d <= threshold).count();
    Ok(false_accepts as f64 / neg.len() as f64)
}

/// One operating point of an evaluation curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Ordered operating points plus the scalar summary of the protocol that
/// produced them (FPR@95 for ROC, average precision for PR).
#[derive(Clone, Debug)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub summary: f64,
    pub summary_name: &'static str,
    pub x_name: &'static str,
    pub y_name: &'static str,
}

impl EvalCurve {
    /// Thresholds sorted, every rate inside [0, 1].
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].threshold < w[0].threshold {
                return Err(Error::invalid("eval curve", "thresholds out of order"));
            }
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(Error::invalid("eval curve", "rate outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// CSV with a comment header carrying the tool version and any
    /// protocol notes, then one row per operating point.
    pub fn to_csv(&self, note: &str) -> String {
        let mut out = format!(
            "# patchdesc {} {}={:.9}{}{}\n",
            crate::VERSION,
            self.summary_name,
            self.summary,
            if note.is_empty() { "" } else { " " },
            note
        );
        out.push_str(&format!("threshold,{},{}\n", self.x_name, self.y_name));
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.x, p.y));
        }
        out
    }
}

/// Full ROC sweep over every distinct distance threshold, beginning at the
/// reject-everything point. Both rates are non-decreasing along the sweep.
pub fn roc_curve(pairs: &[ScoredPair]) -> Result<EvalCurve> {
    let (pos, neg) = split_classes(pairs)?;
    let (np, nn) = (pos.len() as f64, neg.len() as f64);

    let mut sorted: Vec<(f64, bool)> = pos
        .iter()
        .map(|&d| (d, true))
        .chain(neg.iter().map(|&d| (d, false)))
        .collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut points = vec![CurvePoint {
        threshold: f64::NEG_INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold: t,
            x: fp as f64 / nn,
            y: tp as f64 / np,
        });
    }

    let curve = EvalCurve {
        points,
        summary: fpr_at_95_tpr(pairs)?,
        summary_name: "fpr_at_95_tpr",
        x_name: "fpr",
        y_name: "tpr",
    };
    curve.validate()?;
    Ok(curve)
}

/// A nearest-neighbour match from one left patch to its closest right patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NnMatch {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

/// Exact L2 nearest neighbour in the right set for every left descriptor.
/// Distance ties resolve to the lowest right index.
pub fn nn_match(left: &Tensor<f32>, right: &Tensor<f32>) -> Result<Vec<NnMatch>> {
    let (nl, dim) = left.dims2("nn match")?;
    let (nr, rdim) = right.dims2("nn match")?;
    if rdim != dim {
        return Err(Error::shape("nn match", "descriptor dim", dim, rdim));
    }
    if nr == 0 {
        return Err(Error::invalid("nn match", "right descriptor set is empty"));
    }
    let ld = left.data();
    let rd = right.data();
    let find = |i: usize| -> NnMatch {
        let a = &ld[i * dim..(i + 1) * dim];
        let mut best = 0usize;
        let mut best_sq = f64::INFINITY;
        for j in 0..nr {
            let b = &rd[j * dim..(j + 1) * dim];
            let mut acc = 0f64;
            for k in 0..dim {
                let d = a[k] as f64 - b[k] as f64;
                acc += d * d;
            }
            // Strict less-than keeps the lowest index on ties.
            if acc < best_sq {
                best_sq = acc;
                best = j;
            }
        }
        NnMatch {
            left: i,
            right: best,
            distance: best_sq.sqrt(),
        }
    };
    Ok(if nl * nr > 16384 {
        (0..nl).into_par_iter().map(find).collect()
    } else {
        (0..nl).map(find).collect()
    })
}

/// Correspondences of one image pair under the 50% overlap criterion.
#[derive(Clone, Debug, Default)]
pub struct OverlapGroundTruth {
    correspondences: BTreeMap<(u32, u32), f32>,
    left_with_match: BTreeSet<u32>,
    /// Rows dropped because their overlap error was not below 0.5.
    pub rejected_rows: usize,
    /// Duplicate (left, right) rows collapsed into one.
    pub duplicate_rows: usize,
    bounds: Option<(usize, usize)>,
}

impl OverlapGroundTruth {
    pub fn len(&self) -> usize {
        self.correspondences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }

    pub fn contains(&self, left: usize, right: usize) -> bool {
        self.correspondences
            .contains_key(&(left as u32, right as u32))
    }

    /// Left patches having at least one correspondence — the recall
    /// denominator, since each left patch contributes at most one match.
    pub fn matchable_left_count(&self) -> usize {
        self.left_with_match.len()
    }

    pub fn overlap_error(&self, left: usize, right: usize) -> Option<f32> {
        self.correspondences
            .get(&(left as u32, right as u32))
            .copied()
    }
}

/// Parses overlap ground truth: whitespace rows of
/// `left_index right_index overlap_error`. Rows at or above 0.5 overlap
/// error are rejected (counted, not fatal); duplicates are collapsed.
/// When `bounds = (num_left, num_right)` is known, indices are validated
/// against it row by row.
pub fn load_overlap_gt(path: &Path, bounds: Option<(usize, usize)>) -> Result<OverlapGroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut gt = OverlapGroundTruth {
        bounds,
        ..Default::default()
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected `left right overlap_error`, got {line:?}"),
            ));
        }
        let left: u32 = tokens[0].parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("bad left index {:?}", tokens[0]))
        })?;
        let right: u32 = tokens[1].parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("bad right index {:?}", tokens[1]))
        })?;
        let overlap: f32 = tokens[2].parse().map_err(|_| {
            Error::parse(
                path,
                lineno + 1,
                format!("bad overlap error {:?}", tokens[2]),
            )
        })?;
        if let Some((nl, nr)) = bounds {
            if left as usize >= nl || right as usize >= nr {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("index ({left}, {right}) outside ({nl}, {nr})"),
                ));
            }
        }
        if !(0.0..0.5).contains(&overlap) {
            gt.rejected_rows += 1;
            continue;
        }
        if gt.correspondences.insert((left, right), overlap).is_some() {
            gt.duplicate_rows += 1;
        } else {
            gt.left_with_match.insert(left);
        }
    }
    Ok(gt)
}

/// Precision-recall over a nearest-neighbour match list, sweeping the
/// acceptance threshold from strictest to most permissive across the
/// distinct match distances. A match is a true positive exactly when its
/// (left, right) pair is a ground-truth correspondence. The summary is the
/// trapezoidal area under the curve.
pub fn pr_curve(matches: &[NnMatch], gt: &OverlapGroundTruth) -> Result<EvalCurve> {
    let denom = gt.matchable_left_count();
    if denom == 0 {
        return Err(Error::invalid(
            "pr curve",
            "ground truth has no matchable left patches",
        ));
    }
    if matches.is_empty() {
        return Err(Error::invalid("pr curve", "empty match list"));
    }
    if let Some((nl, nr)) = gt.bounds {
        for m in matches {
            if m.left >= nl || m.right >= nr {
                return Err(Error::invalid(
                    "pr curve",
                    format!("match ({}, {}) outside index space ({nl}, {nr})", m.left, m.right),
                ));
            }
        }
    }

    let mut sorted: Vec<&NnMatch> = matches.iter().collect();
    sorted.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());

    let mut points: Vec<CurvePoint> = Vec::new();
    let mut tp = 0usize;
    let mut accepted = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].distance;
        while i < sorted.len() && sorted[i].distance == t {
            accepted += 1;
            if gt.contains(sorted[i].left, sorted[i].right) {
                tp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold: t,
            x: tp as f64 / denom as f64,
            y: tp as f64 / accepted as f64,
        });
    }

    // Trapezoid over recall, anchored at recall 0 with the first precision.
    let mut ap = 0.0;
    let (mut prev_r, mut prev_p) = (0.0, points[0].y);
    for p in &points {
        ap += (p.x - prev_r) * (p.y + prev_p) / 2.0;
        prev_r = p.x;
        prev_p = p.y;
    }

    let mut all = vec![CurvePoint {
        threshold: f64::NEG_INFINITY,
        x: 0.0,
        y: points[0].y,
    }];
    all.extend(points);
    let curve = EvalCurve {
        points: all,
        summary: ap,
        summary_name: "average_precision",
        x_name: "recall",
        y_name: "precision",
    };
    curve.validate()?;
    Ok(curve)
}

/// Per-sequence and overall means of per-image-pair average precisions.
#[derive(Clone, Debug)]
pub struct MeanApTable {
    /// (sequence, mean AP over its image pairs), in input order of first
    /// appearance.
    pub per_sequence: Vec<(String, f64)>,
    /// Mean over every image pair across all sequences.
    pub overall: f64,
}

/// `rows` are (sequence, image_pair, average_precision).
pub fn mean_ap(rows: &[(String, String, f64)]) -> Result<MeanApTable> {
    if rows.is_empty() {
        return Err(Error::invalid("mean ap", "no average precisions supplied"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (seq, _, ap) in rows {
        if !sums.contains_key(seq) {
            order.push(seq.clone());
        }
        let e = sums.entry(seq.clone()).or_insert((0.0, 0));
        e.0 += ap;
        e.1 += 1;
        total += ap;
    }
    let per_sequence = order
        .into_iter()
        .map(|seq| {
            let (sum, n) = sums[&seq];
            (seq, sum / n as f64)
        })
        .collect();
    Ok(MeanApTable {
        per_sequence,
        overall: total / rows.len() as f64,
    })
}

impl MeanApTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# patchdesc {} overall_map={:.9}\nsequence,mean_ap\n",
            crate::VERSION,
            self.overall
        );
        for (seq, ap) in &self.per_sequence {
            out.push_str(&format!("{seq},{ap}\n"));
        }
        out.push_str(&format!("OVERALL,{}\n", self.overall));
        out
    }
}
