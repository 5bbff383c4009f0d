//! Detection metrics (correspondence F-scores, ODS/OIS, average precision)
//! and depth metrics (per-layer MAE) for traced layers.
//!
//! Pixel correspondence is a greedy one-to-one matching: candidate
//! (prediction, ground-truth) pairs within the tolerance are sorted by
//! squared distance — an exact integer — with ties broken by the unordered
//! pair of row-major indices, so swapping prediction and ground truth swaps
//! FP and FN while TP stays fixed. ODS picks the one threshold maximizing
//! the F-score of dataset-aggregated counts (lowest threshold on ties); OIS
//! averages each image's best F. Layer depth error pairs layers by depth
//! order and averages |gt − pred| over the columns where both are defined,
//! reporting the defined fraction as coverage.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Layer, LayerSet};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::postproc;
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLDS: usize = 99;
pub const DEFAULT_MIN_PIXELS: usize = 8;

/// Benchmark-convention correspondence tolerance: 0.75% of the image
/// diagonal, rounded, never below one pixel.
pub fn default_tolerance(rows: usize, cols: usize) -> f64 {
    let diag = ((rows * rows + cols * cols) as f64).sqrt();
    (0.0075 * diag).round().max(1.0)
}

/// One point of a precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl PrPoint {
    pub fn from_counts(threshold: f64, tp: u64, fp: u64, fn_: u64) -> Self {
        PrPoint {
            threshold,
            tp,
            fp,
            fn_,
            precision: precision_of(tp, fp),
            recall: recall_of(tp, fn_),
            f: f_score(tp, fp, fn_),
        }
    }
}

/// TP/(TP + (FP+FN)/2), defined as 0 whenever TP = 0.
pub fn f_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    tp as f64 / (tp as f64 + (fp + fn_) as f64 / 2.0)
}

/// TP/(TP+FP); an empty prediction set is vacuously precise.
pub fn precision_of(tp: u64, fp: u64) -> f64 {
    if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// TP/(TP+FN); an empty ground truth yields recall 0, which keeps the
/// F identity f = 2PR/(P+R) consistent with the TP=0 rule.
pub fn recall_of(tp: u64, fn_: u64) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

fn positives<T: Scalar>(mask: &Grid<T>) -> Vec<(usize, usize)> {
    let s = mask.shape();
    let mut out = Vec::new();
    for r in 0..s.rows {
        for c in 0..s.cols {
            if mask.at(0, 0, r, c).to_f64() > 0.5 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Greedy one-to-one correspondence of positive pixels within Euclidean
/// distance `tol`; returns (TP, FP, FN).
pub fn correspond<T: Scalar>(pred: &Grid<T>, gt: &Grid<T>, tol: f64) -> Result<(u64, u64, u64)> {
    let s = pred.shape();
    if s != gt.shape() {
        return Err(Error::shape(
            "correspond",
            format!("prediction {} vs ground truth {}", s, gt.shape()),
        ));
    }
    if s.batch != 1 || s.channels != 1 {
        return Err(Error::shape("correspond", "expected a single-plane mask"));
    }
    if !(tol >= 0.0) {
        return Err(Error::Domain(format!("tolerance {tol} must be >= 0")));
    }
    let preds = positives(pred);
    let gts = positives(gt);
    let mut gt_index: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, &rc) in gts.iter().enumerate() {
        gt_index.insert(rc, i);
    }
    let radius = tol.floor() as i64;
    let tol_sq = (tol * tol).floor() as u64;
    let flat = |r: usize, c: usize| (r * s.cols + c) as u64;

    // (d², min(pFlat,gFlat), max(pFlat,gFlat), pFlat): the unordered-index
    // tie key makes the matching identical when pred and gt swap roles.
    let mut pairs: Vec<(u64, u64, u64, u64, usize, usize)> = Vec::new();
    for (pi, &(pr, pc)) in preds.iter().enumerate() {
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (gr, gc) = (pr as i64 + dr, pc as i64 + dc);
                if gr < 0 || gc < 0 || gr as usize >= s.rows || gc as usize >= s.cols {
                    continue;
                }
                let d_sq = (dr * dr + dc * dc) as u64;
                if d_sq > tol_sq {
                    continue;
                }
                if let Some(&gi) = gt_index.get(&(gr as usize, gc as usize)) {
                    let pf = flat(pr, pc);
                    let gf = flat(gr as usize, gc as usize);
                    pairs.push((d_sq, pf.min(gf), pf.max(gf), pf, pi, gi));
                }
            }
        }
    }
    pairs.sort_unstable_by_key(|&(d, lo, hi, pf, _, _)| (d, lo, hi, pf));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut tp = 0u64;
    for &(_, _, _, _, pi, gi) in &pairs {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            tp += 1;
        }
    }
    let fp = preds.len() as u64 - tp;
    let fn_ = gts.len() as u64 - tp;
    Ok((tp, fp, fn_))
}

/// The sweep's threshold ladder: `count` evenly spaced values in (0, 1).
pub fn threshold_ladder(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}

/// PR sweep of one grayscale prediction against a binary ground truth.
pub fn pr_curve<T: Scalar>(
    pred_gray: &Grid<T>,
    gt: &Grid<T>,
    thresholds: usize,
    tol: f64,
) -> Result<Vec<PrPoint>> {
    if thresholds < 1 {
        return Err(Error::Config("threshold count must be >= 1".into()));
    }
    threshold_ladder(thresholds)
        .into_iter()
        .map(|t| {
            let bin = postproc::binarize(pred_gray, T::from_f64(t));
            let (tp, fp, fn_) = correspond(&bin, gt, tol)?;
            Ok(PrPoint::from_counts(t, tp, fp, fn_))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdsSummary {
    pub threshold: f64,
    pub f: f64,
}

/// Dataset-level detection metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionEval {
    /// Aggregate PR curve: counts summed across images per threshold.
    pub pr_curve: Vec<PrPoint>,
    pub ods: OdsSummary,
    pub ois: f64,
    pub ap: f64,
}

/// Sweeps every (grayscale prediction, binary ground truth) pair, returning
/// the aggregate curve, ODS/OIS, and the aggregate curve's AP.
pub fn evaluate_detections<T: Scalar>(
    pairs: &[(Grid<T>, Grid<T>)],
    thresholds: usize,
    tol: f64,
) -> Result<DetectionEval> {
    if pairs.is_empty() {
        return Err(Error::Domain("empty evaluation dataset".into()));
    }
    let ladder = threshold_ladder(thresholds);
    let mut agg = vec![(0u64, 0u64, 0u64); ladder.len()];
    let mut ois_sum = 0.0;
    for (pred, gt) in pairs {
        let curve = pr_curve(pred, gt, thresholds, tol)?;
        let mut best = 0.0f64;
        for (i, pt) in curve.iter().enumerate() {
            agg[i].0 += pt.tp;
            agg[i].1 += pt.fp;
            agg[i].2 += pt.fn_;
            best = best.max(pt.f);
        }
        ois_sum += best;
    }
    let pr_curve: Vec<PrPoint> = ladder
        .iter()
        .zip(&agg)
        .map(|(&t, &(tp, fp, fn_))| PrPoint::from_counts(t, tp, fp, fn_))
        .collect();
    let mut ods = &pr_curve[0];
    for pt in &pr_curve[1..] {
        if pt.f > ods.f {
            ods = pt;
        }
    }
    Ok(DetectionEval {
        ods: OdsSummary {
            threshold: ods.threshold,
            f: ods.f,
        },
        ois: ois_sum / pairs.len() as f64,
        ap: average_precision(&pr_curve),
        pr_curve,
    })
}

/// Area under the interpolated precision envelope, integrated by trapezoids
/// over [0, max recall]. A single point degenerates to precision · recall.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // envelope: precision at recall r becomes the max precision at any
    // recall ≥ r
    let mut best = 0.0f64;
    for p in pts.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut area = 0.0;
    let mut prev = (0.0, pts[0].1);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

/// Extracts layers from a binary mask: 8-connected components of at least
/// `min_pixels` pixels, each summarized per column by the mean row of its
/// pixels there, ordered shallowest first.
pub fn mask_to_layers<T: Scalar>(mask: &Grid<T>, min_pixels: usize) -> LayerSet {
    let s = mask.shape();
    let pos = |r: usize, c: usize| mask.at(0, 0, r, c).to_f64() > 0.5;
    let mut seen = vec![false; s.rows * s.cols];
    let mut layers = Vec::new();
    let mut stack = Vec::new();
    for r0 in 0..s.rows {
        for c0 in 0..s.cols {
            if seen[r0 * s.cols + c0] || !pos(r0, c0) {
                continue;
            }
            let mut pixels = Vec::new();
            seen[r0 * s.cols + c0] = true;
            stack.push((r0, c0));
            while let Some((r, c)) = stack.pop() {
                pixels.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr as usize >= s.rows || nc as usize >= s.cols {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[nr * s.cols + nc] && pos(nr, nc) {
                            seen[nr * s.cols + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            if pixels.len() < min_pixels {
                continue;
            }
            let mut by_col: HashMap<usize, (f64, usize)> = HashMap::new();
            for (r, c) in pixels {
                let e = by_col.entry(c).or_insert((0.0, 0));
                e.0 += r as f64;
                e.1 += 1;
            }
            layers.push(Layer {
                points: by_col
                    .into_iter()
                    .map(|(c, (sum, n))| (c, sum / n as f64))
                    .collect(),
            });
        }
    }
    let mut set = LayerSet { layers };
    set.sort_by_depth();
    set
}

/// Depth error of one echogram's traced layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMaeReport {
    /// MAE per depth-paired layer; `None` when the pair shares no columns.
    pub per_layer: Vec<Option<f64>>,
    /// Mean over paired layers with at least one shared column.
    pub overall: Option<f64>,
    /// Matched (layer, column) cells over max(layer count) · width.
    pub coverage: f64,
}

/// Pairs layers by depth order and averages |gt − pred| over columns where
/// both are defined.
pub fn layer_mae(pred: &LayerSet, gt: &LayerSet, cols: usize) -> LayerMaeReport {
    let paired = pred.layers.len().min(gt.layers.len());
    let total_layers = pred.layers.len().max(gt.layers.len());
    let mut per_layer = Vec::with_capacity(paired);
    let mut matched_cells = 0usize;
    for j in 0..paired {
        let p = &pred.layers[j];
        let g = &gt.layers[j];
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, pr) in &p.points {
            if let Some(gr) = g.points.get(c) {
                sum += (gr - pr).abs();
                n += 1;
            }
        }
        matched_cells += n;
        per_layer.push(if n > 0 { Some(sum / n as f64) } else { None });
    }
    let defined: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let overall = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let denom = total_layers * cols;
    LayerMaeReport {
        per_layer,
        overall,
        coverage: if denom == 0 {
            0.0
        } else {
            matched_cells as f64 / denom as f64
        },
    }
}

/// Dataset roll-up of per-echogram depth errors: overall = mean of the
/// per-echogram means, per-layer = mean across echograms at each depth
/// index, coverage = mean coverage.
pub fn summarize_layer_mae(reports: &[LayerMaeReport]) -> LayerMaeReport {
    let mut per_echo = Vec::new();
    let mut coverage = 0.0;
    let depth = reports.iter().map(|r| r.per_layer.len()).max().unwrap_or(0);
    let mut per_layer = vec![(0.0f64, 0usize); depth];
    for r in reports {
        if let Some(m) = r.overall {
            per_echo.push(m);
        }
        coverage += r.coverage;
        for (j, v) in r.per_layer.iter().enumerate() {
            if let Some(v) = v {
                per_layer[j].0 += v;
                per_layer[j].1 += 1;
            }
        }
    }
    LayerMaeReport {
        per_layer: per_layer
            .into_iter()
            .map(|(s, n)| if n > 0 { Some(s / n as f64) } else { None })
            .collect(),
        overall: if per_echo.is_empty() {
            None
        } else {
            Some(per_echo.iter().sum::<f64>() / per_echo.len() as f64)
        },
        coverage: if reports.is_empty() {
            0.0
        } else {
            coverage / reports.len() as f64
        },
    }
}

/// Full evaluation record as serialized by the CLI; the depth fields are
/// merged in by the depth stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub pr_curve: Vec<PrPoint>,
    pub ods: OdsSummary,
    pub ois: f64,
    pub ap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer_mae: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl EvalReport {
    pub fn from_detections(det: DetectionEval) -> Self {
        EvalReport {
            pr_curve: det.pr_curve,
            ods: det.ods,
            ois: det.ois,
            ap: det.ap,
            mae_overall: None,
            per_layer_mae: None,
            coverage: None,
        }
    }

    pub fn merge_depth(&mut self, summary: &LayerMaeReport) {
        self.mae_overall = summary.overall;
        self.per_layer_mae = Some(summary.per_layer.clone());
        self.coverage = Some(summary.coverage);
    }
}
