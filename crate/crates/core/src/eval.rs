//! Detection metrics: greedy prediction/annotation matching, all-point
//! average precision with PR-curve export, top-N balanced accuracy for
//! slide-level ranking, and the alpha re-fusion sweep.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::detect::{fuse_confidence, iou, rank_order, DetectionBox, ObjectClass};
use crate::error::{Error, Result};

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub preds: Vec<DetectionBox>,
    pub annotations: Vec<DetectionBox>,
}

/// Match outcome for one ranked prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredMatch {
    pub confidence: f64,
    pub is_tp: bool,
    /// Index of the matched annotation, for TPs.
    pub annotation: Option<usize>,
}

/// Greedy one-to-one matching result at a fixed IoU threshold.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// Per prediction, in descending-confidence order.
    pub ranked: Vec<PredMatch>,
    /// Per annotation: matched (true) or a false negative.
    pub annotation_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.ranked.iter().filter(|p| p.is_tp).count()
    }
    pub fn fp(&self) -> usize {
        self.ranked.len() - self.tp()
    }
    pub fn false_negatives(&self) -> usize {
        self.annotation_matched.iter().filter(|&&m| !m).count()
    }
}

/// Match predictions against annotations: walk predictions by descending
/// fused confidence, each taking the unmatched annotation with the highest
/// IoU at or above the threshold. Unmatched predictions are false positives,
/// unmatched annotations false negatives.
pub fn match_detections(
    preds: &[DetectionBox],
    annotations: &[DetectionBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| rank_order(&preds[a], &preds[b]));
    let mut matched = vec![false; annotations.len()];
    let mut ranked = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ai, a) in annotations.iter().enumerate() {
            if matched[ai] {
                continue;
            }
            let v = iou(p, a);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ai, v));
            }
        }
        match best {
            Some((ai, _)) => {
                matched[ai] = true;
                ranked.push(PredMatch {
                    confidence: p.fused,
                    is_tp: true,
                    annotation: Some(ai),
                });
            }
            None => ranked.push(PredMatch {
                confidence: p.fused,
                is_tp: false,
                annotation: None,
            }),
        }
    }
    MatchResult {
        ranked,
        annotation_matched: matched,
    }
}

/// Precision/recall curve with its area.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` points in prediction rank order; recall is
    /// nondecreasing along the curve.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision, or an explicit marker when the ground truth is empty
/// and the metric is undefined.
#[derive(Debug, Clone, PartialEq)]
pub enum ApOutcome {
    Curve(PrCurve),
    NoAnnotations,
}

impl ApOutcome {
    pub fn ap(&self) -> Option<f64> {
        match self {
            ApOutcome::Curve(c) => Some(c.ap),
            ApOutcome::NoAnnotations => None,
        }
    }
}

/// All-point (continuous) average precision over globally ranked match
/// flags: the sum over recall increments of the maximum precision at or to
/// the right of each increment.
pub fn average_precision(ranked: &[PredMatch], n_annotations: usize) -> ApOutcome {
    if n_annotations == 0 {
        return ApOutcome::NoAnnotations;
    }
    let mut flags: Vec<PredMatch> = ranked.to_vec();
    flags.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut points = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in &flags {
        if f.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / n_annotations as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    // Precision envelope from the right, integrated over recall increments.
    let mut ap = 0.0;
    let mut best_right = 0.0f64;
    let mut prev_recall_at = vec![0.0; points.len()];
    for k in (0..points.len()).rev() {
        best_right = best_right.max(points[k].1);
        prev_recall_at[k] = best_right;
    }
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * prev_recall_at[k];
            prev_recall = r;
        }
    }
    ApOutcome::Curve(PrCurve { points, ap })
}

/// Match every image at `iou_threshold`, pool the ranked flags globally and
/// compute AP. Per-image matching runs in parallel; aggregation order is
/// fixed by image index.
pub fn ap_over_images(images: &[ImageEval], iou_threshold: f64) -> ApOutcome {
    let per_image: Vec<MatchResult> = images
        .par_iter()
        .map(|img| match_detections(&img.preds, &img.annotations, iou_threshold))
        .collect();
    let mut ranked = Vec::new();
    let mut n_annotations = 0;
    for (img, m) in images.iter().zip(per_image.iter()) {
        n_annotations += img.annotations.len();
        ranked.extend_from_slice(&m.ranked);
    }
    average_precision(&ranked, n_annotations)
}

/// Filter both predictions and annotations to one class before matching.
pub fn per_class_ap(images: &[ImageEval], class: ObjectClass, iou_threshold: f64) -> ApOutcome {
    let filtered: Vec<ImageEval> = images
        .iter()
        .map(|img| ImageEval {
            preds: img
                .preds
                .iter()
                .filter(|p| p.class_id == class)
                .cloned()
                .collect(),
            annotations: img
                .annotations
                .iter()
                .filter(|a| a.class_id == class)
                .cloned()
                .collect(),
        })
        .collect();
    ap_over_images(&filtered, iou_threshold)
}

/// Balanced accuracy of a top-N cut over ranked candidates with binary
/// truth: `TP/(2(TP+FP)) + TN/(2(TN+FN))`, where the top n candidates are
/// predicted positive. A term whose denominator is zero contributes its
/// neutral value 0.5.
pub fn topn_accuracy(ranked_truth: &[bool], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("top-N requires n > 0".into()));
    }
    let cut = n.min(ranked_truth.len());
    let tp = ranked_truth[..cut].iter().filter(|&&t| t).count() as f64;
    let fp = cut as f64 - tp;
    let fn_ = ranked_truth[cut..].iter().filter(|&&t| t).count() as f64;
    let tn = (ranked_truth.len() - cut) as f64 - fn_;
    let term = |num: f64, den: f64| if den == 0.0 { 0.5 } else { num / (2.0 * den) };
    Ok(term(tp, tp + fp) + term(tn, tn + fn_))
}

/// Re-fuse stored `p_obj`/`p_polar` at each alpha, re-rank, and recompute
/// AP50 without re-running inference.
pub fn sweep_alpha(images: &[ImageEval], alphas: &[f64], iou_threshold: f64) -> Result<Vec<(f64, f64)>> {
    for img in images {
        if img.preds.iter().any(|p| p.p_polar.is_none()) {
            return Err(Error::Config(
                "alpha sweep requires stored polar scores on every prediction".into(),
            ));
        }
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let refused: Vec<ImageEval> = images
            .iter()
            .map(|img| {
                let preds = img
                    .preds
                    .iter()
                    .map(|p| {
                        let mut q = p.clone();
                        q.fused = fuse_confidence(p.p_obj, p.p_polar.unwrap(), alpha)?;
                        Ok(q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageEval {
                    preds,
                    annotations: img.annotations.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ap = ap_over_images(&refused, iou_threshold).ap().unwrap_or(0.0);
        rows.push((alpha, ap));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "recall,precision")?;
    for &(r, p) in &curve.points {
        writeln!(f, "{r:.6},{p:.6}")?;
    }
    Ok(())
}

pub fn write_sweep_csv(path: &Path, header: (&str, &str), rows: &[(f64, f64)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{},{}", header.0, header.1)?;
    for &(x, y) in rows {
        writeln!(f, "{x:.6},{y:.6}")?;
    }
    Ok(())
}

/// Minimal static SVG line chart: one polyline per series on a unit-scaled
/// axis box with tick labels.
pub fn write_line_chart_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        W / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M,
        H - M
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{x_label}</text>\n",
        W / 2.0,
        H - 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        H / 2.0,
        H / 2.0
    ));
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{fx:.2}</text>\n",
            sx(fx),
            H - M + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{fy:.2}</text>\n",
            M - 6.0,
            sy(fy) + 4.0
        ));
    }
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - M - 150.0,
            M + 18.0 * si as f64 + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, w: f64, h: f64, conf: f64) -> DetectionBox {
        DetectionBox {
            p_obj: conf,
            fused: conf,
            ..DetectionBox::new(cx, cy, w, h, ObjectClass::Agc)
        }
    }

    #[test]
    fn exact_hit_is_single_tp() {
        let ann = det(50.0, 50.0, 20.0, 20.0, 1.0);
        let pred = det(50.0, 50.0, 20.0, 20.0, 0.9);
        let m = match_detections(&[pred], &[ann], 0.5);
        assert_eq!(m.tp(), 1);
        assert_eq!(m.fp(), 0);
        assert_eq!(m.false_negatives(), 0);
        assert_eq!(m.ranked[0].annotation, Some(0));
    }

    #[test]
    fn sub_threshold_overlap_is_fp_and_fn() {
        let ann = det(50.0, 50.0, 20.0, 20.0, 1.0);
        // Offset for IoU just under 0.5.
        let pred = det(57.5, 50.0, 20.0, 20.0, 0.9);
        assert!(iou(&pred, &ann) < 0.5 && iou(&pred, &ann) > 0.4);
        let m = match_detections(&[pred], &[ann], 0.5);
        assert_eq!(m.tp(), 0);
        assert_eq!(m.fp(), 1);
        assert_eq!(m.false_negatives(), 1);
    }

    #[test]
    fn matching_agrees_with_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let preds: Vec<DetectionBox> = (0..10)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(10.0..60.0),
                        rng.gen_range(10.0..60.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let anns: Vec<DetectionBox> = (0..5)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(10.0..60.0),
                        rng.gen_range(10.0..60.0),
                        1.0,
                    )
                })
                .collect();
            let m = match_detections(&preds, &anns, 0.5);
            let flags = oracle::match_flags_naive(&preds, &anns, 0.5);
            assert_eq!(m.ranked.len(), flags.len());
            let ours: Vec<bool> = m.ranked.iter().map(|p| p.is_tp).collect();
            assert_eq!(ours, flags);
        }
    }

    #[test]
    fn ap_trivial_cases() {
        let ann = det(50.0, 50.0, 20.0, 20.0, 1.0);

        // Single TP, no FP.
        let m = match_detections(&[det(50.0, 50.0, 20.0, 20.0, 0.9)], &[ann.clone()], 0.5);
        assert_eq!(average_precision(&m.ranked, 1).ap(), Some(1.0));

        // One FP at 0.9, one TP at 0.8, one annotation: all-point AP = 0.5.
        let preds = vec![det(500.0, 500.0, 20.0, 20.0, 0.9), det(50.0, 50.0, 20.0, 20.0, 0.8)];
        let m = match_detections(&preds, &[ann.clone()], 0.5);
        let out = average_precision(&m.ranked, 1);
        assert_eq!(out.ap(), Some(0.5));

        // No predictions at all.
        assert_eq!(average_precision(&[], 3).ap(), Some(0.0));

        // No annotations: explicit marker.
        assert_eq!(average_precision(&[], 0), ApOutcome::NoAnnotations);
    }

    #[test]
    fn ap_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for thr in [0.5, 0.6, 0.7] {
            for _ in 0..50 {
                let n_pred = rng.gen_range(0..=10);
                let n_ann = rng.gen_range(1..=10);
                let preds: Vec<DetectionBox> = (0..n_pred)
                    .map(|_| {
                        det(
                            rng.gen_range(0.0..150.0),
                            rng.gen_range(0.0..150.0),
                            rng.gen_range(10.0..50.0),
                            rng.gen_range(10.0..50.0),
                            rng.gen_range(0.0..1.0),
                        )
                    })
                    .collect();
                let anns: Vec<DetectionBox> = (0..n_ann)
                    .map(|_| {
                        det(
                            rng.gen_range(0.0..150.0),
                            rng.gen_range(0.0..150.0),
                            rng.gen_range(10.0..50.0),
                            rng.gen_range(10.0..50.0),
                            1.0,
                        )
                    })
                    .collect();
                let m = match_detections(&preds, &anns, thr);
                let ours = average_precision(&m.ranked, anns.len()).ap().unwrap();
                let reference = oracle::ap_naive(&preds, &anns, thr).unwrap();
                assert!(
                    (ours - reference).abs() < 1e-12,
                    "AP mismatch at threshold {thr}: {ours} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_confidence_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let anns: Vec<DetectionBox> = (0..5)
            .map(|_| {
                det(
                    rng.gen_range(0.0..150.0),
                    rng.gen_range(0.0..150.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(10.0..40.0),
                    1.0,
                )
            })
            .collect();
        let preds: Vec<DetectionBox> = (0..8)
            .map(|_| {
                det(
                    rng.gen_range(0.0..150.0),
                    rng.gen_range(0.0..150.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(0.01..1.0),
                )
            })
            .collect();
        let base = {
            let m = match_detections(&preds, &anns, 0.5);
            average_precision(&m.ranked, anns.len()).ap().unwrap()
        };
        // Strictly monotone transform: sqrt then affine squeeze.
        let squeezed: Vec<DetectionBox> = preds
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.fused = 0.2 + 0.5 * p.fused.sqrt();
                q
            })
            .collect();
        let m = match_detections(&squeezed, &anns, 0.5);
        let transformed = average_precision(&m.ranked, anns.len()).ap().unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn trailing_fp_never_increases_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let anns: Vec<DetectionBox> = (0..4)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..150.0),
                        rng.gen_range(0.0..150.0),
                        rng.gen_range(10.0..40.0),
                        rng.gen_range(10.0..40.0),
                        1.0,
                    )
                })
                .collect();
            let mut preds: Vec<DetectionBox> = (0..6)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..150.0),
                        rng.gen_range(0.0..150.0),
                        rng.gen_range(10.0..40.0),
                        rng.gen_range(10.0..40.0),
                        rng.gen_range(0.1..1.0),
                    )
                })
                .collect();
            let m = match_detections(&preds, &anns, 0.5);
            let before = average_precision(&m.ranked, anns.len()).ap().unwrap();
            // An unmatched box far away, ranked strictly last.
            preds.push(det(900.0, 900.0, 10.0, 10.0, 0.001));
            let m = match_detections(&preds, &anns, 0.5);
            let after = average_precision(&m.ranked, anns.len()).ap().unwrap();
            assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn topn_examples_and_errors() {
        // All top-n truly positive, everything else negative.
        let truth = [true, true, true, false, false, false];
        assert_eq!(topn_accuracy(&truth, 3).unwrap(), 1.0);

        // Half right in each block.
        let truth = [true, false, true, false];
        assert!((topn_accuracy(&truth, 2).unwrap() - 0.5).abs() < 1e-12);

        // Hand-built confusion counts: TP=3, FP=2, TN=10, FN=5.
        let mut truth = vec![true, true, true, false, false];
        truth.extend(std::iter::repeat(true).take(5));
        truth.extend(std::iter::repeat(false).take(10));
        let acc = topn_accuracy(&truth, 5).unwrap();
        assert!((acc - 0.6333333333333333).abs() < 1e-12);

        assert!(matches!(topn_accuracy(&truth, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn topn_invariant_to_order_within_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut truth: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.4)).collect();
        let base = topn_accuracy(&truth, 7).unwrap();
        // Shuffle within the top block and within the complement.
        for _ in 0..10 {
            let (a, b) = (rng.gen_range(0..7), rng.gen_range(0..7));
            truth.swap(a, b);
            let (c, d) = (rng.gen_range(7..20), rng.gen_range(7..20));
            truth.swap(c, d);
        }
        assert_eq!(topn_accuracy(&truth, 7).unwrap(), base);
    }

    #[test]
    fn topn_zero_denominator_contributes_neutral_half() {
        // No negatives at all: the TN/FN term is undefined and contributes 0.5.
        let truth = [true, true, true];
        assert_eq!(topn_accuracy(&truth, 3).unwrap(), 1.0);
        // No candidates past the cut and none positive in it.
        let truth = [false, false];
        assert_eq!(topn_accuracy(&truth, 2).unwrap(), 0.5);
    }

    #[test]
    fn alpha_sweep_table_and_degenerate_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut images = Vec::new();
        for _ in 0..5 {
            let anns: Vec<DetectionBox> = (0..3)
                .map(|_| {
                    det(
                        rng.gen_range(20.0..180.0),
                        rng.gen_range(20.0..180.0),
                        rng.gen_range(15.0..40.0),
                        rng.gen_range(15.0..40.0),
                        1.0,
                    )
                })
                .collect();
            let mut preds: Vec<DetectionBox> = Vec::new();
            for a in &anns {
                let mut p = a.clone();
                p.cx += rng.gen_range(-4.0..4.0);
                p.p_obj = rng.gen_range(0.3..1.0);
                p.p_polar = Some(rng.gen_range(0.0..0.125));
                p.fused = p.p_obj;
                preds.push(p);
            }
            for _ in 0..2 {
                let mut p = det(
                    rng.gen_range(200.0..400.0),
                    rng.gen_range(200.0..400.0),
                    20.0,
                    20.0,
                    rng.gen_range(0.3..1.0),
                );
                p.p_polar = Some(rng.gen_range(0.0..0.125));
                preds.push(p);
            }
            images.push(ImageEval { preds, annotations: anns });
        }
        let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
        let rows = sweep_alpha(&images, &alphas, 0.5).unwrap();
        assert_eq!(rows.len(), 5);

        // The alpha = 0 row equals the baseline AP50 computed from p_obj.
        let baseline: Vec<ImageEval> = images
            .iter()
            .map(|img| ImageEval {
                preds: img
                    .preds
                    .iter()
                    .map(|p| {
                        let mut q = p.clone();
                        q.fused = q.p_obj;
                        q
                    })
                    .collect(),
                annotations: img.annotations.clone(),
            })
            .collect();
        let base_ap = ap_over_images(&baseline, 0.5).ap().unwrap();
        assert_eq!(rows[0].1, base_ap);

        // Missing polar scores is a configuration error.
        let mut broken = images.clone();
        broken[0].preds[0].p_polar = None;
        assert!(matches!(
            sweep_alpha(&broken, &alphas, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn recall_is_nondecreasing_along_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let anns: Vec<DetectionBox> = (0..6)
            .map(|_| {
                det(
                    rng.gen_range(0.0..300.0),
                    rng.gen_range(0.0..300.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(10.0..40.0),
                    1.0,
                )
            })
            .collect();
        let preds: Vec<DetectionBox> = (0..12)
            .map(|_| {
                det(
                    rng.gen_range(0.0..300.0),
                    rng.gen_range(0.0..300.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let m = match_detections(&preds, &anns, 0.5);
        if let ApOutcome::Curve(c) = average_precision(&m.ranked, anns.len()) {
            for w in c.points.windows(2) {
                assert!(w[1].0 >= w[0].0);
                assert!(w[1].1 >= 0.0 && w[1].1 <= 1.0);
            }
        } else {
            panic!("expected a defined curve");
        }
    }
}
