//! Brute-force reference implementations used to cross-check the production
//! code, plus finite-difference helpers.
//!
//! Everything here is written as plain nested loops straight from the
//! defining formulas and stays independent of the optimized paths it checks.
//! The `oracle-check` CLI subcommand and the test suites both run these.

use crate::detect::{rank_order, DetectionBox};
use crate::polar::{BorderMode, PasMatrix, PolarAttention, CENTER, NEIGHBOR_OFFSETS};
use crate::tensor::{FeatureMap, LinearProjection};

/// Naive per-pixel matrix-vector application of a 1x1 convolution.
pub fn project_naive(p: &LinearProjection<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
    let mut out = FeatureMap::zeros(p.out_channels, x.height, x.width);
    for i in 0..x.height {
        for j in 0..x.width {
            for c in 0..p.out_channels {
                let mut acc = p.bias[c];
                for k in 0..p.in_channels {
                    acc += p.weight[c * p.in_channels + k] * x.get(k, i, j);
                }
                out.set(c, i, j, acc);
            }
        }
    }
    out
}

fn neighbor_of(i: usize, j: usize, n: usize, h: usize, w: usize, border: BorderMode) -> Option<(usize, usize)> {
    let (di, dj) = NEIGHBOR_OFFSETS[n];
    let (ni, nj) = (i as i64 + di as i64, j as i64 + dj as i64);
    match border {
        BorderMode::Zero => {
            if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                None
            } else {
                Some((ni as usize, nj as usize))
            }
        }
        BorderMode::Replicate => Some((
            ni.clamp(0, h as i64 - 1) as usize,
            nj.clamp(0, w as i64 - 1) as usize,
        )),
    }
}

/// Materialize Q and K explicitly and loop over all positions and neighbors.
pub fn pas_naive(params: &PolarAttention<f64>, x: &FeatureMap<f64>) -> PasMatrix<f64> {
    let q = project_naive(&params.q_proj, x);
    let k = project_naive(&params.k_proj, x);
    let (h, w) = (x.height, x.width);
    let mut pas = PasMatrix::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut logits = [0.0f64; 9];
            for (n, l) in logits.iter_mut().enumerate() {
                if let Some((ni, nj)) = neighbor_of(i, j, n, h, w, params.border) {
                    for c in 0..x.channels {
                        *l += q.get(c, i, j) * k.get(c, ni, nj);
                    }
                }
            }
            // Direct softmax with max subtraction.
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for n in 0..9 {
                pas.set(n, i, j, exps[n] / sum);
            }
        }
    }
    pas
}

/// Nested-loop weighted output features, including the L2 normalization.
pub fn weighted_features_naive(
    params: &PolarAttention<f64>,
    x: &FeatureMap<f64>,
    pas: &PasMatrix<f64>,
) -> FeatureMap<f64> {
    let v = project_naive(&params.v_proj, x);
    let (h, w) = (x.height, x.width);
    let mut y = FeatureMap::zeros(x.channels, h, w);
    for i in 0..h {
        for j in 0..w {
            let mut s = vec![0.0f64; x.channels];
            for n in 0..9 {
                let p = pas.get(n, i, j);
                match neighbor_of(i, j, n, h, w, params.border) {
                    Some((ni, nj)) => {
                        for (c, sc) in s.iter_mut().enumerate() {
                            *sc += p * (1.0 + v.get(c, ni, nj));
                        }
                    }
                    None => {
                        for sc in s.iter_mut() {
                            *sc += p;
                        }
                    }
                }
            }
            let norm = (s.iter().map(|a| a * a).sum::<f64>() + params.norm_epsilon).sqrt();
            for (c, sc) in s.iter().enumerate() {
                y.set(c, i, j, sc / norm);
            }
        }
    }
    y
}

/// Box-pooled polar scores by direct summation over an explicit cell list.
pub fn pooled_scores_naive(pas: &PasMatrix<f64>, cells: &[(usize, usize)]) -> (f64, f64) {
    let mut non_center = 0.0;
    let mut center = 0.0;
    for &(i, j) in cells {
        for n in 0..9 {
            if n == CENTER {
                center += pas.get(n, i, j);
            } else {
                non_center += pas.get(n, i, j);
            }
        }
    }
    let n_cells = cells.len() as f64;
    (non_center / (8.0 * n_cells), center / n_cells)
}

/// O(n^2) reference NMS: keep a box iff no same-class box that ranks ahead of
/// it overlaps above the threshold, where "ranks ahead" is decided by the
/// survivor chain built in rank order.
pub fn nms_quadratic(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut sorted: Vec<DetectionBox> = boxes.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<bool> = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        let mut suppressed = false;
        for j in 0..i {
            if kept[j]
                && sorted[j].class_id == sorted[i].class_id
                && iou_naive(&sorted[j], &sorted[i]) > iou_threshold
            {
                suppressed = true;
                break;
            }
        }
        kept[i] = !suppressed;
    }
    sorted
        .into_iter()
        .zip(kept)
        .filter_map(|(b, k)| if k { Some(b) } else { None })
        .collect()
}

fn iou_naive(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let ax0 = a.cx - a.w / 2.0;
    let ax1 = a.cx + a.w / 2.0;
    let ay0 = a.cy - a.h / 2.0;
    let ay1 = a.cy + a.h / 2.0;
    let bx0 = b.cx - b.w / 2.0;
    let bx1 = b.cx + b.w / 2.0;
    let by0 = b.cy - b.h / 2.0;
    let by1 = b.cy + b.h / 2.0;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let uni = a.w * a.h + b.w * b.h - inter;
    if uni <= 0.0 {
        0.0
    } else {
        inter / uni
    }
}

/// Greedy matching protocol, written naively: walk predictions in rank
/// order, pick the unmatched annotation with the highest IoU at or above the
/// threshold. Returns the TP flag per ranked prediction.
pub fn match_flags_naive(preds: &[DetectionBox], anns: &[DetectionBox], iou_threshold: f64) -> Vec<bool> {
    let mut ranked: Vec<DetectionBox> = preds.to_vec();
    ranked.sort_by(rank_order);
    let mut used = vec![false; anns.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for p in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (k, a) in anns.iter().enumerate() {
            if used[k] {
                continue;
            }
            let v = iou_naive(p, a);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// All-point average precision computed directly from the defining sum:
/// walk the ranked TP flags, and at each recall increment take the maximum
/// precision at or to the right of it. `None` when there are no annotations.
pub fn ap_naive(preds: &[DetectionBox], anns: &[DetectionBox], iou_threshold: f64) -> Option<f64> {
    if anns.is_empty() {
        return None;
    }
    let flags = match_flags_naive(preds, anns, iou_threshold);
    let n_gt = anns.len() as f64;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in &flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..flags.len() {
        if recalls[k] > prev_recall {
            let mut best = 0.0f64;
            for k2 in k..flags.len() {
                best = best.max(precisions[k2]);
            }
            ap += (recalls[k] - prev_recall) * best;
            prev_recall = recalls[k];
        }
    }
    Some(ap)
}

/// Relative gradient error with an absolute floor so near-zero components are
/// checked absolutely rather than amplifying finite-difference noise.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

// ---------------------------------------------------------------------------
// Orchestrated verification suites, shared by the CLI checks and the
// acceptance tests.
// ---------------------------------------------------------------------------

use crate::detect::{iou, DetectionBox as Det, ObjectClass};
use crate::detector::{DetectorModel, ModelConfig};
use crate::eval::{average_precision, match_detections};
use crate::polar::{polarnet_loss, pool_backward, pool_over_range, polarnet_loss_backward};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn random_polar_params(rng: &mut ChaCha8Rng, channels: usize) -> PolarAttention<f64> {
    let mut p = PolarAttention::zeros(channels);
    for proj in [&mut p.q_proj, &mut p.k_proj, &mut p.v_proj] {
        for w in proj.weight.iter_mut() {
            *w = rng.gen_range(-0.8..0.8);
        }
        for b in proj.bias.iter_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
    }
    p
}

/// Largest absolute deviation of the score matrix and the weighted output
/// features from their nested-loop references, over random instances with up
/// to `max_channels` channels and `max_side`^2 positions.
pub fn pas_feature_equivalence(
    seed: u64,
    instances: usize,
    max_channels: usize,
    max_side: usize,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_pas = 0.0f64;
    let mut worst_feat = 0.0f64;
    for _ in 0..instances {
        let c = rng.gen_range(1..=max_channels);
        let h = rng.gen_range(1..=max_side);
        let w = rng.gen_range(1..=max_side);
        let params = random_polar_params(&mut rng, c);
        let x = FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.5..1.5));
        let pas = params.compute_pas(&x).expect("matching channels");
        let pas_ref = pas_naive(&params, &x);
        for k in 0..pas.data.len() {
            worst_pas = worst_pas.max((pas.data[k] - pas_ref.data[k]).abs());
        }
        let y = params.weighted_features(&x, &pas).expect("matching shapes");
        let y_ref = weighted_features_naive(&params, &x, &pas);
        for k in 0..y.data.len() {
            worst_feat = worst_feat.max((y.data[k] - y_ref.data[k]).abs());
        }
    }
    (worst_pas, worst_feat)
}

/// Scalar probe loss for the polar gradient check: supervision loss on one
/// positive and one negative box plus a fixed linear functional of the
/// output features.
fn polar_probe_loss(params: &PolarAttention<f64>, x: &FeatureMap<f64>, coeff: &FeatureMap<f64>) -> f64 {
    let fwd = params.forward(x).expect("probe forward");
    let b_pos = Det::new(40.0, 40.0, 50.0, 30.0, ObjectClass::Agc);
    let b_neg = Det::new(80.0, 70.0, 40.0, 40.0, ObjectClass::Ngec);
    let s_pos = crate::polar::pool_polar_scores(&fwd.pas, &b_pos, 32.0).expect("pos box");
    let s_neg = crate::polar::pool_polar_scores(&fwd.pas, &b_neg, 32.0).expect("neg box");
    let mut loss = polarnet_loss(&s_pos, true) + polarnet_loss(&s_neg, false);
    for (yv, cv) in fwd.y.data.iter().zip(coeff.data.iter()) {
        loss += yv * cv;
    }
    loss
}

/// Check every parameter and input gradient of the polar module against
/// central finite differences (h = 1e-5) on a random `channels` x 4 x 4
/// instance. Returns the worst relative error.
pub fn polar_gradcheck(seed: u64, channels: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_polar_params(&mut rng, channels);
    let x = FeatureMap::from_fn(channels, 4, 4, |_, _, _| rng.gen_range(-1.5..1.5));
    let coeff = FeatureMap::from_fn(channels, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));

    // Analytic pass.
    let mut with_grads = params.clone();
    let fwd = with_grads.forward(&x).expect("forward");
    let mut d_pas = crate::polar::PasMatrix::zeros(4, 4);
    for (b, target) in [
        (Det::new(40.0, 40.0, 50.0, 30.0, ObjectClass::Agc), true),
        (Det::new(80.0, 70.0, 40.0, 40.0, ObjectClass::Ngec), false),
    ] {
        let range = crate::detect::box_to_grid(&b, 32.0, 4, 4).expect("box in grid");
        let scores = pool_over_range(&fwd.pas, range);
        let (_, g) = polarnet_loss_backward(&scores, target);
        pool_backward(range, g.p_polar, g.p_non_polar, &mut d_pas);
    }
    let back = with_grads
        .backward(&x, &fwd, Some(&coeff), Some(&d_pas))
        .expect("backward");

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |set: &dyn Fn(&mut PolarAttention<f64>, f64), analytic: f64| {
        let mut plus = params.clone();
        set(&mut plus, h);
        let mut minus = params.clone();
        set(&mut minus, -h);
        let fd = (polar_probe_loss(&plus, &x, &coeff) - polar_probe_loss(&minus, &x, &coeff)) / (2.0 * h);
        worst = worst.max(grad_rel_error(analytic, fd));
    };
    for k in 0..params.q_proj.weight.len() {
        check(&|p, d| p.q_proj.weight[k] += d, with_grads.q_proj.weight_grad[k]);
        check(&|p, d| p.k_proj.weight[k] += d, with_grads.k_proj.weight_grad[k]);
        check(&|p, d| p.v_proj.weight[k] += d, with_grads.v_proj.weight_grad[k]);
    }
    for k in 0..params.q_proj.bias.len() {
        check(&|p, d| p.q_proj.bias[k] += d, with_grads.q_proj.bias_grad[k]);
        check(&|p, d| p.k_proj.bias[k] += d, with_grads.k_proj.bias_grad[k]);
        check(&|p, d| p.v_proj.bias[k] += d, with_grads.v_proj.bias_grad[k]);
    }
    for k in 0..x.data.len() {
        let mut plus = x.clone();
        plus.data[k] += h;
        let mut minus = x.clone();
        minus.data[k] -= h;
        let fd =
            (polar_probe_loss(&params, &plus, &coeff) - polar_probe_loss(&params, &minus, &coeff)) / (2.0 * h);
        worst = worst.max(grad_rel_error(back.d_input.data[k], fd));
    }
    worst
}

/// Check the gradients of the full detector training loss on a 64 x 64 tile
/// against central finite differences. Sweeps every parameter of every
/// component (and the input pixels when `include_input`); returns the worst
/// relative error.
pub fn detector_gradcheck(seed: u64, include_input: bool) -> f64 {
    let config = ModelConfig {
        stage: 5,
        width: 32,
        use_polar: true,
        ..ModelConfig::default()
    };
    let model = DetectorModel::new(config, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let tile = FeatureMap::from_fn(1, 64, 64, |_, _, _| rng.gen_range(0.0..1.0));
    let anns = vec![
        Det::new(30.0, 30.0, 26.0, 12.0, ObjectClass::Agc),
        Det::new(46.0, 18.0, 18.0, 40.0, ObjectClass::Ngec),
    ];
    let sample_seed = 5u64;

    let mut with_grads = model.clone();
    with_grads.zero_grad();
    let (_, d_input) = with_grads
        .tile_loss_grads_with_input(&tile, &anns, sample_seed, 1.0)
        .expect("loss");

    let loss_of = |m: &DetectorModel<f64>, t: &FeatureMap<f64>| -> f64 {
        let mut c = m.clone();
        c.zero_grad();
        c.tile_loss_and_grads(t, &anns, sample_seed, 1.0)
            .expect("loss")
            .total
    };

    // Enumerate parameter sites as (component, weight-or-bias, index).
    #[derive(Clone, Copy)]
    enum Site {
        BackboneW(usize, usize),
        BackboneB(usize, usize),
        PolarW(usize, usize),
        PolarB(usize, usize),
        HeadW(usize),
        HeadB(usize),
        Input(usize),
    }
    let mut sites = Vec::new();
    for (s, p) in model.backbone.iter().enumerate() {
        sites.extend((0..p.weight.len()).map(|k| Site::BackboneW(s, k)));
        sites.extend((0..p.bias.len()).map(|k| Site::BackboneB(s, k)));
    }
    let attn = model.polar.as_ref().expect("polar enabled");
    for proj in 0..3 {
        sites.extend((0..attn.q_proj.weight.len()).map(move |k| Site::PolarW(proj, k)));
        sites.extend((0..attn.q_proj.bias.len()).map(move |k| Site::PolarB(proj, k)));
    }
    sites.extend((0..model.head.weight.len()).map(Site::HeadW));
    sites.extend((0..model.head.bias.len()).map(Site::HeadB));
    if include_input {
        sites.extend((0..tile.data.len()).map(Site::Input));
    }

    let h = 1e-5;
    fn pick_proj(m: &mut DetectorModel<f64>, proj: usize) -> &mut LinearProjection<f64> {
        let attn = m.polar.as_mut().expect("polar enabled");
        match proj {
            0 => &mut attn.q_proj,
            1 => &mut attn.k_proj,
            _ => &mut attn.v_proj,
        }
    }
    sites
        .par_iter()
        .map(|&site| {
            let analytic = match site {
                Site::BackboneW(s, k) => with_grads.backbone[s].weight_grad[k],
                Site::BackboneB(s, k) => with_grads.backbone[s].bias_grad[k],
                Site::PolarW(p, k) => {
                    let attn = with_grads.polar.as_ref().unwrap();
                    [&attn.q_proj, &attn.k_proj, &attn.v_proj][p].weight_grad[k]
                }
                Site::PolarB(p, k) => {
                    let attn = with_grads.polar.as_ref().unwrap();
                    [&attn.q_proj, &attn.k_proj, &attn.v_proj][p].bias_grad[k]
                }
                Site::HeadW(k) => with_grads.head.weight_grad[k],
                Site::HeadB(k) => with_grads.head.bias_grad[k],
                Site::Input(k) => d_input.data[k],
            };
            let fd = |delta: f64| -> (DetectorModel<f64>, FeatureMap<f64>) {
                let mut m = model.clone();
                let mut t = tile.clone();
                match site {
                    Site::BackboneW(s, k) => m.backbone[s].weight[k] += delta,
                    Site::BackboneB(s, k) => m.backbone[s].bias[k] += delta,
                    Site::PolarW(p, k) => pick_proj(&mut m, p).weight[k] += delta,
                    Site::PolarB(p, k) => pick_proj(&mut m, p).bias[k] += delta,
                    Site::HeadW(k) => m.head.weight[k] += delta,
                    Site::HeadB(k) => m.head.bias[k] += delta,
                    Site::Input(k) => t.data[k] += delta,
                }
                (m, t)
            };
            let (mp, tp) = fd(h);
            let (mm, tm) = fd(-h);
            let numeric = (loss_of(&mp, &tp) - loss_of(&mm, &tm)) / (2.0 * h);
            grad_rel_error(analytic, numeric)
        })
        .reduce(|| 0.0, f64::max)
}

/// Outcome of the randomized oracle-equivalence suite.
#[derive(Debug, Clone, Copy)]
pub struct OracleReport {
    pub pas_max_dev: f64,
    pub feature_max_dev: f64,
    pub project_bitwise: bool,
    pub nms_mismatches: usize,
    pub match_mismatches: usize,
    pub ap_max_dev: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.pas_max_dev < 1e-10
            && self.feature_max_dev < 1e-10
            && self.project_bitwise
            && self.nms_mismatches == 0
            && self.match_mismatches == 0
            && self.ap_max_dev < 1e-12
    }
}

/// Run every brute-force cross-check on seeded random instances.
pub fn run_oracle_suite(seed: u64) -> OracleReport {
    let (pas_max_dev, feature_max_dev) = pas_feature_equivalence(seed, 100, 8, 8);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0AC1E);
    let mut project_bitwise = true;
    for _ in 0..20 {
        let c_in = rng.gen_range(1..=6);
        let c_out = rng.gen_range(1..=6);
        let x = FeatureMap::from_fn(c_in, 3, 3, |_, _, _| rng.gen_range(-2.0..2.0));
        let weight = (0..c_out * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = LinearProjection::from_parts(c_in, c_out, weight, bias).expect("parts");
        let y = crate::tensor::project(&p, &x).expect("project");
        if y.data != project_naive(&p, &x).data {
            project_bitwise = false;
        }
    }

    let rand_box = |rng: &mut ChaCha8Rng, conf: f64| -> Det {
        let mut b = Det::new(
            rng.gen_range(0.0..200.0),
            rng.gen_range(0.0..200.0),
            rng.gen_range(10.0..60.0),
            rng.gen_range(10.0..60.0),
            if rng.gen_bool(0.5) { ObjectClass::Agc } else { ObjectClass::Ngec },
        );
        b.p_obj = conf;
        b.fused = conf;
        b
    };

    let mut nms_mismatches = 0;
    for _ in 0..30 {
        let boxes: Vec<Det> = (0..10)
            .map(|_| {
                let conf = rng.gen_range(0.0..1.0);
                rand_box(&mut rng, conf)
            })
            .collect();
        if crate::detect::nms(&boxes, 0.45) != nms_quadratic(&boxes, 0.45) {
            nms_mismatches += 1;
        }
    }

    let mut match_mismatches = 0;
    let mut ap_max_dev = 0.0f64;
    for thr in [0.5, 0.6, 0.7] {
        for _ in 0..50 {
            let preds: Vec<Det> = (0..rng.gen_range(0..=10))
                .map(|_| {
                    let conf = rng.gen_range(0.0..1.0);
                    rand_box(&mut rng, conf)
                })
                .collect();
            let anns: Vec<Det> = (0..rng.gen_range(1..=10)).map(|_| rand_box(&mut rng, 1.0)).collect();
            let m = match_detections(&preds, &anns, thr);
            let flags: Vec<bool> = m.ranked.iter().map(|p| p.is_tp).collect();
            if flags != match_flags_naive(&preds, &anns, thr) {
                match_mismatches += 1;
            }
            let ours = average_precision(&m.ranked, anns.len()).ap().unwrap_or(0.0);
            let reference = ap_naive(&preds, &anns, thr).unwrap_or(0.0);
            ap_max_dev = ap_max_dev.max((ours - reference).abs());
        }
    }

    // Sanity anchor for the IoU route used above.
    debug_assert!((iou(&rand_box(&mut rng, 0.5), &rand_box(&mut rng, 0.5))).abs() <= 1.0);

    OracleReport {
        pas_max_dev,
        feature_max_dev,
        project_bitwise,
        nms_mismatches,
        match_mismatches,
        ap_max_dev,
    }
}
