//! Minimal trainable detector hosting the polar attention module: a small
//! strided backbone of 1x1 projections with leaky-ReLU and 2x2 average
//! pooling, a dense per-cell head (objectness, box offsets, two class
//! logits), and an SGD training loop with a stepwise learning-rate schedule.
//!
//! The polar module sits between backbone and head: the head consumes the
//! polar-weighted features, and every candidate carries a polar score pooled
//! over its predicted box.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detect::{
    box_to_grid, fuse_confidence, nms, DetectionBox, GridRange, ObjectClass,
};
use crate::error::{Error, Result};
use crate::eval::{ap_over_images, ImageEval};
use crate::polar::{
    polarnet_loss_backward, pool_backward, pool_over_range, BorderMode, PasMatrix, PolarAttention,
    PolarForward,
};
use crate::synth::{load_tile_pixels, mix_seed, ManifestEntry, Split};
use crate::tensor::{project, project_backward, FeatureMap, LinearProjection, Scalar};

pub const MODEL_MAGIC: &[u8; 4] = b"TDK1";

const LEAKY_SLOPE: f64 = 0.1;
/// Head outputs per cell: objectness, dx, dy, log w, log h, two class logits.
const HEAD_CHANNELS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Backbone depth; the feature grid downsamples by `2^stage`.
    pub stage: u32,
    /// Channel width of the deepest stages.
    pub width: usize,
    /// Fusion weight of the polar score.
    pub alpha: f64,
    pub use_polar: bool,
    pub border: BorderMode,
    pub nms_iou: f64,
    /// Candidates below this fused confidence are dropped at inference.
    pub conf_floor: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage: 5,
            width: 32,
            alpha: crate::detect::DEFAULT_ALPHA,
            use_polar: true,
            border: BorderMode::Zero,
            nms_iou: crate::detect::DEFAULT_NMS_IOU,
            conf_floor: 0.05,
            max_detections: 300,
        }
    }
}

impl ModelConfig {
    pub fn scale_factor(&self) -> f64 {
        (1u32 << self.stage) as f64
    }

    /// Channel width per backbone stage: 8, 16, 32, ... capped at `width`.
    pub fn stage_widths(&self) -> Vec<usize> {
        (1..=self.stage)
            .map(|s| (8usize << (s - 1)).min(self.width))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.stage) {
            return Err(Error::Config(format!("stage {} outside {{2..5}}", self.stage)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.width < 8 {
            return Err(Error::Config("width must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel<T: Scalar = f64> {
    pub config: ModelConfig,
    pub backbone: Vec<LinearProjection<T>>,
    pub polar: Option<PolarAttention<T>>,
    pub head: LinearProjection<T>,
}

impl DetectorModel<f64> {
    /// Deterministic uniform (Xavier-style) initialization from a seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xD37E]));
        let mut init = |p: &mut LinearProjection<f64>| {
            let bound = (6.0 / (p.in_channels + p.out_channels) as f64).sqrt();
            for w in p.weight.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        };
        let widths = config.stage_widths();
        let mut backbone = Vec::with_capacity(widths.len());
        let mut in_c = 1;
        for &out_c in &widths {
            let mut p = LinearProjection::zeros(in_c, out_c);
            init(&mut p);
            backbone.push(p);
            in_c = out_c;
        }
        let feat_c = in_c;
        let polar = if config.use_polar {
            let mut attn = PolarAttention::zeros(feat_c);
            attn.border = config.border;
            init(&mut attn.q_proj);
            init(&mut attn.k_proj);
            init(&mut attn.v_proj);
            Some(attn)
        } else {
            None
        };
        let mut head = LinearProjection::zeros(feat_c, HEAD_CHANNELS);
        init(&mut head);
        // Low-objectness prior keeps early training stable on sparse targets.
        head.bias[0] = -2.0;
        Ok(Self {
            config,
            backbone,
            polar,
            head,
        })
    }

    pub fn zero_grad(&mut self) {
        for p in self.backbone.iter_mut() {
            p.zero_grad();
        }
        if let Some(attn) = self.polar.as_mut() {
            attn.zero_grad();
        }
        self.head.zero_grad();
    }

    pub fn absorb_grads(&mut self, other: &Self) {
        for (a, b) in self.backbone.iter_mut().zip(other.backbone.iter()) {
            a.absorb_grads(b);
        }
        if let (Some(a), Some(b)) = (self.polar.as_mut(), other.polar.as_ref()) {
            a.absorb_grads(b);
        }
        self.head.absorb_grads(&other.head);
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.backbone.iter_mut() {
            p.sgd_step(lr);
        }
        if let Some(attn) = self.polar.as_mut() {
            attn.sgd_step(lr);
        }
        self.head.sgd_step(lr);
    }

    pub fn to_f32(&self) -> DetectorModel<f32> {
        DetectorModel {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(|p| p.map_precision()).collect(),
            polar: self.polar.as_ref().map(|a| a.map_precision()),
            head: self.head.map_precision(),
        }
    }
}

/// Retained activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar = f64> {
    /// Input to each backbone stage; entry 0 is the tile itself.
    stage_inputs: Vec<FeatureMap<T>>,
    /// Pre-activation output of each stage's projection.
    pre_act: Vec<FeatureMap<T>>,
    /// Backbone output at the selected stage.
    pub features: FeatureMap<T>,
    pub polar: Option<PolarForward<T>>,
    pub head_out: FeatureMap<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn grid(&self) -> (usize, usize) {
        (self.head_out.height, self.head_out.width)
    }

    pub fn pas(&self) -> Option<&PasMatrix<T>> {
        self.polar.as_ref().map(|p| &p.pas)
    }
}

/// Wall-clock phase breakdown of one tile forward, in milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardTiming {
    pub backbone_ms: f64,
    pub polar_ms: f64,
    pub head_ms: f64,
}

fn leaky<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::from_f64_lossy(LEAKY_SLOPE)
    }
}

fn avg_pool2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (c_n, h, w) = (x.channels, x.height / 2, x.width / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = FeatureMap::zeros(c_n, h, w);
    for c in 0..c_n {
        for i in 0..h {
            for j in 0..w {
                let s = x.get(c, 2 * i, 2 * j)
                    + x.get(c, 2 * i, 2 * j + 1)
                    + x.get(c, 2 * i + 1, 2 * j)
                    + x.get(c, 2 * i + 1, 2 * j + 1);
                out.set(c, i, j, s * quarter);
            }
        }
    }
    out
}

fn unpool2<T: Scalar>(d_out: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let quarter = T::from_f64_lossy(0.25);
    let mut d_in = FeatureMap::zeros(d_out.channels, h, w);
    for c in 0..d_out.channels {
        for i in 0..d_out.height {
            for j in 0..d_out.width {
                let g = d_out.get(c, i, j) * quarter;
                d_in.set(c, 2 * i, 2 * j, g);
                d_in.set(c, 2 * i, 2 * j + 1, g);
                d_in.set(c, 2 * i + 1, 2 * j, g);
                d_in.set(c, 2 * i + 1, 2 * j + 1, g);
            }
        }
    }
    d_in
}

impl<T: Scalar> DetectorModel<T> {
    /// Forward through backbone, optional polar module and head, retaining
    /// every intermediate needed by the backward pass.
    pub fn forward_cache(&self, tile: &FeatureMap<T>) -> Result<ForwardCache<T>> {
        let (cache, _) = self.forward_cache_timed(tile)?;
        Ok(cache)
    }

    pub fn forward_cache_timed(&self, tile: &FeatureMap<T>) -> Result<(ForwardCache<T>, ForwardTiming)> {
        let factor = 1usize << self.config.stage;
        if tile.channels != 1 || tile.height % factor != 0 || tile.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "tile {}x{}x{} is not a single-channel multiple of {factor}",
                tile.channels, tile.height, tile.width
            )));
        }
        let mut timing = ForwardTiming::default();

        let t0 = Instant::now();
        let mut stage_inputs = Vec::with_capacity(self.backbone.len());
        let mut pre_act = Vec::with_capacity(self.backbone.len());
        let mut current = tile.clone();
        for proj in &self.backbone {
            let z = project(proj, &current)?;
            let mut a = z.clone();
            for v in a.data.iter_mut() {
                *v = leaky(*v);
            }
            let pooled = avg_pool2(&a);
            stage_inputs.push(current);
            pre_act.push(z);
            current = pooled;
        }
        let features = current;
        timing.backbone_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let polar = match &self.polar {
            Some(attn) => Some(attn.forward(&features)?),
            None => None,
        };
        timing.polar_ms = t1.elapsed().as_secs_f64() * 1e3;

        let t2 = Instant::now();
        let head_in = polar.as_ref().map(|p| &p.y).unwrap_or(&features);
        let head_out = project(&self.head, head_in)?;
        timing.head_ms = t2.elapsed().as_secs_f64() * 1e3;

        Ok((
            ForwardCache {
                stage_inputs,
                pre_act,
                features,
                polar,
                head_out,
            },
            timing,
        ))
    }

    /// Decode one candidate per feature cell, in row-major cell order. When
    /// the polar module is present each candidate carries a polar score
    /// pooled over its predicted box and the fused confidence follows the
    /// configured alpha; otherwise the fused confidence equals objectness.
    pub fn candidates(&self, cache: &ForwardCache<T>) -> Result<Vec<DetectionBox>> {
        let (gh, gw) = cache.grid();
        let scale = self.config.scale_factor();
        let out = &cache.head_out;
        let mut dets = Vec::with_capacity(gh * gw);
        for i in 0..gh {
            for j in 0..gw {
                let v = |c: usize| out.get(c, i, j).to_f64_lossy();
                let p_obj = 1.0 / (1.0 + (-v(0)).exp());
                let cell_cx = (j as f64 + 0.5) * scale;
                let cell_cy = (i as f64 + 0.5) * scale;
                let cx = cell_cx + v(1) * scale;
                let cy = cell_cy + v(2) * scale;
                let w = scale * v(3).clamp(-6.0, 6.0).exp();
                let h = scale * v(4).clamp(-6.0, 6.0).exp();
                let class_id = if v(5) >= v(6) {
                    ObjectClass::Agc
                } else {
                    ObjectClass::Ngec
                };
                let mut det = DetectionBox::new(cx, cy, w, h, class_id);
                det.p_obj = p_obj;
                match cache.pas() {
                    Some(pas) => {
                        let range = box_to_grid(&det, scale, gh, gw).unwrap_or(GridRange {
                            row0: i,
                            row1: i,
                            col0: j,
                            col1: j,
                        });
                        let scores = pool_over_range(pas, range);
                        det.p_polar = Some(scores.p_polar);
                        det.fused = fuse_confidence(p_obj, scores.p_polar, self.config.alpha)?;
                    }
                    None => {
                        det.p_polar = None;
                        det.fused = p_obj;
                    }
                }
                dets.push(det);
            }
        }
        Ok(dets)
    }

    /// Candidates before suppression plus the score matrix, the raw
    /// per-tile inference output.
    pub fn forward(&self, tile: &FeatureMap<T>) -> Result<(Vec<DetectionBox>, Option<PasMatrix<T>>)> {
        let cache = self.forward_cache(tile)?;
        let dets = self.candidates(&cache)?;
        Ok((dets, cache.polar.map(|p| p.pas)))
    }

    /// Full inference: candidates, confidence floor, per-class NMS, cap.
    pub fn infer_tile(&self, tile: &FeatureMap<T>) -> Result<Vec<DetectionBox>> {
        let cache = self.forward_cache(tile)?;
        let dets = self.candidates(&cache)?;
        Ok(self.postprocess(dets))
    }

    pub fn postprocess(&self, dets: Vec<DetectionBox>) -> Vec<DetectionBox> {
        let floored: Vec<DetectionBox> = dets
            .into_iter()
            .filter(|d| d.fused >= self.config.conf_floor)
            .collect();
        let mut kept = nms(&floored, self.config.nms_iou);
        kept.truncate(self.config.max_detections);
        kept
    }
}

// ---------------------------------------------------------------------------
// Target assignment and the training loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CellTarget {
    pub ann_index: usize,
    pub dx: f64,
    pub dy: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub class: ObjectClass,
}

/// Per-cell targets: a cell is positive iff an annotation center falls in
/// it; with several, the one nearest the cell center wins.
#[derive(Debug, Clone)]
pub struct Targets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cells: Vec<Option<CellTarget>>,
}

impl Targets {
    pub fn positive_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

pub fn assign_targets(
    annotations: &[DetectionBox],
    grid_h: usize,
    grid_w: usize,
    scale: f64,
) -> Targets {
    let mut cells: Vec<Option<CellTarget>> = vec![None; grid_h * grid_w];
    for (ai, ann) in annotations.iter().enumerate() {
        let j = ((ann.cx / scale).floor() as i64).clamp(0, grid_w as i64 - 1) as usize;
        let i = ((ann.cy / scale).floor() as i64).clamp(0, grid_h as i64 - 1) as usize;
        let cell_cx = (j as f64 + 0.5) * scale;
        let cell_cy = (i as f64 + 0.5) * scale;
        let dist2 = (ann.cx - cell_cx).powi(2) + (ann.cy - cell_cy).powi(2);
        let target = CellTarget {
            ann_index: ai,
            dx: (ann.cx - cell_cx) / scale,
            dy: (ann.cy - cell_cy) / scale,
            log_w: (ann.w / scale).ln(),
            log_h: (ann.h / scale).ln(),
            class: ann.class_id,
        };
        let slot = &mut cells[i * grid_w + j];
        match slot {
            None => *slot = Some(target),
            Some(existing) => {
                let e = &annotations[existing.ann_index];
                let e_dist2 = (e.cx - cell_cx).powi(2) + (e.cy - cell_cy).powi(2);
                if dist2 < e_dist2 {
                    *slot = Some(target);
                }
            }
        }
    }
    Targets {
        grid_h,
        grid_w,
        cells,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub objectness: f64,
    pub boxes: f64,
    pub class: f64,
    pub polar: f64,
    pub total: f64,
}

fn bce_with_logits(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    let grad = 1.0 / (1.0 + (-z).exp()) - target;
    (loss, grad)
}

impl DetectorModel<f64> {
    /// Loss of one tile with gradients accumulated into the model's
    /// gradient buffers. `sample_seed` drives the background-box sampling of
    /// the polar supervision (one negative per positive).
    pub fn tile_loss_and_grads(
        &mut self,
        tile: &FeatureMap<f64>,
        annotations: &[DetectionBox],
        sample_seed: u64,
        polar_loss_weight: f64,
    ) -> Result<LossBreakdown> {
        Ok(self
            .tile_loss_grads_with_input(tile, annotations, sample_seed, polar_loss_weight)?
            .0)
    }

    /// As [`Self::tile_loss_and_grads`], additionally returning the loss
    /// gradient with respect to the input tile.
    pub fn tile_loss_grads_with_input(
        &mut self,
        tile: &FeatureMap<f64>,
        annotations: &[DetectionBox],
        sample_seed: u64,
        polar_loss_weight: f64,
    ) -> Result<(LossBreakdown, FeatureMap<f64>)> {
        let cache = self.forward_cache(tile)?;
        let (gh, gw) = cache.grid();
        let scale = self.config.scale_factor();
        let targets = assign_targets(annotations, gh, gw, scale);
        let n_pos = targets.positive_count();
        let n_neg = gh * gw - n_pos;

        let mut breakdown = LossBreakdown::default();
        let mut d_head_out = FeatureMap::zeros(HEAD_CHANNELS, gh, gw);

        // Objectness: balanced binary cross entropy over all cells.
        let w_pos = if n_pos > 0 { 0.5 / n_pos as f64 } else { 0.0 };
        let w_neg = if n_neg > 0 {
            if n_pos > 0 { 0.5 / n_neg as f64 } else { 1.0 / n_neg as f64 }
        } else {
            0.0
        };
        for i in 0..gh {
            for j in 0..gw {
                let target = &targets.cells[i * gw + j];
                let t = if target.is_some() { 1.0 } else { 0.0 };
                let wgt = if target.is_some() { w_pos } else { w_neg };
                let (l, g) = bce_with_logits(cache.head_out.get(0, i, j), t);
                breakdown.objectness += wgt * l;
                d_head_out.set(0, i, j, wgt * g);

                if let Some(ct) = target {
                    // Box offsets: L1 on (dx, dy, log w, log h).
                    let inv = 1.0 / n_pos as f64;
                    let t_vals = [ct.dx, ct.dy, ct.log_w, ct.log_h];
                    for (k, &tv) in t_vals.iter().enumerate() {
                        let p = cache.head_out.get(1 + k, i, j);
                        breakdown.boxes += inv * (p - tv).abs();
                        d_head_out.set(1 + k, i, j, inv * (p - tv).signum());
                    }
                    // Class cross entropy on the two logits.
                    let (z0, z1) = (cache.head_out.get(5, i, j), cache.head_out.get(6, i, j));
                    let m = z0.max(z1);
                    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
                    let (sm0, sm1) = ((z0 - lse).exp(), (z1 - lse).exp());
                    let t_idx = ct.class.index();
                    breakdown.class += inv * (lse - if t_idx == 0 { z0 } else { z1 });
                    d_head_out.set(5, i, j, inv * (sm0 - if t_idx == 0 { 1.0 } else { 0.0 }));
                    d_head_out.set(6, i, j, inv * (sm1 - if t_idx == 1 { 1.0 } else { 0.0 }));
                }
            }
        }

        // Polar supervision: each annotation box is a positive, matched 1:1
        // by sampled background boxes on cells without targets.
        let mut d_pas: Option<PasMatrix<f64>> = None;
        if let Some(polar_fwd) = cache.polar.as_ref() {
            let mut ranges: Vec<(GridRange, bool)> = Vec::new();
            for ann in annotations {
                if let Ok(range) = box_to_grid(ann, scale, gh, gw) {
                    ranges.push((range, true));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sample_seed, 0xBC6]));
            let want_neg = ranges.len().max(1);
            let mut guard = 0;
            let mut negs = 0;
            while negs < want_neg && guard < 200 {
                guard += 1;
                let i = rng.gen_range(0..gh);
                let j = rng.gen_range(0..gw);
                if targets.cells[i * gw + j].is_some() {
                    continue;
                }
                let size = rng.gen_range(48.0..96.0);
                let b = DetectionBox::new(
                    (j as f64 + 0.5) * scale,
                    (i as f64 + 0.5) * scale,
                    size,
                    size,
                    ObjectClass::Ngec,
                );
                if let Ok(range) = box_to_grid(&b, scale, gh, gw) {
                    ranges.push((range, false));
                    negs += 1;
                }
            }
            if !ranges.is_empty() {
                let mut grad_pas = PasMatrix::zeros(gh, gw);
                let inv = 1.0 / ranges.len() as f64;
                for (range, is_polar) in &ranges {
                    let scores = pool_over_range(&polar_fwd.pas, *range);
                    let (loss, g) = polarnet_loss_backward(&scores, *is_polar);
                    breakdown.polar += inv * polar_loss_weight * loss;
                    pool_backward(
                        *range,
                        inv * polar_loss_weight * g.p_polar,
                        inv * polar_loss_weight * g.p_non_polar,
                        &mut grad_pas,
                    );
                }
                d_pas = Some(grad_pas);
            }
        }

        breakdown.total =
            breakdown.objectness + breakdown.boxes + breakdown.class + breakdown.polar;

        // Head backward.
        let head_in = cache
            .polar
            .as_ref()
            .map(|p| &p.y)
            .unwrap_or(&cache.features);
        let d_head_in = project_backward(&mut self.head, head_in, &d_head_out)?;

        // Polar backward (or pass-through when disabled).
        let mut d_feat = match (self.polar.as_mut(), cache.polar.as_ref()) {
            (Some(attn), Some(polar_fwd)) => {
                attn.backward(&cache.features, polar_fwd, Some(&d_head_in), d_pas.as_ref())?
                    .d_input
            }
            _ => d_head_in,
        };

        // Backbone backward, deepest stage first.
        for s in (0..self.backbone.len()).rev() {
            let z = &cache.pre_act[s];
            let mut d_act = unpool2(&d_feat, z.height, z.width);
            for (g, &zv) in d_act.data.iter_mut().zip(z.data.iter()) {
                if zv <= 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            }
            d_feat = project_backward(&mut self.backbone[s], &cache.stage_inputs[s], &d_act)?;
        }

        Ok((breakdown, d_feat))
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay: f64,
    /// Epochs (0-based) at which the learning rate decays; strictly
    /// increasing and below `epochs`.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub polar_loss_weight: f64,
}

impl TrainConfig {
    /// Desk-scale schedule: the full-scale stepwise schedule (decay 0.1 at
    /// epochs 25/50/80 of 100, 5e-3 down to 5e-6) compressed to 20 epochs.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 20,
            base_lr: 5e-3,
            decay: 0.1,
            milestones: vec![5, 10, 16],
            batch_size: 8,
            seed: 0,
            polar_loss_weight: 1.0,
        }
    }

    /// The full-scale schedule.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            base_lr: 5e-3,
            decay: 0.1,
            milestones: vec![25, 50, 80],
            batch_size: 8,
            seed: 0,
            polar_loss_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
        let bounded = self.milestones.iter().all(|&m| m < self.epochs);
        if !increasing || !bounded {
            return Err(Error::Config(
                "milestones must be strictly increasing and below the epoch count".into(),
            ));
        }
        Ok(())
    }

    /// Stepwise learning rate at a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub objectness: f64,
    pub boxes: f64,
    pub class: f64,
    pub polar: f64,
    pub total: f64,
    pub val_ap50: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_ap50: f64,
}

impl TrainLog {
    /// Line-delimited records: epoch, lr, losses, val AP50.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,lr,obj,box,class,polar,total,val_ap50")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.lr, e.objectness, e.boxes, e.class, e.polar, e.total, e.val_ap50
            )?;
        }
        Ok(())
    }
}

/// A tile held in memory as raw grayscale bytes.
struct LoadedTile {
    pixels: FeatureMap<f64>,
    annotations: Vec<DetectionBox>,
}

fn load_split(root: &Path, entries: &[ManifestEntry], split: Split) -> Result<Vec<LoadedTile>> {
    let selected: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
    selected
        .par_iter()
        .map(|e| {
            Ok(LoadedTile {
                pixels: load_tile_pixels(&root.join(&e.path))?,
                annotations: e.annotations.clone(),
            })
        })
        .collect()
}

/// SGD training over the manifest's train split, validating AP50 on the val
/// split per epoch. Returns the log; the model is left at the best-validation
/// weights.
pub fn train(
    model: &mut DetectorModel<f64>,
    root: &Path,
    entries: &[ManifestEntry],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let train_tiles = load_split(root, entries, Split::Train)?;
    if train_tiles.is_empty() {
        return Err(Error::Config("training requires a non-empty train split".into()));
    }
    let val_tiles = load_split(root, entries, Split::Val)?;

    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_ap50: f64::NEG_INFINITY,
    };
    let mut best_model = model.clone();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_tiles.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, 0x5EED]));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            // Per-tile gradient accumulation runs in parallel on model
            // copies; the merge below is sequential in batch order so the
            // update is independent of scheduling.
            let locals: Result<Vec<(LossBreakdown, DetectorModel<f64>)>> = batch
                .par_iter()
                .map(|&ti| {
                    let mut local = model.clone();
                    local.zero_grad();
                    let tile = &train_tiles[ti];
                    let lb = local.tile_loss_and_grads(
                        &tile.pixels,
                        &tile.annotations,
                        mix_seed(&[cfg.seed, epoch as u64, ti as u64]),
                        cfg.polar_loss_weight,
                    )?;
                    Ok((lb, local))
                })
                .collect();
            let locals = locals?;
            model.zero_grad();
            for (lb, local) in &locals {
                sums.objectness += lb.objectness;
                sums.boxes += lb.boxes;
                sums.class += lb.class;
                sums.polar += lb.polar;
                sums.total += lb.total;
                model.absorb_grads(local);
            }
            model.sgd_step(lr / batch.len() as f64);
        }

        let n = train_tiles.len() as f64;
        let val_ap50 = validate_ap50(model, &val_tiles)?;
        let stats = EpochStats {
            epoch,
            lr,
            objectness: sums.objectness / n,
            boxes: sums.boxes / n,
            class: sums.class / n,
            polar: sums.polar / n,
            total: sums.total / n,
            val_ap50,
        };
        log.epochs.push(stats);
        if val_ap50 > log.best_val_ap50 {
            log.best_val_ap50 = val_ap50;
            log.best_epoch = epoch;
            best_model = model.clone();
        }
    }

    *model = best_model;
    Ok(log)
}

fn validate_ap50(model: &DetectorModel<f64>, val_tiles: &[LoadedTile]) -> Result<f64> {
    if val_tiles.is_empty() {
        return Ok(0.0);
    }
    let images: Result<Vec<ImageEval>> = val_tiles
        .par_iter()
        .map(|t| {
            Ok(ImageEval {
                preds: model.infer_tile(&t.pixels)?,
                annotations: t.annotations.clone(),
            })
        })
        .collect();
    Ok(ap_over_images(&images?, 0.5).ap().unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

impl DetectorModel<f64> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[1u8])?; // version
        w.write_all(&self.config.stage.to_le_bytes())?;
        w.write_all(&(self.config.width as u32).to_le_bytes())?;
        w.write_all(&[
            u8::from(self.config.use_polar),
            self.config.border.code(),
        ])?;
        w.write_all(&self.config.alpha.to_le_bytes())?;
        w.write_all(&self.config.nms_iou.to_le_bytes())?;
        w.write_all(&self.config.conf_floor.to_le_bytes())?;
        w.write_all(&(self.config.max_detections as u32).to_le_bytes())?;
        w.write_all(&(self.backbone.len() as u32).to_le_bytes())?;
        for p in &self.backbone {
            p.write_to(w)?;
        }
        if let Some(attn) = &self.polar {
            attn.write_to(w)?;
        }
        self.head.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 4 + 1 + 4 + 4 + 2 + 8 + 8 + 8 + 4 + 4];
        r.read_exact(&mut head)?;
        if &head[0..4] != MODEL_MAGIC {
            return Err(Error::Format("bad model checkpoint magic".into()));
        }
        if head[4] != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {}", head[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        let stage = u32_at(5);
        let width = u32_at(9) as usize;
        let use_polar = head[13] != 0;
        let border = BorderMode::from_code(head[14])?;
        let alpha = f64_at(15);
        let nms_iou = f64_at(23);
        let conf_floor = f64_at(31);
        let max_detections = u32_at(39) as usize;
        let n_backbone = u32_at(43) as usize;

        let config = ModelConfig {
            stage,
            width,
            alpha,
            use_polar,
            border,
            nms_iou,
            conf_floor,
            max_detections,
        };
        config.validate()?;
        let mut backbone = Vec::with_capacity(n_backbone);
        for _ in 0..n_backbone {
            backbone.push(LinearProjection::read_from(r)?);
        }
        let polar = if use_polar {
            Some(PolarAttention::read_from(r)?)
        } else {
            None
        };
        let head_proj = LinearProjection::read_from(r)?;
        Ok(Self {
            config,
            backbone,
            polar,
            head: head_proj,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Self::read_from(&mut data.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::Rng;

    fn tiny_model(use_polar: bool) -> DetectorModel<f64> {
        let config = ModelConfig {
            stage: 5,
            width: 8,
            use_polar,
            ..ModelConfig::default()
        };
        DetectorModel::new(config, 7).unwrap()
    }

    fn random_tile(seed: u64, size: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(1, size, size, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn stage5_grid_yields_one_candidate_per_cell() {
        let model = tiny_model(true);
        let tile = random_tile(1, 1024);
        let (dets, pas) = model.forward(&tile).unwrap();
        assert_eq!(dets.len(), 32 * 32);
        assert_eq!(pas.as_ref().map(|p| (p.height, p.width)), Some((32, 32)));
        assert!(dets.iter().all(|d| d.p_polar.is_some()));
    }

    #[test]
    fn polar_disabled_fuses_to_objectness() {
        let model = tiny_model(false);
        let tile = random_tile(2, 256);
        let (dets, pas) = model.forward(&tile).unwrap();
        assert!(pas.is_none());
        for d in &dets {
            assert!(d.p_polar.is_none());
            assert_eq!(d.fused, d.p_obj);
        }
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let model = tiny_model(true);
        let tile = random_tile(3, 256);
        let (a, _) = model.forward(&tile).unwrap();
        let (b, _) = model.forward(&tile).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_multiple_tile_size_is_rejected() {
        let model = tiny_model(true);
        let tile = random_tile(4, 100);
        assert!(matches!(model.forward(&tile), Err(Error::Dimension(_))));
    }

    #[test]
    fn alpha_zero_ranking_equals_objectness_ranking() {
        let mut model = tiny_model(true);
        model.config.alpha = 0.0;
        let tile = random_tile(5, 256);
        let (dets, _) = model.forward(&tile).unwrap();
        let argsort = |key: &dyn Fn(&DetectionBox) -> f64| {
            let mut idx: Vec<usize> = (0..dets.len()).collect();
            idx.sort_by(|&a, &b| {
                key(&dets[b])
                    .partial_cmp(&key(&dets[a]))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx
        };
        assert_eq!(argsort(&|d| d.fused), argsort(&|d| d.p_obj));

        model.config.alpha = 1.0;
        let (dets1, _) = model.forward(&tile).unwrap();
        let argsort1 = |key: &dyn Fn(&DetectionBox) -> f64| {
            let mut idx: Vec<usize> = (0..dets1.len()).collect();
            idx.sort_by(|&a, &b| {
                key(&dets1[b])
                    .partial_cmp(&key(&dets1[a]))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx
        };
        assert_eq!(argsort1(&|d| d.fused), argsort1(&|d| d.p_polar.unwrap()));
    }

    #[test]
    fn target_assignment_examples() {
        let ann = DetectionBox::new(512.0, 512.0, 64.0, 64.0, ObjectClass::Agc);
        let t = assign_targets(&[ann], 32, 32, 32.0);
        assert_eq!(t.positive_count(), 1);
        assert!(t.cells[16 * 32 + 16].is_some());

        let t = assign_targets(&[], 32, 32, 32.0);
        assert_eq!(t.positive_count(), 0);

        // Two annotations in one cell: nearest to the cell center wins.
        let far = DetectionBox::new(100.0, 100.0, 40.0, 40.0, ObjectClass::Agc);
        let near = DetectionBox::new(112.5, 112.0, 40.0, 40.0, ObjectClass::Ngec);
        let t = assign_targets(&[far, near], 32, 32, 32.0);
        assert_eq!(t.positive_count(), 1);
        let ct = t.cells[3 * 32 + 3].as_ref().unwrap();
        assert_eq!(ct.ann_index, 1);
    }

    #[test]
    fn lr_schedule_examples_and_validation() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(cfg.lr_at(0), 5e-3);
        assert_eq!(cfg.lr_at(24), 5e-3);
        assert!((cfg.lr_at(25) - 5e-4).abs() < 1e-18);
        assert!((cfg.lr_at(99) - 5e-6).abs() < 1e-12 * 5e-6 + 1e-18);

        let desk = TrainConfig::desk_scale();
        assert_eq!(desk.milestones, vec![5, 10, 16]);
        assert!((desk.lr_at(19) - 5e-6).abs() < 1e-18);

        let mut bad = TrainConfig::desk_scale();
        bad.milestones = vec![5, 5];
        assert!(bad.validate().is_err());
        bad.milestones = vec![25];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn one_sgd_step_decreases_single_sample_loss() {
        let mut model = tiny_model(true);
        let tile = random_tile(6, 256);
        let anns = vec![DetectionBox::new(130.0, 130.0, 60.0, 28.0, ObjectClass::Ngec)];
        model.zero_grad();
        let before = model
            .tile_loss_and_grads(&tile, &anns, 3, 1.0)
            .unwrap()
            .total;
        model.sgd_step(1e-4);
        let mut probe = model.clone();
        probe.zero_grad();
        let after = probe.tile_loss_and_grads(&tile, &anns, 3, 1.0).unwrap().total;
        assert!(
            after < before,
            "one small SGD step must reduce the sample loss ({after} vs {before})"
        );
    }

    #[test]
    fn full_model_gradients_match_finite_differences_sampled() {
        let config = ModelConfig {
            stage: 5,
            width: 8,
            use_polar: true,
            ..ModelConfig::default()
        };
        let model = DetectorModel::new(config, 11).unwrap();
        let tile = random_tile(7, 64);
        let anns = vec![DetectionBox::new(30.0, 30.0, 26.0, 12.0, ObjectClass::Agc)];

        let mut with_grads = model.clone();
        with_grads.zero_grad();
        with_grads.tile_loss_and_grads(&tile, &anns, 5, 1.0).unwrap();

        let loss_of = |m: &DetectorModel<f64>| -> f64 {
            let mut c = m.clone();
            c.zero_grad();
            c.tile_loss_and_grads(&tile, &anns, 5, 1.0).unwrap().total
        };

        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        // Sampled parameter sites across every component (the full sweep runs
        // in the acceptance suite).
        for _ in 0..60 {
            let which = rng.gen_range(0..4);
            let mut plus = model.clone();
            let mut minus = model.clone();
            let analytic;
            match which {
                0 => {
                    let s = rng.gen_range(0..model.backbone.len());
                    let k = rng.gen_range(0..model.backbone[s].weight.len());
                    plus.backbone[s].weight[k] += h;
                    minus.backbone[s].weight[k] -= h;
                    analytic = with_grads.backbone[s].weight_grad[k];
                }
                1 => {
                    let attn = model.polar.as_ref().unwrap();
                    let k = rng.gen_range(0..attn.q_proj.weight.len());
                    plus.polar.as_mut().unwrap().q_proj.weight[k] += h;
                    minus.polar.as_mut().unwrap().q_proj.weight[k] -= h;
                    analytic = with_grads.polar.as_ref().unwrap().q_proj.weight_grad[k];
                }
                2 => {
                    let attn = model.polar.as_ref().unwrap();
                    let k = rng.gen_range(0..attn.v_proj.weight.len());
                    plus.polar.as_mut().unwrap().v_proj.weight[k] += h;
                    minus.polar.as_mut().unwrap().v_proj.weight[k] -= h;
                    analytic = with_grads.polar.as_ref().unwrap().v_proj.weight_grad[k];
                }
                _ => {
                    let k = rng.gen_range(0..model.head.weight.len());
                    plus.head.weight[k] += h;
                    minus.head.weight[k] -= h;
                    analytic = with_grads.head.weight_grad[k];
                }
            }
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            worst = worst.max(oracle::grad_rel_error(analytic, fd));
        }
        assert!(worst < 1e-5, "max relative gradient error {worst}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let model = tiny_model(true);
        let tile = random_tile(9, 256);
        let (before, _) = model.forward(&tile).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = DetectorModel::read_from(&mut buf.as_slice()).unwrap();
        let (after, _) = back.forward(&tile).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_train_split_is_config_error() {
        let mut model = tiny_model(false);
        let err = train(
            &mut model,
            Path::new("/nonexistent"),
            &[],
            &TrainConfig::desk_scale(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
