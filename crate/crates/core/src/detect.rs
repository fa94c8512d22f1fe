//! Detection geometry and scoring: boxes, IoU, greedy NMS, confidence
//! fusion, and the mapping from image-space boxes to feature-grid cells.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Weight of the polar salience in confidence fusion.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Greedy suppression threshold, applied per class.
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Scan resolution of the slides this pipeline is calibrated for.
pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.2499;

/// The two glandular-cell subclasses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Agc,
    Ngec,
}

impl ObjectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Agc => "agc",
            ObjectClass::Ngec => "ngec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "agc" => Ok(ObjectClass::Agc),
            "ngec" => Ok(ObjectClass::Ngec),
            other => Err(Error::Format(format!("unknown class '{other}'"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Agc => 0,
            ObjectClass::Ngec => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            ObjectClass::Agc
        } else {
            ObjectClass::Ngec
        }
    }
}

/// A located, sized, scored detection in image-pixel coordinates.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DetectionBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Objectness confidence of the detector head.
    pub p_obj: f64,
    /// Pooled polar salience, absent when the polar module is disabled.
    pub p_polar: Option<f64>,
    /// Fused confidence used for ranking and suppression.
    pub fused: f64,
    pub class_id: ObjectClass,
}

impl DetectionBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: ObjectClass) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            p_obj: 0.0,
            p_polar: None,
            fused: 0.0,
            class_id,
        }
    }

    #[inline]
    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    #[inline]
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    #[inline]
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Shift the box by a fixed offset (tile -> slide coordinates).
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut b = self.clone();
        b.cx += dx;
        b.cy += dy;
        b
    }
}

/// Intersection over union of two boxes. Symmetric, in `[0, 1]`.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let ix = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let iy = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Confidence fusion: `P = (1 - alpha) * p_obj + alpha * p_polar`.
pub fn fuse_confidence(p_obj: f64, p_polar: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    debug_assert!((0.0..=1.0).contains(&p_obj) && (0.0..=1.0).contains(&p_polar));
    Ok((1.0 - alpha) * p_obj + alpha * p_polar)
}

/// Total order used for ranking: fused confidence descending, ties broken by
/// smaller `cy`, then smaller `cx`, so suppression and top-N lists are
/// independent of input ordering.
pub fn rank_order(a: &DetectionBox, b: &DetectionBox) -> std::cmp::Ordering {
    b.fused
        .partial_cmp(&a.fused)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.cy.partial_cmp(&b.cy).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.cx.partial_cmp(&b.cx).unwrap_or(std::cmp::Ordering::Equal))
}

/// Greedy non-maximum suppression at `iou_threshold`, applied per class.
/// Returns indices into `boxes` of the survivors, in rank order.
pub fn nms_indices(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| rank_order(&boxes[a], &boxes[b]));
    let mut kept: Vec<usize> = Vec::new();
    'outer: for cand in order {
        for &k in &kept {
            if boxes[k].class_id == boxes[cand].class_id
                && iou(&boxes[k], &boxes[cand]) > iou_threshold
            {
                continue 'outer;
            }
        }
        kept.push(cand);
    }
    kept
}

/// Greedy non-maximum suppression at `iou_threshold`, applied per class.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    nms_indices(boxes, iou_threshold)
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect()
}

/// Backbone stage and its downsampling factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    pub stage: u32,
    pub factor: u32,
    pub microns_per_pixel: f64,
}

impl ScaleSpec {
    pub fn new(stage: u32) -> Result<Self> {
        Self::with_resolution(stage, DEFAULT_MICRONS_PER_PIXEL)
    }

    pub fn with_resolution(stage: u32, microns_per_pixel: f64) -> Result<Self> {
        if !(2..=5).contains(&stage) {
            return Err(Error::Parameter(format!("stage {stage} outside {{2..5}}")));
        }
        Ok(Self {
            stage,
            factor: 1 << stage,
            microns_per_pixel,
        })
    }

    /// Physical side length of one feature cell in microns.
    pub fn cell_microns(&self) -> f64 {
        self.factor as f64 * self.microns_per_pixel
    }
}

/// Inclusive range of feature-grid cells covered by a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRange {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl GridRange {
    pub fn cell_count(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }
}

/// Map a box in image coordinates to the inclusive cell range it covers on a
/// `grid_h x grid_w` feature grid with downsampling `scale`: floor of the min
/// corner, ceil of the max corner, clamped to the grid and to at least one
/// cell.
pub fn box_to_grid(b: &DetectionBox, scale: f64, grid_h: usize, grid_w: usize) -> Result<GridRange> {
    if b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::Domain(format!("box has non-positive extent {}x{}", b.w, b.h)));
    }
    let (img_w, img_h) = (grid_w as f64 * scale, grid_h as f64 * scale);
    if b.x1() <= 0.0 || b.y1() <= 0.0 || b.x0() >= img_w || b.y0() >= img_h {
        return Err(Error::Domain("box lies entirely outside the image".into()));
    }
    let clamp = |v: i64, hi: usize| v.max(0).min(hi as i64 - 1) as usize;
    let col0 = clamp((b.x0() / scale).floor() as i64, grid_w);
    let col1 = clamp((b.x1() / scale).ceil() as i64 - 1, grid_w).max(col0);
    let row0 = clamp((b.y0() / scale).floor() as i64, grid_h);
    let row1 = clamp((b.y1() / scale).ceil() as i64 - 1, grid_h).max(row0);
    Ok(GridRange { row0, row1, col0, col1 })
}

/// One line of the detection dump: slide id, tile origin, then the box.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub slide_id: String,
    pub tile_x: u32,
    pub tile_y: u32,
    pub det: DetectionBox,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

/// Serialize one record: comma-separated, 6 decimal places, empty polar field
/// when the polar module was disabled.
pub fn format_record(r: &DetectionRecord) -> String {
    let mut s = String::new();
    let d = &r.det;
    write!(
        s,
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{},{:.6}",
        r.slide_id,
        r.tile_x,
        r.tile_y,
        d.cx,
        d.cy,
        d.w,
        d.h,
        d.class_id.as_str(),
        d.p_obj,
        fmt_opt(d.p_polar),
        d.fused
    )
    .expect("write to string");
    s
}

pub fn parse_record(line: &str) -> Result<DetectionRecord> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 11 {
        return Err(Error::Format(format!(
            "detection record has {} fields, expected 11",
            parts.len()
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad number '{s}' in detection record")))
    };
    let p_polar = if parts[9].is_empty() { None } else { Some(num(parts[9])?) };
    Ok(DetectionRecord {
        slide_id: parts[0].to_string(),
        tile_x: parts[1]
            .parse()
            .map_err(|_| Error::Format("bad tile x".into()))?,
        tile_y: parts[2]
            .parse()
            .map_err(|_| Error::Format("bad tile y".into()))?,
        det: DetectionBox {
            cx: num(parts[3])?,
            cy: num(parts[4])?,
            w: num(parts[5])?,
            h: num(parts[6])?,
            class_id: ObjectClass::parse(parts[7])?,
            p_obj: num(parts[8])?,
            p_polar,
            fused: num(parts[10])?,
        },
    })
}

pub fn write_records<W: Write>(w: &mut W, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", format_record(r))?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line)?);
    }
    Ok(out)
}
