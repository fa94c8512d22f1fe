//! Whole-slide inference: tile planning, a parallel worker pool with
//! deterministic merging, slide-coordinate translation, global per-class
//! suppression, top-N ranking, and the per-variant cost benchmark.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::detect::{nms_indices, rank_order, DetectionBox, DetectionRecord};
use crate::detector::{DetectorModel, ForwardTiming};
use crate::error::{Error, Result};
use crate::synth::{load_tile_pixels, SlideLayout};
use crate::tensor::{FeatureMap, Scalar};

/// One unit of tiling work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileJob {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub index: usize,
}

/// Row-major tile plan with configurable overlap; right and bottom edge
/// tiles shift inward so every job stays in bounds and the union covers the
/// slide exactly.
pub fn plan_tiles(
    slide_id: &str,
    width: usize,
    height: usize,
    tile_size: usize,
    overlap: usize,
) -> Result<Vec<TileJob>> {
    if width < tile_size || height < tile_size {
        return Err(Error::Domain(format!(
            "slide {width}x{height} is smaller than the {tile_size} tile"
        )));
    }
    if overlap >= tile_size {
        return Err(Error::Parameter(format!(
            "overlap {overlap} must be below the tile size {tile_size}"
        )));
    }
    let stride = tile_size - overlap;
    let axis = |dim: usize| -> Vec<usize> {
        let mut xs = Vec::new();
        let mut x = 0usize;
        while x + tile_size < dim {
            xs.push(x);
            x += stride;
        }
        let last = dim - tile_size;
        if xs.last() != Some(&last) {
            xs.push(last);
        }
        xs
    };
    let (xs, ys) = (axis(width), axis(height));
    let mut jobs = Vec::with_capacity(xs.len() * ys.len());
    let mut index = 0;
    for &y in &ys {
        for &x in &xs {
            jobs.push(TileJob {
                slide_id: slide_id.to_string(),
                x,
                y,
                size: tile_size,
                index,
            });
            index += 1;
        }
    }
    Ok(jobs)
}

/// Read access to a slide's pixels. Implementations must be shareable
/// across worker threads.
pub trait SlideSource: Sync {
    fn id(&self) -> &str;
    fn dims(&self) -> (usize, usize);
    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<FeatureMap<f64>>;
}

/// A slide stored as a directory of PNG tiles plus a dims manifest, the
/// format the synthetic mosaic generator writes. Regions are stitched from
/// the stored grid on demand.
pub struct DirectorySlide {
    id: String,
    dir: PathBuf,
    layout: SlideLayout,
}

impl DirectorySlide {
    pub fn open(dir: &Path) -> Result<Self> {
        let layout = SlideLayout::read(dir)?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".to_string());
        Ok(Self {
            id,
            dir: dir.to_path_buf(),
            layout,
        })
    }

    pub fn layout(&self) -> SlideLayout {
        self.layout
    }
}

impl SlideSource for DirectorySlide {
    fn id(&self) -> &str {
        &self.id
    }

    fn dims(&self) -> (usize, usize) {
        (self.layout.width, self.layout.height)
    }

    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<FeatureMap<f64>> {
        let ts = self.layout.tile_size;
        if x + w > self.layout.width || y + h > self.layout.height {
            return Err(Error::Domain("region exceeds slide bounds".into()));
        }
        let mut out = FeatureMap::zeros(1, h, w);
        let (r0, r1) = (y / ts, (y + h - 1) / ts);
        let (c0, c1) = (x / ts, (x + w - 1) / ts);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let tile: FeatureMap<f64> =
                    load_tile_pixels(&self.dir.join(SlideLayout::tile_name(r, c)))?;
                if tile.height != ts || tile.width != ts {
                    return Err(Error::Format(format!(
                        "stored tile ({r},{c}) is {}x{}, expected {ts}",
                        tile.height, tile.width
                    )));
                }
                // Intersection of the stored tile with the requested region.
                let sy = y.max(r * ts);
                let ey = (y + h).min((r + 1) * ts);
                let sx = x.max(c * ts);
                let ex = (x + w).min((c + 1) * ts);
                for gy in sy..ey {
                    for gx in sx..ex {
                        out.set(0, gy - y, gx - x, tile.get(0, gy - r * ts, gx - c * ts));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SlideTiming {
    pub plan_ms: f64,
    /// Summed per-tile forward+postprocess time across workers.
    pub inference_ms: f64,
    /// Summed polar-module share of the forward time.
    pub polar_ms: f64,
    pub merge_ms: f64,
    /// Wall-clock time of the whole run.
    pub wall_ms: f64,
    pub tiles: usize,
}

/// Merged, ranked per-slide detection set.
#[derive(Debug, Clone)]
pub struct SlideResult {
    pub slide_id: String,
    /// All surviving detections in slide coordinates, rank order.
    pub detections: Vec<DetectionRecord>,
    /// The `n` highest fused confidences.
    pub top_n: Vec<DetectionBox>,
    pub timing: SlideTiming,
    /// Tiles whose read or inference failed; nonzero means partial coverage.
    pub failed_tiles: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct WsiOptions {
    pub top_n: usize,
    pub workers: usize,
    pub overlap: usize,
}

impl Default for WsiOptions {
    fn default() -> Self {
        Self {
            top_n: 20,
            workers: 1,
            overlap: 0,
        }
    }
}

/// Run the detector across a slide. The result is independent of the worker
/// count: per-tile outputs merge in sequence-index order and the global
/// suppression is deterministic.
pub fn run_slide(
    model: &DetectorModel<f64>,
    slide: &dyn SlideSource,
    opts: &WsiOptions,
) -> Result<SlideResult> {
    let wall = Instant::now();
    let t_plan = Instant::now();
    let (width, height) = slide.dims();
    let tile_size = 1usize << 10;
    let jobs = plan_tiles(slide.id(), width, height, tile_size, opts.overlap)?;
    let plan_ms = t_plan.elapsed().as_secs_f64() * 1e3;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    struct TileOutcome {
        job_index: usize,
        dets: Vec<DetectionBox>,
        timing: ForwardTiming,
        elapsed_ms: f64,
        failed: bool,
    }

    let outcomes: Vec<TileOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let t = Instant::now();
                let run = || -> Result<(Vec<DetectionBox>, ForwardTiming)> {
                    let region = slide.read_region(job.x, job.y, job.size, job.size)?;
                    let (cache, timing) = model.forward_cache_timed(&region)?;
                    let dets = model.candidates(&cache)?;
                    let kept = model.postprocess(dets);
                    Ok((kept, timing))
                };
                match run() {
                    Ok((dets, timing)) => TileOutcome {
                        job_index: job.index,
                        dets: dets
                            .into_iter()
                            .map(|d| d.translated(job.x as f64, job.y as f64))
                            .collect(),
                        timing,
                        elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
                        failed: false,
                    },
                    Err(_) => TileOutcome {
                        job_index: job.index,
                        dets: Vec::new(),
                        timing: ForwardTiming::default(),
                        elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
                        failed: true,
                    },
                }
            })
            .collect()
    });

    let t_merge = Instant::now();
    let mut inference_ms = 0.0;
    let mut polar_ms = 0.0;
    let mut failed_tiles = 0;
    let mut merged: Vec<(usize, DetectionBox)> = Vec::new();
    for o in &outcomes {
        inference_ms += o.elapsed_ms;
        polar_ms += o.timing.polar_ms;
        if o.failed {
            failed_tiles += 1;
        }
        for d in &o.dets {
            merged.push((o.job_index, d.clone()));
        }
    }
    let boxes: Vec<DetectionBox> = merged.iter().map(|(_, d)| d.clone()).collect();
    let kept = nms_indices(&boxes, model.config.nms_iou);
    let mut detections = Vec::with_capacity(kept.len());
    for &k in &kept {
        let (job_index, ref det) = merged[k];
        detections.push(DetectionRecord {
            slide_id: slide.id().to_string(),
            tile_x: jobs[job_index].x as u32,
            tile_y: jobs[job_index].y as u32,
            det: det.clone(),
        });
    }
    let top_n: Vec<DetectionBox> = detections
        .iter()
        .take(opts.top_n)
        .map(|r| r.det.clone())
        .collect();
    let merge_ms = t_merge.elapsed().as_secs_f64() * 1e3;

    Ok(SlideResult {
        slide_id: slide.id().to_string(),
        detections,
        top_n,
        timing: SlideTiming {
            plan_ms,
            inference_ms,
            polar_ms,
            merge_ms,
            wall_ms: wall.elapsed().as_secs_f64() * 1e3,
            tiles: jobs.len(),
        },
        failed_tiles,
    })
}

// ---------------------------------------------------------------------------
// Cost benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchVariant {
    pub name: String,
    pub tiles: usize,
    pub total_s: f64,
    pub avg_tile_ms: f64,
    pub backbone_ms: f64,
    pub polar_ms: f64,
    pub head_ms: f64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub variants: Vec<BenchVariant>,
}

impl CostReport {
    /// Per-tile latency delta of each variant against the first (baseline)
    /// row, as (name, delta ms, fraction of baseline).
    pub fn overhead_vs_baseline(&self) -> Vec<(String, f64, f64)> {
        let base = self.variants[0].avg_tile_ms;
        self.variants
            .iter()
            .skip(1)
            .map(|v| {
                let delta = v.avg_tile_ms - base;
                (v.name.clone(), delta, delta / base)
            })
            .collect()
    }

    pub fn format_table(&self) -> String {
        let mut s = String::new();
        let base = self.variants[0].avg_tile_ms;
        writeln!(
            s,
            "{:<28} {:>10} {:>14} {:>12} {:>12} {:>12}",
            "variant", "total s", "avg tile ms", "backbone ms", "polar ms", "head ms"
        )
        .unwrap();
        for (k, v) in self.variants.iter().enumerate() {
            let delta = if k == 0 {
                String::new()
            } else {
                format!(" ({:+.3})", v.avg_tile_ms - base)
            };
            writeln!(
                s,
                "{:<28} {:>10.3} {:>10.3}{delta:>4} {:>12.3} {:>12.3} {:>12.3}",
                v.name, v.total_s, v.avg_tile_ms, v.backbone_ms, v.polar_ms, v.head_ms
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,tiles,total_s,avg_tile_ms,backbone_ms,polar_ms,head_ms\n");
        for v in &self.variants {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                v.name, v.tiles, v.total_s, v.avg_tile_ms, v.backbone_ms, v.polar_ms, v.head_ms
            )
            .unwrap();
        }
        s
    }
}

/// Time the full per-tile inference of each model variant over the same
/// tiles. The first variant is the baseline the overhead deltas refer to.
/// Runs on the 32-bit path.
pub fn bench<T: Scalar>(
    variants: &[(String, DetectorModel<T>)],
    tiles: &[FeatureMap<T>],
    repeats: usize,
) -> Result<CostReport> {
    if variants.len() < 2 {
        return Err(Error::Parameter(
            "benchmark needs at least two variants (baseline first)".into(),
        ));
    }
    if tiles.is_empty() || repeats == 0 {
        return Err(Error::Parameter("benchmark needs tiles and repeats".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, model) in variants {
        // Warmup pass.
        for tile in tiles.iter().take(1) {
            let cache = model.forward_cache(tile)?;
            let dets = model.candidates(&cache)?;
            std::hint::black_box(model.postprocess(dets));
        }
        let mut phase = ForwardTiming::default();
        let t0 = Instant::now();
        let mut count = 0usize;
        for _ in 0..repeats {
            for tile in tiles {
                let (cache, timing) = model.forward_cache_timed(tile)?;
                let dets = model.candidates(&cache)?;
                std::hint::black_box(model.postprocess(dets));
                phase.backbone_ms += timing.backbone_ms;
                phase.polar_ms += timing.polar_ms;
                phase.head_ms += timing.head_ms;
                count += 1;
            }
        }
        let total_s = t0.elapsed().as_secs_f64();
        rows.push(BenchVariant {
            name: name.clone(),
            tiles: count,
            total_s,
            avg_tile_ms: total_s * 1e3 / count as f64,
            backbone_ms: phase.backbone_ms / count as f64,
            polar_ms: phase.polar_ms / count as f64,
            head_ms: phase.head_ms / count as f64,
        });
    }
    Ok(CostReport { variants: rows })
}

/// Re-rank a slide's merged detections by fused confidence and count how
/// many of the planted ground-truth boxes appear in the top `n`.
pub fn planted_recovery(result: &SlideResult, planted: &[DetectionBox], n: usize) -> usize {
    let mut top: Vec<&DetectionRecord> = result.detections.iter().collect();
    top.sort_by(|a, b| rank_order(&a.det, &b.det));
    let top = &top[..n.min(top.len())];
    planted
        .iter()
        .filter(|p| {
            top.iter()
                .any(|r| crate::detect::iou(&r.det, p) >= 0.3)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{format_record, fuse_confidence};
    use crate::detector::ModelConfig;
    use crate::synth::generate_mosaic;
    use std::fs;

    #[test]
    fn plan_examples() {
        let jobs = plan_tiles("s", 4096, 4096, 1024, 0).unwrap();
        assert_eq!(jobs.len(), 16);
        assert_eq!(jobs[0], TileJob { slide_id: "s".into(), x: 0, y: 0, size: 1024, index: 0 });

        let jobs = plan_tiles("s", 4097, 4096, 1024, 0).unwrap();
        assert_eq!(jobs.len(), 20, "one extra shifted column");
        assert!(jobs.iter().all(|j| j.x + j.size <= 4097 && j.y + j.size <= 4096));

        // Overlap 128 -> stride 896; count matches the closed form.
        let jobs = plan_tiles("s", 4096, 4096, 1024, 128).unwrap();
        let per_axis = ((4096 - 1024) as f64 / 896.0).ceil() as usize + 1;
        assert_eq!(jobs.len(), per_axis * per_axis);

        assert!(matches!(
            plan_tiles("s", 512, 4096, 1024, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn plan_covers_every_pixel_without_overflow() {
        for (w, h, ov) in [(2048usize, 3072usize, 0usize), (2500, 2100, 0), (2048, 2048, 128)] {
            let jobs = plan_tiles("s", w, h, 1024, ov).unwrap();
            let mut covered = vec![false; w * h];
            for j in &jobs {
                assert!(j.x + j.size <= w && j.y + j.size <= h);
                for y in j.y..j.y + j.size {
                    for x in j.x..j.x + j.size {
                        covered[y * w + x] = true;
                    }
                }
            }
            assert!(covered.iter().all(|&c| c), "gap in tile coverage for {w}x{h}");
        }
    }

    fn temp_mosaic(tag: &str, seed: u64, side: usize, planted: usize) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("polardet-wsi-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        generate_mosaic(&dir, seed, side, side, planted).unwrap();
        dir
    }

    #[test]
    fn run_slide_is_worker_count_invariant() {
        let dir = temp_mosaic("det", 5, 2048, 2);
        let slide = DirectorySlide::open(&dir).unwrap();
        let model = DetectorModel::new(
            ModelConfig {
                width: 8,
                conf_floor: 0.0,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let single = run_slide(&model, &slide, &WsiOptions { top_n: 10, workers: 1, overlap: 0 }).unwrap();
        let multi = run_slide(&model, &slide, &WsiOptions { top_n: 10, workers: 8, overlap: 0 }).unwrap();
        let dump = |r: &SlideResult| -> String {
            r.detections.iter().map(format_record).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(dump(&single), dump(&multi));
        assert_eq!(single.timing.tiles, 4);
        assert_eq!(single.failed_tiles, 0);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn top_entries_fuse_consistently_and_zero_n_is_empty() {
        let dir = temp_mosaic("fuse", 6, 2048, 2);
        let slide = DirectorySlide::open(&dir).unwrap();
        let model = DetectorModel::new(
            ModelConfig {
                width: 8,
                conf_floor: 0.0,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap();
        let res = run_slide(&model, &slide, &WsiOptions { top_n: 15, workers: 2, overlap: 0 }).unwrap();
        assert!(!res.top_n.is_empty());
        for d in &res.top_n {
            let again = fuse_confidence(d.p_obj, d.p_polar.unwrap(), model.config.alpha).unwrap();
            assert_eq!(d.fused, again, "stored fused confidence must re-derive exactly");
        }
        for w in res.top_n.windows(2) {
            assert!(w[0].fused >= w[1].fused);
        }

        let none = run_slide(&model, &slide, &WsiOptions { top_n: 0, workers: 2, overlap: 0 }).unwrap();
        assert!(none.top_n.is_empty());
        assert!(none.timing.wall_ms > 0.0);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn bench_identical_variants_have_negligible_delta() {
        let model = DetectorModel::new(
            ModelConfig {
                width: 8,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
        .to_f32();
        let tile = FeatureMap::<f32>::from_fn(1, 1024, 1024, |_, i, j| ((i * 31 + j) % 255) as f32 / 255.0);
        let variants = vec![("a".to_string(), model.clone()), ("b".to_string(), model)];
        let report = bench(&variants, &[tile], 2).unwrap();
        assert_eq!(report.variants.len(), 2);
        let overhead = report.overhead_vs_baseline();
        assert!(
            overhead[0].2.abs() < 0.5,
            "identical variants should differ only by timer noise, got {:+.1}%",
            overhead[0].2 * 100.0
        );
        assert!(!report.format_table().is_empty());
    }

    #[test]
    fn bench_requires_two_variants() {
        let model = DetectorModel::new(ModelConfig { width: 8, ..ModelConfig::default() }, 5)
            .unwrap()
            .to_f32();
        let tile = FeatureMap::<f32>::zeros(1, 1024, 1024);
        assert!(matches!(
            bench(&[("only".to_string(), model)], &[tile], 1),
            Err(Error::Parameter(_))
        ));
    }
}
