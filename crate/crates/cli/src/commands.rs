//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polardet::detect::{write_records, DetectionBox};
use polardet::detector::{train, DetectorModel, ModelConfig, TrainConfig};
use polardet::eval::{
    ap_over_images, per_class_ap, sweep_alpha, topn_accuracy, write_line_chart_svg, write_pr_csv,
    write_sweep_csv, ApOutcome,
};
use polardet::oracle;
use polardet::synth::{build_dataset, generate_mosaic, read_manifest, DatasetCounts, Split};
use polardet::tensor::FeatureMap;
use polardet::wsi::{bench, run_slide, DirectorySlide, SlideSource, WsiOptions};
use polardet::detect::ObjectClass;

use crate::common::*;
use crate::config::RunConfig;

pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let counts = DatasetCounts {
        train: cfg.usize("train")?,
        val: cfg.usize("val")?,
        test_gc: cfg.usize("test_gc")?,
        test_nc: cfg.usize("test_nc")?,
        test_fp: cfg.usize("test_fp")?,
    };
    let entries = build_dataset(out_dir, &counts, cfg.u64("seed")?, cfg.f64("difficulty")?)?;
    let positives: usize = entries.iter().map(|e| e.annotations.len()).sum();
    println!(
        "wrote {} tiles ({} annotated objects) under {}",
        entries.len(),
        positives,
        out_dir.display()
    );
    println!("manifest: {}", out_dir.join("manifest.txt").display());
    Ok(())
}

pub fn cmd_gen_mosaic(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let side = cfg.usize("side")?;
    let planted = cfg.usize("planted")?;
    let truth = generate_mosaic(out_dir, cfg.u64("seed")?, side, side, planted)?;
    println!(
        "wrote {side}x{side} mosaic with {} planted objects under {}",
        truth.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn model_config_from(cfg: &RunConfig) -> Result<ModelConfig> {
    Ok(ModelConfig {
        stage: cfg.u64("stage")? as u32,
        width: cfg.usize("width")?,
        alpha: cfg.f64("alpha")?,
        use_polar: cfg.bool("polar")?,
        border: parse_border(cfg.str("border")?)?,
        nms_iou: cfg.f64("nms_iou")?,
        conf_floor: cfg.f64("conf_floor")?,
        max_detections: cfg.usize("max_detections")?,
    })
}

pub fn train_config_from(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.usize("epochs")?,
        base_lr: cfg.f64("lr")?,
        decay: cfg.f64("decay")?,
        milestones: cfg.list_usize("milestones")?,
        batch_size: cfg.usize("batch_size")?,
        seed: cfg.u64("seed")?,
        polar_loss_weight: cfg.f64("polar_weight")?,
    })
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let manifest = PathBuf::from(cfg.str("manifest")?);
    let entries = read_manifest(&manifest)?;
    let root = manifest_root(&manifest);
    let mut model = DetectorModel::new(model_config_from(cfg)?, cfg.u64("seed")?)?;
    let tcfg = train_config_from(cfg)?;

    let log = train(&mut model, &root, &entries, &tcfg)?;
    let ckpt = out_dir.join("model.ckpt");
    model.save(&ckpt)?;
    let mut log_file = fs::File::create(out_dir.join("train-log.csv"))?;
    log.write_to(&mut log_file)?;
    for e in &log.epochs {
        println!(
            "epoch {:>3}  lr {:.1e}  obj {:.4}  box {:.4}  cls {:.4}  polar {:.4}  val-ap50 {:.4}",
            e.epoch, e.lr, e.objectness, e.boxes, e.class, e.polar, e.val_ap50
        );
    }
    println!(
        "best val AP50 {:.4} at epoch {}; checkpoint {}",
        log.best_val_ap50,
        log.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn headline_ap(images: &[polardet::eval::ImageEval], iou: f64) -> String {
    match ap_over_images(images, iou) {
        ApOutcome::Curve(c) => format!("{:.4}", c.ap),
        ApOutcome::NoAnnotations => "n/a (no annotations)".to_string(),
    }
}

pub fn cmd_eval(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let iou = cfg.f64("iou")?;
    let (images, label) = if let Some(preds) = cfg.opt_str("preds") {
        let ann_path = PathBuf::from(cfg.str("ann")?);
        let entries = read_manifest(&ann_path)?;
        let file = fs::File::open(preds).with_context(|| format!("opening {preds}"))?;
        let records = polardet::detect::read_records(std::io::BufReader::new(file))?;
        (images_from_dump(&records, &entries), preds.to_string())
    } else {
        let manifest = PathBuf::from(cfg.str("manifest")?);
        let entries = read_manifest(&manifest)?;
        let root = manifest_root(&manifest);
        let split = parse_split(cfg.str("split")?)?;
        let sources = parse_sources(cfg.str("sources")?)?;
        let selected = select_entries(&entries, split, Some(&sources));
        if selected.is_empty() {
            bail!("no manifest entries match split/sources");
        }
        let model = DetectorModel::load(&PathBuf::from(cfg.str("ckpt")?))?;
        let (images, records) = infer_entries(&model, &root, &selected)?;
        let mut dump = fs::File::create(out_dir.join("detections.txt"))?;
        write_records(&mut dump, &records)?;
        (images, format!("{} tiles", selected.len()))
    };

    println!("evaluating {label}");
    println!("AP{:.0}: {}", iou * 100.0, headline_ap(&images, iou));
    for extra in [0.5, 0.6, 0.7] {
        if (extra - iou).abs() > 1e-9 {
            println!("AP{:.0}: {}", extra * 100.0, headline_ap(&images, extra));
        }
    }
    for class in [ObjectClass::Agc, ObjectClass::Ngec] {
        let ap = match per_class_ap(&images, class, iou) {
            ApOutcome::Curve(c) => format!("{:.4}", c.ap),
            ApOutcome::NoAnnotations => "n/a".into(),
        };
        println!("AP{:.0} [{}]: {}", iou * 100.0, class.as_str(), ap);
    }
    if let ApOutcome::Curve(curve) = ap_over_images(&images, iou) {
        let csv = out_dir.join("pr-curve.csv");
        write_pr_csv(&csv, &curve)?;
        write_line_chart_svg(
            &out_dir.join("pr-curve.svg"),
            &format!("precision-recall @ IoU {iou}"),
            "recall",
            "precision",
            &[("model".to_string(), curve.points.clone())],
        )?;
        println!("PR curve: {}", csv.display());
    }
    Ok(())
}

pub fn cmd_sweep_alpha(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let manifest = PathBuf::from(cfg.str("manifest")?);
    let entries = read_manifest(&manifest)?;
    let root = manifest_root(&manifest);
    let split = parse_split(cfg.str("split")?)?;
    let sources = parse_sources(cfg.str("sources")?)?;
    let selected = select_entries(&entries, split, Some(&sources));
    if selected.is_empty() {
        bail!("no manifest entries match split/sources");
    }
    let model = DetectorModel::load(&PathBuf::from(cfg.str("ckpt")?))?;
    if !model.config.use_polar {
        bail!("alpha sweep needs a checkpoint trained with the polar module");
    }
    let (images, _) = infer_entries(&model, &root, &selected)?;
    let alphas = cfg.list_f64("alphas")?;
    let rows = sweep_alpha(&images, &alphas, cfg.f64("iou")?)?;
    println!("{:>6}  {:>8}", "alpha", "AP50");
    for &(a, ap) in &rows {
        println!("{a:>6.2}  {ap:>8.4}");
    }
    write_sweep_csv(&out_dir.join("alpha-sweep.csv"), ("alpha", "ap50"), &rows)?;
    write_line_chart_svg(
        &out_dir.join("alpha-sweep.svg"),
        "fusion weight vs AP50",
        "alpha",
        "AP50",
        &[("AP50".to_string(), rows.clone())],
    )?;
    let peak = rows
        .iter()
        .cloned()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, r| if r.1 > acc.1 { r } else { acc });
    println!("peak AP50 {:.4} at alpha {:.2}", peak.1, peak.0);
    Ok(())
}

pub fn cmd_sweep_scale(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let manifest = PathBuf::from(cfg.str("manifest")?);
    let entries = read_manifest(&manifest)?;
    let root = manifest_root(&manifest);
    let stages = cfg.list_usize("stages")?;
    let sources = parse_sources(cfg.str("sources")?)?;
    let selected = select_entries(&entries, Split::Test, Some(&sources));
    if selected.is_empty() {
        bail!("no test entries match the requested sources");
    }

    let mut rows = Vec::new();
    for &stage in &stages {
        let mut model_cfg = model_config_from(cfg)?;
        model_cfg.stage = stage as u32;
        let mut model = DetectorModel::new(model_cfg, cfg.u64("seed")?)?;
        let tcfg = train_config_from(cfg)?;
        let log = train(&mut model, &root, &entries, &tcfg)?;
        let (images, _) = infer_entries(&model, &root, &selected)?;
        let ap = ap_over_images(&images, 0.5).ap().unwrap_or(0.0);
        println!(
            "stage {stage} (x{}): test AP50 {ap:.4} (best val {:.4})",
            1 << stage,
            log.best_val_ap50
        );
        model.save(&out_dir.join(format!("model-stage{stage}.ckpt")))?;
        rows.push((stage as f64, ap));
    }
    write_sweep_csv(&out_dir.join("scale-sweep.csv"), ("stage", "ap50"), &rows)?;
    println!("{:>6}  {:>8}", "stage", "AP50");
    for &(s, ap) in &rows {
        println!("{s:>6.0}  {ap:>8.4}");
    }
    Ok(())
}

pub fn cmd_infer_wsi(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let model = DetectorModel::load(&PathBuf::from(cfg.str("ckpt")?))?;
    let slide_dir = PathBuf::from(cfg.str("slide")?);
    let slide = DirectorySlide::open(&slide_dir)?;
    let opts = WsiOptions {
        top_n: cfg.usize("top_n")?,
        workers: cfg.usize("workers")?,
        overlap: cfg.usize("overlap")?,
    };
    let result = run_slide(&model, &slide, &opts)?;

    let mut dump = fs::File::create(out_dir.join("detections.txt"))?;
    write_records(&mut dump, &result.detections)?;

    #[derive(serde::Serialize)]
    struct TopEntry<'a> {
        rank: usize,
        #[serde(flatten)]
        det: &'a DetectionBox,
    }
    #[derive(serde::Serialize)]
    struct TopList<'a> {
        slide: &'a str,
        results: Vec<TopEntry<'a>>,
    }
    let top = TopList {
        slide: &result.slide_id,
        results: result
            .top_n
            .iter()
            .enumerate()
            .map(|(k, det)| TopEntry { rank: k + 1, det })
            .collect(),
    };
    fs::write(out_dir.join("topn.json"), serde_json::to_string_pretty(&top)?)?;

    let t = &result.timing;
    fs::write(
        out_dir.join("timing.csv"),
        format!(
            "stage,ms\nplan,{:.3}\ninference,{:.3}\npolar,{:.3}\nmerge,{:.3}\nwall,{:.3}\n",
            t.plan_ms, t.inference_ms, t.polar_ms, t.merge_ms, t.wall_ms
        ),
    )?;
    println!(
        "slide {}: {} tiles, {} detections, {} failed tiles, wall {:.1} ms",
        result.slide_id,
        t.tiles,
        result.detections.len(),
        result.failed_tiles,
        t.wall_ms
    );
    if result.failed_tiles > 0 {
        println!("warning: partial coverage ({} failed tiles)", result.failed_tiles);
    }
    for (k, d) in result.top_n.iter().enumerate() {
        println!(
            "top {:>2}: ({:7.1},{:7.1}) {:5.1}x{:5.1} {} fused {:.4}",
            k + 1,
            d.cx,
            d.cy,
            d.w,
            d.h,
            d.class_id.as_str(),
            d.fused
        );
    }
    println!("outputs under {}", out_dir.display());
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let model = DetectorModel::load(&PathBuf::from(cfg.str("ckpt")?))?;
    if !model.config.use_polar {
        bail!("bench expects a polar checkpoint; the baseline variant is derived from it");
    }
    let slide_dir = PathBuf::from(cfg.str("slide")?);
    let slide = DirectorySlide::open(&slide_dir)?;
    let max_tiles = cfg.usize("tiles")?;
    let repeats = cfg.usize("repeats")?;

    // The benchmark path runs in 32-bit.
    let with_polar = model.to_f32();
    let mut baseline = with_polar.clone();
    baseline.polar = None;
    baseline.config.use_polar = false;

    let (w, h) = slide.dims();
    let jobs = polardet::wsi::plan_tiles(slide.id(), w, h, 1024, 0)?;
    let tiles: Result<Vec<FeatureMap<f32>>> = jobs
        .iter()
        .take(max_tiles)
        .map(|j| {
            let region = slide.read_region(j.x, j.y, j.size, j.size)?;
            Ok(region.map_precision::<f32>())
        })
        .collect();
    let tiles = tiles?;

    let report = bench(
        &[
            ("baseline".to_string(), baseline),
            ("with-polar".to_string(), with_polar),
        ],
        &tiles,
        repeats,
    )?;
    print!("{}", report.format_table());
    for (name, delta_ms, frac) in report.overhead_vs_baseline() {
        println!("{name}: +{delta_ms:.3} ms per tile ({:+.1}% of baseline)", frac * 100.0);
    }
    fs::write(out_dir.join("cost.csv"), report.to_csv())?;
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.u64("seed")?;
    let polar_err = oracle::polar_gradcheck(seed, 3);
    println!("polar module max relative gradient error: {polar_err:.3e}");
    let full_err = oracle::detector_gradcheck(seed, true);
    println!("full detector max relative gradient error: {full_err:.3e}");
    let worst = polar_err.max(full_err);
    println!("max relative gradient error: {worst:.3e}");
    if worst >= 1e-5 {
        bail!("gradient check failed: {worst:.3e} >= 1e-5");
    }
    println!("gradient check passed");
    Ok(())
}

pub fn cmd_oracle_check(cfg: &RunConfig) -> Result<()> {
    let report = oracle::run_oracle_suite(cfg.u64("seed")?);
    println!("score matrix vs nested-loop oracle, max |dev|: {:.3e}", report.pas_max_dev);
    println!("weighted features vs oracle, max |dev|:       {:.3e}", report.feature_max_dev);
    println!(
        "1x1 convolution bitwise equal to oracle:       {}",
        report.project_bitwise
    );
    println!("NMS mismatches vs quadratic oracle:            {}", report.nms_mismatches);
    println!("matching mismatches vs naive protocol:         {}", report.match_mismatches);
    println!("AP vs direct enumeration, max |dev|:          {:.3e}", report.ap_max_dev);
    if !report.passed() {
        bail!("oracle check failed");
    }
    println!("oracle check passed");
    Ok(())
}

/// Helper reused by the acceptance experiments: balanced top-N accuracy of
/// ranked per-tile detections against ground truth.
pub fn tile_topn(images: &[polardet::eval::ImageEval], n: usize, iou: f64) -> Result<f64> {
    let mut accs = Vec::new();
    for img in images {
        let m = polardet::eval::match_detections(&img.preds, &img.annotations, iou);
        let truth: Vec<bool> = m.ranked.iter().map(|p| p.is_tp).collect();
        if truth.is_empty() {
            continue;
        }
        accs.push(topn_accuracy(&truth, n)?);
    }
    if accs.is_empty() {
        bail!("no tiles with detections");
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}
