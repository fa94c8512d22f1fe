//! Shared plumbing for the subcommands: manifest-driven inference and
//! conversions between detection dumps and evaluation inputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polardet::detect::DetectionRecord;
use polardet::detector::DetectorModel;
use polardet::eval::ImageEval;
use polardet::polar::BorderMode;
use polardet::synth::{load_tile_pixels, ManifestEntry, SourceTag, Split};

/// Filter manifest entries by split and (optionally) sources.
pub fn select_entries<'a>(
    entries: &'a [ManifestEntry],
    split: Split,
    sources: Option<&[SourceTag]>,
) -> Vec<&'a ManifestEntry> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .filter(|e| sources.map_or(true, |s| s.contains(&e.source)))
        .collect()
}

pub fn parse_sources(s: &str) -> Result<Vec<SourceTag>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| SourceTag::parse(t.trim()).map_err(Into::into))
        .collect()
}

pub fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).map_err(Into::into)
}

pub fn parse_border(s: &str) -> Result<BorderMode> {
    match s {
        "zero" => Ok(BorderMode::Zero),
        "replicate" => Ok(BorderMode::Replicate),
        other => bail!("border mode must be zero|replicate, got '{other}'"),
    }
}

/// Run tile inference over selected manifest entries. Returns per-tile
/// evaluation inputs plus dump records keyed by the tile path.
pub fn infer_entries(
    model: &DetectorModel<f64>,
    root: &Path,
    entries: &[&ManifestEntry],
) -> Result<(Vec<ImageEval>, Vec<DetectionRecord>)> {
    use rayon::prelude::*;
    let results: Result<Vec<(ImageEval, Vec<DetectionRecord>)>> = entries
        .par_iter()
        .map(|e| {
            let tile = load_tile_pixels::<f64>(&root.join(&e.path))
                .with_context(|| format!("loading {}", e.path))?;
            let preds = model.infer_tile(&tile)?;
            let records = preds
                .iter()
                .map(|d| DetectionRecord {
                    slide_id: e.path.clone(),
                    tile_x: 0,
                    tile_y: 0,
                    det: d.clone(),
                })
                .collect();
            Ok((
                ImageEval {
                    preds,
                    annotations: e.annotations.clone(),
                },
                records,
            ))
        })
        .collect();
    let mut images = Vec::new();
    let mut records = Vec::new();
    for (img, recs) in results? {
        images.push(img);
        records.extend(recs);
    }
    Ok((images, records))
}

/// Pair a prediction dump with manifest ground truth by tile path.
pub fn images_from_dump(records: &[DetectionRecord], entries: &[ManifestEntry]) -> Vec<ImageEval> {
    entries
        .iter()
        .map(|e| ImageEval {
            preds: records
                .iter()
                .filter(|r| r.slide_id == e.path)
                .map(|r| r.det.clone())
                .collect(),
            annotations: e.annotations.clone(),
        })
        .collect()
}

pub fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}
