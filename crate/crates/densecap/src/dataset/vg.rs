//! Visual-Genome-format region-description ingestion: a JSON file with, per
//! image, a list of {x, y, width, height, phrase} records, plus a directory
//! of P6 PPM images named `<image_id>.ppm`.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::{ppm, tokenize, RegionAnnotation, Scene};

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LoadStats {
    pub scenes_loaded: usize,
    pub regions_loaded: usize,
    pub dropped_long: usize,
    pub dropped_degenerate: usize,
    pub skipped_malformed: usize,
    pub skipped_missing_image: usize,
}

/// Parse one raw region record; None when malformed or policy-dropped.
fn parse_region(
    rec: &Value,
    img_w: f64,
    img_h: f64,
    max_caption_len: usize,
    stats: &mut LoadStats,
) -> Option<RegionAnnotation> {
    let get = |k: &str| rec.get(k).and_then(Value::as_f64);
    let (x, y, w, h) = match (get("x"), get("y"), get("width"), get("height")) {
        (Some(x), Some(y), Some(w), Some(h)) => (x, y, w, h),
        _ => {
            stats.skipped_malformed += 1;
            return None;
        }
    };
    let Some(phrase) = rec.get("phrase").and_then(Value::as_str) else {
        stats.skipped_malformed += 1;
        return None;
    };
    let tokens = tokenize(phrase);
    if tokens.is_empty() {
        stats.skipped_malformed += 1;
        return None;
    }
    if tokens.len() > max_caption_len {
        stats.dropped_long += 1;
        return None;
    }
    let raw = match BBox::new(x, y, x + w, y + h) {
        Ok(b) => b,
        Err(_) => {
            stats.dropped_degenerate += 1;
            return None;
        }
    };
    let Some(bbox) = raw.clip(img_w, img_h) else {
        stats.dropped_degenerate += 1;
        return None;
    };
    Some(RegionAnnotation { bbox, captions: vec![tokens], ambiguous: false })
}

/// Load scenes from a Visual-Genome-format region file. Malformed records
/// are skipped with a tally; scenes with missing images are skipped.
pub fn load_vg_regions(
    regions_path: &Path,
    images_dir: &Path,
    max_caption_len: usize,
) -> Result<(Vec<Scene>, LoadStats)> {
    let raw = std::fs::read_to_string(regions_path)
        .map_err(|e| Error::Data(format!("{}: {e}", regions_path.display())))?;
    let doc: Value = serde_json::from_str(&raw)
        .map_err(|e| Error::Data(format!("{}: {e}", regions_path.display())))?;
    let Some(images) = doc.as_array() else {
        return Err(Error::Data("regions file: top level must be an array".into()));
    };

    let mut stats = LoadStats::default();
    let mut scenes = Vec::new();
    for img in images {
        let id = img
            .get("id")
            .or_else(|| img.get("image_id"))
            .and_then(Value::as_u64);
        let Some(id) = id else {
            stats.skipped_malformed += 1;
            continue;
        };
        let image_path = images_dir.join(format!("{id}.ppm"));
        let image = match ppm::read_ppm(&image_path) {
            Ok(t) => t,
            Err(_) => {
                stats.skipped_missing_image += 1;
                continue;
            }
        };
        let (img_h, img_w) = (image.shape[1] as f64, image.shape[2] as f64);
        let mut regions = Vec::new();
        if let Some(recs) = img.get("regions").and_then(Value::as_array) {
            for rec in recs {
                if let Some(r) = parse_region(rec, img_w, img_h, max_caption_len, &mut stats) {
                    regions.push(r);
                }
            }
        }
        stats.regions_loaded += regions.len();
        stats.scenes_loaded += 1;
        scenes.push(Scene { image, regions, theme: None });
    }
    Ok((scenes, stats))
}
