//! Scenes, captions, vocabulary, ground-truth merging, and dataset
//! statistics. Synthetic generation lives in [`generator`], Visual-Genome
//! ingestion in [`vg`], raster I/O in [`ppm`].

pub mod generator;
pub mod ppm;
pub mod vg;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{merge_groups, BBox};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
const NUM_SPECIALS: usize = 4;

/// Background theme of a synthetic scene; the global context signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Theme {
    Meadow,
    Cave,
}

/// A box with one or more reference captions (multiple after GT merge).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub bbox: BBox,
    pub captions: Vec<Vec<String>>,
    /// Synthetic instrumentation: true when the correct caption depends on
    /// the scene theme rather than the region pixels.
    pub ambiguous: bool,
}

/// An image plus its annotated regions.
#[derive(Debug, Clone)]
pub struct Scene {
    /// [3, H, W] values in [0,1]
    pub image: Tensor,
    pub regions: Vec<RegionAnnotation>,
    pub theme: Option<Theme>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape[2]
    }
}

/// Frequency-capped token table with reserved special ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Rank tokens by frequency (ties lexicographic), keep at most `cap`.
    pub fn build<'a>(captions: impl Iterator<Item = &'a [String]>, cap: usize) -> Result<Self> {
        if cap < 1 {
            return Err(Error::Config("vocab cap must be >= 1".into()));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in captions {
            for tok in caption {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Data("empty corpus: no tokens for vocabulary".into()));
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap);

        let mut id_to_token: Vec<String> =
            ["<PAD>", "<UNK>", "<SOS>", "<EOS>"].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Token id, or UNK for out-of-vocabulary tokens.
    pub fn encode(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode_caption(&self, caption: &[String]) -> Vec<usize> {
        caption.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuild from an id-ordered token list (the vocab-file format). The
    /// first four entries must be the special tokens.
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }
}

/// Merge regions whose boxes form connected components under IoU >
/// `merge_iou`: box = coordinate-wise mean, captions = union of member
/// captions (duplicates removed, order preserved).
pub fn merge_ground_truth(regions: &[RegionAnnotation], merge_iou: f64) -> Vec<RegionAnnotation> {
    let boxes: Vec<BBox> = regions.iter().map(|r| r.bbox).collect();
    let groups = merge_groups(&boxes, merge_iou);
    groups
        .into_iter()
        .map(|members| {
            let n = members.len() as f64;
            let bbox = BBox {
                x1: members.iter().map(|&i| boxes[i].x1).sum::<f64>() / n,
                y1: members.iter().map(|&i| boxes[i].y1).sum::<f64>() / n,
                x2: members.iter().map(|&i| boxes[i].x2).sum::<f64>() / n,
                y2: members.iter().map(|&i| boxes[i].y2).sum::<f64>() / n,
            };
            let mut captions: Vec<Vec<String>> = Vec::new();
            for &i in &members {
                for c in &regions[i].captions {
                    if !captions.contains(c) {
                        captions.push(c.clone());
                    }
                }
            }
            let ambiguous = members.iter().any(|&i| regions[i].ambiguous);
            RegionAnnotation { bbox, captions, ambiguous }
        })
        .collect()
}

/// Per-region maximum IoU against other post-merge regions in the same
/// scene, binned at 0.1 resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaxIouHistogram {
    pub bins: [usize; 10],
    pub total: usize,
}

impl MaxIouHistogram {
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let first = (threshold * 10.0).round() as usize;
        let above: usize = self.bins[first..].iter().sum();
        above as f64 / self.total as f64
    }
}

pub fn max_iou_stats(scenes: &[Scene], merge_iou: f64) -> Result<MaxIouHistogram> {
    if scenes.is_empty() {
        return Err(Error::Usage("max_iou_stats on empty corpus".into()));
    }
    let mut hist = MaxIouHistogram::default();
    for scene in scenes {
        let merged = merge_ground_truth(&scene.regions, merge_iou);
        for (i, r) in merged.iter().enumerate() {
            let max_iou = merged
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| crate::geometry::iou(&r.bbox, &o.bbox))
                .fold(0.0f64, f64::max);
            let bin = ((max_iou * 10.0).floor() as usize).min(9);
            hist.bins[bin] += 1;
            hist.total += 1;
        }
    }
    Ok(hist)
}

// ---- corpus on disk -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RegionRecord {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    /// captions as space-joined token strings
    captions: Vec<String>,
    #[serde(default)]
    ambiguous: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    theme: Option<Theme>,
    regions: Vec<RegionRecord>,
}

/// Write scenes as `scenes.jsonl` plus one PPM (P6) raster per scene.
pub fn save_corpus(scenes: &[Scene], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = std::io::BufWriter::new(std::fs::File::create(dir.join("scenes.jsonl"))?);
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:06}.ppm");
        ppm::write_ppm(&scene.image, &dir.join(&name))?;
        let rec = SceneRecord {
            image: name,
            theme: scene.theme,
            regions: scene
                .regions
                .iter()
                .map(|r| RegionRecord {
                    x1: r.bbox.x1,
                    y1: r.bbox.y1,
                    x2: r.bbox.x2,
                    y2: r.bbox.y2,
                    captions: r.captions.iter().map(|c| c.join(" ")).collect(),
                    ambiguous: r.ambiguous,
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Data(format!("serialize scene record: {e}")))?;
        writeln!(index, "{line}")?;
    }
    Ok(())
}

/// Load a corpus written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Vec<Scene>> {
    let index = std::fs::File::open(dir.join("scenes.jsonl"))
        .map_err(|e| Error::Data(format!("open {}/scenes.jsonl: {e}", dir.display())))?;
    let mut scenes = Vec::new();
    for line in std::io::BufReader::new(index).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("bad scene record: {e}")))?;
        let image = ppm::read_ppm(&dir.join(&rec.image))?;
        let mut regions = Vec::with_capacity(rec.regions.len());
        for r in rec.regions {
            let bbox = BBox::new(r.x1, r.y1, r.x2, r.y2)
                .map_err(|e| Error::Data(format!("bad region box: {e}")))?;
            let captions = r
                .captions
                .iter()
                .map(|c| c.split_whitespace().map(str::to_string).collect())
                .collect();
            regions.push(RegionAnnotation { bbox, captions, ambiguous: r.ambiguous });
        }
        scenes.push(Scene { image, regions, theme: rec.theme });
    }
    Ok(scenes)
}

/// Lowercase, strip ASCII punctuation, split on whitespace.
pub fn tokenize(phrase: &str) -> Vec<String> {
    phrase
        .to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}
