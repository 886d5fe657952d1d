//! Run configuration: a merged view of the generator, model, training,
//! and evaluation settings, read from a diff-friendly line-oriented text
//! format (`section.key = value`). Unknown keys are hard errors.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::generator::GeneratorConfig;
use crate::dataset::Theme;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// master seed; commands derive their streams from it
    pub seed: u64,
    /// vocabulary size cap when building from data
    pub vocab_cap: usize,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            vocab_cap: 1000,
            generator: GeneratorConfig::default(),
            // vocab_size 0 = resolve from the corpus vocabulary at load time
            model: ModelConfig {
                vocab_size: 0,
                ..ModelConfig::desk(0)
            },
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reference-scale settings (hidden 512, 10k vocabulary, 600K
    /// iterations, momentum 0.98, eval 300/0.7/0.3).
    pub fn paper_scale() -> Self {
        RunConfig {
            seed: 0,
            vocab_cap: 10000,
            generator: GeneratorConfig::default(),
            model: ModelConfig { vocab_size: 0, ..ModelConfig::paper_scale(0) },
            train: TrainConfig::paper_scale(),
            eval: EvalConfig::default(),
        }
    }

    /// Parse the line format on top of `self`, consuming overrides.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'section.key = value'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply one `section.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',')
                .map(|p| num::<f64>(key, p.trim()))
                .collect::<Result<Vec<f64>>>()
        }
        match key {
            "run.seed" => self.seed = num(key, value)?,
            "run.vocab_cap" => self.vocab_cap = num(key, value)?,

            "generator.image_size" => self.generator.image_size = num(key, value)?,
            "generator.min_objects" => self.generator.min_objects = num(key, value)?,
            "generator.max_objects" => self.generator.max_objects = num(key, value)?,
            "generator.overlap_pressure" => self.generator.overlap_pressure = num(key, value)?,
            "generator.ambiguity_fraction" => self.generator.ambiguity_fraction = num(key, value)?,
            "generator.seed" => self.generator.seed = num(key, value)?,
            "generator.forced_theme" => {
                self.generator.forced_theme = match value {
                    "none" => None,
                    "meadow" => Some(Theme::Meadow),
                    "cave" => Some(Theme::Cave),
                    _ => return Err(Error::Config(format!("bad theme '{value}'"))),
                }
            }

            "model.variant" => self.model.variant = value.parse()?,
            "model.fusion" => self.model.fusion = value.parse()?,
            "model.fusion_op" => self.model.fusion_op = value.parse()?,
            "model.hidden" => self.model.hidden = num(key, value)?,
            "model.vocab_size" => self.model.vocab_size = num(key, value)?,
            "model.max_steps" => self.model.max_steps = num(key, value)?,
            "model.backbone_channels" => {
                let v = list(key, value)?;
                if v.len() != 4 || v.iter().any(|&x| x < 1.0 || x.fract() != 0.0) {
                    return Err(Error::Config("backbone_channels wants 4 integers".into()));
                }
                for (i, x) in v.iter().enumerate() {
                    self.model.backbone_channels[i] = *x as usize;
                }
            }
            "model.rpn_channels" => self.model.rpn_channels = num(key, value)?,
            "model.roi_pool" => self.model.roi_pool = num(key, value)?,
            "model.anchor_scales" => self.model.anchors.scales = list(key, value)?,
            "model.anchor_ratios" => self.model.anchors.aspect_ratios = list(key, value)?,

            "train.iterations" => self.train.iterations = num(key, value)?,
            "train.base_lr" => self.train.base_lr = num(key, value)?,
            "train.lr_halving_interval" => self.train.lr_halving_interval = num(key, value)?,
            "train.momentum" => self.train.momentum = num(key, value)?,
            "train.clip_norm" => self.train.clip_norm = num(key, value)?,
            "train.sample_boxes" => self.train.sample_boxes = num(key, value)?,
            "train.pos_iou" => self.train.pos_iou = num(key, value)?,
            "train.neg_iou" => self.train.neg_iou = num(key, value)?,
            "train.train_proposals" => self.train.train_proposals = num(key, value)?,
            "train.proposal_nms" => self.train.proposal_nms = num(key, value)?,
            "train.region_budget" => self.train.region_budget = num(key, value)?,
            "train.alpha" => self.train.loss.alpha = num(key, value)?,
            "train.beta" => self.train.loss.beta = num(key, value)?,
            "train.log_every" => self.train.log_every = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,

            "eval.proposals" => self.eval.proposals = num(key, value)?,
            "eval.nms_r1" => self.eval.nms_r1 = num(key, value)?,
            "eval.nms_r2" => self.eval.nms_r2 = num(key, value)?,
            "eval.merge_iou" => self.eval.merge_iou = num(key, value)?,
            "eval.iou_thresholds" => self.eval.iou_thresholds = list(key, value)?,
            "eval.sim_thresholds" => self.eval.sim_thresholds = list(key, value)?,

            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Render every key in the line format (the full resolved config that
    /// commands log for reproducibility).
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("run.seed", self.seed.to_string());
        kv("run.vocab_cap", self.vocab_cap.to_string());
        kv("generator.image_size", self.generator.image_size.to_string());
        kv("generator.min_objects", self.generator.min_objects.to_string());
        kv("generator.max_objects", self.generator.max_objects.to_string());
        kv("generator.overlap_pressure", self.generator.overlap_pressure.to_string());
        kv("generator.ambiguity_fraction", self.generator.ambiguity_fraction.to_string());
        kv("generator.seed", self.generator.seed.to_string());
        kv(
            "generator.forced_theme",
            match self.generator.forced_theme {
                None => "none".into(),
                Some(Theme::Meadow) => "meadow".into(),
                Some(Theme::Cave) => "cave".into(),
            },
        );
        kv("model.variant", self.model.variant.to_string());
        kv("model.fusion", self.model.fusion.to_string());
        kv("model.fusion_op", self.model.fusion_op.to_string());
        kv("model.hidden", self.model.hidden.to_string());
        kv("model.vocab_size", self.model.vocab_size.to_string());
        kv("model.max_steps", self.model.max_steps.to_string());
        kv(
            "model.backbone_channels",
            self.model
                .backbone_channels
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("model.rpn_channels", self.model.rpn_channels.to_string());
        kv("model.roi_pool", self.model.roi_pool.to_string());
        kv("model.anchor_scales", join(&self.model.anchors.scales));
        kv("model.anchor_ratios", join(&self.model.anchors.aspect_ratios));
        kv("train.iterations", self.train.iterations.to_string());
        kv("train.base_lr", self.train.base_lr.to_string());
        kv("train.lr_halving_interval", self.train.lr_halving_interval.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.clip_norm", self.train.clip_norm.to_string());
        kv("train.sample_boxes", self.train.sample_boxes.to_string());
        kv("train.pos_iou", self.train.pos_iou.to_string());
        kv("train.neg_iou", self.train.neg_iou.to_string());
        kv("train.train_proposals", self.train.train_proposals.to_string());
        kv("train.proposal_nms", self.train.proposal_nms.to_string());
        kv("train.region_budget", self.train.region_budget.to_string());
        kv("train.alpha", self.train.loss.alpha.to_string());
        kv("train.beta", self.train.loss.beta.to_string());
        kv("train.log_every", self.train.log_every.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("eval.proposals", self.eval.proposals.to_string());
        kv("eval.nms_r1", self.eval.nms_r1.to_string());
        kv("eval.nms_r2", self.eval.nms_r2.to_string());
        kv("eval.merge_iou", self.eval.merge_iou.to_string());
        kv("eval.iou_thresholds", join(&self.eval.iou_thresholds));
        kv("eval.sim_thresholds", join(&self.eval.sim_thresholds));
        s
    }
}
