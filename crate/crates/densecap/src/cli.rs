//! Operator surface: dataset generation, training, evaluation, prediction,
//! hyperparameter sweep, statistics, and per-timestep box rendering. All
//! commands honor `--seed`, log the fully resolved configuration, and map
//! failures onto documented exit codes (0 ok, 1 usage/config, 2 data/io,
//! 3 numeric blow-up).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::resize_longer_side;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::generator::generate_corpus;
use crate::dataset::ppm::read_ppm;
use crate::dataset::{load_corpus, max_iou_stats, save_corpus, Scene, Vocabulary, SOS};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, predict_scene, sweep, sweep_table, Prediction};
use crate::geometry::decode_offset;
use crate::model::Model;
use crate::render::{render_overlay, render_steps, OverlayBox};
use crate::training::{finetune_with_context, train};

#[derive(Parser, Debug)]
#[command(
    name = "densecap",
    about = "Dense region captioning: synthetic data, joint training, grid-mAP evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config resolution flags shared by every command.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// config file in `section.key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// single-key override, repeatable: --set train.base_lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// start from the full-scale preset instead of the desk preset
    #[arg(long)]
    paper: bool,
    /// master seed override (run.seed)
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = if self.paper { RunConfig::paper_scale() } else { RunConfig::default() };
        self.resolve_onto(base)
    }

    /// Apply the file, `--set` overrides, and `--seed` on top of `base`
    /// (used with a checkpoint's embedded config as the base).
    fn resolve_onto(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        for s in &self.sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Usage(format!("--set wants KEY=VALUE, got '{s}'")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.generator.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test corpora with disjoint seeds plus a manifest
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// output directory (gets train/, val/, test/, vocab.txt, manifest.txt)
        #[arg(long)]
        out: PathBuf,
        /// training-split scene count; val and test each get a fifth
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Print corpus statistics (counts, overlap histogram, vocabulary)
    Stats {
        /// corpus directory (a split written by gen-data)
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model and write a checkpoint plus a loss log
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// training corpus directory
        #[arg(long)]
        data: PathBuf,
        /// output directory for model.ckpt, loss_log.txt, config.txt
        #[arg(long)]
        out: PathBuf,
        /// vocabulary file (default: <data>/vocab.txt, then <data>/../vocab.txt)
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// warm-start a context-fusion model from this context-free checkpoint
        #[arg(long)]
        from_base: Option<PathBuf>,
        /// overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint over a corpus and print the AP grid report
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// also write report.txt and predictions.txt here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline on one PPM image and write a predictions file
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// input image (P6 PPM)
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// predictions file (default: stdout only)
        #[arg(long)]
        out: Option<PathBuf>,
        /// annotated SVG overlay
        #[arg(long)]
        svg: Option<PathBuf>,
        /// resize so the longer side matches this many pixels
        /// (default: the checkpoint's training image size)
        #[arg(long)]
        longer_side: Option<usize>,
    },
    /// Grid-search proposal count and both NMS ratios on a validation corpus
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// comma-separated proposal budgets
        #[arg(long, default_value = "100,300")]
        proposals: String,
        /// comma-separated first-round NMS ratios
        #[arg(long, default_value = "0.4,0.6,0.8")]
        r1: String,
        /// comma-separated second-round NMS ratios
        #[arg(long, default_value = "0.3,0.5,0.7")]
        r2: String,
        /// write the table here as well
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one region's per-timestep box trajectory as an SVG
    RenderSteps {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// scene index within the corpus
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// proposal index after first-round NMS
        #[arg(long, default_value_t = 0)]
        proposal: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse argv and run; the binary maps the error onto an exit code.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own rich message; --help/--version land here
            let _ = e.print();
            return if e.use_stderr() {
                Err(Error::Usage("invalid arguments".into()))
            } else {
                Ok(())
            };
        }
    };
    match cli.command {
        Command::GenData { cfg, out, scenes, force } => cmd_gen_data(&cfg, &out, scenes, force),
        Command::Stats { data } => cmd_stats(&data),
        Command::Train { cfg, data, out, vocab, from_base, force } => {
            cmd_train(&cfg, &data, &out, vocab.as_deref(), from_base.as_deref(), force)
        }
        Command::Eval { cfg, checkpoint, data, vocab, out } => {
            cmd_eval(&cfg, &checkpoint, &data, vocab.as_deref(), out.as_deref())
        }
        Command::Predict { cfg, checkpoint, image, vocab, out, svg, longer_side } => cmd_predict(
            &cfg,
            &checkpoint,
            &image,
            vocab.as_deref(),
            out.as_deref(),
            svg.as_deref(),
            longer_side,
        ),
        Command::Sweep { cfg, checkpoint, data, vocab, proposals, r1, r2, out } => {
            cmd_sweep(&cfg, &checkpoint, &data, vocab.as_deref(), &proposals, &r1, &r2, out.as_deref())
        }
        Command::RenderSteps { cfg, checkpoint, data, vocab, scene, proposal, out } => {
            cmd_render_steps(&cfg, &checkpoint, &data, vocab.as_deref(), scene, proposal, &out)
        }
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for tok in vocab.tokens() {
        writeln!(f, "{tok}")?;
    }
    f.flush()?;
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    if tokens.len() < 4 {
        return Err(Error::Data(format!("vocab file {} too short", path.display())));
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// `--vocab` if given, else `<data>/vocab.txt`, else `<data>/../vocab.txt`.
fn find_vocab(explicit: Option<&Path>, data: &Path) -> Result<Vocabulary> {
    if let Some(p) = explicit {
        return load_vocab(p);
    }
    for cand in [data.join("vocab.txt"), data.join("..").join("vocab.txt")] {
        if cand.exists() {
            return load_vocab(&cand);
        }
    }
    Err(Error::Usage(format!(
        "no vocab.txt found near {} (pass --vocab)",
        data.display()
    )))
}

fn histogram_lines(scenes: &[Scene], merge_iou: f64) -> Result<String> {
    let h = max_iou_stats(scenes, merge_iou)?;
    let mut out = String::from("max-IoU histogram (per merged region, bin width 0.1):\n");
    for (i, count) in h.bins.iter().enumerate() {
        out.push_str(&format!("  [{:.1},{:.1}) {}\n", i as f64 / 10.0, (i + 1) as f64 / 10.0, count));
    }
    out.push_str(&format!("  fraction above 0.3: {:.4}\n", h.fraction_above(0.3)));
    Ok(out)
}

fn cmd_gen_data(args: &ConfigArgs, out: &Path, scenes: usize, force: bool) -> Result<()> {
    if scenes == 0 {
        return Err(Error::Usage("--scenes must be >= 1".into()));
    }
    let cfg = args.resolve()?;
    ensure_empty_dir(out, force)?;

    let side = (scenes / 5).max(1);
    let splits = [("train", scenes, 0u64), ("val", side, 1), ("test", side, 2)];
    let mut manifest = String::from("resolved config:\n");
    for line in cfg.to_text().lines() {
        manifest.push_str(&format!("  {line}\n"));
    }
    let mut train_scenes: Option<Vec<Scene>> = None;
    for (name, count, salt) in splits {
        let mut gcfg = cfg.generator.clone();
        // disjoint per-split seed streams derived from the master seed
        gcfg.seed = cfg.generator.seed.wrapping_mul(3).wrapping_add(salt);
        let corpus = generate_corpus(&gcfg, count)?;
        save_corpus(&corpus, &out.join(name))?;
        manifest.push_str(&format!("\nsplit {name}: {count} scenes, seed {}\n", gcfg.seed));
        manifest.push_str(&histogram_lines(&corpus, cfg.eval.merge_iou)?);
        if name == "train" {
            train_scenes = Some(corpus);
        }
    }

    let train_scenes = train_scenes.unwrap();
    let captions: Vec<Vec<String>> = train_scenes
        .iter()
        .flat_map(|s| s.regions.iter().flat_map(|r| r.captions.clone()))
        .collect();
    let vocab = Vocabulary::build(captions.iter().map(|c| c.as_slice()), cfg.vocab_cap)?;
    save_vocab(&vocab, &out.join("vocab.txt"))?;
    manifest.push_str(&format!("\nvocabulary: {} tokens (cap {})\n", vocab.size(), cfg.vocab_cap));
    std::fs::write(out.join("manifest.txt"), &manifest)?;
    print!("{manifest}");
    Ok(())
}

fn cmd_stats(data: &Path) -> Result<()> {
    let scenes = load_corpus(data)?;
    let regions: usize = scenes.iter().map(|s| s.regions.len()).sum();
    println!("scenes: {}", scenes.len());
    println!("regions: {regions}");
    print!("{}", histogram_lines(&scenes, 0.7)?);
    if let Ok(vocab) = find_vocab(None, data) {
        println!("vocabulary: {} tokens", vocab.size());
    }
    Ok(())
}

fn log_line(l: &crate::training::TrainLog) -> String {
    format!(
        "iter {} lr {:.6} cap {:.6} det_rpn {:.6} det_final {:.6} bbox_rpn {:.6} bbox_final {:.6} total {:.6} grad_norm {:.6}",
        l.iteration,
        l.lr,
        l.loss.cap,
        l.loss.det_rpn,
        l.loss.det_final,
        l.loss.bbox_rpn,
        l.loss.bbox_final,
        l.loss.total,
        l.grad_norm
    )
}

fn cmd_train(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    vocab_path: Option<&Path>,
    from_base: Option<&Path>,
    force: bool,
) -> Result<()> {
    let mut cfg = args.resolve()?;
    ensure_empty_dir(out, force)?;
    let scenes = load_corpus(data)?;
    let vocab = find_vocab(vocab_path, data)?;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.size();
    } else if cfg.model.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model.vocab_size {} does not match the vocabulary ({})",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }

    let mut model = match from_base {
        None => Model::new(cfg.model.clone(), cfg.seed)?,
        Some(base_path) => {
            let base_ckpt = Checkpoint::load(base_path)?;
            let base = base_ckpt.into_model()?;
            if base.cfg.vocab_size != vocab.size() {
                return Err(Error::Config("base checkpoint vocabulary size mismatch".into()));
            }
            finetune_with_context(&base, cfg.model.fusion, cfg.model.fusion_op, cfg.seed)?
        }
    };

    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    println!("resolved config written to {}", out.join("config.txt").display());

    let mut log_text = String::new();
    let train_result = train(&mut model, &scenes, &vocab, &cfg.train, |l| {
        let line = log_line(l);
        println!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
    });

    // on a NaN abort the model holds the restored last-good parameters;
    // persist them before surfacing the failure
    let iterations = cfg.train.iterations as u64;
    let ckpt = Checkpoint::from_model(cfg.clone(), iterations, &model);
    ckpt.save(&out.join("model.ckpt"))?;
    std::fs::write(out.join("loss_log.txt"), &log_text)?;
    save_vocab(&vocab, &out.join("vocab.txt"))?;
    train_result?;
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

fn load_model_and_vocab(
    checkpoint: &Path,
    vocab_path: Option<&Path>,
    data_hint: &Path,
) -> Result<(Model, Vocabulary, RunConfig)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.into_model()?;
    // checkpoints sit next to the vocab their trainer saved
    let vocab = match vocab_path {
        Some(p) => load_vocab(p)?,
        None => {
            let sibling = checkpoint.parent().map(|d| d.join("vocab.txt"));
            match sibling {
                Some(p) if p.exists() => load_vocab(&p)?,
                _ => find_vocab(None, data_hint)?,
            }
        }
    };
    if vocab.size() != model.cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary ({}) does not match checkpoint vocab_size ({})",
            vocab.size(),
            model.cfg.vocab_size
        )));
    }
    Ok((model, vocab, ckpt.config))
}

fn prediction_lines(id: &str, preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&format!(
            "{id} {:.2} {:.2} {:.2} {:.2} {:.6} {}\n",
            p.bbox.x1,
            p.bbox.y1,
            p.bbox.x2,
            p.bbox.y2,
            p.confidence,
            p.caption.join(" ")
        ));
    }
    out
}

fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    vocab_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (model, vocab, ckpt_cfg) = load_model_and_vocab(checkpoint, vocab_path, data)?;
    // evaluation settings come from the checkpoint, then CLI overrides
    let cfg = args.resolve_onto(ckpt_cfg)?;
    let scenes = load_corpus(data)?;
    let report = evaluate(&model, &scenes, &vocab, &cfg.eval)?;
    let text = format!("{}{}", report.table(), report.machine_lines());
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &text)?;
        let mut preds = String::new();
        for (i, scene_preds) in report.predictions.iter().enumerate() {
            preds.push_str(&prediction_lines(&format!("scene_{i:06}"), scene_preds));
        }
        std::fs::write(dir.join("predictions.txt"), preds)?;
        println!("report and predictions written to {}", dir.display());
    }
    Ok(())
}

fn cmd_predict(
    args: &ConfigArgs,
    checkpoint: &Path,
    image_path: &Path,
    vocab_path: Option<&Path>,
    out: Option<&Path>,
    svg: Option<&Path>,
    longer_side: Option<usize>,
) -> Result<()> {
    let parent = image_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (model, vocab, ckpt_cfg) = load_model_and_vocab(checkpoint, vocab_path, &parent)?;
    let cfg = args.resolve_onto(ckpt_cfg)?;
    let eval_cfg = cfg.eval.clone();

    let image = read_ppm(image_path)?;
    let target = longer_side.unwrap_or(cfg.generator.image_size);
    let (resized, scale) = resize_longer_side(&image, target)?;
    let scene = Scene { image: resized, regions: Vec::new(), theme: None };
    let (mut preds, counts) = predict_scene(&model, &scene, &vocab, &eval_cfg)?;
    // map boxes back to the original pixel grid
    for p in &mut preds {
        p.bbox.x1 /= scale;
        p.bbox.y1 /= scale;
        p.bbox.x2 /= scale;
        p.bbox.y2 /= scale;
    }
    let id = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let text = prediction_lines(id, &preds);
    print!("{text}");
    eprintln!(
        "proposals {} predictions {} dropped_empty {} dropped_degenerate {}",
        counts.proposals, counts.predictions, counts.dropped_empty_caption, counts.dropped_degenerate_box
    );
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    if let Some(path) = svg {
        let palette = ["lime", "yellow", "cyan", "magenta", "orange", "white"];
        let boxes: Vec<OverlayBox> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| OverlayBox {
                bbox: crate::geometry::BBox {
                    x1: p.bbox.x1 * scale,
                    y1: p.bbox.y1 * scale,
                    x2: p.bbox.x2 * scale,
                    y2: p.bbox.y2 * scale,
                },
                label: format!("{:.2} {}", p.confidence, p.caption.join(" ")),
                color: palette[i % palette.len()].to_string(),
            })
            .collect();
        std::fs::write(path, render_overlay(&scene.image, &boxes)?)?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Usage(format!("bad {what} list '{s}'"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    args: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    vocab_path: Option<&Path>,
    proposals: &str,
    r1: &str,
    r2: &str,
    out: Option<&Path>,
) -> Result<()> {
    let (model, vocab, ckpt_cfg) = load_model_and_vocab(checkpoint, vocab_path, data)?;
    let base = args.resolve_onto(ckpt_cfg)?.eval;
    let scenes = load_corpus(data)?;
    let (entries, best) = sweep(
        &model,
        &scenes,
        &vocab,
        &base,
        &parse_list(proposals, "proposal")?,
        &parse_list(r1, "nms_r1")?,
        &parse_list(r2, "nms_r2")?,
    )?;
    let table = sweep_table(&entries, &best);
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, &table)?;
    }
    Ok(())
}

fn cmd_render_steps(
    args: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    vocab_path: Option<&Path>,
    scene_idx: usize,
    proposal_idx: usize,
    out: &Path,
) -> Result<()> {
    let (model, vocab, ckpt_cfg) = load_model_and_vocab(checkpoint, vocab_path, data)?;
    let cfg = args.resolve_onto(ckpt_cfg)?;
    let scenes = load_corpus(data)?;
    let scene = scenes
        .get(scene_idx)
        .ok_or_else(|| Error::Usage(format!("scene index {scene_idx} out of range")))?;

    use crate::backbone::{foreground_probs, propose};
    use crate::geometry::generate_anchors;
    use crate::model::DOWNSAMPLE;
    let (img_h, img_w) = (scene.height() as f64, scene.width() as f64);
    let mut fwd = model.fwd(false);
    let fm = fwd.backbone(&scene.image)?;
    let rpn = fwd.rpn(&fm)?;
    let anchors = generate_anchors(&model.cfg.anchors, fm.height, fm.width, DOWNSAMPLE);
    let fg = foreground_probs(fwd.g.value(rpn.cls));
    let reg = fwd.g.value(rpn.reg).to_vec();
    let props = propose(&fg, &reg, &anchors, img_w, img_h, cfg.eval.proposals, cfg.eval.nms_r1)?;
    let pbox = *props
        .boxes
        .get(proposal_idx)
        .ok_or_else(|| Error::Usage(format!("proposal index {proposal_idx} out of range ({} proposals)", props.boxes.len())))?;

    let context = match model.cfg.fusion {
        crate::model::Fusion::None => None,
        _ => Some(fwd.region_feature(&fm, &crate::geometry::BBox::new(0.0, 0.0, img_w, img_h)?)?),
    };
    let feat = fwd.region_feature(&fm, &pbox)?;
    let dec = fwd.decode(feat, context)?;

    let step_boxes: Vec<_> = dec
        .step_offsets
        .iter()
        .map(|off| {
            decode_offset(off, &pbox)
                .ok()
                .and_then(|b| b.clip(img_w, img_h))
                .unwrap_or(pbox)
        })
        .collect();
    let mut step_tokens = vec![vocab.decode(SOS).to_string()];
    for t in 1..step_boxes.len() {
        step_tokens.push(vocab.decode(dec.words[t - 1]).to_string());
    }
    let caption: Vec<String> = dec.words.iter().map(|&w| vocab.decode(w).to_string()).collect();
    let svg = render_steps(&scene.image, &step_boxes, &step_tokens, &caption.join(" "))?;
    std::fs::write(out, svg)?;
    println!(
        "wrote {} ({} steps, caption: {})",
        out.display(),
        step_boxes.len(),
        caption.join(" ")
    );
    Ok(())
}
