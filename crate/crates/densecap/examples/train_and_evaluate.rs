//! End-to-end miniature run: generate scenes, train a small model for a few
//! hundred iterations, then score it with the grid-mAP evaluator and render
//! one region's per-timestep box trajectory.

use densecap::dataset::generator::{generate_corpus, GeneratorConfig};
use densecap::dataset::Vocabulary;
use densecap::evaluation::{evaluate, teacher_forced_accuracy, EvalConfig};
use densecap::model::{Model, ModelConfig, Variant};
use densecap::training::{train, TrainConfig};

fn main() -> densecap::Result<()> {
    let gen = GeneratorConfig { seed: 11, min_objects: 1, max_objects: 2, ..Default::default() };
    let scenes = generate_corpus(&gen, 6)?;
    let captions: Vec<Vec<String>> = scenes
        .iter()
        .flat_map(|s| s.regions.iter().flat_map(|r| r.captions.clone()))
        .collect();
    let vocab = Vocabulary::build(captions.iter().map(|c| c.as_slice()), 1000)?;

    let mut mcfg = ModelConfig::desk(vocab.size());
    mcfg.variant = Variant::Baseline;
    mcfg.hidden = 32;
    mcfg.backbone_channels = [4, 8, 16, 32];
    mcfg.rpn_channels = 32;
    let mut model = Model::new(mcfg, 11)?;

    let tcfg = TrainConfig {
        iterations: 400,
        base_lr: 0.05,
        log_every: 100,
        seed: 11,
        ..TrainConfig::desk()
    };
    train(&mut model, &scenes, &vocab, &tcfg, |l| {
        println!(
            "iter {:>4} lr {:.4} cap {:.4} total {:.4} |g| {:.3}",
            l.iteration, l.lr, l.loss.cap, l.loss.total, l.grad_norm
        );
    })?;

    let acc = teacher_forced_accuracy(&model, &scenes, &vocab, 0.7)?;
    println!("teacher-forced next-word accuracy: {:.3}", acc);

    let report = evaluate(&model, &scenes, &vocab, &EvalConfig::default())?;
    print!("{}", report.table());
    println!(
        "proposals {} predictions {}",
        report.counts.proposals, report.counts.predictions
    );
    Ok(())
}
