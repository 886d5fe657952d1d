//! Context fusion and warm starts: a late-fusion model built from a
//! context-free base starts as an exact functional copy (the fusion path
//! contributes its operation's identity element), so fine-tuning begins
//! from the base model's behavior.

use densecap::dataset::generator::{generate_corpus, GeneratorConfig};
use densecap::model::{Fusion, FusionOp, Model, ModelConfig, Variant};
use densecap::training::finetune_with_context;

fn main() -> densecap::Result<()> {
    let gen = GeneratorConfig { seed: 5, ambiguity_fraction: 0.5, ..Default::default() };
    let scene = &generate_corpus(&gen, 1)?[0];

    let mut mcfg = ModelConfig::desk(24);
    mcfg.variant = Variant::TLstm;
    mcfg.hidden = 32;
    mcfg.backbone_channels = [4, 8, 16, 32];
    mcfg.rpn_channels = 32;
    let base = Model::new(mcfg, 9)?;

    for op in [FusionOp::Sum, FusionOp::Mul, FusionOp::Concat] {
        let fused = finetune_with_context(&base, Fusion::Late, op, 9)?;

        // decode the same region with both models
        let run = |m: &Model| -> densecap::Result<(Vec<usize>, f64)> {
            let mut fwd = m.fwd(false);
            let fm = fwd.backbone(&scene.image)?;
            let region = &scene.regions[0].bbox;
            let ctx_box = densecap::geometry::BBox::new(
                0.0,
                0.0,
                scene.width() as f64,
                scene.height() as f64,
            )?;
            let context = match m.cfg.fusion {
                Fusion::None => None,
                _ => Some(fwd.region_feature(&fm, &ctx_box)?),
            };
            let feat = fwd.region_feature(&fm, region)?;
            let dec = fwd.decode(feat, context)?;
            Ok((dec.words, dec.word_log_prob))
        };
        let (wb, lb) = run(&base)?;
        let (wf, lf) = run(&fused)?;
        println!(
            "op {:?}: base words {:?} (logp {:.9}) fused words {:?} (logp {:.9})",
            op, wb, lb, wf, lf
        );
        assert_eq!(wb, wf, "warm start must reproduce the base decode");
        assert!((lb - lf).abs() < 1e-9);
    }
    println!("all warm starts reproduce the context-free base exactly");
    Ok(())
}
