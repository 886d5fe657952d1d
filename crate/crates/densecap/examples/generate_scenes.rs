//! Generate a small synthetic corpus, print its overlap statistics, and
//! write one scene to disk as PPM plus an annotated SVG overlay.

use densecap::dataset::generator::{generate_corpus, GeneratorConfig};
use densecap::dataset::{max_iou_stats, ppm};
use densecap::render::{render_overlay, OverlayBox};

fn main() -> densecap::Result<()> {
    let cfg = GeneratorConfig { seed: 42, ambiguity_fraction: 0.3, ..Default::default() };
    let scenes = generate_corpus(&cfg, 25)?;

    let regions: usize = scenes.iter().map(|s| s.regions.len()).sum();
    println!("{} scenes, {} regions", scenes.len(), regions);
    for r in &scenes[0].regions {
        println!(
            "  [{:5.1} {:5.1} {:5.1} {:5.1}] {}{}",
            r.bbox.x1,
            r.bbox.y1,
            r.bbox.x2,
            r.bbox.y2,
            r.captions[0].join(" "),
            if r.ambiguous { "  (ambiguous)" } else { "" }
        );
    }

    let hist = max_iou_stats(&scenes, 0.7)?;
    println!("max-IoU bins: {:?}", hist.bins);
    println!("fraction above 0.3: {:.3}", hist.fraction_above(0.3));

    let out = std::env::temp_dir().join("densecap_example");
    std::fs::create_dir_all(&out)?;
    ppm::write_ppm(&scenes[0].image, &out.join("scene.ppm"))?;
    let boxes: Vec<OverlayBox> = scenes[0]
        .regions
        .iter()
        .map(|r| OverlayBox {
            bbox: r.bbox,
            label: r.captions[0].join(" "),
            color: "lime".into(),
        })
        .collect();
    std::fs::write(out.join("scene.svg"), render_overlay(&scenes[0].image, &boxes)?)?;
    println!("wrote {}/scene.ppm and scene.svg", out.display());
    Ok(())
}
