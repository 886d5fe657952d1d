//! SVG rendering: scene rasters with box overlays. Images are embedded as
//! base64 PNG so the output is a single self-contained file. The step view
//! draws one box per decode step on a brightness ramp with a legend naming
//! the token fed at each step, which makes the box-refinement trajectory of
//! the joint decoder visible.

use base64::Engine;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Encode a [3,H,W] tensor (values clamped to [0,1]) as a base64 PNG string.
pub fn tensor_to_png_base64(image: &Tensor) -> Result<String> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::Shape(format!("render wants [3,H,W], got {:?}", image.shape)));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let plane = h * w;
    let mut rgb = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((image.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut png = Vec::new();
    {
        use image::codecs::png::PngEncoder;
        use image::ImageEncoder;
        PngEncoder::new(&mut png)
            .write_image(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    }
    Ok(base64::engine::general_purpose::STANDARD.encode(&png))
}

/// An annotated box for the overlay view.
#[derive(Debug, Clone)]
pub struct OverlayBox {
    pub bbox: BBox,
    pub label: String,
    /// CSS color for the stroke
    pub color: String,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const SCALE: usize = 6;

fn svg_open(w: usize, h: usize, legend_rows: usize) -> String {
    let vw = w * SCALE;
    let vh = h * SCALE + legend_rows * 16 + if legend_rows > 0 { 8 } else { 0 };
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{vw}\" height=\"{vh}\" \
         viewBox=\"0 0 {vw} {vh}\" font-family=\"monospace\" font-size=\"12\">\n"
    )
}

fn svg_image(b64: &str, w: usize, h: usize) -> String {
    format!(
        "  <image href=\"data:image/png;base64,{b64}\" x=\"0\" y=\"0\" width=\"{}\" \
         height=\"{}\" image-rendering=\"pixelated\"/>\n",
        w * SCALE,
        h * SCALE
    )
}

fn svg_rect(b: &BBox, color: &str, width: f64) -> String {
    let s = SCALE as f64;
    format!(
        "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" \
         stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
        b.x1 * s,
        b.y1 * s,
        (b.x2 - b.x1) * s,
        (b.y2 - b.y1) * s
    )
}

/// Final predictions (or ground truth) drawn over the scene raster.
pub fn render_overlay(image: &Tensor, boxes: &[OverlayBox]) -> Result<String> {
    let (h, w) = (image.shape[1], image.shape[2]);
    let b64 = tensor_to_png_base64(image)?;
    let mut svg = svg_open(w, h, boxes.len());
    svg.push_str(&svg_image(&b64, w, h));
    for b in boxes {
        svg.push_str(&svg_rect(&b.bbox, &b.color, 2.0));
    }
    let base = h * SCALE + 16;
    for (i, b) in boxes.iter().enumerate() {
        svg.push_str(&format!(
            "  <text x=\"4\" y=\"{}\" fill=\"{}\">{}</text>\n",
            base + i * 16,
            b.color,
            esc(&b.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Brightness ramp from dark red (first step) to full red (last step).
fn step_color(step: usize, total: usize) -> String {
    let t = if total <= 1 { 1.0 } else { step as f64 / (total - 1) as f64 };
    let v = (80.0 + t * 175.0).round() as u8;
    format!("rgb({v},32,32)")
}

/// The per-step box trajectory of one region: one box per decode step, on a
/// brightness ramp, with a legend naming the token fed at each step (the
/// first entry is the start-of-sequence token). `step_boxes` and
/// `step_tokens` must have equal length.
pub fn render_steps(
    image: &Tensor,
    step_boxes: &[BBox],
    step_tokens: &[String],
    final_caption: &str,
) -> Result<String> {
    if step_boxes.len() != step_tokens.len() {
        return Err(Error::Usage(format!(
            "step boxes ({}) and tokens ({}) must align",
            step_boxes.len(),
            step_tokens.len()
        )));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let b64 = tensor_to_png_base64(image)?;
    let mut svg = svg_open(w, h, step_boxes.len() + 1);
    svg.push_str(&svg_image(&b64, w, h));
    let total = step_boxes.len();
    for (i, b) in step_boxes.iter().enumerate() {
        svg.push_str(&svg_rect(b, &step_color(i, total), if i + 1 == total { 3.0 } else { 1.5 }));
    }
    let base = h * SCALE + 16;
    for (i, tok) in step_tokens.iter().enumerate() {
        svg.push_str(&format!(
            "  <text x=\"4\" y=\"{}\" fill=\"{}\">step {i}: fed {}</text>\n",
            base + i * 16,
            step_color(i, total),
            esc(tok)
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"4\" y=\"{}\" fill=\"black\">caption: {}</text>\n",
        base + step_tokens.len() * 16,
        esc(final_caption)
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_svg_has_one_rect_per_step_and_legend_rows() {
        let img = Tensor::filled(&[3, 16, 16], 0.3);
        let boxes = vec![
            BBox { x1: 1.0, y1: 1.0, x2: 8.0, y2: 8.0 },
            BBox { x1: 2.0, y1: 2.0, x2: 9.0, y2: 9.0 },
            BBox { x1: 2.5, y1: 2.5, x2: 9.5, y2: 9.5 },
        ];
        let toks = vec!["<sos>".to_string(), "red".to_string(), "circle".to_string()];
        let svg = render_steps(&img, &boxes, &toks, "red circle").unwrap();
        assert_eq!(svg.matches("<rect").count(), 3);
        assert_eq!(svg.matches("fed").count(), 3);
        assert!(svg.contains("&lt;sos&gt;"));
        assert!(svg.contains("data:image/png;base64,"));
        assert!(render_steps(&img, &boxes, &toks[..2].to_vec(), "x").is_err());
    }

    #[test]
    fn overlay_escapes_labels() {
        let img = Tensor::filled(&[3, 16, 16], 0.3);
        let boxes = vec![OverlayBox {
            bbox: BBox { x1: 0.0, y1: 0.0, x2: 4.0, y2: 4.0 },
            label: "a <b> & c".into(),
            color: "lime".into(),
        }];
        let svg = render_overlay(&img, &boxes).unwrap();
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
    }

    #[test]
    fn png_rejects_bad_shape() {
        assert!(tensor_to_png_base64(&Tensor::filled(&[1, 4, 4], 0.0)).is_err());
    }
}
