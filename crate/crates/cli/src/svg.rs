use std::fmt::Write as _;

use raqg_core::data::Scene;
use raqg_core::geometry::BBox;
use raqg_core::model::Inference;

/// Detections at or below this score are left out of the drawing.
pub const SCORE_CUTOFF: f64 = 0.3;
const SIZE: f64 = 512.0;

fn rect(out: &mut String, b: BBox, style: &str) {
    let c = b.to_corners();
    let _ = writeln!(
        out,
        r#"  <rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
        c.x1 * SIZE,
        c.y1 * SIZE,
        (c.x2 - c.x1) * SIZE,
        (c.y2 - c.y1) * SIZE
    );
}

/// Ground truth as outlines, query anchors as center dots, confident
/// detections as filled outlines and the query count as a caption.
pub fn render(scene: &Scene, inference: &Inference) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{h}" viewBox="0 0 {SIZE} {h}">"#,
        h = SIZE + 32.0
    );
    let _ = writeln!(out, r##"  <rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="#f4f4f4" stroke="#000"/>"##);
    for &b in &scene.boxes {
        rect(&mut out, b, r##"fill="none" stroke="#1a7f37" stroke-width="2""##);
    }
    for d in inference.detections.iter().filter(|d| d.score > SCORE_CUTOFF) {
        rect(&mut out, d.bbox, r##"fill="#cf222e" fill-opacity="0.15" stroke="#cf222e" stroke-width="1.5""##);
    }
    for a in &inference.anchors {
        let _ = writeln!(
            out,
            r##"  <circle cx="{:.2}" cy="{:.2}" r="3" fill="#0969da"/>"##,
            a.cx * SIZE,
            a.cy * SIZE
        );
    }
    let _ = writeln!(
        out,
        r#"  <text x="8" y="{:.0}" font-family="monospace" font-size="16">scene {}: X = {} queries, {} objects</text>"#,
        SIZE + 22.0,
        scene.id,
        inference.query_count,
        scene.boxes.len()
    );
    out.push_str("</svg>\n");
    out
}
