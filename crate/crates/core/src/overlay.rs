//! Debug SVG: plan raster with segments, crossings, symbol boxes and derived
//! edges drawn on top.

use std::fmt::Write as _;

use base64::Engine as _;
use image::ImageEncoder as _;

use crate::crossings::LineCrossing;
use crate::lines::LineSegment;
use crate::plan::PlanImage;
use crate::topology::TopologyGraph;

const STYLE: &str = "\
.segment{stroke:#1f77b4;stroke-width:2;opacity:.8}
.crossing{stroke:#000;stroke-width:1}
.crossing.connective{fill:#2ca02c}
.crossing.non-connective{fill:#d62728}
.symbol{fill:none;stroke:#ff7f0e;stroke-width:2}
.edge{fill:none;stroke:#9467bd;stroke-width:2;stroke-dasharray:6 3}
text{font:10px sans-serif;fill:#ff7f0e}";

fn png_base64(plan: &PlanImage) -> String {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(plan.pixels(), plan.width(), plan.height(), image::ExtendedColorType::L8)
        .expect("encoding an in-memory grayscale image");
    base64::engine::general_purpose::STANDARD.encode(buf)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the overlay. Crossings are styled `connective` or
/// `non-connective` and carry their degree.
pub fn render_overlay(
    plan: &PlanImage,
    segments: &[LineSegment],
    crossings: &[LineCrossing],
    graph: &TopologyGraph,
) -> String {
    let (w, h) = (plan.width(), plan.height());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<style>\n{STYLE}\n</style>");
    let _ = writeln!(
        s,
        r#"<image id="plan" x="0" y="0" width="{w}" height="{h}" href="data:image/png;base64,{}"/>"#,
        png_base64(plan)
    );

    s.push_str("<g id=\"segments\">\n");
    for seg in segments {
        let _ = writeln!(
            s,
            r#"<line class="segment" id="{}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
            esc(&seg.id),
            seg.p1.x,
            seg.p1.y,
            seg.p2.x,
            seg.p2.y
        );
    }
    s.push_str("</g>\n<g id=\"symbols\">\n");
    for n in &graph.nodes {
        let b = &n.bbox;
        let _ = writeln!(
            s,
            r#"<rect class="symbol" id="{}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
            esc(&n.id),
            b.x_min,
            b.y_min,
            b.width(),
            b.height()
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, b.x_min, (b.y_min - 2.0).max(8.0), esc(&n.id));
    }
    s.push_str("</g>\n<g id=\"edges\">\n");
    for (a, b) in &graph.edges {
        let (Some(na), Some(nb)) = (graph.nodes.iter().find(|n| &n.id == a), graph.nodes.iter().find(|n| &n.id == b))
        else {
            continue;
        };
        let (pa, pb) = (na.bbox.center(), nb.bbox.center());
        let _ = writeln!(
            s,
            r#"<path class="edge" data-from="{}" data-to="{}" d="M {:.2} {:.2} L {:.2} {:.2}"/>"#,
            esc(a),
            esc(b),
            pa.x,
            pa.y,
            pb.x,
            pb.y
        );
    }
    s.push_str("</g>\n<g id=\"crossings\">\n");
    for c in crossings {
        let class = if c.connective { "connective" } else { "non-connective" };
        let _ = writeln!(
            s,
            r#"<circle class="crossing {class}" id="{}" data-degree="{}" cx="{:.2}" cy="{:.2}" r="4"/>"#,
            esc(&c.id),
            c.degree,
            c.at.x,
            c.at.y
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}
