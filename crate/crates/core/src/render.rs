//! SVG rendering of a layout over its canvas.

use std::fmt::Write as _;
use std::io::Cursor;

use base64::Engine as _;

use crate::data::{canvas_to_image, Canvas, CategorySchema, Layout};

/// Category colors, indexed by `category - 1` and cycled past the end.
pub const PALETTE: [&str; 8] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324",
];

pub fn category_color(category: u32) -> &'static str {
    PALETTE[(category.max(1) as usize - 1) % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn png_base64(canvas: &Canvas) -> String {
    let mut buf = Cursor::new(Vec::new());
    canvas_to_image(canvas)
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory png encoding");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

/// SVG 1.1 document: the canvas as an embedded PNG, one translucent
/// `rect` per element and a legend of the categories present, drawn with
/// circles so `rect` nodes map one-to-one to elements. Output bytes depend
/// only on the inputs.
pub fn render_svg(canvas: &Canvas, layout: &Layout, schema: &CategorySchema) -> String {
    let (w, h) = (canvas.width as f64, canvas.height as f64);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<image x="0" y="0" width="{w}" height="{h}" xlink:href="data:image/png;base64,{}"/>"#,
        png_base64(canvas)
    );
    for e in &layout.elements {
        let b = e.bbox;
        let name = schema.name(e.category).unwrap_or("unknown");
        let color = category_color(e.category);
        let _ = writeln!(
            s,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{color}" fill-opacity="0.35" stroke="{color}" stroke-width="1" data-category="{}"/>"#,
            b.left() * w,
            b.top() * h,
            b.w * w,
            b.h * h,
            escape(name)
        );
    }
    let mut present: Vec<u32> = layout.categories();
    present.sort_unstable();
    present.dedup();
    if !present.is_empty() {
        let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="9">"#);
        for (i, &c) in present.iter().enumerate() {
            let y = 8.0 + 12.0 * i as f64;
            let name = escape(schema.name(c).unwrap_or("unknown"));
            let color = category_color(c);
            let _ = writeln!(s, r#"<circle cx="8" cy="{y}" r="4" fill="{color}"/>"#);
            let _ = writeln!(s, r#"<text x="15" y="{}" fill="{color}">{name}</text>"#, y + 3.0);
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Element;

    #[test]
    fn empty_layout_is_canvas_only() {
        let svg = render_svg(&Canvas::filled(4, 6, [0.5; 3]), &Layout::default(), &CategorySchema::pku());
        assert!(svg.contains("<image"));
        assert!(!svg.contains("<rect"));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn one_rect_per_element_and_stable_bytes() {
        let l = Layout::new(vec![
            Element::new(1, 0.5, 0.5, 0.2, 0.2),
            Element::new(2, 0.3, 0.2, 0.4, 0.1),
            Element::new(2, 0.6, 0.8, 0.4, 0.1),
        ]);
        let c = Canvas::filled(24, 16, [0.1, 0.2, 0.3]);
        let svg = render_svg(&c, &l, &CategorySchema::pku());
        assert_eq!(svg.matches("<rect").count(), 3);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg, render_svg(&c, &l, &CategorySchema::pku()));
    }

    #[test]
    fn palette_is_fixed() {
        assert_eq!(category_color(1), "#e6194b");
        assert_eq!(category_color(9), category_color(1));
    }
}
