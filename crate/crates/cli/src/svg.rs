//! Layered SVG rendering of a decomposition. Each layer is one `<g>` with a
//! fixed id so outputs can be diffed layer by layer.

use std::fmt::Write;

use korn_core::decompose::PiecewiseDecomposition;
use korn_core::field::DisplacementField;
use korn_core::geometry::{Aabb, Point};
use korn_core::grid::EdgeCuts;

const SIZE: f64 = 800.0;

struct Frame {
    min: Point,
    scale: f64,
}

impl Frame {
    fn x(&self, p: f64) -> f64 {
        (p - self.min.x) * self.scale
    }

    fn y(&self, p: f64) -> f64 {
        SIZE - (p - self.min.y) * self.scale
    }

    fn rect(&self, out: &mut String, b: &Aabb, attrs: &str) {
        let _ = writeln!(
            out,
            r#"    <rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" {attrs}/>"#,
            self.x(b.min.x),
            self.y(b.max.y),
            b.width() * self.scale,
            b.height() * self.scale
        );
    }

    fn move_line(&self, d: &mut String, a: Point, b: Point) {
        let _ = write!(d, "M{:.3} {:.3}L{:.3} {:.3}", self.x(a.x), self.y(a.y), self.x(b.x), self.y(b.y));
    }
}

fn gray(generation: u32) -> String {
    let v = (60 + 30 * generation).min(220);
    format!("rgb({v},{v},{v})")
}

pub fn render(u: &DisplacementField, d: &PiecewiseDecomposition) -> String {
    let dom = u.domain();
    let f = Frame { min: dom.min, scale: SIZE / dom.width() };
    let g = u.geom();
    let h = u.h;
    let cell = |i: usize| {
        let c = g.center_of(i);
        Aabb::centered(c, 0.5 * h)
    };
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    out.push_str(concat!(
        "  <defs>\n",
        r#"    <pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">"#,
        "\n",
        r#"      <line x1="0" y1="0" x2="0" y2="6" stroke="purple" stroke-width="1.5"/>"#,
        "\n    </pattern>\n  </defs>\n"
    ));
    let _ = writeln!(out, r#"  <rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#);

    out.push_str("  <g id=\"covering\" fill=\"none\" stroke-width=\"0.5\">\n");
    if let Some(cov) = &d.covering {
        for s in &cov.squares {
            f.rect(&mut out, &s.square.bounds(), &format!(r#"stroke="{}" data-generation="{}""#, gray(s.square.generation), s.square.generation));
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"z\" fill=\"url(#hatch)\" stroke=\"none\">\n");
    if let Some(cov) = &d.covering {
        for z in &cov.z {
            for &(ix, iy) in &z.cells {
                f.rect(&mut out, &cov.grid.square(cov.fine_generation, ix, iy).bounds(), "");
            }
        }
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"exceptional\" fill=\"blue\" fill-opacity=\"0.5\" stroke=\"none\">\n");
    for i in d.e.indices() {
        f.rect(&mut out, &cell(i), "");
    }
    out.push_str("  </g>\n");

    let cuts = EdgeCuts::from_labels(g.nx, g.ny, &d.labels);
    let mut path = String::new();
    for y in 0..g.ny {
        for x in 0..g.nx {
            let b = cell(g.idx(x, y));
            if x + 1 < g.nx && cuts.cut_right(x, y) {
                f.move_line(&mut path, Point::new(b.max.x, b.min.y), b.max);
            }
            if y + 1 < g.ny && cuts.cut_up(x, y) {
                f.move_line(&mut path, Point::new(b.min.x, b.max.y), b.max);
            }
        }
    }
    out.push_str("  <g id=\"pieces\" fill=\"none\" stroke=\"black\" stroke-width=\"1\">\n");
    if !path.is_empty() {
        let _ = writeln!(out, r#"    <path d="{path}"/>"#);
    }
    out.push_str("  </g>\n");

    out.push_str("  <g id=\"jumps\" stroke=\"red\" stroke-width=\"1.5\">\n");
    for s in u.jumps.iter() {
        let _ = writeln!(
            out,
            r#"    <line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
            f.x(s.a.x),
            f.y(s.a.y),
            f.x(s.b.x),
            f.y(s.b.y)
        );
    }
    out.push_str("  </g>\n</svg>\n");
    out
}
