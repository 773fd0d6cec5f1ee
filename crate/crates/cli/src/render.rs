//! SVG output for planar scenes.
//!
//! Mean polytopes are clipped to the window and filled; shadow outlines come
//! from marching squares on the shadow margin; paths and tree edges are
//! drawn on top. Coordinates are printed with fixed precision so equal
//! inputs give byte-identical files.

use std::fmt::Write as _;

use eshadow::geom::{HomoVec, Point, Polyline};
use eshadow::pgdf::PgdfObstacle;
use eshadow::shadow::{shadow_boundary_2d, ObstacleShadow, ShadowError, Window};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("rendering needs a 2-D scene, got dimension {0}")]
    NotPlanar(usize),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error("no obstacle with index {0}")]
    UnknownObstacle(usize),
}

/// One outline to draw around an obstacle.
#[derive(Clone, Debug)]
pub struct ShadowLayer {
    pub obstacle: usize,
    pub eps: f64,
    /// Explicit per-face levels, as recorded in a certificate.
    pub levels: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RenderInput<'a> {
    pub obstacles: &'a [PgdfObstacle],
    pub layers: Vec<ShadowLayer>,
    pub paths: Vec<Polyline>,
    pub tree_edges: Vec<(Point, Point)>,
    pub window: Window,
    pub resolution: usize,
}

const CANVAS: f64 = 800.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Window clipped by every mean halfspace `μᵀx̃ ≤ 0`.
pub fn mean_polygon(o: &PgdfObstacle, window: &Window) -> Vec<[f64; 2]> {
    let mut poly = vec![
        [window.min[0], window.min[1]],
        [window.max[0], window.min[1]],
        [window.max[0], window.max[1]],
        [window.min[0], window.max[1]],
    ];
    for n in o.mean_faces() {
        poly = clip(&poly, &n);
        if poly.is_empty() {
            break;
        }
    }
    poly
}

fn clip(poly: &[[f64; 2]], n: &HomoVec) -> Vec<[f64; 2]> {
    let val = |p: &[f64; 2]| n[0] * p[0] + n[1] * p[1] + n[2];
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (va, vb) = (val(&a), val(&b));
        if va <= 0.0 {
            out.push(a);
        }
        if (va <= 0.0) != (vb <= 0.0) {
            let t = va / (va - vb);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

struct Canvas {
    window: Window,
    scale: f64,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(window: Window) -> Self {
        let scale = CANVAS / window.width().max(window.height());
        Self {
            window,
            scale,
            width: window.width() * scale,
            height: window.height() * scale,
        }
    }

    fn xy(&self, x: f64, y: f64) -> String {
        let px = (x - self.window.min[0]) * self.scale;
        let py = (self.window.max[1] - y) * self.scale;
        format!("{px:.3},{py:.3}")
    }

    fn points(&self, pts: impl Iterator<Item = (f64, f64)>) -> String {
        pts.map(|(x, y)| self.xy(x, y)).collect::<Vec<_>>().join(" ")
    }
}

pub fn render_svg(input: &RenderInput<'_>) -> Result<String, RenderError> {
    if let Some(o) = input.obstacles.iter().find(|o| o.dim() != 2) {
        return Err(RenderError::NotPlanar(o.dim()));
    }
    let c = Canvas::new(input.window);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.3} {:.3}">"#,
        c.width, c.height, c.width, c.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let _ = writeln!(s, r##"<g id="mean-polytopes" fill="#333333" stroke="none">"##);
    for o in input.obstacles {
        let poly = mean_polygon(o, &input.window);
        if poly.len() >= 3 {
            let _ = writeln!(
                s,
                r#"<polygon data-id="{}" points="{}"/>"#,
                escape(o.id()),
                c.points(poly.iter().map(|p| (p[0], p[1])))
            );
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="shadows" fill="none" stroke-width="1.5">"#);
    let mut eps_values: Vec<f64> = input.layers.iter().map(|l| l.eps).collect();
    eps_values.sort_by(f64::total_cmp);
    eps_values.dedup();
    for layer in &input.layers {
        let o = input
            .obstacles
            .get(layer.obstacle)
            .ok_or(RenderError::UnknownObstacle(layer.obstacle))?;
        let shadow = match &layer.levels {
            Some(qs) => ObstacleShadow::with_levels(o, layer.eps, qs),
            None if layer.eps >= 1.0 => ObstacleShadow::mean(o),
            None => ObstacleShadow::new(o, layer.eps)?,
        };
        let rank = eps_values.iter().position(|&e| e == layer.eps).unwrap_or(0);
        let colour = PALETTE[rank % PALETTE.len()];
        for line in shadow_boundary_2d(&shadow, &input.window, input.resolution)? {
            let _ = writeln!(
                s,
                r#"<polyline data-id="{}" data-eps="{:e}" stroke="{colour}" points="{}"/>"#,
                escape(o.id()),
                layer.eps,
                c.points(line.waypoints().iter().map(|p| (p.x(), p.y())))
            );
        }
    }
    let _ = writeln!(s, "</g>");

    if !input.tree_edges.is_empty() {
        let _ = writeln!(s, r##"<g id="tree" stroke="#9ecae1" stroke-width="0.7">"##);
        for (a, b) in &input.tree_edges {
            let (pa, pb) = (c.xy(a.x(), a.y()), c.xy(b.x(), b.y()));
            let (x1, y1) = pa.split_once(',').expect("pair");
            let (x2, y2) = pb.split_once(',').expect("pair");
            let _ = writeln!(s, r#"<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }

    let _ = writeln!(s, r##"<g id="paths" fill="none" stroke="#000000" stroke-width="2.5">"##);
    for p in &input.paths {
        let _ = writeln!(
            s,
            r#"<polyline points="{}"/>"#,
            c.points(p.waypoints().iter().map(|w| (w.x(), w.y())))
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use eshadow::pgdf::GaussianFace;

    fn square(var: f64) -> PgdfObstacle {
        let faces = [[1.0, 0.0, -1.0], [-1.0, 0.0, -1.0], [0.0, 1.0, -1.0], [0.0, -1.0, -1.0]]
            .iter()
            .map(|m| GaussianFace::isotropic(m, var).unwrap())
            .collect();
        PgdfObstacle::new("sq", faces).unwrap()
    }

    #[test]
    fn mean_polygon_of_square() {
        let w = Window::new([-3.0, -3.0], [3.0, 3.0]).unwrap();
        let p = mean_polygon(&square(0.0), &w);
        assert_eq!(p.len(), 4);
        for v in p {
            assert!((v[0].abs() - 1.0).abs() < 1e-12 && (v[1].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn polygon_outside_window_is_dropped() {
        let w = Window::new([5.0, 5.0], [6.0, 6.0]).unwrap();
        assert!(mean_polygon(&square(0.0), &w).is_empty());
    }

    #[test]
    fn output_is_deterministic() {
        let obs = [square(0.01)];
        let input = RenderInput {
            obstacles: &obs,
            layers: vec![ShadowLayer {
                obstacle: 0,
                eps: 0.1,
                levels: None,
            }],
            paths: vec![Polyline::new(vec![Point::xy(-2.0, -2.0), Point::xy(2.0, -2.0)]).unwrap()],
            tree_edges: vec![(Point::xy(0.0, 2.0), Point::xy(1.0, 2.5))],
            window: Window::new([-3.0, -3.0], [3.0, 3.0]).unwrap(),
            resolution: 60,
        };
        let a = render_svg(&input).unwrap();
        assert_eq!(a, render_svg(&input).unwrap());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polygon").count(), 1);
        assert_eq!(a.matches("<line ").count(), 1);
    }

    #[test]
    fn spatial_obstacles_are_rejected() {
        let o = PgdfObstacle::new("c", vec![GaussianFace::isotropic(&[1.0, 0.0, 0.0, -1.0], 0.0).unwrap()]).unwrap();
        let input = RenderInput {
            obstacles: std::slice::from_ref(&o),
            layers: vec![],
            paths: vec![],
            tree_edges: vec![],
            window: Window::new([0.0, 0.0], [1.0, 1.0]).unwrap(),
            resolution: 10,
        };
        assert!(matches!(render_svg(&input), Err(RenderError::NotPlanar(3))));
    }
}
