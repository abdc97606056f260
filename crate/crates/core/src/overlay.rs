//! Visual inspection of corners, triangulation edges and a mask over an image.

use std::fmt::Write;

use crate::delaunay::{unique_edges, Point2, Triangulation};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

const POINT_RGB: [f32; 3] = [0.0, 1.0, 0.0];
const EDGE_RGB: [f32; 3] = [1.0, 0.85, 0.0];
const MASK_RGB: [f32; 3] = [1.0, 0.0, 0.0];
const MASK_ALPHA: f32 = 0.4;
const MARKER_RADIUS: f64 = 3.0;

pub struct OverlayInput<'a> {
    pub image: &'a Image,
    pub points: &'a [Point2],
    pub triangulation: Option<&'a Triangulation>,
    pub mask: Option<&'a Mask>,
}

impl OverlayInput<'_> {
    fn check(&self) -> Result<()> {
        if let Some(m) = self.mask {
            if (m.height(), m.width()) != (self.image.height(), self.image.width()) {
                return Err(Error::Shape(format!(
                    "overlay mask {}x{} vs image {}x{}",
                    m.height(),
                    m.width(),
                    self.image.height(),
                    self.image.width()
                )));
            }
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
}

impl Canvas {
    fn put(&mut self, y: i64, x: i64, color: [f32; 3]) {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return;
        }
        let i = y as usize * self.w + x as usize;
        for c in 0..3 {
            self.rgb[c * self.h * self.w + i] = color[c];
        }
    }

    fn line(&mut self, a: Point2, b: Point2, color: [f32; 3]) {
        let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(y0, x0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn ring(&mut self, p: Point2, r: f64, color: [f32; 3]) {
        let reach = r.ceil() as i64 + 1;
        let (cx, cy) = (p.0.round() as i64, p.1.round() as i64);
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                let d = (((x - cx).pow(2) + (y - cy).pow(2)) as f64).sqrt();
                if (d - r).abs() <= 0.5 {
                    self.put(y, x, color);
                }
            }
        }
    }
}

/// Raster overlay: the image in gray or color, the mask blended in red, edges
/// as yellow lines and points as green rings.
pub fn overlay_image(input: &OverlayInput<'_>) -> Result<Image> {
    input.check()?;
    let img = input.image;
    let (h, w) = (img.height(), img.width());
    let mut rgb = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        rgb.extend_from_slice(img.plane(if img.channels() == 3 { c } else { 0 }));
    }
    let mut canvas = Canvas { h, w, rgb };
    if let Some(mask) = input.mask {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                for c in 0..3 {
                    let v = &mut canvas.rgb[c * h * w + i];
                    *v = (1.0 - MASK_ALPHA) * *v + MASK_ALPHA * MASK_RGB[c];
                }
            }
        }
    }
    if let Some(t) = input.triangulation {
        for (a, b) in unique_edges(t) {
            canvas.line(t.points[a], t.points[b], EDGE_RGB);
        }
    }
    for &p in input.points {
        canvas.ring(p, MARKER_RADIUS, POINT_RGB);
    }
    Image::from_planar(h, w, 3, canvas.rgb)
}

/// Vector overlay with one `<circle>` per point, one `<line>` per edge and
/// one `<rect>` per mask run.
pub fn overlay_svg(input: &OverlayInput<'_>) -> Result<String> {
    input.check()?;
    let (h, w) = (input.image.height(), input.image.width());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#202020"/>"##);
    if let Some(mask) = input.mask {
        let _ = writeln!(s, r##"<g fill="#ff0000" fill-opacity="{MASK_ALPHA}">"##);
        for y in 0..h {
            let mut x = 0;
            while x < w {
                if mask.at(y, x) == 1 {
                    let start = x;
                    while x < w && mask.at(y, x) == 1 {
                        x += 1;
                    }
                    let _ = writeln!(
                        s,
                        r#"<rect x="{start}" y="{y}" width="{}" height="1"/>"#,
                        x - start
                    );
                } else {
                    x += 1;
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }
    if let Some(t) = input.triangulation {
        let _ = writeln!(s, r##"<g stroke="#ffd900" stroke-width="1">"##);
        for (a, b) in unique_edges(t) {
            let (p, q) = (t.points[a], t.points[b]);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"#,
                p.0, p.1, q.0, q.1
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r##"<g fill="none" stroke="#00ff00" stroke-width="1">"##);
    for p in input.points {
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="{MARKER_RADIUS}"/>"#,
            p.0, p.1
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}
