//! Triangle rasterization over pixel centers.
//!
//! Contract: a pixel `(px, py)` is covered iff its center `(px+0.5, py+0.5)`
//! lies inside the triangle, with boundary ties broken by a top-left fill
//! rule so that triangles sharing an edge partition the covered pixels with
//! no gaps and no double coverage.
//!
//! Fill rule, spelled out. Orient the triangle so its signed area in y-down
//! image coordinates is positive (swap two vertices if needed; zero area is
//! degenerate and rasterizes to nothing). For each directed edge `a -> b` of
//! the oriented triangle the edge function
//! `E(p) = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)`
//! is `>= 0` exactly on the closed interior side. A pixel center is covered
//! iff for every edge either `E > 0`, or `E == 0` and the edge is a top edge
//! (`b.y == a.y` and `b.x > a.x`) or a left edge (`b.y < a.y`).

use crate::mesh::Vec2;

/// Pixels covered by the triangle, clipped to a `width x height` image,
/// listed row-major (y outer, x inner) as `(x, y)`.
pub fn rasterize_triangle(tri: &[Vec2; 3], width: u32, height: u32) -> Vec<(u32, u32)> {
    let mut v = *tri;
    let area2 = signed_area2(v[0], v[1], v[2]);
    if area2 == 0.0 {
        return Vec::new();
    }
    if area2 < 0.0 {
        v.swap(1, 2);
    }

    let min_x = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    if !(min_x.is_finite() && max_x.is_finite() && min_y.is_finite() && max_y.is_finite()) {
        return Vec::new();
    }

    // Candidate pixels: centers inside the bounding box, clipped to image.
    let x0 = (min_x - 0.5).ceil().max(0.0) as i64;
    let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0) as i64;
    let y0 = (min_y - 0.5).ceil().max(0.0) as i64;
    let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0) as i64;
    if x1 < x0 || y1 < y0 {
        return Vec::new();
    }

    let edges: [Edge; 3] = [
        Edge::new(v[0], v[1]),
        Edge::new(v[1], v[2]),
        Edge::new(v[2], v[0]),
    ];

    let mut out = Vec::new();
    for py in y0..=y1 {
        let cy = py as f64 + 0.5;
        for px in x0..=x1 {
            let cx = px as f64 + 0.5;
            if edges.iter().all(|e| e.admits(cx, cy)) {
                out.push((px as u32, py as u32));
            }
        }
    }
    out
}

struct Edge {
    ax: f64,
    ay: f64,
    dx: f64,
    dy: f64,
    top_left: bool,
}

impl Edge {
    fn new(a: Vec2, b: Vec2) -> Self {
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        Edge {
            ax: a[0],
            ay: a[1],
            dx,
            dy,
            top_left: dy < 0.0 || (dy == 0.0 && dx > 0.0),
        }
    }

    fn admits(&self, cx: f64, cy: f64) -> bool {
        let e = self.dx * (cy - self.ay) - self.dy * (cx - self.ax);
        e > 0.0 || (e == 0.0 && self.top_left)
    }
}

/// Twice the signed area of the triangle in y-down coordinates.
pub fn signed_area2(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Independent brute-force coverage check used by tests: classify every
    //! pixel center in the image with three-point determinants instead of
    //! the production edge walk.

    use crate::mesh::Vec2;

    fn det3(a: Vec2, b: Vec2, p: Vec2) -> f64 {
        a[0] * (b[1] - p[1]) + b[0] * (p[1] - a[1]) + p[0] * (a[1] - b[1])
    }

    pub fn rasterize_brute_force(tri: &[Vec2; 3], width: u32, height: u32) -> Vec<(u32, u32)> {
        let mut v = *tri;
        let total = det3(v[0], v[1], v[2]);
        if total == 0.0 {
            return Vec::new();
        }
        if total < 0.0 {
            v.swap(1, 2);
        }
        let mut out = Vec::new();
        for py in 0..height {
            for px in 0..width {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let mut inside = true;
                for k in 0..3 {
                    let a = v[k];
                    let b = v[(k + 1) % 3];
                    let w = det3(a, b, p);
                    if w > 0.0 {
                        continue;
                    }
                    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                    let top_left = dy < 0.0 || (dy == 0.0 && dx > 0.0);
                    if w == 0.0 && top_left {
                        continue;
                    }
                    inside = false;
                    break;
                }
                if inside {
                    out.push((px, py));
                }
            }
        }
        out
    }
}
