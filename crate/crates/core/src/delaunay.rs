//! Bowyer-Watson Delaunay triangulation for small point sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = (f64, f64);

/// Relative tolerance of the in-circle and orientation predicates.
pub const PREDICATE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triangulation {
    pub points: Vec<Point2>,
    /// Counter-clockwise index triples (positive signed area in x-right,
    /// y-up convention).
    pub triangles: Vec<[usize; 3]>,
    /// Unique undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circumcircle {
    pub center: Point2,
    pub radius_sq: f64,
}

/// Twice the signed area of `abc`; positive when counter-clockwise.
#[inline]
pub fn orient2d(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn orient_scale(a: Point2, b: Point2, c: Point2) -> f64 {
    ((b.0 - a.0).abs() + (b.1 - a.1).abs()) * ((c.0 - a.0).abs() + (c.1 - a.1).abs())
}

pub fn circumcircle(a: Point2, b: Point2, c: Point2) -> Result<Circumcircle> {
    let d = 2.0 * orient2d(a, b, c);
    if d.abs() <= PREDICATE_EPS * orient_scale(a, b, c) || d == 0.0 {
        return Err(Error::DegenerateInput(format!(
            "points {a:?}, {b:?}, {c:?} are collinear"
        )));
    }
    // Solve relative to `a` to keep magnitudes small.
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let (cx, cy) = (c.0 - a.0, c.1 - a.1);
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    Ok(Circumcircle {
        center: (a.0 + ux, a.1 + uy),
        radius_sq: ux * ux + uy * uy,
    })
}

/// True when `d` lies strictly inside the circumcircle of the
/// counter-clockwise triangle `abc`, beyond a relative tolerance.
pub fn in_circle(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let (adx, ady) = (a.0 - d.0, a.1 - d.1);
    let (bdx, bdy) = (b.0 - d.0, b.1 - d.1);
    let (cdx, cdy) = (c.0 - d.0, c.1 - d.1);
    let alift = adx * adx + ady * ady;
    let blift = bdx * bdx + bdy * bdy;
    let clift = cdx * cdx + cdy * cdy;
    let t1 = alift * (bdx * cdy - bdy * cdx);
    let t2 = blift * (cdx * ady - cdy * adx);
    let t3 = clift * (adx * bdy - ady * bdx);
    let det = t1 + t2 + t3;
    let permanent = alift * ((bdx * cdy).abs() + (bdy * cdx).abs())
        + blift * ((cdx * ady).abs() + (cdy * adx).abs())
        + clift * ((adx * bdy).abs() + (ady * bdx).abs());
    det > PREDICATE_EPS * permanent
}

/// Number of points on the convex hull boundary, collinear boundary points
/// included.
pub fn hull_point_count(points: &[Point2]) -> usize {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts.len();
    }
    // Monotone chain keeping collinear points: pop only on strict right turns.
    let mut lower: Vec<Point2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient2d(lower[lower.len() - 2], lower[lower.len() - 1], p) < 0.0
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient2d(upper[upper.len() - 2], upper[upper.len() - 1], p) < 0.0
        {
            upper.pop();
        }
        upper.push(p);
    }
    let mut hull: Vec<Point2> = lower;
    hull.extend(upper);
    hull.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    hull.dedup();
    hull.len()
}

/// Sorted unique undirected edges of a triangle list.
pub fn edges_of(triangles: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn unique_edges(t: &Triangulation) -> Vec<(usize, usize)> {
    edges_of(&t.triangles)
}

/// One Bowyer-Watson pass with a bounding triangle of the given size factor.
/// Returns triangles over indices into `pts`.
fn bowyer_watson(pts: &[Point2], scale: f64) -> Vec<[usize; 3]> {
    let n = pts.len();
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(f64::MIN_POSITIVE);
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let r = span * scale;

    let mut verts: Vec<Point2> = pts.to_vec();
    verts.push((cx - 2.0 * r, cy - r));
    verts.push((cx + 2.0 * r, cy - r));
    verts.push((cx, cy + 2.0 * r));
    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];

    for p in 0..n {
        let pt = verts[p];
        let (bad, keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) = tris
            .into_iter()
            .partition(|t| in_circle(verts[t[0]], verts[t[1]], verts[t[2]], pt));
        // Cavity boundary: edges of bad triangles that no other bad triangle shares.
        let mut boundary: Vec<(usize, usize)> = Vec::new();
        for t in &bad {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let shared = bad.iter().any(|o| {
                    o != t && {
                        let oe = [(o[0], o[1]), (o[1], o[2]), (o[2], o[0])];
                        oe.contains(&(b, a)) || oe.contains(&(a, b))
                    }
                });
                if !shared {
                    boundary.push((a, b));
                }
            }
        }
        tris = keep;
        for (a, b) in boundary {
            // Boundary edges of a counter-clockwise cavity stay counter-clockwise with p.
            if orient2d(verts[a], verts[b], pt) > 0.0 {
                tris.push([a, b, p]);
            } else {
                tris.push([b, a, p]);
            }
        }
    }
    tris.retain(|t| t.iter().all(|&i| i < n));
    tris
}

fn canonical(t: [usize; 3]) -> [usize; 3] {
    let k = (0..3).min_by_key(|&k| t[k]).unwrap();
    [t[k], t[(k + 1) % 3], t[(k + 2) % 3]]
}

/// Delaunay triangulation of `points`.
///
/// Points are inserted in lexicographic order, so the result depends only on
/// the point multiset and its indexing. Repeated coordinates are triangulated
/// once, at the first index that carries them. Fewer than three distinct
/// points, or all points collinear, yield [`Error::DegenerateInput`].
pub fn triangulate(points: &[Point2]) -> Result<Triangulation> {
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::InvalidArgument(
            "point coordinates must be finite".into(),
        ));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (points[i], points[j]);
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(i.cmp(&j))
    });
    order.dedup_by(|j, i| points[*i] == points[*j]);
    if order.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 distinct points, got {}",
            order.len()
        )));
    }
    let pts: Vec<Point2> = order.iter().map(|&i| points[i]).collect();
    let a = pts[0];
    let far = pts
        .iter()
        .copied()
        .max_by(|p, q| {
            let dp = (p.0 - a.0).abs() + (p.1 - a.1).abs();
            let dq = (q.0 - a.0).abs() + (q.1 - a.1).abs();
            dp.total_cmp(&dq)
        })
        .unwrap();
    let non_collinear = pts
        .iter()
        .any(|&c| orient2d(a, far, c).abs() > PREDICATE_EPS * orient_scale(a, far, c));
    if !non_collinear {
        return Err(Error::DegenerateInput("all points are collinear".into()));
    }

    let expected = 2 * pts.len() - 2 - hull_point_count(&pts);
    let mut local = Vec::new();
    // A finite bounding triangle can hide thin hull triangles; grow it until
    // the convex hull is fully covered.
    for scale in [1e2, 1e4, 1e6, 1e8] {
        local = bowyer_watson(&pts, scale);
        if local.len() == expected {
            break;
        }
    }
    let mut triangles: Vec<[usize; 3]> = local
        .into_iter()
        .map(|t| {
            let mapped = [order[t[0]], order[t[1]], order[t[2]]];
            canonical(mapped)
        })
        .filter(|t| orient2d(points[t[0]], points[t[1]], points[t[2]]).abs() > 2e-12)
        .collect();
    triangles.sort_unstable();
    let edges = edges_of(&triangles);
    Ok(Triangulation {
        points: points.to_vec(),
        triangles,
        edges,
    })
}
