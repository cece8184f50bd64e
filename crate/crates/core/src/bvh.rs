//! Bounding-volume hierarchy over mesh triangles supporting two queries:
//! nearest ray intersection (depth rendering) and closest point on the
//! surface (distance evaluation). Both are exact — the tree only prunes;
//! results equal an exhaustive scan over all triangles.

use nalgebra::{Point3, Vector3};

use crate::geometry::TriangleMesh;
use crate::{Error, Result};

/// Nearest intersection along a ray; `t` is in units of the (possibly
/// unnormalized) ray direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub distance: f64,
    pub point: Point3<f64>,
    pub triangle: usize,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    lo: Point3<f64>,
    hi: Point3<f64>,
    /// Leaf: index into `order` where `count` triangles start. Internal:
    /// index of the left child (right child follows contiguously).
    start: u32,
    count: u32,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

/// Static BVH over the triangles of one mesh (vertex positions are copied
/// out for traversal locality).
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Point3<f64>; 3]>,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn build(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::InvalidInput("cannot build a BVH over an empty mesh".into()));
        }
        let tris: Vec<[Point3<f64>; 3]> =
            (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<Point3<f64>> = tris
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len());
        nodes.push(Node {
            lo: Point3::origin(),
            hi: Point3::origin(),
            start: 0,
            count: 0,
        });
        let len = order.len();
        build_node(&mut nodes, 0, &mut order, 0, len, &tris, &centroids);
        Ok(Self { nodes, order, tris })
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    /// Nearest intersection with `t > t_min`; front and back faces both
    /// count. `dir` need not be normalized.
    pub fn intersect_ray(
        &self,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
    ) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut stack = [0u32; 64];
        let mut top = 0usize;
        stack[top] = 0;
        top += 1;
        while top > 0 {
            top -= 1;
            let node = &self.nodes[stack[top] as usize];
            let t_entry = match ray_box_entry(origin, dir, &node.lo, &node.hi) {
                Some(t) => t,
                None => continue,
            };
            if let Some(hit) = best {
                if t_entry > hit.t {
                    continue;
                }
            }
            if node.is_leaf() {
                for i in node.start..node.start + node.count {
                    let tri_idx = self.order[i as usize] as usize;
                    let tri = &self.tris[tri_idx];
                    if let Some(t) = ray_triangle(origin, dir, &tri[0], &tri[1], &tri[2]) {
                        if t > t_min && best.map_or(true, |b| t < b.t) {
                            best = Some(RayHit { t, triangle: tri_idx });
                        }
                    }
                }
            } else {
                // Push the farther child first so the nearer one is
                // explored first, tightening the bound early.
                let l = node.start as usize;
                let r = l + 1;
                let tl = ray_box_entry(origin, dir, &self.nodes[l].lo, &self.nodes[l].hi);
                let tr = ray_box_entry(origin, dir, &self.nodes[r].lo, &self.nodes[r].hi);
                let (near, far) = if tl.unwrap_or(f64::INFINITY) <= tr.unwrap_or(f64::INFINITY) {
                    (l, r)
                } else {
                    (r, l)
                };
                stack[top] = far as u32;
                top += 1;
                stack[top] = near as u32;
                top += 1;
            }
        }
        best
    }

    /// Exact closest point on the mesh surface.
    pub fn closest_point(&self, p: &Point3<f64>) -> SurfacePoint {
        let mut best = SurfacePoint {
            distance: f64::INFINITY,
            point: *p,
            triangle: usize::MAX,
        };
        let mut best_sq = f64::INFINITY;
        let mut stack = [0u32; 64];
        let mut top = 0usize;
        stack[top] = 0;
        top += 1;
        while top > 0 {
            top -= 1;
            let node = &self.nodes[stack[top] as usize];
            if box_distance_sq(p, &node.lo, &node.hi) >= best_sq {
                continue;
            }
            if node.is_leaf() {
                for i in node.start..node.start + node.count {
                    let tri_idx = self.order[i as usize] as usize;
                    let tri = &self.tris[tri_idx];
                    let q = closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]);
                    let d_sq = (q - p).norm_squared();
                    if d_sq < best_sq {
                        best_sq = d_sq;
                        best = SurfacePoint {
                            distance: d_sq.sqrt(),
                            point: q,
                            triangle: tri_idx,
                        };
                    }
                }
            } else {
                let l = node.start as usize;
                let r = l + 1;
                let dl = box_distance_sq(p, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_distance_sq(p, &self.nodes[r].lo, &self.nodes[r].hi);
                let (near, far) = if dl <= dr { (l, r) } else { (r, l) };
                stack[top] = far as u32;
                top += 1;
                stack[top] = near as u32;
                top += 1;
            }
        }
        best
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    node_idx: usize,
    order: &mut [u32],
    start: usize,
    end: usize,
    tris: &[[Point3<f64>; 3]],
    centroids: &[Point3<f64>],
) {
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &t in &order[start..end] {
        for p in &tris[t as usize] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let count = end - start;
    if count <= LEAF_SIZE {
        nodes[node_idx] = Node {
            lo,
            hi,
            start: start as u32,
            count: count as u32,
        };
        return;
    }
    // Median split along the widest centroid axis.
    let mut clo = centroids[order[start] as usize];
    let mut chi = clo;
    for &t in &order[start..end] {
        let c = centroids[t as usize];
        for k in 0..3 {
            clo[k] = clo[k].min(c[k]);
            chi[k] = chi[k].max(c[k]);
        }
    }
    let extent = chi - clo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = start + count / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        let ca = centroids[a as usize][axis];
        let cb = centroids[b as usize][axis];
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });
    let left = nodes.len();
    nodes.push(Node {
        lo: Point3::origin(),
        hi: Point3::origin(),
        start: 0,
        count: 0,
    });
    nodes.push(Node {
        lo: Point3::origin(),
        hi: Point3::origin(),
        start: 0,
        count: 0,
    });
    nodes[node_idx] = Node {
        lo,
        hi,
        start: left as u32,
        count: 0,
    };
    build_node(nodes, left, order, start, mid, tris, centroids);
    build_node(nodes, left + 1, order, mid, end, tris, centroids);
}

/// Entry parameter of a ray into an AABB, or `None` when it misses or lies
/// entirely behind the origin. Entry is clamped to 0 for rays starting
/// inside the box.
fn ray_box_entry(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    lo: &Point3<f64>,
    hi: &Point3<f64>,
) -> Option<f64> {
    let mut t_near = 0.0_f64;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[k];
            let t1 = (lo[k] - origin[k]) * inv;
            let t2 = (hi[k] - origin[k]) * inv;
            let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            t_near = t_near.max(t1);
            t_far = t_far.min(t2);
            if t_near > t_far {
                return None;
            }
        }
    }
    Some(t_near)
}

fn box_distance_sq(p: &Point3<f64>, lo: &Point3<f64>, hi: &Point3<f64>) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if p[k] < lo[k] {
            lo[k] - p[k]
        } else if p[k] > hi[k] {
            p[k] - hi[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

/// Möller–Trumbore intersection without back-face culling. Returns the ray
/// parameter, in units of `dir`.
pub fn ray_triangle(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    // Parallel / degenerate guard, scaled by the magnitudes involved.
    let eps = 1e-12 * dir.norm() * e1.norm() * e2.norm();
    if det.abs() <= eps {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    Some(e2.dot(&qvec) * inv_det)
}

/// Exact closest point on a triangle (vertex, edge, and interior regions
/// all handled). Falls back to edge tests for degenerate triangles.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = va + vb + vc;
    if denom <= 0.0 || !denom.is_finite() {
        // Degenerate (collinear) triangle: closest point over its edges.
        let candidates = [
            closest_point_on_segment(p, a, b),
            closest_point_on_segment(p, b, c),
            closest_point_on_segment(p, c, a),
        ];
        return candidates
            .into_iter()
            .min_by(|x, y| {
                (x - p).norm_squared()
                    .partial_cmp(&(y - p).norm_squared())
                    .unwrap()
            })
            .unwrap();
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

fn closest_point_on_segment(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> Point3<f64> {
    let ab = b - a;
    let len_sq = ab.norm_squared();
    if len_sq == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len_sq).clamp(0.0, 1.0);
    a + ab * t
}
