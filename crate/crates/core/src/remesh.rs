//! Screen-space decimation: quadric-driven edge collapses, metric Delaunay
//! edge flips and tangent-space vertex relocation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use log::info;
use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::mesh::{orient2d, Edge, Halfedge, MeshError, ScreenMesh, Vertex};
use crate::normal_io::{tangent_frame, NormalMap};
use crate::quadrics::{edge_metric, screen_quadric, vertex_quadric, Quadric, ScreenQuadric};

/// Relative size below which a lifted incircle determinant counts as a tie.
pub const FLIP_TOLERANCE: f64 = 1e-12;

/// Flips allowed per edge in one [`align_edges`] call.
pub const MAX_EDGE_FLIPS: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemeshError {
    #[error("invalid remeshing configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Collapse every edge whose cost stays below the threshold.
    Threshold(f64),
    /// Collapse until the vertex count reaches the target.
    VertexTarget(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemeshConfig {
    pub mode: StopMode,
    pub lambda: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub align_edges: bool,
    pub align_vertices: bool,
}

impl RemeshConfig {
    pub fn new(mode: StopMode) -> Self {
        RemeshConfig {
            mode,
            lambda: 1e-5,
            alpha: 0.5,
            iterations: 5,
            align_edges: true,
            align_vertices: true,
        }
    }

    pub fn validate(&self) -> Result<(), RemeshError> {
        let bad = |m: &str| Err(RemeshError::InvalidConfig(m.to_string()));
        match self.mode {
            StopMode::Threshold(t) if !(t > 0.0) => return bad("threshold must be positive"),
            StopMode::VertexTarget(n) if n < 3 => return bad("vertex target must be at least 3"),
            _ => {}
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("step width must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.iterations == 0 {
            return bad("at least one iteration is required");
        }
        Ok(())
    }
}

/// A queued collapse of `edge`, placing the surviving vertex at parameter
/// `t` along it (0 at the edge's first halfedge source).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseCandidate {
    pub edge: Edge,
    pub cost: f64,
    pub t: f64,
    pub stamp: u32,
}

impl Eq for CollapseCandidate {}

impl Ord for CollapseCandidate {
    // reversed so that BinaryHeap pops the cheapest, lowest edge id first
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost.total_cmp(&self.cost).then(o.edge.cmp(&self.edge))
    }
}

impl PartialOrd for CollapseCandidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// `min_t Q̃_v(t e) + Q̃_w((t - 1) e)` over `t ∈ [0, 1]`, with `e = u_w - u_v`.
/// Degenerate (non-convex or flat) cases take the best of `{0, ½, 1}`,
/// preferring ½ on ties. Returns `(cost, t)`.
pub fn edge_cost(qv: &ScreenQuadric, qw: &ScreenQuadric, e: &Vector2<f64>) -> (f64, f64) {
    let cost = |t: f64| (qv.eval(&(e * t)) + qw.eval(&(e * (t - 1.0)))).max(0.0);
    let a = e.dot(&(qv.a * e)) + e.dot(&(qw.a * e));
    let b = qv.b.dot(e) + qw.b.dot(e) - e.dot(&(qw.a * e));
    let scale = a.abs() + b.abs() + qv.c.abs() + qw.c.abs();
    if a > 1e-14 * scale && a.is_finite() {
        let t = (-b / a).clamp(0.0, 1.0);
        return (cost(t), t);
    }
    let mut best = (cost(0.5), 0.5);
    for t in [0.0, 1.0] {
        let c = cost(t);
        if c < best.0 {
            best = (c, t);
        }
    }
    best
}

/// Per-vertex quadric state used during a decimation pass.
#[derive(Debug, Clone)]
pub struct VertexQuadrics {
    pub quadric: Vec<Quadric>,
    /// `Σ A3_f n_f` over the star, summed on merges.
    pub normal_sum: Vec<Vector3<f64>>,
    pub jacobian: Vec<Matrix3x2<f64>>,
}

impl VertexQuadrics {
    pub fn build(mesh: &ScreenMesh, nm: &NormalMap, cam: &Camera, lambda: f64) -> Self {
        let n = mesh.vertex_capacity();
        let items: Vec<(Quadric, Vector3<f64>)> = (0..n as u32)
            .into_par_iter()
            .map(|v| {
                let v = Vertex(v);
                if mesh.is_vertex_deleted(v) {
                    return (Quadric::zero(), Vector3::zeros());
                }
                let q = vertex_quadric(mesh, nm, cam, v, lambda).unwrap_or_default();
                let s: Vector3<f64> = mesh
                    .vertex_faces(v)
                    .map(|f| {
                        let d = mesh.face_data(f);
                        d.normal * d.a3
                    })
                    .sum();
                (q, s)
            })
            .collect();
        let mut vq = VertexQuadrics {
            quadric: Vec::with_capacity(n),
            normal_sum: Vec::with_capacity(n),
            jacobian: vec![Matrix3x2::zeros(); n],
        };
        for (q, s) in items {
            vq.quadric.push(q);
            vq.normal_sum.push(s);
        }
        for v in mesh.vertices() {
            vq.refresh_jacobian(mesh, cam, v);
        }
        vq
    }

    fn refresh_jacobian(&mut self, mesh: &ScreenMesh, cam: &Camera, v: Vertex) {
        let s = self.normal_sum[v.idx()];
        let n = if s.norm() > 1e-12 { s.normalize() } else { Vector3::z() };
        self.jacobian[v.idx()] = cam.jacobian_clamped(&n, mesh.position(v));
    }

    pub fn screen(&self, v: Vertex) -> ScreenQuadric {
        screen_quadric(&self.quadric[v.idx()], &self.jacobian[v.idx()])
    }
}

/// Best admissible collapse of `e` given the boundary rules, or `None` when
/// the boundary rules forbid any collapse.
pub fn collapse_cost(mesh: &ScreenMesh, vq: &VertexQuadrics, e: Edge, stamp: u32) -> Option<CollapseCandidate> {
    let h = e.halfedge(0);
    let v = mesh.from_vertex(h);
    let w = mesh.to_vertex(h);
    let (bv, bw) = (mesh.is_boundary_vertex(v), mesh.is_boundary_vertex(w));
    let dir = mesh.position(w) - mesh.position(v);
    let (qv, qw) = (vq.screen(v), vq.screen(w));
    let at = |t: f64| (qv.eval(&(dir * t)) + qw.eval(&(dir * (t - 1.0)))).max(0.0);
    let (cost, t) = match (bv, bw) {
        (false, false) => edge_cost(&qv, &qw, &dir),
        (true, false) => (at(0.0), 0.0),
        (false, true) => (at(1.0), 1.0),
        (true, true) => {
            if !mesh.is_boundary_edge(e) {
                return None;
            }
            // the removed endpoint must sit on a straight boundary run
            match (mesh.is_straight_boundary(v), mesh.is_straight_boundary(w)) {
                (false, false) => return None,
                (true, false) => (at(1.0), 1.0),
                (false, true) => (at(0.0), 0.0),
                (true, true) => {
                    let (c0, c1) = (at(0.0), at(1.0));
                    if c0 < c1 {
                        (c0, 0.0)
                    } else {
                        (c1, 1.0)
                    }
                }
            }
        }
    };
    Some(CollapseCandidate {
        edge: e,
        cost,
        t,
        stamp,
    })
}

/// Halfedge to contract and target position for a candidate: `t == 0`
/// keeps the source vertex in place, `t == 1` the target vertex.
fn collapse_plan(mesh: &ScreenMesh, c: &CollapseCandidate) -> (Halfedge, Vector2<f64>) {
    let h = c.edge.halfedge(0);
    let (pv, pw) = (mesh.position(mesh.from_vertex(h)), mesh.position(mesh.to_vertex(h)));
    if c.t == 0.0 {
        (h.twin(), pv)
    } else if c.t == 1.0 {
        (h, pw)
    } else {
        (h, pv + (pw - pv) * c.t)
    }
}

/// Stop rule of a single decimation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PassStop {
    Threshold(f64),
    Target(usize),
}

/// Runs prioritized collapses until the stop rule triggers or the queue
/// empties. Face data must be clean on entry; faces touched by collapses
/// are left dirty. Returns the number of collapses.
pub fn decimate_pass(mesh: &mut ScreenMesh, nm: &NormalMap, cam: &Camera, lambda: f64, stop: PassStop) -> usize {
    if let PassStop::Target(n) = stop {
        if mesh.vertex_count() <= n {
            return 0;
        }
    }
    let mut vq = VertexQuadrics::build(mesh, nm, cam, lambda);
    let mut stamps = vec![0u32; mesh.edge_capacity()];
    let edges: Vec<Edge> = mesh.edges().collect();
    let initial: Vec<CollapseCandidate> = {
        let (m, q) = (&*mesh, &vq);
        edges.par_iter().filter_map(|&e| collapse_cost(m, q, e, 0)).collect()
    };
    let mut heap = BinaryHeap::from(initial);
    let mut collapses = 0;
    while let Some(c) = heap.pop() {
        if mesh.is_edge_deleted(c.edge) || stamps[c.edge.idx()] != c.stamp {
            continue;
        }
        match stop {
            PassStop::Threshold(tau) if c.cost > tau => break,
            PassStop::Target(n) if mesh.vertex_count() <= n => break,
            _ => {}
        }
        let (h, pos) = collapse_plan(mesh, &c);
        let removed = mesh.from_vertex(h);
        let kept = mesh.to_vertex(h);
        let (qr, qk) = (vq.quadric[removed.idx()], vq.quadric[kept.idx()]);
        let sr = vq.jacobian[removed.idx()] * (pos - mesh.position(removed));
        let sk = vq.jacobian[kept.idx()] * (pos - mesh.position(kept));
        if mesh.collapse(h, pos).is_err() {
            continue;
        }
        collapses += 1;
        vq.quadric[kept.idx()] = qr.recentered(&sr) + qk.recentered(&sk);
        let ns = vq.normal_sum[removed.idx()];
        vq.normal_sum[kept.idx()] += ns;
        vq.refresh_jacobian(mesh, cam, kept);
        let ring: Vec<Edge> = mesh.outgoing(kept).map(|h| h.edge()).collect();
        for e in ring {
            stamps[e.idx()] += 1;
            if let Some(c) = collapse_cost(mesh, &vq, e, stamps[e.idx()]) {
                heap.push(c);
            }
        }
    }
    collapses
}

/// Metric and normal of the quad around interior edge `e`, accumulated over
/// the pixels of both faces. The pixel set of the quad does not depend on
/// which diagonal splits it, so both diagonals are judged under the same
/// metric. Falls back to the face-weighted edge metric for pixel-free quads.
fn quad_metric(mesh: &ScreenMesh, nm: &NormalMap, e: Edge, lambda: f64) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let (Some(f), Some(g)) = mesh.edge_faces(e) else {
        return None;
    };
    let (mut m, mut n, mut k) = (Matrix3::zeros(), Vector3::zeros(), 0usize);
    for &p in mesh.bin(f).iter().chain(mesh.bin(g)) {
        let np = nm.normal(p as usize);
        m += np * np.transpose();
        n += np;
        k += 1;
    }
    if k == 0 || n.norm() < 1e-12 {
        return edge_metric(mesh, e, lambda).ok();
    }
    Some((m + Matrix3::identity() * (lambda * k as f64), n.normalize()))
}

/// Whether interior edge `e` should be replaced by the other diagonal of
/// its quad under the quad's metric.
pub fn prefers_flip(mesh: &ScreenMesh, nm: &NormalMap, cam: &Camera, e: Edge, lambda: f64) -> bool {
    let Some([a, b, c, d]) = mesh.edge_quad(e) else {
        return false;
    };
    let Some((me, ne)) = quad_metric(mesh, nm, e, lambda) else {
        return false;
    };
    let center = [a, b, c, d].iter().map(|&v| mesh.position(v)).sum::<Vector2<f64>>() * 0.25;
    let j = cam.jacobian_clamped(&ne, center);
    let (t1, t2) = tangent_frame(&ne);
    let t = Matrix3x2::from_columns(&[t1, t2]);
    let proj = t.transpose() * j;
    let metric: Matrix2<f64> = t.transpose() * me * t;
    let p = [a, c, b, d].map(|v| proj * (mesh.position(v) - center));
    let lift = p.map(|q| q.dot(&(metric * q)));
    let scale = p
        .iter()
        .zip(&lift)
        .map(|(q, l)| q.norm_squared() * l.abs())
        .fold(0.0, f64::max);
    metric_incircle(&p, &lift) > FLIP_TOLERANCE * scale
}

/// Lifted incircle determinant of `p[3]` against triangle `(p[0], p[1],
/// p[2])`, positive when `p[3]` lies strictly inside, for either triangle
/// orientation.
pub fn metric_incircle(p: &[Vector2<f64>; 4], lift: &[f64; 4]) -> f64 {
    let r = |i: usize| Vector3::new(p[i].x - p[3].x, p[i].y - p[3].y, lift[i] - lift[3]);
    let (ra, rb, rc) = (r(0), r(1), r(2));
    let det = ra.dot(&rb.cross(&rc));
    det * orient2d(p[0], p[1], p[2]).signum()
}

/// Flip sweeps in ascending edge order until no edge prefers flipping.
/// Each edge flips at most [`MAX_EDGE_FLIPS`] times and the call stops
/// after `100 |E|` flips; with metrics varying across quads, flip cycles are
/// otherwise possible. Rebins the two faces of each flip. Returns the number
/// of flips.
pub fn align_edges(mesh: &mut ScreenMesh, nm: &NormalMap, cam: &Camera, lambda: f64) -> Result<usize, MeshError> {
    mesh.rebin_dirty(nm, cam)?;
    let guard = 100 * mesh.edge_count();
    let mut per_edge = vec![0u8; mesh.edge_capacity()];
    let mut flips = 0;
    loop {
        let mut sweep = 0;
        for e in 0..mesh.edge_capacity() as u32 {
            let e = Edge(e);
            if per_edge[e.idx()] >= MAX_EDGE_FLIPS || mesh.is_edge_deleted(e) || mesh.is_boundary_edge(e) {
                continue;
            }
            if prefers_flip(mesh, nm, cam, e, lambda) && mesh.flip(e).is_ok() {
                mesh.rebin_dirty(nm, cam)?;
                per_edge[e.idx()] += 1;
                sweep += 1;
                flips += 1;
                if flips >= guard {
                    return Ok(flips);
                }
            }
        }
        if sweep == 0 {
            return Ok(flips);
        }
    }
}

/// Screen quadric and optimal displacement of every interior vertex,
/// evaluated on the current (clean) mesh.
pub fn vertex_displacements(
    mesh: &ScreenMesh,
    nm: &NormalMap,
    cam: &Camera,
    lambda: f64,
) -> Vec<(Vertex, ScreenQuadric, Vector2<f64>)> {
    let verts: Vec<Vertex> = mesh.vertices().filter(|&v| !mesh.is_boundary_vertex(v)).collect();
    verts
        .par_iter()
        .filter_map(|&v| {
            let q = vertex_quadric(mesh, nm, cam, v, lambda).ok()?;
            let j = crate::quadrics::vertex_jacobian(mesh, cam, v);
            let sq = screen_quadric(&q, &j);
            let d = sq.optimal_displacement().unwrap_or_else(|_| Vector2::zeros());
            Some((v, sq, d))
        })
        .collect()
}

/// Moves every interior vertex by `alpha` times its optimal displacement,
/// all computed from the same snapshot. Returns the number of vertices
/// that moved.
pub fn align_vertices(
    mesh: &mut ScreenMesh,
    nm: &NormalMap,
    cam: &Camera,
    lambda: f64,
    alpha: f64,
) -> Result<usize, MeshError> {
    mesh.rebin_dirty(nm, cam)?;
    let moves = vertex_displacements(mesh, nm, cam, lambda);
    let mut moved = 0;
    for (v, _, d) in moves {
        let step = d * alpha;
        if step.iter().all(|x| x.is_finite()) && step != Vector2::zeros() && mesh.move_vertex(v, step).is_ok() {
            moved += 1;
        }
    }
    mesh.rebin_dirty(nm, cam)?;
    Ok(moved)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub vertices: usize,
    pub collapses: usize,
    pub flips: usize,
    pub moved: usize,
}

/// Vertex target of outer iteration `k` (1-based) out of `k_max`:
/// geometric descent from `10 N` to `N`.
pub fn iteration_target(n: usize, k: usize, k_max: usize) -> usize {
    let exp = (k_max - k) as f64 / k_max as f64;
    (n as f64 * 10f64.powf(exp)).round() as usize
}

/// The full decimation schedule. Leaves the mesh fully rasterized.
pub fn run(
    mesh: &mut ScreenMesh,
    nm: &NormalMap,
    cam: &Camera,
    cfg: &RemeshConfig,
) -> Result<Vec<IterationStats>, RemeshError> {
    cfg.validate()?;
    let mut stats = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        mesh.rasterize(nm, cam)?;
        let stop = match cfg.mode {
            StopMode::Threshold(t) => PassStop::Threshold(t),
            StopMode::VertexTarget(n) => PassStop::Target(iteration_target(n, k, cfg.iterations)),
        };
        let collapses = decimate_pass(mesh, nm, cam, cfg.lambda, stop);
        mesh.rebin_dirty(nm, cam)?;
        let flips = if cfg.align_edges {
            align_edges(mesh, nm, cam, cfg.lambda)?
        } else {
            0
        };
        let moved = if cfg.align_vertices {
            align_vertices(mesh, nm, cam, cfg.lambda, cfg.alpha)?
        } else {
            0
        };
        let s = IterationStats {
            iteration: k,
            vertices: mesh.vertex_count(),
            collapses,
            flips,
            moved,
        };
        info!("iter {k}: |V|={}, collapses={collapses}, flips={flips}", s.vertices);
        stats.push(s);
    }
    mesh.rasterize(nm, cam)?;
    Ok(stats)
}

/// Boundary vertices that can never be removed (corners of the outline).
pub fn locked_vertices(mesh: &ScreenMesh) -> usize {
    mesh.vertices()
        .filter(|&v| mesh.is_boundary_vertex(v) && !mesh.is_straight_boundary(v))
        .count()
}

#[cfg(test)]
mod tests;
