//! Half-edge triangle mesh over the image plane.
//!
//! Halfedges are stored in twin pairs (`2e`, `2e + 1`) so edge ids and twins
//! are implicit. Boundary halfedges exist explicitly with no face and are
//! linked into boundary loops. Deleted elements are tombstoned; ids of live
//! elements never change.

mod debug;
mod raster;

use std::collections::HashMap;

use nalgebra::Vector2;
use thiserror::Error;

use crate::normal_io::NormalMap;

pub use debug::{write_flat_obj, write_svg};
pub use raster::{inside_triangle, FaceData};

/// Minimum signed screen area (px²) of any face.
pub const AREA_EPSILON: f64 = 1e-6;

const INVALID: u32 = u32::MAX;

macro_rules! handle {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn idx(self) -> usize {
                self.0 as usize
            }
        }
    };
}

handle!(Vertex);
handle!(Halfedge);
handle!(Edge);
handle!(Face);

impl Halfedge {
    #[inline]
    pub fn twin(self) -> Halfedge {
        Halfedge(self.0 ^ 1)
    }

    #[inline]
    pub fn edge(self) -> Edge {
        Edge(self.0 >> 1)
    }
}

impl Edge {
    #[inline]
    pub fn halfedge(self, i: u32) -> Halfedge {
        Halfedge(self.0 * 2 + i)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("face {0} has area below the degeneracy threshold")]
    DegenerateFace(u32),
    #[error("input is not a manifold triangle mesh: {0}")]
    NonManifold(String),
    #[error("collapse would violate the link condition")]
    LinkConditionViolation,
    #[error("operation would invert or degenerate a face")]
    InversionRejected,
    #[error("operation would alter the mesh boundary")]
    BoundaryRuleViolation,
    #[error("edge quad is not strictly convex")]
    NonConvexQuad,
    #[error("boundary edges cannot be flipped")]
    BoundaryEdge,
    #[error("element has been deleted")]
    Deleted,
}

/// Twice the signed area of triangle `(a, b, c)`; positive for the mesh's
/// face orientation.
#[inline]
pub fn orient2d(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

#[inline]
pub fn triangle_area(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    0.5 * orient2d(a, b, c)
}

/// 2D triangle mesh in pixel coordinates, with per-face pixel bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenMesh {
    width: usize,
    height: usize,
    pos: Vec<Vector2<f64>>,
    v_out: Vec<u32>,
    he_to: Vec<u32>,
    he_next: Vec<u32>,
    he_prev: Vec<u32>,
    he_face: Vec<u32>,
    f_he: Vec<u32>,
    v_del: Vec<bool>,
    e_del: Vec<bool>,
    f_del: Vec<bool>,
    n_vertices: usize,
    n_edges: usize,
    n_faces: usize,
    // per-face rasterization state, see raster.rs
    face_data: Vec<FaceData>,
    bins: Vec<Vec<u32>>,
    owner: Vec<u32>,
    dirty: Vec<bool>,
    dirty_list: Vec<u32>,
}

impl ScreenMesh {
    /// Builds a mesh from an indexed triangle list. Every triangle must have
    /// positive signed area. Vertices whose incident triangles form several
    /// fans (touching only at the vertex) are split into one vertex per fan.
    pub fn from_triangles(
        width: usize,
        height: usize,
        mut positions: Vec<Vector2<f64>>,
        tris: &[[u32; 3]],
    ) -> Result<Self, MeshError> {
        if tris.is_empty() {
            return Err(MeshError::EmptyMask);
        }
        for (t, tri) in tris.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= positions.len()) {
                return Err(MeshError::NonManifold(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let [a, b, c] = tri.map(|v| positions[v as usize]);
            if triangle_area(a, b, c) <= AREA_EPSILON {
                return Err(MeshError::DegenerateFace(t as u32));
            }
        }
        let tris = split_fans(&mut positions, tris);

        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(tris.len() * 3);
        let mut he_to = Vec::with_capacity(tris.len() * 4);
        let mut he_face = Vec::with_capacity(tris.len() * 4);
        let mut corner_he = vec![[0u32; 3]; tris.len()];
        for (t, tri) in tris.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if directed.contains_key(&(a, b)) {
                    return Err(MeshError::NonManifold(format!(
                        "edge ({a}, {b}) used twice in the same direction"
                    )));
                }
                let h = match directed.get(&(b, a)) {
                    Some(&twin) => twin ^ 1,
                    None => {
                        let h = he_to.len() as u32;
                        he_to.extend_from_slice(&[b, a]);
                        he_face.extend_from_slice(&[INVALID, INVALID]);
                        h
                    }
                };
                if he_face[h as usize] != INVALID {
                    return Err(MeshError::NonManifold(format!(
                        "edge ({a}, {b}) has more than two faces"
                    )));
                }
                he_face[h as usize] = t as u32;
                directed.insert((a, b), h);
                corner_he[t][k] = h;
            }
        }

        let n_he = he_to.len();
        let mut he_next = vec![INVALID; n_he];
        let mut he_prev = vec![INVALID; n_he];
        let mut v_out = vec![INVALID; positions.len()];
        let mut f_he = Vec::with_capacity(tris.len());
        for (t, hs) in corner_he.iter().enumerate() {
            for k in 0..3 {
                let (h, n) = (hs[k], hs[(k + 1) % 3]);
                he_next[h as usize] = n;
                he_prev[n as usize] = h;
                let from = tris[t][k];
                if v_out[from as usize] == INVALID {
                    v_out[from as usize] = h;
                }
            }
            f_he.push(hs[0]);
        }
        // boundary loops: a boundary halfedge a->b continues with the
        // boundary halfedge leaving b
        let mut boundary_from: HashMap<u32, u32> = HashMap::new();
        for h in 0..n_he {
            if he_face[h] == INVALID {
                let from = he_to[h ^ 1];
                if boundary_from.insert(from, h as u32).is_some() {
                    return Err(MeshError::NonManifold(format!(
                        "vertex {from} lies on two boundary loops"
                    )));
                }
            }
        }
        for h in 0..n_he {
            if he_face[h] == INVALID {
                let n = boundary_from[&he_to[h]];
                he_next[h] = n;
                he_prev[n as usize] = h as u32;
            }
        }
        for (&v, &h) in &boundary_from {
            v_out[v as usize] = h;
        }

        let n_vertices = v_out.iter().filter(|&&h| h != INVALID).count();
        let v_del = v_out.iter().map(|&h| h == INVALID).collect();
        let n_faces = tris.len();
        let mesh = ScreenMesh {
            width,
            height,
            pos: positions,
            v_out,
            he_to,
            he_next,
            he_prev,
            he_face,
            f_he,
            v_del,
            e_del: vec![false; n_he / 2],
            f_del: vec![false; n_faces],
            n_vertices,
            n_edges: n_he / 2,
            n_faces,
            face_data: vec![FaceData::default(); n_faces],
            bins: vec![Vec::new(); n_faces],
            owner: Vec::new(),
            dirty: vec![true; n_faces],
            dirty_list: (0..n_faces as u32).collect(),
        };
        mesh.check_rectangle()?;
        Ok(mesh)
    }

    fn check_rectangle(&self) -> Result<(), MeshError> {
        let (w, h) = (self.width as f64, self.height as f64);
        for v in self.vertices() {
            let p = self.pos[v.idx()];
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h) {
                return Err(MeshError::NonManifold(format!(
                    "vertex {} at {p:?} lies outside the image",
                    v.0
                )));
            }
        }
        Ok(())
    }

    /// Two triangles per foreground pixel, vertices on pixel corners, each
    /// pixel split along its lower-left to upper-right diagonal.
    pub fn from_mask(nm: &NormalMap) -> Result<Self, MeshError> {
        let (w, h) = (nm.width(), nm.height());
        let mut corner = vec![INVALID; (w + 1) * (h + 1)];
        let mut positions = Vec::new();
        let mut tris = Vec::with_capacity(2 * nm.foreground_count());
        let mut id = |x: usize, y: usize, positions: &mut Vec<Vector2<f64>>| {
            let c = &mut corner[y * (w + 1) + x];
            if *c == INVALID {
                *c = positions.len() as u32;
                positions.push(Vector2::new(x as f64, y as f64));
            }
            *c
        };
        for y in 0..h {
            for x in 0..w {
                if !nm.is_foreground(y * w + x) {
                    continue;
                }
                let tl = id(x, y, &mut positions);
                let tr = id(x + 1, y, &mut positions);
                let bl = id(x, y + 1, &mut positions);
                let br = id(x + 1, y + 1, &mut positions);
                tris.push([tl, tr, bl]);
                tris.push([br, bl, tr]);
            }
        }
        if tris.is_empty() {
            return Err(MeshError::EmptyMask);
        }
        Self::from_triangles(w, h, positions, &tris)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vertex_count(&self) -> usize {
        self.n_vertices
    }

    pub fn face_count(&self) -> usize {
        self.n_faces
    }

    pub fn edge_count(&self) -> usize {
        self.n_edges
    }

    /// Upper bound (exclusive) on vertex ids.
    pub fn vertex_capacity(&self) -> usize {
        self.pos.len()
    }

    pub fn face_capacity(&self) -> usize {
        self.f_he.len()
    }

    pub fn edge_capacity(&self) -> usize {
        self.e_del.len()
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        (0..self.pos.len() as u32)
            .filter(|&v| !self.v_del[v as usize])
            .map(Vertex)
    }

    pub fn faces(&self) -> impl Iterator<Item = Face> + '_ {
        (0..self.f_he.len() as u32)
            .filter(|&f| !self.f_del[f as usize])
            .map(Face)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.e_del.len() as u32)
            .filter(|&e| !self.e_del[e as usize])
            .map(Edge)
    }

    pub fn is_vertex_deleted(&self, v: Vertex) -> bool {
        self.v_del[v.idx()]
    }

    pub fn is_face_deleted(&self, f: Face) -> bool {
        self.f_del[f.idx()]
    }

    pub fn is_edge_deleted(&self, e: Edge) -> bool {
        self.e_del[e.idx()]
    }

    #[inline]
    pub fn position(&self, v: Vertex) -> Vector2<f64> {
        self.pos[v.idx()]
    }

    #[inline]
    pub fn to_vertex(&self, h: Halfedge) -> Vertex {
        Vertex(self.he_to[h.idx()])
    }

    #[inline]
    pub fn from_vertex(&self, h: Halfedge) -> Vertex {
        Vertex(self.he_to[h.idx() ^ 1])
    }

    #[inline]
    pub fn next(&self, h: Halfedge) -> Halfedge {
        Halfedge(self.he_next[h.idx()])
    }

    #[inline]
    pub fn prev(&self, h: Halfedge) -> Halfedge {
        Halfedge(self.he_prev[h.idx()])
    }

    #[inline]
    pub fn face(&self, h: Halfedge) -> Option<Face> {
        let f = self.he_face[h.idx()];
        (f != INVALID).then_some(Face(f))
    }

    #[inline]
    pub fn face_halfedge(&self, f: Face) -> Halfedge {
        Halfedge(self.f_he[f.idx()])
    }

    #[inline]
    fn is_boundary_halfedge(&self, h: Halfedge) -> bool {
        self.he_face[h.idx()] == INVALID
    }

    pub fn is_boundary_edge(&self, e: Edge) -> bool {
        self.is_boundary_halfedge(e.halfedge(0)) || self.is_boundary_halfedge(e.halfedge(1))
    }

    /// A vertex is on the boundary iff its stored outgoing halfedge is.
    pub fn is_boundary_vertex(&self, v: Vertex) -> bool {
        let h = self.v_out[v.idx()];
        h != INVALID && self.he_face[h as usize] == INVALID
    }

    /// Halfedges of a face, starting at its stored halfedge.
    pub fn face_halfedges(&self, f: Face) -> [Halfedge; 3] {
        let h0 = self.face_halfedge(f);
        let h1 = self.next(h0);
        [h0, h1, self.next(h1)]
    }

    /// Vertices of a face in orientation order.
    pub fn face_vertices(&self, f: Face) -> [Vertex; 3] {
        self.face_halfedges(f).map(|h| self.from_vertex(h))
    }

    pub fn face_positions(&self, f: Face) -> [Vector2<f64>; 3] {
        self.face_vertices(f).map(|v| self.position(v))
    }

    pub fn face_area(&self, f: Face) -> f64 {
        let [a, b, c] = self.face_positions(f);
        triangle_area(a, b, c)
    }

    pub fn face_centroid(&self, f: Face) -> Vector2<f64> {
        let [a, b, c] = self.face_positions(f);
        (a + b + c) / 3.0
    }

    /// Outgoing halfedges of `v`, clockwise.
    pub fn outgoing(&self, v: Vertex) -> Outgoing<'_> {
        let start = self.v_out[v.idx()];
        Outgoing {
            mesh: self,
            start,
            current: start,
        }
    }

    /// Faces incident to `v`.
    pub fn vertex_faces(&self, v: Vertex) -> impl Iterator<Item = Face> + '_ {
        self.outgoing(v).filter_map(|h| self.face(h))
    }

    pub fn neighbors(&self, v: Vertex) -> impl Iterator<Item = Vertex> + '_ {
        self.outgoing(v).map(|h| self.to_vertex(h))
    }

    pub fn valence(&self, v: Vertex) -> usize {
        self.outgoing(v).count()
    }

    pub fn find_halfedge(&self, a: Vertex, b: Vertex) -> Option<Halfedge> {
        self.outgoing(a).find(|&h| self.to_vertex(h) == b)
    }

    /// The two faces sharing `e` (either may be absent on the boundary).
    pub fn edge_faces(&self, e: Edge) -> (Option<Face>, Option<Face>) {
        (self.face(e.halfedge(0)), self.face(e.halfedge(1)))
    }

    /// Neighbours of a boundary vertex along the boundary loop:
    /// `(previous, next)`.
    pub fn boundary_neighbors(&self, v: Vertex) -> Option<(Vertex, Vertex)> {
        if !self.is_boundary_vertex(v) {
            return None;
        }
        let out = Halfedge(self.v_out[v.idx()]);
        Some((self.from_vertex(self.prev(out)), self.to_vertex(out)))
    }

    /// Boundary vertex lying strictly inside the straight segment joining
    /// its two boundary neighbours. Only such vertices may be removed or
    /// slid without changing the meshed domain.
    pub fn is_straight_boundary(&self, v: Vertex) -> bool {
        match self.boundary_neighbors(v) {
            Some((p, n)) => {
                let (a, b, c) = (self.position(p), self.position(v), self.position(n));
                orient2d(a, b, c) == 0.0 && (b - a).dot(&(c - b)) > 0.0
            }
            None => false,
        }
    }

    fn mark_dirty(&mut self, f: u32) {
        if !self.dirty[f as usize] {
            self.dirty[f as usize] = true;
            self.dirty_list.push(f);
        }
    }

    pub fn is_dirty(&self, f: Face) -> bool {
        self.dirty[f.idx()]
    }

    pub fn has_dirty_faces(&self) -> bool {
        !self.dirty_list.is_empty()
    }

    fn adjust_outgoing(&mut self, v: u32) {
        let start = self.v_out[v as usize];
        if start == INVALID {
            return;
        }
        let mut h = start;
        loop {
            if self.he_face[h as usize] == INVALID {
                self.v_out[v as usize] = h;
                return;
            }
            h = self.he_next[(h ^ 1) as usize];
            if h == start {
                return;
            }
        }
    }

    fn set_next(&mut self, h: u32, n: u32) {
        self.he_next[h as usize] = n;
        self.he_prev[n as usize] = h;
    }

    /// Topological and boundary validity of collapsing `h = (v -> w)` into
    /// `w` placed at `new_pos`. Does not modify the mesh.
    pub fn check_collapse(&self, h: Halfedge, new_pos: Vector2<f64>) -> Result<(), MeshError> {
        let e = h.edge();
        if self.e_del[e.idx()] {
            return Err(MeshError::Deleted);
        }
        let o = h.twin();
        let v = self.from_vertex(h);
        let w = self.to_vertex(h);
        let v_boundary = self.is_boundary_vertex(v);
        let w_boundary = self.is_boundary_vertex(w);
        let edge_boundary = self.is_boundary_edge(e);

        if v_boundary {
            // the removed vertex may only vanish from a straight boundary run
            // along a boundary edge, into its fixed neighbour
            if !edge_boundary || !self.is_straight_boundary(v) || new_pos != self.position(w) {
                return Err(MeshError::BoundaryRuleViolation);
            }
        } else if w_boundary && new_pos != self.position(w) {
            return Err(MeshError::BoundaryRuleViolation);
        }

        // link condition
        let mut vl = INVALID;
        let mut vr = INVALID;
        if !self.is_boundary_halfedge(h) {
            let h1 = self.next(h);
            let h2 = self.next(h1);
            vl = self.to_vertex(h1).0;
            if self.is_boundary_halfedge(h1.twin()) && self.is_boundary_halfedge(h2.twin()) {
                return Err(MeshError::LinkConditionViolation);
            }
        }
        if !self.is_boundary_halfedge(o) {
            let o1 = self.next(o);
            let o2 = self.next(o1);
            vr = self.to_vertex(o1).0;
            if self.is_boundary_halfedge(o1.twin()) && self.is_boundary_halfedge(o2.twin()) {
                return Err(MeshError::LinkConditionViolation);
            }
        }
        if vl == vr {
            return Err(MeshError::LinkConditionViolation);
        }
        if v_boundary && w_boundary && !edge_boundary {
            return Err(MeshError::LinkConditionViolation);
        }
        for n in self.neighbors(v) {
            if n != w && n.0 != vl && n.0 != vr && self.find_halfedge(n, w).is_some() {
                return Err(MeshError::LinkConditionViolation);
            }
        }

        // geometric validity of every surviving face around v and w
        let left = self.face(h);
        let right = self.face(o);
        for center in [v, w] {
            for f in self.vertex_faces(center) {
                if Some(f) == left || Some(f) == right {
                    continue;
                }
                let [a, b, c] = self
                    .face_vertices(f)
                    .map(|x| if x == v || x == w { new_pos } else { self.position(x) });
                if triangle_area(a, b, c) <= AREA_EPSILON {
                    return Err(MeshError::InversionRejected);
                }
            }
        }
        Ok(())
    }

    /// Contracts `h = (v -> w)`: `v` is removed and `w` moves to `new_pos`.
    /// On error the mesh is unchanged.
    pub fn collapse(&mut self, h: Halfedge, new_pos: Vector2<f64>) -> Result<Vertex, MeshError> {
        self.check_collapse(h, new_pos)?;
        let w = self.to_vertex(h);
        let h1 = self.prev(h);
        let o = h.twin();
        let o1 = self.next(o);

        for f in [self.face(h), self.face(o)].into_iter().flatten() {
            self.mark_dirty(f.0);
        }
        self.remove_edge(h);
        if self.he_next[self.he_next[h1.idx()] as usize] == h1.0 {
            self.remove_loop(h1);
        }
        if self.he_next[self.he_next[o1.idx()] as usize] == o1.0 {
            self.remove_loop(o1);
        }
        self.pos[w.idx()] = new_pos;
        let star: Vec<Face> = self.vertex_faces(w).collect();
        for f in star {
            self.mark_dirty(f.0);
        }
        Ok(w)
    }

    fn remove_edge(&mut self, h: Halfedge) {
        let h = h.0;
        let hn = self.he_next[h as usize];
        let hp = self.he_prev[h as usize];
        let o = h ^ 1;
        let on = self.he_next[o as usize];
        let op = self.he_prev[o as usize];
        let fh = self.he_face[h as usize];
        let fo = self.he_face[o as usize];
        let vh = self.he_to[h as usize];
        let vo = self.he_to[o as usize];

        // every halfedge pointing at the removed vertex now points at vh
        let start = self.v_out[vo as usize];
        let mut c = start;
        loop {
            self.he_to[(c ^ 1) as usize] = vh;
            c = self.he_next[(c ^ 1) as usize];
            if c == start {
                break;
            }
        }
        self.set_next(hp, hn);
        self.set_next(op, on);
        if fh != INVALID {
            self.f_he[fh as usize] = hn;
        }
        if fo != INVALID {
            self.f_he[fo as usize] = on;
        }
        if self.v_out[vh as usize] == o {
            self.v_out[vh as usize] = hn;
        }
        self.adjust_outgoing(vh);
        self.v_out[vo as usize] = INVALID;
        self.v_del[vo as usize] = true;
        self.e_del[(h >> 1) as usize] = true;
        self.n_vertices -= 1;
        self.n_edges -= 1;
    }

    fn remove_loop(&mut self, h: Halfedge) {
        let h0 = h.0;
        let h1 = self.he_next[h0 as usize];
        let o0 = h0 ^ 1;
        let o1 = h1 ^ 1;
        let v0 = self.he_to[h0 as usize];
        let v1 = self.he_to[h1 as usize];
        let fh = self.he_face[h0 as usize];
        let fo = self.he_face[o0 as usize];

        let o0_next = self.he_next[o0 as usize];
        let o0_prev = self.he_prev[o0 as usize];
        self.set_next(h1, o0_next);
        self.set_next(o0_prev, h1);
        self.he_face[h1 as usize] = fo;
        self.v_out[v0 as usize] = h1;
        self.adjust_outgoing(v0);
        self.v_out[v1 as usize] = o1;
        self.adjust_outgoing(v1);
        if fo != INVALID && self.f_he[fo as usize] == o0 {
            self.f_he[fo as usize] = h1;
        }
        if fh != INVALID {
            self.f_del[fh as usize] = true;
            self.n_faces -= 1;
            self.mark_dirty(fh);
        }
        self.e_del[(h0 >> 1) as usize] = true;
        self.n_edges -= 1;
    }

    /// Quad `(a, b, c, d)` around interior edge `e`, where `e` joins `a`
    /// and `c` and `b`, `d` are the opposite corners.
    pub fn edge_quad(&self, e: Edge) -> Option<[Vertex; 4]> {
        let h = e.halfedge(0);
        let o = e.halfedge(1);
        if self.is_boundary_halfedge(h) || self.is_boundary_halfedge(o) {
            return None;
        }
        let a = self.from_vertex(h);
        let c = self.to_vertex(h);
        let b = self.to_vertex(self.next(h));
        let d = self.to_vertex(self.next(o));
        Some([a, b, c, d])
    }

    pub fn check_flip(&self, e: Edge) -> Result<(), MeshError> {
        if self.e_del[e.idx()] {
            return Err(MeshError::Deleted);
        }
        let [a, b, c, d] = self.edge_quad(e).ok_or(MeshError::BoundaryEdge)?;
        if b == d || self.find_halfedge(b, d).is_some() {
            return Err(MeshError::NonConvexQuad);
        }
        let [pa, pb, pc, pd] = [a, b, c, d].map(|v| self.position(v));
        // a->c->b and c->a->d are the current faces; the new diagonal b-d
        // yields faces (b, d, c)... in orientation order (a, d, b), (c, b, d)
        if orient2d(pa, pd, pb) <= 0.0 || orient2d(pc, pb, pd) <= 0.0 {
            return Err(MeshError::NonConvexQuad);
        }
        if triangle_area(pa, pd, pb) <= AREA_EPSILON || triangle_area(pc, pb, pd) <= AREA_EPSILON {
            return Err(MeshError::NonConvexQuad);
        }
        Ok(())
    }

    /// Replaces the diagonal of the quad around interior edge `e`.
    pub fn flip(&mut self, e: Edge) -> Result<(), MeshError> {
        self.check_flip(e)?;
        let a0 = e.halfedge(0).0;
        let b0 = e.halfedge(1).0;
        let a1 = self.he_next[a0 as usize];
        let a2 = self.he_next[a1 as usize];
        let b1 = self.he_next[b0 as usize];
        let b2 = self.he_next[b1 as usize];
        let va0 = self.he_to[a0 as usize];
        let va1 = self.he_to[a1 as usize];
        let vb0 = self.he_to[b0 as usize];
        let vb1 = self.he_to[b1 as usize];
        let fa = self.he_face[a0 as usize];
        let fb = self.he_face[b0 as usize];

        self.he_to[a0 as usize] = va1;
        self.he_to[b0 as usize] = vb1;
        self.set_next(a0, a2);
        self.set_next(a2, b1);
        self.set_next(b1, a0);
        self.set_next(b0, b2);
        self.set_next(b2, a1);
        self.set_next(a1, b0);
        self.he_face[a1 as usize] = fb;
        self.he_face[b1 as usize] = fa;
        self.f_he[fa as usize] = a0;
        self.f_he[fb as usize] = b0;
        // b0 used to leave va0 and a0 used to leave vb0
        if self.v_out[va0 as usize] == b0 {
            self.v_out[va0 as usize] = a1;
        }
        if self.v_out[vb0 as usize] == a0 {
            self.v_out[vb0 as usize] = b1;
        }
        self.mark_dirty(fa);
        self.mark_dirty(fb);
        Ok(())
    }

    fn star_valid_at(&self, v: Vertex, p: Vector2<f64>) -> bool {
        self.vertex_faces(v).all(|f| {
            let [a, b, c] = self.face_vertices(f).map(|x| if x == v { p } else { self.position(x) });
            triangle_area(a, b, c) > AREA_EPSILON
        })
    }

    /// Moves `v` by `delta`, halving the step up to five times if a face
    /// would invert. Boundary vertices only slide along straight boundary
    /// runs (corners stay put). Returns the displacement actually applied.
    pub fn move_vertex(&mut self, v: Vertex, delta: Vector2<f64>) -> Result<Vector2<f64>, MeshError> {
        if self.v_del[v.idx()] {
            return Err(MeshError::Deleted);
        }
        if delta == Vector2::zeros() {
            return Ok(delta);
        }
        let origin = self.position(v);
        let mut step = delta;
        if self.is_boundary_vertex(v) {
            if !self.is_straight_boundary(v) {
                return Err(MeshError::BoundaryRuleViolation);
            }
            let (p, n) = self.boundary_neighbors(v).expect("boundary vertex");
            let (pp, pn) = (self.position(p), self.position(n));
            let dir = (pn - pp).normalize();
            let along = step.dot(&dir);
            // stay strictly between the two neighbours
            let lo = (pp - origin).dot(&dir) * 0.9;
            let hi = (pn - origin).dot(&dir) * 0.9;
            let along = along.clamp(lo, hi);
            step = dir * along;
            // keep the run exactly straight for axis-aligned boundaries
            if dir.x == 0.0 {
                step.x = 0.0;
            }
            if dir.y == 0.0 {
                step.y = 0.0;
            }
        }
        for _ in 0..=5 {
            let target = origin + step;
            if self.star_valid_at(v, target) {
                self.pos[v.idx()] = target;
                let star: Vec<Face> = self.vertex_faces(v).collect();
                for f in star {
                    self.mark_dirty(f.0);
                }
                return Ok(step);
            }
            step *= 0.5;
        }
        Err(MeshError::InversionRejected)
    }

    /// Full structural audit: connectivity consistency, manifoldness,
    /// orientation, positions inside the image, element counts.
    pub fn audit(&self) -> Result<(), String> {
        let mut faces = 0;
        for f in self.faces() {
            faces += 1;
            let hs = self.face_halfedges(f);
            if self.next(hs[2]) != hs[0] {
                return Err(format!("face {} is not a triangle", f.0));
            }
            for h in hs {
                if self.face(h) != Some(f) {
                    return Err(format!("halfedge {} does not point back to face {}", h.0, f.0));
                }
                if self.e_del[h.edge().idx()] {
                    return Err(format!("face {} uses deleted edge", f.0));
                }
            }
            if self.face_area(f) <= AREA_EPSILON {
                return Err(format!("face {} has area {}", f.0, self.face_area(f)));
            }
        }
        if faces != self.n_faces {
            return Err(format!("face count {} != stored {}", faces, self.n_faces));
        }
        let mut edges = 0;
        for e in self.edges() {
            edges += 1;
            for i in 0..2 {
                let h = e.halfedge(i);
                if self.prev(self.next(h)) != h || self.next(self.prev(h)) != h {
                    return Err(format!("next/prev mismatch at halfedge {}", h.0));
                }
                if self.v_del[self.to_vertex(h).idx()] {
                    return Err(format!("halfedge {} points at deleted vertex", h.0));
                }
                if let Some(f) = self.face(h) {
                    if self.f_del[f.idx()] {
                        return Err(format!("halfedge {} uses deleted face", h.0));
                    }
                }
            }
            if self.face(e.halfedge(0)).is_none() && self.face(e.halfedge(1)).is_none() {
                return Err(format!("edge {} has no faces", e.0));
            }
            if self.to_vertex(e.halfedge(0)) == self.to_vertex(e.halfedge(1)) {
                return Err(format!("edge {} is a loop", e.0));
            }
        }
        if edges != self.n_edges {
            return Err(format!("edge count {} != stored {}", edges, self.n_edges));
        }
        let mut vertices = 0;
        let (w, h) = (self.width as f64, self.height as f64);
        for v in self.vertices() {
            vertices += 1;
            let p = self.position(v);
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h) {
                return Err(format!("vertex {} outside the image at {p:?}", v.0));
            }
            let mut boundary = 0;
            let mut seen = std::collections::HashSet::new();
            for o in self.outgoing(v) {
                if self.from_vertex(o) != v {
                    return Err(format!("outgoing halfedge {} of vertex {} starts elsewhere", o.0, v.0));
                }
                if !seen.insert(self.to_vertex(o)) {
                    return Err(format!("vertex {} has a duplicate neighbour", v.0));
                }
                if self.is_boundary_halfedge(o) {
                    boundary += 1;
                }
                if seen.len() > 10_000 {
                    return Err(format!("runaway circulation at vertex {}", v.0));
                }
            }
            if boundary > 1 {
                return Err(format!("vertex {} is non-manifold", v.0));
            }
            if boundary == 1 && !self.is_boundary_vertex(v) {
                return Err(format!("boundary vertex {} stores an interior halfedge", v.0));
            }
        }
        if vertices != self.n_vertices {
            return Err(format!("vertex count {} != stored {}", vertices, self.n_vertices));
        }
        Ok(())
    }
}

/// Clockwise circulator over the outgoing halfedges of a vertex.
pub struct Outgoing<'a> {
    mesh: &'a ScreenMesh,
    start: u32,
    current: u32,
}

impl Iterator for Outgoing<'_> {
    type Item = Halfedge;

    fn next(&mut self) -> Option<Halfedge> {
        if self.current == INVALID {
            return None;
        }
        let h = self.current;
        let n = self.mesh.he_next[(h ^ 1) as usize];
        self.current = if n == self.start { INVALID } else { n };
        Some(Halfedge(h))
    }
}

/// Duplicates vertices whose incident triangles form more than one
/// edge-connected fan, returning the rewritten triangle list.
fn split_fans(positions: &mut Vec<Vector2<f64>>, tris: &[[u32; 3]]) -> Vec<[u32; 3]> {
    let corners = tris.len() * 3;
    let mut parent: Vec<usize> = (0..corners).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut spoke: HashMap<(u32, u32), usize> = HashMap::with_capacity(corners * 2);
    for (t, tri) in tris.iter().enumerate() {
        for k in 0..3 {
            let v = tri[k];
            let corner = t * 3 + k;
            for other in [tri[(k + 1) % 3], tri[(k + 2) % 3]] {
                match spoke.get(&(v, other)) {
                    Some(&c) => {
                        let (ra, rb) = (find(&mut parent, c), find(&mut parent, corner));
                        if ra != rb {
                            parent[ra.max(rb)] = ra.min(rb);
                        }
                    }
                    None => {
                        spoke.insert((v, other), corner);
                    }
                }
            }
        }
    }
    let mut fan_vertex: HashMap<usize, u32> = HashMap::new();
    let mut first_fan: Vec<usize> = vec![usize::MAX; positions.len()];
    let mut out = tris.to_vec();
    for (t, tri) in out.iter_mut().enumerate() {
        for k in 0..3 {
            let v = tri[k] as usize;
            let root = find(&mut parent, t * 3 + k);
            if first_fan[v] == usize::MAX {
                first_fan[v] = root;
            }
            if first_fan[v] != root {
                let id = *fan_vertex.entry(root).or_insert_with(|| {
                    positions.push(positions[v]);
                    (positions.len() - 1) as u32
                });
                tri[k] = id;
            }
        }
    }
    out
}
