//! Software rasterizer binning foreground pixel centres into faces.
//!
//! Ownership of centres lying exactly on an edge is decided by a top-left
//! rule on canonically oriented edge functions, so the result depends only on
//! geometry: re-binning a subset of faces gives exactly what a full pass
//! would.

use std::collections::HashSet;

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use rayon::prelude::*;

use super::{Face, MeshError, ScreenMesh, Vertex, AREA_EPSILON, INVALID};
use crate::camera::{area_factor, Camera};
use crate::normal_io::{pixel_center, NormalMap};

/// Per-face pixel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceData {
    /// Number of pixel centres in the bin.
    pub count: u32,
    /// Unit face normal (bin average, or neighbour average for empty bins).
    pub normal: Vector3<f64>,
    /// Mean of `n_p n_p^T` over the bin (neighbour estimate when empty).
    pub mean_nn: Matrix3<f64>,
    /// Screen area in px².
    pub a2: f64,
    /// Unforeshortened area.
    pub a3: f64,
}

impl Default for FaceData {
    fn default() -> Self {
        FaceData {
            count: 0,
            normal: Vector3::z(),
            mean_nn: Vector3::z() * Vector3::z().transpose(),
            a2: 0.0,
            a3: 0.0,
        }
    }
}

impl FaceData {
    /// `(A3 / |P|) Σ_p (n_p n_p^T + λ I)`, with the bin mean standing in for
    /// empty bins.
    pub fn weighted_metric(&self, lambda: f64) -> Matrix3<f64> {
        (self.mean_nn + Matrix3::identity() * lambda) * self.a3
    }
}

#[inline]
fn edge_function(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Point-in-triangle test for a positively oriented triangle with the given
/// vertex ids. Points on an edge belong to the side the edge's direction
/// designates (top-left rule), evaluated identically from both faces.
pub fn inside_triangle(ids: [u32; 3], pos: [Vector2<f64>; 3], p: Vector2<f64>) -> bool {
    for k in 0..3 {
        let (i, j) = (k, (k + 1) % 3);
        let (a, b) = (pos[i], pos[j]);
        let e = if ids[i] < ids[j] {
            edge_function(a, b, p)
        } else {
            -edge_function(b, a, p)
        };
        if e < 0.0 {
            return false;
        }
        if e == 0.0 {
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            if !(dy > 0.0 || (dy == 0.0 && dx < 0.0)) {
                return false;
            }
        }
    }
    true
}

impl ScreenMesh {
    fn covered_pixels(&self, f: Face, nm: &NormalMap) -> Vec<u32> {
        let vs = self.face_vertices(f);
        let ids = vs.map(|v: Vertex| v.0);
        let pos = vs.map(|v| self.position(v));
        let (w, h) = (self.width as i64, self.height as i64);
        let min_x = pos.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = pos.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pos.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = pos.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let x0 = ((min_x - 0.5).ceil() as i64).max(0);
        let x1 = ((max_x - 0.5).floor() as i64).min(w - 1);
        let y0 = ((min_y - 0.5).ceil() as i64).max(0);
        let y1 = ((max_y - 0.5).floor() as i64).min(h - 1);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = (y * w + x) as usize;
                if !nm.is_foreground(p) {
                    continue;
                }
                let c = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                if inside_triangle(ids, pos, c) {
                    out.push(p as u32);
                }
            }
        }
        out
    }

    fn face_stats(&self, f: Face, nm: &NormalMap, cam: &Camera) -> FaceData {
        let bin = &self.bins[f.idx()];
        let a2 = self.face_area(f);
        let mut data = FaceData {
            a2,
            ..FaceData::default()
        };
        if !bin.is_empty() {
            let mut sum = Vector3::zeros();
            let mut nn = Matrix3::zeros();
            for &p in bin {
                let n = nm.normal(p as usize);
                sum += n;
                nn += n * n.transpose();
            }
            data.count = bin.len() as u32;
            data.mean_nn = nn / bin.len() as f64;
            let len = sum.norm();
            data.normal = if len > 1e-12 { sum / len } else { Vector3::z() };
        }
        data.a3 = area_factor(&cam.jacobian_clamped(&data.normal, self.face_centroid(f))) * a2;
        data
    }

    fn check_degenerate(&self) -> Result<(), MeshError> {
        match self.faces().find(|&f| self.face_area(f) < AREA_EPSILON) {
            Some(f) => Err(MeshError::DegenerateFace(f.0)),
            None => Ok(()),
        }
    }

    /// Rebins every pixel and recomputes all face data.
    pub fn rasterize(&mut self, nm: &NormalMap, cam: &Camera) -> Result<(), MeshError> {
        assert_eq!((nm.width(), nm.height()), (self.width, self.height), "normal map size");
        self.check_degenerate()?;
        let faces: Vec<Face> = self.faces().collect();
        let bins: Vec<Vec<u32>> = faces.par_iter().map(|&f| self.covered_pixels(f, nm)).collect();
        self.owner = vec![INVALID; self.width * self.height];
        for b in self.bins.iter_mut() {
            b.clear();
        }
        for (&f, bin) in faces.iter().zip(bins) {
            for &p in &bin {
                self.owner[p as usize] = f.0;
            }
            self.bins[f.idx()] = bin;
        }
        let data: Vec<FaceData> = faces.par_iter().map(|&f| self.face_stats(f, nm, cam)).collect();
        for (&f, d) in faces.iter().zip(data) {
            self.face_data[f.idx()] = d;
        }
        let empty: Vec<u32> = faces
            .iter()
            .filter(|f| self.bins[f.idx()].is_empty())
            .map(|f| f.0)
            .collect();
        self.fill_empty(empty, cam);
        for &f in &self.dirty_list {
            self.dirty[f as usize] = false;
        }
        self.dirty_list.clear();
        Ok(())
    }

    /// Rebins only the faces touched since the last (re)binning.
    pub fn rebin_dirty(&mut self, nm: &NormalMap, cam: &Camera) -> Result<(), MeshError> {
        if self.owner.is_empty() {
            return self.rasterize(nm, cam);
        }
        let mut list = std::mem::take(&mut self.dirty_list);
        list.sort_unstable();
        list.dedup();
        for &f in &list {
            self.dirty[f as usize] = false;
            for p in std::mem::take(&mut self.bins[f as usize]) {
                if self.owner[p as usize] == f {
                    self.owner[p as usize] = INVALID;
                }
            }
        }
        let live: Vec<u32> = list.iter().copied().filter(|&f| !self.f_del[f as usize]).collect();
        for &f in &live {
            if self.face_area(Face(f)) < AREA_EPSILON {
                return Err(MeshError::DegenerateFace(f));
            }
        }
        let mut touched: Vec<u32> = live.clone();
        for &f in &live {
            for p in self.covered_pixels(Face(f), nm) {
                let prev = self.owner[p as usize];
                if prev != INVALID && prev != f {
                    // only possible if the edited region moved its outline
                    let bin = &mut self.bins[prev as usize];
                    if let Some(i) = bin.iter().position(|&q| q == p) {
                        bin.swap_remove(i);
                        bin.sort_unstable();
                    }
                    touched.push(prev);
                }
                self.owner[p as usize] = f;
                self.bins[f as usize].push(p);
            }
            self.bins[f as usize].sort_unstable();
        }
        touched.sort_unstable();
        touched.dedup();
        for &f in &touched {
            self.face_data[f as usize] = self.face_stats(Face(f), nm, cam);
        }
        // empty faces among the touched ones and their neighbours, whose
        // fallback estimates may have changed
        let mut empty = HashSet::new();
        for &f in &touched {
            if self.bins[f as usize].is_empty() {
                empty.insert(f);
            }
            for h in self.face_halfedges(Face(f)) {
                if let Some(g) = self.face(h.twin()) {
                    if self.bins[g.idx()].is_empty() {
                        empty.insert(g.0);
                    }
                }
            }
        }
        let mut empty: Vec<u32> = empty.into_iter().collect();
        empty.sort_unstable();
        self.fill_empty(empty, cam);
        Ok(())
    }

    /// Assigns normals and metric means to empty-bin faces from their
    /// edge-adjacent faces (A3-weighted), propagating inward over rounds.
    fn fill_empty(&mut self, faces: Vec<u32>, cam: &Camera) {
        let mut pending: HashSet<u32> = faces.iter().copied().collect();
        let mut order = faces;
        while !order.is_empty() {
            let mut updates = Vec::new();
            for &f in &order {
                let mut n = Vector3::zeros();
                let mut nn = Matrix3::zeros();
                let mut wsum = 0.0;
                for h in self.face_halfedges(Face(f)) {
                    let Some(g) = self.face(h.twin()) else { continue };
                    if pending.contains(&g.0) {
                        continue;
                    }
                    let d = &self.face_data[g.idx()];
                    let w = d.a3.max(AREA_EPSILON);
                    n += d.normal * w;
                    nn += d.mean_nn * w;
                    wsum += w;
                }
                if wsum > 0.0 && n.norm() > 1e-12 {
                    updates.push((f, n.normalize(), nn / wsum));
                }
            }
            if updates.is_empty() {
                break;
            }
            for (f, n, nn) in updates {
                pending.remove(&f);
                let centroid = self.face_centroid(Face(f));
                let d = &mut self.face_data[f as usize];
                d.count = 0;
                d.normal = n;
                d.mean_nn = nn;
                d.a3 = area_factor(&cam.jacobian_clamped(&n, centroid)) * d.a2;
            }
            order.retain(|f| pending.contains(f));
        }
        for f in order {
            let a2 = self.face_area(Face(f));
            let centroid = self.face_centroid(Face(f));
            let mut d = FaceData {
                a2,
                ..FaceData::default()
            };
            d.a3 = area_factor(&cam.jacobian_clamped(&d.normal, centroid)) * a2;
            self.face_data[f as usize] = d;
        }
    }

    pub fn face_data(&self, f: Face) -> &FaceData {
        &self.face_data[f.idx()]
    }

    /// Pixel ids binned into `f`, ascending.
    pub fn bin(&self, f: Face) -> &[u32] {
        &self.bins[f.idx()]
    }

    /// Face owning the pixel centre, if any. Empty before rasterization.
    pub fn owner(&self, pixel: usize) -> Option<Face> {
        self.owner.get(pixel).and_then(|&f| (f != INVALID).then_some(Face(f)))
    }

    /// Jacobian of `f` from its normal, evaluated at the centroid.
    pub fn face_jacobian(&self, f: Face, cam: &Camera) -> Matrix3x2<f64> {
        cam.jacobian_clamped(&self.face_data[f.idx()].normal, self.face_centroid(f))
    }

    /// Foreground pixels not covered by any face.
    pub fn uncovered_pixels(&self, nm: &NormalMap) -> usize {
        (0..nm.len())
            .filter(|&p| nm.is_foreground(p) && self.owner.get(p).is_none_or(|&f| f == INVALID))
            .count()
    }

    /// Brute-force binning by testing every live face against every pixel
    /// in its bounding box; used to cross-check incremental rebinning.
    pub fn reference_bins(&self, nm: &NormalMap) -> Vec<(Face, Vec<u32>)> {
        self.faces().map(|f| (f, self.covered_pixels(f, nm))).collect()
    }

    pub(crate) fn pixel_position(&self, pixel: u32) -> Vector2<f64> {
        pixel_center(self.width, pixel as usize)
    }
}
