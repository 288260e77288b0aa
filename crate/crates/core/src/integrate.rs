//! Depth integration on a screen mesh: a cotangent-weighted least-squares
//! system with one unknown per vertex, solved by preconditioned CG.
//!
//! Unknowns are depths (orthographic) or log z-depths (perspective).

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Camera;
use crate::mesh::{Face, ScreenMesh, Vertex};
use crate::normal_io::NormalMap;

/// Relative residual at which CG stops.
pub const TOLERANCE: f64 = 1e-8;

/// Smallest admissible sine of a triangle angle.
pub const MIN_ANGLE_SINE: f64 = 1e-12;

const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("face {face} has a degenerate angle")]
    DegenerateAngle { face: u32 },
    #[error("solver stopped after {} iterations at relative residual {:e}", .0.iterations, .0.residual)]
    NoConvergence(Box<Solution>),
}

/// `(m_f, b_f)`: mean of `<r_p, n_p>²` and of `D ⊙ <r_p, n_p> (n_x, n_y)`
/// over the face's pixels, with the ray scaled to unit z.
///
/// A face without pixels samples the pixel containing its centroid, or its
/// own normal when that pixel is masked out.
pub fn face_coefficients(mesh: &ScreenMesh, nm: &NormalMap, cam: &Camera, f: Face) -> (f64, Vector2<f64>) {
    let d = cam.integration_constant();
    let term = |u: Vector2<f64>, n: Vector3<f64>| {
        let rn = cam.ray_unnormalized(u).dot(&n);
        (rn * rn, Vector2::new(n.x, n.y) * rn)
    };
    let bin = mesh.bin(f);
    let (m, b) = if bin.is_empty() {
        let c = mesh.face_centroid(f);
        let (x, y) = (c.x.floor(), c.y.floor());
        let inside = x >= 0.0 && y >= 0.0 && (x as usize) < nm.width() && (y as usize) < nm.height();
        let p = y as usize * nm.width() + x as usize;
        if inside && nm.is_foreground(p) {
            term(nm.pixel_center(p), nm.normal(p))
        } else {
            term(c, mesh.face_data(f).normal)
        }
    } else {
        let (mut m, mut b) = (0.0, Vector2::zeros());
        for &p in bin {
            let (tm, tb) = term(nm.pixel_center(p as usize), nm.normal(p as usize));
            m += tm;
            b += tb;
        }
        let k = bin.len() as f64;
        (m / k, b / k)
    };
    (m, b.component_mul(&d))
}

/// Sparse symmetric system over the live vertices of a mesh.
#[derive(Debug, Clone)]
pub struct IntegrationSystem {
    /// Live mesh vertices in row order.
    pub vertices: Vec<Vertex>,
    /// Mesh vertex id to row (`u32::MAX` for deleted vertices).
    pub row_of: Vec<u32>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Connected component of each row.
    pub component: Vec<u32>,
    pub component_size: Vec<usize>,
    /// Weight of the per-component mean-zero penalty.
    pub rho: f64,
}

/// Cotangent of the angle at `o` in triangle `(o, a, b)`.
fn cot_at(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> Option<f64> {
    let (x, y) = (a - o, b - o);
    let cross = (x.x * y.y - x.y * y.x).abs();
    let sin = cross / (x.norm() * y.norm());
    (sin >= MIN_ANGLE_SINE).then(|| x.dot(&y) / cross)
}

pub fn assemble(mesh: &ScreenMesh, nm: &NormalMap, cam: &Camera) -> Result<IntegrationSystem, IntegrateError> {
    let vertices: Vec<Vertex> = mesh.vertices().collect();
    let mut row_of = vec![u32::MAX; mesh.vertex_capacity()];
    for (i, v) in vertices.iter().enumerate() {
        row_of[v.idx()] = i as u32;
    }
    let faces: Vec<Face> = mesh.faces().collect();
    // per face: weights of its three halfedges and rhs contributions
    type FaceTerms = ([f64; 3], [(u32, f64); 3]);
    let terms: Vec<Result<FaceTerms, IntegrateError>> = faces
        .par_iter()
        .map(|&f| {
            let (m, b) = face_coefficients(mesh, nm, cam, f);
            let hs = mesh.face_halfedges(f);
            let mut w = [0.0; 3];
            let mut rhs = [(0u32, 0.0); 3];
            for (k, &h) in hs.iter().enumerate() {
                let v = mesh.from_vertex(h);
                let u = mesh.to_vertex(h);
                let o = mesh.to_vertex(mesh.next(h));
                let (pv, pu, po) = (mesh.position(v), mesh.position(u), mesh.position(o));
                let omega = cot_at(po, pv, pu).ok_or(IntegrateError::DegenerateAngle { face: f.0 })?;
                w[k] = omega * m;
                let g = omega * b.dot(&(pv - pu));
                rhs[k] = (row_of[v.idx()], -g);
            }
            // each edge term enters both endpoints with opposite sign
            let mut out = [(0u32, 0.0); 3];
            for k in 0..3 {
                out[k].0 = rhs[k].0;
            }
            for k in 0..3 {
                out[k].1 += rhs[k].1;
                out[(k + 1) % 3].1 -= rhs[k].1;
            }
            Ok((w, out))
        })
        .collect();

    let mut edge_w = vec![0.0; mesh.edge_capacity()];
    let mut rhs = vec![0.0; vertices.len()];
    for (&f, t) in faces.iter().zip(terms) {
        let (w, r) = t?;
        for (k, h) in mesh.face_halfedges(f).into_iter().enumerate() {
            edge_w[h.edge().idx()] += w[k];
        }
        for (row, val) in r {
            rhs[row as usize] += val;
        }
    }

    let mut row_ptr = Vec::with_capacity(vertices.len() + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for &v in &vertices {
        let mut row: Vec<(u32, f64)> = mesh
            .outgoing(v)
            .map(|h| (row_of[mesh.to_vertex(h).idx()], -edge_w[h.edge().idx()]))
            .collect();
        let diag: f64 = -row.iter().map(|&(_, w)| w).sum::<f64>();
        row.push((row_of[v.idx()], diag));
        row.sort_unstable_by_key(|&(c, _)| c);
        for (c, w) in row {
            cols.push(c);
            vals.push(w);
        }
        row_ptr.push(cols.len());
    }

    let (component, component_size) = components(&row_ptr, &cols);
    let n = vertices.len().max(1) as f64;
    let mut trace = 0.0;
    for r in 0..vertices.len() {
        for k in row_ptr[r]..row_ptr[r + 1] {
            if cols[k] as usize == r {
                trace += vals[k];
            }
        }
    }
    let rho = if trace > 0.0 { trace / n } else { 1.0 };
    Ok(IntegrationSystem {
        vertices,
        row_of,
        row_ptr,
        cols,
        vals,
        rhs,
        component,
        component_size,
        rho,
    })
}

fn components(row_ptr: &[usize], cols: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let n = row_ptr.len() - 1;
    let mut comp = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for s in 0..n {
        if comp[s] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        comp[s] = id;
        stack.push(s);
        while let Some(r) = stack.pop() {
            size += 1;
            for &c in &cols[row_ptr[r]..row_ptr[r + 1]] {
                if comp[c as usize] == u32::MAX {
                    comp[c as usize] = id;
                    stack.push(c as usize);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

impl IntegrationSystem {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Matrix entry `L[r][c]` before gauge fixing.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[range.clone()].binary_search(&(c as u32)) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Row sums of `L` before gauge fixing.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.len())
            .map(|r| self.vals[self.row_ptr[r]..self.row_ptr[r + 1]].iter().sum())
            .collect()
    }

    /// `L x`, without the gauge term.
    pub fn apply_laplacian(&self, x: &[f64], out: &mut [f64]) {
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
            let base = ci * CHUNK;
            for (i, o) in chunk.iter_mut().enumerate() {
                let r = base + i;
                let mut s = 0.0;
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    s += self.vals[k] * x[self.cols[k] as usize];
                }
                *o = s;
            }
        });
    }

    fn component_sums(&self, x: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.component_size.len()];
        for (r, &xi) in x.iter().enumerate() {
            sums[self.component[r] as usize] += xi;
        }
        sums
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_laplacian(x, out);
        let sums = self.component_sums(x);
        let scale: Vec<f64> = sums
            .iter()
            .zip(&self.component_size)
            .map(|(s, &n)| self.rho * s / n as f64)
            .collect();
        for (r, o) in out.iter_mut().enumerate() {
            *o += scale[self.component[r] as usize];
        }
    }

    /// `½ zᵀ L z − rhsᵀ z`, the discrete energy up to a constant.
    pub fn energy(&self, z: &[f64]) -> f64 {
        let mut lz = vec![0.0; z.len()];
        self.apply_laplacian(z, &mut lz);
        0.5 * dot(z, &lz) - dot(&self.rhs, z)
    }
}

/// Per-vertex solution in system row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub z: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned CG on `L + ρ Σ_c 1_c 1_cᵀ / n_c`, which fixes the
/// mean of every connected component to zero.
pub fn solve(sys: &IntegrationSystem) -> Result<Solution, IntegrateError> {
    let n = sys.len();
    let norm_b = dot(&sys.rhs, &sys.rhs).sqrt();
    if norm_b == 0.0 {
        return Ok(Solution {
            z: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut inv_diag = vec![0.0; n];
    for (r, d) in inv_diag.iter_mut().enumerate() {
        let c = sys.component[r] as usize;
        let v = sys.entry(r, r) + sys.rho / sys.component_size[c] as f64;
        *d = if v > 0.0 { 1.0 / v } else { 1.0 };
    }
    let mut x = vec![0.0; n];
    let mut r = sys.rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let max_iter = 10 * n.max(1);
    let mut best = (f64::INFINITY, x.clone());
    let mut residual = 1.0;
    for it in 1..=max_iter {
        sys.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        x.par_chunks_mut(CHUNK)
            .zip(r.par_chunks_mut(CHUNK))
            .zip(p.par_chunks(CHUNK).zip(ap.par_chunks(CHUNK)))
            .for_each(|((xc, rc), (pc, apc))| {
                for i in 0..xc.len() {
                    xc[i] += alpha * pc[i];
                    rc[i] -= alpha * apc[i];
                }
            });
        residual = dot(&r, &r).sqrt() / norm_b;
        if residual <= TOLERANCE {
            return Ok(Solution {
                z: x,
                iterations: it,
                residual,
            });
        }
        if residual < best.0 {
            best = (residual, x.clone());
        }
        z.par_chunks_mut(CHUNK)
            .zip(r.par_chunks(CHUNK).zip(inv_diag.par_chunks(CHUNK)))
            .for_each(|(zc, (rc, dc))| {
                for i in 0..zc.len() {
                    zc[i] = rc[i] * dc[i];
                }
            });
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_chunks_mut(CHUNK).zip(z.par_chunks(CHUNK)).for_each(|(pc, zc)| {
            for i in 0..pc.len() {
                pc[i] = zc[i] + beta * pc[i];
            }
        });
    }
    let (res, z) = if best.0 < residual { best } else { (residual, x) };
    Err(IntegrateError::NoConvergence(Box::new(Solution {
        z,
        iterations: max_iter,
        residual: res,
    })))
}

/// Integrated surface: screen mesh connectivity plus one unknown per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMesh {
    pub camera: Camera,
    /// Live mesh vertices in row order.
    pub vertices: Vec<Vertex>,
    pub row_of: Vec<u32>,
    pub uv: Vec<Vector2<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// Depth (orthographic) or log z-depth (perspective) per row.
    pub z: Vec<f64>,
}

impl DepthMesh {
    pub fn new(mesh: &ScreenMesh, sys: &IntegrationSystem, z: Vec<f64>, camera: Camera) -> Self {
        let uv = sys.vertices.iter().map(|&v| mesh.position(v)).collect();
        let faces = mesh
            .faces()
            .map(|f| mesh.face_vertices(f).map(|v| sys.row_of[v.idx()]))
            .collect();
        DepthMesh {
            camera,
            vertices: sys.vertices.clone(),
            row_of: sys.row_of.clone(),
            uv,
            faces,
            z,
        }
    }

    /// z-depth of a row: `z` itself, or `exp(z)` under perspective.
    pub fn depth(&self, row: usize) -> f64 {
        match self.camera {
            Camera::Orthographic => self.z[row],
            Camera::Perspective { .. } => self.z[row].exp(),
        }
    }

    /// 3D vertex positions. Orthographic points are `(u, v, z)` scaled by
    /// the pixel pitch; perspective points are `exp(z)` times the unit-z ray.
    pub fn unproject(&self, pixel_pitch: f64) -> Vec<Vector3<f64>> {
        self.uv
            .iter()
            .zip(&self.z)
            .map(|(u, &z)| match self.camera {
                Camera::Orthographic => Vector3::new(u.x, u.y, z) * pixel_pitch,
                Camera::Perspective { .. } => self.camera.ray_unnormalized(*u) * z.exp(),
            })
            .collect()
    }

    pub fn obj_string(&self, pixel_pitch: f64) -> String {
        let mut s = String::with_capacity(self.uv.len() * 48 + self.faces.len() * 24);
        for x in self.unproject(pixel_pitch) {
            let _ = writeln!(s, "v {:.8e} {:.8e} {:.8e}", x.x, x.y, x.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path, pixel_pitch: f64) -> io::Result<()> {
        std::fs::write(path, self.obj_string(pixel_pitch))
    }

    /// One row per vertex: `u,v,z,depth`.
    pub fn write_depth_csv(&self, path: &Path) -> io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["u", "v", "z", "depth"])?;
        for (r, u) in self.uv.iter().enumerate() {
            w.write_record([
                u.x.to_string(),
                u.y.to_string(),
                self.z[r].to_string(),
                self.depth(r).to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Assembles and solves in one go.
pub fn integrate(mesh: &ScreenMesh, nm: &NormalMap, cam: &Camera) -> Result<DepthMesh, IntegrateError> {
    let sys = assemble(mesh, nm, cam)?;
    let sol = solve(&sys)?;
    Ok(DepthMesh::new(mesh, &sys, sol.z, *cam))
}
