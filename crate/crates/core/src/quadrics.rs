//! Quadric error objects: per-pixel metrics, per-vertex 3D quadrics, their
//! screen-space restrictions and per-edge metrics.

use std::ops::{Add, AddAssign};

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use thiserror::Error;

use crate::camera::Camera;
use crate::mesh::{Edge, Face, ScreenMesh, Vertex};
use crate::normal_io::NormalMap;

/// Condition number above which a screen quadric is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadricError {
    #[error("screen quadric is singular (condition {cond:e})")]
    SingularSystem { cond: f64 },
    #[error("vertex {0} has no incident faces")]
    EmptyStar(u32),
    #[error("edge {0} lies on the boundary")]
    BoundaryEdge(u32),
}

/// Symmetric 3×3 metric `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric3(pub Matrix3<f64>);

impl Metric3 {
    /// `‖x‖²_M`.
    pub fn norm_sq(&self, x: &Vector3<f64>) -> f64 {
        x.dot(&(self.0 * x))
    }
}

/// `n nᵀ + λ I`.
pub fn pixel_metric(n: &Vector3<f64>, lambda: f64) -> Metric3 {
    Metric3(n * n.transpose() + Matrix3::identity() * lambda)
}

/// `Q(δx) = ⟨δx, A δx⟩ + 2⟨b, δx⟩ + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadric {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub c: f64,
}

impl Default for Quadric {
    fn default() -> Self {
        Quadric::zero()
    }
}

impl Quadric {
    pub fn zero() -> Self {
        Quadric {
            a: Matrix3::zeros(),
            b: Vector3::zeros(),
            c: 0.0,
        }
    }

    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        x.dot(&(self.a * x)) + 2.0 * self.b.dot(x) + self.c
    }

    /// The same quadric expressed around the shifted origin `s`:
    /// `Q'(δx) = Q(s + δx)`.
    pub fn recentered(&self, s: &Vector3<f64>) -> Quadric {
        Quadric {
            a: self.a,
            b: self.b + self.a * s,
            c: self.eval(s),
        }
    }
}

impl Add for Quadric {
    type Output = Quadric;

    fn add(self, o: Quadric) -> Quadric {
        Quadric {
            a: self.a + o.a,
            b: self.b + o.b,
            c: self.c + o.c,
        }
    }
}

impl AddAssign for Quadric {
    fn add_assign(&mut self, o: Quadric) {
        *self = *self + o;
    }
}

/// `Q̃(δu) = ⟨δu, Ã δu⟩ + 2⟨b̃, δu⟩ + c̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenQuadric {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: f64,
}

impl ScreenQuadric {
    pub fn eval(&self, u: &Vector2<f64>) -> f64 {
        u.dot(&(self.a * u)) + 2.0 * self.b.dot(u) + self.c
    }

    /// Minimizer `-Ã⁻¹ b̃`.
    pub fn optimal_displacement(&self) -> Result<Vector2<f64>, QuadricError> {
        if self.b == Vector2::zeros() {
            return Ok(Vector2::zeros());
        }
        let a = self.a;
        let (p, q, r) = (a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]);
        let mean = 0.5 * (p + r);
        let dev = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        let (hi, lo) = (mean + dev, mean - dev);
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(QuadricError::SingularSystem { cond });
        }
        let det = p * r - q * q;
        let b = self.b;
        Ok(-Vector2::new(r * b.x - q * b.y, p * b.y - q * b.x) / det)
    }
}

/// Restriction of `q` to tangent displacements `J δu`.
pub fn screen_quadric(q: &Quadric, j: &Matrix3x2<f64>) -> ScreenQuadric {
    ScreenQuadric {
        a: j.transpose() * q.a * j,
        b: j.transpose() * q.b,
        c: q.c,
    }
}

/// Area-weighted average of the incident face normals.
pub fn vertex_normal(mesh: &ScreenMesh, v: Vertex) -> Vector3<f64> {
    let n: Vector3<f64> = mesh
        .vertex_faces(v)
        .map(|f| {
            let d = mesh.face_data(f);
            d.normal * d.a3
        })
        .sum();
    let len = n.norm();
    if len > 1e-12 {
        n / len
    } else {
        Vector3::z()
    }
}

pub fn vertex_jacobian(mesh: &ScreenMesh, cam: &Camera, v: Vertex) -> Matrix3x2<f64> {
    cam.jacobian_clamped(&vertex_normal(mesh, v), mesh.position(v))
}

/// Contribution of face `f` to the quadric of a vertex at screen point `uv`.
pub fn face_quadric(
    mesh: &ScreenMesh,
    nm: &NormalMap,
    cam: &Camera,
    f: Face,
    uv: Vector2<f64>,
    lambda: f64,
) -> Quadric {
    let data = mesh.face_data(f);
    let j = mesh.face_jacobian(f, cam);
    let bin = mesh.bin(f);
    if bin.is_empty() {
        // one virtual pixel at the centroid carrying the neighbour metric
        let m = data.mean_nn + Matrix3::identity() * lambda;
        let y = j * (uv - mesh.face_centroid(f));
        return Quadric {
            a: m * data.a3,
            b: m * y * data.a3,
            c: y.dot(&(m * y)) * data.a3,
        };
    }
    let w = data.a3 / bin.len() as f64;
    let mut b = Vector3::zeros();
    let mut c = 0.0;
    for &p in bin {
        let n = nm.normal(p as usize);
        let y = j * (uv - mesh.pixel_position(p));
        let ny = n.dot(&y);
        b += n * ny + y * lambda;
        c += ny * ny + lambda * y.norm_squared();
    }
    Quadric {
        a: data.weighted_metric(lambda),
        b: b * w,
        c: c * w,
    }
}

/// Quadric of `v` summed over its star at the vertex's current position.
pub fn vertex_quadric(
    mesh: &ScreenMesh,
    nm: &NormalMap,
    cam: &Camera,
    v: Vertex,
    lambda: f64,
) -> Result<Quadric, QuadricError> {
    let uv = mesh.position(v);
    let mut q = Quadric::zero();
    let mut any = false;
    for f in mesh.vertex_faces(v) {
        q += face_quadric(mesh, nm, cam, f, uv, lambda);
        any = true;
    }
    if any {
        Ok(q)
    } else {
        Err(QuadricError::EmptyStar(v.0))
    }
}

/// `(M_e, n_e)` for an interior edge from its two faces.
pub fn edge_metric(mesh: &ScreenMesh, e: Edge, lambda: f64) -> Result<(Matrix3<f64>, Vector3<f64>), QuadricError> {
    let (Some(f), Some(g)) = mesh.edge_faces(e) else {
        return Err(QuadricError::BoundaryEdge(e.0));
    };
    let (df, dg) = (mesh.face_data(f), mesh.face_data(g));
    let n = df.normal * df.a3 + dg.normal * dg.a3;
    let len = n.norm();
    let n = if len > 1e-12 { n / len } else { Vector3::z() };
    Ok((df.weighted_metric(lambda) + dg.weighted_metric(lambda), n))
}
