//! In-memory pipeline: mesh initialisation, binning, remeshing, integration.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::camera::Camera;
use crate::integrate::{self, DepthMesh, IntegrateError};
use crate::mesh::{MeshError, ScreenMesh};
use crate::normal_io::NormalMap;
use crate::remesh::{self, IterationStats, RemeshConfig, RemeshError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Remesh(#[from] RemeshError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// Wall time per stage in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub init_ms: f64,
    pub rasterize_ms: f64,
    pub remesh_ms: f64,
    pub integrate_ms: f64,
}

impl StageTimings {
    pub fn meshing_ms(&self) -> f64 {
        self.init_ms + self.rasterize_ms + self.remesh_ms
    }

    pub fn total_ms(&self) -> f64 {
        self.meshing_ms() + self.integrate_ms
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub mesh: ScreenMesh,
    pub depth: DepthMesh,
    pub stats: Vec<IterationStats>,
    pub timings: StageTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Builds and bins the full-resolution mesh, remeshes it unless `remesh`
/// is `None`, and returns the mesh before integration.
pub fn build_mesh(
    nm: &NormalMap,
    cam: &Camera,
    remesh: Option<&RemeshConfig>,
) -> Result<(ScreenMesh, Vec<IterationStats>, StageTimings), PipelineError> {
    if let Some(cfg) = remesh {
        cfg.validate()?;
    }
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let mut mesh = ScreenMesh::from_mask(nm)?;
    timings.init_ms = ms_since(t);
    let t = Instant::now();
    mesh.rasterize(nm, cam)?;
    timings.rasterize_ms = ms_since(t);
    let mut stats = Vec::new();
    if let Some(cfg) = remesh {
        let t = Instant::now();
        stats = remesh::run(&mut mesh, nm, cam, cfg)?;
        timings.remesh_ms = ms_since(t);
    }
    log::info!(
        "meshing: init {:.1} ms, rasterize {:.1} ms, remesh {:.1} ms, |V|={}",
        timings.init_ms,
        timings.rasterize_ms,
        timings.remesh_ms,
        mesh.vertex_count()
    );
    Ok((mesh, stats, timings))
}

/// Full pipeline on an in-memory normal map.
pub fn reconstruct(
    nm: &NormalMap,
    cam: &Camera,
    remesh: Option<&RemeshConfig>,
) -> Result<Reconstruction, PipelineError> {
    let (mesh, stats, mut timings) = build_mesh(nm, cam, remesh)?;
    let t = Instant::now();
    let depth = integrate::integrate(&mesh, nm, cam)?;
    timings.integrate_ms = ms_since(t);
    log::info!("integrate: {:.1} ms", timings.integrate_ms);
    Ok(Reconstruction {
        mesh,
        depth,
        stats,
        timings,
    })
}
