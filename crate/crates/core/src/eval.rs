//! Error metrics against analytic ground truth and parameter sweeps.

use std::io;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::integrate::{self, DepthMesh};
use crate::mesh::inside_triangle;
use crate::mesh::{orient2d, ScreenMesh};
use crate::normal_io::{add_noise, pixel_center, synthesize, Descriptor, GroundTruth, NormalIoError, NormalMap};
use crate::pipeline::{reconstruct, PipelineError, StageTimings};
use crate::remesh::{RemeshConfig, StopMode};

/// Minimum fraction of foreground pixels the mesh has to cover.
pub const MIN_COVERAGE: f64 = 0.99;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gauge alignment needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("gauge alignment is degenerate: all predictions are zero")]
    DegenerateFit,
    #[error("mesh covers {covered} of {total} foreground pixels")]
    Coverage { covered: usize, total: usize },
    #[error("ground truth is {gt_w}x{gt_h} but the mesh expects {width}x{height}")]
    DomainMismatch {
        width: usize,
        height: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("empty sweep")]
    EmptySweep,
    #[error(transparent)]
    Scene(#[from] NormalIoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// Removes the gauge freedom of `pred`: a least-squares offset under
/// orthographic projection, a least-squares positive scale under
/// perspective projection.
pub fn align_gauge(pred: &[f64], gt: &[f64], cam: &Camera) -> Result<Vec<f64>, EvalError> {
    assert_eq!(pred.len(), gt.len());
    if pred.len() < 2 {
        return Err(EvalError::TooFewSamples(pred.len()));
    }
    match cam {
        Camera::Orthographic => {
            let c = gt.iter().zip(pred).map(|(g, p)| g - p).sum::<f64>() / pred.len() as f64;
            Ok(pred.iter().map(|p| p + c).collect())
        }
        Camera::Perspective { .. } => {
            let pp: f64 = pred.iter().map(|p| p * p).sum();
            if pp == 0.0 {
                return Err(EvalError::DegenerateFit);
            }
            let s = (pred.iter().zip(gt).map(|(p, g)| p * g).sum::<f64>() / pp).max(0.0);
            Ok(pred.iter().map(|p| p * s).collect())
        }
    }
}

/// Per-pixel evaluation of an integrated mesh.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub made: f64,
    /// Mean angular error of face normals, in degrees.
    pub mae: f64,
    pub vertex_count: usize,
    pub foreground_pixels: usize,
    pub covered_pixels: usize,
    pub compression_ratio: f64,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct SurfaceError {
    pub report: EvalReport,
    /// Absolute depth error per pixel; NaN where not evaluated.
    pub error_map: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

/// Resamples the mesh at pixel centres: for every covered pixel, the
/// interpolated depth and the face normal.
fn resample(dm: &DepthMesh, width: usize, height: usize) -> Vec<Option<(f64, Vector3<f64>)>> {
    let mut out = vec![None; width * height];
    let points = dm.unproject(1.0);
    for f in &dm.faces {
        let pos = f.map(|r| dm.uv[r as usize]);
        let area = orient2d(pos[0], pos[1], pos[2]);
        if area <= 0.0 {
            continue;
        }
        let [p0, p1, p2] = f.map(|r| points[r as usize]);
        let n = (p1 - p0).cross(&(p2 - p0));
        let n = if n.norm() > 0.0 { n.normalize() } else { Vector3::z() };
        let lo = pos.iter().fold(Vector2::repeat(f64::INFINITY), |a, p| a.inf(p));
        let hi = pos.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        let x0 = (lo.x - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo.y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((hi.x - 0.5).floor() as i64).min(width as i64 - 1);
        let y1 = ((hi.y - 0.5).floor() as i64).min(height as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = y * width + x;
                let c = pixel_center(width, p);
                if out[p].is_some() || !inside_triangle(*f, pos, c) {
                    continue;
                }
                let w0 = orient2d(pos[1], pos[2], c) / area;
                let w1 = orient2d(pos[2], pos[0], c) / area;
                let w2 = 1.0 - w0 - w1;
                let z = w0 * dm.z[f[0] as usize] + w1 * dm.z[f[1] as usize] + w2 * dm.z[f[2] as usize];
                let depth = match dm.camera {
                    Camera::Orthographic => z,
                    Camera::Perspective { .. } => z.exp(),
                };
                out[p] = Some((depth, n));
            }
        }
    }
    out
}

/// Compares an integrated mesh against analytic ground truth.
pub fn surface_error(dm: &DepthMesh, gt: &GroundTruth) -> Result<SurfaceError, EvalError> {
    let (w, h) = (gt.width, gt.height);
    if dm.uv.iter().any(|u| u.x > w as f64 || u.y > h as f64) {
        return Err(EvalError::DomainMismatch {
            width: dm.uv.iter().map(|u| u.x).fold(0.0, f64::max).ceil() as usize,
            height: dm.uv.iter().map(|u| u.y).fold(0.0, f64::max).ceil() as usize,
            gt_w: w,
            gt_h: h,
        });
    }
    let samples = resample(dm, w, h);
    let total = gt.mask.iter().filter(|&&m| m).count();
    let pixels: Vec<usize> = (0..w * h).filter(|&p| gt.mask[p] && samples[p].is_some()).collect();
    if (pixels.len() as f64) < MIN_COVERAGE * total as f64 {
        return Err(EvalError::Coverage {
            covered: pixels.len(),
            total,
        });
    }
    let pred: Vec<f64> = pixels.iter().map(|&p| samples[p].unwrap().0).collect();
    let truth: Vec<f64> = pixels.iter().map(|&p| gt.depth[p]).collect();
    let aligned = align_gauge(&pred, &truth, &gt.camera)?;
    let mut error_map = vec![f64::NAN; w * h];
    let (mut sq, mut abs, mut ang) = (0.0, 0.0, 0.0);
    for (i, &p) in pixels.iter().enumerate() {
        let e = aligned[i] - truth[i];
        error_map[p] = e.abs();
        sq += e * e;
        abs += e.abs();
        let n = samples[p].unwrap().1;
        ang += n.dot(&gt.normals[p]).clamp(-1.0, 1.0).acos().to_degrees();
    }
    let k = pixels.len() as f64;
    let report = EvalReport {
        rmse: (sq / k).sqrt(),
        made: abs / k,
        mae: ang / k,
        vertex_count: dm.uv.len(),
        foreground_pixels: total,
        covered_pixels: pixels.len(),
        compression_ratio: 1.0 - dm.uv.len() as f64 / total as f64,
        timings: StageTimings::default(),
    };
    Ok(SurfaceError {
        report,
        error_map,
        width: w,
        height: h,
    })
}

impl SurfaceError {
    /// 16-bit grayscale PNG, white at `max_error` (the largest error when
    /// `None`), black outside the evaluated pixels.
    pub fn write_error_png(&self, path: &Path, max_error: Option<f64>) -> Result<(), EvalError> {
        let max = max_error.unwrap_or_else(|| {
            self.error_map
                .iter()
                .copied()
                .filter(|e| e.is_finite())
                .fold(0.0, f64::max)
        });
        let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
        let data: Vec<u16> = self
            .error_map
            .iter()
            .map(|&e| {
                if e.is_finite() {
                    (e * scale).clamp(0.0, 65535.0).round() as u16
                } else {
                    0
                }
            })
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| io::Error::other(e.to_string()))?;
        Ok(())
    }
}

/// Vertex density per pixel as an 8-bit PNG: the number of mesh vertices
/// falling into each pixel square, saturated at 1.
pub fn write_density_png(mesh: &ScreenMesh, path: &Path) -> Result<(), EvalError> {
    let (w, h) = (mesh.width(), mesh.height());
    let mut data = vec![0u8; w * h];
    for v in mesh.vertices() {
        let p = mesh.position(v);
        let x = (p.x.floor() as usize).min(w - 1);
        let y = (p.y.floor() as usize).min(h - 1);
        data[y * w + x] = 255;
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| io::Error::other(e.to_string()))?;
    Ok(())
}

/// A synthetic scene to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub descriptor: Descriptor,
    pub width: usize,
    pub height: usize,
    pub camera: Camera,
    pub noise_deg: f64,
    pub seed: u64,
}

impl Scene {
    pub fn synthesize(&self) -> Result<(NormalMap, GroundTruth), EvalError> {
        let (nm, gt) = synthesize(&self.descriptor, self.width, self.height, &self.camera)?;
        Ok((add_noise(&nm, self.noise_deg, self.seed), gt))
    }

    /// The same scene sampled at `s` times the resolution.
    pub fn rescaled(&self, s: f64) -> Scene {
        let camera = match self.camera {
            Camera::Orthographic => Camera::Orthographic,
            Camera::Perspective { fx, fy, cx, cy } => Camera::Perspective {
                fx: fx * s,
                fy: fy * s,
                cx: cx * s,
                cy: cy * s,
            },
        };
        Scene {
            descriptor: self.descriptor.scaled(s),
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
            camera,
            ..*self
        }
    }
}

/// Reconstructs `scene` and evaluates the result.
pub fn evaluate(scene: &Scene, cfg: Option<&RemeshConfig>) -> Result<EvalReport, EvalError> {
    let (nm, gt) = scene.synthesize()?;
    let rec = reconstruct(&nm, &scene.camera, cfg)?;
    let mut report = surface_error(&rec.depth, &gt)?.report;
    report.timings = rec.timings;
    Ok(report)
}

/// What a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    Threshold(Vec<f64>),
    NoiseDeg(Vec<f64>),
    /// Image sizes (width); height follows the scene's aspect ratio.
    Resolution(Vec<usize>),
}

impl Sweep {
    fn points(&self) -> Vec<f64> {
        match self {
            Sweep::Threshold(v) | Sweep::NoiseDeg(v) => v.clone(),
            Sweep::Resolution(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn parameter_name(&self) -> &'static str {
        match self {
            Sweep::Threshold(_) => "threshold",
            Sweep::NoiseDeg(_) => "noise_deg",
            Sweep::Resolution(_) => "resolution",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub parameter: f64,
    pub report: Option<EvalReport>,
    /// Assembly plus solve on the undecimated mesh (resolution sweeps).
    pub full_res_solve_ms: Option<f64>,
    pub error: Option<String>,
}

fn full_res_solve_ms(scene: &Scene) -> Result<f64, EvalError> {
    let (nm, _) = scene.synthesize()?;
    let mut mesh = ScreenMesh::from_mask(&nm).map_err(PipelineError::from)?;
    mesh.rasterize(&nm, &scene.camera).map_err(PipelineError::from)?;
    let t = Instant::now();
    integrate::integrate(&mesh, &nm, &scene.camera).map_err(PipelineError::from)?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// One evaluation per sweep point. Failures are recorded per row. Threshold
/// and noise points run in parallel; resolution points run one after the
/// other so their timings do not compete.
pub fn sweep(kind: &Sweep, scene: &Scene, cfg: &RemeshConfig) -> Result<Vec<SweepRow>, EvalError> {
    let points = kind.points();
    if points.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let run = |x: f64| -> SweepRow {
        let (scene, cfg) = match kind {
            Sweep::Threshold(_) => (
                *scene,
                RemeshConfig {
                    mode: StopMode::Threshold(x),
                    ..*cfg
                },
            ),
            Sweep::NoiseDeg(_) => (Scene { noise_deg: x, ..*scene }, *cfg),
            Sweep::Resolution(_) => (scene.rescaled(x / scene.width as f64), *cfg),
        };
        let result = evaluate(&scene, Some(&cfg)).and_then(|r| {
            let full = match kind {
                Sweep::Resolution(_) => Some(full_res_solve_ms(&scene)?),
                _ => None,
            };
            Ok((r, full))
        });
        match result {
            Ok((r, full)) => SweepRow {
                parameter: x,
                report: Some(r),
                full_res_solve_ms: full,
                error: None,
            },
            Err(e) => {
                log::warn!("{} = {x}: {e}", kind.parameter_name());
                SweepRow {
                    parameter: x,
                    report: None,
                    full_res_solve_ms: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    Ok(match kind {
        Sweep::Resolution(_) => points.into_iter().map(run).collect(),
        _ => points.into_par_iter().map(run).collect(),
    })
}

/// Writes sweep rows as CSV, one row per point.
pub fn write_sweep_csv<W: io::Write>(kind: &Sweep, rows: &[SweepRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        kind.parameter_name(),
        "vertex_count",
        "compression_ratio",
        "rmse",
        "made",
        "mae_deg",
        "init_ms",
        "rasterize_ms",
        "remesh_ms",
        "integrate_ms",
        "total_ms",
        "full_res_solve_ms",
        "error",
    ])
    .map_err(io::Error::from)?;
    for row in rows {
        let mut rec = vec![row.parameter.to_string()];
        match &row.report {
            Some(r) => {
                let t = &r.timings;
                rec.extend([
                    r.vertex_count.to_string(),
                    r.compression_ratio.to_string(),
                    r.rmse.to_string(),
                    r.made.to_string(),
                    r.mae.to_string(),
                    format!("{:.3}", t.init_ms),
                    format!("{:.3}", t.rasterize_ms),
                    format!("{:.3}", t.remesh_ms),
                    format!("{:.3}", t.integrate_ms),
                    format!("{:.3}", t.total_ms()),
                ]);
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 10)),
        }
        rec.push(row.full_res_solve_ms.map(|t| format!("{t:.3}")).unwrap_or_default());
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::ScreenMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(size: usize) -> Scene {
        let c = size as f64 / 2.0;
        Scene {
            descriptor: Descriptor::SphereCap {
                center: [c, c],
                radius: c / 0.9,
                cap_angle_deg: 60.0,
            },
            width: size,
            height: size,
            camera: Camera::Orthographic,
            noise_deg: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn offset_is_removed() {
        let gt = [1.0, -2.0, 3.5, 0.25];
        let pred: Vec<f64> = gt.iter().map(|g| g + 5.0).collect();
        assert_eq!(align_gauge(&pred, &gt, &Camera::Orthographic).unwrap(), gt);
    }

    #[test]
    fn scale_is_removed() {
        let cam = Camera::perspective(100.0, 100.0, 5.0, 5.0).unwrap();
        let gt = [10.0, 12.0, 9.5];
        let pred: Vec<f64> = gt.iter().map(|g| g * 2.0).collect();
        let a = align_gauge(&pred, &gt, &cam).unwrap();
        for (x, g) in a.iter().zip(gt) {
            assert!((x - g).abs() < 1e-12);
        }
        assert!(matches!(
            align_gauge(&[0.0, 0.0], &[1.0, 2.0], &cam),
            Err(EvalError::DegenerateFit)
        ));
        assert!(matches!(
            align_gauge(&[1.0], &[1.0], &cam),
            Err(EvalError::TooFewSamples(1))
        ));
    }

    #[test]
    fn alignment_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let persp = Camera::perspective(100.0, 100.0, 5.0, 5.0).unwrap();
        for cam in [Camera::Orthographic, persp] {
            for _ in 0..100 {
                let gt: Vec<f64> = (0..20).map(|_| rng.random_range(1.0..10.0)).collect();
                let pred: Vec<f64> = (0..20).map(|_| rng.random_range(1.0..10.0)).collect();
                let r = |p: &[f64]| p.iter().zip(&gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let a = align_gauge(&pred, &gt, &cam).unwrap();
                assert!(r(&a) <= r(&pred) + 1e-12);
            }
        }
    }

    fn plane_scene(cam: Camera) -> Scene {
        Scene {
            descriptor: Descriptor::Plane {
                a: 0.3,
                b: -0.2,
                c: 4.0,
            },
            width: 32,
            height: 24,
            camera: cam,
            noise_deg: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn plane_is_exact() {
        let scene = plane_scene(Camera::Orthographic);
        let r = evaluate(&scene, Some(&RemeshConfig::new(StopMode::VertexTarget(30)))).unwrap();
        assert!(r.rmse < 1e-6 * 32.0, "rmse {}", r.rmse);
        assert!(r.mae < 1e-3, "mae {}", r.mae);
        assert_eq!(r.covered_pixels, r.foreground_pixels);
    }

    #[test]
    fn offset_does_not_change_error() {
        let (nm, gt) = plane_scene(Camera::Orthographic).synthesize().unwrap();
        let mut dm = reconstruct(&nm, &Camera::Orthographic, None).unwrap().depth;
        let a = surface_error(&dm, &gt).unwrap().report;
        dm.z.iter_mut().for_each(|z| *z += 123.0);
        let b = surface_error(&dm, &gt).unwrap().report;
        assert!((a.rmse - b.rmse).abs() < 1e-9);
    }

    #[test]
    fn decimation_costs_accuracy() {
        let scene = sphere(64);
        let full = evaluate(&scene, None).unwrap();
        let n = (0.05 * full.vertex_count as f64) as usize;
        let dec = evaluate(&scene, Some(&RemeshConfig::new(StopMode::VertexTarget(n)))).unwrap();
        assert!(dec.rmse >= full.rmse, "{} < {}", dec.rmse, full.rmse);
        assert!(dec.compression_ratio > 0.9);
    }

    #[test]
    fn coverage_shortfall_is_reported() {
        let (nm, gt) = sphere(32).synthesize().unwrap();
        let mut dm = reconstruct(&nm, &Camera::Orthographic, None).unwrap().depth;
        dm.faces.truncate(dm.faces.len() / 2);
        assert!(matches!(surface_error(&dm, &gt), Err(EvalError::Coverage { .. })));
    }

    #[test]
    fn resampling_matches_mesh_ownership() {
        let (nm, _) = sphere(24).synthesize().unwrap();
        let rec = reconstruct(
            &nm,
            &Camera::Orthographic,
            Some(&RemeshConfig::new(StopMode::VertexTarget(40))),
        )
        .unwrap();
        let samples = resample(&rec.depth, 24, 24);
        let mesh: &ScreenMesh = &rec.mesh;
        for p in 0..nm.len() {
            assert_eq!(samples[p].is_some(), mesh.owner(p).is_some(), "pixel {p}");
        }
    }

    #[test]
    fn error_png_roundtrip() {
        let (nm, gt) = sphere(16).synthesize().unwrap();
        let dm = reconstruct(&nm, &Camera::Orthographic, None).unwrap().depth;
        let se = surface_error(&dm, &gt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("err.png");
        se.write_error_png(&path, None).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
    }

    #[test]
    fn noise_sweep_rows_and_trend() {
        let kind = Sweep::NoiseDeg(vec![0.0, 3.0, 10.0]);
        let rows = sweep(&kind, &sphere(48), &RemeshConfig::new(StopMode::VertexTarget(200))).unwrap();
        assert_eq!(rows.len(), 3);
        let rmse: Vec<f64> = rows.iter().map(|r| r.report.as_ref().unwrap().rmse).collect();
        assert!(rmse[0] <= rmse[1] && rmse[1] <= rmse[2], "{rmse:?}");
        let mut buf = Vec::new();
        write_sweep_csv(&kind, &rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn threshold_sweep_counts_do_not_grow() {
        let kind = Sweep::Threshold(vec![2.0, 64.0, 2048.0]);
        let rows = sweep(&kind, &sphere(48), &RemeshConfig::new(StopMode::Threshold(1.0))).unwrap();
        let n: Vec<usize> = rows.iter().map(|r| r.report.as_ref().unwrap().vertex_count).collect();
        assert!(n[0] >= n[1] && n[1] >= n[2], "{n:?}");
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let r = sweep(
            &Sweep::Threshold(vec![]),
            &sphere(8),
            &RemeshConfig::new(StopMode::Threshold(1.0)),
        );
        assert!(matches!(r, Err(EvalError::EmptySweep)));
    }

    #[test]
    fn failed_points_are_recorded() {
        let kind = Sweep::Threshold(vec![-1.0, 8.0]);
        let rows = sweep(&kind, &sphere(16), &RemeshConfig::new(StopMode::Threshold(1.0))).unwrap();
        assert!(rows[0].error.is_some() && rows[0].report.is_none());
        assert!(rows[1].report.is_some());
    }

    #[test]
    fn resolution_sweep_records_baseline() {
        let kind = Sweep::Resolution(vec![16, 32]);
        let rows = sweep(&kind, &sphere(16), &RemeshConfig::new(StopMode::VertexTarget(40))).unwrap();
        for r in &rows {
            assert!(r.full_res_solve_ms.is_some());
        }
        let big = rows[1].report.as_ref().unwrap();
        assert!(big.foreground_pixels > 3 * rows[0].report.as_ref().unwrap().foreground_pixels);
    }

    #[test]
    fn reports_are_deterministic() {
        let scene = Scene {
            noise_deg: 4.0,
            ..sphere(32)
        };
        let cfg = RemeshConfig::new(StopMode::VertexTarget(60));
        let a = evaluate(&scene, Some(&cfg)).unwrap();
        let b = evaluate(&scene, Some(&cfg)).unwrap();
        assert_eq!(
            (a.rmse, a.made, a.mae, a.vertex_count),
            (b.rmse, b.made, b.mae, b.vertex_count)
        );
    }
}
