use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use normint::camera::Camera;
use normint::eval::{self, Scene, Sweep};
use normint::mesh::{write_flat_obj, write_svg, ScreenMesh};
use normint::normal_io::{encode, encode_mask, read_normal_map, write_file, Descriptor, Encoding, NormalMap};
use normint::pipeline::{self, StageTimings};
use normint::remesh::{RemeshConfig, StopMode};

use crate::args::*;
use crate::error::CliError;

/// Everything one `integrate` or `mesh-only` invocation needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub mask: Option<PathBuf>,
    pub encoding: Encoding,
    pub camera: CameraArgs,
    pub remesh: Option<RemeshConfig>,
    pub outputs: Vec<PathBuf>,
}

impl PipelineConfig {
    fn new(
        input: &InputArgs,
        camera: &CameraArgs,
        remesh: &RemeshArgs,
        outputs: Vec<PathBuf>,
    ) -> Result<Self, CliError> {
        let encoding = match input.encoding {
            Some(e) => encoding(e),
            None if input.input.extension().is_some_and(|x| x.eq_ignore_ascii_case("npy")) => Encoding::F32,
            None => Encoding::U8,
        };
        let cfg = PipelineConfig {
            input: input.input.clone(),
            mask: input.mask.clone(),
            encoding,
            camera: camera.clone(),
            remesh: remesh_config(remesh, None)?,
            outputs,
        };
        let mut seen = HashSet::new();
        for p in std::iter::once(&cfg.input).chain(&cfg.mask).chain(&cfg.outputs) {
            if !seen.insert(p) {
                return Err(CliError::Config(format!("path {} is used twice", p.display())));
            }
        }
        Ok(cfg)
    }

    fn load(&self) -> Result<(NormalMap, Camera), CliError> {
        let nm = read_normal_map(&self.input, self.encoding, self.mask.as_deref())?;
        let cam = camera(&self.camera, nm.width(), nm.height())?;
        Ok((nm, cam))
    }
}

fn encoding(e: EncodingArg) -> Encoding {
    match e {
        EncodingArg::U8 => Encoding::U8,
        EncodingArg::U16 => Encoding::U16,
        EncodingArg::F32 => Encoding::F32,
    }
}

fn camera(a: &CameraArgs, width: usize, height: usize) -> Result<Camera, CliError> {
    match a.camera {
        CameraKind::Ortho => {
            if a.fx.is_some() || a.fy.is_some() || a.cx.is_some() || a.cy.is_some() {
                return Err(CliError::Config("intrinsics given with --camera ortho".into()));
            }
            Ok(Camera::Orthographic)
        }
        CameraKind::Persp => {
            let fx =
                a.fx.ok_or_else(|| CliError::Config("--camera persp needs --fx".into()))?;
            let fy = a.fy.unwrap_or(fx);
            let cx = a.cx.unwrap_or(width as f64 / 2.0);
            let cy = a.cy.unwrap_or(height as f64 / 2.0);
            Camera::perspective(fx, fy, cx, cy).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

/// `None` means full resolution. `mode` overrides the stop rule (used by
/// threshold sweeps, where the rule comes from the sweep points).
fn remesh_config(a: &RemeshArgs, mode: Option<StopMode>) -> Result<Option<RemeshConfig>, CliError> {
    let given = [a.threshold.is_some(), a.vertices.is_some(), a.full_resolution]
        .iter()
        .filter(|&&b| b)
        .count();
    let mode = match (mode, given) {
        (Some(m), 0) => m,
        (Some(_), _) => {
            return Err(CliError::Config(
                "--threshold, --vertices and --full-resolution are set by the sweep".into(),
            ))
        }
        (None, 1) if a.full_resolution => return Ok(None),
        (None, 1) => match (a.threshold, a.vertices) {
            (Some(t), _) => StopMode::Threshold(t),
            (_, Some(n)) => StopMode::VertexTarget(n),
            _ => unreachable!(),
        },
        (None, 0) => {
            return Err(CliError::Config(
                "one of --threshold, --vertices or --full-resolution is required".into(),
            ))
        }
        (None, _) => {
            return Err(CliError::Config(
                "--threshold, --vertices and --full-resolution are mutually exclusive".into(),
            ))
        }
    };
    let mut cfg = RemeshConfig::new(mode);
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(al) = a.alpha {
        cfg.alpha = al;
    }
    if let Some(k) = a.iterations {
        cfg.iterations = k;
    }
    cfg.align_edges = !a.no_align_edges;
    cfg.align_vertices = !a.no_align_vertices;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Some(cfg))
}

fn print_timings(t: &StageTimings, vertices: usize) {
    println!(
        "timings: init {:.1} ms, rasterize {:.1} ms, remesh {:.1} ms, integrate {:.1} ms, total {:.1} ms (|V|={vertices})",
        t.init_ms,
        t.rasterize_ms,
        t.remesh_ms,
        t.integrate_ms,
        t.total_ms()
    );
}

fn write_debug(mesh: &ScreenMesh, d: &DebugArgs) -> Result<(), CliError> {
    if let Some(p) = &d.svg {
        write_svg(mesh, p).map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = &d.mesh_obj {
        write_flat_obj(mesh, p).map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = &d.density {
        eval::write_density_png(mesh, p)?;
    }
    Ok(())
}

fn debug_paths(d: &DebugArgs) -> impl Iterator<Item = PathBuf> + '_ {
    [&d.svg, &d.mesh_obj, &d.density].into_iter().flatten().cloned()
}

fn read_scene(path: &Path) -> Result<Scene, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn integrate(a: &IntegrateArgs) -> Result<(), CliError> {
    if (a.report.is_some() || a.error_map.is_some()) && a.scene.is_none() {
        return Err(CliError::Config("--report and --error-map need --scene".into()));
    }
    let outputs = [
        Some(&a.output),
        a.depth_csv.as_ref(),
        a.report.as_ref(),
        a.error_map.as_ref(),
        a.scene.as_ref(),
    ]
    .into_iter()
    .flatten()
    .cloned()
    .chain(debug_paths(&a.debug))
    .collect();
    let cfg = PipelineConfig::new(&a.input, &a.camera, &a.remesh, outputs)?;
    let scene = a.scene.as_deref().map(read_scene).transpose()?;
    let (nm, cam) = cfg.load()?;
    if !(a.pixel_pitch > 0.0 && a.pixel_pitch.is_finite()) {
        return Err(CliError::Config("--pixel-pitch must be positive".into()));
    }
    let rec = pipeline::reconstruct(&nm, &cam, cfg.remesh.as_ref())?;
    rec.depth
        .write_obj(&a.output, a.pixel_pitch)
        .map_err(|e| CliError::io(&a.output, e))?;
    if let Some(p) = &a.depth_csv {
        rec.depth.write_depth_csv(p).map_err(|e| CliError::io(p, e))?;
    }
    write_debug(&rec.mesh, &a.debug)?;
    print_timings(&rec.timings, rec.mesh.vertex_count());
    if let Some(scene) = scene {
        if scene.camera != cam {
            return Err(CliError::Config("camera differs from the scene's camera".into()));
        }
        let (_, gt) = scene.synthesize()?;
        let mut err = eval::surface_error(&rec.depth, &gt)?;
        err.report.timings = rec.timings;
        let r = &err.report;
        println!(
            "eval: rmse {:.6e}, made {:.6e}, mae {:.4} deg, compression {:.4}",
            r.rmse, r.made, r.mae, r.compression_ratio
        );
        if let Some(p) = &a.report {
            let json = serde_json::to_string_pretty(r).expect("report serializes");
            fs::write(p, json + "\n").map_err(|e| CliError::io(p, e))?;
        }
        if let Some(p) = &a.error_map {
            err.write_error_png(p, None)?;
        }
    }
    Ok(())
}

pub fn mesh_only(a: &MeshOnlyArgs) -> Result<(), CliError> {
    let outputs: Vec<PathBuf> = debug_paths(&a.debug).collect();
    if outputs.is_empty() {
        return Err(CliError::Config(
            "mesh-only needs --svg, --mesh-obj or --density".into(),
        ));
    }
    let cfg = PipelineConfig::new(&a.input, &a.camera, &a.remesh, outputs)?;
    let (nm, cam) = cfg.load()?;
    let (mesh, _, timings) = pipeline::build_mesh(&nm, &cam, cfg.remesh.as_ref())?;
    write_debug(&mesh, &a.debug)?;
    print_timings(&timings, mesh.vertex_count());
    Ok(())
}

fn scene(a: &SceneArgs) -> Result<Scene, CliError> {
    if let Some(p) = &a.scene {
        return read_scene(p);
    }
    let (w, h) = (a.size, a.height.unwrap_or(a.size));
    if w == 0 || h == 0 {
        return Err(CliError::Config("image size must be positive".into()));
    }
    if !(a.noise >= 0.0 && a.noise < 90.0) {
        return Err(CliError::Config("--noise must lie in [0, 90) degrees".into()));
    }
    let (wf, hf) = (w as f64, h as f64);
    let s = wf.min(hf);
    let descriptor = match a.shape {
        Shape::Sphere => Descriptor::SphereCap {
            center: [wf / 2.0, hf / 2.0],
            radius: s / 2.0 / 0.9,
            cap_angle_deg: 60.0,
        },
        Shape::Plane => Descriptor::Plane {
            a: 0.3,
            b: -0.2,
            c: 0.0,
        },
        Shape::Ridge => Descriptor::Ridge {
            center: [wf / 2.0, hf / 2.0],
            angle_deg: 30.0,
            slope: 0.5,
        },
        Shape::Sinusoid => Descriptor::Sinusoid {
            amp: s / 16.0,
            freq: 6.0 * std::f64::consts::PI / s,
        },
    };
    Ok(Scene {
        descriptor,
        width: w,
        height: h,
        camera: camera(&a.camera, w, h)?,
        noise_deg: a.noise,
        seed: a.seed,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum SweepKind {
    Threshold,
    Noise,
    Resolution,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Config(format!("bad sweep value '{t}'")))
        })
        .collect()
}

pub fn sweep(a: &SweepArgs, kind: SweepKind) -> Result<(), CliError> {
    let scene = scene(&a.scene)?;
    let (sweep, cfg, name) = match kind {
        SweepKind::Threshold => {
            let cfg = remesh_config(&a.remesh, Some(StopMode::Threshold(1.0)))?;
            (Sweep::Threshold(parse_list(&a.values)?), cfg, "sweep-threshold")
        }
        SweepKind::Noise => (
            Sweep::NoiseDeg(parse_list(&a.values)?),
            remesh_config(&a.remesh, None)?,
            "sweep-noise",
        ),
        SweepKind::Resolution => (
            Sweep::Resolution(parse_list(&a.values)?),
            remesh_config(&a.remesh, None)?,
            "sweep-resolution",
        ),
    };
    let cfg = cfg.ok_or_else(|| CliError::Config("sweeps need a decimation setting".into()))?;
    if let Sweep::Resolution(v) = &sweep {
        if v.contains(&0) {
            return Err(CliError::Config("resolutions must be positive".into()));
        }
    }
    let rows = eval::sweep(&sweep, &scene, &cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let path = a.out_dir.join(format!("{name}.csv"));
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    eval::write_sweep_csv(&sweep, &rows, file)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{}: {} rows ({failed} failed)", path.display(), rows.len());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let scene = scene(&a.scene)?;
    let (nm, _) = scene.synthesize()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let enc = encoding(a.encoding);
    let ext = if enc == Encoding::F32 { "npy" } else { "png" };
    write_file(&a.out_dir.join(format!("normals.{ext}")), &encode(&nm, enc)?)?;
    write_file(&a.out_dir.join("mask.png"), &encode_mask(&nm)?)?;
    let p = a.out_dir.join("scene.json");
    let json = serde_json::to_string_pretty(&scene).expect("scene serializes");
    fs::write(&p, json + "\n").map_err(|e| CliError::io(&p, e))?;
    println!(
        "{}: {}x{}, {} foreground pixels",
        a.out_dir.display(),
        nm.width(),
        nm.height(),
        nm.foreground_count()
    );
    Ok(())
}
