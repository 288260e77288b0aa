//! Normal map containers, decoding/encoding in the usual discretisations,
//! and synthetic scenes with analytic ground truth.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgba};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;

#[derive(Debug, Error)]
pub enum NormalIoError {
    #[error("unreadable normal map: {0}")]
    Format(String),
    #[error("mask is {mask_w}x{mask_h} but the normal map is {width}x{height}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("scene does not intersect the {width}x{height} image")]
    Domain { width: usize, height: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl NormalIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        NormalIoError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Storage format of normal components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    U8,
    U16,
    F32,
}

impl Encoding {
    fn max_value(self) -> f64 {
        match self {
            Encoding::U8 => 255.0,
            Encoding::U16 => 65535.0,
            Encoding::F32 => 1.0,
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "u8" => Ok(Encoding::U8),
            "u16" => Ok(Encoding::U16),
            "f32" => Ok(Encoding::F32),
            other => Err(format!("unknown encoding '{other}' (expected u8, u16 or f32)")),
        }
    }
}

/// Where the foreground mask comes from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Every pixel with a valid normal is foreground.
    Derived,
    /// Fourth channel of the normal image, non-zero means foreground.
    Alpha,
    /// Separate single-channel image, non-zero means foreground.
    Image(&'a [u8]),
}

/// Per-pixel camera-space unit normals with a foreground mask.
///
/// Pixel `(x, y)` has id `y * width + x` and its centre at screen point
/// `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<Vector3<f64>>,
    mask: Vec<bool>,
}

impl NormalMap {
    /// Builds a map from raw data. Masked-in normals are renormalised; pixels
    /// whose normal is zero, non-finite or facing away (`n_z <= 0`) are
    /// masked out.
    pub fn new(
        width: usize,
        height: usize,
        mut normals: Vec<Vector3<f64>>,
        mut mask: Vec<bool>,
    ) -> Result<Self, NormalIoError> {
        if width == 0 || height == 0 {
            return Err(NormalIoError::Format("empty image".into()));
        }
        if normals.len() != width * height || mask.len() != width * height {
            return Err(NormalIoError::Format(format!(
                "expected {} pixels, got {} normals and {} mask entries",
                width * height,
                normals.len(),
                mask.len()
            )));
        }
        for (n, m) in normals.iter_mut().zip(mask.iter_mut()) {
            let len = n.norm();
            if *m && len.is_finite() && len > 1e-12 && n.z > 0.0 {
                *n /= len;
            } else {
                *m = false;
                *n = Vector3::zeros();
            }
        }
        Ok(NormalMap {
            width,
            height,
            normals,
            mask,
        })
    }

    /// Constant normal over a fully foreground image.
    pub fn constant(width: usize, height: usize, n: Vector3<f64>) -> Result<Self, NormalIoError> {
        Self::new(width, height, vec![n; width * height], vec![true; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn normal(&self, pixel: usize) -> Vector3<f64> {
        self.normals[pixel]
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn is_foreground(&self, pixel: usize) -> bool {
        self.mask[pixel]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Screen coordinates of a pixel centre.
    pub fn pixel_center(&self, pixel: usize) -> Vector2<f64> {
        pixel_center(self.width, pixel)
    }
}

pub(crate) fn pixel_center(width: usize, pixel: usize) -> Vector2<f64> {
    Vector2::new((pixel % width) as f64 + 0.5, (pixel / width) as f64 + 0.5)
}

/// Decodes a normal map from file contents.
///
/// Integer encodings come from PNG files (8 or 16 bit, RGB or RGBA); `f32`
/// expects an `.npy` array of shape `(H, W, 3)` or `(H, W, 4)` holding
/// `f4` or `f8` values.
pub fn decode(bytes: &[u8], encoding: Encoding, mask: MaskSource) -> Result<NormalMap, NormalIoError> {
    let (width, height, channels) = match encoding {
        Encoding::U8 | Encoding::U16 => decode_png(bytes, encoding)?,
        Encoding::F32 => decode_npy(bytes)?,
    };
    let px = width * height;
    let has_alpha = channels.len() == 4 * px;
    let stride = if has_alpha { 4 } else { 3 };
    let scale = encoding.max_value();
    let normals: Vec<Vector3<f64>> = (0..px)
        .map(|p| {
            let c = &channels[p * stride..p * stride + 3];
            match encoding {
                Encoding::F32 => Vector3::new(c[0], c[1], c[2]),
                _ => Vector3::new(
                    2.0 * c[0] / scale - 1.0,
                    2.0 * c[1] / scale - 1.0,
                    2.0 * c[2] / scale - 1.0,
                ),
            }
        })
        .collect();
    let mask = match mask {
        MaskSource::Derived => vec![true; px],
        MaskSource::Alpha => {
            if !has_alpha {
                return Err(NormalIoError::Format(
                    "alpha mask requested but image has no alpha".into(),
                ));
            }
            (0..px).map(|p| channels[p * 4 + 3] > 0.0).collect()
        }
        MaskSource::Image(bytes) => decode_mask(bytes, width, height)?,
    };
    NormalMap::new(width, height, normals, mask)
}

fn decode_png(bytes: &[u8], encoding: Encoding) -> Result<(usize, usize, Vec<f64>), NormalIoError> {
    let img = image::load_from_memory(bytes).map_err(|e| NormalIoError::Format(e.to_string()))?;
    if img.color().channel_count() < 3 {
        return Err(NormalIoError::Format("normal image needs at least 3 channels".into()));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let alpha = img.color().has_alpha();
    let data: Vec<f64> = match (encoding, alpha) {
        (Encoding::U8, false) => img.to_rgb8().into_raw().into_iter().map(f64::from).collect(),
        (Encoding::U8, true) => img.to_rgba8().into_raw().into_iter().map(f64::from).collect(),
        (_, false) => img.to_rgb16().into_raw().into_iter().map(f64::from).collect(),
        (_, true) => img.to_rgba16().into_raw().into_iter().map(f64::from).collect(),
    };
    Ok((w, h, data))
}

fn decode_npy(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), NormalIoError> {
    let fmt = |e: std::io::Error| NormalIoError::Format(e.to_string());
    let npy = npyz::NpyFile::new(bytes).map_err(fmt)?;
    let shape = npy.shape().to_vec();
    if shape.len() != 3 || !(shape[2] == 3 || shape[2] == 4) {
        return Err(NormalIoError::Format(format!(
            "expected shape (H, W, 3|4), got {shape:?}"
        )));
    }
    if npy.order() != npyz::Order::C {
        return Err(NormalIoError::Format("fortran-ordered arrays are not supported".into()));
    }
    let data = match npy.try_data::<f32>() {
        Ok(reader) => reader
            .map(|v| v.map(f64::from))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fmt)?,
        Err(npy) => npy
            .data::<f64>()
            .map_err(|e| NormalIoError::Format(e.to_string()))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(fmt)?,
    };
    let (h, w) = (shape[0] as usize, shape[1] as usize);
    Ok((w, h, data))
}

fn decode_mask(bytes: &[u8], width: usize, height: usize) -> Result<Vec<bool>, NormalIoError> {
    let img = image::load_from_memory(bytes).map_err(|e| NormalIoError::Format(format!("mask: {e}")))?;
    let (mw, mh) = (img.width() as usize, img.height() as usize);
    if (mw, mh) != (width, height) {
        return Err(NormalIoError::DimensionMismatch {
            width,
            height,
            mask_w: mw,
            mask_h: mh,
        });
    }
    Ok(img.to_luma16().into_raw().into_iter().map(|v| v > 0).collect())
}

/// Reads a normal map (and optional mask image) from disk.
pub fn read_normal_map(path: &Path, encoding: Encoding, mask_path: Option<&Path>) -> Result<NormalMap, NormalIoError> {
    let bytes = std::fs::read(path).map_err(|e| NormalIoError::io(path, e))?;
    let mask_bytes = match mask_path {
        Some(p) => Some(std::fs::read(p).map_err(|e| NormalIoError::io(p, e))?),
        None => None,
    };
    let source = match &mask_bytes {
        Some(b) => MaskSource::Image(b),
        None if has_alpha_channel(&bytes, encoding) => MaskSource::Alpha,
        None => MaskSource::Derived,
    };
    decode(&bytes, encoding, source)
}

fn has_alpha_channel(bytes: &[u8], encoding: Encoding) -> bool {
    match encoding {
        Encoding::F32 => npyz::NpyFile::new(bytes)
            .map(|n| n.shape().get(2) == Some(&4))
            .unwrap_or(false),
        _ => image::load_from_memory(bytes)
            .map(|i| i.color().has_alpha())
            .unwrap_or(false),
    }
}

/// Encodes a normal map. Integer encodings produce an RGBA PNG whose alpha
/// carries the mask; `f32` produces an `(H, W, 4)` `.npy` array.
pub fn encode(nm: &NormalMap, encoding: Encoding) -> Result<Vec<u8>, NormalIoError> {
    let (w, h) = (nm.width as u32, nm.height as u32);
    let mut out = Vec::new();
    match encoding {
        Encoding::U8 | Encoding::U16 => {
            let scale = encoding.max_value();
            let quantize = |c: f64| ((c + 1.0) * 0.5 * scale).round().clamp(0.0, scale);
            let mut rgba = Vec::with_capacity(nm.len() * 4);
            for (n, &m) in nm.normals.iter().zip(&nm.mask) {
                rgba.extend_from_slice(&[quantize(n.x), quantize(n.y), quantize(n.z)]);
                rgba.push(if m { scale } else { 0.0 });
            }
            let cursor = &mut Cursor::new(&mut out);
            let result = if encoding == Encoding::U8 {
                let raw: Vec<u8> = rgba.iter().map(|&v| v as u8).collect();
                ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, raw)
                    .expect("buffer size")
                    .write_to(cursor, image::ImageFormat::Png)
            } else {
                let raw: Vec<u16> = rgba.iter().map(|&v| v as u16).collect();
                ImageBuffer::<Rgba<u16>, _>::from_raw(w, h, raw)
                    .expect("buffer size")
                    .write_to(cursor, image::ImageFormat::Png)
            };
            result.map_err(|e| NormalIoError::Format(e.to_string()))?;
        }
        Encoding::F32 => {
            use npyz::WriterBuilder;
            let io = |e: std::io::Error| NormalIoError::Format(e.to_string());
            let mut writer = npyz::WriteOptions::new()
                .default_dtype()
                .shape(&[nm.height as u64, nm.width as u64, 4])
                .writer(&mut out)
                .begin_nd()
                .map_err(io)?;
            for (n, &m) in nm.normals.iter().zip(&nm.mask) {
                let vals = [n.x as f32, n.y as f32, n.z as f32, if m { 1.0 } else { 0.0 }];
                writer.extend(vals).map_err(io)?;
            }
            writer.finish().map_err(io)?;
        }
    }
    Ok(out)
}

/// Single-channel 8-bit PNG of a mask (255 foreground, 0 background).
pub fn encode_mask(nm: &NormalMap) -> Result<Vec<u8>, NormalIoError> {
    let raw: Vec<u8> = nm.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let mut out = Vec::new();
    ImageBuffer::<Luma<u8>, _>::from_raw(nm.width as u32, nm.height as u32, raw)
        .expect("buffer size")
        .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| NormalIoError::Format(e.to_string()))?;
    Ok(out)
}

/// Analytic height fields used to generate test scenes. Heights are in
/// pixel units and grow toward the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Descriptor {
    /// `h = a u + b v + c`, covering the whole image.
    Plane { a: f64, b: f64, c: f64 },
    /// Upper half of a sphere, masked to the disk where the surface is
    /// tilted at most `cap_angle_deg` from the view direction.
    SphereCap {
        center: [f64; 2],
        radius: f64,
        cap_angle_deg: f64,
    },
    /// `h = amp sin(freq u) sin(freq v)`, covering the whole image.
    Sinusoid { amp: f64, freq: f64 },
    /// Two planes meeting at a crease through `center`; `angle_deg` is the
    /// direction of the crease line, `slope` the falloff on either side.
    Ridge {
        center: [f64; 2],
        angle_deg: f64,
        slope: f64,
    },
}

impl Descriptor {
    fn validate(&self) -> Result<(), NormalIoError> {
        let bad = |m: &str| Err(NormalIoError::Format(m.to_string()));
        match *self {
            Descriptor::SphereCap {
                radius, cap_angle_deg, ..
            } => {
                if !(radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
                if !(cap_angle_deg > 0.0 && cap_angle_deg < 90.0) {
                    return bad("cap angle must lie in (0, 90) degrees");
                }
            }
            Descriptor::Sinusoid { amp, freq } if !(amp.is_finite() && freq.is_finite()) => {
                return bad("sinusoid parameters must be finite");
            }
            Descriptor::Ridge { slope, .. } if !slope.is_finite() => return bad("ridge slope must be finite"),
            _ => {}
        }
        Ok(())
    }

    /// The same scene drawn on an image `s` times larger: lengths scale
    /// by `s`, slopes are kept.
    pub fn scaled(&self, s: f64) -> Descriptor {
        match *self {
            Descriptor::Plane { a, b, c } => Descriptor::Plane { a, b, c: c * s },
            Descriptor::SphereCap {
                center,
                radius,
                cap_angle_deg,
            } => Descriptor::SphereCap {
                center: center.map(|x| x * s),
                radius: radius * s,
                cap_angle_deg,
            },
            Descriptor::Sinusoid { amp, freq } => Descriptor::Sinusoid {
                amp: amp * s,
                freq: freq / s,
            },
            Descriptor::Ridge {
                center,
                angle_deg,
                slope,
            } => Descriptor::Ridge {
                center: center.map(|x| x * s),
                angle_deg,
                slope,
            },
        }
    }

    /// Height and gradient at `u`, or `None` outside the domain.
    pub fn height(&self, u: Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        match *self {
            Descriptor::Plane { a, b, c } => Some((a * u.x + b * u.y + c, Vector2::new(a, b))),
            Descriptor::SphereCap {
                center,
                radius,
                cap_angle_deg,
            } => {
                let d = u - Vector2::new(center[0], center[1]);
                let rho = d.norm();
                if rho > radius * cap_angle_deg.to_radians().sin() {
                    return None;
                }
                let h = (radius * radius - rho * rho).sqrt();
                Some((h, -d / h))
            }
            Descriptor::Sinusoid { amp, freq } => {
                let (su, cu) = (freq * u.x).sin_cos();
                let (sv, cv) = (freq * u.y).sin_cos();
                Some((amp * su * sv, Vector2::new(amp * freq * cu * sv, amp * freq * su * cv)))
            }
            Descriptor::Ridge {
                center,
                angle_deg,
                slope,
            } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                // unit normal of the crease line
                let across = Vector2::new(-s, c);
                let t = (u - Vector2::new(center[0], center[1])).dot(&across);
                let side = if t >= 0.0 { 1.0 } else { -1.0 };
                Some((-slope * t.abs(), -slope * side * across))
            }
        }
    }
}

/// Analytic depth and normals for a synthetic scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Orthographic: height toward the camera in pixel units. Perspective:
    /// z-depth of the surface point.
    pub depth: Vec<f64>,
    pub normals: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
    pub descriptor: Descriptor,
    pub camera: Camera,
    pub width: usize,
    pub height: usize,
}

/// Samples a descriptor at pixel centres.
///
/// Under perspective projection the height field is placed around the
/// reference depth `fx`, so that the surface point seen through `u` has
/// z-depth `fx - h(u)`.
pub fn synthesize(
    descriptor: &Descriptor,
    width: usize,
    height: usize,
    cam: &Camera,
) -> Result<(NormalMap, GroundTruth), NormalIoError> {
    descriptor.validate()?;
    if width == 0 || height == 0 {
        return Err(NormalIoError::Domain { width, height });
    }
    let px = width * height;
    let mut depth = vec![f64::NAN; px];
    let mut normals = vec![Vector3::zeros(); px];
    let mut mask = vec![false; px];
    for p in 0..px {
        let u = pixel_center(width, p);
        let Some((h, grad)) = descriptor.height(u) else {
            continue;
        };
        let (d, n) = match *cam {
            Camera::Orthographic => (h, Vector3::new(-grad.x, -grad.y, 1.0)),
            Camera::Perspective { fx, fy, .. } => {
                let d = fx - h;
                if d <= 0.0 {
                    continue;
                }
                let ray = cam.ray_unnormalized(u);
                let tu = ray * -grad.x + Vector3::new(d / fx, 0.0, 0.0);
                let tv = ray * -grad.y + Vector3::new(0.0, d / fy, 0.0);
                (d, tu.cross(&tv))
            }
        };
        let n = n.normalize();
        if !(n.z > 0.0 && d.is_finite()) {
            continue;
        }
        depth[p] = d;
        normals[p] = n;
        mask[p] = true;
    }
    if !mask.iter().any(|&m| m) {
        return Err(NormalIoError::Domain { width, height });
    }
    let nm = NormalMap::new(width, height, normals.clone(), mask.clone())?;
    let gt = GroundTruth {
        depth,
        normals: nm.normals.clone(),
        mask,
        descriptor: *descriptor,
        camera: *cam,
        width,
        height,
    };
    Ok((nm, gt))
}

/// Perturbs every foreground normal by a random tangent-plane offset whose
/// two components are i.i.d. Gaussian with standard deviation `tan(sigma)`.
/// Deterministic for a fixed `seed`; `sigma_deg == 0` returns the input.
pub fn add_noise(nm: &NormalMap, sigma_deg: f64, seed: u64) -> NormalMap {
    if sigma_deg <= 0.0 {
        return nm.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma_deg.to_radians().tan()).expect("finite sigma");
    let mut normals = nm.normals.clone();
    let mut mask = nm.mask.clone();
    for (n, m) in normals.iter_mut().zip(mask.iter_mut()) {
        if !*m {
            continue;
        }
        let (t1, t2) = tangent_frame(n);
        let a: f64 = dist.sample(&mut rng);
        let b: f64 = dist.sample(&mut rng);
        let perturbed = (*n + t1 * a + t2 * b).normalize();
        if perturbed.z > 0.0 {
            *n = perturbed;
        } else {
            *m = false;
            *n = Vector3::zeros();
        }
    }
    NormalMap {
        width: nm.width,
        height: nm.height,
        normals,
        mask,
    }
}

/// Orthonormal tangent pair for a unit vector, built by Gram-Schmidt against
/// its smallest-magnitude coordinate axis (first axis wins ties).
pub fn tangent_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = n.abs();
    let axis = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let t1 = (axis - n * n.dot(&axis)).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Writes bytes to a file, mapping failures to [`NormalIoError::Io`].
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), NormalIoError> {
    std::fs::write(path, bytes).map_err(|e| NormalIoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn png_rgb8(pixels: &[[u8; 3]], w: u32, h: u32) -> Vec<u8> {
        let raw: Vec<u8> = pixels.iter().flatten().copied().collect();
        let mut out = Vec::new();
        ImageBuffer::<image::Rgb<u8>, _>::from_raw(w, h, raw)
            .unwrap()
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .unwrap();
        out
    }

    #[test]
    fn decode_u8_affine_map() {
        let bytes = png_rgb8(&[[128, 128, 255]], 1, 1);
        let nm = decode(&bytes, Encoding::U8, MaskSource::Derived).unwrap();
        let c = 2.0 * 128.0 / 255.0 - 1.0;
        let expect = Vector3::new(c, c, 1.0).normalize();
        assert_relative_eq!(nm.normal(0), expect, epsilon = 1e-15);
        assert!((nm.normal(0).x - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn decode_u16_pixel() {
        let raw: Vec<u16> = vec![65535, 32767, 65535];
        let mut out = Vec::new();
        ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, raw)
            .unwrap()
            .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .unwrap();
        let nm = decode(&out, Encoding::U16, MaskSource::Derived).unwrap();
        let y = 2.0 * 32767.0 / 65535.0 - 1.0;
        assert_relative_eq!(nm.normal(0), Vector3::new(1.0, y, 1.0).normalize(), epsilon = 1e-15);
        assert!(y.abs() < 2e-5);
    }

    #[test]
    fn decode_f32_npy() {
        let nm = NormalMap::constant(2, 1, Vector3::z()).unwrap();
        let bytes = encode(&nm, Encoding::F32).unwrap();
        let back = decode(&bytes, Encoding::F32, MaskSource::Alpha).unwrap();
        assert_eq!(back.normal(0), Vector3::z());
        assert_eq!(back.normal(1), Vector3::z());
    }

    #[test]
    fn backfacing_and_zero_pixels_masked_out() {
        let bytes = png_rgb8(&[[128, 128, 0], [127, 127, 127], [128, 128, 255]], 3, 1);
        let nm = decode(&bytes, Encoding::U8, MaskSource::Derived).unwrap();
        assert_eq!(nm.mask(), &[false, false, true]);
    }

    #[test]
    fn mask_dimension_mismatch() {
        let bytes = png_rgb8(&[[128, 128, 255]; 4], 2, 2);
        let nm = NormalMap::constant(3, 1, Vector3::z()).unwrap();
        let mask = encode_mask(&nm).unwrap();
        let err = decode(&bytes, Encoding::U8, MaskSource::Image(&mask)).unwrap_err();
        assert!(matches!(
            err,
            NormalIoError::DimensionMismatch {
                mask_w: 3,
                mask_h: 1,
                ..
            }
        ));
    }

    #[test]
    fn garbage_is_format_error() {
        assert!(matches!(
            decode(b"not an image", Encoding::U8, MaskSource::Derived),
            Err(NormalIoError::Format(_))
        ));
        assert!(matches!(
            decode(b"not an npy", Encoding::F32, MaskSource::Derived),
            Err(NormalIoError::Format(_))
        ));
    }

    #[test]
    fn separate_mask_image() {
        let bytes = png_rgb8(&[[128, 128, 255]; 2], 2, 1);
        let mut nm = NormalMap::constant(2, 1, Vector3::z()).unwrap();
        nm.mask[1] = false;
        let mask = encode_mask(&nm).unwrap();
        let back = decode(&bytes, Encoding::U8, MaskSource::Image(&mask)).unwrap();
        assert_eq!(back.mask(), &[true, false]);
    }

    #[test]
    fn synthesize_planes() {
        let ortho = Camera::Orthographic;
        let (nm, gt) = synthesize(&Descriptor::Plane { a: 0.0, b: 0.0, c: 3.0 }, 4, 3, &ortho).unwrap();
        assert!(nm.normals().iter().all(|n| *n == Vector3::z()));
        assert!(gt.depth.iter().all(|&d| d == 3.0));
        let (nm, _) = synthesize(
            &Descriptor::Plane {
                a: -1.0,
                b: 0.0,
                c: 0.0,
            },
            4,
            3,
            &ortho,
        )
        .unwrap();
        let s = 0.5f64.sqrt();
        for n in nm.normals() {
            assert_relative_eq!(*n, Vector3::new(s, 0.0, s), epsilon = 1e-15);
        }
    }

    #[test]
    fn sphere_pole_faces_camera() {
        let d = Descriptor::SphereCap {
            center: [5.5, 5.5],
            radius: 4.0,
            cap_angle_deg: 60.0,
        };
        let (nm, gt) = synthesize(&d, 11, 11, &Camera::Orthographic).unwrap();
        assert_eq!(nm.normal(5 * 11 + 5), Vector3::z());
        assert!(!nm.is_foreground(0));
        assert_eq!(gt.depth[5 * 11 + 5], 4.0);
    }

    #[test]
    fn sphere_outside_image_is_domain_error() {
        let d = Descriptor::SphereCap {
            center: [-100.0, -100.0],
            radius: 4.0,
            cap_angle_deg: 60.0,
        };
        assert!(matches!(
            synthesize(&d, 8, 8, &Camera::Orthographic),
            Err(NormalIoError::Domain { .. })
        ));
    }

    #[test]
    fn perspective_normals_match_depth_gradients() {
        // finite-difference tangents of the unprojected surface are
        // orthogonal to the synthesized normal
        let cam = Camera::perspective(300.0, 250.0, 20.0, 10.0).unwrap();
        let d = Descriptor::Sinusoid { amp: 5.0, freq: 0.2 };
        let (nm, gt) = synthesize(&d, 40, 30, &cam).unwrap();
        let surf = |u: Vector2<f64>| {
            let (h, _) = d.height(u).unwrap();
            cam.ray_unnormalized(u) * (300.0 - h)
        };
        for p in [0usize, 77, 415, 1199] {
            let u = nm.pixel_center(p);
            let e = 1e-5;
            let tu = (surf(u + Vector2::new(e, 0.0)) - surf(u - Vector2::new(e, 0.0))) / (2.0 * e);
            let tv = (surf(u + Vector2::new(0.0, e)) - surf(u - Vector2::new(0.0, e))) / (2.0 * e);
            assert!(nm.normal(p).dot(&tu.normalize()).abs() < 1e-7);
            assert!(nm.normal(p).dot(&tv.normalize()).abs() < 1e-7);
            assert_relative_eq!(gt.depth[p], surf(u).z, epsilon = 1e-9);
        }
    }

    #[test]
    fn synthesized_maps_satisfy_invariants() {
        let scenes = [
            Descriptor::Plane {
                a: 0.3,
                b: -0.2,
                c: 1.0,
            },
            Descriptor::SphereCap {
                center: [16.0, 12.0],
                radius: 10.0,
                cap_angle_deg: 60.0,
            },
            Descriptor::Sinusoid { amp: 2.0, freq: 0.3 },
            Descriptor::Ridge {
                center: [16.0, 16.0],
                angle_deg: 30.0,
                slope: 0.5,
            },
        ];
        for cam in [
            Camera::Orthographic,
            Camera::perspective(200.0, 200.0, 16.0, 12.0).unwrap(),
        ] {
            for s in &scenes {
                let (nm, gt) = synthesize(s, 32, 24, &cam).unwrap();
                for p in 0..nm.len() {
                    if nm.is_foreground(p) {
                        let n = nm.normal(p);
                        assert!((n.norm() - 1.0).abs() < 1e-6 && n.z > 0.0);
                        assert!(gt.depth[p].is_finite());
                        assert!((gt.normals[p] - n).norm() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_is_identity_and_seeded_noise_is_deterministic() {
        let (nm, _) = synthesize(
            &Descriptor::Sinusoid { amp: 2.0, freq: 0.3 },
            16,
            16,
            &Camera::Orthographic,
        )
        .unwrap();
        assert_eq!(add_noise(&nm, 0.0, 7), nm);
        assert_eq!(add_noise(&nm, 3.0, 7), add_noise(&nm, 3.0, 7));
        assert_ne!(add_noise(&nm, 3.0, 7), add_noise(&nm, 3.0, 8));
    }

    #[test]
    fn noise_angular_statistics() {
        // Monte-Carlo check: each tangent component deviates by an angle
        // with standard deviation sigma; the total deviation is Rayleigh
        // distributed with mean sigma * sqrt(pi / 2).
        let n = 100_000;
        let nm = NormalMap::constant(n, 1, Vector3::z()).unwrap();
        let noisy = add_noise(&nm, 3.0, 1);
        let sigma = 3.0f64;
        let mut sum_dev = 0.0;
        let mut sum_sq_x = 0.0;
        for p in 0..n {
            let v = noisy.normal(p);
            sum_dev += v.z.clamp(-1.0, 1.0).acos().to_degrees();
            sum_sq_x += (v.x / v.z).atan().to_degrees().powi(2);
        }
        let mean_dev = sum_dev / n as f64;
        let std_x = (sum_sq_x / n as f64).sqrt();
        assert!((std_x - sigma).abs() < 0.1 * sigma, "component std {std_x}");
        let rayleigh_mean = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!(
            (mean_dev - rayleigh_mean).abs() < 0.1 * rayleigh_mean,
            "mean {mean_dev}"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn integer_roundtrip_within_quantization(
                x in -0.7f64..0.7, y in -0.7f64..0.7, wide in any::<bool>()
            ) {
                let n = Vector3::new(x, y, (1.0 - x * x - y * y).max(0.02).sqrt()).normalize();
                let nm = NormalMap::constant(2, 2, n).unwrap();
                let enc = if wide { Encoding::U16 } else { Encoding::U8 };
                let back = decode(&encode(&nm, enc).unwrap(), enc, MaskSource::Alpha).unwrap();
                // quantisation error per component, plus renormalisation slack
                let q = 2.0 / enc.max_value();
                for p in 0..4 {
                    let d = back.normal(p) - n;
                    prop_assert!(d.amax() <= 2.0 * q, "{:?}", d);
                }
            }
        }
    }
}
