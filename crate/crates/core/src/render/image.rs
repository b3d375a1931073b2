use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hierarchy::{render_hierarchical, DepthPlan, SamplingConfig};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::field::{write_atomic, AnalyticField, FieldQuery, NeuralField};
use crate::geometry::{pixel_to_ray, CameraIntrinsics, Pose, Ray};

/// A field that can be instantiated read-only inside any graph, so image
/// chunks can render independently.
pub trait InferenceField: Sync {
    fn frozen<'a>(&'a self, g: &mut Graph) -> Box<dyn FieldQuery + 'a>;
}

impl InferenceField for NeuralField {
    fn frozen<'a>(&'a self, g: &mut Graph) -> Box<dyn FieldQuery + 'a> {
        Box::new(self.bind_frozen(g))
    }
}

impl InferenceField for AnalyticField {
    fn frozen<'a>(&'a self, _g: &mut Graph) -> Box<dyn FieldQuery + 'a> {
        Box::new(*self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `H x W x 3`.
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderedImage {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Rays through pixel centers in row-major order.
pub fn camera_rays(intr: &CameraIntrinsics, pose: &Pose) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(intr.pixel_count());
    for y in 0..intr.height {
        for x in 0..intr.width {
            rays.push(pixel_to_ray(intr, pose, x as f64, y as f64));
        }
    }
    rays
}

/// Renders every pixel of the view. Chunks of `chunk` rays run in parallel;
/// with jitter off the result does not depend on `chunk`.
pub fn render_image(
    field: &dyn InferenceField,
    intr: &CameraIntrinsics,
    pose: &Pose,
    cfg: &SamplingConfig,
    chunk: usize,
) -> Result<RenderedImage> {
    cfg.validate()?;
    let rays = camera_rays(intr, pose);
    let chunk = chunk.max(1);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, batch)| {
            let mut g = Graph::new();
            let f = field.frozen(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(ci as u64);
            let out = render_hierarchical(
                &mut g,
                f.as_ref(),
                batch,
                cfg,
                &DepthPlan::default(),
                &mut rng,
            )?;
            let pass = out.last();
            Ok((
                g.value(pass.composite.rgb).data().to_vec(),
                g.value(pass.composite.depth).data().to_vec(),
                g.value(pass.composite.acc).data().to_vec(),
            ))
        })
        .collect();
    let mut img = RenderedImage {
        width: intr.width,
        height: intr.height,
        rgb: Vec::with_capacity(rays.len() * 3),
        depth: Vec::with_capacity(rays.len()),
        opacity: Vec::with_capacity(rays.len()),
    };
    for part in parts {
        let (rgb, depth, acc) = part?;
        img.rgb.extend(rgb);
        img.depth.extend(depth);
        img.opacity.extend(acc);
    }
    Ok(img)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// 8-bit RGB PNG of values in `[0, 1]`.
pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    write_png(
        path,
        width,
        height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &bytes,
    )
}

/// 16-bit grayscale PNG, min-max normalized.
pub fn write_png_gray16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(values.len() * 2);
    for &v in values {
        let n = if span > 0.0 { (v - lo) / span } else { 0.0 };
        let q = (n.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_png(
        path,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

/// Sidecar describing a raw depth file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Raw little-endian `f64` depth values plus a `.json` sidecar next to them.
pub fn write_depth_raw(path: &Path, values: &[f64], sidecar: &DepthSidecar) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    let side = path.with_extension("json");
    let json = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
    write_atomic(&side, &json)
}
