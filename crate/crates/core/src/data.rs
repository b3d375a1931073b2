//! Scene datasets in the synthetic-scene transforms layout, few-shot view
//! selection, and procedurally generated scenes with known geometry.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{write_atomic, AnalyticField};
use crate::geometry::{intrinsics_from_fov, CameraIntrinsics, Pose, Vec3};
use crate::render::{render_image, write_png_rgb8, SamplingConfig};

pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;
/// Rotations further than this from orthonormal are rejected.
pub const ORTHONORMAL_REJECT: f64 = 1e-4;
/// Rotations further than this are re-orthonormalized with a warning.
pub const ORTHONORMAL_WARN: f64 = 1e-6;
/// Samples per ray for ground-truth renders of analytic scenes.
pub const GROUND_TRUTH_SAMPLES: usize = 512;

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pose: Pose,
    pub image: Image,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
    /// Non-fatal problems found while loading.
    pub warnings: Vec<String>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    white_background: Option<bool>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

fn dataset_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn resolve_image(base: &Path, file_path: &str) -> Option<PathBuf> {
    let direct = base.join(file_path);
    if direct.is_file() {
        return Some(direct);
    }
    let with_ext = base.join(format!("{file_path}.png"));
    with_ext.is_file().then_some(with_ext)
}

/// Loads a transforms file, resolving image paths relative to its directory.
/// `white_background` overrides the file's setting when given.
pub fn load_transforms(path: &Path, white_background: Option<bool>) -> Result<SceneDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TransformsFile =
        serde_json::from_str(&text).map_err(|e| dataset_error(path, e.to_string()))?;
    if file.frames.is_empty() {
        return Err(dataset_error(path, "no frames"));
    }
    let white = white_background.or(file.white_background).unwrap_or(true);
    let near = file.near.unwrap_or(DEFAULT_NEAR);
    let far = file.far.unwrap_or(DEFAULT_FAR);
    if !(near > 0.0 && near < far) {
        return Err(dataset_error(
            path,
            format!("need 0 < near < far, got {near} / {far}"),
        ));
    }
    let base = path.parent().unwrap_or(Path::new("."));

    let mut frames = Vec::with_capacity(file.frames.len());
    let mut warnings = Vec::new();
    let mut size = None;
    for (i, entry) in file.frames.iter().enumerate() {
        let mut pose = Pose::from_matrix(&entry.transform_matrix);
        if !pose.translation.is_finite() {
            return Err(dataset_error(
                path,
                format!("frame {i}: non-finite translation"),
            ));
        }
        let err = pose.rotation.orthonormality_error();
        if !(err <= ORTHONORMAL_REJECT) || pose.rotation.determinant() <= 0.0 {
            return Err(dataset_error(
                path,
                format!("frame {i}: rotation is not orthonormal (error {err:.3e})"),
            ));
        }
        if err > ORTHONORMAL_WARN {
            warnings.push(format!(
                "frame {i}: rotation off by {err:.3e}, re-orthonormalized"
            ));
            pose = pose.orthonormalized();
        }
        let img_path = resolve_image(base, &entry.file_path).ok_or_else(|| {
            dataset_error(
                path,
                format!("frame {i}: image {} not found", entry.file_path),
            )
        })?;
        let image = load_image(&img_path, white)?;
        match size {
            None => size = Some((image.width, image.height)),
            Some(s) if s != (image.width, image.height) => {
                return Err(dataset_error(
                    &img_path,
                    format!(
                        "size {}x{} differs from {}x{}",
                        image.width, image.height, s.0, s.1
                    ),
                ));
            }
            _ => {}
        }
        frames.push(Frame {
            pose,
            image,
            path: img_path,
        });
    }
    let (w, h) = size.expect("at least one frame");
    let intrinsics = intrinsics_from_fov(file.camera_angle_x, w, h)
        .map_err(|e| dataset_error(path, e.to_string()))?;
    Ok(SceneDataset {
        intrinsics,
        frames,
        near,
        far,
        white_background: white,
        warnings,
    })
}

/// Decodes an 8-bit RGB or RGBA PNG, compositing alpha over white or black.
pub fn load_image(path: &Path, white_background: bool) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != png::BitDepth::Eight || !matches!(color, png::ColorType::Rgb | png::ColorType::Rgba)
    {
        return Err(bad(format!(
            "{color:?} at {depth:?} bits; expected 8-bit RGB or RGBA"
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let bg = if white_background { 1.0 } else { 0.0 };
    let channels = if color == png::ColorType::Rgba { 4 } else { 3 };
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * frame.line_size..y * frame.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            let a = if channels == 4 {
                px[3] as f64 / 255.0
            } else {
                1.0
            };
            for &c in &px[..3] {
                let v = c as f64 / 255.0 * a + (1.0 - a) * bg;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image::new(w, h, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewSelector {
    Seed(u64),
    Explicit(Vec<usize>),
}

/// Indices of the chosen views. Seeded choices are returned ascending.
pub fn few_shot_indices(n_frames: usize, k: usize, selector: &ViewSelector) -> Result<Vec<usize>> {
    if k == 0 || k > n_frames {
        return Err(Error::invalid(format!(
            "cannot select {k} of {n_frames} views"
        )));
    }
    match selector {
        ViewSelector::Seed(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut idx = index::sample(&mut rng, n_frames, k).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        ViewSelector::Explicit(idx) => {
            if idx.len() != k {
                return Err(Error::invalid(format!(
                    "{} explicit indices given for k = {k}",
                    idx.len()
                )));
            }
            for (j, &i) in idx.iter().enumerate() {
                if i >= n_frames {
                    return Err(Error::invalid(format!(
                        "view index {i} out of range for {n_frames} views"
                    )));
                }
                if idx[..j].contains(&i) {
                    return Err(Error::invalid(format!("view index {i} listed twice")));
                }
            }
            Ok(idx.clone())
        }
    }
}

pub fn select_few_shot(
    dataset: &SceneDataset,
    k: usize,
    selector: &ViewSelector,
) -> Result<SceneDataset> {
    let idx = few_shot_indices(dataset.len(), k, selector)?;
    Ok(SceneDataset {
        frames: idx.iter().map(|&i| dataset.frames[i].clone()).collect(),
        ..dataset.clone()
    })
}

/// Box-filters every image by `factor` and scales the intrinsics to match.
pub fn downscale(dataset: &SceneDataset, factor: usize) -> Result<SceneDataset> {
    let intr = dataset.intrinsics;
    if factor == 0 || intr.width % factor != 0 || intr.height % factor != 0 {
        return Err(Error::invalid(format!(
            "factor {factor} does not divide image size {}x{}",
            intr.width, intr.height
        )));
    }
    let (w, h) = (intr.width / factor, intr.height / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let frames = dataset
        .frames
        .iter()
        .map(|f| {
            let mut data = vec![0.0; w * h * 3];
            for y in 0..intr.height {
                for x in 0..intr.width {
                    let src = f.image.pixel(x, y);
                    let o = 3 * ((y / factor) * w + x / factor);
                    for c in 0..3 {
                        data[o + c] += src[c] * norm;
                    }
                }
            }
            Frame {
                image: Image::new(w, h, data),
                ..f.clone()
            }
        })
        .collect();
    let intrinsics = CameraIntrinsics::new(w, h, intr.focal / factor as f64)?;
    Ok(SceneDataset {
        intrinsics,
        frames,
        ..dataset.clone()
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrbitLayout {
    /// Evenly spread spiral over the sphere.
    #[default]
    Fibonacci,
    /// Independent uniform directions.
    Uniform,
}

/// Camera positions at distance `radius` from the origin.
pub fn orbit_positions(
    n: usize,
    radius: f64,
    layout: OrbitLayout,
    rng: &mut impl Rng,
) -> Vec<Vec3> {
    match layout {
        OrbitLayout::Fibonacci => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
                })
                .collect()
        }
        OrbitLayout::Uniform => (0..n)
            .map(|_| crate::geometry::random_unit_vector(rng) * radius)
            .collect(),
    }
}

/// Cameras on an orbit aimed at the origin, `+z` up.
pub fn orbit_poses(n: usize, radius: f64, layout: OrbitLayout, rng: &mut impl Rng) -> Vec<Pose> {
    orbit_positions(n, radius, layout, rng)
        .into_iter()
        .map(|eye| Pose::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)))
        .collect()
}

/// Sampling used for ground-truth renders of analytic scenes.
pub fn ground_truth_sampling(near: f64, far: f64, white_background: bool) -> SamplingConfig {
    SamplingConfig {
        near,
        far,
        n_coarse: GROUND_TRUTH_SAMPLES,
        n_fine: 0,
        jitter: false,
        white_background,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub field: AnalyticField,
    pub intrinsics: CameraIntrinsics,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    pub layout: OrbitLayout,
    pub white_background: bool,
}

/// Renders the analytic field from `n_views` orbit cameras.
pub fn generate_procedural_scene(
    spec: &SceneSpec,
    n_views: usize,
    rng: &mut impl Rng,
) -> Result<SceneDataset> {
    if n_views == 0 {
        return Err(Error::invalid("a scene needs at least one view"));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::invalid(format!(
            "orbit radius must be > 0, got {}",
            spec.radius
        )));
    }
    render_views(spec, orbit_poses(n_views, spec.radius, spec.layout, rng))
}

/// Ground-truth renders of the analytic field from the given cameras.
pub fn render_views(spec: &SceneSpec, poses: Vec<Pose>) -> Result<SceneDataset> {
    let sampling = ground_truth_sampling(spec.near, spec.far, spec.white_background);
    sampling.validate()?;
    let intr = spec.intrinsics;
    let mut frames = Vec::with_capacity(poses.len());
    for pose in poses {
        let img = render_image(&spec.field, &intr, &pose, &sampling, 4096)?;
        let data = img.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        frames.push(Frame {
            pose,
            image: Image::new(intr.width, intr.height, data),
            path: PathBuf::new(),
        });
    }
    Ok(SceneDataset {
        intrinsics: intr,
        frames,
        near: spec.near,
        far: spec.far,
        white_background: spec.white_background,
        warnings: Vec::new(),
    })
}

/// Horizontal field of view of the intrinsics, as stored in transforms files.
pub fn camera_angle_x(intr: &CameraIntrinsics) -> f64 {
    2.0 * (intr.width as f64 / (2.0 * intr.focal)).atan()
}

/// Writes `transforms_<split>.json` and `images/<split>_NNN.png` under `dir`.
pub fn write_split(dir: &Path, split: &str, dataset: &SceneDataset) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, frame) in dataset.frames.iter().enumerate() {
        let rel = format!("images/{split}_{i:03}.png");
        let img = &frame.image;
        write_png_rgb8(&dir.join(&rel), img.width, img.height, &img.data)?;
        entries.push(FrameEntry {
            file_path: rel,
            transform_matrix: frame.pose.to_matrix(),
        });
    }
    let file = TransformsFile {
        camera_angle_x: camera_angle_x(&dataset.intrinsics),
        near: Some(dataset.near),
        far: Some(dataset.far),
        white_background: Some(dataset.white_background),
        frames: entries,
    };
    let path = dir.join(format!("transforms_{split}.json"));
    let json = serde_json::to_vec_pretty(&file).expect("transforms serialize");
    write_atomic(&path, &json)?;
    Ok(path)
}

/// Test cameras for a procedural scene, drawn independently of the
/// training ones.
pub fn procedural_test_poses(spec: &SceneSpec, n_test: usize, seed: u64) -> Vec<Pose> {
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut poses = orbit_poses(n_test, spec.radius, spec.layout, &mut test_rng);
    if spec.layout == OrbitLayout::Fibonacci {
        // Turn the test spiral so no test camera repeats a training one.
        let up = Vec3::new(0.0, 0.0, 1.0);
        let turn = crate::geometry::Mat3::axis_angle(up, 0.5);
        for p in &mut poses {
            *p = Pose::look_at(turn.mul_vec(p.translation), Vec3::ZERO, up);
        }
    }
    poses
}

/// In-memory train and test splits, identical to what
/// [`write_procedural_scene`] writes.
pub fn procedural_splits(
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(SceneDataset, Option<SceneDataset>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_procedural_scene(spec, n_train, &mut rng)?;
    let test = if n_test > 0 {
        Some(render_views(spec, procedural_test_poses(spec, n_test, seed))?)
    } else {
        None
    };
    Ok((train, test))
}

/// Generates and writes a train/test scene, plus `scene.json` describing the
/// analytic field.
pub fn write_procedural_scene(
    dir: &Path,
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<()> {
    let (train, test) = procedural_splits(spec, n_train, n_test, seed)?;
    write_split(dir, "train", &train)?;
    if let Some(test) = test {
        write_split(dir, "test", &test)?;
    }
    let path = dir.join("scene.json");
    write_atomic(
        &path,
        &serde_json::to_vec_pretty(spec).expect("scene serializes"),
    )
}
