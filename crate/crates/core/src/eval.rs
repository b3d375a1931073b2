//! Image metrics, test-set evaluation and the post-training entropy report.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::autodiff::{Graph, Tensor};
use crate::data::{Image, SceneDataset};
use crate::error::{Error, Result};
use crate::geometry::{perturb_pose, pixel_to_ray, CameraIntrinsics, Pose};
use crate::infoloss::{kl_loss, ray_density, ray_entropy, ray_mask};
use crate::render::{
    alpha_at_depths, render_hierarchical, render_image, DepthPlan, InferenceField, SamplingConfig,
};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = w
                .iter()
                .zip(&src[x..x + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = w
                .iter()
                .enumerate()
                .map(|(k, a)| a * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// dynamic range 1, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &win));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Summary {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub views: Vec<ViewMetrics>,
    /// Over finite PSNR values only; `None` when every view is exact.
    pub psnr: Option<Summary>,
    pub ssim: Summary,
    pub infinite_psnr_views: usize,
    /// Wall-clock seconds per view. Kept out of the JSON so reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub render_seconds: Vec<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn mean_psnr(&self) -> f64 {
        self.psnr.map_or(f64::INFINITY, |s| s.mean)
    }
}

/// Renders every frame with jitter off and scores it against its image.
pub fn evaluate(
    field: &dyn InferenceField,
    test: &SceneDataset,
    sampling: &SamplingConfig,
    chunk: usize,
    label: &str,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation needs at least one test view"));
    }
    let cfg = sampling.deterministic();
    let intr = test.intrinsics;
    let mut views = Vec::with_capacity(test.len());
    let mut render_seconds = Vec::with_capacity(test.len());
    for (i, frame) in test.frames.iter().enumerate() {
        if frame.image.width != intr.width || frame.image.height != intr.height {
            return Err(Error::invalid(format!(
                "view {i} is {}x{} but the intrinsics are {}x{}",
                frame.image.width, frame.image.height, intr.width, intr.height
            )));
        }
        let start = Instant::now();
        let img = render_image(field, &intr, &frame.pose, &cfg, chunk)?;
        render_seconds.push(start.elapsed().as_secs_f64());
        let pred = Image::new(
            img.width,
            img.height,
            img.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        );
        views.push(ViewMetrics {
            view: i,
            psnr: psnr(&pred, &frame.image)?,
            ssim: ssim(&pred, &frame.image)?,
        });
    }
    let finite: Vec<f64> = views
        .iter()
        .map(|v| v.psnr)
        .filter(|v| v.is_finite())
        .collect();
    let ssims: Vec<f64> = views.iter().map(|v| v.ssim).collect();
    Ok(EvalReport {
        label: label.to_string(),
        infinite_psnr_views: views.len() - finite.len(),
        psnr: Summary::of(&finite),
        ssim: Summary::of(&ssims).expect("nonempty"),
        views,
        render_seconds,
    })
}

/// Table of method, PSNR and SSIM rows with aligned columns.
pub fn eval_table(reports: &[&EvalReport]) -> String {
    let rows: Vec<[String; 3]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.psnr.map_or("inf".into(), |s| format!("{:.4}", s.mean)),
                format!("{:.4}", r.ssim.mean),
            ]
        })
        .collect();
    aligned_table(&["method", "PSNR", "SSIM"], &rows)
}

/// Per-view table of one report, with a difference column against `other`
/// when given (this minus other).
pub fn eval_view_table(report: &EvalReport, other: Option<&EvalReport>) -> Result<String> {
    let mut header = vec!["view", "PSNR", "SSIM"];
    if other.is_some() {
        header.extend(["dPSNR", "dSSIM"]);
    }
    if let Some(o) = other {
        if o.views.len() != report.views.len() {
            return Err(Error::invalid(format!(
                "reports cover {} and {} views",
                report.views.len(),
                o.views.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, v) in report.views.iter().enumerate() {
        let mut row = vec![
            v.view.to_string(),
            format_db(v.psnr),
            format!("{:.4}", v.ssim),
        ];
        if let Some(o) = other {
            let ov = &o.views[i];
            row.push(format_delta(v.psnr - ov.psnr));
            row.push(format_delta(v.ssim - ov.ssim));
        }
        rows.push(row);
    }
    Ok(aligned_table(&header, &rows))
}

fn format_delta(d: f64) -> String {
    if d.is_nan() {
        "n/a".into()
    } else if d.is_infinite() {
        if d > 0.0 {
            "+inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{d:+.4}")
    }
}

fn aligned_table<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row.as_ref()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in rows {
        line(row.as_ref().iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyReportConfig {
    /// Rays per pose along each image axis.
    pub grid: usize,
    /// Partner rotation bound in degrees.
    pub max_angle: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for EntropyReportConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            max_angle: 5.0,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    pub label: String,
    pub poses: usize,
    pub rays: usize,
    /// Masked ray entropy averaged over all rays, masked ones counting zero.
    pub mean_entropy: f64,
    /// Entropy averaged over the rays that pass the mask only.
    pub mean_active_entropy: f64,
    /// Mean KL to the rotated partner over pairs with both densities defined.
    pub mean_information_gain: f64,
    pub mask_rate: f64,
    pub valid_pairs: usize,
    pub no_valid_rays: bool,
}

impl EntropyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn grid_coords(n: usize, size: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64 + 0.5) * size as f64 / n as f64 - 0.5).max(0.0))
        .collect()
}

/// Casts a `grid x grid` set of rays per pose and measures ray entropy and
/// the KL to partner rays from a camera rotated by at most `max_angle`,
/// evaluated at the same depths.
pub fn entropy_report(
    field: &dyn InferenceField,
    intr: &CameraIntrinsics,
    poses: &[Pose],
    sampling: &SamplingConfig,
    cfg: &EntropyReportConfig,
    label: &str,
) -> Result<EntropyReport> {
    if poses.is_empty() {
        return Err(Error::invalid("entropy report needs at least one pose"));
    }
    if cfg.grid == 0 {
        return Err(Error::Config("entropy grid must be >= 1".into()));
    }
    let sampling = sampling.deterministic();
    sampling.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let xs = grid_coords(cfg.grid, intr.width);
    let ys = grid_coords(cfg.grid, intr.height);
    let (mut ent_sum, mut active, mut rays_total) = (0.0, 0usize, 0usize);
    let (mut kl_sum, mut pairs) = (0.0, 0usize);
    for pose in poses {
        let mut rays = Vec::with_capacity(xs.len() * ys.len());
        let mut partners = Vec::with_capacity(rays.capacity());
        for &py in &ys {
            for &px in &xs {
                rays.push(pixel_to_ray(intr, pose, px, py));
                let partner_pose = perturb_pose(pose, cfg.max_angle, &mut rng);
                partners.push(pixel_to_ray(intr, &partner_pose, px, py));
            }
        }
        let mut g = Graph::new();
        let f = field.frozen(&mut g);
        let mut render_rng = ChaCha8Rng::seed_from_u64(0);
        let out = render_hierarchical(
            &mut g,
            f.as_ref(),
            &rays,
            &sampling,
            &DepthPlan::default(),
            &mut render_rng,
        )?;
        let last = out.last();
        // Both sides through the same path so identical rays give identical alphas.
        let primary = alpha_at_depths(&mut g, f.as_ref(), &rays, &last.t, &last.delta)?;
        let partner = alpha_at_depths(&mut g, f.as_ref(), &partners, &last.t, &last.delta)?;
        let alpha: Tensor = g.value(primary).clone();
        let alpha_p: Tensor = g.value(partner).clone();
        for r in 0..rays.len() {
            rays_total += 1;
            let a = alpha.row(r);
            if ray_mask(a, cfg.epsilon) {
                active += 1;
                let d = ray_density(a)?;
                ent_sum += ray_entropy(&d)?;
            }
            let (d, dp) = (ray_density(a)?, ray_density(alpha_p.row(r))?);
            if d.defined && dp.defined {
                kl_sum += kl_loss(&d, &dp)?;
                pairs += 1;
            }
        }
    }
    Ok(EntropyReport {
        label: label.to_string(),
        poses: poses.len(),
        rays: rays_total,
        mean_entropy: ent_sum / rays_total as f64,
        mean_active_entropy: if active > 0 { ent_sum / active as f64 } else { 0.0 },
        mean_information_gain: if pairs > 0 {
            kl_sum / pairs as f64
        } else {
            0.0
        },
        mask_rate: active as f64 / rays_total as f64,
        valid_pairs: pairs,
        no_valid_rays: active == 0,
    })
}

/// Aligned table of entropy reports; with two reports a difference column
/// (second minus first) is appended.
pub fn entropy_table(reports: &[&EntropyReport]) -> String {
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    let compare = reports.len() == 2;
    if compare {
        header.push("delta".into());
    }
    let metrics: [(&str, fn(&EntropyReport) -> f64); 4] = [
        ("entropy", |r| r.mean_entropy),
        ("active_entropy", |r| r.mean_active_entropy),
        ("information_gain", |r| r.mean_information_gain),
        ("mask_rate", |r| r.mask_rate),
    ];
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|(name, get)| {
            let mut row = vec![name.to_string()];
            row.extend(reports.iter().map(|r| format!("{:.6}", get(r))));
            if compare {
                row.push(format!("{:+.6}", get(reports[1]) - get(reports[0])));
            }
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    aligned_table(&header, &rows)
}
