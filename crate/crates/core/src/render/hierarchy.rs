//! Two-stage (coarse, then importance-sampled fine) rendering of ray batches.
//!
//! The fine pass reuses the coarse field evaluations: only the new depths
//! are queried, and the merged sequence is assembled with a gather in sorted
//! depth order. With a single network for both passes this is exactly the
//! same as re-evaluating the merged depths.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::sampling::{importance_unchecked, interval_lengths, merge_order, stratified_unchecked};
use super::volume::{composite, opacity, query_samples, sample_points, Composite};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::FieldQuery;
use crate::geometry::Ray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    /// Zero disables the fine pass.
    pub n_fine: usize,
    /// Random positions inside strata (training) instead of midpoints.
    pub jitter: bool,
    pub white_background: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            near: 2.0,
            far: 6.0,
            n_coarse: 64,
            n_fine: 64,
            jitter: true,
            white_background: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if self.n_coarse == 0 {
            return Err(Error::Config("sampling.n_coarse must be >= 1".into()));
        }
        Ok(())
    }

    pub fn deterministic(mut self) -> Self {
        self.jitter = false;
        self
    }

    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_fine
    }
}

/// One compositing pass plus the depths it used.
#[derive(Clone, Debug)]
pub struct PassOutput {
    pub composite: Composite,
    /// `[R, N]`
    pub sigma: Var,
    /// `[R, N]`
    pub t: Tensor,
    /// `[R, N]`
    pub delta: Tensor,
}

#[derive(Clone, Debug)]
pub struct HierarchicalOutput {
    pub coarse: PassOutput,
    pub fine: Option<PassOutput>,
    /// The importance-sampled depths alone, `[R, n_fine]`.
    pub fine_only_t: Option<Tensor>,
    /// Rays whose coarse weights were all zero.
    pub uniform_fallbacks: usize,
}

impl HierarchicalOutput {
    /// Fine pass when present, otherwise coarse.
    pub fn last(&self) -> &PassOutput {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

/// Depths to use instead of sampling. Gradient checks pin both so the loss
/// is a smooth function of the parameters.
#[derive(Clone, Debug, Default)]
pub struct DepthPlan {
    pub coarse: Option<Tensor>,
    pub fine: Option<Tensor>,
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let n = rows.first().map_or(0, Vec::len);
    Tensor::new([rows.len(), n], rows.iter().flatten().copied().collect())
}

fn deltas(t: &Tensor, far: f64) -> Tensor {
    let n = t.shape()[1];
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.shape()[0] {
        out.extend(interval_lengths(t.row(i), far));
    }
    Tensor::new([t.shape()[0], n], out)
}

pub fn render_hierarchical(
    g: &mut Graph,
    field: &dyn FieldQuery,
    rays: &[Ray],
    cfg: &SamplingConfig,
    plan: &DepthPlan,
    rng: &mut dyn RngCore,
) -> Result<HierarchicalOutput> {
    render_passes(g, field, rays, cfg, plan, rng, true)
}

/// Like [`render_hierarchical`] but evaluates density only; composited
/// colors are background alone. For rays that only feed density losses.
pub fn render_hierarchical_density(
    g: &mut Graph,
    field: &dyn FieldQuery,
    rays: &[Ray],
    cfg: &SamplingConfig,
    plan: &DepthPlan,
    rng: &mut dyn RngCore,
) -> Result<HierarchicalOutput> {
    render_passes(g, field, rays, cfg, plan, rng, false)
}

fn render_passes(
    g: &mut Graph,
    field: &dyn FieldQuery,
    rays: &[Ray],
    cfg: &SamplingConfig,
    plan: &DepthPlan,
    rng: &mut dyn RngCore,
    color: bool,
) -> Result<HierarchicalOutput> {
    let r = rays.len();
    let coarse_t = match &plan.coarse {
        Some(t) => {
            if t.shape() != [r, cfg.n_coarse] {
                return Err(Error::invalid(format!(
                    "coarse depth plan has shape {:?}",
                    t.shape()
                )));
            }
            t.clone()
        }
        None => {
            let rows: Vec<Vec<f64>> = (0..r)
                .map(|_| stratified_unchecked(cfg.near, cfg.far, cfg.n_coarse, cfg.jitter, rng))
                .collect();
            if r == 0 {
                Tensor::zeros([0, cfg.n_coarse])
            } else {
                rows_to_tensor(&rows)
            }
        }
    };
    let coarse_delta = deltas(&coarse_t, cfg.far);
    let (sigma_c, rgb_c) = query_samples(g, field, rays, &coarse_t, color)?;
    let comp_c = composite(
        g,
        sigma_c,
        rgb_c,
        &coarse_t,
        &coarse_delta,
        cfg.white_background,
    );
    let coarse = PassOutput {
        composite: comp_c,
        sigma: sigma_c,
        t: coarse_t,
        delta: coarse_delta,
    };

    if cfg.n_fine == 0 {
        return Ok(HierarchicalOutput {
            coarse,
            fine: None,
            fine_only_t: None,
            uniform_fallbacks: 0,
        });
    }

    let nc = cfg.n_coarse;
    let nf = cfg.n_fine;
    let mut fallbacks = 0;
    let fine_only = match &plan.fine {
        Some(t) => {
            if t.shape() != [r, nf] {
                return Err(Error::invalid(format!(
                    "fine depth plan has shape {:?}",
                    t.shape()
                )));
            }
            t.clone()
        }
        None => {
            let weights = g.value(comp_c.weights).clone();
            let mut rows = Vec::with_capacity(r);
            for i in 0..r {
                let s = importance_unchecked(
                    coarse.t.row(i),
                    weights.row(i),
                    cfg.near,
                    cfg.far,
                    nf,
                    cfg.jitter,
                    rng,
                );
                fallbacks += usize::from(s.uniform_fallback);
                rows.push(s.fine);
            }
            if r == 0 {
                Tensor::zeros([0, nf])
            } else {
                rows_to_tensor(&rows)
            }
        }
    };

    let (sigma_f, rgb_f) = query_samples(g, field, rays, &fine_only, color)?;
    let n = nc + nf;
    let mut merged_t = Vec::with_capacity(r * n);
    let mut sigma_idx = Vec::with_capacity(r * n);
    let mut rgb_idx = Vec::with_capacity(r * n * 3);
    for i in 0..r {
        let order = merge_order(coarse.t.row(i), fine_only.row(i));
        for j in order {
            let v = if j < nc {
                coarse.t.row(i)[j]
            } else {
                fine_only.row(i)[j - nc]
            };
            merged_t.push(v);
            let flat = i * n + j;
            sigma_idx.push(flat);
            rgb_idx.extend([3 * flat, 3 * flat + 1, 3 * flat + 2]);
        }
    }
    let sigma_all = g.concat(&[sigma_c, sigma_f], 1);
    let rgb_all = g.concat(&[rgb_c, rgb_f], 1);
    let sigma = g.gather(sigma_all, sigma_idx, [r, n]);
    let rgb = g.gather(rgb_all, rgb_idx, [r, n, 3]);
    let t = Tensor::new([r, n], merged_t);
    let delta = deltas(&t, cfg.far);
    let comp = composite(g, sigma, rgb, &t, &delta, cfg.white_background);

    Ok(HierarchicalOutput {
        coarse,
        fine: Some(PassOutput {
            composite: comp,
            sigma,
            t,
            delta,
        }),
        fine_only_t: Some(fine_only),
        uniform_fallbacks: fallbacks,
    })
}

/// Opacities `[R, N]` along `rays` at the given depths and intervals, for
/// comparing neighbouring rays sample by sample.
pub fn alpha_at_depths(
    g: &mut Graph,
    field: &dyn FieldQuery,
    rays: &[Ray],
    t: &Tensor,
    delta: &Tensor,
) -> Result<Var> {
    let (r, n) = (t.shape()[0], t.shape()[1]);
    let (pos, _) = sample_points(rays, t);
    let pv = g.constant(pos);
    let sigma = field.query_density(g, pv);
    super::volume::check_finite(g.value(sigma), "sigma")?;
    let sigma = g.reshape(sigma, [r, n]);
    Ok(opacity(g, sigma, delta))
}
