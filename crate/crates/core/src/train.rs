//! Optimization: seen/unseen ray batches, neighbour-ray pairs for the KL
//! term, Adam, and the learning-rate and KL-weight schedules.
//!
//! Every iteration draws its randomness from a generator keyed by
//! `(seed, iteration)`, so a run resumed from a checkpoint retraces the
//! uninterrupted run exactly.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::SceneDataset;
use crate::error::{Error, Result};
use crate::field::{Checkpoint, FieldQuery, ModelConfig, NeuralField};
use crate::geometry::{perturb_pose, pixel_to_ray, JitterReaim, Ray, UnseenPoseSampler};
use crate::infoloss::{
    entropy_loss_graph, kl_loss_graph, rgb_loss_graph, LossBreakdown, LossWeights,
};
use crate::render::{
    alpha_at_depths, render_hierarchical, render_hierarchical_density, DepthPlan,
    HierarchicalOutput, PassOutput, SamplingConfig,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_FORMAT: &str = "raygauge-field";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr_init: f64,
    pub lr_decay_every: f64,
    pub lr_decay_factor: f64,
    pub kl_decay_every: usize,
    pub kl_decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            lr_decay_every: 250_000.0,
            lr_decay_factor: 10.0,
            kl_decay_every: 5000,
            kl_decay_factor: 2.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "schedule.lr_init must be > 0, got {}",
                self.lr_init
            )));
        }
        if !(self.lr_decay_every > 0.0) || self.kl_decay_every == 0 {
            return Err(Error::Config("schedule decay intervals must be > 0".into()));
        }
        if !(self.lr_decay_factor > 1.0) || !(self.kl_decay_factor > 1.0) {
            return Err(Error::Config("schedule decay factors must be > 1".into()));
        }
        Ok(())
    }
}

/// `lr_init * factor^(-iter / decay_every)`, decaying continuously.
pub fn lr_schedule(iter: usize, s: &ScheduleConfig) -> f64 {
    s.lr_init * s.lr_decay_factor.powf(-(iter as f64) / s.lr_decay_every)
}

/// KL weight, divided by the decay factor once every `kl_decay_every`
/// iterations.
pub fn kl_weight_schedule(iter: usize, lambda2_init: f64, s: &ScheduleConfig) -> f64 {
    let k = (iter / s.kl_decay_every) as i32;
    lambda2_init / s.kl_decay_factor.powi(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub n_seen_rays: usize,
    pub n_unseen_rays: usize,
    pub seed: u64,
    /// Largest orbit rotation, in degrees, for unseen cameras.
    pub unseen_angle: f64,
    /// Largest rotation, in degrees, of a KL partner camera.
    pub kl_angle: f64,
    /// Cap on rays given a KL partner; all eligible rays when unset.
    pub kl_rays: Option<usize>,
    /// Only seen rays get KL partners.
    pub kl_seen_only: bool,
    /// Also supervise the coarse pass's colors.
    pub coarse_rgb: bool,
    /// Average the entropy of the coarse pass in with the fine one.
    pub entropy_on_coarse: bool,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Zero disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            n_seen_rays: 1024,
            n_unseen_rays: 1024,
            seed: 0,
            unseen_angle: crate::geometry::DEFAULT_UNSEEN_ANGLE,
            kl_angle: 5.0,
            kl_rays: None,
            kl_seen_only: false,
            coarse_rgb: true,
            entropy_on_coarse: false,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen_rays == 0 {
            return Err(Error::Config("train.n_seen_rays must be >= 1".into()));
        }
        for (name, v) in [
            ("unseen_angle", self.unseen_angle),
            ("kl_angle", self.kl_angle),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "train.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything that determines a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampling.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        self.schedule.validate()
    }

    /// The same run with both regularizers switched off.
    pub fn baseline(mut self) -> Self {
        self.losses.lambda1 = 0.0;
        self.losses.lambda2 = 0.0;
        self.train.n_unseen_rays = 0;
        self
    }
}

/// Adam with 64-bit moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut [(String, Tensor)],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(
                "Adam state, parameters and gradients differ in count",
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::contract(format!("shape mismatch for parameter {i}")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Rays for one iteration: seen rays first, then unseen ones.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rays: Vec<Ray>,
    pub n_seen: usize,
    /// Ground-truth colors of the seen rays, `[n_seen, 3]`.
    pub targets: Tensor,
    /// `(frame, x, y)` of each seen ray.
    pub sources: Vec<(usize, usize, usize)>,
    /// Rows of `rays` that have a KL partner.
    pub kl_index: Vec<usize>,
    /// Partner ray for each entry of `kl_index`.
    pub partners: Vec<Ray>,
}

impl Batch {
    pub fn n_unseen(&self) -> usize {
        self.rays.len() - self.n_seen
    }
}

/// Draws seen pixels uniformly over all training images, unseen rays from
/// sampled cameras through random pixels, and for KL a partner camera
/// rotated about each selected ray's camera, through the same pixel.
pub fn make_batch(
    dataset: &SceneDataset,
    sampler: &dyn UnseenPoseSampler,
    cfg: &TrainConfig,
    with_kl: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one view"));
    }
    let intr = dataset.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut rays = Vec::with_capacity(cfg.n_seen_rays + cfg.n_unseen_rays);
    let mut poses = Vec::with_capacity(rays.capacity());
    let mut targets = Vec::with_capacity(3 * cfg.n_seen_rays);
    let mut sources = Vec::with_capacity(cfg.n_seen_rays);
    for _ in 0..cfg.n_seen_rays {
        let f = rng.random_range(0..dataset.len());
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        let frame = &dataset.frames[f];
        rays.push(pixel_to_ray(&intr, &frame.pose, x as f64, y as f64));
        poses.push(frame.pose);
        targets.extend(frame.image.pixel(x, y));
        sources.push((f, x, y));
    }
    let train_poses = dataset.poses();
    for _ in 0..cfg.n_unseen_rays {
        let pose = sampler.sample(&train_poses, rng);
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        rays.push(pixel_to_ray(&intr, &pose, x as f64, y as f64));
        poses.push(pose);
    }

    let mut kl_index = Vec::new();
    let mut partners = Vec::new();
    if with_kl {
        let eligible = if cfg.kl_seen_only {
            cfg.n_seen_rays
        } else {
            rays.len()
        };
        let n = cfg.kl_rays.map_or(eligible, |k| k.min(eligible));
        for i in 0..n {
            let pose = perturb_pose(&poses[i], cfg.kl_angle, rng);
            let (px, py) = rays[i].pixel.expect("batch rays come from pixels");
            partners.push(pixel_to_ray(&intr, &pose, px, py));
            kl_index.push(i);
        }
    }
    Ok(Batch {
        n_seen: cfg.n_seen_rays,
        targets: Tensor::new([cfg.n_seen_rays, 3], targets),
        rays,
        sources,
        kl_index,
        partners,
    })
}

/// Loss terms of one batch, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub rgb: Var,
    pub entropy: Var,
    pub kl: Var,
    /// Rays that passed the entropy mask.
    pub active_rays: usize,
    pub kl_pairs: usize,
}

fn select_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Var {
    let shape = g.shape(x).to_vec();
    let width: usize = shape[1..].iter().product();
    let idx = rows
        .iter()
        .flat_map(|&r| r * width..(r + 1) * width)
        .collect();
    let mut out = shape;
    out[0] = rows.len();
    g.gather(x, idx, out)
}

fn tensor_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let n = t.shape()[1];
    Tensor::new(
        [rows.len(), n],
        rows.iter()
            .flat_map(|&r| t.row(r).iter().copied())
            .collect(),
    )
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[1];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new([a.shape()[0] + b.shape()[0], n], data)
}

/// Alphas and depths of one pass over every ray in a batch.
#[derive(Clone, Debug)]
pub struct BatchPass {
    /// `[R, N]`, seen rows first.
    pub alpha: Var,
    pub t: Tensor,
    pub delta: Tensor,
}

/// A batch rendered with colors for seen rays and density alone for
/// unseen rays, which never enter the color loss.
#[derive(Clone, Debug)]
pub struct RenderedBatch {
    pub seen: HierarchicalOutput,
    pub unseen: Option<HierarchicalOutput>,
    pub last: BatchPass,
    pub coarse: BatchPass,
}

impl RenderedBatch {
    pub fn has_fine(&self) -> bool {
        self.seen.fine.is_some()
    }
}

fn join_pass(g: &mut Graph, a: &PassOutput, b: Option<&PassOutput>) -> BatchPass {
    match b {
        None => BatchPass {
            alpha: a.composite.alpha,
            t: a.t.clone(),
            delta: a.delta.clone(),
        },
        Some(b) => BatchPass {
            alpha: g.concat(&[a.composite.alpha, b.composite.alpha], 0),
            t: stack_rows(&a.t, &b.t),
            delta: stack_rows(&a.delta, &b.delta),
        },
    }
}

/// Renders seen rays then unseen rays from the same random stream.
pub fn render_batch(
    g: &mut Graph,
    field: &dyn FieldQuery,
    batch: &Batch,
    sampling: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RenderedBatch> {
    let plan = DepthPlan::default();
    let (seen_rays, unseen_rays) = batch.rays.split_at(batch.n_seen);
    let seen = render_hierarchical(g, field, seen_rays, sampling, &plan, rng)?;
    let unseen = if unseen_rays.is_empty() {
        None
    } else {
        Some(render_hierarchical_density(
            g,
            field,
            unseen_rays,
            sampling,
            &plan,
            rng,
        )?)
    };
    let last = join_pass(g, seen.last(), unseen.as_ref().map(|u| u.last()));
    let coarse = join_pass(g, &seen.coarse, unseen.as_ref().map(|u| &u.coarse));
    Ok(RenderedBatch {
        seen,
        unseen,
        last,
        coarse,
    })
}

/// Builds `rgb + lambda1 * entropy + lambda2 * kl` over a rendered batch.
pub fn objective(
    g: &mut Graph,
    field: &dyn FieldQuery,
    batch: &Batch,
    out: &RenderedBatch,
    losses: &LossWeights,
    lambda2: f64,
    cfg: &TrainConfig,
) -> Result<Objective> {
    let pred = out.seen.last().composite.rgb;
    let mut rgb = rgb_loss_graph(g, pred, &batch.targets)?;
    if cfg.coarse_rgb && out.has_fine() {
        let rgb_c = rgb_loss_graph(g, out.seen.coarse.composite.rgb, &batch.targets)?;
        rgb = g.add(rgb, rgb_c);
    }

    let (mut entropy, active) = entropy_loss_graph(g, out.last.alpha, losses.epsilon)?;
    if cfg.entropy_on_coarse && out.has_fine() {
        let (ec, _) = entropy_loss_graph(g, out.coarse.alpha, losses.epsilon)?;
        let s = g.add(entropy, ec);
        entropy = g.scale(s, 0.5);
    }

    let (kl, kl_pairs) = if batch.kl_index.is_empty() {
        (g.constant(Tensor::scalar(0.0)), 0)
    } else {
        let primary = select_rows(g, out.last.alpha, &batch.kl_index);
        let t = tensor_rows(&out.last.t, &batch.kl_index);
        let delta = tensor_rows(&out.last.delta, &batch.kl_index);
        let partner = alpha_at_depths(g, field, &batch.partners, &t, &delta)?;
        kl_loss_graph(g, primary, partner)?
    };

    let e = g.scale(entropy, losses.lambda1);
    let k = g.scale(kl, lambda2);
    let reg = g.add(e, k);
    let total = g.add(rgb, reg);
    Ok(Objective {
        total,
        rgb,
        entropy,
        kl,
        active_rays: active,
        kl_pairs,
    })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub lambda2: f64,
    pub rgb: f64,
    pub entropy: f64,
    pub kl: f64,
    pub total: f64,
    pub mask_rate: f64,
    pub kl_pairs: usize,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            rgb: self.rgb,
            entropy: self.entropy,
            kl: self.kl,
            total: self.total,
            mask_rate: self.mask_rate,
        }
    }
}

fn check_component(iteration: usize, component: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            component,
            value,
        })
    }
}

/// Renders the batch, backpropagates the objective and applies one Adam
/// update at the scheduled learning rate.
pub fn train_step(
    field: &mut NeuralField,
    adam: &mut AdamState,
    batch: &Batch,
    iter: usize,
    setup: &TrainSetup,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let lr = lr_schedule(iter, &setup.schedule);
    let lambda2 = kl_weight_schedule(iter, setup.losses.lambda2, &setup.schedule);
    let mut g = Graph::new();
    let (obj, grads) = {
        let bound = field.bind(&mut g);
        let out = render_batch(&mut g, &bound, batch, &setup.sampling, rng)?;
        let obj = objective(
            &mut g,
            &bound,
            batch,
            &out,
            &setup.losses,
            lambda2,
            &setup.train,
        )?;
        for (name, v) in [
            ("rgb", obj.rgb),
            ("entropy", obj.entropy),
            ("kl", obj.kl),
            ("total", obj.total),
        ] {
            check_component(iter, name, g.value(v).item())?;
        }
        let grads = g.backward(obj.total)?;
        let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(&g, v)).collect();
        (obj, grads)
    };
    for t in &grads {
        if let Some(bad) = t.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: iter,
                component: "gradient",
                value: *bad,
            });
        }
    }
    adam.update(field.params_mut(), &grads, lr)?;
    let value = |v: Var| g.value(v).item();
    Ok(StepRecord {
        iter,
        lr,
        lambda2,
        rgb: value(obj.rgb),
        entropy: value(obj.entropy),
        kl: value(obj.kl),
        total: value(obj.total),
        mask_rate: obj.active_rays as f64 / batch.rays.len() as f64,
        kl_pairs: obj.kl_pairs,
    })
}

/// Random stream for one iteration.
pub fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

/// Training state over a fixed dataset.
pub struct Trainer<'d> {
    dataset: &'d SceneDataset,
    setup: TrainSetup,
    field: NeuralField,
    adam: AdamState,
    iteration: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d SceneDataset, setup: TrainSetup) -> Result<Self> {
        setup.validate()?;
        if dataset.is_empty() {
            return Err(Error::invalid("training needs at least one view"));
        }
        let field = NeuralField::new(setup.model)?;
        let adam = AdamState::new(field.params());
        Ok(Self {
            dataset,
            setup,
            field,
            adam,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(dataset: &'d SceneDataset, setup: TrainSetup, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(dataset, setup)?;
        let state = TrainingState::from_checkpoint(ckpt)?;
        if state.field.config != setup.model {
            return Err(Error::Config(
                "checkpoint model differs from the configured model".into(),
            ));
        }
        t.field = state.field;
        t.adam = state
            .adam
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        t.iteration = state.iteration;
        Ok(t)
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn field(&self) -> &NeuralField {
        &self.field
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let iter = self.iteration;
        let mut rng = iteration_rng(self.setup.train.seed, iter);
        let sampler = JitterReaim {
            max_angle_deg: self.setup.train.unseen_angle,
        };
        let with_kl = self.setup.losses.lambda2 > 0.0;
        let batch = make_batch(self.dataset, &sampler, &self.setup.train, with_kl, &mut rng)?;
        let rec = train_step(
            &mut self.field,
            &mut self.adam,
            &batch,
            iter,
            &self.setup,
            &mut rng,
        )?;
        self.iteration += 1;
        Ok(rec)
    }

    /// Steps until `until` iterations are done, handing each record to `sink`.
    pub fn run_until(
        &mut self,
        until: usize,
        mut sink: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < until {
            let rec = self.step()?;
            sink(self, &rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        TrainingState::checkpoint(&self.field, Some(&self.adam), self.iteration, &self.setup)
    }
}

/// Field plus optional optimizer state, as stored in a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub field: NeuralField,
    pub adam: Option<AdamState>,
    pub iteration: usize,
    /// The run's setup, when recorded.
    pub setup: Option<TrainSetup>,
}

impl TrainingState {
    pub fn checkpoint(
        field: &NeuralField,
        adam: Option<&AdamState>,
        iteration: usize,
        setup: &TrainSetup,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = field.params().to_vec();
        if let Some(a) = adam {
            for (i, (name, _)) in field.params().iter().enumerate() {
                tensors.push((format!("adam.m.{name}"), a.m[i].clone()));
            }
            for (i, (name, _)) in field.params().iter().enumerate() {
                tensors.push((format!("adam.v.{name}"), a.v[i].clone()));
            }
        }
        let meta = json!({
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "iteration": iteration,
            "model": field.config,
            "adam_step": adam.map(|a| a.step),
            "setup": setup,
        });
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Config(format!("not a field checkpoint: {reason}"));
        if ckpt.meta.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("missing format tag".into()));
        }
        let model: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())
            .map_err(|e| bad(format!("model: {e}")))?;
        let iteration = ckpt.meta["iteration"]
            .as_u64()
            .ok_or_else(|| bad("iteration".into()))? as usize;
        let setup = serde_json::from_value(ckpt.meta["setup"].clone()).ok();
        let template = NeuralField::new(model)?;
        let names: Vec<String> = template.params().iter().map(|(n, _)| n.clone()).collect();
        let take = |name: &str| {
            ckpt.tensor(name)
                .cloned()
                .ok_or_else(|| bad(format!("tensor {name} missing")))
        };
        let params = names
            .iter()
            .map(|n| Ok((n.clone(), take(n)?)))
            .collect::<Result<Vec<_>>>()?;
        let field = NeuralField::from_params(model, params)?;
        let adam = match ckpt.meta["adam_step"].as_u64() {
            Some(step) => Some(AdamState {
                m: names
                    .iter()
                    .map(|n| take(&format!("adam.m.{n}")))
                    .collect::<Result<_>>()?,
                v: names
                    .iter()
                    .map(|n| take(&format!("adam.v.{n}")))
                    .collect::<Result<_>>()?,
                step,
            }),
            None => None,
        };
        Ok(Self {
            field,
            adam,
            iteration,
            setup,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const EVAL_LOG_FILE: &str = "eval.ndjson";

#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<StepRecord>,
}

fn append_line(file: &mut std::fs::File, path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(value).expect("log record serializes");
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Trains to `setup.train.iterations`, writing the metrics log, periodic and
/// final checkpoints, and whatever `snapshot` returns every `eval_every`
/// iterations, under `out_dir`. A resumed trainer appends to existing logs.
pub fn train_to_dir(
    trainer: &mut Trainer,
    out_dir: &Path,
    snapshot: &mut dyn FnMut(&NeuralField, usize) -> Result<serde_json::Value>,
) -> Result<RunOutputs> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let eval_path = out_dir.join(EVAL_LOG_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let fresh = trainer.iteration() == 0;
    let open = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let mut log = open(&metrics)?;
    let cfg = trainer.setup().train;
    let mut eval_log = if cfg.eval_every > 0 {
        Some(open(&eval_path)?)
    } else {
        None
    };
    let mut last = None;
    let result = trainer.run_until(cfg.iterations, |t, rec| {
        append_line(&mut log, &metrics, rec)?;
        let done = t.iteration();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        if let Some(f) = eval_log.as_mut() {
            if done % cfg.eval_every == 0 {
                let mut v = snapshot(t.field(), done)?;
                if let Some(obj) = v.as_object_mut() {
                    obj.insert("iter".into(), json!(done));
                }
                append_line(f, &eval_path, &v)?;
            }
        }
        last = Some(*rec);
        Ok(())
    });
    // Keep the last good state on disk even when a step diverges.
    trainer.checkpoint().save(&ckpt_path)?;
    result?;
    Ok(RunOutputs {
        checkpoint: ckpt_path,
        metrics,
        last,
    })
}

/// Trains in memory and returns the field with its loss trace.
pub fn train(dataset: &SceneDataset, setup: TrainSetup) -> Result<(NeuralField, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(dataset, setup)?;
    let mut records = Vec::with_capacity(setup.train.iterations);
    trainer.run_until(setup.train.iterations, |_, r| {
        records.push(*r);
        Ok(())
    })?;
    Ok((trainer.field, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_procedural_scene, OrbitLayout, SceneSpec};
    use crate::field::AnalyticField;
    use crate::geometry::{CameraIntrinsics, Vec3};

    fn scene(n: usize) -> SceneDataset {
        let spec = SceneSpec {
            field: AnalyticField::sphere(Vec3::ZERO, 1.0, 30.0, [0.8, 0.3, 0.2]),
            intrinsics: CameraIntrinsics::new(12, 12, 14.0).unwrap(),
            radius: 4.0,
            near: 2.0,
            far: 6.0,
            layout: OrbitLayout::Fibonacci,
            white_background: true,
        };
        generate_procedural_scene(&spec, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            model: ModelConfig {
                depth: 2,
                width: 16,
                color_width: 8,
                ..ModelConfig::default()
            },
            sampling: SamplingConfig {
                n_coarse: 8,
                n_fine: 8,
                ..SamplingConfig::default()
            },
            train: TrainConfig {
                iterations: 10,
                n_seen_rays: 16,
                n_unseen_rays: 16,
                ..TrainConfig::default()
            },
            ..TrainSetup::default()
        }
    }

    #[test]
    fn schedules() {
        let s = ScheduleConfig::default();
        assert_eq!(lr_schedule(0, &s), 5e-4);
        assert!((lr_schedule(250_000, &s) - 5e-5).abs() < 1e-15);
        assert!((lr_schedule(125_000, &s) - 1.5811e-4).abs() < 1e-8);
        assert_eq!(kl_weight_schedule(0, 0.1, &s), 0.1);
        assert_eq!(kl_weight_schedule(4999, 0.1, &s), 0.1);
        assert_eq!(kl_weight_schedule(5000, 0.1, &s), 0.05);
        assert_eq!(kl_weight_schedule(12_000, 0.1, &s), 0.025);
        let mut prev = f64::INFINITY;
        for i in (0..1_000_000).step_by(997) {
            let lr = lr_schedule(i, &s);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![("w".to_string(), Tensor::from_vec(vec![1.0, -2.0, 0.0]))];
        let mut adam = AdamState::new(&params);
        adam.update(&mut params, &[Tensor::from_vec(vec![0.5, -3.0, 0.0])], 0.1)
            .unwrap();
        let p = params[0].1.data();
        // Bias-corrected first step is lr * sign(g).
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6 && p[2] == 0.0);
        assert_eq!(adam.step, 1);
        assert!(adam
            .update(&mut params, &[Tensor::from_vec(vec![0.0; 2])], 0.1)
            .is_err());
    }

    #[test]
    fn batch_targets_match_source_pixels() {
        let ds = scene(3);
        let cfg = TrainConfig {
            n_seen_rays: 50,
            n_unseen_rays: 20,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make_batch(&ds, &JitterReaim::default(), &cfg, true, &mut rng).unwrap();
        assert_eq!((b.rays.len(), b.n_seen, b.n_unseen()), (70, 50, 20));
        assert_eq!(b.kl_index.len(), 70);
        for (i, &(f, x, y)) in b.sources.iter().enumerate() {
            let px = ds.frames[f].image.pixel(x, y);
            assert_eq!(b.targets.row(i), &px);
            let ray = pixel_to_ray(&ds.intrinsics, &ds.frames[f].pose, x as f64, y as f64);
            assert_eq!(b.rays[i].direction, ray.direction);
        }
        let seen_only = TrainConfig {
            kl_seen_only: true,
            kl_rays: Some(10),
            ..cfg
        };
        let b = make_batch(&ds, &JitterReaim::default(), &seen_only, true, &mut rng).unwrap();
        assert_eq!(b.kl_index, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_partner_angle_gives_zero_kl() {
        let ds = scene(2);
        let mut setup = tiny_setup();
        setup.train.kl_angle = 0.0;
        setup.sampling.jitter = false;
        let mut trainer = Trainer::new(&ds, setup).unwrap();
        for _ in 0..3 {
            let r = trainer.step().unwrap();
            assert!(r.kl_pairs > 0);
            assert!(r.kl.abs() <= 1e-15, "kl {}", r.kl);
        }
    }

    #[test]
    fn entropy_alone_trains_density() {
        let ds = scene(2);
        let mut setup = tiny_setup();
        setup.train.n_seen_rays = 1;
        setup.losses = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            epsilon: 0.0,
        };
        let field = NeuralField::new(setup.model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch =
            make_batch(&ds, &JitterReaim::default(), &setup.train, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = field.bind(&mut g);
        let out = render_batch(&mut g, &bound, &batch, &setup.sampling, &mut rng).unwrap();
        let obj = objective(
            &mut g,
            &bound,
            &batch,
            &out,
            &setup.losses,
            0.0,
            &setup.train,
        )
        .unwrap();
        let grads = g.backward(obj.entropy).unwrap();
        let trunk = grads.wrt(&g, bound.vars()[0]);
        assert!(trunk.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn entropy_denominator_counts_every_ray() {
        let ds = scene(2);
        let setup = tiny_setup();
        let field = NeuralField::new(setup.model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch =
            make_batch(&ds, &JitterReaim::default(), &setup.train, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = field.bind_frozen(&mut g);
        let out = render_batch(&mut g, &bound, &batch, &setup.sampling, &mut rng).unwrap();
        let alpha = g.value(out.last.alpha).clone();
        let rows: Vec<Vec<f64>> = (0..alpha.shape()[0])
            .map(|i| alpha.row(i).to_vec())
            .collect();
        for eps in [0.0, 0.05, 0.5, 10.0] {
            let losses = LossWeights {
                epsilon: eps,
                ..LossWeights::default()
            };
            let obj = objective(&mut g, &bound, &batch, &out, &losses, 0.0, &setup.train).unwrap();
            let (seen, unseen) = rows.split_at(batch.n_seen);
            let reference = crate::infoloss::entropy_loss(seen, unseen, eps).unwrap();
            assert!((g.value(obj.entropy).item() - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let ds = scene(2);
        let (_, a) = train(&ds, tiny_setup()).unwrap();
        let (_, b) = train(&ds, tiny_setup()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let ds = scene(1);
        let setup = TrainSetup {
            train: TrainConfig {
                iterations: 0,
                ..tiny_setup().train
            },
            ..tiny_setup()
        };
        let (field, recs) = train(&ds, setup).unwrap();
        assert!(recs.is_empty());
        assert_eq!(field, NeuralField::new(setup.model).unwrap());
    }

    #[test]
    fn resume_matches_straight_run() {
        let ds = scene(2);
        let setup = tiny_setup();
        let mut straight = Trainer::new(&ds, setup).unwrap();
        let mut trace = Vec::new();
        straight.run_until(10, |_, r| Ok(trace.push(*r))).unwrap();

        let mut first = Trainer::new(&ds, setup).unwrap();
        first.run_until(4, |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::resume(&ds, setup, &ckpt).unwrap();
        assert_eq!(resumed.iteration(), 4);
        let mut tail = Vec::new();
        resumed.run_until(10, |_, r| Ok(tail.push(*r))).unwrap();
        for (a, b) in trace[4..].iter().zip(&tail) {
            assert!((a.total - b.total).abs() <= 1e-9);
        }
        assert_eq!(resumed.field(), straight.field());
    }

    #[test]
    fn baseline_objective_is_rgb_only() {
        let ds = scene(2);
        let setup = tiny_setup().baseline();
        let mut trainer = Trainer::new(&ds, setup).unwrap();
        let r = trainer.step().unwrap();
        assert_eq!(r.total, r.rgb);
        assert_eq!(r.kl_pairs, 0);
    }

    #[test]
    fn checkpoint_round_trip_without_optimizer() {
        let field = NeuralField::new(tiny_setup().model).unwrap();
        let ck = TrainingState::checkpoint(&field, None, 7, &tiny_setup());
        let st = TrainingState::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap())
            .unwrap();
        assert_eq!(st.field, field);
        assert!(st.adam.is_none());
        assert_eq!(st.iteration, 7);
        assert_eq!(st.setup, Some(tiny_setup()));
    }
}
