//! Ray-density regularizers: masked ray entropy, KL between neighbouring
//! rays, the photometric loss, and their weighted sum.
//!
//! Each loss exists twice: on plain slices (reference semantics, used for
//! reporting) and on graph variables for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Rays whose total opacity is at or below this have no density.
pub const DENSITY_FLOOR: f64 = 1e-10;
/// Lower clamp inside logarithms.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Entropy weight.
    pub lambda1: f64,
    /// Initial KL weight (halved on the training schedule).
    pub lambda2: f64,
    /// Rays with total opacity at or below this are left out of the entropy.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e-3,
            lambda2: 1e-1,
            epsilon: 0.1,
        }
    }
}

impl LossWeights {
    /// Plain photometric objective.
    pub fn rgb_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "losses.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub entropy: f64,
    pub kl: f64,
    pub total: f64,
    /// Fraction of rays that entered the entropy term.
    pub mask_rate: f64,
}

/// Normalized opacities along one ray. `p` is empty when undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct RayDensity {
    pub p: Vec<f64>,
    pub defined: bool,
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    match alpha.iter().position(|a| !(*a >= 0.0 && *a < 1.0)) {
        Some(i) => Err(Error::invalid(format!(
            "opacity {} at sample {i} is outside [0, 1)",
            alpha[i]
        ))),
        None => Ok(()),
    }
}

pub fn ray_density(alpha: &[f64]) -> Result<RayDensity> {
    check_alpha(alpha)?;
    let q: f64 = alpha.iter().sum();
    if q > DENSITY_FLOOR {
        Ok(RayDensity {
            p: alpha.iter().map(|a| a / q).collect(),
            defined: true,
        })
    } else {
        Ok(RayDensity {
            p: Vec::new(),
            defined: false,
        })
    }
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn ray_entropy(density: &RayDensity) -> Result<f64> {
    if !density.defined {
        return Err(Error::invalid("entropy of an empty ray; mask it first"));
    }
    Ok(-density
        .p
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// 1 when the ray's total opacity exceeds `epsilon`.
pub fn ray_mask(alpha: &[f64], epsilon: f64) -> bool {
    alpha.iter().sum::<f64>() > epsilon
}

/// Mean of masked entropies over all rays, masked ones included in the
/// count. Each ray is its opacity vector.
pub fn entropy_loss(seen: &[Vec<f64>], unseen: &[Vec<f64>], epsilon: f64) -> Result<f64> {
    let n = seen.len() + unseen.len();
    if n == 0 {
        return Err(Error::invalid("entropy loss over an empty batch"));
    }
    let mut total = 0.0;
    for alpha in seen.iter().chain(unseen) {
        check_alpha(alpha)?;
        if ray_mask(alpha, epsilon) {
            total += ray_entropy(&ray_density(alpha)?)?;
        }
    }
    Ok(total / n as f64)
}

/// `sum p ln(p / max(q, 1e-10))`.
pub fn kl_loss(p: &RayDensity, q: &RayDensity) -> Result<f64> {
    if !p.defined || !q.defined {
        return Err(Error::invalid("KL divergence with an empty ray"));
    }
    if p.p.len() != q.p.len() {
        return Err(Error::invalid(format!(
            "KL between densities of length {} and {}",
            p.p.len(),
            q.p.len()
        )));
    }
    Ok(p.p
        .iter()
        .zip(&q.p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b.max(LOG_FLOOR)).ln())
        .sum())
}

/// Mean squared color distance; colors are flat `[R * 3]`.
pub fn rgb_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.len() % 3 != 0 {
        return Err(Error::invalid(format!(
            "color batches of length {} and {} do not match",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("color loss over an empty batch"));
    }
    let sq: f64 = predicted
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (predicted.len() / 3) as f64)
}

/// `rgb + lambda1 * entropy + lambda2 * kl` with `lambda2` as given (the
/// caller applies any schedule).
pub fn total_loss(
    rgb: f64,
    entropy: f64,
    kl: f64,
    lambda1: f64,
    lambda2: f64,
    mask_rate: f64,
) -> LossBreakdown {
    LossBreakdown {
        rgb,
        entropy,
        kl,
        total: rgb + lambda1 * entropy + lambda2 * kl,
        mask_rate,
    }
}

/// Normalized densities `[R, N]` from opacities `[R, N]`, and per-ray total
/// opacity values.
pub fn density_graph(g: &mut Graph, alpha: Var) -> (Var, Vec<f64>) {
    let shape = g.shape(alpha).to_vec();
    let (r, n) = (shape[0], shape[1]);
    let q = g.sum_axis(alpha, 1);
    let totals = g.value(q).data().to_vec();
    let qc = g.clamp_min(q, DENSITY_FLOOR);
    let qc = g.reshape(qc, [r, 1]);
    let qb = g.broadcast_to(qc, [r, n]);
    (g.div(alpha, qb), totals)
}

fn plogp_rows(g: &mut Graph, p: Var) -> Var {
    let pc = g.clamp_min(p, LOG_FLOOR);
    let lp = g.log(pc);
    let t = g.mul(p, lp);
    g.sum_axis(t, 1)
}

/// Per-ray entropy `[R]` of opacities `[R, N]` (garbage for empty rays,
/// which the mask removes).
pub fn entropy_graph(g: &mut Graph, alpha: Var) -> (Var, Vec<f64>) {
    let (p, totals) = density_graph(g, alpha);
    let s = plogp_rows(g, p);
    (g.neg(s), totals)
}

/// Masked entropy loss over the rows of `alpha`, which stacks seen and
/// unseen rays. Returns the loss and the number of unmasked rays.
pub fn entropy_loss_graph(g: &mut Graph, alpha: Var, epsilon: f64) -> Result<(Var, usize)> {
    let r = g.shape(alpha)[0];
    if r == 0 {
        return Err(Error::invalid("entropy loss over an empty batch"));
    }
    let (h, totals) = entropy_graph(g, alpha);
    let mask: Vec<f64> = totals
        .iter()
        .map(|&q| if q > epsilon { 1.0 } else { 0.0 })
        .collect();
    let active = mask.iter().filter(|&&m| m > 0.0).count();
    let m = g.constant(Tensor::new([r], mask));
    let mh = g.mul(m, h);
    let s = g.sum(mh);
    Ok((g.scale(s, 1.0 / r as f64), active))
}

/// Mean KL over row pairs of `alpha_p` / `alpha_q` (both `[K, N]`) where
/// both rays have a density. Returns the loss and the number of valid pairs;
/// the loss is a zero constant when none are valid.
pub fn kl_loss_graph(g: &mut Graph, alpha_p: Var, alpha_q: Var) -> Result<(Var, usize)> {
    if g.shape(alpha_p) != g.shape(alpha_q) {
        return Err(Error::invalid(format!(
            "KL between opacity batches of shape {:?} and {:?}",
            g.shape(alpha_p),
            g.shape(alpha_q)
        )));
    }
    let k = g.shape(alpha_p)[0];
    let (p, tp) = density_graph(g, alpha_p);
    let (q, tq) = density_graph(g, alpha_q);
    let valid: Vec<f64> = tp
        .iter()
        .zip(&tq)
        .map(|(&a, &b)| {
            if a > DENSITY_FLOOR && b > DENSITY_FLOOR {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let n_valid = valid.iter().filter(|&&v| v > 0.0).count();
    if n_valid == 0 {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let pc = g.clamp_min(p, LOG_FLOOR);
    let qc = g.clamp_min(q, LOG_FLOOR);
    let lp = g.log(pc);
    let lq = g.log(qc);
    let diff = g.sub(lp, lq);
    let terms = g.mul(p, diff);
    let rows = g.sum_axis(terms, 1);
    let m = g.constant(Tensor::new([k], valid));
    let masked = g.mul(m, rows);
    let s = g.sum(masked);
    Ok((g.scale(s, 1.0 / n_valid as f64), n_valid))
}

/// Mean squared color distance between `[R, 3]` predictions and targets.
pub fn rgb_loss_graph(g: &mut Graph, predicted: Var, target: &Tensor) -> Result<Var> {
    if g.shape(predicted) != target.shape() {
        return Err(Error::invalid(format!(
            "color batches of shape {:?} and {:?} do not match",
            g.shape(predicted),
            target.shape()
        )));
    }
    let r = target.shape()[0];
    if r == 0 {
        return Err(Error::invalid("color loss over an empty batch"));
    }
    let t = g.constant(target.clone());
    let d = g.sub(predicted, t);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / r as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::render::opacity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn alpha_of(sd: f64) -> f64 {
        1.0 - (-sd).exp()
    }

    #[test]
    fn density_examples() {
        assert_eq!(ray_density(&[0.5, 0.5]).unwrap().p, vec![0.5, 0.5]);
        let a = [alpha_of(2f64.ln()), alpha_of(4f64.ln())];
        let d = ray_density(&a).unwrap();
        assert!(close(d.p[0], 0.4, 1e-12) && close(d.p[1], 0.6, 1e-12));
        assert!(!ray_density(&[0.0, 0.0, 0.0]).unwrap().defined);
        assert!(ray_density(&[0.5, 1.0]).is_err());
        assert!(ray_density(&[-0.1]).is_err());
        assert!(ray_density(&[f64::NAN]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let one_hot = RayDensity {
            p: vec![0.0, 1.0, 0.0],
            defined: true,
        };
        assert_eq!(ray_entropy(&one_hot).unwrap(), 0.0);
        let uniform = RayDensity {
            p: vec![0.25; 4],
            defined: true,
        };
        assert!(close(ray_entropy(&uniform).unwrap(), 1.386294, 1e-6));
        let mixed = RayDensity {
            p: vec![0.5, 0.25, 0.25],
            defined: true,
        };
        assert!(close(ray_entropy(&mixed).unwrap(), 1.039721, 1e-6));
        assert!(ray_entropy(&RayDensity {
            p: vec![],
            defined: false
        })
        .is_err());
    }

    #[test]
    fn mask_examples() {
        assert!(!ray_mask(&[0.05, 0.04], 0.1));
        assert!(ray_mask(&[0.9], 0.1));
        assert!(!ray_mask(&[0.0, 0.0], 0.0));
    }

    #[test]
    fn entropy_loss_examples() {
        let empty = vec![vec![0.0; 4]; 3];
        assert_eq!(entropy_loss(&empty, &[], 0.1).unwrap(), 0.0);
        let seen = vec![vec![0.5; 4]];
        let unseen = vec![vec![0.01, 0.0, 0.0, 0.0]];
        let l = entropy_loss(&seen, &unseen, 0.1).unwrap();
        assert!(close(l, 0.693147, 1e-6));
        let doubled: Vec<Vec<f64>> = seen
            .iter()
            .chain(&unseen)
            .flat_map(|r| [r.clone(), r.clone()])
            .collect();
        assert!(close(entropy_loss(&doubled, &[], 0.1).unwrap(), l, 1e-15));
        assert!(entropy_loss(&[], &[], 0.1).is_err());
    }

    #[test]
    fn kl_examples() {
        let d = |p: &[f64]| RayDensity {
            p: p.to_vec(),
            defined: true,
        };
        assert_eq!(kl_loss(&d(&[0.3, 0.7]), &d(&[0.3, 0.7])).unwrap(), 0.0);
        assert!(close(
            kl_loss(&d(&[1.0, 0.0]), &d(&[0.5, 0.5])).unwrap(),
            0.693147,
            1e-6
        ));
        assert!(close(
            kl_loss(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap(),
            0.143841,
            1e-6
        ));
        assert!(kl_loss(&d(&[1.0]), &d(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn rgb_and_total_examples() {
        assert_eq!(rgb_loss(&[0.2, 0.3, 0.4], &[0.2, 0.3, 0.4]).unwrap(), 0.0);
        assert!(close(
            rgb_loss(&[0.1, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap(),
            0.01,
            1e-15
        ));
        let p = [0.1, 0.0, 0.0, 0.1, 0.1, 0.1];
        assert!(close(rgb_loss(&p, &[0.0; 6]).unwrap(), 0.02, 1e-15));
        assert!(rgb_loss(&[0.0; 3], &[0.0; 6]).is_err());

        let b = total_loss(0.5, 1.0, 2.0, 0.1, 0.01, 1.0);
        assert!(close(b.total, 0.62, 1e-12));
        assert_eq!(total_loss(0.5, 1.0, 2.0, 0.0, 0.0, 1.0).total, 0.5);
        let b2 = total_loss(0.5, 1.0, 2.0, 0.2, 0.01, 1.0);
        assert!(close(b2.total - b.total, 0.1 * 1.0, 1e-12));
    }

    #[test]
    fn density_sums_to_one_on_random_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let n = rng.random_range(1..16);
            let alpha: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random_range(0.0..0.999)
                    }
                })
                .collect();
            let d = ray_density(&alpha).unwrap();
            if d.defined {
                let s: f64 = d.p.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
                assert!(d.p.iter().all(|&p| p >= 0.0));
            } else {
                assert!(alpha.iter().sum::<f64>() <= DENSITY_FLOOR);
            }
        }
    }

    fn density_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("empty", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    fn normalized(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn entropy_within_bounds(p in density_strategy()) {
            let n = p.len();
            let h = ray_entropy(&RayDensity { p, defined: true }).unwrap();
            prop_assert!(h >= -1e-12 && h <= (n as f64).ln() + 1e-12);
        }

        #[test]
        fn kl_nonnegative((p, q) in (1usize..12).prop_flat_map(|n| (normalized(n), normalized(n)))) {
            let k = kl_loss(&RayDensity { p: p.clone(), defined: true }, &RayDensity { p: q.clone(), defined: true }).unwrap();
            prop_assert!(k >= -1e-12);
            let same = kl_loss(&RayDensity { p: p.clone(), defined: true }, &RayDensity { p, defined: true }).unwrap();
            prop_assert!(same.abs() <= 1e-9);
        }

        #[test]
        fn graph_losses_match_reference(rows in prop::collection::vec(prop::collection::vec(0.0f64..0.95, 5), 1..6)) {
            let r = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let mut g = Graph::new();
            let a = g.constant(Tensor::new([r, 5], flat));
            let (l, _) = entropy_loss_graph(&mut g, a, 0.1).unwrap();
            let reference = entropy_loss(&rows, &[], 0.1).unwrap();
            prop_assert!((g.value(l).item() - reference).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_graph_skips_empty_pairs() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new([2, 2], vec![0.5, 0.0, 0.0, 0.0]));
        let q = g.constant(Tensor::new([2, 2], vec![0.3, 0.3, 0.2, 0.2]));
        let (l, n) = kl_loss_graph(&mut g, p, q).unwrap();
        assert_eq!(n, 1);
        assert!(close(g.value(l).item(), 0.693147, 1e-6));

        let z = g.constant(Tensor::zeros([2, 2]));
        let (l, n) = kl_loss_graph(&mut g, z, q).unwrap();
        assert_eq!((n, g.value(l).item()), (0, 0.0));
    }

    #[test]
    fn entropy_step_sharpens_two_sample_ray() {
        let sd = Tensor::from_vec(vec![0.4, 0.6]);
        let eval = |sd: &Tensor| {
            let mut g = Graph::new();
            let s = g.param(sd.clone());
            let s2 = g.reshape(s, [1, 2]);
            let a = {
                let n = g.neg(s2);
                let e = g.exp(n);
                let ne = g.neg(e);
                g.add_scalar(ne, 1.0)
            };
            let (h, _) = entropy_loss_graph(&mut g, a, 0.0).unwrap();
            let grads = g.backward(h).unwrap();
            (g.value(h).item(), grads.wrt(&g, s))
        };
        let (h0, grad) = eval(&sd);
        let stepped = sd.zip_map(&grad, |x, d| x - 0.1 * d);
        let (h1, _) = eval(&stepped);
        assert!(h1 < h0, "{h1} !< {h0}");
    }

    #[test]
    fn loss_gradients_wrt_density_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = Tensor::new(
            [3, 6],
            (0..18).map(|_| rng.random_range(0.05..2.0)).collect(),
        );
        let sigma2 = Tensor::new(
            [3, 6],
            (0..18).map(|_| rng.random_range(0.05..2.0)).collect(),
        );
        let delta = Tensor::full([3, 6], 0.3);
        let d1 = delta.clone();
        let ent = check_gradients(
            |g, v| {
                let a = opacity(g, v[0], &d1);
                entropy_loss_graph(g, a, 0.1).unwrap().0
            },
            std::slice::from_ref(&sigma),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(ent.pass, "entropy rel err {}", ent.max_rel_err);
        let kl = check_gradients(
            |g, v| {
                let a = opacity(g, v[0], &delta);
                let b = opacity(g, v[1], &delta);
                kl_loss_graph(g, a, b).unwrap().0
            },
            &[sigma, sigma2],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(kl.pass, "kl rel err {}", kl.max_rel_err);
    }

    #[test]
    fn masked_rays_get_no_entropy_gradient() {
        let mut g = Graph::new();
        // Row 0 hits, row 1 stays below the threshold.
        let a = g.param(Tensor::new([2, 3], vec![0.3, 0.5, 0.1, 0.01, 0.02, 0.03]));
        let (l, active) = entropy_loss_graph(&mut g, a, 0.1).unwrap();
        assert_eq!(active, 1);
        let grad = g.backward(l).unwrap().wrt(&g, a);
        assert!(grad.data()[3..].iter().all(|&v| v == 0.0));
        assert!(grad.data()[..3].iter().any(|&v| v != 0.0));
    }
}
