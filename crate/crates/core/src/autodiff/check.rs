//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Absolute error below which a component counts as matching regardless of
/// its relative error.
pub const ABS_FALLBACK: f64 = 1e-8;

/// One-sided slopes disagreeing by more than this (relative to their scale)
/// mark a component as sitting on a kink.
const KINK_TOL: f64 = 1e-2;

/// A mismatching component also counts as a kink when the analytic slope
/// sits this much closer to one one-sided slope than the sides are apart.
/// On smooth functions both sides are equally far from the derivative.
const ONE_SIDED_RATIO: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Largest relative error among components not covered by the absolute
    /// fallback. Zero when every component matched absolutely.
    pub max_rel_err: f64,
    /// Flat index (across all inputs, in order) of the worst component.
    pub worst_index: Option<usize>,
    /// Components skipped because the function is not differentiable there.
    pub excluded: Vec<usize>,
    /// First component whose perturbed evaluation was NaN or infinite.
    pub non_finite: Option<usize>,
    pub pass: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64, rtol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    check_gradients(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        step,
        rtol,
    )
}

/// Checks the gradient of a scalar function of several tensors against
/// central differences `(f(x+h) - f(x-h)) / 2h`, componentwise.
pub fn check_gradients<F>(f: F, points: &[Tensor], step: f64, rtol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let (f0, analytic) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out)?;
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|&v| grads.wrt(&g, v).into_data())
            .collect();
        (g.value(out).item(), analytic)
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut excluded = Vec::new();
    let mut non_finite = None;
    let mut max_rel_err = 0.0f64;
    let mut worst_index = None;

    let mut flat = 0;
    for t in 0..work.len() {
        for i in 0..work[t].numel() {
            let x0 = work[t].data()[i];
            work[t].data_mut()[i] = x0 + step;
            let fp = eval(&work)?;
            work[t].data_mut()[i] = x0 - step;
            let fm = eval(&work)?;
            work[t].data_mut()[i] = x0;

            let central = (fp - fm) / (2.0 * step);
            numeric.push(central);
            if !fp.is_finite() || !fm.is_finite() {
                non_finite.get_or_insert(flat);
                flat += 1;
                continue;
            }
            let forward = (fp - f0) / step;
            let backward = (f0 - fm) / step;
            let scale = forward.abs().max(backward.abs()).max(1.0);
            if (forward - backward).abs() > KINK_TOL * scale {
                excluded.push(flat);
                flat += 1;
                continue;
            }

            let a = analytic[flat];
            let abs_err = (a - central).abs();
            if abs_err > ABS_FALLBACK {
                let rel = abs_err / a.abs().max(central.abs());
                let gap = (forward - backward).abs();
                let nearest = (a - forward).abs().min((a - backward).abs());
                if rel > rtol && gap > ABS_FALLBACK && nearest <= ONE_SIDED_RATIO * gap {
                    excluded.push(flat);
                    flat += 1;
                    continue;
                }
                if rel > max_rel_err {
                    max_rel_err = rel;
                    worst_index = Some(flat);
                }
            }
            flat += 1;
        }
    }

    let pass = non_finite.is_none() && max_rel_err <= rtol;
    Ok(FiniteDiffReport {
        max_rel_err,
        worst_index,
        excluded,
        non_finite,
        pass,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        )
    }

    #[test]
    fn exp_at_zero() {
        let report = finite_diff_check(
            |g, x| {
                let e = g.exp(x);
                g.sum(e)
            },
            &Tensor::from_vec(vec![0.0]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.analytic, vec![1.0]);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let report = finite_diff_check(
            |g, x| {
                let r = g.relu(x);
                g.sum(r)
            },
            &Tensor::from_vec(vec![0.0]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.excluded, vec![0]);
        assert!(report.pass);
    }

    #[test]
    fn kink_inside_the_step_with_small_slope_is_excluded() {
        // 1e-3 x + 1e-2 relu(x - 3e-6): the kink lies between x and x + step
        // and its jump is small in absolute terms.
        let report = finite_diff_check(
            |g, x| {
                let lin = g.scale(x, 1e-3);
                let shifted = g.add_scalar(x, -3e-6);
                let r = g.relu(shifted);
                let r = g.scale(r, 1e-2);
                let s = g.add(lin, r);
                g.sum(s)
            },
            &Tensor::from_vec(vec![0.0, 1.0]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.excluded, vec![0]);
        assert!(report.pass);
    }

    #[test]
    fn log_of_negative_reports_non_finite() {
        let report = finite_diff_check(
            |g, x| {
                let l = g.log(x);
                g.sum(l)
            },
            &Tensor::from_vec(vec![1.0, 1e-6]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.non_finite, Some(1));
    }

    #[test]
    fn detects_wrong_gradient() {
        // Value is x^2 but the graph treats one factor as a constant, so the
        // analytic gradient is half the true one.
        let report = finite_diff_check(
            |g, x| {
                let v = g.value(x).clone();
                let c = g.constant(v);
                let p = g.mul(x, c);
                g.sum(p)
            },
            &Tensor::from_vec(vec![1.5]),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert!((report.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let r = finite_diff_check(|g, x| g.sum(x), &Tensor::scalar(1.0), 0.0, 1e-4);
        assert!(r.is_err());
    }

    type UnaryBuilder = fn(&mut Graph, Var) -> Var;

    /// Every primitive against central differences on random inputs away from
    /// kinks and singularities.
    #[test]
    fn primitives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let unary: Vec<(&str, UnaryBuilder, f64, f64)> = vec![
            ("exp", |g, x| g.exp(x), -2.0, 2.0),
            ("log", |g, x| g.log(x), 0.5, 3.0),
            ("sin", |g, x| g.sin(x), -3.0, 3.0),
            ("cos", |g, x| g.cos(x), -3.0, 3.0),
            ("relu", |g, x| g.relu(x), 0.1, 2.0),
            ("sigmoid", |g, x| g.sigmoid(x), -4.0, 4.0),
            ("softplus", |g, x| g.softplus(x), -4.0, 4.0),
            ("neg", |g, x| g.neg(x), -1.0, 1.0),
            ("scale", |g, x| g.scale(x, 2.5), -1.0, 1.0),
            ("add_scalar", |g, x| g.add_scalar(x, 0.3), -1.0, 1.0),
            ("clamp_min", |g, x| g.clamp_min(x, 0.0), 0.2, 1.0),
            ("cumsum", |g, x| g.cumsum_exclusive(x), -1.0, 1.0),
        ];
        for (name, op, lo, hi) in unary {
            let x = random_tensor(&mut rng, &[3, 4], lo, hi);
            let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
            let report = finite_diff_check(
                |g, v| {
                    let y = op(g, v);
                    // Weighted sum so each output element gets a distinct cotangent.
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv);
                    g.sum(p)
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        type BinaryBuilder = fn(&mut Graph, Var, Var) -> Var;
        let binary: Vec<(&str, BinaryBuilder, [usize; 2], [usize; 2])> = vec![
            ("add", |g, a, b| g.add(a, b), [3, 4], [3, 4]),
            ("sub", |g, a, b| g.sub(a, b), [3, 4], [3, 4]),
            ("mul", |g, a, b| g.mul(a, b), [3, 4], [3, 4]),
            ("div", |g, a, b| g.div(a, b), [3, 4], [3, 4]),
            ("matmul", |g, a, b| g.matmul(a, b), [3, 4], [4, 2]),
            ("concat", |g, a, b| g.concat(&[a, b], 1), [3, 4], [3, 2]),
        ];
        for (name, op, sa, sb) in binary {
            let a = random_tensor(&mut rng, &sa, 0.5, 1.5);
            let b = random_tensor(&mut rng, &sb, 0.5, 1.5);
            let report = check_gradients(
                |g, v| {
                    let y = op(g, v[0], v[1]);
                    let shape = g.shape(y).to_vec();
                    let n: usize = shape.iter().product();
                    let w = Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect());
                    let wv = g.constant(w);
                    let p = g.mul(y, wv);
                    g.sum(p)
                },
                &[a, b],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        let x = random_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        for axis in 0..3 {
            let report = finite_diff_check(
                |g, v| {
                    let s = g.sum_axis(v, axis);
                    let sq = g.mul(s, s);
                    g.sum(sq)
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "sum_axis({axis})");
        }

        let inputs = [
            random_tensor(&mut rng, &[5, 3], -1.0, 1.0),
            random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
            random_tensor(&mut rng, &[4], -1.0, 1.0),
        ];
        let report = check_gradients(
            |g, v| {
                let y = g.affine(v[0], v[1], v[2]);
                let t = g.sin(y);
                g.sum(t)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "affine: max rel err {}", report.max_rel_err);

        let b = random_tensor(&mut rng, &[3, 1], -1.0, 1.0);
        let report = finite_diff_check(
            |g, v| {
                let e = g.broadcast_to(v, [2, 3, 4]);
                let r = g.reshape(e, [6, 4]);
                let picked = g.gather(r, vec![0, 5, 5, 23, 11], [5]);
                let sq = g.mul(picked, picked);
                g.sum(sq)
            },
            &b,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "broadcast/reshape/gather");
    }

    /// Chain rule on a 2x2 instance: grad of sum(exp(A.x)) equals the product
    /// of the hand-written Jacobians.
    #[test]
    fn chain_rule_matches_jacobian_product() {
        let a: [[f64; 2]; 2] = [[0.3, -0.7], [1.1, 0.4]];
        let x: [f64; 2] = [0.5, -0.2];
        let z = [
            a[0][0] * x[0] + a[0][1] * x[1],
            a[1][0] * x[0] + a[1][1] * x[1],
        ];
        // d/dx sum(exp(z)) = A^T exp(z)
        let expected = [
            a[0][0] * z[0].exp() + a[1][0] * z[1].exp(),
            a[0][1] * z[0].exp() + a[1][1] * z[1].exp(),
        ];
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(
            [2, 2],
            vec![a[0][0], a[0][1], a[1][0], a[1][1]],
        ));
        let xv = g.param(Tensor::new([2, 1], x.to_vec()));
        let zv = g.matmul(av, xv);
        let e = g.exp(zv);
        let s = g.sum(e);
        let grads = g.backward(s).unwrap();
        let got = grads.get(xv).unwrap().data();
        for k in 0..2 {
            assert!((got[k] - expected[k]).abs() < 1e-14);
        }
    }
}
