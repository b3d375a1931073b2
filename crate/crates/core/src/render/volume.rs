//! Quadrature volume rendering.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::FieldQuery;
use crate::geometry::Ray;

use super::sampling::RaySamples;

/// Floor on the accumulated weight when normalizing expected depth.
pub const DEPTH_WEIGHT_FLOOR: f64 = 1e-10;

/// Graph nodes of one compositing pass over `R` rays with `N` samples each.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[R, 3]`, including the background when requested.
    pub rgb: Var,
    /// `[R, N]`: `1 - exp(-sigma * delta)`.
    pub alpha: Var,
    /// `[R, N]`: `exp(-sum_{j<i} sigma_j delta_j)`.
    pub transmittance: Var,
    /// `[R, N]`: transmittance times alpha.
    pub weights: Var,
    /// `[R]`: sum of weights.
    pub acc: Var,
    /// `[R]`: cumulative ray density, the sum of alphas.
    pub q: Var,
    /// `[R]`: weight-normalized expected depth.
    pub depth: Var,
}

pub fn opacity(g: &mut Graph, sigma: Var, delta: &Tensor) -> Var {
    let d = g.constant(delta.clone());
    let sd = g.mul(sigma, d);
    alpha_from_optical_depth(g, sd)
}

fn alpha_from_optical_depth(g: &mut Graph, sd: Var) -> Var {
    let neg = g.neg(sd);
    let e = g.exp(neg);
    let ne = g.neg(e);
    g.add_scalar(ne, 1.0)
}

/// Composites `sigma: [R, N]` and `rgb: [R, N, 3]` sampled at depths `t`
/// with intervals `delta` (both `[R, N]`).
pub fn composite(
    g: &mut Graph,
    sigma: Var,
    rgb: Var,
    t: &Tensor,
    delta: &Tensor,
    white_background: bool,
) -> Composite {
    let shape = g.shape(sigma).to_vec();
    assert_eq!(shape.len(), 2, "sigma must be [rays, samples]");
    let (r, n) = (shape[0], shape[1]);
    assert_eq!(g.shape(rgb), &[r, n, 3], "rgb must be [rays, samples, 3]");
    assert_eq!(t.shape(), &[r, n]);
    assert_eq!(delta.shape(), &[r, n]);

    let d = g.constant(delta.clone());
    let sd = g.mul(sigma, d);
    let alpha = alpha_from_optical_depth(g, sd);
    let before = g.cumsum_exclusive(sd);
    let neg = g.neg(before);
    let transmittance = g.exp(neg);
    let weights = g.mul(transmittance, alpha);

    let w3 = g.reshape(weights, [r, n, 1]);
    let w3 = g.broadcast_to(w3, [r, n, 3]);
    let wc = g.mul(w3, rgb);
    let mut color = g.sum_axis(wc, 1);

    let acc = g.sum_axis(weights, 1);
    let q = g.sum_axis(alpha, 1);

    let tv = g.constant(t.clone());
    let wt = g.mul(weights, tv);
    let num = g.sum_axis(wt, 1);
    let den = g.clamp_min(acc, DEPTH_WEIGHT_FLOOR);
    let depth = g.div(num, den);

    if white_background {
        let na = g.neg(acc);
        let bg = g.add_scalar(na, 1.0);
        let bg = g.reshape(bg, [r, 1]);
        let bg = g.broadcast_to(bg, [r, 3]);
        color = g.add(color, bg);
    }

    Composite {
        rgb: color,
        alpha,
        transmittance,
        weights,
        acc,
        q,
        depth,
    }
}

/// Values of a single rendered ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weight: Vec<f64>,
    pub q: f64,
    pub depth: f64,
}

/// Flat positions `[R*N, 3]` and repeated directions for rays sampled at `t: [R, N]`.
pub(crate) fn sample_points(rays: &[Ray], t: &Tensor) -> (Tensor, Tensor) {
    let n = t.shape()[1];
    let mut pos = Vec::with_capacity(rays.len() * n * 3);
    let mut dirs = Vec::with_capacity(rays.len() * n * 3);
    for (i, ray) in rays.iter().enumerate() {
        for &ti in t.row(i) {
            let p = ray.origin + ray.direction * ti;
            pos.extend_from_slice(&p.0);
            dirs.extend_from_slice(&ray.direction.0);
        }
    }
    (
        Tensor::new([rays.len() * n, 3], pos),
        Tensor::new([rays.len() * n, 3], dirs),
    )
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Queries `field` at `[R*N]` points and reshapes to `([R, N], [R, N, 3])`,
/// rejecting non-finite outputs with the offending flat sample index.
/// Without `color` only density is evaluated and colors are zero.
pub(crate) fn query_samples(
    g: &mut Graph,
    field: &dyn FieldQuery,
    rays: &[Ray],
    t: &Tensor,
    color: bool,
) -> Result<(Var, Var)> {
    let (r, n) = (t.shape()[0], t.shape()[1]);
    let (pos, dirs) = sample_points(rays, t);
    let pv = g.constant(pos);
    let (sigma, rgb) = if color {
        let dv = g.constant(dirs);
        field.query(g, pv, dv)
    } else {
        let sigma = field.query_density(g, pv);
        (sigma, g.constant(Tensor::zeros([r * n, 3])))
    };
    check_finite(g.value(sigma), "sigma")?;
    check_finite(g.value(rgb), "color")?;
    let sigma = g.reshape(sigma, [r, n]);
    let rgb = g.reshape(rgb, [r, n, 3]);
    Ok((sigma, rgb))
}

/// Renders one ray against fixed samples, without background.
pub fn render_ray(field: &dyn FieldQuery, ray: &Ray, samples: &RaySamples) -> Result<RenderOutput> {
    let n = samples.len();
    let t = Tensor::new([1, n], samples.t.clone());
    let delta = Tensor::new([1, n], samples.delta.clone());
    let mut g = Graph::new();
    let (sigma, rgb) = query_samples(&mut g, field, std::slice::from_ref(ray), &t, true)?;
    let c = composite(&mut g, sigma, rgb, &t, &delta, false);
    let color = g.value(c.rgb).data();
    Ok(RenderOutput {
        color: [color[0], color[1], color[2]],
        alpha: g.value(c.alpha).data().to_vec(),
        transmittance: g.value(c.transmittance).data().to_vec(),
        weight: g.value(c.weights).data().to_vec(),
        q: g.value(c.q).item(),
        depth: g.value(c.depth).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::field::AnalyticField;
    use crate::geometry::Vec3;

    /// Field whose density and color come straight from a table, one row per
    /// sample, so tests can dial in exact `sigma * delta` products.
    struct Table {
        sigma: Vec<f64>,
        rgb: Vec<[f64; 3]>,
    }

    impl FieldQuery for Table {
        fn query(&self, g: &mut Graph, positions: Var, _d: Var) -> (Var, Var) {
            let n = g.shape(positions)[0];
            assert_eq!(n, self.sigma.len());
            let s = g.constant(Tensor::from_vec(self.sigma.clone()));
            let c = g.constant(Tensor::new(
                [n, 3],
                self.rgb.iter().flatten().copied().collect(),
            ));
            (s, c)
        }
    }

    fn axis_ray() -> Ray {
        Ray {
            origin: Vec3::ZERO,
            direction: Vec3::new(0.0, 0.0, -1.0),
            pixel: None,
        }
    }

    #[test]
    fn single_sample_unit_optical_depth() {
        let f = Table {
            sigma: vec![2.0],
            rgb: vec![[1.0; 3]],
        };
        let s = RaySamples::new(vec![1.5], 1.0, 2.0).unwrap();
        let out = render_ray(&f, &axis_ray(), &s).unwrap();
        let expected = 1.0 - (-1.0f64).exp();
        for c in out.color {
            assert!((c - expected).abs() < 1e-15);
        }
        assert!((out.q - expected).abs() < 1e-15);
        assert!((out.color[0] - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn two_samples_ln2() {
        let ln2 = std::f64::consts::LN_2;
        // delta = (1, 1): t = (2, 3) with far = 4
        let f = Table {
            sigma: vec![ln2, ln2],
            rgb: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        let s = RaySamples::new(vec![2.0, 3.0], 1.0, 4.0).unwrap();
        let out = render_ray(&f, &axis_ray(), &s).unwrap();
        assert!((out.weight[0] - 0.5).abs() < 1e-15);
        assert!((out.weight[1] - 0.25).abs() < 1e-15);
        assert!((out.color[0] - 0.5).abs() < 1e-15);
        assert!((out.color[1] - 0.25).abs() < 1e-15);
        assert_eq!(out.color[2], 0.0);
        assert!((out.depth - (0.5 * 2.0 + 0.25 * 3.0) / 0.75).abs() < 1e-14);
        assert_eq!(out.transmittance[0], 1.0);
    }

    #[test]
    fn empty_space_renders_black() {
        let s = RaySamples::new(vec![2.0, 3.0, 4.0], 1.0, 5.0).unwrap();
        let out = render_ray(&AnalyticField::empty(), &axis_ray(), &s).unwrap();
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.q, 0.0);
        assert!(out.weight.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn non_finite_density_reports_sample_index() {
        let f = Table {
            sigma: vec![1.0, f64::NAN, 1.0],
            rgb: vec![[0.5; 3]; 3],
        };
        let s = RaySamples::new(vec![2.0, 3.0, 4.0], 1.0, 5.0).unwrap();
        match render_ray(&f, &axis_ray(), &s) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn weights_bounded_and_transmittance_monotone() {
        let f = Table {
            sigma: vec![0.3, 5.0, 0.0, 2.0, 9.0],
            rgb: vec![[1.0; 3]; 5],
        };
        let s = RaySamples::new(vec![1.0, 1.5, 2.0, 2.2, 3.0], 0.5, 4.0).unwrap();
        let out = render_ray(&f, &axis_ray(), &s).unwrap();
        assert!(out.weight.iter().sum::<f64>() <= 1.0 + 1e-9);
        assert!(out.transmittance.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.alpha.iter().all(|&a| (0.0..1.0).contains(&a)));
        assert!(out.color.iter().all(|&c| c <= 1.0 + 1e-9));
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        let t = Tensor::new([2, 4], vec![2.0, 2.7, 3.1, 4.4, 2.2, 2.9, 3.8, 5.0]);
        let delta = Tensor::new([2, 4], vec![0.7, 0.4, 1.3, 1.6, 0.7, 0.9, 1.2, 1.0]);
        let sigma = Tensor::new([2, 4], vec![0.3, 1.2, 0.05, 2.0, 0.9, 0.0, 0.4, 1.7]);
        let rgb = Tensor::new(
            [2, 4, 3],
            (0..24)
                .map(|i| 0.1 + 0.8 * ((i * 7 % 11) as f64 / 11.0))
                .collect(),
        );
        for white in [false, true] {
            let report = check_gradients(
                |g, v| {
                    let c = composite(g, v[0], v[1], &t, &delta, white);
                    let wsum =
                        g.constant(Tensor::new([2, 3], vec![0.3, -1.0, 0.7, 1.1, 0.2, -0.4]));
                    let p = g.mul(c.rgb, wsum);
                    let s = g.sum(p);
                    let d = g.sum(c.depth);
                    let d = g.scale(d, 0.1);
                    g.add(s, d)
                },
                &[sigma.clone(), rgb.clone()],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "white={white}: {}", report.max_rel_err);
            assert!(report.excluded.is_empty());
        }
    }
}
