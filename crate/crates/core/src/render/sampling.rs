use rand::Rng;

use crate::error::{Error, Result};

/// Padding added to every coarse weight before building the fine PDF.
pub const PDF_PADDING: f64 = 1e-5;

/// Depths and interval lengths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    /// Validates `near <= t_1 < ... < t_N <= far` and derives the intervals,
    /// truncating the last one at `far`.
    pub fn new(t: Vec<f64>, near: f64, far: f64) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::invalid("a ray needs at least one sample"));
        }
        if t[0] < near || t[t.len() - 1] > far {
            return Err(Error::invalid(format!(
                "samples must lie in [{near}, {far}]"
            )));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("sample depths must be strictly ascending"));
        }
        let delta = interval_lengths(&t, far);
        Ok(Self { t, delta })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `delta_i = t_{i+1} - t_i`, with the last interval running to `far`.
pub fn interval_lengths(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = t.last() {
        d.push(far - last);
    }
    d
}

/// One depth per equal-width stratum of `[near, far]`: the midpoint, or a
/// uniform draw inside the stratum when `jitter` is set.
pub fn stratified_sample<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far) {
        return Err(Error::invalid(format!(
            "need 0 < near < far, got near={near} far={far}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("stratified_sample needs n >= 1"));
    }
    Ok(stratified_unchecked(near, far, n, jitter, rng))
}

pub(crate) fn stratified_unchecked<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    jitter: bool,
    rng: &mut R,
) -> Vec<f64> {
    let width = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            near + (i as f64 + u) * width
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceSamples {
    /// New depths only, ascending.
    pub fine: Vec<f64>,
    /// Coarse and fine depths merged, strictly ascending.
    pub merged: Vec<f64>,
    /// Set when every coarse weight was zero and the PDF fell back to uniform.
    pub uniform_fallback: bool,
}

/// Bin edges around the coarse depths: `near`, midpoints, `far`.
fn bin_edges(coarse_t: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(coarse_t.len() + 1);
    edges.push(near);
    edges.extend(coarse_t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(far);
    edges
}

/// Inverse-transform sampling from the piecewise-constant PDF proportional
/// to `coarse_weights + 1e-5` over the bins around each coarse depth.
/// The `n_fine` uniforms are stratified (midpoints when `jitter` is off), so
/// the fine depths come out ascending.
pub fn importance_sample<R: Rng + ?Sized>(
    coarse_t: &[f64],
    coarse_weights: &[f64],
    near: f64,
    far: f64,
    n_fine: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<ImportanceSamples> {
    if coarse_t.len() != coarse_weights.len() || coarse_t.is_empty() {
        return Err(Error::invalid(
            "coarse depths and weights must be nonempty and equally long",
        ));
    }
    if coarse_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid(
            "coarse weights must be finite and nonnegative",
        ));
    }
    Ok(importance_unchecked(
        coarse_t,
        coarse_weights,
        near,
        far,
        n_fine,
        jitter,
        rng,
    ))
}

pub(crate) fn importance_unchecked<R: Rng + ?Sized>(
    coarse_t: &[f64],
    coarse_weights: &[f64],
    near: f64,
    far: f64,
    n_fine: usize,
    jitter: bool,
    rng: &mut R,
) -> ImportanceSamples {
    let uniform_fallback = coarse_weights.iter().all(|&w| w == 0.0);
    let edges = bin_edges(coarse_t, near, far);
    let padded: Vec<f64> = coarse_weights.iter().map(|w| w + PDF_PADDING).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(padded.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &padded {
        acc += w / total;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    cdf[last] = 1.0;

    let mut fine = Vec::with_capacity(n_fine);
    let mut bin = 0;
    for j in 0..n_fine {
        let jit = if jitter { rng.random::<f64>() } else { 0.5 };
        let u = (j as f64 + jit) / n_fine as f64;
        while bin + 1 < padded.len() && cdf[bin + 1] <= u {
            bin += 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = if mass > 0.0 {
            ((u - cdf[bin]) / mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        fine.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }

    let (fine, merged) = merge_distinct(coarse_t, fine, far);
    ImportanceSamples {
        fine,
        merged,
        uniform_fallback,
    }
}

/// Sorts `coarse ++ fine` and nudges fine depths upward by one ulp where they
/// tie, so the merged sequence is strictly ascending.
fn merge_distinct(coarse: &[f64], mut fine: Vec<f64>, far: f64) -> (Vec<f64>, Vec<f64>) {
    fine.sort_by(f64::total_cmp);
    let order = merge_order(coarse, &fine);
    let mut merged = Vec::with_capacity(order.len());
    let mut prev = f64::NEG_INFINITY;
    for idx in order {
        let v = if idx < coarse.len() {
            coarse[idx]
        } else {
            let f = &mut fine[idx - coarse.len()];
            if *f <= prev {
                *f = prev.next_up().min(far);
            }
            *f
        };
        merged.push(v);
        prev = v;
    }
    (fine, merged)
}

/// Indices into `coarse ++ fine` that sort it ascending; ties keep coarse
/// entries first.
pub fn merge_order(coarse: &[f64], fine: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coarse.len() + fine.len()).collect();
    let value = |i: usize| {
        if i < coarse.len() {
            coarse[i]
        } else {
            fine[i - coarse.len()]
        }
    };
    idx.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
    idx
}
