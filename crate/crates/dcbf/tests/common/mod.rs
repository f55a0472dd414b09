//! Shared test oracles, kept independent of the library's sampling paths:
//! closed-form event algebra for the factories, Kolmogorov-Smirnov helpers,
//! a fine-Euler data-augmentation sampler for the diffusion posterior, and
//! quadrature for the tractable Cox conditionals.

#![allow(dead_code)]

use dcbf::rng::RandomStream;
use rand_distr::Distribution;

/// Outcome law `[heads, tails, escaped]` of the 2-coin algorithm with
/// continue-probability `keep`, by geometric-series summation over the
/// per-iteration event masses.
pub fn two_coin_law(c1: f64, p1: f64, c2: f64, p2: f64, keep: f64) -> [f64; 3] {
    let sel = c1 / (c1 + c2);
    let heads = keep * sel * p1;
    let tails = keep * (1.0 - sel) * p2;
    let escape = 1.0 - keep;
    let total = heads + tails + escape;
    [heads / total, tails / total, escape / total]
}

/// Outcome law of one merge node over two child outcome laws: the node
/// draws its own escape first, then the left child, then the right, and
/// any child escape propagates immediately.
pub fn merge_law(left: [f64; 3], right: [f64; 3], keep: f64) -> [f64; 3] {
    let heads = keep * left[0] * right[0];
    let tails = keep * left[1] * right[1];
    let escape = (1.0 - keep) + keep * (left[2] + (1.0 - left[2]) * right[2]);
    let total = heads + tails + escape;
    [heads / total, tails / total, escape / total]
}

/// Root outcome law of a balanced divide-and-conquer tree over 2-coin
/// leaves described by `(c1, p1, c2, p2)` tuples.
pub fn dcbf_law(
    leaves: &[(f64, f64, f64, f64)],
    leaf_keep: f64,
    node_keep: &dyn Fn(u32) -> f64,
) -> [f64; 3] {
    fn node(
        leaves: &[(f64, f64, f64, f64)],
        level: u32,
        leaf_keep: f64,
        node_keep: &dyn Fn(u32) -> f64,
    ) -> [f64; 3] {
        if leaves.len() == 1 {
            let (c1, p1, c2, p2) = leaves[0];
            return two_coin_law(c1, p1, c2, p2, leaf_keep);
        }
        let (l, r) = leaves.split_at(leaves.len() / 2);
        merge_law(
            node(l, level + 1, leaf_keep, node_keep),
            node(r, level + 1, leaf_keep, node_keep),
            node_keep(level),
        )
    }
    node(leaves, 0, leaf_keep, node_keep)
}

/// Barker probability of the product odds: `h_prop / (h_prop + h_cur)`.
pub fn barker_product(leaves: &[(f64, f64, f64, f64)]) -> f64 {
    let h_prop: f64 = leaves.iter().map(|l| l.0 * l.1).product();
    let h_cur: f64 = leaves.iter().map(|l| l.2 * l.3).product();
    h_prop / (h_prop + h_cur)
}

pub fn binomial_3sigma(p: f64, n: u64) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Two-sample Kolmogorov-Smirnov distance; sorts internally.
pub fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut ks: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        let fa = i as f64 / a.len() as f64;
        let fb = j as f64 / b.len() as f64;
        ks = ks.max((fa - fb).abs());
    }
    ks
}

pub fn standard_normal(stream: &mut RandomStream) -> f64 {
    rand_distr::StandardNormal.sample(stream)
}

/// One observation-interval draw of the tanh diffusion by an Euler scheme
/// with `substeps` internal steps.
pub fn euler_transition(theta: f64, x0: f64, dt: f64, substeps: usize, s: &mut RandomStream) -> f64 {
    let h = dt / substeps as f64;
    let mut x = x0;
    for _ in 0..substeps {
        x += (theta - x).tanh() * h + h.sqrt() * standard_normal(s);
    }
    x
}

/// Discretized complete-data log-likelihood kernel
/// `sum_k beta(x_k)(x_{k+1} - x_k) - beta(x_k)^2 h / 2` of one fine path.
fn euler_girsanov(theta: f64, path: &[f64], h: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..path.len() - 1 {
        let b = (theta - path[k]).tanh();
        acc += b * (path[k + 1] - path[k]) - 0.5 * b * b * h;
    }
    acc
}

/// Draws a Brownian bridge on a fine grid between the fixed ends of `path`.
fn euler_bridge_proposal(path: &[f64], h: f64, s: &mut RandomStream) -> Vec<f64> {
    let m = path.len() - 1;
    let mut prop = vec![0.0; m + 1];
    prop[0] = path[0];
    prop[m] = path[m];
    for k in 0..m - 1 {
        let rem = (m - k) as f64;
        let mean = prop[k] + (prop[m] - prop[k]) / rem;
        let var = h * (rem - 1.0) / rem;
        prop[k + 1] = mean + var.sqrt() * standard_normal(s);
    }
    prop
}

/// Fine-Euler data-augmentation sampler for the tanh model with a standard
/// normal prior on theta: latent fine paths are refreshed by independence
/// Brownian-bridge proposals with the Girsanov-Euler acceptance ratio, and
/// theta follows a random-walk Metropolis step on the complete-data Euler
/// likelihood. Returns the post-burn-in theta draws.
pub fn euler_da_chain(
    times: &[f64],
    values: &[f64],
    substeps: usize,
    iters: u64,
    burn: u64,
    halfwidth: f64,
    seed: u64,
) -> Vec<f64> {
    let mut s = RandomStream::new(seed, 990);
    let nseg = times.len() - 1;
    let h = (times[1] - times[0]) / substeps as f64;
    let mut paths: Vec<Vec<f64>> = (0..nseg)
        .map(|i| {
            let (a, b) = (values[i], values[i + 1]);
            (0..=substeps)
                .map(|k| a + (b - a) * k as f64 / substeps as f64)
                .collect()
        })
        .collect();
    let mut theta = 0.0f64;
    let mut out = Vec::with_capacity((iters - burn) as usize);
    for it in 0..iters {
        for path in paths.iter_mut() {
            let prop = euler_bridge_proposal(path, h, &mut s);
            let log_ratio = euler_girsanov(theta, &prop, h) - euler_girsanov(theta, path, h);
            if log_ratio >= 0.0 || s.uniform() < log_ratio.exp() {
                *path = prop;
            }
        }
        let prop_theta = theta + s.uniform_in(-halfwidth, halfwidth);
        let mut log_ratio = -(prop_theta * prop_theta - theta * theta) / 2.0;
        for path in &paths {
            log_ratio += euler_girsanov(prop_theta, path, h) - euler_girsanov(theta, path, h);
        }
        if log_ratio >= 0.0 || s.uniform() < log_ratio.exp() {
            theta = prop_theta;
        }
        if it >= burn {
            out.push(theta);
        }
    }
    out
}

/// Draws one fine-Euler bridge of the tanh diffusion between fixed
/// endpoints by running the independence-proposal chain and returning the
/// final path. `warm` proposals decorrelate from the Brownian start.
pub fn euler_bridge_draw(
    theta: f64,
    x0: f64,
    x1: f64,
    dt: f64,
    substeps: usize,
    warm: usize,
    s: &mut RandomStream,
) -> Vec<f64> {
    let h = dt / substeps as f64;
    let mut path: Vec<f64> = (0..=substeps)
        .map(|k| x0 + (x1 - x0) * k as f64 / substeps as f64)
        .collect();
    for _ in 0..warm {
        let prop = euler_bridge_proposal(&path, h, s);
        let log_ratio = euler_girsanov(theta, &prop, h) - euler_girsanov(theta, &path, h);
        if log_ratio >= 0.0 || s.uniform() < log_ratio.exp() {
            path = prop;
        }
    }
    path
}

/// Posterior mean and standard deviation of a density proportional to
/// `t^y exp(-t a)` on `(lo, hi)`, by Simpson quadrature.
pub fn gamma_like_posterior(y: u64, a: f64, lo: f64, hi: f64) -> (f64, f64) {
    let m = 20_000usize;
    let h = (hi - lo) / m as f64;
    let log_f = |t: f64| y as f64 * t.ln() - t * a;
    let peak = log_f((y as f64 / a).clamp(lo.max(1e-12), hi));
    let (mut z, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for k in 0..=m {
        let t = lo + k as f64 * h;
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = (log_f(t) - peak).exp() * w;
        z += f;
        z1 += f * t;
        z2 += f * t * t;
    }
    let mean = z1 / z;
    (mean, (z2 / z - mean * mean).sqrt())
}
