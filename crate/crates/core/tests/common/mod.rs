#![allow(dead_code)]

use std::path::PathBuf;

use margin_cert::votes::PredictionMatrix;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

// 21-point Kronrod rule with its embedded 10-point Gauss rule.
const XGK: [f64; 11] = [
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 11] = [
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077600398011075,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
];
const WG: [f64; 5] = [
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
];

fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[10] * fc;
    let mut gauss = 0.0;
    for i in 0..10 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        kron += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss–Kronrod quadrature of `f` over `[a, b]`: the
/// interval with the largest error estimate is bisected until the summed
/// estimate drops below `rel` times the integral.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut parts: Vec<(f64, f64, f64, f64)> = (0..16)
        .map(|k| {
            let lo = a + (b - a) * k as f64 / 16.0;
            let hi = a + (b - a) * (k + 1) as f64 / 16.0;
            let (v, e) = gk21(&f, lo, hi);
            (lo, hi, v, e)
        })
        .collect();
    for _ in 0..4000 {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= rel * total.abs() {
            break;
        }
        let worst = (0..parts.len()).max_by(|&i, &j| parts[i].3.total_cmp(&parts[j].3)).unwrap();
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (v1, e1) = gk21(&f, lo, mid);
        let (v2, e2) = gk21(&f, mid, hi);
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
    }
    parts.iter().map(|p| p.2).sum()
}

fn log_kernel_peak(a: f64, b: f64) -> f64 {
    if a > 1.0 && b > 1.0 {
        let mode = (a - 1.0) / (a + b - 2.0);
        (a - 1.0) * mode.ln() + (b - 1.0) * (1.0 - mode).ln()
    } else {
        0.0
    }
}

/// `∫_lo^hi t^{a−1}(1−t)^{b−1} g(t) dt`, scaled by `exp(−peak(a, b))`.
/// Endpoint singularities are removed by `s = t^a` on `[0, ½]` and
/// `s = (1−t)^b` on `[½, 1]`.
pub fn beta_integral<G: Fn(f64) -> f64>(a: f64, b: f64, lo: f64, hi: f64, g: G) -> f64 {
    let peak = log_kernel_peak(a, b);
    let rel = 1e-13;
    let kernel = |t: f64| ((a - 1.0) * t.ln() + (b - 1.0) * (-t).ln_1p() - peak).exp();
    let mut total = 0.0;
    let (l1, h1) = (lo.min(0.5), hi.min(0.5));
    if h1 > l1 {
        total += if a < 1.0 {
            integrate(
                |s: f64| {
                    let t = s.powf(1.0 / a);
                    ((b - 1.0) * (-t).ln_1p() - peak).exp() * g(t) / a
                },
                l1.powf(a),
                h1.powf(a),
                rel,
            )
        } else {
            integrate(|t| kernel(t) * g(t), l1, h1, rel)
        };
    }
    let (l2, h2) = (lo.max(0.5), hi.max(0.5));
    if h2 > l2 {
        total += if b < 1.0 {
            integrate(
                |s: f64| {
                    let t = 1.0 - s.powf(1.0 / b);
                    ((a - 1.0) * t.ln() - peak).exp() * g(t) / b
                },
                (1.0 - h2).powf(b),
                (1.0 - l2).powf(b),
                rel,
            )
        } else {
            integrate(|t| kernel(t) * g(t), l2, h2, rel)
        };
    }
    total
}

pub fn quad_log_beta(a: f64, b: f64) -> f64 {
    log_kernel_peak(a, b) + beta_integral(a, b, 0.0, 1.0, |_| 1.0).ln()
}

pub fn quad_reg_inc_beta(z: f64, a: f64, b: f64) -> f64 {
    beta_integral(a, b, 0.0, z, |_| 1.0) / beta_integral(a, b, 0.0, 1.0, |_| 1.0)
}

/// `(∂I/∂a, ∂I/∂b)` from `∂_a I_z = E[ln t; t ≤ z] − I_z E[ln t]`.
pub fn quad_reg_inc_beta_grad(z: f64, a: f64, b: f64) -> (f64, f64) {
    let total = beta_integral(a, b, 0.0, 1.0, |_| 1.0);
    let i = beta_integral(a, b, 0.0, z, |_| 1.0) / total;
    let lt = |t: f64| t.ln();
    let l1t = |t: f64| (-t).ln_1p();
    let da = beta_integral(a, b, 0.0, z, lt) / total - i * beta_integral(a, b, 0.0, 1.0, lt) / total;
    let db = beta_integral(a, b, 0.0, z, l1t) / total - i * beta_integral(a, b, 0.0, 1.0, l1t) / total;
    (da, db)
}

/// `KL(Beta(a1, a2) ‖ Beta(b1, b2))` with every moment and normaliser by
/// quadrature.
pub fn quad_beta_kl(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    let total = beta_integral(a1, a2, 0.0, 1.0, |_| 1.0);
    let e_ln_t = beta_integral(a1, a2, 0.0, 1.0, |t: f64| t.ln()) / total;
    let e_ln_1t = beta_integral(a1, a2, 0.0, 1.0, |t: f64| (-t).ln_1p()) / total;
    (a1 - b1) * e_ln_t + (a2 - b2) * e_ln_1t - quad_log_beta(a1, a2) + quad_log_beta(b1, b2)
}

/// Random 1-based prediction matrix: each voter is right with probability
/// `acc`, otherwise picks a wrong class uniformly.
pub fn random_matrix<R: Rng>(rng: &mut R, m: usize, d: usize, c: usize, acc: f64) -> PredictionMatrix {
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(1..=c)).collect();
    let mut preds = Vec::with_capacity(m * d);
    for &y in &labels {
        for _ in 0..d {
            if rng.random::<f64>() < acc {
                preds.push(y);
            } else {
                let k = rng.random_range(1..c);
                preds.push(if k >= y { k + 1 } else { k });
            }
        }
    }
    PredictionMatrix::from_flat(preds, labels, d, c).unwrap()
}

/// Central difference of `f` at `x` in direction `i`.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(got.abs()).max(1e-12)
}
