//! Independent reference implementations used as test oracles. None of
//! the functions here call into the code they check; `gradcheck` pairs
//! them with the models.

#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shift far right with the recurrence, then a short asymptotic expansion.
/// At a shift of 2000 the truncation error is below 1e-20.
const SHIFT: usize = 2000;

pub fn ln_gamma_oracle(x: f64) -> f64 {
    let mut logs = 0.0;
    for k in 0..SHIFT {
        logs += (x + k as f64).ln();
    }
    let y = x + SHIFT as f64;
    let stirling =
        (y - 0.5) * y.ln() - y + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * y) - 1.0 / (360.0 * y.powi(3));
    stirling - logs
}

pub fn digamma_oracle(x: f64) -> f64 {
    let mut harmonic = 0.0;
    for k in (0..SHIFT).rev() {
        harmonic += 1.0 / (x + k as f64);
    }
    let y = x + SHIFT as f64;
    let asym = y.ln() - 1.0 / (2.0 * y) - 1.0 / (12.0 * y * y) + 1.0 / (120.0 * y.powi(4));
    asym - harmonic
}

/// Least-squares nondecreasing fit by exhaustive search over partitions
/// into consecutive blocks. Inputs must be sorted by score with distinct
/// scores. Exponential, so only for n ≤ ~12.
pub fn brute_force_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        // Bit i set means a block boundary after position i.
        let mut fit = vec![0.0; n];
        let mut start = 0;
        let mut prev_level = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let level = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                if level < prev_level - 1e-15 {
                    ok = false;
                    break;
                }
                fit[start..end].iter_mut().for_each(|v| *v = level);
                prev_level = level;
                start = end;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(s, _)| sse < *s - 1e-15) {
            best = Some((sse, fit));
        }
    }
    best.expect("a single block is always monotone").1
}

/// Mean NLL of softmax(z / t) written out directly.
pub fn nll_oracle(logits: &[[f64; 2]], labels: &[u8], t: f64) -> f64 {
    let mut s = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let e0 = (z[0] / t).exp();
        let e1 = (z[1] / t).exp();
        let p = if y == 0 { e0 / (e0 + e1) } else { e1 / (e0 + e1) };
        s -= p.ln();
    }
    s / logits.len() as f64
}

/// Composite Simpson rule on [a, b] with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// KL(Beta(a) ‖ Beta(b)) by quadrature, with both normalizing constants
/// also found by quadrature. Needs every parameter ≥ 2 so the integrands
/// are smooth enough for Simpson.
pub fn beta_kl_quadrature(a: [f64; 2], b: [f64; 2]) -> f64 {
    let n = 200_000;
    let ln_kernel = |p: [f64; 2], x: f64| (p[0] - 1.0) * x.ln() + (p[1] - 1.0) * (1.0 - x).ln();
    let za = simpson(
        |x| {
            if x <= 0.0 || x >= 1.0 {
                0.0
            } else {
                ln_kernel(a, x).exp()
            }
        },
        0.0,
        1.0,
        n,
    );
    let zb = simpson(
        |x| {
            if x <= 0.0 || x >= 1.0 {
                0.0
            } else {
                ln_kernel(b, x).exp()
            }
        },
        0.0,
        1.0,
        n,
    );
    let integrand = |x: f64| {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        let lp = ln_kernel(a, x) - za.ln();
        let lq = ln_kernel(b, x) - zb.ln();
        lp.exp() * (lp - lq)
    };
    simpson(integrand, 0.0, 1.0, n)
}

/// Binary entropy in nats with the 0·ln 0 = 0 convention.
pub fn entropy_oracle(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Outcome counts for an accept rule, tallied directly.
pub fn tally_oracle(scores: &[f64], at_least: bool, theta: f64, correct: &[bool]) -> (usize, usize, usize, usize) {
    let (mut ca, mut cr, mut ir, mut ia) = (0, 0, 0, 0);
    for (&s, &c) in scores.iter().zip(correct) {
        let accept = if at_least { s >= theta } else { s <= theta };
        match (accept, c) {
            (true, true) => ca += 1,
            (true, false) => ia += 1,
            (false, true) => ir += 1,
            (false, false) => cr += 1,
        }
    }
    (ca, cr, ir, ia)
}

/// Harmonic mean of CA% and CR% for one threshold.
pub fn h_oracle(scores: &[f64], at_least: bool, theta: f64, correct: &[bool]) -> f64 {
    let (ca, cr, ir, ia) = tally_oracle(scores, at_least, theta, correct);
    let ca_pct = 100.0 * ca as f64 / (ca + ir) as f64;
    let cr_pct = 100.0 * cr as f64 / (cr + ia) as f64;
    if ca_pct + cr_pct == 0.0 {
        0.0
    } else {
        2.0 * ca_pct * cr_pct / (ca_pct + cr_pct)
    }
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Kolmogorov–Smirnov distance between a sample and U(0, 1).
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < s.len() {
        // Walk past ties so the empirical CDF jumps once per distinct value.
        let mut j = i;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        let x = s[i].clamp(0.0, 1.0);
        d = d.max((i as f64 / n - x).abs()).max((j as f64 / n - x).abs());
        i = j;
    }
    d
}

pub fn random_probability<R: Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
