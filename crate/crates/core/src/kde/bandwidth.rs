//! Diffusion-time selection for 1D marginals.
//!
//! The primary route is the "improved Sheather–Jones" fixed point of the
//! diffusion estimator: solve `t = ξγ⁽⁷⁾(t)` on `[0, 0.1]` where `ξγ` is built
//! from the cosine coefficients of the binned marginal. When there are several
//! roots the largest one is taken. Times are expressed on
//! the unit interval, so a diffusion time `t` corresponds to a Gaussian kernel
//! with standard deviation `2·√t` on [-1, 1].
//!
//! When the equation does not bracket a root (or the sample is degenerate)
//! Silverman's rule of thumb is used instead and the result is flagged.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::dct::CosineTransform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMethod {
    FixedPoint,
    Silverman,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    /// Diffusion time on the unit interval.
    pub t: f64,
    pub method: BandwidthMethod,
}

impl Bandwidth {
    pub fn fixed(t: f64) -> Self {
        Self {
            t,
            method: BandwidthMethod::Fixed,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.method == BandwidthMethod::Silverman
    }

    /// Kernel standard deviation on [-1, 1].
    pub fn kernel_std(&self) -> f64 {
        2.0 * self.t.sqrt()
    }
}

const ORDER: i32 = 7;
const SEARCH_MAX: f64 = 0.1;
const SCAN_DECADES: usize = 10;
const SCAN_PER_DECADE: usize = 20;

struct FixedPoint {
    k2: Vec<f64>,
    a2: Vec<f64>,
    n: f64,
}

impl FixedPoint {
    fn functional(&self, s: i32, t: f64) -> f64 {
        // exp(-π²k²t) by the recurrence k² = (k-1)² + 2k - 1
        let e = (-PI * PI * t).exp();
        let (mut decay, mut step) = (1.0, e);
        let mut sum = 0.0;
        for (&k2, &a2) in self.k2.iter().zip(&self.a2).skip(1) {
            decay *= step;
            step *= e * e;
            sum += k2.powi(s) * a2 * decay;
        }
        2.0 * PI.powi(2 * s) * sum
    }

    /// `ξγ⁽ˡ⁾(t)` for l = 7.
    fn xi_gamma(&self, t: f64) -> f64 {
        let mut f = self.functional(ORDER, t);
        for s in (2..ORDER).rev() {
            let odd_product: f64 = (1..2 * s).step_by(2).map(|v| v as f64).product();
            let k = odd_product / (2.0 * PI).sqrt();
            let c = (1.0 + 0.5f64.powf(s as f64 + 0.5)) / 3.0;
            let tj = (2.0 * c * k / self.n / f).powf(2.0 / (3.0 + 2.0 * s as f64));
            f = self.functional(s, tj);
        }
        (2.0 * self.n * PI.sqrt() * f).powf(-0.4)
    }

    fn residual(&self, t: f64) -> f64 {
        t - self.xi_gamma(t)
    }
}

/// Selects the diffusion time for a marginal histogram built from `n`
/// observations. `histogram` may hold fractional (soft) counts.
pub fn select_bandwidth(histogram: &[f64], n: usize) -> Result<Bandwidth> {
    if n < 2 {
        return Err(Error::data(format!(
            "cannot select a bandwidth from {n} observation(s)"
        )));
    }
    let g = histogram.len();
    let plan = CosineTransform::new(g)?;
    if histogram.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::data("bandwidth histogram has negative or non-finite counts"));
    }
    let total: f64 = histogram.iter().sum();
    if !(total > 0.0) {
        return Err(Error::data("bandwidth histogram is empty"));
    }
    let probs: Vec<f64> = histogram.iter().map(|v| v / total).collect();

    let occupied = probs.iter().filter(|&&p| p > 0.0).count();
    if occupied >= 2 {
        let mut coeffs = probs.clone();
        plan.forward_raw(&mut coeffs);
        let fp = FixedPoint {
            k2: (0..g).map(|k| (k * k) as f64).collect(),
            a2: coeffs.iter().map(|c| c * c).collect(),
            n: n as f64,
        };
        if let Some(t) = largest_root(|t| fp.residual(t)) {
            if t.is_finite() && t > 0.0 {
                return Ok(Bandwidth {
                    t,
                    method: BandwidthMethod::FixedPoint,
                });
            }
        }
    }
    Ok(silverman(&probs, n))
}

/// Largest root of `f` in `(0, SEARCH_MAX]`. Coarse marginals can have
/// several spurious small roots; the largest is stable across grid sizes.
fn largest_root(f: impl Fn(f64) -> f64) -> Option<f64> {
    let mut hi = SEARCH_MAX;
    let mut f_hi = f(hi);
    for i in 1..=SCAN_DECADES * SCAN_PER_DECADE {
        let lo = SEARCH_MAX * 10f64.powf(-(i as f64) / SCAN_PER_DECADE as f64);
        let f_lo = f(lo);
        if f_lo.is_finite() && f_hi.is_finite() && (f_lo < 0.0) != (f_hi < 0.0) {
            return brent(&f, lo, hi, 1e-14, 200);
        }
        hi = lo;
        f_hi = f_lo;
    }
    brent(&f, 0.0, hi, 1e-14, 200)
}

/// Rule-of-thumb fallback `h = (4 / 3n)^(1/5) σ` on the unit interval,
/// floored at one grid cell.
pub fn silverman(probs: &[f64], n: usize) -> Bandwidth {
    let g = probs.len() as f64;
    let centers = (0..probs.len()).map(|j| (j as f64 + 0.5) / g);
    let mean: f64 = centers.clone().zip(probs).map(|(c, p)| c * p).sum();
    let var: f64 = centers.zip(probs).map(|(c, p)| p * (c - mean) * (c - mean)).sum();
    let h = (4.0 / (3.0 * n as f64)).powf(0.2) * var.max(0.0).sqrt();
    let h = h.max(1.0 / g);
    Bandwidth {
        t: h * h,
        method: BandwidthMethod::Silverman,
    }
}

/// Brent's root finder on `[a, b]`; `None` when the endpoints do not bracket
/// a sign change.
pub(crate) fn brent(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> Option<f64> {
    let mut fa = f(a);
    let mut fb = f(b);
    if !fa.is_finite() || !fb.is_finite() {
        return None;
    }
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol1 || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1 * m.signum() };
        fb = f(b);
        if !fb.is_finite() {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::bin_index;

    /// Deterministic Irwin–Hall samples (sum of 12 uniforms from a 64-bit LCG),
    /// reproducible outside Rust.
    pub(crate) fn lcg_normalish(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                let mut acc = 0.0;
                for _ in 0..12 {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    acc += (s >> 11) as f64 / (1u64 << 53) as f64;
                }
                ((acc - 6.0) * 0.25).clamp(-0.999, 0.999)
            })
            .collect()
    }

    fn histogram(xs: &[f64], g: usize) -> Vec<f64> {
        let mut h = vec![0.0; g];
        for &x in xs {
            h[bin_index(x, g)] += 1.0;
        }
        h
    }

    /// Straight transcription of the fixed-point procedure: explicit cosine
    /// sums for the coefficients, a fine downward scan for the largest root
    /// and plain bisection.
    fn reference_fixed_point(hist: &[f64], n: usize) -> f64 {
        let g = hist.len();
        let total: f64 = hist.iter().sum();
        let a2: Vec<f64> = (0..g)
            .map(|k| {
                let c: f64 = (0..g)
                    .map(|j| hist[j] / total * (PI * k as f64 * (2 * j + 1) as f64 / (2 * g) as f64).cos())
                    .sum();
                c * c
            })
            .collect();
        let nf = n as f64;
        let func = |s: i32, t: f64| {
            let mut acc = 0.0;
            for k in 1..g {
                let k2 = (k * k) as f64;
                acc += k2.powi(s) * a2[k] * (-PI * PI * k2 * t).exp();
            }
            2.0 * PI.powi(2 * s) * acc
        };
        let xi = |t: f64| {
            let mut f = func(7, t);
            for s in (2..7).rev() {
                let mut prod = 1.0;
                let mut v = 1;
                while v < 2 * s {
                    prod *= v as f64;
                    v += 2;
                }
                let k = prod / (2.0 * PI).sqrt();
                let c = (1.0 + 0.5f64.powf(s as f64 + 0.5)) / 3.0;
                let tj = (2.0 * c * k / nf / f).powf(2.0 / (3.0 + 2.0 * s as f64));
                f = func(s, tj);
            }
            t - (2.0 * nf * PI.sqrt() * f).powf(-0.4)
        };
        // walk down from 0.1 in steps of 1% until the residual turns negative
        let mut hi: f64 = 0.1;
        while xi(hi * 0.99) > 0.0 {
            hi *= 0.99;
            assert!(hi > 1e-12, "no root");
        }
        let mut lo = hi * 0.99;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if xi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn fixed_point_matches_reference() {
        for &(n, seed, g) in &[(1000usize, 7u64, 512usize), (1000, 7, 64), (200, 11, 512)] {
            let xs = lcg_normalish(n, seed);
            let h = histogram(&xs, g);
            let bw = select_bandwidth(&h, n).unwrap();
            assert_eq!(bw.method, BandwidthMethod::FixedPoint);
            let reference = reference_fixed_point(&h, n);
            assert!(((bw.t - reference) / reference).abs() < 1e-6, "{} vs {reference}", bw.t);
        }
    }

    /// Values produced by the `KDE-diffusion` Python package (`kde1d` with
    /// limits (-1, 1)) on the same samples, converted back to unit diffusion
    /// time via `(bandwidth / 2)²`.
    #[test]
    fn fixed_point_matches_python_package() {
        let cases = [
            (1000usize, 7u64, 512usize, 0.0012519986272702588),
            (1000, 7, 64, 0.0012090528287771935),
            (200, 11, 512, 0.002617749722401898),
        ];
        for (n, seed, g, expected) in cases {
            let xs = lcg_normalish(n, seed);
            let bw = select_bandwidth(&histogram(&xs, g), n).unwrap();
            assert!(((bw.t - expected) / expected).abs() < 1e-6, "{} vs {expected}", bw.t);
        }
    }

    #[test]
    fn lcg_samples_match_python_generator() {
        let xs = lcg_normalish(3, 7);
        assert!((xs[0] - 0.10714088).abs() < 1e-8);
        assert!((xs[1] + 0.15630998).abs() < 1e-8);
        assert!((xs[2] + 0.02588488).abs() < 1e-8);
    }

    #[test]
    fn equal_samples_fall_back_to_silverman() {
        let xs = vec![0.3; 50];
        let bw = select_bandwidth(&histogram(&xs, 64), 50).unwrap();
        assert!(bw.is_fallback());
        assert!(bw.t > 0.0);
    }

    #[test]
    fn doubling_samples_does_not_increase_time() {
        let xs = lcg_normalish(300, 3);
        let doubled: Vec<f64> = xs.iter().chain(xs.iter()).copied().collect();
        let t1 = select_bandwidth(&histogram(&xs, 256), xs.len()).unwrap().t;
        let t2 = select_bandwidth(&histogram(&doubled, 256), doubled.len()).unwrap().t;
        assert!(t2 <= t1);
        let mut quadrupled = doubled.clone();
        quadrupled.extend_from_slice(&doubled);
        let t4 = select_bandwidth(&histogram(&quadrupled, 256), quadrupled.len())
            .unwrap()
            .t;
        assert!(t4 <= t2);
    }

    #[test]
    fn too_few_observations() {
        assert!(select_bandwidth(&[1.0, 0.0, 0.0, 0.0], 1).is_err());
        assert!(select_bandwidth(&[0.0; 8], 5).is_err());
        assert!(select_bandwidth(&[1.0; 6], 6).is_err());
    }

    /// Upsampled subset means of six ratings. On coarse grids the residual
    /// has two extra small roots here.
    fn clustered_sample() -> Vec<f64> {
        use crate::labels::{upsample, UpsampleConfig};
        let ratings = [
            -0.3767030091369606,
            0.1772341254906865,
            -0.16329949661830673,
            0.0453832310537194,
            0.11857017353655973,
            -0.12152424983108624,
        ];
        let pairs: Vec<(f64, f64)> = ratings.iter().map(|&r| (r, r)).collect();
        let cfg = UpsampleConfig::new(100, 0).unwrap().for_utterance("utt00015");
        upsample(&pairs, &cfg).unwrap().into_iter().map(|p| p.0).collect()
    }

    #[test]
    fn largest_root_is_stable_across_grids() {
        let xs = clustered_sample();
        let fine = select_bandwidth(&histogram(&xs, 4096), xs.len()).unwrap();
        assert_eq!(fine.method, BandwidthMethod::FixedPoint);
        for g in [256, 512, 1024] {
            let h = histogram(&xs, g);
            let t = select_bandwidth(&h, xs.len()).unwrap().t;
            assert!(((t - fine.t) / fine.t).abs() < 0.15, "G={g}: {t} vs {}", fine.t);
            let reference = reference_fixed_point(&h, xs.len());
            assert!(
                ((t - reference) / reference).abs() < 1e-6,
                "G={g}: {t} vs reference {reference}"
            );
        }
    }

    #[test]
    fn brent_finds_simple_roots() {
        let r = brent(|x| x * x - 2.0, 0.0, 2.0, 1e-15, 100).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 100).is_none());
    }
}
