//! Two-parameter Weibull maximum-likelihood fitting.

/// Smallest margin admitted to the fit; zeros are clamped up to it.
pub const MIN_MARGIN: f64 = 1e-12;
pub const TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeibullError {
    #[error("no data to fit")]
    Empty,
    #[error("all {0} values are identical; the shape is unbounded")]
    Degenerate(usize),
    #[error("shape iteration did not converge after {0} iterations")]
    NoConvergence(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
}

impl Weibull {
    /// Inclusion probability `exp(-(d/λ)^κ)`, the survival function.
    #[inline]
    pub fn psi(&self, distance: f64) -> f64 {
        (-(distance / self.scale).powf(self.shape)).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            1.0 - self.psi(x)
        }
    }
}

struct Profile<'a> {
    y: &'a [f64],
    ln_y: &'a [f64],
    mean_ln: f64,
}

impl Profile<'_> {
    /// Profile score g(κ) and its derivative; g is increasing with a single root.
    fn eval(&self, k: f64) -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (&y, &l) in self.y.iter().zip(self.ln_y) {
            let p = y.powf(k);
            s0 += p;
            s1 += p * l;
            s2 += p * l * l;
        }
        let g = s1 / s0 - 1.0 / k - self.mean_ln;
        let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        (g, dg)
    }
}

/// Maximum-likelihood fit by Newton iteration on the profile likelihood of
/// the shape, safeguarded by a bisection bracket. Data are scaled by their
/// maximum first so large shapes cannot overflow.
pub fn fit(data: &[f64]) -> Result<Weibull, WeibullError> {
    if data.is_empty() {
        return Err(WeibullError::Empty);
    }
    let x: Vec<f64> = data.iter().map(|&v| v.max(MIN_MARGIN)).collect();
    let max = x.iter().copied().fold(f64::MIN, f64::max);
    let min = x.iter().copied().fold(f64::MAX, f64::min);
    if max == min {
        return Err(WeibullError::Degenerate(x.len()));
    }
    let y: Vec<f64> = x.iter().map(|v| v / max).collect();
    let ln_y: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mean_ln = ln_y.iter().sum::<f64>() / ln_y.len() as f64;
    let profile = Profile {
        y: &y,
        ln_y: &ln_y,
        mean_ln,
    };

    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    while profile.eval(lo).0 > 0.0 {
        lo /= 2.0;
        if lo < 1e-12 {
            return Err(WeibullError::NoConvergence(0));
        }
    }
    while profile.eval(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(WeibullError::NoConvergence(0));
        }
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..MAX_ITERATIONS {
        let (g, dg) = profile.eval(k);
        if g < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let newton = k - g / dg;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let converged = (next - k).abs() <= TOLERANCE * k.max(1.0) || g == 0.0;
        k = next;
        if converged {
            let mean_pow = y.iter().map(|v| v.powf(k)).sum::<f64>() / y.len() as f64;
            return Ok(Weibull {
                shape: k,
                scale: max * mean_pow.powf(1.0 / k),
            });
        }
    }
    Err(WeibullError::NoConvergence(MAX_ITERATIONS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Distribution;

    fn sample(shape: f64, scale: f64, n: usize, seed_value: u64) -> Vec<f64> {
        let d = rand_distr::Weibull::new(scale, shape).unwrap();
        let mut rng = crate::seed::rng(seed_value);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    /// Log-likelihood used as an independent optimality check.
    fn loglik(w: &Weibull, x: &[f64]) -> f64 {
        x.iter()
            .map(|&v| {
                (w.shape / w.scale).ln() + (w.shape - 1.0) * (v / w.scale).ln()
                    - (v / w.scale).powf(w.shape)
            })
            .sum()
    }

    #[test]
    fn recovers_rayleigh() {
        // a single n=1000 draw misses ±0.1 on the shape a few percent of the time
        let fits: Vec<Weibull> = (0..20).map(|s| fit(&sample(2.0, 1.0, 1000, s)).unwrap()).collect();
        let shape = fits.iter().map(|w| w.shape).sum::<f64>() / 20.0;
        let scale = fits.iter().map(|w| w.scale).sum::<f64>() / 20.0;
        assert!((shape - 2.0).abs() < 0.1, "{shape}");
        assert!((scale - 1.0).abs() < 0.05, "{scale}");
        assert!(fits.iter().all(|w| (w.scale - 1.0).abs() < 0.05));
    }

    #[test]
    fn fit_is_a_likelihood_maximum() {
        let x = sample(3.5, 20.0, 300, 7);
        let w = fit(&x).unwrap();
        let best = loglik(&w, &x);
        for (dk, dl) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            let p = Weibull {
                shape: w.shape * (1.0 + dk),
                scale: w.scale * (1.0 + dl),
            };
            assert!(loglik(&p, &x) <= best + 1e-9);
        }
    }

    #[test]
    fn scale_equivariance_and_large_values() {
        let x = sample(1.5, 1.0, 500, 3);
        let big: Vec<f64> = x.iter().map(|v| v * 1e6).collect();
        let (a, b) = (fit(&x).unwrap(), fit(&big).unwrap());
        assert!((a.shape - b.shape).abs() < 1e-6);
        assert!((a.scale * 1e6 - b.scale).abs() / b.scale < 1e-6);
        // a steep shape would overflow without rescaling
        let steep: Vec<f64> = (0..200).map(|i| 1000.0 + f64::from(i) * 0.01).collect();
        assert!(fit(&steep).unwrap().shape > 100.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit(&[]), Err(WeibullError::Empty));
        assert_eq!(fit(&[0.0; 5]), Err(WeibullError::Degenerate(5)));
        assert_eq!(fit(&[2.0, 2.0]), Err(WeibullError::Degenerate(2)));
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let mut errors = Vec::new();
        for n in [100, 1000, 10000] {
            let e: f64 = (0..20)
                .map(|s| {
                    let w = fit(&sample(2.0, 1.0, n, 1000 + s)).unwrap();
                    (w.shape - 2.0).abs() + (w.scale - 1.0).abs()
                })
                .sum::<f64>()
                / 20.0;
            errors.push(e);
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn psi_is_monotone() {
        let w = Weibull {
            shape: 2.0,
            scale: 1.5,
        };
        let mut prev = w.psi(0.0);
        assert_eq!(prev, 1.0);
        for i in 1..100 {
            let v = w.psi(f64::from(i) * 0.1);
            assert!(v <= prev);
            prev = v;
        }
        assert!(w.psi(1e6) < 1e-300);
    }
}
