//! Finite-difference oracles for gradient verification.
//!
//! These estimators treat the function under test as a black box and never
//! touch the tape's backward rules, so they stay independent of the
//! implementation they verify.

/// Central-difference estimate of d f / d x[i].
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += step;
    let up = f(&xp);
    xp[i] = x[i] - step;
    let down = f(&xp);
    (up - down) / (2.0 * step)
}

/// Full gradient estimate (one coordinate at a time).
pub fn grad_estimate(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff(f, x, i, step)).collect()
}

/// Relative-error comparison with an absolute floor for coordinates whose
/// true gradient sits below finite-difference resolution.
#[derive(Clone, Copy, Debug)]
pub struct GradTolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        // rtol per the gradient-correctness contract; atol covers the
        // O(step^2) truncation + rounding floor of central differences.
        GradTolerance {
            rtol: 1e-4,
            atol: 1e-8,
        }
    }
}

impl GradTolerance {
    pub fn accepts(&self, analytic: f64, estimate: f64) -> bool {
        let diff = (analytic - estimate).abs();
        diff <= self.atol || diff <= self.rtol * analytic.abs().max(estimate.abs())
    }

    /// Compare full gradients; returns the first failing coordinate.
    pub fn compare(&self, analytic: &[f64], estimate: &[f64]) -> Result<(), GradMismatch> {
        assert_eq!(analytic.len(), estimate.len(), "gradient length mismatch");
        for (i, (&a, &e)) in analytic.iter().zip(estimate.iter()).enumerate() {
            if !self.accepts(a, e) {
                return Err(GradMismatch {
                    index: i,
                    analytic: a,
                    estimate: e,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub estimate: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient mismatch at [{}]: analytic {:.9e} vs finite-difference {:.9e}",
            self.index, self.analytic, self.estimate
        )
    }
}

/// Deterministic sample of up to `take` coordinate indices out of `n`.
pub fn sample_coords(n: usize, take: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    if n <= take {
        return (0..n).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < take {
        picked.insert(rng.below(n));
    }
    picked.into_iter().collect()
}
