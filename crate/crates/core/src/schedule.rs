//! Noise schedules and accelerated timestep plans. Every forward/reverse
//! chain reads its coefficients from here.

use crate::error::{Error, Result};

/// Variance schedule for `t = 1..=T` with the convention `alpha_bar(0) = 1`
/// (t = 0 means a clean image).
///
/// Invariants: `0 < beta_t < 1`, `alpha_bar` strictly decreasing, and
/// `alpha_bar(t) == alpha_bar(t-1) * alpha(t)` exactly (built by sequential
/// product).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_start` (t=1) to `beta_end` (t=T).
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta bounds violated: need 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        // Index 0 holds the clean-image convention values.
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha = vec![1.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            beta[t] = beta_start + (beta_end - beta_start) * frac;
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(Self {
            t_max,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The 1000-step linear schedule all return steps are quoted against.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    /// Test support: a schedule with explicitly chosen betas.
    #[cfg(test)]
    pub(crate) fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let mut beta = vec![0.0];
        let mut alpha = vec![1.0];
        let mut alpha_bar = vec![1.0];
        for &b in betas {
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self {
            t_max: betas.len(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "beta({t}) out of range");
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "alpha({t}) out of range");
        self.alpha[t]
    }

    /// ᾱ_t for `t in 0..=T`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar({t}) out of range");
        self.alpha_bar[t]
    }
}

/// Strictly increasing timestep subsequence with `t_1 = 0` and
/// `t_S = T_return`, used by accelerated chains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    t_return: usize,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t_return(&self) -> usize {
        self.t_return
    }
}

/// Uniformly spaced plan: `t_s = round((s-1) * T_return / (S-1))`, collapsed
/// upward if rounding ever collides.
pub fn make_plan(s: usize, t_return: usize, t_max: usize) -> Result<TimestepPlan> {
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "plan needs S >= 2, got {s}"
        )));
    }
    if t_return > t_max {
        return Err(Error::InvalidArgument(format!(
            "return step {t_return} exceeds schedule length {t_max}"
        )));
    }
    if s > t_return + 1 {
        return Err(Error::InvalidArgument(format!(
            "S = {s} cannot be strictly increasing over [0, {t_return}]"
        )));
    }
    let mut steps = Vec::with_capacity(s);
    for i in 0..s {
        let raw = (i as f64 * t_return as f64 / (s - 1) as f64).round() as usize;
        let v = match steps.last() {
            Some(&prev) if raw <= prev => prev + 1,
            _ => raw,
        };
        steps.push(v);
    }
    if *steps.last().unwrap() != t_return {
        return Err(Error::InvalidArgument(format!(
            "plan for S = {s}, T_return = {t_return} cannot keep its endpoint"
        )));
    }
    Ok(TimestepPlan { steps, t_return })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
    }

    #[test]
    fn degenerate_beta_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn alpha_bar_hand_product() {
        // T=2, beta = (0.1, 0.2): alpha_bar = (0.9, 0.9*0.8)
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_recomputable() {
        let s = NoiseSchedule::default_linear();
        let mut prod = 1.0;
        for t in 1..=s.t_max() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prod *= s.alpha(t);
            let rel = (prod - s.alpha_bar(t)).abs() / s.alpha_bar(t);
            assert!(rel <= 1e-12, "t={t} rel={rel}");
        }
    }

    #[test]
    fn plan_examples() {
        assert_eq!(make_plan(2, 601, 1000).unwrap().steps(), [0, 601]);
        assert_eq!(
            make_plan(5, 601, 1000).unwrap().steps(),
            [0, 150, 301, 451, 601]
        );
        let p = make_plan(40, 601, 1000).unwrap();
        assert_eq!(p.len(), 40);
        assert_eq!(p.steps()[0], 0);
        assert_eq!(p.steps()[39], 601);
        assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn plan_bounds() {
        assert!(make_plan(1, 601, 1000).is_err());
        assert!(make_plan(603, 601, 1000).is_err());
        assert!(make_plan(40, 1001, 1000).is_err());
        // S == T_return + 1 degenerates to consecutive integers.
        let p = make_plan(6, 5, 1000).unwrap();
        assert_eq!(p.steps(), [0, 1, 2, 3, 4, 5]);
    }

    proptest! {
        /// Validity over the whole precondition box.
        #[test]
        fn plan_is_valid_everywhere(t_return in 1usize..=1000, s_off in 0usize..=64) {
            let s_max = (t_return + 1).min(64);
            let s = 2 + s_off % (s_max - 1).max(1);
            prop_assume!(s <= t_return + 1);
            let p = make_plan(s, t_return, 1000).unwrap();
            prop_assert_eq!(p.steps()[0], 0);
            prop_assert_eq!(*p.steps().last().unwrap(), t_return);
            prop_assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.steps().iter().all(|&t| t <= 1000));
        }
    }
}
