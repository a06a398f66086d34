//! Forward and reverse diffusion step formulas plus chained inversion and
//! generation over a timestep plan. All deterministic unless a noise source
//! is passed in explicitly.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::tensor::random::standard_normal;
use crate::tensor::{check_same_shape, NdArray};

/// Noise predictor interface shared by the trained network, the analytic
/// verification oracle, and test stubs. Implementations must be pure and
/// safe to evaluate concurrently.
pub trait Denoiser: Sync {
    /// Predicted noise for latent `x` at timestep `t` (`t = 0` is the clean
    /// image; implementations define their own behavior there).
    fn eps(&self, x: &NdArray, t: usize) -> Result<NdArray>;
}

/// Result of a reverse chain.
///
/// `predictions` holds the clean-image estimates captured at each reverse
/// step, exactly `S - 1` entries ordered from `s = S` down to `s = 2`.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub final_image: NdArray,
    pub predictions: Option<Vec<NdArray>>,
}

fn check_t(t: usize, lo: usize, sched: &NoiseSchedule) -> Result<()> {
    if t < lo || t > sched.t_max() {
        return Err(Error::TimestepOutOfRange {
            t,
            lo,
            hi: sched.t_max(),
        });
    }
    Ok(())
}

/// Closed-form forward jump: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &NdArray, t: usize, eps: &NdArray, sched: &NoiseSchedule) -> Result<NdArray> {
    check_t(t, 0, sched)?;
    check_same_shape(x0, eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(NdArray::from_parts(x0.shape().to_vec(), data))
}

/// Clean-image estimate from a latent and its predicted noise:
/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &NdArray,
    t: usize,
    eps_pred: &NdArray,
    sched: &NoiseSchedule,
) -> Result<NdArray> {
    check_t(t, 1, sched)?;
    check_same_shape(x_t, eps_pred, "predict_x0")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| (x - b * e) / a)
        .collect();
    Ok(NdArray::from_parts(x_t.shape().to_vec(), data))
}

fn ddim_combine(f: &NdArray, eps: &NdArray, ab_to: f64, sigma2: f64) -> NdArray {
    let a = ab_to.sqrt();
    let b = (1.0 - ab_to - sigma2).sqrt();
    let data = f
        .data()
        .iter()
        .zip(eps.data())
        .map(|(fv, ev)| a * fv + b * ev)
        .collect();
    NdArray::from_parts(f.shape().to_vec(), data)
}

/// One step of the generalized (possibly stochastic) reverse process.
pub fn ddim_step_general(
    x_t: &NdArray,
    t_from: usize,
    t_to: usize,
    eps_pred: &NdArray,
    sigma: f64,
    z: Option<&NdArray>,
    sched: &NoiseSchedule,
) -> Result<NdArray> {
    check_t(t_from, 1, sched)?;
    if t_to >= t_from {
        return Err(Error::InvalidArgument(format!(
            "reverse step needs t_to < t_from, got {t_to} >= {t_from}"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("sigma must be >= 0".into()));
    }
    if (sigma > 0.0) != z.is_some() {
        return Err(Error::InvalidArgument(
            "noise z must be present exactly when sigma > 0".into(),
        ));
    }
    let ab_to = sched.alpha_bar(t_to);
    let sigma2 = sigma * sigma;
    if sigma2 > 1.0 - ab_to {
        return Err(Error::InvalidArgument(format!(
            "sigma^2 = {sigma2} exceeds 1 - alpha_bar = {}",
            1.0 - ab_to
        )));
    }
    let f = predict_x0(x_t, t_from, eps_pred, sched)?;
    let mut out = ddim_combine(&f, eps_pred, ab_to, sigma2);
    if let Some(z) = z {
        check_same_shape(x_t, z, "ddim_step_general noise")?;
        for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    Ok(out)
}

/// Deterministic reverse step (sigma = 0), valid for plan-adjacent pairs.
/// `t_to == t_from` is the identity given self-consistent `eps_pred`.
pub fn ddim_reverse_step(
    x_t: &NdArray,
    t_from: usize,
    t_to: usize,
    eps_pred: &NdArray,
    sched: &NoiseSchedule,
) -> Result<NdArray> {
    check_t(t_from, 1, sched)?;
    if t_to > t_from {
        return Err(Error::InvalidArgument(format!(
            "reverse step needs t_to <= t_from, got {t_to} > {t_from}"
        )));
    }
    let f = predict_x0(x_t, t_from, eps_pred, sched)?;
    Ok(ddim_combine(&f, eps_pred, sched.alpha_bar(t_to), 0.0))
}

/// Deterministic forward step (ODE approximation of the reverse process).
/// At `t_from = 0` the clean-image estimate is the input itself.
pub fn ddim_forward_step(
    x_t: &NdArray,
    t_from: usize,
    t_to: usize,
    eps_pred: &NdArray,
    sched: &NoiseSchedule,
) -> Result<NdArray> {
    check_t(t_to, 1, sched)?;
    if t_to <= t_from {
        return Err(Error::InvalidArgument(format!(
            "forward step needs t_to > t_from, got {t_to} <= {t_from}"
        )));
    }
    let f = if t_from == 0 {
        x_t.clone()
    } else {
        predict_x0(x_t, t_from, eps_pred, sched)?
    };
    check_same_shape(x_t, eps_pred, "ddim_forward_step")?;
    Ok(ddim_combine(&f, eps_pred, sched.alpha_bar(t_to), 0.0))
}

/// One ancestral reverse step with fixed variance `sigma_t^2 = beta_t`.
pub fn ddpm_reverse_step(
    x_t: &NdArray,
    t: usize,
    eps_pred: &NdArray,
    z: &NdArray,
    sched: &NoiseSchedule,
) -> Result<NdArray> {
    check_t(t, 1, sched)?;
    check_same_shape(x_t, eps_pred, "ddpm_reverse_step")?;
    check_same_shape(x_t, z, "ddpm_reverse_step noise")?;
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let inv_sqrt_a = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let sigma = sched.beta(t).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(z.data())
        .map(|((x, e), zv)| inv_sqrt_a * (x - coef * e) + sigma * zv)
        .collect();
    Ok(NdArray::from_parts(x_t.shape().to_vec(), data))
}

/// Deterministic inversion: chain forward steps over plan pairs
/// `(t_s -> t_{s+1})`, querying the denoiser at each source step.
pub fn invert(
    x0: &NdArray,
    plan: &TimestepPlan,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<NdArray> {
    let steps = plan.steps();
    let mut x = x0.clone();
    for s in 0..steps.len() - 1 {
        let eps = den.eps(&x, steps[s])?;
        x = ddim_forward_step(&x, steps[s], steps[s + 1], &eps, sched)?;
    }
    if !x.is_all_finite() {
        return Err(Error::NonFinite("invert chain output".into()));
    }
    Ok(x)
}

/// Reverse chain over plan pairs `(t_s -> t_{s-1})`, `s = S..2`.
///
/// With `stochastic_start = (x0, rng)` the starting latent is drawn by
/// [`q_sample`] at the plan's return step instead of using `x_latent`.
/// `capture` records the clean-image estimate at every step.
pub fn generate(
    x_latent: &NdArray,
    plan: &TimestepPlan,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    capture: bool,
    stochastic_start: Option<(&NdArray, &mut ChaCha8Rng)>,
) -> Result<ChainResult> {
    let steps = plan.steps();
    if steps.len() < 2 {
        return Err(Error::InvalidArgument("plan must have S >= 2".into()));
    }
    let mut x = match stochastic_start {
        Some((x0, rng)) => {
            let eps = standard_normal(x0.shape(), rng);
            q_sample(x0, plan.t_return(), &eps, sched)?
        }
        None => x_latent.clone(),
    };
    let mut predictions = capture.then(Vec::new);
    for s in (1..steps.len()).rev() {
        let t_from = steps[s];
        let t_to = steps[s - 1];
        let eps = den.eps(&x, t_from)?;
        if let Some(preds) = predictions.as_mut() {
            preds.push(predict_x0(&x, t_from, &eps, sched)?);
        }
        x = ddim_reverse_step(&x, t_from, t_to, &eps, sched)?;
    }
    if !x.is_all_finite() {
        return Err(Error::NonFinite("generate chain output".into()));
    }
    Ok(ChainResult {
        final_image: x,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_plan;
    use crate::tensor::random::rng_from_seed;

    #[test]
    fn q_sample_scalar_hand_case() {
        // alpha_bar = 0.64 at t=1: beta = 0.36
        let sched = NoiseSchedule::linear(1, 0.36, 0.36).unwrap();
        let x0 = NdArray::scalar(1.0);
        let eps = NdArray::scalar(0.5);
        let y = q_sample(&x0, 1, &eps, &sched).unwrap();
        assert!((y.scalar_value().unwrap() - 1.1).abs() < 1e-12);
        // t = 0: clean-image convention
        let y0 = q_sample(&x0, 0, &eps, &sched).unwrap();
        assert_eq!(y0.scalar_value().unwrap(), 1.0);
        // eps = 0
        let y2 = q_sample(&x0, 1, &NdArray::scalar(0.0), &sched).unwrap();
        assert!((y2.scalar_value().unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let sched = NoiseSchedule::default_linear();
        let mut rng = rng_from_seed(3);
        let x0 = crate::tensor::random::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        for &t in &[1usize, 57, 500, 1000] {
            let eps = standard_normal(x0.shape(), &mut rng);
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            let back = predict_x0(&xt, t, &eps, &sched).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() <= 1e-10, "t={t}");
            }
        }
        assert!(predict_x0(&x0, 0, &x0, &sched).is_err());
    }

    #[test]
    fn predict_x0_scalar_hand_case() {
        let sched = NoiseSchedule::linear(1, 0.36, 0.36).unwrap();
        let xt = NdArray::scalar(1.1);
        let eps = NdArray::scalar(0.5);
        let f = predict_x0(&xt, 1, &eps, &sched).unwrap();
        assert!((f.scalar_value().unwrap() - 1.0).abs() < 1e-12);
        let f0 = predict_x0(&xt, 1, &NdArray::scalar(0.0), &sched).unwrap();
        assert!((f0.scalar_value().unwrap() - 1.1 / 0.8).abs() < 1e-12);
    }

    #[test]
    fn ddim_step_scalar_hand_case() {
        // alpha_bar(1) = 0.81, alpha_bar(2) = 0.64
        let sched = NoiseSchedule::from_betas(&[0.19, 1.0 - 0.64 / 0.81]).unwrap();
        assert!((sched.alpha_bar(1) - 0.81).abs() < 1e-12);
        assert!((sched.alpha_bar(2) - 0.64).abs() < 1e-12);

        let xt = NdArray::scalar(1.1);
        let eps = NdArray::scalar(0.5);
        let y = ddim_step_general(&xt, 2, 1, &eps, 0.0, None, &sched).unwrap();
        let want = 0.9 * 1.0 + (1.0f64 - 0.81).sqrt() * 0.5;
        assert!((y.scalar_value().unwrap() - want).abs() < 1e-12);
        assert!((want - 1.11794).abs() < 1e-5);

        // sigma = 0 coincides with the deterministic reverse step bit-exactly.
        let y2 = ddim_reverse_step(&xt, 2, 1, &eps, &sched).unwrap();
        assert_eq!(
            y.scalar_value().unwrap().to_bits(),
            y2.scalar_value().unwrap().to_bits()
        );

        // ab(t_to) = 1 (t_to = 0), sigma = 0: returns f exactly.
        let y3 = ddim_step_general(&xt, 2, 0, &eps, 0.0, None, &sched).unwrap();
        let f = predict_x0(&xt, 2, &eps, &sched).unwrap();
        assert_eq!(y3.scalar_value().unwrap(), f.scalar_value().unwrap());

        // Imaginary coefficient rejected.
        let z = NdArray::scalar(0.1);
        assert!(ddim_step_general(&xt, 2, 1, &eps, 0.7, Some(&z), &sched).is_err());
        // Noise presence must match sigma.
        assert!(ddim_step_general(&xt, 2, 1, &eps, 0.1, None, &sched).is_err());
        assert!(ddim_step_general(&xt, 2, 1, &eps, 0.0, Some(&z), &sched).is_err());
    }

    #[test]
    fn ddim_reverse_identity_at_equal_steps() {
        let sched = NoiseSchedule::default_linear();
        let mut rng = rng_from_seed(11);
        let x0 = crate::tensor::random::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let eps = standard_normal(x0.shape(), &mut rng);
        let t = 400;
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let same = ddim_reverse_step(&xt, t, t, &eps, &sched).unwrap();
        for (a, b) in same.data().iter().zip(xt.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ddim_forward_scalar_hand_case() {
        let sched = NoiseSchedule::from_betas(&[0.19, 1.0 - 0.64 / 0.81]).unwrap();
        // t_from = 0: f = x_t
        let x = NdArray::scalar(1.0);
        let eps = NdArray::scalar(0.5);
        let y = ddim_forward_step(&x, 0, 1, &eps, &sched).unwrap();
        let want = 0.9 + (0.19f64).sqrt() * 0.5;
        assert!((y.scalar_value().unwrap() - want).abs() < 1e-12);
        assert!((want - 1.11794).abs() < 1e-5);
        assert!(ddim_forward_step(&x, 1, 1, &eps, &sched).is_err());
    }

    #[test]
    fn ddpm_scalar_hand_case() {
        // alpha(2) = 0.9, alpha_bar(2) = 0.72
        let sched = NoiseSchedule::from_betas(&[0.2, 0.1]).unwrap();
        let x = NdArray::scalar(1.0);
        let eps = NdArray::scalar(0.5);
        let z = NdArray::scalar(0.0);
        let y = ddpm_reverse_step(&x, 2, &eps, &z, &sched).unwrap();
        let want = (1.0 / 0.9f64.sqrt()) * (1.0 - (0.1 / 0.28f64.sqrt()) * 0.5);
        assert!((y.scalar_value().unwrap() - want).abs() < 1e-12);

        // Different z seeds give different outputs.
        let mut r1 = rng_from_seed(1);
        let mut r2 = rng_from_seed(2);
        let z1 = standard_normal(&[], &mut r1);
        let z2 = standard_normal(&[], &mut r2);
        let y1 = ddpm_reverse_step(&x, 2, &eps, &z1, &sched).unwrap();
        let y2 = ddpm_reverse_step(&x, 2, &eps, &z2, &sched).unwrap();
        assert_ne!(y1.data(), y2.data());
    }

    #[test]
    fn ddpm_exact_identity_with_zero_noise_and_eps() {
        // alpha_t -> 1 limit: with eps_pred = 0 and z = 0 the step is x / sqrt(alpha).
        let sched = NoiseSchedule::linear(1, 1e-9, 1e-9).unwrap();
        let x = NdArray::scalar(0.7);
        let y = ddpm_reverse_step(&x, 1, &NdArray::scalar(0.0), &NdArray::scalar(0.0), &sched)
            .unwrap();
        assert!((y.scalar_value().unwrap() - 0.7).abs() < 1e-9);
    }

    struct ZeroDen;
    impl Denoiser for ZeroDen {
        fn eps(&self, x: &NdArray, _t: usize) -> Result<NdArray> {
            Ok(NdArray::zeros(x.shape()))
        }
    }

    #[test]
    fn invert_single_pair_is_one_step() {
        let sched = NoiseSchedule::default_linear();
        let plan = make_plan(2, 100, 1000).unwrap();
        let x0 = NdArray::full(&[1, 2, 2], 0.5);
        let inv = invert(&x0, &plan, &ZeroDen, &sched).unwrap();
        let want = ddim_forward_step(&x0, 0, 100, &NdArray::zeros(x0.shape()), &sched).unwrap();
        assert_eq!(inv.data(), want.data());
    }

    #[test]
    fn invert_is_deterministic() {
        let sched = NoiseSchedule::default_linear();
        let plan = make_plan(7, 300, 1000).unwrap();
        let x0 = NdArray::full(&[1, 2, 2], -0.25);
        let a = invert(&x0, &plan, &ZeroDen, &sched).unwrap();
        let b = invert(&x0, &plan, &ZeroDen, &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_capture_counts_and_determinism() {
        let sched = NoiseSchedule::default_linear();
        let plan = make_plan(6, 200, 1000).unwrap();
        let latent = NdArray::full(&[1, 2, 2], 0.3);
        let r = generate(&latent, &plan, &ZeroDen, &sched, true, None).unwrap();
        assert_eq!(r.predictions.as_ref().unwrap().len(), plan.len() - 1);
        let r2 = generate(&latent, &plan, &ZeroDen, &sched, false, None).unwrap();
        assert_eq!(r.final_image, r2.final_image);
        assert!(r2.predictions.is_none());
    }

    #[test]
    fn generate_stochastic_start_differs_by_seed() {
        let sched = NoiseSchedule::default_linear();
        let plan = make_plan(6, 200, 1000).unwrap();
        let x0 = NdArray::full(&[1, 2, 2], 0.3);
        let latent = NdArray::zeros(&[1, 2, 2]);
        let mut r1 = rng_from_seed(100);
        let mut r2 = rng_from_seed(200);
        let a = generate(&latent, &plan, &ZeroDen, &sched, false, Some((&x0, &mut r1))).unwrap();
        let b = generate(&latent, &plan, &ZeroDen, &sched, false, Some((&x0, &mut r2))).unwrap();
        let dist: f64 = a
            .final_image
            .data()
            .iter()
            .zip(b.final_image.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    /// Moments of q_sample over many draws match the closed form.
    #[test]
    fn q_sample_moments() {
        let sched = NoiseSchedule::default_linear();
        let x0 = NdArray::full(&[4], 0.5);
        let t = 300;
        let mut rng = rng_from_seed(9);
        let n = 20_000;
        let mut sum = vec![0.0; 4];
        let mut sumsq = vec![0.0; 4];
        for _ in 0..n {
            let eps = standard_normal(&[4], &mut rng);
            let x = q_sample(&x0, t, &eps, &sched).unwrap();
            for (i, v) in x.data().iter().enumerate() {
                sum[i] += v;
                sumsq[i] += v * v;
            }
        }
        let ab = sched.alpha_bar(t);
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            let se_mean = ((1.0 - ab) / n as f64).sqrt();
            assert!((mean - ab.sqrt() * 0.5).abs() < 4.0 * se_mean);
            let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((var - (1.0 - ab)).abs() < 4.0 * se_var);
        }
    }
}
