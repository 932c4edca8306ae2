//! Forward diffusion, tractable posterior, learnable-variance parameterization,
//! hybrid training loss, and the DDPM/DDIM reverse samplers.
//!
//! Image tensors are `f32` (any shape; a leading batch dimension is allowed),
//! schedule coefficients are applied in `f64`.

use ndarray::ArrayD;

use crate::error::{CoreError, CoreResult};
use crate::schedule::NoiseSchedule;

/// Network output: predicted noise and the variance-interpolation coefficient.
#[derive(Debug, Clone)]
pub struct NoisePrediction {
    /// Predicted ε, same shape as the latent image.
    pub epsilon: ArrayD<f32>,
    /// Predicted interpolation coefficient ν, elementwise in [0, 1].
    pub nu: ArrayD<f32>,
}

impl NoisePrediction {
    pub fn new(epsilon: ArrayD<f32>, nu: ArrayD<f32>) -> CoreResult<Self> {
        check_same_shape(&epsilon, &nu, "epsilon vs nu")?;
        Ok(Self { epsilon, nu })
    }
}

fn check_same_shape(a: &ArrayD<f32>, b: &ArrayD<f32>, context: &str) -> CoreResult<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
            context: context.into(),
        });
    }
    Ok(())
}

fn check_t(t: usize, sched: &NoiseSchedule) -> CoreResult<()> {
    if t < 1 || t > sched.num_steps() {
        return Err(CoreError::StepOutOfRange {
            t,
            lo: 1,
            hi: sched.num_steps(),
        });
    }
    Ok(())
}

/// Closed-form forward jump: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
///
/// The caller supplies the standard-normal draw for determinism.
pub fn q_sample(
    x0: &ArrayD<f32>,
    t: usize,
    eps: &ArrayD<f32>,
    sched: &NoiseSchedule,
) -> CoreResult<ArrayD<f32>> {
    check_t(t, sched)?;
    check_same_shape(x0, eps, "q_sample x0 vs eps")?;
    let ab = sched.alpha_bar(t);
    let c0 = ab.sqrt();
    let c1 = (1.0 - ab).sqrt();
    let mut out = x0.clone();
    out.zip_mut_with(eps, |x, &e| {
        *x = (c0 * f64::from(*x) + c1 * f64::from(e)) as f32;
    });
    Ok(out)
}

/// Posterior mean from the ε parameterization, plus the posterior variance β̃_t.
///
/// mean = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂) / √α_t
pub fn posterior_mean_variance(
    x_t: &ArrayD<f32>,
    eps_hat: &ArrayD<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> CoreResult<(ArrayD<f32>, f64)> {
    check_t(t, sched)?;
    check_same_shape(x_t, eps_hat, "posterior x_t vs eps_hat")?;
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let eps_coef = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let mut mean = x_t.clone();
    mean.zip_mut_with(eps_hat, |x, &e| {
        *x = (inv_sqrt_a * (f64::from(*x) - eps_coef * f64::from(e))) as f32;
    });
    Ok((mean, sched.posterior_beta(t)))
}

/// Elementwise model variance Σ = exp(ν·log β_t + (1−ν)·log β̃_t).
///
/// Strict variant: errors at t = 1, where β̃_1 = 0 makes the log undefined.
pub fn model_variance(
    nu: &ArrayD<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> CoreResult<ArrayD<f64>> {
    check_t(t, sched)?;
    if t == 1 {
        return Err(CoreError::VarianceFloorRequired);
    }
    Ok(model_variance_unchecked(nu, sched.beta(t), sched.posterior_beta(t)))
}

/// Model variance with the clamped-floor policy: β̃ replaced by max(β̃_t, β̃_2),
/// keeping t = 1 well-defined.
pub fn model_variance_floored(
    nu: &ArrayD<f32>,
    t: usize,
    sched: &NoiseSchedule,
) -> CoreResult<ArrayD<f64>> {
    check_t(t, sched)?;
    Ok(model_variance_unchecked(
        nu,
        sched.beta(t),
        sched.posterior_beta_floored(t),
    ))
}

fn model_variance_unchecked(nu: &ArrayD<f32>, beta: f64, posterior_beta: f64) -> ArrayD<f64> {
    let log_beta = beta.ln();
    let log_pbeta = posterior_beta.ln();
    nu.mapv(|v| {
        let v = f64::from(v);
        (v * log_beta + (1.0 - v) * log_pbeta).exp()
    })
}

/// KL(N(mu_q, var_q) ‖ N(mu_p, var_p)) for diagonal Gaussians, in nats.
pub fn gaussian_kl(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> f64 {
    0.5 * ((var_p / var_q).ln() + var_q / var_p + (mu_q - mu_p).powi(2) / var_p - 1.0)
}

/// Approximate standard normal CDF via tanh; matches the discretized
/// log-likelihood convention used with 8-bit image data.
pub fn approx_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Negative log-likelihood of x0 under N(mean, var) discretized to 255 bins
/// over [−1, 1], in nats.
pub fn discretized_gaussian_nll(x0: f64, mean: f64, var: f64) -> f64 {
    let centered = x0 - mean;
    let inv_std = 1.0 / var.sqrt();
    let cdf_plus = approx_normal_cdf(inv_std * (centered + 1.0 / 255.0));
    let cdf_min = approx_normal_cdf(inv_std * (centered - 1.0 / 255.0));
    let log_prob = if x0 < -0.999 {
        cdf_plus.max(1e-12).ln()
    } else if x0 > 0.999 {
        (1.0 - cdf_min).max(1e-12).ln()
    } else {
        (cdf_plus - cdf_min).max(1e-12).ln()
    };
    -log_prob
}

/// Loss components returned by [`hybrid_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: f64,
    pub simple_term: f64,
    pub vlb_term: f64,
}

/// Weight of the variational term in the hybrid loss.
pub const LAMBDA_VLB: f64 = 0.001;

/// Hybrid loss: mean-squared noise error plus a weighted variational term.
///
/// For t ≥ 2 the variational term is the KL between the true Gaussian
/// posterior and the model Gaussian, with the model mean treated as a
/// constant (gradients, when taken, flow only through ν). At t = 1 it is the
/// discretized negative log-likelihood of x0. Both are per-pixel means in nats.
pub fn hybrid_loss(
    x0: &ArrayD<f32>,
    eps_true: &ArrayD<f32>,
    t: usize,
    prediction: &NoisePrediction,
    sched: &NoiseSchedule,
) -> CoreResult<LossTerms> {
    check_t(t, sched)?;
    check_same_shape(x0, eps_true, "hybrid_loss x0 vs eps_true")?;
    check_same_shape(x0, &prediction.epsilon, "hybrid_loss x0 vs prediction")?;

    let n = x0.len() as f64;
    let simple_term = eps_true
        .iter()
        .zip(prediction.epsilon.iter())
        .map(|(&e, &p)| (f64::from(e) - f64::from(p)).powi(2))
        .sum::<f64>()
        / n;

    let x_t = q_sample(x0, t, eps_true, sched)?;
    let (model_mean, _) = posterior_mean_variance(&x_t, &prediction.epsilon, t, sched)?;
    let model_var = model_variance_floored(&prediction.nu, t, sched)?;

    let vlb_term = if t == 1 {
        x0.iter()
            .zip(model_mean.iter())
            .zip(model_var.iter())
            .map(|((&x, &m), &v)| discretized_gaussian_nll(f64::from(x), f64::from(m), v))
            .sum::<f64>()
            / n
    } else {
        // True posterior mean from (x0, x_t):
        // μ̃ = (√ᾱ_{t−1}·β_t·x0 + √α_t·(1−ᾱ_{t−1})·x_t) / (1−ᾱ_t)
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
        let c1 = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var_q = sched.posterior_beta(t);
        x0.iter()
            .zip(x_t.iter())
            .zip(model_mean.iter().zip(model_var.iter()))
            .map(|((&x0v, &xtv), (&mp, &vp))| {
                let mu_q = c0 * f64::from(x0v) + c1 * f64::from(xtv);
                gaussian_kl(mu_q, var_q, f64::from(mp), vp)
            })
            .sum::<f64>()
            / n
    };

    Ok(LossTerms {
        loss: simple_term + LAMBDA_VLB * vlb_term,
        simple_term,
        vlb_term,
    })
}

/// One ancestral reverse step: x_{t−1} = μ(x_t, ε̂) + √Σ_θ(ν)·noise.
///
/// Noise is ignored at t = 1 (the final step is deterministic).
pub fn ddpm_step(
    x_t: &ArrayD<f32>,
    t: usize,
    prediction: &NoisePrediction,
    noise: &ArrayD<f32>,
    sched: &NoiseSchedule,
) -> CoreResult<ArrayD<f32>> {
    check_t(t, sched)?;
    check_same_shape(x_t, &prediction.epsilon, "ddpm_step x_t vs prediction")?;
    check_same_shape(x_t, noise, "ddpm_step x_t vs noise")?;
    let (mut mean, _) = posterior_mean_variance(x_t, &prediction.epsilon, t, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let var = model_variance_floored(&prediction.nu, t, sched)?;
    ndarray::Zip::from(&mut mean)
        .and(&var)
        .and(noise)
        .for_each(|m, &v, &z| {
            *m = (f64::from(*m) + v.sqrt() * f64::from(z)) as f32;
        });
    Ok(mean)
}

/// Uniformly strided timestep subsequence for DDIM, descending, including the
/// final step T and terminating at step 1.
pub fn ddim_timesteps(num_steps: usize, num_inference_steps: usize) -> CoreResult<Vec<usize>> {
    if num_inference_steps < 1 || num_inference_steps > num_steps {
        return Err(CoreError::InvalidRange(format!(
            "num_inference_steps {} outside [1, {}]",
            num_inference_steps, num_steps
        )));
    }
    if num_inference_steps == 1 {
        return Ok(vec![num_steps]);
    }
    let k = num_inference_steps;
    let mut ts: Vec<usize> = (0..k)
        .map(|i| 1 + ((i as f64) * ((num_steps - 1) as f64) / ((k - 1) as f64)).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Deterministic DDIM sampling over a strided timestep subsequence.
///
/// At each selected step the predicted x0 is clamped to [−1, 1] and the chain
/// moves to the previous selected step with the same predicted noise:
/// x_{t'} = √ᾱ_{t'}·x̂0 + √(1−ᾱ_{t'})·ε̂. Returns the final x̂0.
pub fn ddim_sample_loop<F>(
    mut denoise_fn: F,
    sched: &NoiseSchedule,
    num_inference_steps: usize,
    x_big_t: ArrayD<f32>,
) -> CoreResult<ArrayD<f32>>
where
    F: FnMut(&ArrayD<f32>, usize) -> CoreResult<NoisePrediction>,
{
    let ts = ddim_timesteps(sched.num_steps(), num_inference_steps)?;
    let mut x = x_big_t;
    let mut x0_hat = ArrayD::zeros(x.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        let pred = denoise_fn(&x, t)?;
        check_same_shape(&x, &pred.epsilon, "ddim x vs prediction")?;
        let ab = sched.alpha_bar(t);
        let c_eps = (1.0 - ab).sqrt();
        let inv_sqrt_ab = 1.0 / ab.sqrt();
        x0_hat = x.clone();
        x0_hat.zip_mut_with(&pred.epsilon, |xv, &e| {
            let v = inv_sqrt_ab * (f64::from(*xv) - c_eps * f64::from(e));
            *xv = v.clamp(-1.0, 1.0) as f32;
        });
        if let Some(&t_prev) = ts.get(i + 1) {
            let ab_prev = sched.alpha_bar(t_prev);
            let c0 = ab_prev.sqrt();
            let c1 = (1.0 - ab_prev).sqrt();
            x = x0_hat.clone();
            x.zip_mut_with(&pred.epsilon, |xv, &e| {
                *xv = (c0 * f64::from(*xv) + c1 * f64::from(e)) as f32;
            });
        }
    }
    Ok(x0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use ndarray::arr1;

    fn sched4() -> NoiseSchedule {
        make_linear_schedule(4, 0.1, 0.4).unwrap()
    }

    fn scalar(v: f32) -> ArrayD<f32> {
        arr1(&[v]).into_dyn()
    }

    #[test]
    fn q_sample_zero_noise_scales_signal() {
        let s = sched4();
        let x0 = scalar(0.5);
        let out = q_sample(&x0, 2, &scalar(0.0), &s).unwrap();
        assert!((f64::from(out[[0]]) - 0.72f64.sqrt() * 0.5).abs() < 1e-7);
    }

    #[test]
    fn q_sample_zero_signal_scales_noise() {
        let s = sched4();
        let out = q_sample(&scalar(0.0), 3, &scalar(1.0), &s).unwrap();
        assert!((f64::from(out[[0]]) - (1.0f64 - 0.504).sqrt()).abs() < 1e-7);
    }

    #[test]
    fn q_sample_matches_hand_oracle() {
        // ᾱ = 0.64: 0.8·1.0 + 0.6·0.5 = 1.1
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let out = q_sample(&scalar(1.0), 1, &scalar(0.5), &s).unwrap();
        assert!((f64::from(out[[0]]) - 1.1).abs() < 1e-7);
    }

    #[test]
    fn q_sample_rejects_bad_shapes_and_steps() {
        let s = sched4();
        let x0 = scalar(0.0);
        let e2 = arr1(&[0.0f32, 1.0]).into_dyn();
        assert!(matches!(
            q_sample(&x0, 2, &e2, &s),
            Err(CoreError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            q_sample(&x0, 0, &x0, &s),
            Err(CoreError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            q_sample(&x0, 5, &x0, &s),
            Err(CoreError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn posterior_mean_zero_eps_rescales() {
        let s = sched4();
        let (mean, _) = posterior_mean_variance(&scalar(1.0), &scalar(0.0), 2, &s).unwrap();
        assert!((f64::from(mean[[0]]) - 1.0 / 0.8f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn posterior_variance_zero_at_first_step() {
        let s = sched4();
        let (_, var) = posterior_mean_variance(&scalar(1.0), &scalar(1.0), 1, &s).unwrap();
        assert_eq!(var, 0.0);
    }

    #[test]
    fn posterior_mean_matches_hand_oracle() {
        // β = [0.2, 0.1] gives α_2 = 0.9, ᾱ_2 = 0.72. With x_t=1, ε̂=1:
        // (1 − 0.1/√0.28)/√0.9 ≈ 0.854891
        let s = NoiseSchedule::from_betas(vec![0.2, 0.1]).unwrap();
        let (mean, var) = posterior_mean_variance(&scalar(1.0), &scalar(1.0), 2, &s).unwrap();
        let expect = (1.0 - 0.1 / 0.28f64.sqrt()) / 0.9f64.sqrt();
        assert!((expect - 0.8549).abs() < 1e-4);
        assert!((f64::from(mean[[0]]) - expect).abs() < 1e-6);
        assert!((var - (1.0 - 0.8) / (1.0 - 0.72) * 0.1).abs() < 1e-15);
    }

    #[test]
    fn model_variance_endpoints_are_exact() {
        let s = sched4();
        for t in 2..=4 {
            let v1 = model_variance(&scalar(1.0), t, &s).unwrap();
            let v0 = model_variance(&scalar(0.0), t, &s).unwrap();
            assert!((v1[[0]] - s.beta(t)).abs() < 1e-12);
            assert!((v0[[0]] - s.posterior_beta(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn model_variance_geometric_mean_oracle() {
        // ν=0.5, β=0.04, β̃=0.01 → √(0.04·0.01) = 0.02
        let nu = scalar(0.5);
        let out = model_variance_unchecked(&nu, 0.04, 0.01);
        assert!((out[[0]] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn model_variance_strict_errors_at_t1() {
        let s = sched4();
        assert!(matches!(
            model_variance(&scalar(0.5), 1, &s),
            Err(CoreError::VarianceFloorRequired)
        ));
        // Floored policy substitutes β̃_2.
        let v = model_variance_floored(&scalar(0.0), 1, &s).unwrap();
        assert!((v[[0]] - s.posterior_beta(2)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_matches_closed_form_oracle() {
        // μ_q=0, σ_q²=0.01, μ_p=0.1, σ_p²=0.02 → ½(ln2 + 0.5 + 0.5 − 1) = ½ln2
        let kl = gaussian_kl(0.0, 0.01, 0.1, 0.02);
        assert!((kl - 0.5 * 2.0f64.ln()).abs() < 1e-12);
        assert!((kl - 0.3466).abs() < 1e-4);
        assert_eq!(gaussian_kl(0.3, 0.05, 0.3, 0.05), 0.0);
    }

    #[test]
    fn hybrid_loss_zero_for_perfect_prediction() {
        let s = sched4();
        let x0 = scalar(0.25);
        let eps = scalar(0.6);
        let pred = NoisePrediction::new(eps.clone(), scalar(0.0)).unwrap();
        let terms = hybrid_loss(&x0, &eps, 3, &pred, &s).unwrap();
        assert_eq!(terms.simple_term, 0.0);
        // Model mean equals true posterior mean and ν=0 gives Σ=β̃ → KL ≈ 0.
        assert!(terms.vlb_term.abs() < 1e-9, "vlb = {}", terms.vlb_term);
    }

    #[test]
    fn hybrid_loss_terms_nonnegative() {
        let s = sched4();
        let x0 = scalar(0.25);
        let eps = scalar(-0.6);
        let pred = NoisePrediction::new(scalar(0.1), scalar(0.7)).unwrap();
        for t in 1..=4 {
            let terms = hybrid_loss(&x0, &eps, t, &pred, &s).unwrap();
            assert!(terms.simple_term >= 0.0);
            assert!(terms.vlb_term >= 0.0, "t={} vlb={}", t, terms.vlb_term);
            assert!((terms.loss - terms.simple_term - LAMBDA_VLB * terms.vlb_term).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_step_final_step_is_mean_only() {
        let s = sched4();
        let x = scalar(0.8);
        let pred = NoisePrediction::new(scalar(0.3), scalar(0.5)).unwrap();
        let out = ddpm_step(&x, 1, &pred, &scalar(123.0), &s).unwrap();
        let (mean, _) = posterior_mean_variance(&x, &pred.epsilon, 1, &s).unwrap();
        assert_eq!(out[[0]], mean[[0]]);
    }

    #[test]
    fn ddpm_step_composes_mean_and_variance_oracles() {
        // β = [0.2, 0.1] at t=2: the 0.854891 posterior-mean hand value plus
        // √Σ·noise with Σ the geometric mean of β_2 and β̃_2 at ν = 0.5.
        let s = NoiseSchedule::from_betas(vec![0.2, 0.1]).unwrap();
        let x = scalar(1.0);
        let pred = NoisePrediction::new(scalar(1.0), scalar(0.5)).unwrap();
        let noise = scalar(2.0);
        let out = ddpm_step(&x, 2, &pred, &noise, &s).unwrap();
        let mean = (1.0 - 0.1 / 0.28f64.sqrt()) / 0.9f64.sqrt();
        let sigma_sq = (s.beta(2) * s.posterior_beta(2)).sqrt();
        let expect = mean + sigma_sq.sqrt() * 2.0;
        assert!((f64::from(out[[0]]) - expect).abs() < 1e-6);
    }

    #[test]
    fn ddpm_step_noise_zero_nu_zero_reduces_to_posterior_mean() {
        let s = sched4();
        let x = scalar(0.4);
        let pred = NoisePrediction::new(scalar(-0.2), scalar(0.0)).unwrap();
        let out = ddpm_step(&x, 3, &pred, &scalar(0.0), &s).unwrap();
        let (mean, _) = posterior_mean_variance(&x, &pred.epsilon, 3, &s).unwrap();
        assert_eq!(out[[0]], mean[[0]]);
    }

    #[test]
    fn ddim_timesteps_cover_endpoints() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));

        assert_eq!(ddim_timesteps(4, 2).unwrap(), vec![4, 1]);
        assert_eq!(ddim_timesteps(7, 7).unwrap(), (1..=7).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_perfect_oracle_recovers_x0() {
        // Construct x_T from a fixed x0 and noise; a denoiser that returns the
        // exact noise drives every step back onto the x0 trajectory.
        let s = crate::schedule::default_linear_schedule(100).unwrap();
        let x0 = scalar(0.37);
        let eps = scalar(-0.85);
        let x_t = q_sample(&x0, 100, &eps, &s).unwrap();
        let out = ddim_sample_loop(
            |_x, _t| NoisePrediction::new(eps.clone(), scalar(0.5)),
            &s,
            10,
            x_t,
        )
        .unwrap();
        assert!((f64::from(out[[0]]) - 0.37).abs() < 1e-4, "got {}", out[[0]]);
    }

    #[test]
    fn ddim_is_deterministic() {
        let s = sched4();
        let x_t = scalar(0.9);
        let run = |x: ArrayD<f32>| {
            ddim_sample_loop(
                |xv, t| {
                    NoisePrediction::new(
                        xv.mapv(|v| 0.3 * v + t as f32 * 0.01),
                        xv.mapv(|_| 0.5),
                    )
                },
                &s,
                3,
                x,
            )
            .unwrap()
        };
        let a = run(x_t.clone());
        let b = run(x_t);
        assert_eq!(a[[0]].to_bits(), b[[0]].to_bits());
    }

    #[test]
    fn ddim_two_step_hand_trace() {
        // T=4 schedule, K=2 → timesteps [4, 1]; constant ε̂ = 0.2, x_T = 0.5.
        // Step t=4: x̂0 = clamp((0.5 − √(1−0.3024)·0.2)/√0.3024)
        // Move to t'=1: x = √0.9·x̂0 + √0.1·0.2
        // Step t=1: x̂0 = clamp((x − √0.1·0.2)/√0.9) — recovers the same x̂0.
        let s = sched4();
        let eps = 0.2f64;
        let x_big_t = 0.5f64;
        let x0_hat_4 = ((x_big_t - (1.0f64 - 0.3024).sqrt() * eps) / 0.3024f64.sqrt())
            .clamp(-1.0, 1.0);
        // Frozen from the hand trace above.
        assert!((x0_hat_4 - 0.6054730).abs() < 1e-6);
        let out = ddim_sample_loop(
            |_x, _t| NoisePrediction::new(scalar(0.2), scalar(0.5)),
            &s,
            2,
            scalar(0.5),
        )
        .unwrap();
        // The t=1 step inverts the move exactly (same ε̂), so the final x̂0
        // equals the t=4 prediction up to f32 rounding.
        assert!((f64::from(out[[0]]) - x0_hat_4).abs() < 3e-6, "got {}", out[[0]]);
    }

    #[test]
    fn ddim_clamps_predicted_x0() {
        let s = sched4();
        // Huge negative ε̂ forces the raw x̂0 far above 1; the clamp pins it.
        let out = ddim_sample_loop(
            |_x, _t| NoisePrediction::new(scalar(-50.0), scalar(0.5)),
            &s,
            1,
            scalar(0.0),
        )
        .unwrap();
        assert_eq!(out[[0]], 1.0);
    }
}
