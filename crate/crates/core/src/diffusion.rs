//! Conditional denoising diffusion over event-cloud coordinates.
//!
//! Steps are 1-based: `e_0` is clean data and `e_T` is (nearly) pure noise.
//! Polarity is not diffused. The noisy cloud carries a random ±1 polarity
//! feature and the network predicts the clean polarity as a logit.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{ConditionCache, DenoiserOutput, Edn};
use crate::error::{Error, Result};
use crate::event::{EventCloud, Point3};
use crate::nn::{Grads, ParamStore, Tape, Tensor};

/// Weight of the polarity cross-entropy relative to the noise loss.
pub const POLARITY_WEIGHT: f64 = 0.1;

/// Fast-sampler step count used when none is configured.
pub const DEFAULT_FAST_STEPS: usize = 27;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Linear `β` schedule over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "invalid schedule: {steps} steps, beta {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma2 = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// `ᾱ` at a fractional step, interpolating `ln ᾱ` linearly between
    /// integer steps.
    pub fn alpha_bar_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.steps() as f64);
        let lo = s.floor() as usize;
        if lo >= self.steps() {
            return self.alpha_bar(self.steps());
        }
        let f = s - lo as f64;
        let a = self.alpha_bar(lo).ln();
        let b = self.alpha_bar(lo + 1).ln();
        (a + f * (b - a)).exp()
    }

    /// Half log signal-to-noise ratio at a fractional step.
    fn lambda(&self, s: f64) -> f64 {
        let ab = self.alpha_bar_at(s);
        0.5 * (ab.ln() - (-ab).ln_1p())
    }

    /// Fractional step in `[1, T]` whose `λ` equals `target`.
    fn step_at_lambda(&self, target: f64) -> f64 {
        let (mut lo, mut hi) = (1.0, self.steps() as f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            // λ decreases with the step.
            if self.lambda(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Forward noising `√ᾱ_t·e0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(e0: &[Point3], t: usize, eps: &[Point3], schedule: &DiffusionSchedule) -> Result<Vec<Point3>> {
    schedule.check(t)?;
    if e0.len() != eps.len() {
        return Err(Error::invalid("q_sample: data and noise differ in length"));
    }
    let a = schedule.alpha_bar(t).sqrt();
    let s = (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(e0
        .iter()
        .zip(eps)
        .map(|(x, z)| [a * x[0] + s * z[0], a * x[1] + s * z[1], a * x[2] + s * z[2]])
        .collect())
}

pub fn gaussian_points(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

pub fn random_polarity(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Anything that predicts coordinate noise for a noisy cloud at a
/// (possibly fractional) step.
pub trait NoiseModel {
    fn predict(&mut self, e_t: &[Point3], polarity: &[f64], t: f64) -> Result<DenoiserOutput>;
}

impl<F> NoiseModel for F
where
    F: FnMut(&[Point3], &[f64], f64) -> Result<DenoiserOutput>,
{
    fn predict(&mut self, e_t: &[Point3], polarity: &[f64], t: f64) -> Result<DenoiserOutput> {
        self(e_t, polarity, t)
    }
}

/// An [`Edn`] bound to its parameters and one encoded condition, counting
/// its evaluations.
pub struct ConditionedEdn<'a> {
    model: &'a Edn,
    params: &'a ParamStore,
    cond: ConditionCache,
    pub evaluations: usize,
}

impl<'a> ConditionedEdn<'a> {
    pub fn new(model: &'a Edn, params: &'a ParamStore, c: &EventCloud) -> Result<Self> {
        Ok(Self {
            model,
            params,
            cond: model.condition_cache(params, c)?,
            evaluations: 0,
        })
    }
}

impl NoiseModel for ConditionedEdn<'_> {
    fn predict(&mut self, e_t: &[Point3], polarity: &[f64], t: f64) -> Result<DenoiserOutput> {
        self.evaluations += 1;
        self.model.predict(self.params, e_t, polarity, &self.cond, t)
    }
}

/// Reverse mean `(e_t − β_t/√(1−ᾱ_t)·ε) / √α_t`, plus `σ_t·z`
/// when `z` is given.
pub fn reverse_step(
    e_t: &[Point3],
    eps_pred: &[Point3],
    t: usize,
    schedule: &DiffusionSchedule,
    z: Option<&[Point3]>,
) -> Result<Vec<Point3>> {
    schedule.check(t)?;
    if e_t.len() != eps_pred.len() || z.is_some_and(|z| z.len() != e_t.len()) {
        return Err(Error::invalid("reverse step: point counts differ"));
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let sigma = schedule.sigma2(t).sqrt();
    Ok(e_t
        .iter()
        .zip(eps_pred)
        .enumerate()
        .map(|(i, (x, e))| {
            let mut out = [0.0; 3];
            for a in 0..3 {
                out[a] = inv * (x[a] - coef * e[a]);
                if let Some(z) = z {
                    out[a] += sigma * z[i][a];
                }
            }
            out
        })
        .collect())
}

/// One ancestral step `e_t → e_{t−1}`. Fresh noise is added for `t > 1`
/// only. Also returns the polarity logits of this evaluation.
pub fn p_sample_step(
    model: &mut impl NoiseModel,
    e_t: &[Point3],
    polarity: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<Point3>, Vec<f64>)> {
    schedule.check(t)?;
    let out = model.predict(e_t, polarity, t as f64)?;
    let z = (t > 1).then(|| gaussian_points(e_t.len(), rng));
    let next = reverse_step(e_t, &out.noise_pred, t, schedule, z.as_deref())?;
    Ok((next, out.polarity_logit))
}

fn finish(coords: &[Point3], logits: &[f64]) -> Result<EventCloud> {
    EventCloud::from_clamped(coords, logits)
}

/// Full `T`-step ancestral sampling of `n_out` points.
pub fn ancestral_sample(
    model: &mut impl NoiseModel,
    n_out: usize,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<EventCloud> {
    if n_out == 0 {
        return Err(Error::invalid("cannot sample an empty cloud"));
    }
    let polarity = random_polarity(n_out, rng);
    let mut x = gaussian_points(n_out, rng);
    let mut logits = Vec::new();
    for t in (1..=schedule.steps()).rev() {
        let (next, l) = p_sample_step(model, &x, &polarity, t, schedule, rng)?;
        x = next;
        logits = l;
    }
    finish(&x, &logits)
}

/// Evaluations made by [`fast_sample`] for a given step count.
pub fn fast_sample_evaluations(steps: usize) -> usize {
    steps
}

/// Few-step stochastic sampler.
///
/// A second-order multistep exponential integrator for the reverse SDE in
/// data-prediction form (SDE-DPM-Solver++(2M)). The network is evaluated
/// once per grid point; the grid runs from `T` to step 1 uniformly in
/// log-SNR, and the prediction at step 1 is returned as clean data. Each
/// interval `s → t` with `h = λ_t − λ_s` updates
///
/// `x_t = (σ_t/σ_s) e^{−h} x_s + α_t (1 − e^{−2h}) D + σ_t √(1 − e^{−2h}) z`
///
/// where `D` extrapolates the current and previous clean-data predictions
/// linearly in `λ` (the first interval uses the current prediction alone).
pub fn fast_sample(
    model: &mut impl NoiseModel,
    n_out: usize,
    schedule: &DiffusionSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<EventCloud> {
    if steps == 0 || steps > schedule.steps() {
        return Err(Error::invalid(format!(
            "fast sampler steps must be in 1..={}, got {steps}",
            schedule.steps()
        )));
    }
    if n_out == 0 {
        return Err(Error::invalid("cannot sample an empty cloud"));
    }
    let polarity = random_polarity(n_out, rng);
    let mut x = gaussian_points(n_out, rng);

    let big_t = schedule.steps() as f64;
    let l_hi = schedule.lambda(big_t);
    let l_lo = schedule.lambda(1.0);
    let grid: Vec<f64> = (0..steps)
        .map(|i| {
            if i == 0 {
                big_t
            } else if i == steps - 1 {
                1.0
            } else {
                schedule.step_at_lambda(l_hi + (l_lo - l_hi) * i as f64 / (steps - 1) as f64)
            }
        })
        .collect();
    let alpha = |s: f64| schedule.alpha_bar_at(s).sqrt();
    let sigma = |s: f64| (1.0 - schedule.alpha_bar_at(s)).sqrt();

    let mut prev: Option<(Vec<Point3>, f64)> = None;
    for (i, &s) in grid.iter().enumerate() {
        let out = model.predict(&x, &polarity, s)?;
        let (a_s, s_s) = (alpha(s), sigma(s));
        let x0: Vec<Point3> = x
            .iter()
            .zip(&out.noise_pred)
            .map(|(p, e)| [0, 1, 2].map(|k| (p[k] - s_s * e[k]) / a_s))
            .collect();
        let Some(&t) = grid.get(i + 1) else {
            return finish(&x0, &out.polarity_logit);
        };
        let h = schedule.lambda(t) - schedule.lambda(s);
        let decay = (-h).exp();
        let c_x = sigma(t) / s_s * decay;
        let c_d = alpha(t) * -(-2.0 * h).exp_m1();
        let c_z = sigma(t) * (-(-2.0 * h).exp_m1()).sqrt();
        let slope = prev.as_ref().map_or(0.0, |(_, h_prev)| 0.5 * h / h_prev);
        let z = gaussian_points(n_out, rng);
        for (j, p) in x.iter_mut().enumerate() {
            for k in 0..3 {
                let mut d = x0[j][k];
                if let Some((p0, _)) = &prev {
                    d += slope * (x0[j][k] - p0[j][k]);
                }
                p[k] = c_x * p[k] + c_d * d + c_z * z[j][k];
            }
        }
        prev = Some((x0, h));
    }
    unreachable!("the grid ends with a clean-data prediction")
}

/// The training loss at a fixed draw: mean squared noise error plus
/// [`POLARITY_WEIGHT`] times the polarity cross-entropy, with gradients.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_at(
    model: &Edn,
    params: &ParamStore,
    e0: &EventCloud,
    c: &EventCloud,
    schedule: &DiffusionSchedule,
    t: usize,
    eps: &[Point3],
    noisy_polarity: &[f64],
) -> Result<(f64, Grads)> {
    let e_t = q_sample(e0.coords(), t, eps, schedule)?;
    let mut tape = Tape::new(params);
    let cond = model.encode_condition(&mut tape, c)?;
    let (noise, logit) = model.forward(&mut tape, &e_t, noisy_polarity, &cond, t as f64)?;
    let coord = tape.mse(noise, Tensor::from_rows(eps))?;
    let labels = e0.polarity().iter().map(|&p| if p > 0.0 { 1.0 } else { 0.0 }).collect();
    let pol = tape.bce_with_logits(logit, labels)?;
    let loss = tape.combine(coord, pol, 1.0, POLARITY_WEIGHT)?;
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss).param_grads(&tape);
    Ok((value, grads))
}

/// Draws `t`, the noise and the noisy polarity feature, then evaluates
/// [`training_loss_at`].
pub fn training_loss(
    model: &Edn,
    params: &ParamStore,
    e0: &EventCloud,
    c: &EventCloud,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<(f64, Grads)> {
    let t = rng.random_range(1..=schedule.steps());
    let eps = gaussian_points(e0.len(), rng);
    let pol = random_polarity(e0.len(), rng);
    training_loss_at(model, params, e0, c, schedule, t, &eps, &pol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NetworkConfig;
    use crate::geometry::CuboidSpec;
    use crate::nn::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> DiffusionSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        let oracle: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - oracle).abs() <= 1e-15 * oracle.max(1e-300));
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert_eq!(make_schedule(1, 0.5, 0.5).unwrap().alpha_bar(1), 0.5);
    }

    #[test]
    fn fractional_alpha_bar_matches_integer_steps() {
        let s = default_schedule();
        for t in [0usize, 1, 17, 999, 1000] {
            assert!((s.alpha_bar_at(t as f64) - s.alpha_bar(t)).abs() < 1e-15);
        }
        let mid = s.alpha_bar_at(10.5);
        assert!(mid < s.alpha_bar(10) && mid > s.alpha_bar(11));
        let target = s.lambda(123.25);
        assert!((s.step_at_lambda(target) - 123.25).abs() < 1e-9);
    }

    #[test]
    fn q_sample_examples() {
        let s = default_schedule();
        let e0 = vec![[0.5, -0.25, 1.0]];
        let out = q_sample(&e0, 10, &[[0.0; 3]], &s).unwrap();
        let a = s.alpha_bar(10).sqrt();
        assert_eq!(out[0], [a * 0.5, a * -0.25, a * 1.0]);
        let quarter = make_schedule(1, 0.75, 0.75).unwrap();
        let out = q_sample(&[[1.0, 2.0, 3.0]], 1, &[[1.0, 0.0, -1.0]], &quarter).unwrap();
        let r = 0.75f64.sqrt();
        assert!((out[0][0] - (0.5 + r)).abs() < 1e-15);
        assert!((out[0][1] - 1.0).abs() < 1e-15);
        assert!((out[0][2] - (1.5 - r)).abs() < 1e-15);
        assert!(q_sample(&e0, 0, &[[0.0; 3]], &s).is_err());
        assert!(q_sample(&e0, 1001, &[[0.0; 3]], &s).is_err());
    }

    #[test]
    fn reverse_step_inverts_a_single_step() {
        // With the exact noise at t = 1, the reverse mean recovers e0 scaled
        // by √ᾱ_0 = 1 (σ_1 is zero).
        let s = default_schedule();
        let e0 = vec![[0.3, -0.7, 0.1]];
        let eps = vec![[1.2, 0.4, -0.9]];
        let e1 = q_sample(&e0, 1, &eps, &s).unwrap();
        let back = reverse_step(&e1, &eps, 1, &s, None).unwrap();
        for a in 0..3 {
            assert!((back[0][a] - e0[0][a]).abs() < 1e-12);
        }
        assert_eq!(s.sigma2(1), 0.0);
    }

    fn oracle_model(e0: Vec<Point3>, s: DiffusionSchedule) -> impl FnMut(&[Point3], &[f64], f64) -> Result<DenoiserOutput> {
        // Predicts the noise that maps e0 to the given state exactly.
        move |x: &[Point3], _p: &[f64], t: f64| {
            let ab = s.alpha_bar_at(t);
            let noise = x
                .iter()
                .zip(&e0)
                .map(|(x, e)| {
                    let mut n = [0.0; 3];
                    for a in 0..3 {
                        n[a] = (x[a] - ab.sqrt() * e[a]) / (1.0 - ab).sqrt();
                    }
                    n
                })
                .collect();
            Ok(DenoiserOutput {
                noise_pred: noise,
                polarity_logit: vec![1.0; x.len()],
            })
        }
    }

    #[test]
    fn samplers_recover_data_under_an_oracle() {
        let s = default_schedule();
        let e0 = vec![[0.2, -0.4, 0.6], [-0.9, 0.1, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fast = fast_sample(&mut oracle_model(e0.clone(), s.clone()), 2, &s, 27, &mut rng).unwrap();
        let anc = ancestral_sample(&mut oracle_model(e0.clone(), s.clone()), 2, &s, &mut rng).unwrap();
        for (cloud, tol) in [(fast, 1e-9), (anc, 1e-9)] {
            for (p, q) in cloud.coords().iter().zip(&e0) {
                for a in 0..3 {
                    assert!((p[a] - q[a]).abs() < tol, "{p:?} vs {q:?}");
                }
            }
            assert_eq!(cloud.polarity(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn fast_sampler_matches_a_gaussian_target() {
        // For e0 ~ N(0, v) per coordinate the optimal noise prediction is
        // σ x / (ᾱ v + 1 − ᾱ), so samples should have variance v.
        let s = default_schedule();
        let v = 0.09;
        let mut model = |x: &[Point3], _: &[f64], t: f64| {
            let ab = s.alpha_bar_at(t);
            let k = (1.0 - ab).sqrt() / (ab * v + 1.0 - ab);
            Ok(DenoiserOutput {
                noise_pred: x.iter().map(|p| p.map(|c| k * c)).collect(),
                polarity_logit: vec![0.0; x.len()],
            })
        };
        let n = 20_000;
        let out = fast_sample(&mut model, n, &s, 27, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for a in 0..3 {
            let mean = out.coords().iter().map(|p| p[a]).sum::<f64>() / n as f64;
            let var = out.coords().iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.01, "axis {a} mean {mean}");
            assert!((var / v - 1.0).abs() < 0.05, "axis {a} var {var}");
        }
    }

    #[test]
    fn evaluation_counts() {
        let s = make_schedule(50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let calls = std::cell::Cell::new(0);
        let mut model = |x: &[Point3], _: &[f64], _: f64| {
            calls.set(calls.get() + 1);
            Ok(DenoiserOutput {
                noise_pred: vec![[0.0; 3]; x.len()],
                polarity_logit: vec![-1.0; x.len()],
            })
        };
        let out = ancestral_sample(&mut model, 3, &s, &mut rng).unwrap();
        assert_eq!(out.polarity(), &[-1.0; 3]);
        assert!(out.coords().iter().flatten().all(|v| v.abs() <= 1.0));
        assert_eq!(calls.replace(0), 50);
        fast_sample(&mut model, 3, &s, 27, &mut rng).unwrap();
        assert_eq!(calls.get(), fast_sample_evaluations(27));
        assert!(calls.replace(0) <= 54);
        fast_sample(&mut model, 3, &s, 1, &mut rng).unwrap();
        assert_eq!(calls.replace(0), 1);
        assert!(fast_sample(&mut model, 3, &s, 0, &mut rng).is_err());
        assert!(fast_sample(&mut model, 3, &s, 51, &mut rng).is_err());
        let one = make_schedule(1, 0.5, 0.5).unwrap();
        ancestral_sample(&mut model, 3, &one, &mut rng).unwrap();
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn fast_sampler_is_deterministic_given_seed() {
        let s = default_schedule();
        let mut model = |x: &[Point3], _: &[f64], t: f64| {
            Ok(DenoiserOutput {
                noise_pred: x.iter().map(|p| p.map(|v| 0.5 * v + 1e-4 * t)).collect(),
                polarity_logit: vec![0.0; x.len()],
            })
        };
        let a = fast_sample(&mut model, 8, &s, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = fast_sample(&mut model, 8, &s, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian_points(4, &mut r1);
        let _ = gaussian_points(4, &mut r2);
        let p = vec![1.0; 4];
        assert_eq!(
            p_sample_step(&mut model, &x, &p, 500, &s, &mut r1).unwrap(),
            p_sample_step(&mut model, &x, &p, 500, &s, &mut r2).unwrap()
        );
        let mut r3 = ChaCha8Rng::seed_from_u64(7);
        let d1 = p_sample_step(&mut model, &x, &p, 1, &s, &mut r3).unwrap();
        let d2 = p_sample_step(&mut model, &x, &p, 1, &s, &mut r3).unwrap();
        assert_eq!(d1, d2);
    }

    fn tiny_edn(rng: &mut impl Rng) -> (Edn, ParamStore) {
        let cfg = NetworkConfig {
            levels: 2,
            widths: vec![8, 16],
            sa_points: vec![8, 4],
            cond_sa_points: vec![4, 2],
            cuboids: vec![CuboidSpec::new(0.4, 2.0, 6).unwrap(), CuboidSpec::new(0.8, 2.0, 6).unwrap()],
            step_embed_dim: 8,
            use_ball_query: false,
        };
        let mut store = ParamStore::new();
        let edn = Edn::new(cfg, &mut store, rng).unwrap();
        (edn, store)
    }

    fn cloud(rng: &mut impl Rng, n: usize) -> EventCloud {
        let c = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        EventCloud::new(c, random_polarity(n, rng)).unwrap()
    }

    #[test]
    fn zero_predictor_loss_is_noise_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (edn, store) = tiny_edn(&mut rng);
        let s = default_schedule();
        let e0 = cloud(&mut rng, 16);
        let c = cloud(&mut rng, 8);
        let mut total = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let t = rng.random_range(1..=1000);
            let eps = gaussian_points(16, &mut rng);
            let pol = random_polarity(16, &mut rng);
            let energy = eps.iter().flatten().map(|v| v * v).sum::<f64>() / 48.0;
            let (loss, _) = training_loss_at(&edn, &store, &e0, &c, &s, t, &eps, &pol).unwrap();
            // The zero-initialized head predicts zero noise and logit 0.
            assert!((loss - energy - POLARITY_WEIGHT * 2f64.ln()).abs() < 1e-12);
            total += energy;
        }
        // Mean of χ²₁ over 9600 draws: standard error ≈ 0.014.
        assert!((total / trials as f64 - 1.0).abs() < 0.06);
    }

    #[test]
    fn training_loss_gradcheck_with_frozen_draw() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let (edn, mut store) = tiny_edn(&mut rng);
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).data.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
            }
            let s = default_schedule();
            let e0 = cloud(&mut rng, 16);
            let c = cloud(&mut rng, 8);
            let t = rng.random_range(1..=1000);
            let eps = gaussian_points(16, &mut rng);
            let pol = random_polarity(16, &mut rng);
            let (loss, g) = training_loss_at(&edn, &store, &e0, &c, &s, t, &eps, &pol).unwrap();
            assert!(loss >= 0.0);
            let err = check::param_grad_error(&store, &g, 24, 1e-6, |p| {
                training_loss_at(&edn, p, &e0, &c, &s, t, &eps, &pol).unwrap().0
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
