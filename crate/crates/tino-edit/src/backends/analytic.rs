//! Closed-form Gaussian denoiser: the desk-scale stand-in for a trained
//! noise-prediction UNet.
//!
//! For a data prior x₀ ~ N(mu, σ²·I) corrupted by the forward diffusion, the
//! Bayes-optimal noise prediction has a closed form that is smooth in both
//! the noisy input and the timestep, which makes it ideal for exercising the
//! end-to-end gradient path. An importance-sampling Monte Carlo estimator of
//! the same posterior mean lives alongside as an independent check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::RngCore;

use crate::autodiff::{Graph, Tensor, Var};
use crate::backends::{BackendMetadata, ConditionEmbedding, DenoiserBackend};
use crate::diffusion::Schedule;
use crate::error::{Result, TinoError};
use crate::par;

/// Posterior-mean noise predictor for x₀ ~ N(mu, σ²·I).
pub struct GaussianAnalyticDenoiser {
    mean: Tensor,
    sigma: f64,
    schedule: Schedule,
    condition_dim: usize,
}

impl GaussianAnalyticDenoiser {
    pub fn new(mean: Tensor, sigma: f64, schedule: Schedule) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(TinoError::Domain(format!("sigma must be positive, got {sigma}")));
        }
        if mean.rank() != 3 {
            return Err(TinoError::ShapeMismatch(format!(
                "prior mean must be (channels, height, width), got {:?}",
                mean.shape()
            )));
        }
        Ok(GaussianAnalyticDenoiser {
            mean,
            sigma,
            schedule,
            condition_dim: 1,
        })
    }

    pub fn with_condition_dim(mut self, dim: usize) -> Self {
        self.condition_dim = dim;
        self
    }

    pub fn prior_mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl DenoiserBackend for GaussianAnalyticDenoiser {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            latent_shape: [
                self.mean.shape()[0],
                self.mean.shape()[1],
                self.mean.shape()[2],
            ],
            condition_dim: self.condition_dim,
        }
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// predict(x_t, t) = (x_t − √α·E[x₀|x_t]) / √(1−α) with
    /// E[x₀|x_t] = mu + √α·σ²/(α·σ² + 1 − α) · (x_t − √α·mu).
    fn predict_var(
        &self,
        graph: &mut Graph,
        latent: Var,
        t: Var,
        _condition: &ConditionEmbedding,
    ) -> Result<Var> {
        if graph.value(latent).shape() != self.mean.shape() {
            return Err(TinoError::ShapeMismatch(format!(
                "denoiser prior {:?} vs latent {:?}",
                self.mean.shape(),
                graph.value(latent).shape()
            )));
        }
        let sigma_sq = self.sigma * self.sigma;
        let alpha = self.schedule.alpha_var(graph, t)?;
        let sqrt_alpha = graph.sqrt(alpha);
        let neg_alpha = graph.neg(alpha);
        let one_minus = graph.offset(neg_alpha, 1.0);
        let sqrt_one_minus = graph.sqrt(one_minus);

        // gain = sqrt(alpha) * sigma^2 / (alpha * sigma^2 + 1 - alpha)
        let scaled_var = graph.scale(alpha, sigma_sq);
        let denom = graph.add(scaled_var, one_minus)?;
        let numer = graph.scale(sqrt_alpha, sigma_sq);
        let gain = graph.div(numer, denom)?;

        let mean = graph.input(self.mean.clone());
        let scaled_mean = graph.mul(sqrt_alpha, mean)?;
        let centered = graph.sub(latent, scaled_mean)?;
        let correction = graph.mul(gain, centered)?;
        let posterior_mean = graph.add(mean, correction)?;

        let reconstructed = graph.mul(sqrt_alpha, posterior_mean)?;
        let residual = graph.sub(latent, reconstructed)?;
        graph.div(residual, sqrt_one_minus)
    }
}

/// Monte Carlo estimate of E[ε | x_t] with a standard error per entry.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Tensor,
    pub standard_error: Tensor,
    pub samples: usize,
}

/// Self-normalized importance-sampling estimate of the posterior-mean noise
/// E[ε | x_t] under x₀ ~ N(mu, σ²·I) and x_t = √α·x₀ + √(1−α)·ε.
///
/// Draws x₀ from the prior, weights by the likelihood of the observed x_t,
/// and averages the implied ε. The estimate is split into batches whose
/// spread yields the standard error, so it is statistically independent of
/// the closed form it is used to check. Deterministic for a fixed seed
/// regardless of thread count.
pub fn posterior_noise_mc(
    mean: &Tensor,
    sigma: f64,
    alpha: f64,
    noisy: &Tensor,
    samples: usize,
    batches: usize,
    seed: u64,
) -> Result<McEstimate> {
    if mean.shape() != noisy.shape() {
        return Err(TinoError::ShapeMismatch(format!(
            "prior {:?} vs observation {:?}",
            mean.shape(),
            noisy.shape()
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(TinoError::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    if batches < 2 || samples < batches {
        return Err(TinoError::Config(
            "need >= 2 batches and at least one sample per batch".into(),
        ));
    }
    let n = mean.numel();
    let per_batch = samples / batches;
    let sqrt_alpha = alpha.sqrt();
    let sqrt_one_minus = (1.0 - alpha).sqrt();
    let inv_two_var = 1.0 / (2.0 * (1.0 - alpha));

    let batch_means: Vec<Vec<f64>> = par::map(&(0..batches).collect::<Vec<_>>(), |&batch| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut log_weights = Vec::with_capacity(per_batch);
        let mut noises = Vec::with_capacity(per_batch);
        for _ in 0..per_batch {
            let mut log_w = 0.0;
            let mut eps = vec![0.0; n];
            for i in 0..n {
                let draw = mean.data()[i] + sigma * standard_normal(&mut rng);
                let implied = (noisy.data()[i] - sqrt_alpha * draw) / sqrt_one_minus;
                eps[i] = implied;
                let residual = noisy.data()[i] - sqrt_alpha * draw;
                log_w -= residual * residual * inv_two_var;
            }
            log_weights.push(log_w);
            noises.push(eps);
        }
        let max_log = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weight_sum = 0.0;
        let mut weighted = vec![0.0; n];
        for (log_w, eps) in log_weights.iter().zip(&noises) {
            let w = (log_w - max_log).exp();
            weight_sum += w;
            for (slot, e) in weighted.iter_mut().zip(eps) {
                *slot += w * e;
            }
        }
        weighted.iter().map(|v| v / weight_sum).collect()
    });

    let mut grand = vec![0.0; n];
    for batch in &batch_means {
        for (slot, v) in grand.iter_mut().zip(batch) {
            *slot += v;
        }
    }
    for slot in grand.iter_mut() {
        *slot /= batches as f64;
    }
    let mut se = vec![0.0; n];
    for batch in &batch_means {
        for ((slot, v), g) in se.iter_mut().zip(batch).zip(&grand) {
            *slot += (v - g) * (v - g);
        }
    }
    for slot in se.iter_mut() {
        *slot = (*slot / (batches as f64 - 1.0) / batches as f64).sqrt();
    }
    Ok(McEstimate {
        mean: Tensor::new(mean.shape().to_vec(), grand)?,
        standard_error: Tensor::new(mean.shape().to_vec(), se)?,
        samples: per_batch * batches,
    })
}

/// Box-Muller standard normal draw.
pub(crate) fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen_range(0.0..1.0);
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_schedule() -> Schedule {
        Schedule::cosine()
    }

    fn small_mean() -> Tensor {
        Tensor::new(vec![1, 2, 2], vec![0.4, -0.2, 0.1, 0.7]).unwrap()
    }

    #[test]
    fn zero_noise_at_scaled_prior_mean() {
        let schedule = test_schedule();
        let denoiser = GaussianAnalyticDenoiser::new(small_mean(), 0.8, schedule.clone()).unwrap();
        let t = 0.5;
        let alpha = schedule.alpha(t).unwrap();
        let scaled: Vec<f64> = small_mean().data().iter().map(|v| alpha.sqrt() * v).collect();
        let latent = crate::diffusion::LatentImage::new(Tensor::new(vec![1, 2, 2], scaled).unwrap()).unwrap();
        let pred = denoiser
            .predict(&latent, t, &ConditionEmbedding::new(vec![0.0]))
            .unwrap();
        for v in pred.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_prior_limit() {
        // sigma -> 0 collapses the posterior to the prior mean
        let schedule = test_schedule();
        let sigma = 1e-9;
        let denoiser = GaussianAnalyticDenoiser::new(small_mean(), sigma, schedule.clone()).unwrap();
        let t = 0.35;
        let alpha = schedule.alpha(t).unwrap();
        let observed = Tensor::new(vec![1, 2, 2], vec![0.9, 0.1, -0.4, 0.3]).unwrap();
        let latent = crate::diffusion::LatentImage::new(observed.clone()).unwrap();
        let pred = denoiser
            .predict(&latent, t, &ConditionEmbedding::new(vec![0.0]))
            .unwrap();
        for ((p, x), m) in pred.data().iter().zip(observed.data()).zip(small_mean().data()) {
            let expect = (x - alpha.sqrt() * m) / (1.0 - alpha).sqrt();
            assert!((p - expect).abs() < 1e-6, "{p} vs {expect}");
        }
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let schedule = test_schedule();
        let denoiser = GaussianAnalyticDenoiser::new(small_mean(), 0.7, schedule).unwrap();
        let condition = ConditionEmbedding::new(vec![0.0]);
        let base = vec![0.3, -0.5, 0.8, 0.05];
        let t0 = 0.42;

        let eval = |latent_data: &[f64], t: f64| -> f64 {
            let mut graph = Graph::new();
            let latent = graph.input(Tensor::new(vec![1, 2, 2], latent_data.to_vec()).unwrap());
            let tv = graph.scalar(t);
            let pred = denoiser.predict_var(&mut graph, latent, tv, &condition).unwrap();
            let sq = graph.square(pred);
            let loss = graph.sum(sq);
            graph.value(loss).item()
        };

        let mut graph = Graph::new();
        let latent = graph.input(Tensor::new(vec![1, 2, 2], base.clone()).unwrap());
        let tv = graph.scalar(t0);
        let pred = denoiser.predict_var(&mut graph, latent, tv, &condition).unwrap();
        let sq = graph.square(pred);
        let loss = graph.sum(sq);
        let grads = graph.backward(loss).unwrap();

        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (eval(&plus, t0) - eval(&minus, t0)) / (2.0 * h);
            let ad = grads.get(latent).data()[i];
            assert!(
                (ad - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                "latent[{i}]: {ad} vs {fd}"
            );
        }
        let fd_t = (eval(&base, t0 + h) - eval(&base, t0 - h)) / (2.0 * h);
        let ad_t = grads.get(tv).item();
        assert!((ad_t - fd_t).abs() <= 1e-4 * (1.0 + fd_t.abs()), "t: {ad_t} vs {fd_t}");
    }

    #[test]
    fn mc_estimator_matches_closed_form_on_a_small_case() {
        let schedule = test_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mean = small_mean();
        let sigma = 0.9;
        let t = 0.5;
        let alpha = schedule.alpha(t).unwrap();
        let observed = Tensor::new(
            vec![1, 2, 2],
            (0..4)
                .map(|i| {
                    alpha.sqrt() * (mean.data()[i] + sigma * standard_normal(&mut rng))
                        + (1.0 - alpha).sqrt() * standard_normal(&mut rng)
                })
                .collect(),
        )
        .unwrap();

        let denoiser = GaussianAnalyticDenoiser::new(mean.clone(), sigma, schedule).unwrap();
        let latent = crate::diffusion::LatentImage::new(observed.clone()).unwrap();
        let closed = denoiser
            .predict(&latent, t, &ConditionEmbedding::new(vec![0.0]))
            .unwrap();
        let mc = posterior_noise_mc(&mean, sigma, alpha, &observed, 200_000, 50, 7).unwrap();
        for i in 0..4 {
            let diff = (closed.data()[i] - mc.mean.data()[i]).abs();
            let bound = 4.0 * mc.standard_error.data()[i].max(1e-6);
            assert!(diff <= bound, "entry {i}: diff {diff} vs bound {bound}");
        }
    }
}
