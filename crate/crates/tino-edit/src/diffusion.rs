//! Schedule, DDIM forward/reverse algebra, and the masked denoising
//! trajectory.
//!
//! All operations build onto an autodiff [`Graph`] so the whole unrolled
//! chain stays differentiable with respect to the noise tensor and every
//! per-step timestep. The noise level is always evaluated as a function of
//! the timestep; it is never a free variable of its own.

use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::backends::{ConditionEmbedding, DenoiserBackend};
use crate::error::{Result, TinoError};
use crate::masking::{Mask, MaskResolution};

pub const DEFAULT_ALPHA_MIN: f64 = 1e-5;
pub const DEFAULT_ALPHA_MAX: f64 = 1.0 - 1e-6;
pub const DEFAULT_T_MIN: f64 = 1e-4;
pub const DEFAULT_T_MAX: f64 = 0.999;
const DEFAULT_TRAIN_STEPS: usize = 1000;

/// How the noise level varies with the continuous timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Closed-form cos²(πt/2), smooth everywhere.
    Cosine,
    /// Piecewise-linear interpolation of a trained discrete noise-level
    /// table; queries exactly at a knot take the right-hand slope.
    InterpolatedTable,
}

/// Differentiable noise-level function t ∈ [0, 1] → α ∈ (0, 1], monotone
/// non-increasing, clamped away from 0 and (by default) away from 1 so the
/// reverse step and the noise predictors can divide safely.
#[derive(Debug, Clone)]
pub struct Schedule {
    kind: ScheduleKind,
    table: Option<Arc<Vec<f64>>>,
    train_steps: usize,
    alpha_min: f64,
    alpha_max: f64,
    t_min: f64,
    t_max: f64,
}

impl Schedule {
    pub fn cosine() -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            table: None,
            train_steps: DEFAULT_TRAIN_STEPS,
            alpha_min: DEFAULT_ALPHA_MIN,
            alpha_max: DEFAULT_ALPHA_MAX,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    /// Schedule from a backbone's trained noise-level table of S+1 values
    /// for t = 0, 1/S, ..., 1. The table must be monotone non-increasing.
    pub fn from_table(table: Vec<f64>) -> Result<Self> {
        if table.len() < 2 {
            return Err(TinoError::Config(
                "schedule table needs at least 2 entries".into(),
            ));
        }
        if table.windows(2).any(|w| w[1] > w[0]) {
            return Err(TinoError::Config(
                "schedule table must be monotone non-increasing".into(),
            ));
        }
        if table.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(TinoError::Config("schedule table values outside [0, 1]".into()));
        }
        let train_steps = table.len() - 1;
        Ok(Schedule {
            kind: ScheduleKind::InterpolatedTable,
            table: Some(Arc::new(table)),
            train_steps,
            alpha_min: DEFAULT_ALPHA_MIN,
            alpha_max: DEFAULT_ALPHA_MAX,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        })
    }

    /// Override the clamping bounds (alpha_max up to exactly 1).
    pub fn with_alpha_clamp(mut self, alpha_min: f64, alpha_max: f64) -> Result<Self> {
        if !(alpha_min > 0.0 && alpha_min < alpha_max && alpha_max <= 1.0) {
            return Err(TinoError::Config(format!(
                "invalid alpha clamp ({alpha_min}, {alpha_max})"
            )));
        }
        self.alpha_min = alpha_min;
        self.alpha_max = alpha_max;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of discrete training timesteps the backbone was trained with;
    /// also the scale on which timestep updates are applied.
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn alpha_min(&self) -> f64 {
        self.alpha_min
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    pub fn table(&self) -> Option<&[f64]> {
        self.table.as_deref().map(|t| t.as_slice())
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(TinoError::Domain(format!("timestep {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Clamped noise level at `t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        let raw = match self.kind {
            ScheduleKind::Cosine => {
                let c = (t * std::f64::consts::FRAC_PI_2).cos();
                c * c
            }
            ScheduleKind::InterpolatedTable => {
                let table = self.table.as_ref().expect("table kind");
                let segments = table.len() - 1;
                let u = t * segments as f64;
                let mut i = u.floor() as usize;
                if i >= segments {
                    i = segments - 1;
                }
                table[i] + (u - i as f64) * (table[i + 1] - table[i])
            }
        };
        Ok(raw.clamp(self.alpha_min, self.alpha_max))
    }

    /// Graph node for the clamped noise level at a timestep variable.
    /// The caller is responsible for keeping `t` inside [0, 1].
    pub fn alpha_var(&self, graph: &mut Graph, t: Var) -> Result<Var> {
        let raw = match self.kind {
            ScheduleKind::Cosine => {
                let scaled = graph.scale(t, std::f64::consts::FRAC_PI_2);
                let c = graph.cos(scaled);
                graph.square(c)
            }
            ScheduleKind::InterpolatedTable => {
                let table = self.table.as_ref().expect("table kind").clone();
                graph.interp_table(t, table)?
            }
        };
        Ok(graph.clamp(raw, self.alpha_min, self.alpha_max))
    }
}

/// The K+1 continuous timesteps of one denoising chain. The first entry is
/// pinned to 0 so the trajectory terminates at a clean latent; the rest live
/// in [t_min, t_max] and carry no ordering requirement once optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepVector {
    values: Vec<f64>,
}

impl TimestepVector {
    /// Uniform initialization t_k = k·T/K for k = 0..K, clamped for k ≥ 1.
    pub fn initial(steps: usize, start_t: f64, schedule: &Schedule) -> Result<Self> {
        if steps == 0 {
            return Err(TinoError::Config("need at least one denoising step".into()));
        }
        if !(start_t > 0.0 && start_t <= 1.0) {
            return Err(TinoError::Config(format!(
                "starting timestep {start_t} outside (0, 1]"
            )));
        }
        let mut values = Vec::with_capacity(steps + 1);
        values.push(0.0);
        for k in 1..=steps {
            let t = k as f64 * start_t / steps as f64;
            values.push(t.clamp(schedule.t_min(), schedule.t_max()));
        }
        Ok(TimestepVector { values })
    }

    pub fn from_values(values: Vec<f64>, schedule: &Schedule) -> Result<Self> {
        if values.len() < 2 {
            return Err(TinoError::Config("timestep vector needs K+1 >= 2 entries".into()));
        }
        if values[0] != 0.0 {
            return Err(TinoError::Domain("t_0 must be exactly 0".into()));
        }
        for &t in &values[1..] {
            if t < schedule.t_min() || t > schedule.t_max() {
                return Err(TinoError::Domain(format!(
                    "timestep {t} outside [{}, {}]",
                    schedule.t_min(),
                    schedule.t_max()
                )));
            }
        }
        Ok(TimestepVector { values })
    }

    /// Number of denoising steps K.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the optimized entries t_1..t_K.
    pub fn optimized_mut(&mut self) -> &mut [f64] {
        &mut self.values[1..]
    }

    pub fn clamp(&mut self, schedule: &Schedule) {
        for t in &mut self.values[1..] {
            *t = t.clamp(schedule.t_min(), schedule.t_max());
        }
    }

    /// Re-sort t_1..t_K ascending (the optional strict-ordering ablation).
    pub fn sort_ascending(&mut self) {
        self.values[1..].sort_by(|a, b| a.partial_cmp(b).expect("finite timesteps"));
    }
}

/// A tensor in the autoencoder's latent geometry, shape
/// `(channels, height, width)` with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    data: Tensor,
}

impl LatentImage {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(TinoError::ShapeMismatch(format!(
                "latent must be (channels, height, width), got {:?}",
                data.shape()
            )));
        }
        if !data.is_all_finite() {
            return Err(TinoError::NonFinite("latent image".into()));
        }
        Ok(LatentImage { data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [
            self.data.shape()[0],
            self.data.shape()[1],
            self.data.shape()[2],
        ]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TinoError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// √α(t)·latent + √(1−α(t))·noise, differentiable in all three inputs.
pub fn forward_diffuse(
    graph: &mut Graph,
    latent: Var,
    noise: Var,
    t: Var,
    schedule: &Schedule,
) -> Result<Var> {
    check_same_shape(graph.value(latent), graph.value(noise), "forward_diffuse")?;
    let alpha = schedule.alpha_var(graph, t)?;
    let signal_coeff = graph.sqrt(alpha);
    let neg = graph.neg(alpha);
    let complement = graph.offset(neg, 1.0);
    let noise_coeff = graph.sqrt(complement);
    let signal = graph.mul(signal_coeff, latent)?;
    let noised = graph.mul(noise_coeff, noise)?;
    graph.add(signal, noised)
}

/// One deterministic denoising step from `t_from` to `t_to` given a noise
/// prediction: √α(t_to)·(x − √(1−α(t_from))·noise)/√α(t_from)
/// + √(1−α(t_to))·noise.
pub fn reverse_step(
    graph: &mut Graph,
    noisy: Var,
    predicted_noise: Var,
    t_from: Var,
    t_to: Var,
    schedule: &Schedule,
) -> Result<Var> {
    check_same_shape(graph.value(noisy), graph.value(predicted_noise), "reverse_step")?;
    let alpha_from = schedule.alpha_var(graph, t_from)?;
    let alpha_to = schedule.alpha_var(graph, t_to)?;

    let sqrt_from = graph.sqrt(alpha_from);
    let neg_from = graph.neg(alpha_from);
    let comp_from = graph.offset(neg_from, 1.0);
    let noise_from = graph.sqrt(comp_from);

    let sqrt_to = graph.sqrt(alpha_to);
    let neg_to = graph.neg(alpha_to);
    let comp_to = graph.offset(neg_to, 1.0);
    let noise_to = graph.sqrt(comp_to);

    let removed = graph.mul(noise_from, predicted_noise)?;
    let numerator = graph.sub(noisy, removed)?;
    let clean_estimate = graph.div(numerator, sqrt_from)?;
    let rescaled = graph.mul(sqrt_to, clean_estimate)?;
    let reintroduced = graph.mul(noise_to, predicted_noise)?;
    graph.add(rescaled, reintroduced)
}

/// `edit·M + orig·(1−M)` with the latent-resolution mask broadcast over
/// channels. Cells where M = 0 copy `orig` bit-for-bit.
pub fn masked_blend(graph: &mut Graph, edit: Var, orig: Var, mask: &Mask) -> Result<Var> {
    if mask.resolution() != MaskResolution::Latent {
        return Err(TinoError::Mask(
            "masked_blend expects a latent-resolution mask".into(),
        ));
    }
    let shape = graph.value(edit).shape().to_vec();
    if shape.len() != 3 || shape[1] != mask.height() || shape[2] != mask.width() {
        return Err(TinoError::ShapeMismatch(format!(
            "mask {}x{} vs latent {:?}",
            mask.height(),
            mask.width(),
            shape
        )));
    }
    graph.blend(edit, orig, Arc::new(mask.data().to_vec()))
}

/// Run the masked denoising loop k = K..1: predict noise at (L̃_k, t_k),
/// apply the reverse step to t_{k−1}, then pin the non-edit region back to
/// the original latent. Returns the final latent and every intermediate,
/// newest first being the input.
pub fn denoise_trajectory(
    graph: &mut Graph,
    start: Var,
    timesteps: &[Var],
    condition: &ConditionEmbedding,
    denoiser: &dyn DenoiserBackend,
    mask: &Mask,
    latent_orig: Var,
) -> Result<(Var, Vec<Var>)> {
    if timesteps.len() < 2 {
        return Err(TinoError::Config("need K+1 >= 2 timesteps".into()));
    }
    let steps = timesteps.len() - 1;
    let mut intermediates = Vec::with_capacity(steps + 1);
    intermediates.push(start);
    let mut current = start;
    for k in (1..=steps).rev() {
        let predicted = denoiser
            .predict_var(graph, current, timesteps[k], condition)
            .map_err(|e| e.at_step(k))?;
        let schedule = denoiser.schedule();
        let stepped = reverse_step(graph, current, predicted, timesteps[k], timesteps[k - 1], schedule)?;
        current = masked_blend(graph, stepped, latent_orig, mask)?;
        intermediates.push(current);
    }
    Ok((current, intermediates))
}
