//! Pluggable backend contracts for the denoiser, autoencoder, text and
//! visual embedders, and segmenter, plus the bundles that wire them together.
//!
//! Backends are immutable after construction and safe to share across
//! concurrent runs. The toy implementations in [`toy`] and the closed-form
//! denoiser in [`analytic`] make every numerical property testable without
//! any pre-trained weights; [`external`] loads the same contracts from a
//! self-describing model directory.

pub mod analytic;
pub mod external;
pub mod toy;

use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::{LatentImage, Schedule};
use crate::error::{Result, TinoError};
use crate::masking::Mask;
use crate::pixel::PixelImage;

/// Conditioning vector a denoiser receives alongside the latent and the
/// timestep (a text prompt embedding in practice).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    data: Vec<f64>,
}

impl ConditionEmbedding {
    pub fn new(data: Vec<f64>) -> Self {
        ConditionEmbedding { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Static geometry a backend bundle declares about itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendMetadata {
    pub latent_shape: [usize; 3],
    pub condition_dim: usize,
}

/// Noise predictor over latents. `predict_var` must be differentiable with
/// respect to both the latent and the timestep so gradients can flow through
/// the whole unrolled denoising chain.
pub trait DenoiserBackend: Send + Sync {
    fn metadata(&self) -> BackendMetadata;

    /// The noise schedule this backbone was trained with.
    fn schedule(&self) -> &Schedule;

    fn predict_var(
        &self,
        graph: &mut Graph,
        latent: Var,
        t: Var,
        condition: &ConditionEmbedding,
    ) -> Result<Var>;

    /// Convenience evaluation without gradient tracking.
    fn predict(&self, latent: &LatentImage, t: f64, condition: &ConditionEmbedding) -> Result<Tensor> {
        let mut graph = Graph::new();
        let latent_var = graph.input(latent.tensor().clone());
        let t_var = graph.scalar(t);
        let out = self.predict_var(&mut graph, latent_var, t_var, condition)?;
        Ok(graph.value(out).clone())
    }
}

/// Encoder/decoder pair between pixel and latent geometry. Only the decode
/// direction participates in gradient flow; encoding happens before the
/// optimized chain starts.
pub trait AutoencoderBackend: Send + Sync {
    fn spatial_factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    fn encode(&self, image: &PixelImage) -> Result<LatentImage>;

    fn decode(&self, latent: &LatentImage) -> Result<PixelImage>;

    fn decode_var(&self, graph: &mut Graph, latent: Var) -> Result<Var>;

    /// Upper bound on |decode(encode(I)) − I| the backend promises per pixel
    /// channel.
    fn reconstruction_tolerance(&self) -> f64;
}

/// Text prompt embedder. Pooled features are L2-normalized and deterministic
/// per prompt; implementations may carry extended vocabularies for learned
/// concept tokens.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, prompt: &str) -> Result<ConditionEmbedding>;

    fn pooled_embed(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Pixel-domain visual feature extractor. `embed_*` outputs are unit-norm;
/// `features_*` return the intermediate stack used by the perceptual loss.
pub trait VisualEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_pixel_var(&self, graph: &mut Graph, image: Var) -> Result<Var>;

    fn features_pixel_var(&self, graph: &mut Graph, image: Var) -> Result<Vec<Var>>;

    fn embed_pixel(&self, image: &PixelImage) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let image_var = graph.input(image.tensor().clone());
        let out = self.embed_pixel_var(&mut graph, image_var)?;
        Ok(graph.value(out).data().to_vec())
    }

    /// Human-readable identity for reports.
    fn provenance(&self) -> String {
        "unspecified".into()
    }
}

/// Differentiable unit-norm semantic embedding of a latent.
pub trait LatentEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_var(&self, graph: &mut Graph, latent: Var) -> Result<Var>;

    fn embed(&self, latent: &LatentImage) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let latent_var = graph.input(latent.tensor().clone());
        let out = self.embed_var(&mut graph, latent_var)?;
        Ok(graph.value(out).data().to_vec())
    }
}

/// Differentiable perceptual feature stack of a latent.
pub trait LatentFeatures: Send + Sync {
    fn features_var(&self, graph: &mut Graph, latent: Var) -> Result<Vec<Var>>;

    fn features(&self, latent: &LatentImage) -> Result<Vec<Tensor>> {
        let mut graph = Graph::new();
        let latent_var = graph.input(latent.tensor().clone());
        let vars = self.features_var(&mut graph, latent_var)?;
        Ok(vars.into_iter().map(|v| graph.value(v).clone()).collect())
    }
}

/// Text-driven soft segmentation at pixel resolution.
pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, image: &PixelImage, text: &str) -> Result<Mask>;
}

/// Latent semantic/perceptual paths routed through decode + a pixel-domain
/// embedder. This is the default until a distilled latent encoder is
/// installed, and it doubles as the pixel-domain comparison mode in the
/// latent-vs-pixel benchmark.
pub struct DecodePixelEncoder {
    autoencoder: Arc<dyn AutoencoderBackend>,
    embedder: Arc<dyn VisualEmbedder>,
}

impl DecodePixelEncoder {
    pub fn new(autoencoder: Arc<dyn AutoencoderBackend>, embedder: Arc<dyn VisualEmbedder>) -> Self {
        DecodePixelEncoder {
            autoencoder,
            embedder,
        }
    }
}

impl LatentEncoder for DecodePixelEncoder {
    fn dim(&self) -> usize {
        self.embedder.dim()
    }

    fn embed_var(&self, graph: &mut Graph, latent: Var) -> Result<Var> {
        let pixels = self.autoencoder.decode_var(graph, latent)?;
        self.embedder.embed_pixel_var(graph, pixels)
    }
}

impl LatentFeatures for DecodePixelEncoder {
    fn features_var(&self, graph: &mut Graph, latent: Var) -> Result<Vec<Var>> {
        let pixels = self.autoencoder.decode_var(graph, latent)?;
        self.embedder.features_pixel_var(graph, pixels)
    }
}

/// The embedders a pipeline carries: prompt text, pixel-domain visual
/// features for evaluation, latent-domain semantic/perceptual paths for the
/// losses, and an optional second pixel embedder for the DINO-style metric.
pub struct EmbedderStack {
    pub text: Arc<dyn TextEmbedder>,
    pub visual: Arc<dyn VisualEmbedder>,
    pub semantic_latent: Arc<dyn LatentEncoder>,
    pub perceptual_latent: Arc<dyn LatentFeatures>,
    pub dino: Option<Arc<dyn VisualEmbedder>>,
}

/// Everything the optimization loop needs to run one request.
pub struct Backends {
    pub schedule: Schedule,
    pub denoiser: Arc<dyn DenoiserBackend>,
    pub autoencoder: Arc<dyn AutoencoderBackend>,
    pub embedders: EmbedderStack,
    pub segmenter: Arc<dyn SegmenterBackend>,
}

impl Backends {
    pub fn metadata(&self) -> BackendMetadata {
        self.denoiser.metadata()
    }

    /// Validate that an image matches the latent geometry this bundle was
    /// built for.
    pub fn check_image(&self, image: &PixelImage) -> Result<()> {
        let meta = self.metadata();
        let factor = self.autoencoder.spatial_factor();
        let expect_h = meta.latent_shape[1] * factor;
        let expect_w = meta.latent_shape[2] * factor;
        if image.height() != expect_h || image.width() != expect_w {
            return Err(TinoError::Config(format!(
                "image {}x{} does not match backend geometry {}x{} (latent {:?} at factor {factor})",
                image.height(),
                image.width(),
                expect_h,
                expect_w,
                meta.latent_shape
            )));
        }
        Ok(())
    }
}

const SINUSOID_MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of a continuous timestep, evaluated at t times the
/// schedule's training-step count so optimized fractional timesteps land on
/// the same scale a discrete backbone was conditioned on. Differentiable in
/// `t`; adapters feed this to backbones that want a timestep embedding
/// rather than a raw scalar.
pub fn timestep_embedding_var(
    graph: &mut Graph,
    t: Var,
    schedule: &Schedule,
    dim: usize,
) -> Result<Var> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TinoError::Config(format!(
            "timestep embedding dim must be positive and even, got {dim}"
        )));
    }
    let scaled = graph.scale(t, schedule.train_steps() as f64);
    let half = dim / 2;
    let mut parts = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) * SINUSOID_MAX_PERIOD.ln() / half as f64).exp();
        let phase = graph.scale(scaled, freq);
        parts.push(graph.sin(phase));
        parts.push(graph.cos(phase));
    }
    graph.stack_scalars(&parts)
}
