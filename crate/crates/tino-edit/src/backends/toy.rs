//! Self-contained toy backends: a pooling autoencoder, seeded projection
//! embedders, a color-matching segmenter, and small test doubles.
//!
//! These are deliberately cheap, deterministic stand-ins that exercise every
//! loss formula and every contract without pre-trained weights. The visual
//! embedder pools any image down to a fixed grid before its projection, so
//! one instance serves all image sizes whose dimensions are multiples of the
//! grid.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::backends::analytic::{standard_normal, GaussianAnalyticDenoiser};
use crate::backends::{
    AutoencoderBackend, BackendMetadata, Backends, ConditionEmbedding, DecodePixelEncoder,
    DenoiserBackend, EmbedderStack, SegmenterBackend, TextEmbedder, VisualEmbedder,
};
use crate::diffusion::{LatentImage, Schedule};
use crate::error::{Result, TinoError};
use crate::masking::{Mask, MaskResolution};
use crate::pixel::PixelImage;

/// Spatial grid the toy visual embedder pools every image onto.
pub const EMBEDDER_GRID: usize = 16;

/// Pooling autoencoder: encode is factor×factor average pooling with a zero
/// channel appended (the fixed channel lift), decode drops the extra channel
/// and upsamples by nearest neighbour. The lift/projection pair is a left
/// inverse, so encode(decode(z)) = z exactly for any z the encoder can
/// produce, and decode moves pixel values by plain copies, never arithmetic.
pub struct ToyAutoencoder {
    factor: usize,
    lift: bool,
}

impl ToyAutoencoder {
    pub fn new(factor: usize) -> Result<Self> {
        if ![1, 2, 4, 8].contains(&factor) {
            return Err(TinoError::Config(format!(
                "autoencoder factor must be one of 1, 2, 4, 8; got {factor}"
            )));
        }
        Ok(ToyAutoencoder {
            factor,
            lift: factor > 1,
        })
    }

    fn projection(&self) -> Arc<Vec<f64>> {
        // (3 x latent_channels) row-major: keep the first three channels
        let c = self.latent_channels();
        let mut mat = vec![0.0; 3 * c];
        for row in 0..3 {
            mat[row * c + row] = 1.0;
        }
        Arc::new(mat)
    }
}

impl AutoencoderBackend for ToyAutoencoder {
    fn spatial_factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        if self.lift {
            4
        } else {
            3
        }
    }

    fn encode(&self, image: &PixelImage) -> Result<LatentImage> {
        if image.height() % self.factor != 0 || image.width() % self.factor != 0 {
            return Err(TinoError::ShapeMismatch(format!(
                "image {}x{} not divisible by factor {}",
                image.height(),
                image.width(),
                self.factor
            )));
        }
        let mut graph = Graph::new();
        let pixels = graph.input(image.tensor().clone());
        let pooled = graph.avg_pool2d(pixels, self.factor, self.factor)?;
        let pooled = graph.value(pooled).clone();
        let (h, w) = (pooled.shape()[1], pooled.shape()[2]);
        let mut data = pooled.into_data();
        if self.lift {
            data.extend(std::iter::repeat(0.0).take(h * w));
        }
        LatentImage::new(Tensor::new(vec![self.latent_channels(), h, w], data)?)
    }

    fn decode(&self, latent: &LatentImage) -> Result<PixelImage> {
        let mut graph = Graph::new();
        let latent_var = graph.input(latent.tensor().clone());
        let out = self.decode_var(&mut graph, latent_var)?;
        PixelImage::new(graph.value(out).clone())
    }

    fn decode_var(&self, graph: &mut Graph, latent: Var) -> Result<Var> {
        let shape = graph.value(latent).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.latent_channels() {
            return Err(TinoError::ShapeMismatch(format!(
                "latent {:?} does not match {} channels",
                shape,
                self.latent_channels()
            )));
        }
        let projected = if self.lift {
            graph.channel_linear(latent, self.projection(), 3)?
        } else {
            latent
        };
        if self.factor == 1 {
            Ok(projected)
        } else {
            graph.upsample_nearest(projected, self.factor)
        }
    }

    fn reconstruction_tolerance(&self) -> f64 {
        // pooling can lose anything sharper than one latent cell
        if self.factor == 1 {
            0.0
        } else {
            1.0
        }
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

fn l2_normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Deterministic seeded text embedder: each token hashes to a fixed random
/// vector, a prompt embeds as the normalized token mean. Learned concept
/// tokens can be registered to override their vector.
pub struct ToyTextEmbedder {
    dim: usize,
    seed: u64,
    concepts: HashMap<String, Vec<f64>>,
}

impl ToyTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ToyTextEmbedder {
            dim,
            seed,
            concepts: HashMap::new(),
        }
    }

    /// Extend the vocabulary with a learned concept token.
    pub fn register_concept(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(TinoError::Config(format!(
                "concept vector of dim {} vs embedder dim {}",
                vector.len(),
                self.dim
            )));
        }
        self.concepts.insert(token.to_lowercase(), vector);
        Ok(())
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.concepts.get(token) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token));
        (0..self.dim).map(|_| standard_normal(&mut rng)).collect()
    }

    fn prompt_vector(&self, prompt: &str) -> Result<Vec<f64>> {
        let tokens: Vec<String> = prompt
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric() && c != '<' && c != '>')
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect();
        if tokens.is_empty() {
            return Err(TinoError::Config("cannot embed an empty prompt".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for token in &tokens {
            for (slot, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *slot += v;
            }
        }
        for slot in acc.iter_mut() {
            *slot /= tokens.len() as f64;
        }
        l2_normalize_in_place(&mut acc);
        Ok(acc)
    }
}

impl TextEmbedder for ToyTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<ConditionEmbedding> {
        Ok(ConditionEmbedding::new(self.prompt_vector(prompt)?))
    }

    fn pooled_embed(&self, prompt: &str) -> Result<Vec<f64>> {
        self.prompt_vector(prompt)
    }
}

/// Two-stage seeded projection embedder: pool to a fixed grid, linear stem to
/// a hidden layer, tanh, linear head, L2 normalize. The feature stack for the
/// perceptual loss is (stem activations, pre-normalization head output).
pub struct ToyVisualEmbedder {
    dim: usize,
    hidden: usize,
    seed: u64,
    stem: Tensor,
    head: Tensor,
}

impl ToyVisualEmbedder {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(TinoError::Config(format!("embedder dim must be >= 8, got {dim}")));
        }
        let stem_cols = 3 * EMBEDDER_GRID * EMBEDDER_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_scale = 1.0 / (stem_cols as f64).sqrt();
        let stem = Tensor::new(
            vec![hidden, stem_cols],
            (0..hidden * stem_cols)
                .map(|_| standard_normal(&mut rng) * stem_scale)
                .collect(),
        )?;
        let head_scale = 1.0 / (hidden as f64).sqrt();
        let head = Tensor::new(
            vec![dim, hidden],
            (0..dim * hidden)
                .map(|_| standard_normal(&mut rng) * head_scale)
                .collect(),
        )?;
        Ok(ToyVisualEmbedder {
            dim,
            hidden,
            seed,
            stem,
            head,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn stem(&self) -> &Tensor {
        &self.stem
    }

    pub fn head(&self) -> &Tensor {
        &self.head
    }

    fn pool_to_grid(&self, graph: &mut Graph, image: Var) -> Result<Var> {
        let shape = graph.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(TinoError::ShapeMismatch(format!(
                "visual embedder expects (3, h, w) pixels, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % EMBEDDER_GRID != 0 || w % EMBEDDER_GRID != 0 {
            return Err(TinoError::ShapeMismatch(format!(
                "image {h}x{w} must be a multiple of the {EMBEDDER_GRID}-cell grid"
            )));
        }
        graph.avg_pool2d(image, h / EMBEDDER_GRID, w / EMBEDDER_GRID)
    }

    fn stack_vars(&self, graph: &mut Graph, image: Var) -> Result<(Var, Var)> {
        let pooled = self.pool_to_grid(graph, image)?;
        let stem_w = graph.input(self.stem.clone());
        let stem_out = graph.matvec(stem_w, pooled)?;
        let activated = graph.tanh(stem_out);
        let head_w = graph.input(self.head.clone());
        let head_out = graph.matvec(head_w, activated)?;
        Ok((stem_out, head_out))
    }
}

impl VisualEmbedder for ToyVisualEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_pixel_var(&self, graph: &mut Graph, image: Var) -> Result<Var> {
        let (_, head_out) = self.stack_vars(graph, image)?;
        graph.l2_normalize(head_out)
    }

    fn features_pixel_var(&self, graph: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let (stem_out, head_out) = self.stack_vars(graph, image)?;
        Ok(vec![stem_out, head_out])
    }

    fn provenance(&self) -> String {
        format!("toy-projection dim={} hidden={} seed={}", self.dim, self.hidden, self.seed)
    }
}

/// Deterministic seeded projection stand-ins for the text/visual encoder
/// pair, sharing one feature dimensionality.
pub fn make_toy_embedders(dim: usize, seed: u64) -> Result<(ToyTextEmbedder, ToyVisualEmbedder)> {
    if dim < 8 {
        return Err(TinoError::Config(format!("embedder dim must be >= 8, got {dim}")));
    }
    Ok((
        ToyTextEmbedder::new(dim, seed),
        ToyVisualEmbedder::new(dim, dim * 2, seed.wrapping_add(1))?,
    ))
}

/// Color-matching segmenter: known color words light up pixels near that
/// color; any other text falls back to a luminance map.
pub struct ToySegmenter {
    colors: HashMap<&'static str, [f64; 3]>,
}

impl Default for ToySegmenter {
    fn default() -> Self {
        Self::new()
    }
}

impl ToySegmenter {
    pub fn new() -> Self {
        let colors = HashMap::from([
            ("red", [1.0, 0.0, 0.0]),
            ("green", [0.0, 1.0, 0.0]),
            ("blue", [0.0, 0.0, 1.0]),
            ("yellow", [1.0, 1.0, 0.0]),
            ("cyan", [0.0, 1.0, 1.0]),
            ("magenta", [1.0, 0.0, 1.0]),
            ("white", [1.0, 1.0, 1.0]),
            ("black", [0.0, 0.0, 0.0]),
            ("gray", [0.5, 0.5, 0.5]),
        ]);
        ToySegmenter { colors }
    }
}

impl SegmenterBackend for ToySegmenter {
    fn segment(&self, image: &PixelImage, text: &str) -> Result<Mask> {
        let (h, w) = (image.height(), image.width());
        let mut data = vec![0.0; h * w];
        let key = text.trim().to_lowercase();
        match self.colors.get(key.as_str()) {
            Some(color) => {
                for y in 0..h {
                    for x in 0..w {
                        let px = image.pixel(y, x);
                        let dist = px
                            .iter()
                            .zip(color)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        data[y * w + x] = (1.0 - dist / 0.75).clamp(0.0, 1.0);
                    }
                }
            }
            None => {
                for y in 0..h {
                    for x in 0..w {
                        let px = image.pixel(y, x);
                        data[y * w + x] =
                            (0.2126 * px[0] + 0.7152 * px[1] + 0.0722 * px[2]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Mask::new(data, h, w, MaskResolution::Pixel)
    }
}

/// Test double that predicts a fixed noise tensor regardless of input.
pub struct FixedNoiseDenoiser {
    noise: Tensor,
    schedule: Schedule,
}

impl FixedNoiseDenoiser {
    pub fn new(noise: Tensor, schedule: Schedule) -> Self {
        FixedNoiseDenoiser { noise, schedule }
    }
}

impl DenoiserBackend for FixedNoiseDenoiser {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            latent_shape: [
                self.noise.shape()[0],
                self.noise.shape()[1],
                self.noise.shape()[2],
            ],
            condition_dim: 1,
        }
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn predict_var(
        &self,
        graph: &mut Graph,
        latent: Var,
        _t: Var,
        _condition: &ConditionEmbedding,
    ) -> Result<Var> {
        if graph.value(latent).shape() != self.noise.shape() {
            return Err(TinoError::ShapeMismatch(format!(
                "fixed noise {:?} vs latent {:?}",
                self.noise.shape(),
                graph.value(latent).shape()
            )));
        }
        Ok(graph.input(self.noise.clone()))
    }
}

/// Standard-normal noise tensor with a seeded generator.
pub fn sample_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| standard_normal(&mut rng)).collect())
        .expect("consistent shape")
}

/// Assemble a full toy pipeline for a given image geometry.
pub fn toy_backends(
    image_height: usize,
    image_width: usize,
    factor: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<Backends> {
    let autoencoder = Arc::new(ToyAutoencoder::new(factor)?);
    if image_height % factor != 0 || image_width % factor != 0 {
        return Err(TinoError::Config(format!(
            "image {image_height}x{image_width} not divisible by factor {factor}"
        )));
    }
    let latent_shape = [
        autoencoder.latent_channels(),
        image_height / factor,
        image_width / factor,
    ];
    let schedule = Schedule::cosine();
    let condition_dim = embed_dim;
    let prior_mean = Tensor::zeros(&latent_shape);
    let denoiser = Arc::new(
        GaussianAnalyticDenoiser::new(prior_mean, 1.0, schedule.clone())?
            .with_condition_dim(condition_dim),
    );
    let (text, visual) = make_toy_embedders(embed_dim, seed)?;
    let text = Arc::new(text);
    let visual: Arc<dyn VisualEmbedder> = Arc::new(visual);
    let dino: Arc<dyn VisualEmbedder> = Arc::new(ToyVisualEmbedder::new(
        embed_dim,
        embed_dim * 2,
        seed.wrapping_add(0xD1_0),
    )?);
    let fallback = Arc::new(DecodePixelEncoder::new(
        autoencoder.clone() as Arc<dyn AutoencoderBackend>,
        visual.clone(),
    ));
    Ok(Backends {
        schedule,
        denoiser,
        autoencoder,
        embedders: EmbedderStack {
            text,
            visual,
            semantic_latent: fallback.clone(),
            perceptual_latent: fallback,
            dino: Some(dino),
        },
        segmenter: Arc::new(ToySegmenter::new()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_autoencoder_is_identity() {
        let ae = ToyAutoencoder::new(1).unwrap();
        let img = PixelImage::from_fn(8, 8, |y, x| [y as f64 / 8.0, x as f64 / 8.0, 0.3]);
        let latent = ae.encode(&img).unwrap();
        assert_eq!(latent.shape(), [3, 8, 8]);
        let back = ae.decode(&latent).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn block_constant_roundtrip_is_exact() {
        let ae = ToyAutoencoder::new(2).unwrap();
        let img = PixelImage::from_fn(8, 8, |y, x| {
            let v = ((y / 2) * 4 + x / 2) as f64 / 16.0;
            [v, 1.0 - v, 0.5 * v]
        });
        let back = ae.decode(&ae.encode(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn encode_decode_encode_is_exact_on_latent_range() {
        let ae = ToyAutoencoder::new(4).unwrap();
        let img = PixelImage::from_fn(16, 16, |y, x| {
            [
                (y as f64 * 31.7).sin().abs(),
                (x as f64 * 17.3).cos().abs(),
                ((y * x) as f64 * 0.01) % 1.0,
            ]
        });
        let latent = ae.encode(&img).unwrap();
        let roundtrip = ae.encode(&ae.decode(&latent).unwrap()).unwrap();
        assert_eq!(latent, roundtrip);
    }

    #[test]
    fn random_roundtrip_error_equals_pooling_residual() {
        let ae = ToyAutoencoder::new(2).unwrap();
        let img = PixelImage::from_fn(8, 8, |y, x| {
            [
                ((y * 13 + x * 7) % 11) as f64 / 11.0,
                ((y * 3 + x * 5) % 7) as f64 / 7.0,
                ((y + x * 3) % 5) as f64 / 5.0,
            ]
        });
        let roundtrip = ae.decode(&ae.encode(&img).unwrap()).unwrap();
        // independent residual: subtract the 2x2 block mean
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let mut mean = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            mean += img.pixel((y / 2) * 2 + dy, (x / 2) * 2 + dx)[c];
                        }
                    }
                    mean /= 4.0;
                    let expect = (img.pixel(y, x)[c] - mean).abs();
                    let got = (img.pixel(y, x)[c] - roundtrip.pixel(y, x)[c]).abs();
                    assert!((expect - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_factor_and_indivisible_images() {
        assert!(ToyAutoencoder::new(3).is_err());
        let ae = ToyAutoencoder::new(8).unwrap();
        let img = PixelImage::filled(12, 12, [0.5, 0.5, 0.5]);
        assert!(ae.encode(&img).is_err());
    }

    #[test]
    fn text_embedder_is_deterministic_and_unit_norm() {
        let emb = ToyTextEmbedder::new(16, 3);
        let a = emb.pooled_embed("a photo of a cat").unwrap();
        let b = emb.pooled_embed("a photo of a cat").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(emb.pooled_embed("   ").is_err());
    }

    #[test]
    fn concept_tokens_override_vectors() {
        let mut emb = ToyTextEmbedder::new(16, 3);
        let before = emb.pooled_embed("<concept>").unwrap();
        let mut custom = vec![0.0; 16];
        custom[0] = 1.0;
        emb.register_concept("<concept>", custom.clone()).unwrap();
        let after = emb.pooled_embed("<concept>").unwrap();
        assert_ne!(before, after);
        assert!((after[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn visual_embedder_outputs_unit_norm_and_matches_itself() {
        let emb = ToyVisualEmbedder::new(16, 32, 5).unwrap();
        let img = PixelImage::from_fn(32, 32, |y, x| [y as f64 / 32.0, x as f64 / 32.0, 0.2]);
        let f = emb.embed_pixel(&img).unwrap();
        let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let again = emb.embed_pixel(&img).unwrap();
        assert_eq!(f, again);
        let cos: f64 = f.iter().zip(&again).map(|(a, b)| a * b).sum();
        assert!((cos - 1.0).abs() < 1e-9);
    }

    #[test]
    fn segmenter_finds_color_regions() {
        let img = PixelImage::from_fn(16, 16, |y, x| {
            if y < 8 && x < 8 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 0.0]
            }
        });
        let seg = ToySegmenter::new();
        let mask = seg.segment(&img, "red").unwrap();
        assert_eq!(mask.get(3, 3), 1.0);
        assert_eq!(mask.get(12, 12), 0.0);
        // unknown words still give a valid mask
        let fallback = seg.segment(&img, "sunflower").unwrap();
        assert!(fallback.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sample_noise_is_seed_deterministic() {
        let a = sample_noise(&[4, 8, 8], 42);
        let b = sample_noise(&[4, 8, 8], 42);
        let c = sample_noise(&[4, 8, 8], 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
