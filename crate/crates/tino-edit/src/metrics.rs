//! Cosine-similarity evaluation metrics between outputs, prompts, and
//! source/auxiliary images.
//!
//! Evaluation always runs in the pixel domain with the unmodified pixel
//! encoders, independent of whatever latent encoders the optimization used.

use serde::Serialize;

use crate::backends::{TextEmbedder, VisualEmbedder};
use crate::error::Result;
use crate::losses::cosine_slice;
use crate::pixel::PixelImage;

/// cos(vis(output), text(prompt)).
pub fn clip_t(
    output: &PixelImage,
    prompt: &str,
    visual: &dyn VisualEmbedder,
    text: &dyn TextEmbedder,
) -> Result<f64> {
    let image_features = visual.embed_pixel(output)?;
    let prompt_features = text.pooled_embed(prompt)?;
    cosine_slice(&image_features, &prompt_features)
}

/// cos(vis(output), vis(original)).
pub fn clip_i(output: &PixelImage, original: &PixelImage, visual: &dyn VisualEmbedder) -> Result<f64> {
    let a = visual.embed_pixel(output)?;
    let b = visual.embed_pixel(original)?;
    cosine_slice(&a, &b)
}

/// cos(vis(output), vis(aux)) against the task's auxiliary image (reference,
/// stroke, or composed).
pub fn clip_i_star(output: &PixelImage, aux: &PixelImage, visual: &dyn VisualEmbedder) -> Result<f64> {
    clip_i(output, aux, visual)
}

/// cos(dino(output), dino(original)) under a second, independent vision
/// encoder.
pub fn dino_i(output: &PixelImage, original: &PixelImage, dino: &dyn VisualEmbedder) -> Result<f64> {
    clip_i(output, original, dino)
}

/// Metric values for one evaluated sample. Missing aux images or an absent
/// DINO backend leave the corresponding column empty.
#[derive(Debug, Clone, Serialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub clip_t: f64,
    pub clip_i: f64,
    pub clip_i_star: Option<f64>,
    pub dino_i: Option<f64>,
}

/// Aggregate metric report over a test set.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_clip_t: f64,
    pub mean_clip_i: f64,
    pub mean_clip_i_star: Option<f64>,
    pub mean_dino_i: Option<f64>,
    pub sample_count: usize,
    pub failure_count: usize,
    pub embedder_provenance: String,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

impl MetricReport {
    pub fn from_samples(
        samples: Vec<SampleMetrics>,
        failure_count: usize,
        embedder_provenance: String,
    ) -> Self {
        let mean_clip_t = mean_of(samples.iter().map(|s| s.clip_t)).unwrap_or(f64::NAN);
        let mean_clip_i = mean_of(samples.iter().map(|s| s.clip_i)).unwrap_or(f64::NAN);
        let mean_clip_i_star = mean_of(samples.iter().filter_map(|s| s.clip_i_star));
        let mean_dino_i = mean_of(samples.iter().filter_map(|s| s.dino_i));
        MetricReport {
            sample_count: samples.len(),
            samples,
            mean_clip_t,
            mean_clip_i,
            mean_clip_i_star,
            mean_dino_i,
            failure_count,
            embedder_provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::make_toy_embedders;

    #[test]
    fn self_similarity_is_one() {
        let (_text, visual) = make_toy_embedders(16, 7).unwrap();
        let img = PixelImage::from_fn(32, 32, |y, x| [y as f64 / 32.0, x as f64 / 32.0, 0.5]);
        let score = clip_i(&img, &img, &visual).unwrap();
        assert!((score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn metrics_lie_in_cosine_range() {
        let (text, visual) = make_toy_embedders(16, 7).unwrap();
        let a = PixelImage::from_fn(32, 32, |y, _| [y as f64 / 32.0, 0.1, 0.9]);
        let b = PixelImage::from_fn(32, 32, |_, x| [0.9, x as f64 / 32.0, 0.1]);
        let ci = clip_i(&a, &b, &visual).unwrap();
        let ct = clip_t(&a, "a bright photo", &visual, &text).unwrap();
        assert!((-1.0..=1.0).contains(&ci));
        assert!((-1.0..=1.0).contains(&ct));
    }

    #[test]
    fn report_means_match_hand_average() {
        let samples = vec![
            SampleMetrics {
                sample_id: "a".into(),
                clip_t: 0.2,
                clip_i: 0.9,
                clip_i_star: Some(0.5),
                dino_i: None,
            },
            SampleMetrics {
                sample_id: "b".into(),
                clip_t: 0.4,
                clip_i: 0.7,
                clip_i_star: None,
                dino_i: Some(0.6),
            },
        ];
        let report = MetricReport::from_samples(samples, 1, "toy".into());
        assert!((report.mean_clip_t - 0.3).abs() < 1e-12);
        assert!((report.mean_clip_i - 0.8).abs() < 1e-12);
        assert_eq!(report.mean_clip_i_star, Some(0.5));
        assert_eq!(report.mean_dino_i, Some(0.6));
        assert_eq!(report.failure_count, 1);
    }
}
