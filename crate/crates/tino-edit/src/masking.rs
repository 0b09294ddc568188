//! Edit-region location rules and latent-resolution mask handling.
//!
//! Each task kind has its own rule for producing the region that may change:
//! object replacement segments the prompt-difference tokens, style transfer
//! opens the whole frame, object addition takes the user mask verbatim, and
//! the stroke/composition tasks diff the user's modified image against the
//! original. Regions outside the mask stay pinned to the original latent for
//! every denoising step.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::backends::SegmenterBackend;
use crate::error::{Result, TinoError};
use crate::pixel::PixelImage;

/// Which resolution a mask's grid refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskResolution {
    Pixel,
    Latent,
}

/// A soft mask in [0, 1]. After binarization every cell is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Vec<f64>,
    height: usize,
    width: usize,
    resolution: MaskResolution,
}

impl Mask {
    pub fn new(data: Vec<f64>, height: usize, width: usize, resolution: MaskResolution) -> Result<Self> {
        if data.len() != height * width {
            return Err(TinoError::ShapeMismatch(format!(
                "mask data of {} cells vs {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TinoError::Mask("mask values outside [0, 1]".into()));
        }
        Ok(Mask {
            data,
            height,
            width,
            resolution,
        })
    }

    pub fn ones(height: usize, width: usize, resolution: MaskResolution) -> Self {
        Mask {
            data: vec![1.0; height * width],
            height,
            width,
            resolution,
        }
    }

    pub fn zeros(height: usize, width: usize, resolution: MaskResolution) -> Self {
        Mask {
            data: vec![0.0; height * width],
            height,
            width,
            resolution,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> MaskResolution {
        self.resolution
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_all_one(&self) -> bool {
        self.data.iter().all(|&v| v == 1.0)
    }

    pub fn coverage(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Threshold a soft mask into {0, 1}.
    pub fn binarize(&self, threshold: f64) -> Mask {
        Mask {
            data: self
                .data
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            height: self.height,
            width: self.width,
            resolution: self.resolution,
        }
    }

    /// Cellwise maximum (union for binary masks).
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.height != other.height || self.width != other.width {
            return Err(TinoError::ShapeMismatch(format!(
                "mask union: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Mask {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.max(*b))
                .collect(),
            height: self.height,
            width: self.width,
            resolution: self.resolution,
        })
    }

    /// Serialize as single-channel 8-bit grayscale, 0 or 255 per cell.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut img = ImageBuffer::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.get(y, x) >= 0.5 { 255u8 } else { 0u8 };
                img.put_pixel(x as u32, y as u32, Luma([v]));
            }
        }
        img.save(path.as_ref()).map_err(TinoError::Image)
    }

    /// Load a grayscale mask file, binarizing at half intensity.
    pub fn load(path: impl AsRef<Path>, resolution: MaskResolution) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(TinoError::Image)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .pixels()
            .map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 })
            .collect();
        Mask::new(data, h, w, resolution)
    }
}

/// The editing operation the user declared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTask {
    ReplaceObject,
    StyleTransfer,
    AddObject,
    Stroke,
    Compose,
}

impl EditTask {
    pub fn name(&self) -> &'static str {
        match self {
            EditTask::ReplaceObject => "replace_object",
            EditTask::StyleTransfer => "style_transfer",
            EditTask::AddObject => "add_object",
            EditTask::Stroke => "stroke",
            EditTask::Compose => "compose",
        }
    }
}

/// Optional auxiliary inputs; which ones must be present depends on the task.
#[derive(Debug, Clone, Default)]
pub struct EditAux {
    /// Reference image for reference-guided editing; usable with any task and
    /// activates the reference loss.
    pub reference: Option<PixelImage>,
    /// The original image with user strokes painted on it.
    pub stroke_image: Option<PixelImage>,
    /// The user-composed image (originals with pasted content).
    pub composed_image: Option<PixelImage>,
    /// User-supplied region mask for object addition.
    pub region_mask: Option<Mask>,
}

/// One editing request: the image, the prompt pair, the declared task, and
/// whatever auxiliary inputs the task needs.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: PixelImage,
    pub source_prompt: String,
    pub target_prompt: String,
    pub task: EditTask,
    pub aux: EditAux,
    pub seed: u64,
    /// Overrides the prompt-difference tokens for object replacement.
    pub edit_object: Option<String>,
}

impl EditRequest {
    /// Check the task/aux pairing rules.
    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(TinoError::Config(format!(
                    "task {} requires {what}",
                    self.task.name()
                )))
            }
        };
        let forbid = |present: bool, what: &str| {
            if present {
                Err(TinoError::Config(format!(
                    "task {} does not accept {what}",
                    self.task.name()
                )))
            } else {
                Ok(())
            }
        };
        match self.task {
            EditTask::AddObject => need(self.aux.region_mask.is_some(), "--mask")?,
            _ => forbid(self.aux.region_mask.is_some(), "--mask")?,
        }
        match self.task {
            EditTask::Stroke => need(self.aux.stroke_image.is_some(), "--stroke-image")?,
            _ => forbid(self.aux.stroke_image.is_some(), "--stroke-image")?,
        }
        match self.task {
            EditTask::Compose => need(self.aux.composed_image.is_some(), "--composed-image")?,
            _ => forbid(self.aux.composed_image.is_some(), "--composed-image")?,
        }
        if self.source_prompt.trim().is_empty() || self.target_prompt.trim().is_empty() {
            return Err(TinoError::Config("prompts must be non-empty".into()));
        }
        Ok(())
    }
}

/// Knobs for the mask rules.
#[derive(Debug, Clone)]
pub struct MaskConfig {
    /// Binarization threshold for soft segmentation output.
    pub threshold: f64,
    /// Per-channel tolerance when comparing images for the stroke/compose
    /// difference masks. Zero means exact equality.
    pub delta_tol: f64,
    /// Tokens ignored by the prompt difference.
    pub stopwords: Vec<String>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            threshold: 0.5,
            delta_tol: 2.0 / 255.0,
            stopwords: ["a", "an", "the", "of", "in", "on", "and"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// A computed mask plus any advisories raised while computing it.
#[derive(Debug, Clone)]
pub struct MaskResult {
    pub mask: Mask,
    pub warnings: Vec<String>,
}

fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Tokens of the source prompt that do not appear in the target prompt,
/// case-folded, punctuation-stripped, stopwords removed, order preserved.
pub fn token_diff(source_prompt: &str, target_prompt: &str, stopwords: &[String]) -> Vec<String> {
    let target: std::collections::HashSet<String> = tokenize(target_prompt).into_iter().collect();
    let mut seen = std::collections::HashSet::new();
    tokenize(source_prompt)
        .into_iter()
        .filter(|t| !target.contains(t))
        .filter(|t| !stopwords.contains(t))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Pixelwise inequality mask: 1 where the two images differ by more than
/// `tol` in any channel, 0 where they agree.
pub fn difference_mask(a: &PixelImage, b: &PixelImage, tol: f64) -> Result<Mask> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(TinoError::ShapeMismatch(format!(
            "difference_mask: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let pa = a.pixel(y, x);
            let pb = b.pixel(y, x);
            let differs = pa.iter().zip(&pb).any(|(u, v)| (u - v).abs() > tol);
            if differs {
                data[y * w + x] = 1.0;
            }
        }
    }
    Mask::new(data, h, w, MaskResolution::Pixel)
}

/// Locate the edit region for a request. Output is always a binary
/// pixel-resolution mask.
pub fn compute_mask(
    request: &EditRequest,
    segmenter: &dyn SegmenterBackend,
    config: &MaskConfig,
) -> Result<MaskResult> {
    request.validate()?;
    let (h, w) = (request.image.height(), request.image.width());
    let mut warnings = Vec::new();
    let mask = match request.task {
        EditTask::ReplaceObject => {
            let objects = match &request.edit_object {
                Some(obj) => vec![obj.to_lowercase()],
                None => token_diff(&request.source_prompt, &request.target_prompt, &config.stopwords),
            };
            if objects.is_empty() {
                return Err(TinoError::Config(
                    "no replace-target found; supply --edit-object".into(),
                ));
            }
            let mut union = Mask::zeros(h, w, MaskResolution::Pixel);
            for object in &objects {
                let soft = segmenter.segment(&request.image, object)?;
                union = union.union(&soft.binarize(config.threshold))?;
            }
            union
        }
        EditTask::StyleTransfer => Mask::ones(h, w, MaskResolution::Pixel),
        EditTask::AddObject => {
            let user = request.aux.region_mask.as_ref().expect("validated");
            if user.height() != h || user.width() != w {
                return Err(TinoError::ShapeMismatch(format!(
                    "region mask {}x{} vs image {}x{}",
                    user.height(),
                    user.width(),
                    h,
                    w
                )));
            }
            user.binarize(config.threshold)
        }
        EditTask::Stroke => {
            let strokes = request.aux.stroke_image.as_ref().expect("validated");
            difference_mask(&request.image, strokes, config.delta_tol)?
        }
        EditTask::Compose => {
            let composed = request.aux.composed_image.as_ref().expect("validated");
            difference_mask(&request.image, composed, config.delta_tol)?
        }
    };
    if mask.is_all_zero() {
        warnings.push("empty edit region".to_string());
        log::warn!("empty edit region for task {}", request.task.name());
    }
    Ok(MaskResult { mask, warnings })
}

/// Downsample a pixel mask to latent resolution by max pooling: a latent cell
/// is editable if any pixel it covers is editable.
pub fn to_latent_resolution(mask: &Mask, factor: usize) -> Result<Mask> {
    if mask.resolution() != MaskResolution::Pixel {
        return Err(TinoError::Mask("expected a pixel-resolution mask".into()));
    }
    if factor == 0 || mask.height() % factor != 0 || mask.width() % factor != 0 {
        return Err(TinoError::ShapeMismatch(format!(
            "mask {}x{} not divisible by factor {factor}",
            mask.height(),
            mask.width()
        )));
    }
    let (oh, ow) = (mask.height() / factor, mask.width() / factor);
    let mut data = vec![0.0; oh * ow];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let slot = &mut data[(y / factor) * ow + x / factor];
            *slot = f64::max(*slot, mask.get(y, x));
        }
    }
    Mask::new(data, oh, ow, MaskResolution::Latent)
}
