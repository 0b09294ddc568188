//! The loss family evaluated in the latent and text feature domains.
//!
//! The semantic loss drives the image-pair cosine toward the prompt-pair
//! cosine, the perceptual loss is a mean L1 over latent feature stacks, and
//! the reference loss pulls the output's features toward a reference image.
//! Prompt-side features are constant during optimization and precomputed
//! once per run into a [`LossContext`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backends::{EmbedderStack, LatentEncoder, LatentFeatures};
use crate::diffusion::LatentImage;
use crate::error::{Result, TinoError};

/// Component weights of the total loss. The reference weight only
/// participates when a reference image is present.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "lambda_sem")]
    pub semantic: f64,
    #[serde(rename = "lambda_perc")]
    pub perceptual: f64,
    #[serde(rename = "lambda_ref")]
    pub reference: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            semantic: 1.0,
            perceptual: 0.5,
            reference: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.semantic < 0.0 || self.perceptual < 0.0 || self.reference < 0.0 {
            return Err(TinoError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// How the semantic cosine gap is turned into a loss term. The raw signed
/// difference matches the formula as written; the absolute form (default)
/// actually drives the two cosines to equality and is bounded below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SemLossMode {
    RawDifference,
    #[default]
    AbsoluteDifference,
    SquaredDifference,
}

impl std::str::FromStr for SemLossMode {
    type Err = TinoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "raw_difference" => Ok(SemLossMode::RawDifference),
            "abs" | "absolute_difference" => Ok(SemLossMode::AbsoluteDifference),
            "squared" | "squared_difference" => Ok(SemLossMode::SquaredDifference),
            other => Err(TinoError::Config(format!("unknown sem-mode `{other}`"))),
        }
    }
}

/// Scalar values of each loss term at one evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(rename = "sem")]
    pub semantic: f64,
    #[serde(rename = "ref")]
    pub reference: Option<f64>,
    #[serde(rename = "perc")]
    pub perceptual: f64,
    pub total: f64,
}

impl LossComponents {
    /// The weighted combination the graph builder mirrors.
    pub fn weighted_total(semantic: f64, reference: Option<f64>, perceptual: f64, weights: &LossWeights) -> f64 {
        weights.semantic * semantic
            + reference.map_or(0.0, |r| weights.reference * r)
            + weights.perceptual * perceptual
    }
}

/// The differentiable encoders a loss evaluation routes through. Normal runs
/// use the latent-domain pair from the embedder stack; the pixel-domain
/// comparison mode of the benchmark swaps in decode-then-embed paths.
#[derive(Clone, Copy)]
pub struct LossEncoders<'a> {
    pub semantic: &'a dyn LatentEncoder,
    pub perceptual: &'a dyn LatentFeatures,
}

impl<'a> LossEncoders<'a> {
    pub fn from_stack(stack: &'a EmbedderStack) -> Self {
        LossEncoders {
            semantic: stack.semantic_latent.as_ref(),
            perceptual: stack.perceptual_latent.as_ref(),
        }
    }
}

/// Everything about a loss evaluation that stays constant across
/// optimization steps: prompt cosine, original-latent features, reference
/// features.
pub struct LossContext {
    pub text_cosine: f64,
    pub orig_embed: Tensor,
    pub orig_features: Vec<Tensor>,
    pub reference_embed: Option<Tensor>,
    pub weights: LossWeights,
    pub mode: SemLossMode,
}

impl LossContext {
    pub fn prepare(
        encoders: LossEncoders<'_>,
        stack: &EmbedderStack,
        latent_orig: &LatentImage,
        source_prompt: &str,
        target_prompt: &str,
        reference_latent: Option<&LatentImage>,
        weights: LossWeights,
        mode: SemLossMode,
    ) -> Result<Self> {
        weights.validate()?;
        let source = stack.text.pooled_embed(source_prompt)?;
        let target = stack.text.pooled_embed(target_prompt)?;
        let text_cosine = cosine_slice(&source, &target)?;
        let orig_embed = Tensor::new(
            vec![encoders.semantic.dim()],
            encoders.semantic.embed(latent_orig)?,
        )?;
        let mut graph = Graph::new();
        let orig_var = graph.input(latent_orig.tensor().clone());
        let orig_features = encoders
            .perceptual
            .features_var(&mut graph, orig_var)?
            .into_iter()
            .map(|v| graph.value(v).clone())
            .collect();
        let reference_embed = match reference_latent {
            Some(reference) => Some(Tensor::new(
                vec![encoders.semantic.dim()],
                encoders.semantic.embed(reference)?,
            )?),
            None => None,
        };
        Ok(LossContext {
            text_cosine,
            orig_embed,
            orig_features,
            reference_embed,
            weights,
            mode,
        })
    }
}

/// Graph handles to each loss term for one evaluation.
pub struct LossVars {
    pub semantic: Var,
    pub reference: Option<Var>,
    pub perceptual: Var,
    pub total: Var,
}

fn apply_mode(graph: &mut Graph, raw: Var, mode: SemLossMode) -> Var {
    match mode {
        SemLossMode::RawDifference => raw,
        SemLossMode::AbsoluteDifference => graph.abs(raw),
        SemLossMode::SquaredDifference => graph.square(raw),
    }
}

fn semantic_term(
    graph: &mut Graph,
    context: &LossContext,
    encoders: LossEncoders<'_>,
    output_latent: Var,
) -> Result<Var> {
    let out_embed = encoders.semantic.embed_var(graph, output_latent)?;
    let orig = graph.input(context.orig_embed.clone());
    let image_cos = graph.cosine(orig, out_embed)?;
    let raw = graph.offset(image_cos, -context.text_cosine);
    Ok(apply_mode(graph, raw, context.mode))
}

fn reference_term(
    graph: &mut Graph,
    context: &LossContext,
    encoders: LossEncoders<'_>,
    output_latent: Var,
) -> Result<Var> {
    let reference = context
        .reference_embed
        .as_ref()
        .ok_or_else(|| TinoError::Config("reference loss without a reference image".into()))?;
    let out_embed = encoders.semantic.embed_var(graph, output_latent)?;
    let ref_var = graph.input(reference.clone());
    let cos = graph.cosine(ref_var, out_embed)?;
    let neg = graph.neg(cos);
    Ok(graph.offset(neg, 1.0))
}

fn perceptual_term(
    graph: &mut Graph,
    context: &LossContext,
    encoders: LossEncoders<'_>,
    output_latent: Var,
) -> Result<Var> {
    let out_features = encoders.perceptual.features_var(graph, output_latent)?;
    if out_features.len() != context.orig_features.len() {
        return Err(TinoError::ShapeMismatch(format!(
            "feature stacks of {} vs {} layers",
            out_features.len(),
            context.orig_features.len()
        )));
    }
    let mut numel = 0usize;
    let mut acc: Option<Var> = None;
    for (out, orig) in out_features.iter().zip(&context.orig_features) {
        if graph.value(*out).shape() != orig.shape() {
            return Err(TinoError::ShapeMismatch(format!(
                "feature layer {:?} vs {:?}",
                graph.value(*out).shape(),
                orig.shape()
            )));
        }
        numel += orig.numel();
        let orig_var = graph.input(orig.clone());
        let diff = graph.sub(*out, orig_var)?;
        let mag = graph.abs(diff);
        let layer_sum = graph.sum(mag);
        acc = Some(match acc {
            Some(prev) => graph.add(prev, layer_sum)?,
            None => layer_sum,
        });
    }
    let total = acc.expect("at least one feature layer");
    Ok(graph.scale(total, 1.0 / numel as f64))
}

/// Build all loss terms for an output latent and combine the weighted total.
/// Terms with a zero weight (or a missing reference) are still evaluated for
/// logging but stay disconnected from the total, so they contribute exactly
/// nothing to its gradient.
pub fn total_loss_var(
    graph: &mut Graph,
    context: &LossContext,
    encoders: LossEncoders<'_>,
    output_latent: Var,
) -> Result<LossVars> {
    let semantic = semantic_term(graph, context, encoders, output_latent)?;
    let perceptual = perceptual_term(graph, context, encoders, output_latent)?;
    let reference = match context.reference_embed {
        Some(_) => Some(reference_term(graph, context, encoders, output_latent)?),
        None => None,
    };

    let mut total: Option<Var> = None;
    let mut connect = |graph: &mut Graph, term: Var, weight: f64, total: &mut Option<Var>| -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let scaled = graph.scale(term, weight);
        *total = Some(match *total {
            Some(prev) => graph.add(prev, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    connect(graph, semantic, context.weights.semantic, &mut total)?;
    if let Some(reference_var) = reference {
        connect(graph, reference_var, context.weights.reference, &mut total)?;
    }
    connect(graph, perceptual, context.weights.perceptual, &mut total)?;
    let total = match total {
        Some(v) => v,
        None => graph.scalar(0.0),
    };
    Ok(LossVars {
        semantic,
        reference,
        perceptual,
        total,
    })
}

impl LossVars {
    pub fn components(&self, graph: &Graph) -> LossComponents {
        LossComponents {
            semantic: graph.value(self.semantic).item(),
            reference: self.reference.map(|v| graph.value(v).item()),
            perceptual: graph.value(self.perceptual).item(),
            total: graph.value(self.total).item(),
        }
    }
}

/// Cosine similarity of two plain vectors.
pub fn cosine_slice(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TinoError::ShapeMismatch(format!(
            "cosine: {} vs {} entries",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TinoError::Domain("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Semantic loss of an output latent against the original latent and the
/// prompt pair.
pub fn semantic_loss(
    latent_orig: &LatentImage,
    latent_out: &LatentImage,
    source_prompt: &str,
    target_prompt: &str,
    stack: &EmbedderStack,
    mode: SemLossMode,
) -> Result<f64> {
    let encoders = LossEncoders::from_stack(stack);
    let context = LossContext::prepare(
        encoders,
        stack,
        latent_orig,
        source_prompt,
        target_prompt,
        None,
        LossWeights::default(),
        mode,
    )?;
    let mut graph = Graph::new();
    let out = graph.input(latent_out.tensor().clone());
    let term = semantic_term(&mut graph, &context, encoders, out)?;
    Ok(graph.value(term).item())
}

/// Reference loss 1 − cos(features(output), features(reference)); zero when
/// the output matches the reference.
pub fn reference_loss(
    latent_out: &LatentImage,
    latent_reference: &LatentImage,
    stack: &EmbedderStack,
) -> Result<f64> {
    let encoder = stack.semantic_latent.as_ref();
    let out = encoder.embed(latent_out)?;
    let reference = encoder.embed(latent_reference)?;
    Ok(1.0 - cosine_slice(&out, &reference)?)
}

/// Perceptual loss: mean absolute difference across the feature stack.
pub fn perceptual_loss(
    latent_orig: &LatentImage,
    latent_out: &LatentImage,
    perceptual: &dyn LatentFeatures,
) -> Result<f64> {
    let orig = perceptual.features(latent_orig)?;
    let out = perceptual.features(latent_out)?;
    if orig.len() != out.len() {
        return Err(TinoError::ShapeMismatch(format!(
            "feature stacks of {} vs {} layers",
            orig.len(),
            out.len()
        )));
    }
    let mut total = 0.0;
    let mut numel = 0usize;
    for (a, b) in orig.iter().zip(&out) {
        if a.shape() != b.shape() {
            return Err(TinoError::ShapeMismatch(format!(
                "feature layer {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        numel += a.numel();
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    }
    Ok(total / numel as f64)
}

/// Full weighted loss with per-component values.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    latent_orig: &LatentImage,
    latent_out: &LatentImage,
    source_prompt: &str,
    target_prompt: &str,
    reference_latent: Option<&LatentImage>,
    stack: &EmbedderStack,
    weights: LossWeights,
    mode: SemLossMode,
) -> Result<(f64, LossComponents)> {
    let encoders = LossEncoders::from_stack(stack);
    let context = LossContext::prepare(
        encoders,
        stack,
        latent_orig,
        source_prompt,
        target_prompt,
        reference_latent,
        weights,
        mode,
    )?;
    let mut graph = Graph::new();
    let out = graph.input(latent_out.tensor().clone());
    let vars = total_loss_var(&mut graph, &context, encoders, out)?;
    let components = vars.components(&graph);
    Ok((components.total, components))
}
