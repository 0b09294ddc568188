//! Distilled latent-domain twins of the pixel-domain feature encoders.
//!
//! A student copies the pixel encoder's head and replaces the stem with one
//! that consumes latents directly, then trains (entire student unfrozen,
//! teacher and autoencoder frozen) to match the teacher's features: cosine
//! objective for the semantic twin, L1 feature matching for the perceptual
//! twin. Latents are several times smaller than pixels, so the distilled
//! encoder evaluates faster than routing through decode.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backends::external::{read_tensor, write_tensor, Manifest};
use crate::backends::toy::ToyVisualEmbedder;
use crate::backends::{AutoencoderBackend, LatentEncoder, LatentFeatures};
use crate::diffusion::LatentImage;
use crate::error::{Result, TinoError};
use crate::optimizer::AdamW;
use crate::par;
use crate::pixel::PixelImage;

/// Objective a distillation run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillObjective {
    /// 1 − cos(student(encode(I)), teacher(I)) — the semantic twin.
    Cosine,
    /// Mean L1 between feature stacks — the perceptual twin.
    L1,
}

impl std::str::FromStr for DistillObjective {
    type Err = TinoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistillObjective::Cosine),
            "l1" => Ok(DistillObjective::L1),
            other => Err(TinoError::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// How the replaced stem starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemInit {
    /// Fresh random weights; the head is still copied from the teacher.
    Random,
    /// Fold the linear decode-and-pool path into the stem so the student
    /// starts out exactly equal to teacher ∘ decode.
    TeacherThroughDecode,
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub objective: DistillObjective,
    pub dataset_path: Option<PathBuf>,
    pub holdout_fraction: f64,
    pub stem_init: StemInit,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 100_000,
            batch_size: 16,
            learning_rate: 1e-5,
            objective: DistillObjective::Cosine,
            dataset_path: None,
            holdout_fraction: 0.1,
            stem_init: StemInit::Random,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(TinoError::Config("iterations and batch_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(TinoError::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Provenance carried by a trained encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillProvenance {
    pub teacher: String,
    pub objective: DistillObjective,
    pub iterations_run: usize,
    pub final_train_loss: f64,
    pub best_holdout: f64,
}

/// A latent-domain encoder with the teacher's head and a latent stem.
pub struct DistilledEncoder {
    latent_shape: [usize; 3],
    stem: Tensor,
    head: Tensor,
    provenance: Option<DistillProvenance>,
}

impl DistilledEncoder {
    /// Copy the teacher's head and draw a fresh stem sized for the latent
    /// geometry.
    pub fn from_teacher(teacher: &ToyVisualEmbedder, latent_shape: [usize; 3], seed: u64) -> Self {
        let latent_numel = latent_shape.iter().product::<usize>();
        let hidden = teacher.hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (latent_numel as f64).sqrt();
        let stem = Tensor::new(
            vec![hidden, latent_numel],
            (0..hidden * latent_numel)
                .map(|_| crate::backends::analytic::standard_normal(&mut rng) * scale)
                .collect(),
        )
        .expect("consistent dims");
        DistilledEncoder {
            latent_shape,
            stem,
            head: teacher.head().clone(),
            provenance: None,
        }
    }

    /// Initialize the stem as the teacher's stem composed with the linear
    /// decode-and-pool path, making the student exactly teacher ∘ decode.
    pub fn teacher_through_decode(
        teacher: &ToyVisualEmbedder,
        autoencoder: &dyn AutoencoderBackend,
        latent_shape: [usize; 3],
    ) -> Result<Self> {
        let latent_numel: usize = latent_shape.iter().product();
        let hidden = teacher.hidden();
        let mut stem = vec![0.0; hidden * latent_numel];
        // apply the (linear) decode + pool + teacher-stem path to each basis
        // latent to materialize the composed matrix column by column
        let columns = par::map(&(0..latent_numel).collect::<Vec<_>>(), |&idx| {
            let mut basis = Tensor::zeros(&latent_shape);
            basis.data_mut()[idx] = 1.0;
            let mut graph = Graph::new();
            let latent = graph.input(basis);
            let pixels = autoencoder.decode_var(&mut graph, latent)?;
            let shape = graph.value(pixels).shape().to_vec();
            let pooled = graph.avg_pool2d(
                pixels,
                shape[1] / crate::backends::toy::EMBEDDER_GRID,
                shape[2] / crate::backends::toy::EMBEDDER_GRID,
            )?;
            let stem_w = graph.input(teacher.stem().clone());
            let out = graph.matvec(stem_w, pooled)?;
            Ok::<Vec<f64>, TinoError>(graph.value(out).data().to_vec())
        });
        for (idx, column) in columns.into_iter().enumerate() {
            let column = column?;
            for (row, v) in column.into_iter().enumerate() {
                stem[row * latent_numel + idx] = v;
            }
        }
        Ok(DistilledEncoder {
            latent_shape,
            stem: Tensor::new(vec![hidden, latent_numel], stem)?,
            head: teacher.head().clone(),
            provenance: None,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    pub fn provenance(&self) -> Option<&DistillProvenance> {
        self.provenance.as_ref()
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape != self.latent_shape {
            return Err(TinoError::ShapeMismatch(format!(
                "encoder expects latents of {:?}, got {:?}",
                self.latent_shape, shape
            )));
        }
        Ok(())
    }

    /// Build the (stem, head) forward pass with the weights as graph inputs,
    /// so callers can differentiate with respect to them during training.
    fn stack_vars(&self, graph: &mut Graph, latent: Var, stem: Var, head: Var) -> Result<(Var, Var)> {
        self.check_latent(graph.value(latent).shape())?;
        let stem_out = graph.matvec(stem, latent)?;
        let activated = graph.tanh(stem_out);
        let head_out = graph.matvec(head, activated)?;
        Ok((stem_out, head_out))
    }

    /// Serialize into a model directory.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_tensor(dir.join("stem.tensor"), &self.stem)?;
        write_tensor(dir.join("head.tensor"), &self.head)?;
        let mut manifest = Manifest::new(dir);
        manifest.set("kind", "distilled_encoder");
        manifest.set(
            "latent_shape",
            format!(
                "{}x{}x{}",
                self.latent_shape[0], self.latent_shape[1], self.latent_shape[2]
            ),
        );
        manifest.set("stem", "stem.tensor");
        manifest.set("head", "head.tensor");
        if let Some(provenance) = &self.provenance {
            manifest.set("provenance", serde_json::to_string(provenance)?);
        }
        manifest.save()
    }

    /// Load an encoder serialized by [`DistilledEncoder::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        if manifest.get("kind")? != "distilled_encoder" {
            return Err(TinoError::Config("directory is not a distilled encoder".into()));
        }
        let latent_shape = manifest.get_shape("latent_shape")?;
        let stem = read_tensor(manifest.dir().join(manifest.get("stem")?))?;
        let head = read_tensor(manifest.dir().join(manifest.get("head")?))?;
        if stem.rank() != 2 || head.rank() != 2 || head.shape()[1] != stem.shape()[0] {
            return Err(TinoError::Config("inconsistent encoder weight shapes".into()));
        }
        let provenance = match manifest.get_opt("provenance") {
            Some(raw) => Some(serde_json::from_str(raw)?),
            None => None,
        };
        Ok(DistilledEncoder {
            latent_shape,
            stem,
            head,
            provenance,
        })
    }
}

impl LatentEncoder for DistilledEncoder {
    fn dim(&self) -> usize {
        self.head.shape()[0]
    }

    fn embed_var(&self, graph: &mut Graph, latent: Var) -> Result<Var> {
        let stem = graph.input(self.stem.clone());
        let head = graph.input(self.head.clone());
        let (_, head_out) = self.stack_vars(graph, latent, stem, head)?;
        graph.l2_normalize(head_out)
    }
}

impl LatentFeatures for DistilledEncoder {
    fn features_var(&self, graph: &mut Graph, latent: Var) -> Result<Vec<Var>> {
        let stem = graph.input(self.stem.clone());
        let head = graph.input(self.head.clone());
        let (stem_out, head_out) = self.stack_vars(graph, latent, stem, head)?;
        Ok(vec![stem_out, head_out])
    }
}

/// One point of the training curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub held_out: Option<f64>,
}

/// Result of a distillation run.
pub struct DistillOutcome {
    pub encoder: DistilledEncoder,
    pub curve: Vec<CurvePoint>,
    pub final_train_loss: f64,
    pub best_holdout: f64,
}

impl DistillOutcome {
    /// Training-curve CSV: iteration, loss, held_out_metric.
    pub fn write_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path.as_ref())?;
        writer.write_record(["iteration", "loss", "held_out_metric"])?;
        for point in &self.curve {
            writer.write_record([
                point.iteration.to_string(),
                point.loss.to_string(),
                point.held_out.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Per-image targets precomputed from the frozen teacher.
enum Targets {
    Embeddings(Vec<Vec<f64>>),
    FeatureStacks(Vec<Vec<Tensor>>),
}

struct PreparedData {
    latents: Vec<Tensor>,
    targets: Targets,
}

fn prepare_data(
    teacher: &ToyVisualEmbedder,
    autoencoder: &dyn AutoencoderBackend,
    images: &[PixelImage],
    objective: DistillObjective,
) -> Result<PreparedData> {
    let prepared: Vec<Result<(Tensor, Vec<f64>, Vec<Tensor>)>> = par::map(images, |image| {
        let latent = autoencoder.encode(image)?.into_tensor();
        let mut graph = Graph::new();
        let pixels = graph.input(image.tensor().clone());
        match objective {
            DistillObjective::Cosine => {
                let emb = teacher.embed_pixel_var(&mut graph, pixels)?;
                Ok((latent, graph.value(emb).data().to_vec(), Vec::new()))
            }
            DistillObjective::L1 => {
                let features = teacher.features_pixel_var(&mut graph, pixels)?;
                let stacks = features.into_iter().map(|v| graph.value(v).clone()).collect();
                Ok((latent, Vec::new(), stacks))
            }
        }
    });
    let mut latents = Vec::with_capacity(images.len());
    let mut embeddings = Vec::new();
    let mut stacks = Vec::new();
    for item in prepared {
        let (latent, embedding, stack) = item?;
        latents.push(latent);
        match objective {
            DistillObjective::Cosine => embeddings.push(embedding),
            DistillObjective::L1 => stacks.push(stack),
        }
    }
    Ok(PreparedData {
        latents,
        targets: match objective {
            DistillObjective::Cosine => Targets::Embeddings(embeddings),
            DistillObjective::L1 => Targets::FeatureStacks(stacks),
        },
    })
}

/// Loss and (stem, head) gradients for one item.
fn item_loss_and_grads(
    encoder: &DistilledEncoder,
    stem: &Tensor,
    head: &Tensor,
    latent: &Tensor,
    data: &PreparedData,
    index: usize,
    with_grads: bool,
) -> Result<(f64, Option<(Tensor, Tensor)>)> {
    let mut graph = Graph::new();
    let latent_var = graph.input(latent.clone());
    let stem_var = graph.input(stem.clone());
    let head_var = graph.input(head.clone());
    let (stem_out, head_out) = encoder.stack_vars(&mut graph, latent_var, stem_var, head_var)?;
    let loss = match &data.targets {
        Targets::Embeddings(targets) => {
            let target = graph.input(Tensor::new(vec![targets[index].len()], targets[index].clone())?);
            let cos = graph.cosine(head_out, target)?;
            let neg = graph.neg(cos);
            graph.offset(neg, 1.0)
        }
        Targets::FeatureStacks(targets) => {
            let stack = &targets[index];
            let mut numel = 0usize;
            let mut acc: Option<Var> = None;
            for (out, target) in [stem_out, head_out].iter().zip(stack) {
                numel += target.numel();
                let target_var = graph.input(target.clone());
                let diff = graph.sub(*out, target_var)?;
                let mag = graph.abs(diff);
                let sum = graph.sum(mag);
                acc = Some(match acc {
                    Some(prev) => graph.add(prev, sum)?,
                    None => sum,
                });
            }
            let total = acc.expect("two feature layers");
            graph.scale(total, 1.0 / numel as f64)
        }
    };
    let value = graph.value(loss).item();
    if !with_grads {
        return Ok((value, None));
    }
    let grads = graph.backward(loss)?;
    Ok((
        value,
        Some((grads.get(stem_var).clone(), grads.get(head_var).clone())),
    ))
}

fn holdout_metric(
    encoder: &DistilledEncoder,
    stem: &Tensor,
    head: &Tensor,
    data: &PreparedData,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = par::map(indices, |&i| {
        item_loss_and_grads(encoder, stem, head, &data.latents[i], data, i, false).map(|(l, _)| l)
    });
    let mut total = 0.0;
    for loss in losses {
        total += loss?;
    }
    let mean_loss = total / indices.len() as f64;
    Ok(match data.targets {
        // report mean cosine for the semantic twin, mean L1 for the other
        Targets::Embeddings(_) => 1.0 - mean_loss,
        Targets::FeatureStacks(_) => mean_loss,
    })
}

fn better(objective: DistillObjective, candidate: f64, incumbent: f64) -> bool {
    match objective {
        DistillObjective::Cosine => candidate > incumbent,
        DistillObjective::L1 => candidate < incumbent,
    }
}

/// Train a latent-domain student against a frozen pixel teacher on a set of
/// images already in memory.
pub fn distill_images(
    teacher: &ToyVisualEmbedder,
    autoencoder: &dyn AutoencoderBackend,
    images: &[PixelImage],
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(TinoError::Config("distillation dataset is empty".into()));
    }
    let data = prepare_data(teacher, autoencoder, images, config.objective)?;
    let latent_shape = [
        data.latents[0].shape()[0],
        data.latents[0].shape()[1],
        data.latents[0].shape()[2],
    ];

    let mut encoder = match config.stem_init {
        StemInit::Random => {
            DistilledEncoder::from_teacher(teacher, latent_shape, config.seed.wrapping_add(17))
        }
        StemInit::TeacherThroughDecode => {
            DistilledEncoder::teacher_through_decode(teacher, autoencoder, latent_shape)?
        }
    };

    // train/holdout split
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..images.len()).collect();
    indices.shuffle(&mut rng);
    let holdout_count = ((images.len() as f64) * config.holdout_fraction).round() as usize;
    let (holdout_indices, train_indices) = indices.split_at(holdout_count.min(images.len() - 1));
    let holdout_indices = holdout_indices.to_vec();
    let train_indices = train_indices.to_vec();

    let mut stem = encoder.stem.clone();
    let mut head = encoder.head.clone();
    let mut stem_opt = AdamW::new(stem.numel(), config.learning_rate, (0.9, 0.999), 1e-8, 0.0);
    let mut head_opt = AdamW::new(head.numel(), config.learning_rate, (0.9, 0.999), 1e-8, 0.0);

    let checkpoint_every = (config.iterations / 10).max(1);
    let mut curve = Vec::new();
    let mut best_holdout = holdout_metric(&encoder, &stem, &head, &data, &holdout_indices)?;
    let mut best_weights = (stem.clone(), head.clone());
    let mut final_train_loss = f64::NAN;

    for iteration in 1..=config.iterations {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| train_indices[rng.gen_range(0..train_indices.len())])
            .collect();
        let results = par::map(&batch, |&i| {
            item_loss_and_grads(&encoder, &stem, &head, &data.latents[i], &data, i, true)
        });
        let mut batch_loss = 0.0;
        let mut stem_grad = Tensor::zeros(stem.shape());
        let mut head_grad = Tensor::zeros(head.shape());
        for result in results {
            let (loss, grads) = result?;
            batch_loss += loss;
            let (gs, gh) = grads.expect("requested gradients");
            for (slot, g) in stem_grad.data_mut().iter_mut().zip(gs.data()) {
                *slot += g;
            }
            for (slot, g) in head_grad.data_mut().iter_mut().zip(gh.data()) {
                *slot += g;
            }
        }
        batch_loss /= config.batch_size as f64;
        let inv = 1.0 / config.batch_size as f64;
        for g in stem_grad.data_mut() {
            *g *= inv;
        }
        for g in head_grad.data_mut() {
            *g *= inv;
        }
        if !batch_loss.is_finite() {
            return Err(TinoError::NonFinite(format!(
                "distillation loss at iteration {iteration} (lr = {}, objective = {:?})",
                config.learning_rate, config.objective
            )));
        }
        final_train_loss = batch_loss;

        let stem_grads = stem_grad.data().to_vec();
        stem_opt.step(stem.data_mut(), &stem_grads)?;
        let head_grads = head_grad.data().to_vec();
        head_opt.step(head.data_mut(), &head_grads)?;

        let at_checkpoint = iteration % checkpoint_every == 0 || iteration == config.iterations;
        let held_out = if at_checkpoint && !holdout_indices.is_empty() {
            let metric = holdout_metric(&encoder, &stem, &head, &data, &holdout_indices)?;
            if best_holdout.is_nan() || better(config.objective, metric, best_holdout) {
                best_holdout = metric;
                best_weights = (stem.clone(), head.clone());
            }
            Some(metric)
        } else {
            None
        };
        if at_checkpoint || iteration == 1 {
            curve.push(CurvePoint {
                iteration,
                loss: batch_loss,
                held_out,
            });
        }
    }

    // keep the best held-out checkpoint when a holdout exists
    if !holdout_indices.is_empty() && !best_holdout.is_nan() {
        encoder.stem = best_weights.0;
        encoder.head = best_weights.1;
    } else {
        encoder.stem = stem;
        encoder.head = head;
        best_holdout = f64::NAN;
    }
    encoder.provenance = Some(DistillProvenance {
        teacher: crate::backends::VisualEmbedder::provenance(teacher),
        objective: config.objective,
        iterations_run: config.iterations,
        final_train_loss,
        best_holdout,
    });
    Ok(DistillOutcome {
        encoder,
        curve,
        final_train_loss,
        best_holdout,
    })
}

/// Train from a directory of image files (the external dataset interface).
pub fn distill(
    teacher: &ToyVisualEmbedder,
    autoencoder: &dyn AutoencoderBackend,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    let dir = config
        .dataset_path
        .as_ref()
        .ok_or_else(|| TinoError::Config("distillation needs a dataset_path".into()))?;
    let images = load_image_dir(dir)?;
    distill_images(teacher, autoencoder, &images, config)
}

/// Load every PNG in a directory, sorted by file name.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<PixelImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())
        .map_err(|source| TinoError::IoAt {
            path: dir.as_ref().to_path_buf(),
            source,
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(TinoError::Config(format!(
            "no .png images in {}",
            dir.as_ref().display()
        )));
    }
    let images = par::map(&paths, PixelImage::load);
    images.into_iter().collect()
}

/// Per-image evaluation of a student against its teacher.
#[derive(Debug, Clone, Serialize)]
pub struct DistillReport {
    pub objective: DistillObjective,
    pub mean: f64,
    pub per_image: Vec<f64>,
}

/// Evaluate a distilled encoder on a held-out image set: mean cosine for the
/// semantic twin, mean L1 for the perceptual twin.
pub fn evaluate_distillation(
    student: &DistilledEncoder,
    teacher: &ToyVisualEmbedder,
    autoencoder: &dyn AutoencoderBackend,
    images: &[PixelImage],
    objective: DistillObjective,
) -> Result<DistillReport> {
    if images.is_empty() {
        return Err(TinoError::Config("evaluation dataset is empty".into()));
    }
    let data = prepare_data(teacher, autoencoder, images, objective)?;
    let per_image = par::map(&(0..images.len()).collect::<Vec<_>>(), |&i| {
        item_loss_and_grads(student, &student.stem, &student.head, &data.latents[i], &data, i, false)
            .map(|(loss, _)| match objective {
                DistillObjective::Cosine => 1.0 - loss,
                DistillObjective::L1 => loss,
            })
    });
    let per_image: Result<Vec<f64>> = per_image.into_iter().collect();
    let per_image = per_image?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(DistillReport {
        objective,
        mean,
        per_image,
    })
}

/// Procedurally generated training images: gradients, colored shapes, and
/// smooth sinusoid textures.
pub fn synthetic_dataset(count: usize, height: usize, width: usize, seed: u64) -> Vec<PixelImage> {
    let indices: Vec<usize> = (0..count).collect();
    par::map(&indices, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        synthetic_image(&mut rng, height, width)
    })
}

fn synthetic_image(rng: &mut ChaCha8Rng, height: usize, width: usize) -> PixelImage {
    let kind = rng.gen_range(0..3u8);
    let color_a: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let color_b: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    match kind {
        0 => {
            // oriented linear gradient between two colors
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (angle.sin(), angle.cos());
            PixelImage::from_fn(height, width, |y, x| {
                let u = ((y as f64 / height as f64 - 0.5) * dy
                    + (x as f64 / width as f64 - 0.5) * dx
                    + 0.5)
                    .clamp(0.0, 1.0);
                [
                    color_a[0] * (1.0 - u) + color_b[0] * u,
                    color_a[1] * (1.0 - u) + color_b[1] * u,
                    color_a[2] * (1.0 - u) + color_b[2] * u,
                ]
            })
        }
        1 => {
            // axis-aligned rectangle and a disc over a flat background
            let cy = rng.gen_range(0.2..0.8);
            let cx = rng.gen_range(0.2..0.8);
            let radius = rng.gen_range(0.1..0.3);
            let top = rng.gen_range(0.0..0.5);
            let left = rng.gen_range(0.0..0.5);
            let (rect_h, rect_w) = (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5));
            let color_c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            PixelImage::from_fn(height, width, |y, x| {
                let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
                let in_disc =
                    (fy - cy) * (fy - cy) + (fx - cx) * (fx - cx) <= radius * radius;
                let in_rect = fy >= top && fy <= top + rect_h && fx >= left && fx <= left + rect_w;
                if in_disc {
                    color_c
                } else if in_rect {
                    color_b
                } else {
                    color_a
                }
            })
        }
        _ => {
            // smooth texture from a few random sinusoids
            let fy1 = rng.gen_range(1.0..4.0);
            let fx1 = rng.gen_range(1.0..4.0);
            let fy2 = rng.gen_range(1.0..6.0);
            let fx2 = rng.gen_range(1.0..6.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            PixelImage::from_fn(height, width, |y, x| {
                let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
                let u = 0.5
                    + 0.25 * (std::f64::consts::TAU * (fy1 * fy + fx1 * fx) + phase).sin()
                    + 0.25 * (std::f64::consts::TAU * (fy2 * fy - fx2 * fx)).cos();
                let u = u.clamp(0.0, 1.0);
                [
                    color_a[0] * (1.0 - u) + color_b[0] * u,
                    color_a[1] * (1.0 - u) + color_b[1] * u,
                    color_a[2] * (1.0 - u) + color_b[2] * u,
                ]
            })
        }
    }
}

/// Write a synthetic dataset into a directory as PNG files.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for (i, image) in synthetic_dataset(count, height, width, seed).iter().enumerate() {
        image.save(dir.as_ref().join(format!("synthetic_{i:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::ToyAutoencoder;

    fn teacher() -> ToyVisualEmbedder {
        ToyVisualEmbedder::new(16, 32, 11).unwrap()
    }

    #[test]
    fn teacher_through_decode_matches_teacher_of_decode() {
        let autoencoder = ToyAutoencoder::new(2).unwrap();
        let teacher = teacher();
        let student =
            DistilledEncoder::teacher_through_decode(&teacher, &autoencoder, [4, 16, 16]).unwrap();
        let image = synthetic_dataset(1, 32, 32, 8).pop().unwrap();
        let latent = autoencoder.encode(&image).unwrap();
        let student_embed = student.embed(&latent).unwrap();
        let teacher_embed = teacher
            .embed_pixel(&autoencoder.decode(&latent).unwrap())
            .unwrap();
        for (s, t) in student_embed.iter().zip(&teacher_embed) {
            assert!((s - t).abs() < 1e-10, "{s} vs {t}");
        }
    }

    #[test]
    fn copy_initialization_is_a_fixed_point_at_factor_one() {
        // factor 1: decode is the identity, so teacher∘decode equals the
        // teacher and the initial cosine distance is zero; training holds it
        let autoencoder = ToyAutoencoder::new(1).unwrap();
        let teacher = teacher();
        let images = synthetic_dataset(24, 32, 32, 77);
        let config = DistillConfig {
            iterations: 5,
            batch_size: 4,
            learning_rate: 1e-4,
            objective: DistillObjective::Cosine,
            stem_init: StemInit::TeacherThroughDecode,
            holdout_fraction: 0.25,
            seed: 1,
            ..DistillConfig::default()
        };
        let outcome = distill_images(&teacher, &autoencoder, &images, &config).unwrap();
        assert!(outcome.final_train_loss.abs() < 1e-9, "{}", outcome.final_train_loss);
        assert!((outcome.best_holdout - 1.0).abs() < 1e-9);
    }

    #[test]
    fn l1_initial_loss_equals_pooling_residual_oracle() {
        let autoencoder = ToyAutoencoder::new(2).unwrap();
        let teacher = teacher();
        let images = synthetic_dataset(6, 32, 32, 13);
        let student =
            DistilledEncoder::teacher_through_decode(&teacher, &autoencoder, [4, 16, 16]).unwrap();
        let report = evaluate_distillation(
            &student,
            &teacher,
            &autoencoder,
            &images,
            DistillObjective::L1,
        )
        .unwrap();
        // oracle: mean feature difference of teacher(decode(encode(I))) vs teacher(I)
        let mut expect = 0.0;
        for image in &images {
            let roundtrip = autoencoder
                .decode(&autoencoder.encode(image).unwrap())
                .unwrap();
            let mut graph = Graph::new();
            let a = graph.input(roundtrip.tensor().clone());
            let fa = teacher.features_pixel_var(&mut graph, a).unwrap();
            let b = graph.input(image.tensor().clone());
            let fb = teacher.features_pixel_var(&mut graph, b).unwrap();
            let mut total = 0.0;
            let mut numel = 0;
            for (va, vb) in fa.iter().zip(&fb) {
                numel += graph.value(*va).numel();
                total += graph
                    .value(*va)
                    .data()
                    .iter()
                    .zip(graph.value(*vb).data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>();
            }
            expect += total / numel as f64;
        }
        expect /= images.len() as f64;
        assert!((report.mean - expect).abs() < 1e-10, "{} vs {expect}", report.mean);
    }

    #[test]
    fn short_training_run_improves_the_student() {
        let autoencoder = ToyAutoencoder::new(2).unwrap();
        let teacher = teacher();
        let images = synthetic_dataset(60, 32, 32, 5);
        let config = DistillConfig {
            iterations: 150,
            batch_size: 8,
            learning_rate: 3e-3,
            objective: DistillObjective::Cosine,
            holdout_fraction: 0.2,
            seed: 3,
            ..DistillConfig::default()
        };
        let before = {
            let student = DistilledEncoder::from_teacher(&teacher, [4, 16, 16], config.seed.wrapping_add(17));
            evaluate_distillation(&student, &teacher, &autoencoder, &images, DistillObjective::Cosine)
                .unwrap()
                .mean
        };
        let outcome = distill_images(&teacher, &autoencoder, &images, &config).unwrap();
        assert!(outcome.best_holdout > before + 0.1, "{} vs {before}", outcome.best_holdout);
        assert_eq!(outcome.encoder.dim(), teacher.dim());
        assert!(!outcome.curve.is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let autoencoder = ToyAutoencoder::new(2).unwrap();
        let config = DistillConfig::default();
        assert!(distill_images(&teacher(), &autoencoder, &[], &config).is_err());
    }

    #[test]
    fn encoder_roundtrips_through_model_directory() {
        let autoencoder = ToyAutoencoder::new(2).unwrap();
        let teacher = teacher();
        let images = synthetic_dataset(12, 32, 32, 21);
        let config = DistillConfig {
            iterations: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            holdout_fraction: 0.2,
            ..DistillConfig::default()
        };
        let outcome = distill_images(&teacher, &autoencoder, &images, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        outcome.encoder.save(dir.path()).unwrap();
        let loaded = DistilledEncoder::load(dir.path()).unwrap();
        let latent = autoencoder.encode(&images[0]).unwrap();
        assert_eq!(
            outcome.encoder.embed(&latent).unwrap(),
            loaded.embed(&latent).unwrap()
        );
        assert!(loaded.provenance().is_some());
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let a = synthetic_dataset(4, 16, 16, 9);
        let b = synthetic_dataset(4, 16, 16, 9);
        assert_eq!(a, b);
        for image in &a {
            assert!(image.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
