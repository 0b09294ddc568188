//! Model-directory adapter: backends loaded from a self-describing
//! directory on disk.
//!
//! Layout: a `manifest.txt` of `key = value` lines declaring the backend
//! kind, latent geometry, condition dimension, spatial factor, and the path
//! of the trained noise-level table, plus whatever tensors the kind needs.
//! Tensors are stored flat little-endian with a JSON header:
//!
//! ```text
//! [u32 little-endian header length][header JSON {"shape": [...], "dtype": "f64"}][raw data]
//! ```
//!
//! The adapter always installs the directory's own schedule table as the
//! pipeline schedule, and timesteps stay continuous end to end: the bundled
//! denoiser kinds consume t directly through the schedule, and
//! [`timestep_embedding_var`](crate::backends::timestep_embedding_var) is
//! the conditioning hook for backbones that want an embedded timestep.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backends::analytic::GaussianAnalyticDenoiser;
use crate::backends::toy::{make_toy_embedders, ToyAutoencoder, ToySegmenter, ToyVisualEmbedder};
use crate::backends::{
    AutoencoderBackend, Backends, DecodePixelEncoder, DenoiserBackend, EmbedderStack,
    VisualEmbedder,
};
use crate::diffusion::Schedule;
use crate::error::{Result, TinoError};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
}

/// Write a tensor in the flat little-endian format.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let header = serde_json::to_vec(&TensorHeader {
        shape: tensor.shape().to_vec(),
        dtype: "f64".into(),
    })?;
    let mut file = std::fs::File::create(path.as_ref()).map_err(|source| TinoError::IoAt {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for v in tensor.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor in the flat little-endian format.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut file = std::fs::File::open(path.as_ref()).map_err(|source| TinoError::IoAt {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: TensorHeader = serde_json::from_slice(&header_bytes)?;
    if header.dtype != "f64" {
        return Err(TinoError::Config(format!(
            "unsupported tensor dtype {:?} in {}",
            header.dtype,
            path.as_ref().display()
        )));
    }
    let numel: usize = header.shape.iter().product();
    let mut raw = vec![0u8; numel * 8];
    file.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(header.shape, data)
}

/// Parsed `key = value` manifest.
#[derive(Debug, Clone)]
pub struct Manifest {
    dir: PathBuf,
    entries: HashMap<String, String>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|source| TinoError::IoAt {
            path: path.clone(),
            source,
        })?;
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TinoError::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Manifest { dir, entries })
    }

    pub fn save(&self) -> Result<()> {
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        let body: String = keys
            .iter()
            .map(|k| format!("{k} = {}\n", self.entries[*k]))
            .collect();
        std::fs::write(self.dir.join(MANIFEST_NAME), body)?;
        Ok(())
    }

    pub fn new(dir: impl AsRef<Path>) -> Self {
        Manifest {
            dir: dir.as_ref().to_path_buf(),
            entries: HashMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| TinoError::Config(format!("manifest missing required field `{key}`")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| TinoError::Config(format!("manifest field `{key}` must be an integer")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .parse()
            .map_err(|_| TinoError::Config(format!("manifest field `{key}` must be a number")))
    }

    /// `CxHxW` shape triple.
    pub fn get_shape(&self, key: &str) -> Result<[usize; 3]> {
        let raw = self.get(key)?;
        let parts: Vec<usize> = raw
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| TinoError::Config(format!("manifest field `{key}` must look like 4x16x16")))?;
        if parts.len() != 3 {
            return Err(TinoError::Config(format!(
                "manifest field `{key}` must have three dimensions"
            )));
        }
        Ok([parts[0], parts[1], parts[2]])
    }

    pub fn tensor(&self, key: &str) -> Result<Tensor> {
        read_tensor(self.dir.join(self.get(key)?))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Load a full backend bundle from a model directory. The directory's
/// schedule table becomes the pipeline schedule (interpolated-table kind).
pub fn load_backends(dir: impl AsRef<Path>) -> Result<Backends> {
    let manifest = Manifest::load(&dir)?;
    let kind = manifest.get("kind")?;
    match kind {
        "analytic_gaussian" => load_analytic_gaussian(&manifest),
        other => Err(TinoError::Config(format!(
            "unsupported backend kind `{other}`"
        ))),
    }
}

fn load_analytic_gaussian(manifest: &Manifest) -> Result<Backends> {
    let latent_shape = manifest.get_shape("latent_shape")?;
    let condition_dim = manifest.get_usize("condition_dim")?;
    let factor = manifest.get_usize("spatial_factor")?;
    let schedule_table = manifest.tensor("schedule_table")?;
    if schedule_table.rank() != 1 {
        return Err(TinoError::Config("schedule_table must be rank 1".into()));
    }
    let schedule = Schedule::from_table(schedule_table.data().to_vec())?;

    let prior_mean = manifest.tensor("mu")?;
    if prior_mean.shape() != latent_shape {
        return Err(TinoError::Config(format!(
            "mu shape {:?} does not match latent_shape {:?}",
            prior_mean.shape(),
            latent_shape
        )));
    }
    let sigma = manifest.get_f64("sigma")?;

    let autoencoder = Arc::new(ToyAutoencoder::new(factor)?);
    if autoencoder.latent_channels() != latent_shape[0] {
        return Err(TinoError::Config(format!(
            "latent_shape {:?} does not match autoencoder output ({} channels at factor {factor})",
            latent_shape,
            autoencoder.latent_channels()
        )));
    }

    let embed_dim = manifest.get_usize("embed_dim")?;
    let embed_seed = manifest.get_usize("embed_seed")? as u64;
    let (text, visual) = make_toy_embedders(embed_dim, embed_seed)?;
    let visual: Arc<dyn VisualEmbedder> = Arc::new(visual);
    let dino: Option<Arc<dyn VisualEmbedder>> = match manifest.get_opt("dino_seed") {
        Some(seed) => {
            let seed: u64 = seed
                .parse()
                .map_err(|_| TinoError::Config("manifest field `dino_seed` must be an integer".into()))?;
            Some(Arc::new(ToyVisualEmbedder::new(embed_dim, embed_dim * 2, seed)?))
        }
        None => None,
    };

    let denoiser: Arc<dyn DenoiserBackend> = Arc::new(
        GaussianAnalyticDenoiser::new(prior_mean, sigma, schedule.clone())?
            .with_condition_dim(condition_dim),
    );

    let fallback = Arc::new(DecodePixelEncoder::new(
        autoencoder.clone() as Arc<dyn AutoencoderBackend>,
        visual.clone(),
    ));
    Ok(Backends {
        schedule,
        denoiser,
        autoencoder,
        embedders: EmbedderStack {
            text: Arc::new(text),
            visual,
            semantic_latent: fallback.clone(),
            perceptual_latent: fallback,
            dino,
        },
        segmenter: Arc::new(ToySegmenter::new()),
    })
}

/// Serialize an analytic Gaussian backend bundle into a model directory that
/// [`load_backends`] can read back. Used to build test fixtures.
pub fn write_analytic_fixture(
    dir: impl AsRef<Path>,
    prior_mean: &Tensor,
    sigma: f64,
    schedule_table: &[f64],
    factor: usize,
    embed_dim: usize,
    embed_seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_tensor(dir.join("mu.tensor"), prior_mean)?;
    write_tensor(
        dir.join("schedule.tensor"),
        &Tensor::new(vec![schedule_table.len()], schedule_table.to_vec())?,
    )?;
    let mut manifest = Manifest::new(dir);
    manifest.set("kind", "analytic_gaussian");
    manifest.set(
        "latent_shape",
        format!(
            "{}x{}x{}",
            prior_mean.shape()[0],
            prior_mean.shape()[1],
            prior_mean.shape()[2]
        ),
    );
    manifest.set("condition_dim", embed_dim);
    manifest.set("spatial_factor", factor);
    manifest.set("schedule_table", "schedule.tensor");
    manifest.set("mu", "mu.tensor");
    manifest.set("sigma", sigma);
    manifest.set("embed_dim", embed_dim);
    manifest.set("embed_seed", embed_seed);
    manifest.set("dino_seed", embed_seed.wrapping_add(71));
    manifest.save()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expect_load_error(dir: &Path) -> TinoError {
        match load_backends(dir) {
            Err(e) => e,
            Ok(_) => panic!("expected load_backends to fail"),
        }
    }

    #[test]
    fn tensor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let tensor = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 9.75, -0.125]).unwrap();
        let path = dir.path().join("t.tensor");
        write_tensor(&path, &tensor).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(tensor, back);
    }

    #[test]
    fn missing_schedule_table_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let mean = Tensor::zeros(&[4, 4, 4]);
        write_analytic_fixture(dir.path(), &mean, 1.0, &[1.0, 0.5, 0.1], 8, 16, 5).unwrap();
        // remove the schedule_table line
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let without: String = text
            .lines()
            .filter(|l| !l.starts_with("schedule_table"))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&manifest_path, without).unwrap();
        let err = expect_load_error(dir.path());
        assert!(err.to_string().contains("schedule_table"), "{err}");
    }

    #[test]
    fn mismatched_latent_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        // 3 channels is wrong for a factor-8 toy autoencoder (it lifts to 4)
        let mean = Tensor::zeros(&[3, 4, 4]);
        write_analytic_fixture(dir.path(), &mean, 1.0, &[1.0, 0.5, 0.1], 8, 16, 5).unwrap();
        let err = expect_load_error(dir.path());
        assert!(err.to_string().contains("autoencoder"), "{err}");
    }

    #[test]
    fn fixture_roundtrips_one_denoise_step() {
        let dir = tempfile::tempdir().unwrap();
        let mean = Tensor::new(vec![4, 2, 2], (0..16).map(|i| i as f64 * 0.05).collect()).unwrap();
        let table: Vec<f64> = (0..=10).map(|i| 1.0 - i as f64 / 10.0).collect();
        write_analytic_fixture(dir.path(), &mean, 0.8, &table, 8, 16, 5).unwrap();
        let backends = load_backends(dir.path()).unwrap();
        assert_eq!(backends.metadata().latent_shape, [4, 2, 2]);
        assert_eq!(backends.schedule.train_steps(), 10);

        // one prediction through the loaded denoiser matches the in-memory one
        let schedule = Schedule::from_table(table).unwrap();
        let reference = GaussianAnalyticDenoiser::new(mean, 0.8, schedule).unwrap();
        let latent = crate::diffusion::LatentImage::new(
            Tensor::new(vec![4, 2, 2], (0..16).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap(),
        )
        .unwrap();
        let condition = crate::backends::ConditionEmbedding::new(vec![0.0; 16]);
        let loaded_pred = backends.denoiser.predict(&latent, 0.45, &condition).unwrap();
        let reference_pred = reference.predict(&latent, 0.45, &condition).unwrap();
        assert_eq!(loaded_pred, reference_pred);
    }
}
