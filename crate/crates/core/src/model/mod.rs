//! A desk-scale patch-transformer depth network.
//!
//! Encoder: non-overlapping patch embedding plus learned positional
//! embedding, `n_blocks` pre-norm blocks (multi-head self-attention, GELU
//! MLP), final layer norm. Decoder: 1x1 projection of the token grid, two
//! stages of bilinear upsampling followed by a 3x3 convolution and GELU, and
//! a 1-channel head with `softplus + 1e-3` so every output is positive
//! relative depth.

mod checkpoint;
mod layers;
pub(crate) mod network;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use network::DEPTH_FLOOR;
pub use params::{BlockParams, Params, Tensor};

use crate::depthdata::{DepthMap, RgbImage};

/// Hidden width of each block MLP, as a multiple of `embed_dim`.
pub const MLP_RATIO: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input is {got:?} but the model expects {expected:?}")]
    SizeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("feature grid {got:?}x{got_dim} does not match {expected:?}x{expected_dim}")]
    FeatureMismatch {
        expected: (usize, usize),
        expected_dim: usize,
        got: (usize, usize),
        got_dim: usize,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("checkpoint array `{name}` has shape {found:?}, config requires {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub decoder_channels: usize,
    /// (height, width)
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The standard desk-scale network: 64x96 input, 8-pixel patches.
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            n_blocks: 2,
            n_heads: 4,
            decoder_channels: 8,
            input_size: (64, 96),
        }
    }

    /// A small network suited to finite-difference checks (< 10k parameters).
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 16,
            n_blocks: 1,
            n_heads: 2,
            decoder_channels: 4,
            input_size: (8, 12),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let counts = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("decoder_channels", self.decoder_channels),
            ("input height", self.input_size.0),
            ("input width", self.input_size.1),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.input_size.0 < self.patch_size || self.input_size.1 < self.patch_size {
            return bad(format!(
                "input {:?} is smaller than one {}-pixel patch",
                self.input_size, self.patch_size
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        Ok(())
    }

    /// Token grid (rows, cols). Border pixels beyond the last whole patch
    /// are not seen by the encoder.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_size.0 / self.patch_size, self.input_size.1 / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn mlp_hidden(&self) -> usize {
        MLP_RATIO * self.embed_dim
    }

    /// Resolution of the first decoder stage: half the input, never below
    /// the token grid.
    pub fn stage1_size(&self) -> (usize, usize) {
        let (gh, gw) = self.grid();
        let (h, w) = self.input_size;
        ((h / 2).max(gh), (w / 2).max(gw))
    }

    pub fn num_params(&self) -> usize {
        Params::layout(self).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Learnable state of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub init_seed: u64,
}

impl ModelState {
    /// Hex SHA-256 over the configuration and every parameter bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(checkpoint::header_text(self).as_bytes());
        for t in self.params.tensors() {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Encoder output: one `dim`-vector per patch, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: (usize, usize),
    dim: usize,
    tokens: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: (usize, usize), dim: usize, tokens: Vec<f64>) -> Result<Self> {
        if tokens.len() != grid.0 * grid.1 * dim || dim == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} values do not form a {:?} grid of {dim}-vectors",
                tokens.len(),
                grid
            )));
        }
        Ok(Self { grid, dim, tokens })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelState { config: *config, params: Params::init(config, &mut rng), init_seed: seed })
}

pub(crate) fn check_input(config: &ModelConfig, image: &RgbImage) -> Result<()> {
    if image.shape() != config.input_size {
        return Err(ModelError::SizeMismatch { expected: config.input_size, got: image.shape() });
    }
    Ok(())
}

pub fn encode(state: &ModelState, image: &RgbImage) -> Result<FeatureMap> {
    check_input(&state.config, image)?;
    let tr = network::encode(&state.params, &state.config, image.data());
    FeatureMap::new(state.config.grid(), state.config.embed_dim, tr.feat)
}

/// Runs the decoder on encoder features.
pub fn decode(state: &ModelState, features: &FeatureMap) -> Result<DepthMap> {
    let cfg = &state.config;
    if features.grid() != cfg.grid() || features.dim() != cfg.embed_dim {
        return Err(ModelError::FeatureMismatch {
            expected: cfg.grid(),
            expected_dim: cfg.embed_dim,
            got: features.grid(),
            got_dim: features.dim(),
        });
    }
    let tr = network::decode(&state.params, cfg, features.tokens());
    depth_from(cfg, tr.depth)
}

/// Predicts positive relative depth at the input resolution.
pub fn forward(state: &ModelState, image: &RgbImage) -> Result<DepthMap> {
    decode(state, &encode(state, image)?)
}

pub(crate) fn depth_from(cfg: &ModelConfig, values: Vec<f64>) -> Result<DepthMap> {
    let (h, w) = cfg.input_size;
    DepthMap::new(h, w, values)
        .map_err(|e| ModelError::Corrupt(format!("network produced an invalid depth map: {e}")))
}
