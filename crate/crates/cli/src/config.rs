//! Command arguments, config-file merging and the resolved-config file.
//!
//! A config file is TOML with one table per command, keyed by the command
//! name, e.g.
//!
//! ```toml
//! [finetune]
//! data = "data/train"
//! seed = 3
//!
//! [finetune.optim]
//! steps = 500
//! lr = 1e-3
//! ```
//!
//! Values given as flags win over the file, the file wins over the
//! `SURGIDEPTH_SEED` environment variable (seed only), and built-in
//! defaults fill whatever is left. Every run writes the fully resolved table
//! to `resolved_config.toml` in its output directory; passing that file back
//! with `--config` repeats the run. The output directory itself is never
//! recorded.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use surgidepth::model::ModelConfig;
use surgidepth::semisup::PerturbationSpec;
use surgidepth::train::TrainConfig;

use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const SEED_ENV: &str = "SURGIDEPTH_SEED";

#[derive(Parser, Debug)]
#[command(name = "surgidepth", version, about = "Monocular depth fine-tuning and evaluation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with analytic depth.
    Synth(SynthArgs),
    /// Train a teacher model from scratch on a labeled dataset.
    TrainTeacher(TrainArgs),
    /// Fine-tune a model (fresh or from a checkpoint) with L1 loss.
    Finetune(TrainArgs),
    /// Label images with a teacher checkpoint.
    PseudoLabel(PseudoArgs),
    /// Train a student on labeled data plus perturbed pseudo-labeled data.
    TrainStudent(StudentArgs),
    /// Median-scaled Abs. Rel. and delta1 against ground truth.
    Eval(EvalArgs),
    /// Colour-map depth files to PNG (red near, blue far).
    Render(RenderArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainTeacher(_) => "train-teacher",
            Command::Finetune(_) => "finetune",
            Command::PseudoLabel(_) => "pseudo-label",
            Command::TrainStudent(_) => "train-student",
            Command::Eval(_) => "eval",
            Command::Render(_) => "render",
        }
    }
}

/// Fills unset values from a lower-precedence source.
pub trait Merge {
    fn merge(&mut self, lower: Self);
}

impl<T> Merge for Option<T> {
    fn merge(&mut self, lower: Self) {
        if self.is_none() {
            *self = lower;
        }
    }
}

impl<T> Merge for Vec<T> {
    fn merge(&mut self, lower: Self) {
        if self.is_empty() {
            *self = lower;
        }
    }
}

macro_rules! impl_merge {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl Merge for $t {
            fn merge(&mut self, lower: Self) {
                $( self.$f.merge(lower.$f); )*
            }
        }
    };
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// ramp, sphere-cap, lumen-tube or mixed (cycles through all three).
    #[arg(long)]
    pub primitive: Option<String>,
    /// Image size as HxW.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// pfm or png16.
    #[arg(long)]
    pub depth_format: Option<String>,
    /// Metres (or units) per 16-bit step for png16 output.
    #[arg(long)]
    pub depth_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}
impl_merge!(SynthArgs { n, primitive, size, seed, depth_format, depth_scale, out });

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    /// toy or tiny; individual fields below override the preset.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub decoder_channels: Option<usize>,
    /// Network input size as HxW; samples are resized to it.
    #[arg(long)]
    pub input_size: Option<String>,
}
impl_merge!(ModelArgs { preset, patch_size, embed_dim, n_blocks, n_heads, decoder_channels, input_size });

impl ModelArgs {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn resolve(&mut self) -> Result<ModelConfig, CliError> {
        let preset = self.preset.get_or_insert_with(|| "toy".into());
        let base = match preset.as_str() {
            "toy" => ModelConfig::toy(),
            "tiny" => ModelConfig::tiny(),
            other => return Err(CliError::usage(format!("unknown model preset `{other}`"))),
        };
        let cfg = ModelConfig {
            patch_size: *self.patch_size.get_or_insert(base.patch_size),
            embed_dim: *self.embed_dim.get_or_insert(base.embed_dim),
            n_blocks: *self.n_blocks.get_or_insert(base.n_blocks),
            n_heads: *self.n_heads.get_or_insert(base.n_heads),
            decoder_channels: *self.decoder_channels.get_or_insert(base.decoder_channels),
            input_size: parse_size(
                self.input_size
                    .get_or_insert_with(|| format!("{}x{}", base.input_size.0, base.input_size.1)),
            )?,
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimArgs {
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Weight of the frozen-encoder feature-alignment term.
    #[arg(long)]
    pub lambda_feat: Option<f64>,
}
impl_merge!(OptimArgs { steps, lr, batch, beta1, beta2, epsilon, weight_decay, lambda_feat });

impl OptimArgs {
    pub fn resolve(&mut self, seed: u64) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: *self.lr.get_or_insert(d.learning_rate),
            batch_size: *self.batch.get_or_insert(d.batch_size),
            max_steps: *self.steps.get_or_insert(d.max_steps),
            beta1: *self.beta1.get_or_insert(d.beta1),
            beta2: *self.beta2.get_or_insert(d.beta2),
            epsilon: *self.epsilon.get_or_insert(d.epsilon),
            weight_decay: *self.weight_decay.get_or_insert(d.weight_decay),
            lambda_feat: *self.lambda_feat.get_or_insert(d.lambda_feat),
            seed,
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Labeled dataset directory (with manifest.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint whose encoder supplies the feature-alignment target.
    #[arg(long)]
    pub frozen: Option<PathBuf>,
    /// Seed for initialisation and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(default)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(default)]
    pub optim: OptimArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}
impl_merge!(TrainArgs { data, init, frozen, seed, model, optim, out });

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PseudoArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Dataset directory or a folder of PNG images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}
impl_merge!(PseudoArgs { teacher, images, out });

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerturbArgs {
    #[arg(long)]
    pub brightness_jitter: Option<f64>,
    #[arg(long)]
    pub contrast_jitter: Option<f64>,
    #[arg(long)]
    pub saturation_jitter: Option<f64>,
    #[arg(long)]
    pub cutmix_prob: Option<f64>,
    #[arg(long)]
    pub cutmix_area_min: Option<f64>,
    #[arg(long)]
    pub cutmix_area_max: Option<f64>,
    /// Seed of the perturbation streams (defaults to the run seed).
    #[arg(long)]
    pub perturb_seed: Option<u64>,
}
impl_merge!(PerturbArgs {
    brightness_jitter, contrast_jitter, saturation_jitter, cutmix_prob, cutmix_area_min,
    cutmix_area_max, perturb_seed,
});

impl PerturbArgs {
    pub fn resolve(&mut self, seed: u64) -> Result<PerturbationSpec, CliError> {
        let d = PerturbationSpec::default();
        let spec = PerturbationSpec {
            brightness_jitter: *self.brightness_jitter.get_or_insert(d.brightness_jitter),
            contrast_jitter: *self.contrast_jitter.get_or_insert(d.contrast_jitter),
            saturation_jitter: *self.saturation_jitter.get_or_insert(d.saturation_jitter),
            cutmix_prob: *self.cutmix_prob.get_or_insert(d.cutmix_prob),
            cutmix_area_range: (
                *self.cutmix_area_min.get_or_insert(d.cutmix_area_range.0),
                *self.cutmix_area_max.get_or_insert(d.cutmix_area_range.1),
            ),
            seed: *self.perturb_seed.get_or_insert(seed),
        };
        spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudentArgs {
    /// Teacher checkpoint; its encoder is the frozen alignment target.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Labeled dataset directory.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Unlabeled images, or a pseudo-label directory from `pseudo-label`.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// TOML file with perturbation fields (flags override it).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Labeled:unlabeled batch ratio, e.g. 1:1.
    #[arg(long)]
    pub interleave: Option<String>,
    /// Seed for student initialisation and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(default)]
    pub perturb: PerturbArgs,
    #[command(flatten)]
    #[serde(default)]
    pub optim: OptimArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}
impl_merge!(StudentArgs { teacher, labeled, unlabeled, spec, interleave, seed, perturb, optim, out });

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Prediction directory (repeatable): a dataset directory, or `<id>.pfm`
    /// / `<id>.png` files.
    #[arg(long)]
    #[serde(default)]
    pub pred: Vec<PathBuf>,
    /// Checkpoint to run on the ground-truth images (repeatable).
    #[arg(long)]
    #[serde(default)]
    pub model: Vec<PathBuf>,
    /// Row label per --pred then per --model, in order.
    #[arg(long)]
    #[serde(default)]
    pub method: Vec<String>,
    /// Ground-truth dataset directory (repeatable, one column each).
    #[arg(long)]
    #[serde(default)]
    pub gt: Vec<PathBuf>,
    /// Column label per --gt.
    #[arg(long)]
    #[serde(default)]
    pub case: Vec<String>,
    /// per-frame or per-sequence.
    #[arg(long)]
    pub scaling: Option<String>,
    /// Scale applied to 16-bit PNG predictions.
    #[arg(long)]
    pub pred_scale: Option<f64>,
    /// Also write model predictions as PFM files.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub save_pred: Option<bool>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}
impl_merge!(EvalArgs { pred, model, method, gt, case, scaling, pred_scale, save_pred, out });

#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RenderArgs {
    /// A depth file or a directory of them.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Scale applied to 16-bit PNG depth.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}
impl_merge!(RenderArgs { depth, scale, out });

/// On-disk config: one optional table per command.
#[derive(Serialize, Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthArgs>,
    #[serde(rename = "train-teacher", skip_serializing_if = "Option::is_none")]
    pub train_teacher: Option<TrainArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<TrainArgs>,
    #[serde(rename = "pseudo-label", skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<PseudoArgs>,
    #[serde(rename = "train-student", skip_serializing_if = "Option::is_none")]
    pub train_student: Option<StudentArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub render: Option<RenderArgs>,
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

pub fn read_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    path.map_or_else(|| Ok(FileConfig::default()), read_toml)
}

/// Seed fallback after flags and file: the environment, then 0.
pub fn env_seed(seed: &mut Option<u64>) -> Result<u64, CliError> {
    if seed.is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let parsed = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}=`{v}` is not an integer")))?;
            *seed = Some(parsed);
        }
    }
    Ok(*seed.get_or_insert(0))
}

pub fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::usage(format!("size `{s}` is not of the form HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

pub fn parse_interleave(s: &str) -> Result<surgidepth::semisup::Interleave, CliError> {
    let bad = || CliError::usage(format!("interleave `{s}` is not of the form L:U"));
    let (l, u) = s.split_once(':').ok_or_else(bad)?;
    let labeled: usize = l.trim().parse().map_err(|_| bad())?;
    let unlabeled: usize = u.trim().parse().map_err(|_| bad())?;
    if labeled + unlabeled == 0 {
        return Err(bad());
    }
    Ok(surgidepth::semisup::Interleave { labeled, unlabeled })
}

pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

pub fn write_resolved(out: &Path, config: &FileConfig) -> Result<(), CliError> {
    let text = toml::to_string(config)
        .map_err(|e| CliError::data("write-config", format!("cannot serialise config: {e}")))?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    surgidepth::write_atomic(&path, text.as_bytes())
        .map_err(|e| CliError::data("write-config", format!("{}: {e}", path.display())))
}
